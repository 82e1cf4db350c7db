//! Voxel-level evaluation: confusion counts, per-class IoU, mIoU and
//! range-binned reports.

use serde::{Deserialize, Serialize};

use crate::classes::{CLASS_NAMES, FREE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, OccupancyGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    /// `None` when the class appears in neither prediction nor truth.
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Per-label counts (index 0 is free space) plus occupied-vs-free counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: Vec<Counts>,
    pub binary: Counts,
    pub voxels: u64,
}

impl Default for ConfusionCounts {
    fn default() -> Self {
        ConfusionCounts { classes: vec![Counts::default(); NUM_CLASSES], binary: Counts::default(), voxels: 0 }
    }
}

impl ConfusionCounts {
    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.add(b);
        }
        self.binary.add(&other.binary);
        self.voxels += other.voxels;
    }
}

/// Counts over the voxels where `mask` is true (all voxels without a mask).
pub fn confusion(pred: &OccupancyGrid, gt: &OccupancyGrid, mask: Option<&[bool]>) -> Result<ConfusionCounts> {
    if pred.resolution != gt.resolution || pred.labels.len() != gt.labels.len() {
        return Err(Error::Contract(format!(
            "prediction grid {:?} vs ground truth {:?}",
            pred.resolution, gt.resolution
        )));
    }
    if let Some(m) = mask {
        if m.len() != gt.labels.len() {
            return Err(Error::Contract(format!("mask of {} for {} voxels", m.len(), gt.labels.len())));
        }
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.labels.iter().zip(&gt.labels).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if p >= NUM_CLASSES || g >= NUM_CLASSES {
            return Err(Error::Contract(format!("label {} out of range", p.max(g))));
        }
        c.voxels += 1;
        if p == g {
            c.classes[p].tp += 1;
        } else {
            c.classes[p].fp += 1;
            c.classes[g].fn_ += 1;
        }
        let (po, go) = (p != FREE as usize, g != FREE as usize);
        match (po, go) {
            (true, true) => c.binary.tp += 1,
            (true, false) => c.binary.fp += 1,
            (false, true) => c.binary.fn_ += 1,
            _ => {}
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Semantic classes in label order (free first only when included).
    pub classes: Vec<ClassIou>,
    pub miou: Option<f64>,
    /// Mean over the classes present in prediction or ground truth.
    pub miou_present: Option<f64>,
    /// Occupied-vs-free IoU.
    pub scene_iou: Option<f64>,
    pub counts: ConfusionCounts,
}

/// IoU per class and their mean over the semantic classes. Absent classes
/// are reported as `None` and count as 0 in the mean; the mean itself is
/// `None` when every class is absent.
pub fn iou_scores(counts: &ConfusionCounts, include_free: bool) -> MetricsReport {
    let first = if include_free { 0 } else { 1 };
    let classes: Vec<ClassIou> = (first..NUM_CLASSES)
        .map(|c| ClassIou { class: CLASS_NAMES[c].to_string(), iou: counts.classes[c].iou() })
        .collect();
    let any = classes.iter().any(|c| c.iou.is_some());
    let miou = any.then(|| classes.iter().map(|c| c.iou.unwrap_or(0.0)).sum::<f64>() / classes.len() as f64);
    let present: Vec<f64> = classes.iter().filter_map(|c| c.iou).collect();
    let miou_present = any.then(|| present.iter().sum::<f64>() / present.len() as f64);
    MetricsReport { classes, miou, miou_present, scene_iou: counts.binary.iou(), counts: counts.clone() }
}

pub fn evaluate(pred: &OccupancyGrid, gt: &OccupancyGrid, include_free: bool) -> Result<MetricsReport> {
    Ok(iou_scores(&confusion(pred, gt, None)?, include_free))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeBin {
    pub radius: f64,
    pub report: MetricsReport,
}

/// Voxels whose centre lies within Chebyshev distance `radius` of the
/// origin in the ground plane.
pub fn range_mask(spec: &GridSpec, radius: f64) -> Vec<bool> {
    spec.voxel_centers().iter().map(|c| c[0].abs().max(c[1].abs()) <= radius).collect()
}

/// One report per radius. Radii beyond the grid's planar reach are clamped
/// to it and a warning is returned for each.
pub fn range_binned_eval(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    spec: &GridSpec,
    radii: &[f64],
    include_free: bool,
) -> Result<(Vec<RangeBin>, Vec<String>)> {
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Contract(format!("range radii must increase: {radii:?}")));
    }
    if gt.resolution != spec.resolution {
        return Err(Error::Contract(format!("grid {:?} vs spec {:?}", gt.resolution, spec.resolution)));
    }
    let reach = [spec.min[0].abs(), spec.max[0].abs(), spec.min[1].abs(), spec.max[1].abs()]
        .into_iter()
        .fold(0.0, f64::max);
    let mut warnings = Vec::new();
    let mut bins = Vec::new();
    for &r in radii {
        let radius = if r > reach {
            warnings.push(format!("range {r} m exceeds grid extent, clamped to {reach} m"));
            reach
        } else {
            r
        };
        let mask = range_mask(spec, radius);
        bins.push(RangeBin { radius, report: iou_scores(&confusion(pred, gt, Some(&mask))?, include_free) });
    }
    Ok((bins, warnings))
}

/// Fixed-order text table of a report, percentages with two decimals.
pub fn render_table(report: &MetricsReport) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
    let mut s = format!("{:<22}{:>8}\n", "class", "IoU");
    for c in &report.classes {
        s += &format!("{:<22}{:>8}\n", c.class, pct(c.iou));
    }
    s += &format!("{:<22}{:>8}\n", "mIoU", pct(report.miou));
    s += &format!("{:<22}{:>8}\n", "mIoU (present)", pct(report.miou_present));
    s += &format!("{:<22}{:>8}\n", "scene IoU", pct(report.scene_iou));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(labels: Vec<u8>) -> OccupancyGrid {
        OccupancyGrid::new([8, 8, 4], labels).unwrap()
    }

    fn oracle(pred: &[u8], gt: &[u8], mask: &[bool]) -> (Vec<[u64; 3]>, [u64; 3]) {
        let mut per = vec![[0u64; 3]; NUM_CLASSES];
        for c in 0..NUM_CLASSES as u8 {
            for i in 0..pred.len() {
                if !mask[i] {
                    continue;
                }
                let (p, g) = (pred[i] == c, gt[i] == c);
                per[c as usize][0] += (p && g) as u64;
                per[c as usize][1] += (p && !g) as u64;
                per[c as usize][2] += (!p && g) as u64;
            }
        }
        let mut bin = [0u64; 3];
        for i in 0..pred.len() {
            if mask[i] {
                let (p, g) = (pred[i] != 0, gt[i] != 0);
                bin[0] += (p && g) as u64;
                bin[1] += (p && !g) as u64;
                bin[2] += (!p && g) as u64;
            }
        }
        (per, bin)
    }

    #[test]
    fn perfect_and_all_miss() {
        let mut gt = vec![0u8; 256];
        gt[..10].fill(3);
        let c = confusion(&grid(gt.clone()), &grid(gt.clone()), None).unwrap();
        assert!(c.classes.iter().all(|k| k.fp == 0 && k.fn_ == 0));
        let r = iou_scores(&c, false);
        assert_eq!(r.classes[2].iou, Some(1.0));
        assert_eq!(r.classes[0].iou, None);
        assert_eq!(r.miou, Some(1.0 / 16.0));
        assert_eq!(r.miou_present, Some(1.0));
        let miss = confusion(&grid(vec![0; 256]), &grid(gt), None).unwrap();
        assert_eq!((miss.classes[3].tp, miss.classes[3].fn_), (0, 10));
    }

    #[test]
    fn iou_arithmetic() {
        assert_eq!(Counts { tp: 5, fp: 3, fn_: 2 }.iou(), Some(0.5));
        let mut c = ConfusionCounts::default();
        for k in &mut c.classes[1..] {
            k.tp = 4;
        }
        assert_eq!(iou_scores(&c, false).miou, Some(1.0));
        assert_eq!(iou_scores(&c, true).classes.len(), 17);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let a = OccupancyGrid::empty([8, 8, 4]);
        let b = OccupancyGrid::empty([8, 8, 2]);
        assert!(matches!(confusion(&a, &b, None), Err(Error::Contract(_))));
        assert!(confusion(&a, &a, Some(&[true; 3])).is_err());
    }

    #[test]
    fn range_bins_cover_and_clamp() {
        let spec = GridSpec::new([-4.0, -4.0, -1.0], [4.0, 4.0, 1.0], [8, 8, 4]).unwrap();
        let mut gt = vec![0u8; 256];
        // One voxel near the origin, one at the edge.
        gt[spec.index(4, 4, 0)] = 2;
        gt[spec.index(0, 0, 0)] = 5;
        let (g, p) = (grid(gt), grid(vec![0; 256]));
        let (bins, warn) = range_binned_eval(&p, &g, &spec, &[0.1, 1.0, 50.0], false).unwrap();
        assert_eq!(warn.len(), 1);
        assert!(bins[0].report.classes.iter().all(|c| c.iou.is_none()));
        assert_eq!(bins[0].report.miou, None);
        assert_eq!(bins[1].report.counts.classes[2].fn_, 1);
        assert_eq!(bins[1].report.counts.classes[5].fn_, 0);
        assert_eq!(bins[2].report, evaluate(&p, &g, false).unwrap());
        assert!(range_binned_eval(&p, &g, &spec, &[2.0, 1.0], false).is_err());
    }

    #[test]
    fn table_has_fixed_rows() {
        let r = iou_scores(&ConfusionCounts::default(), false);
        let t = render_table(&r);
        assert_eq!(t.lines().count(), 1 + 16 + 3);
        assert!(t.lines().nth(1).unwrap().starts_with("barrier"));
    }

    proptest! {
        #[test]
        fn counts_match_voxel_loop(
            pred in prop::collection::vec(0u8..17, 256),
            gt in prop::collection::vec(0u8..17, 256),
            mask in prop::collection::vec(any::<bool>(), 256),
        ) {
            let c = confusion(&grid(pred.clone()), &grid(gt.clone()), Some(&mask)).unwrap();
            let (per, bin) = oracle(&pred, &gt, &mask);
            for k in 0..NUM_CLASSES {
                prop_assert_eq!([c.classes[k].tp, c.classes[k].fp, c.classes[k].fn_], per[k]);
            }
            prop_assert_eq!([c.binary.tp, c.binary.fp, c.binary.fn_], bin);
            let swapped = confusion(&grid(gt), &grid(pred), Some(&mask)).unwrap();
            for k in 0..NUM_CLASSES {
                prop_assert_eq!(c.classes[k].tp, swapped.classes[k].tp);
            }
        }

        #[test]
        fn bins_nest(gt in prop::collection::vec(0u8..17, 256), pred in prop::collection::vec(0u8..17, 256)) {
            let spec = GridSpec::new([-4.0, -4.0, -1.0], [4.0, 4.0, 1.0], [8, 8, 4]).unwrap();
            let (bins, _) = range_binned_eval(&grid(pred), &grid(gt), &spec, &[0.5, 1.5, 2.5, 4.0], false).unwrap();
            for w in bins.windows(2) {
                for (a, b) in w[0].report.counts.classes.iter().zip(&w[1].report.counts.classes) {
                    prop_assert!(a.tp <= b.tp && a.fp <= b.fp && a.fn_ <= b.fn_);
                }
            }
        }

        #[test]
        fn adding_correct_voxel_never_lowers_iou(
            gt in prop::collection::vec(0u8..4, 256),
            pred in prop::collection::vec(0u8..4, 256),
            at in 0usize..256,
        ) {
            let before = evaluate(&grid(pred.clone()), &grid(gt.clone()), true).unwrap();
            let mut fixed = pred.clone();
            fixed[at] = gt[at];
            let after = evaluate(&grid(fixed), &grid(gt), true).unwrap();
            for (a, b) in before.classes.iter().zip(&after.classes) {
                if let (Some(x), Some(y)) = (a.iou, b.iou) {
                    prop_assert!(y >= x - 1e-12);
                }
            }
        }
    }
}
