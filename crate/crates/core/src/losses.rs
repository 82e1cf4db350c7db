//! Training objectives for the occupancy and detection branches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classes::{det_index, FREE, NUM_DET_CLASSES};
use crate::detection::{encode_box, match_queries, DetectionOutput, MatchResult, BOX_CODE};
use crate::error::{Error, Result};
use crate::geometry::{BBox3D, GridSpec};
use crate::tensor::{Real, Tensor};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the occupancy objective in the total.
    pub lambda: f64,
    pub occ_gamma: f64,
    pub occ_alpha: f64,
    pub det_gamma: f64,
    pub det_alpha: f64,
    pub match_class_weight: f64,
    pub match_box_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 2.0,
            occ_gamma: 2.0,
            occ_alpha: 1.0,
            det_gamma: 2.0,
            det_alpha: 0.25,
            match_class_weight: 1.0,
            match_box_weight: 0.25,
        }
    }
}

/// Scalar loss values keyed by term name, plus totals. Serializes as one
/// flat JSON object of numbers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(flatten)]
    pub terms: BTreeMap<String, f64>,
    pub occ_total: f64,
    pub det_total: f64,
    pub total: f64,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl LossReport {
    /// First term (or total) that is negative or not finite.
    pub fn first_invalid(&self) -> Option<(String, f64)> {
        self.terms
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .chain([
                ("occ_total".to_string(), self.occ_total),
                ("det_total".to_string(), self.det_total),
                ("total".to_string(), self.total),
            ])
            .find(|(_, v)| !v.is_finite() || *v < 0.0)
    }

    fn merge(&mut self, other: LossReport) {
        self.terms.extend(other.terms);
        self.warnings.extend(other.warnings);
    }
}

/// A scalar loss tensor with the warnings raised while computing it.
pub struct Loss<T: Real> {
    pub value: Tensor<T>,
    pub warnings: Vec<String>,
}

fn check_items<T: Real>(op: &'static str, probs: &Tensor<T>, targets: &[usize]) -> Result<(usize, usize)> {
    if probs.ndim() != 2 || probs.shape()[0] != targets.len() {
        return Err(Error::shape(op, format!("probs {:?} for {} targets", probs.shape(), targets.len())));
    }
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Contract(format!("{op}: target class {t} out of {k}")));
    }
    if n == 0 {
        return Err(Error::Contract(format!("{op}: no items")));
    }
    Ok((n, k))
}

/// `-alpha (1 - p_t)^gamma log p_t` per item, weighted by `weights` and
/// summed. `p_t` below the floor is clamped and reported.
fn focal_weighted<T: Real>(
    probs: &Tensor<T>,
    targets: &[usize],
    gamma: f64,
    alpha: f64,
    weights: Vec<f64>,
) -> Result<Loss<T>> {
    let (n, k) = check_items("focal_loss", probs, targets)?;
    let idx: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * k + t).collect();
    let pt = probs.reshape(&[n * k, 1])?.gather_rows(&idx)?;
    let mut warnings = Vec::new();
    let low = pt.to_f64_vec().iter().filter(|&&p| p < PROB_FLOOR).count();
    if low > 0 {
        warnings.push(format!("focal_loss: {low} target probabilities clamped to {PROB_FLOOR:e}"));
    }
    let p = pt.clamp(PROB_FLOOR, 1.0)?;
    let log_p = p.log()?;
    let per_item = if gamma == 0.0 {
        log_p
    } else {
        p.neg()?.add_scalar(1.0)?.clamp(0.0, 1.0)?.powf(gamma)?.mul(&log_p)?
    };
    let w = Tensor::from_f64(&weights.iter().map(|w| -alpha * w).collect::<Vec<_>>(), &[n, 1])?;
    Ok(Loss { value: per_item.mul(&w)?.sum()?, warnings })
}

/// Focal loss averaged over items. `probs: [N, K]` rows are distributions.
pub fn focal_loss<T: Real>(probs: &Tensor<T>, targets: &[usize], gamma: f64, alpha: f64) -> Result<Loss<T>> {
    let n = targets.len().max(1);
    focal_weighted(probs, targets, gamma, alpha, vec![1.0 / n as f64; targets.len()])
}

/// Focal loss averaged within each target class, then over the classes
/// present.
pub fn focal_loss_class_mean<T: Real>(probs: &Tensor<T>, targets: &[usize], gamma: f64, alpha: f64) -> Result<Loss<T>> {
    let k = probs.shape().get(1).copied().unwrap_or(0);
    let mut counts = vec![0usize; k.max(1)];
    for &t in targets {
        if t < k {
            counts[t] += 1;
        }
    }
    let present = counts.iter().filter(|&&c| c > 0).count().max(1) as f64;
    let w = targets.iter().map(|&t| if t < k { 1.0 / (counts[t] as f64 * present) } else { 0.0 }).collect();
    focal_weighted(probs, targets, gamma, alpha, w)
}

/// Gradient of the Lovász extension of the Jaccard loss at a ground-truth
/// indicator sorted by decreasing error.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let total = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut out = Vec::with_capacity(gt_sorted.len());
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let jaccard = 1.0 - (total - tp) / (total + fp);
        out.push(jaccard - prev);
        prev = jaccard;
    }
    out
}

/// Lovász-softmax over the classes present in `targets` (optionally
/// restricted to `classes`).
pub fn lovasz_softmax<T: Real>(probs: &Tensor<T>, targets: &[usize], classes: Option<&[usize]>) -> Result<Loss<T>> {
    let (n, k) = check_items("lovasz_softmax", probs, targets)?;
    let mut present = vec![false; k];
    for &t in targets {
        present[t] = true;
    }
    let chosen: Vec<usize> = match classes {
        Some(cs) => cs.iter().copied().filter(|&c| c < k && present[c]).collect(),
        None => (0..k).filter(|&c| present[c]).collect(),
    };
    if chosen.is_empty() {
        return Ok(Loss {
            value: Tensor::scalar(T::ZERO),
            warnings: vec!["lovasz_softmax: no present classes".into()],
        });
    }
    let mut acc: Option<Tensor<T>> = None;
    for &c in &chosen {
        let fg: Vec<f64> = targets.iter().map(|&t| (t == c) as u8 as f64).collect();
        let pc = probs.narrow(1, c, 1)?;
        let err = Tensor::from_f64(&fg, &[n, 1])?.sub(&pc)?.abs()?;
        let ev = err.to_f64_vec();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| ev[b].total_cmp(&ev[a]));
        let gt_sorted: Vec<bool> = order.iter().map(|&i| fg[i] > 0.5).collect();
        let g = Tensor::from_f64(&lovasz_grad(&gt_sorted), &[n, 1])?;
        let term = err.gather_rows(&order)?.mul(&g)?.sum()?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    Ok(Loss { value: acc.unwrap().scale(1.0 / chosen.len() as f64)?, warnings: Vec::new() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffinityMode {
    Geometric,
    Semantic,
}

/// `-(log P + log R + log S)` averaged over classes with positives, from
/// soft precision, recall and specificity. Geometric mode scores only the
/// occupied class of the occupied/free split.
pub fn scene_class_affinity<T: Real>(probs: &Tensor<T>, targets: &[usize], mode: AffinityMode) -> Result<Loss<T>> {
    let (n, k) = check_items("scene_class_affinity", probs, targets)?;
    let free = FREE as usize;
    let columns: Vec<(Tensor<T>, Vec<f64>)> = match mode {
        AffinityMode::Geometric => {
            let occ = probs.narrow(1, free, 1)?.neg()?.add_scalar(1.0)?;
            vec![(occ, targets.iter().map(|&t| (t != free) as u8 as f64).collect())]
        }
        AffinityMode::Semantic => (0..k)
            .map(|c| Ok((probs.narrow(1, c, 1)?, targets.iter().map(|&t| (t == c) as u8 as f64).collect())))
            .collect::<Result<_>>()?,
    };
    let mut acc: Option<Tensor<T>> = None;
    let mut valid = 0usize;
    for (p, y) in columns {
        let positives: f64 = y.iter().sum();
        if positives == 0.0 {
            continue;
        }
        valid += 1;
        let yt = Tensor::from_f64(&y, &[n, 1])?;
        let hit = p.mul(&yt)?.sum()?;
        let mut terms = Vec::new();
        let p_sum = p.sum()?;
        if p_sum.to_f64_vec()[0] > 0.0 {
            terms.push(hit.div(&p_sum)?);
        }
        terms.push(hit.scale(1.0 / positives)?);
        let negatives = n as f64 - positives;
        if negatives > 0.0 {
            let inv_y = Tensor::from_f64(&y.iter().map(|v| 1.0 - v).collect::<Vec<_>>(), &[n, 1])?;
            let spec = p.neg()?.add_scalar(1.0)?.mul(&inv_y)?.sum()?.scale(1.0 / negatives)?;
            terms.push(spec);
        }
        for t in terms {
            let l = t.clamp(PROB_FLOOR, 1.0)?.log()?.neg()?;
            acc = Some(match acc {
                Some(a) => a.add(&l)?,
                None => l,
            });
        }
    }
    match acc {
        Some(a) => Ok(Loss { value: a.scale(1.0 / valid as f64)?, warnings: Vec::new() }),
        None => Ok(Loss {
            value: Tensor::scalar(T::ZERO),
            warnings: vec![format!("scene_class_affinity ({mode:?}): no class has positives")],
        }),
    }
}

/// Halves every dimension of a label grid by majority vote over each 2x2x2
/// block. Occupied labels always beat free; ties go to the lowest label.
pub fn downsample_labels(labels: &[u8], res: [usize; 3]) -> Result<(Vec<u8>, [usize; 3])> {
    if res.iter().product::<usize>() != labels.len() {
        return Err(Error::shape("downsample_labels", format!("{} labels for {res:?}", labels.len())));
    }
    if res.iter().any(|&d| d % 2 != 0) {
        return Err(Error::Contract(format!("cannot halve grid {res:?}")));
    }
    let out_res = [res[0] / 2, res[1] / 2, res[2] / 2];
    let mut out = Vec::with_capacity(labels.len() / 8);
    for i in 0..out_res[0] {
        for j in 0..out_res[1] {
            for k in 0..out_res[2] {
                let mut counts = [0u8; 256];
                for (di, dj, dk) in (0..8).map(|o| (o >> 2, (o >> 1) & 1, o & 1)) {
                    let l = labels[((2 * i + di) * res[1] + 2 * j + dj) * res[2] + 2 * k + dk];
                    counts[l as usize] += 1;
                }
                let mut best = FREE;
                for l in 0..=255u8 {
                    if l != FREE && counts[l as usize] > 0 && (best == FREE || counts[l as usize] > counts[best as usize]) {
                        best = l;
                    }
                }
                out.push(best);
            }
        }
    }
    Ok((out, out_res))
}

/// Per-scale weights `2^-l`, `l = 1` finest.
pub fn scale_weights(scales: usize) -> Vec<f64> {
    (1..=scales).map(|l| 0.5f64.powi(l as i32)).collect()
}

/// Multi-scale occupancy loss. `probs[s]: [B, K, X, Y, Z]` finest first;
/// `targets[s]` holds the `B` flattened label grids of scale `s`.
pub fn occ_loss<T: Real>(probs: &[Tensor<T>], targets: &[Vec<u8>], cfg: &LossConfig) -> Result<(Tensor<T>, LossReport)> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::Contract(format!("{} prediction scales vs {} target scales", probs.len(), targets.len())));
    }
    let mut report = LossReport::default();
    let mut total: Option<Tensor<T>> = None;
    for (s, ((p, t), w)) in probs.iter().zip(targets).zip(scale_weights(probs.len())).enumerate() {
        let shape = p.shape();
        if shape.len() != 5 {
            return Err(Error::shape("occ_loss", format!("scale {s} probabilities {shape:?}")));
        }
        let k = shape[1];
        let items = p.permute(&[0, 2, 3, 4, 1])?.reshape(&[p.numel() / k, k])?;
        let tgt: Vec<usize> = t.iter().map(|&l| l as usize).collect();
        let parts = [
            ("focal", focal_loss_class_mean(&items, &tgt, cfg.occ_gamma, cfg.occ_alpha)?),
            ("lovasz", lovasz_softmax(&items, &tgt, None)?),
            ("scal_geo", scene_class_affinity(&items, &tgt, AffinityMode::Geometric)?),
            ("scal_sem", scene_class_affinity(&items, &tgt, AffinityMode::Semantic)?),
        ];
        let mut scale_sum: Option<Tensor<T>> = None;
        for (name, loss) in parts {
            report.terms.insert(format!("occ.s{s}.{name}"), loss.value.to_f64_vec()[0]);
            report.warnings.extend(loss.warnings.into_iter().map(|m| format!("scale {s}: {m}")));
            scale_sum = Some(match scale_sum {
                Some(a) => a.add(&loss.value)?,
                None => loss.value,
            });
        }
        let weighted = scale_sum.unwrap().scale(w)?;
        total = Some(match total {
            Some(a) => a.add(&weighted)?,
            None => weighted,
        });
    }
    let total = total.unwrap();
    report.occ_total = total.to_f64_vec()[0];
    Ok((total, report))
}

/// Matching cost `[G, M]` between ground truths and one head's queries.
pub fn match_cost(class_probs: &[f64], codes: &[f64], gt: &[(usize, [f64; BOX_CODE])], cfg: &LossConfig) -> Vec<f64> {
    let k = NUM_DET_CLASSES + 1;
    let m = class_probs.len() / k;
    let mut cost = Vec::with_capacity(gt.len() * m);
    for (cls, code) in gt {
        for q in 0..m {
            let l1: f64 = codes[q * BOX_CODE..(q + 1) * BOX_CODE].iter().zip(code).map(|(a, b)| (a - b).abs()).sum();
            cost.push(-cfg.match_class_weight * class_probs[q * k + cls] + cfg.match_box_weight * l1);
        }
    }
    cost
}

/// Detection targets: class index and internal box code per ground truth.
pub fn det_targets(gt: &[BBox3D], grid: &GridSpec, default_size: [f64; 3]) -> Result<Vec<(usize, [f64; BOX_CODE])>> {
    gt.iter()
        .map(|b| {
            let c = det_index(b.class)
                .ok_or_else(|| Error::Contract(format!("class {} is not a detection class", b.class)))?;
            Ok((c, encode_box(b, grid, default_size)))
        })
        .collect()
}

/// Sum over heads of focal classification over all queries (unmatched
/// queries target background) and L1 over matched box codes.
pub fn det_loss<T: Real>(
    out: &DetectionOutput<T>,
    gt: &[BBox3D],
    grid: &GridSpec,
    default_size: [f64; 3],
    cfg: &LossConfig,
) -> Result<(Tensor<T>, LossReport, Vec<MatchResult>)> {
    let targets = det_targets(gt, grid, default_size)?;
    let mut report = LossReport::default();
    let mut total: Option<Tensor<T>> = None;
    let mut matches = Vec::new();
    for head in &out.heads {
        let m = head.class_logits.shape()[0];
        if targets.len() > m {
            return Err(Error::Contract(format!("{} ground-truth boxes exceed {m} queries", targets.len())));
        }
        let probs = head.class_logits.softmax(1)?;
        let cost = match_cost(&probs.to_f64_vec(), &head.boxes.to_f64_vec(), &targets, cfg);
        let matched = match_queries(&cost, targets.len(), m)?;
        let cls: Vec<usize> =
            matched.query_to_gt.iter().map(|g| g.map_or(NUM_DET_CLASSES, |g| targets[g].0)).collect();
        let focal = focal_loss(&probs, &cls, cfg.det_gamma, cfg.det_alpha)?;
        report.warnings.extend(focal.warnings.iter().map(|w| format!("{}: {w}", head.name())));
        let mut term = focal.value.clone();
        let l1 = if targets.is_empty() {
            0.0
        } else {
            let (qs, gs): (Vec<usize>, Vec<usize>) = matched.pairs().unzip();
            let want: Vec<f64> = gs.iter().flat_map(|&g| targets[g].1).collect();
            let diff = head.boxes.gather_rows(&qs)?.sub(&Tensor::from_f64(&want, &[qs.len(), BOX_CODE])?)?;
            let l1 = diff.abs()?.sum()?.scale(1.0 / qs.len() as f64)?;
            term = term.add(&l1)?;
            l1.to_f64_vec()[0]
        };
        report.terms.insert(format!("det.{}.focal", head.name()), focal.value.to_f64_vec()[0]);
        report.terms.insert(format!("det.{}.l1", head.name()), l1);
        total = Some(match total {
            Some(a) => a.add(&term)?,
            None => term,
        });
        matches.push(matched);
    }
    let total = total.ok_or_else(|| Error::Contract("detection output has no heads".into()))?;
    report.det_total = total.to_f64_vec()[0];
    Ok((total, report, matches))
}

/// `det + lambda * occ`.
pub fn total_loss<T: Real>(occ: &Tensor<T>, det: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    det.add(&occ.scale(lambda)?)
}

/// Combines the branch reports; `det` is absent when the auxiliary branch
/// is off.
pub fn combine_reports(occ: LossReport, det: Option<LossReport>, lambda: f64) -> LossReport {
    let mut r = LossReport { occ_total: occ.occ_total, ..Default::default() };
    r.merge(occ);
    if let Some(d) = det {
        r.det_total = d.det_total;
        r.merge(d);
    }
    r.total = r.det_total + lambda * r.occ_total;
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{CaModule, HeadOutput};
    use crate::tensor::gradcheck::gradient_check_many;
    use proptest::prelude::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec(), shape).unwrap()
    }

    fn val(l: Loss<f64>) -> f64 {
        l.value.item()
    }

    #[test]
    fn focal_closed_forms() {
        let p = t(&[0.5, 0.5], &[1, 2]);
        assert!((val(focal_loss(&p, &[0], 0.0, 1.0).unwrap()) - 2f64.ln()).abs() < 1e-12);
        assert!((val(focal_loss(&p, &[0], 2.0, 1.0).unwrap()) - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(val(focal_loss(&t(&[1.0, 0.0], &[1, 2]), &[0], 2.0, 0.25).unwrap()), 0.0);
        let clamped = focal_loss(&t(&[1.0, 0.0], &[1, 2]), &[1], 2.0, 1.0).unwrap();
        assert_eq!(clamped.warnings.len(), 1);
        assert!((clamped.value.item() - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn class_mean_focal_balances_classes() {
        let p = t(&[0.5, 0.5, 0.5, 0.5, 0.9, 0.1], &[3, 2]);
        let got = val(focal_loss_class_mean(&p, &[0, 0, 1], 0.0, 1.0).unwrap());
        let want = 0.5 * (0.5 * (-(0.5f64).ln()) * 2.0) + 0.5 * (-(0.1f64).ln());
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn lovasz_closed_forms() {
        let p = t(&[0.7, 0.3], &[1, 2]);
        assert!((val(lovasz_softmax(&p, &[1], Some(&[1])).unwrap()) - 0.7).abs() < 1e-12);
        let perfect = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(val(lovasz_softmax(&perfect, &[0, 1], None).unwrap()), 0.0);
        let none = lovasz_softmax(&p, &[0], Some(&[1])).unwrap();
        assert_eq!(none.value.item(), 0.0);
        assert_eq!(none.warnings.len(), 1);
    }

    /// Jaccard loss of the mispredicted set `m` for foreground `fg`.
    fn jaccard_set_loss(m: &[bool], fg: &[bool]) -> f64 {
        let inter = fg.iter().zip(m).filter(|(f, m)| **f && !**m).count() as f64;
        let union = fg.iter().zip(m).filter(|(f, m)| **f || **m).count() as f64;
        if union == 0.0 {
            0.0
        } else {
            1.0 - inter / union
        }
    }

    /// Lovász extension evaluated from its definition over nested sets.
    fn lovasz_oracle(probs: &[f64], k: usize, targets: &[usize]) -> f64 {
        let n = targets.len();
        let mut sum = 0.0;
        let mut count = 0;
        for c in 0..k {
            let fg: Vec<bool> = targets.iter().map(|&t| t == c).collect();
            if !fg.iter().any(|&f| f) {
                continue;
            }
            count += 1;
            let e: Vec<f64> = (0..n).map(|i| if fg[i] { 1.0 - probs[i * k + c] } else { probs[i * k + c] }).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| e[b].total_cmp(&e[a]));
            let mut set = vec![false; n];
            let mut prev = 0.0;
            for &i in &order {
                set[i] = true;
                let cur = jaccard_set_loss(&set, &fg);
                sum += e[i] * (cur - prev);
                prev = cur;
            }
        }
        sum / count as f64
    }

    fn random_probs(seed: u64, n: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            p.extend(row.iter().map(|v| v / s));
        }
        let targets = (0..n).map(|_| rng.random_range(0..k)).collect();
        (p, targets)
    }

    #[test]
    fn lovasz_matches_set_definition() {
        for seed in 0..5 {
            let (p, tg) = random_probs(seed, 20, 4);
            let got = val(lovasz_softmax(&t(&p, &[20, 4]), &tg, None).unwrap());
            assert!((got - lovasz_oracle(&p, 4, &tg)).abs() < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn lovasz_binary_hard_is_one_minus_jaccard() {
        let pred = [1, 1, 0, 0, 1, 0];
        let gt = [1, 0, 0, 1, 1, 0];
        let probs: Vec<f64> = pred.iter().flat_map(|&c| if c == 1 { [0.0, 1.0] } else { [1.0, 0.0] }).collect();
        let tg: Vec<usize> = gt.to_vec();
        let got = val(lovasz_softmax(&t(&probs, &[6, 2]), &tg, Some(&[1])).unwrap());
        // Foreground {0,3,4}, predicted {0,1,4}: IoU 2/4.
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn affinity_closed_forms() {
        let perfect = t(&[0.0, 1.0, 1.0, 0.0], &[2, 2]);
        assert_eq!(val(scene_class_affinity(&perfect, &[1, 0], AffinityMode::Geometric).unwrap()), 0.0);
        let uniform = t(&[0.5; 8], &[4, 2]);
        let got = val(scene_class_affinity(&uniform, &[0, 1, 0, 1], AffinityMode::Geometric).unwrap());
        assert!((got - 3.0 * 2f64.ln()).abs() < 1e-12);
        let empty = scene_class_affinity(&uniform, &[0, 0, 0, 0], AffinityMode::Geometric).unwrap();
        assert_eq!(empty.value.item(), 0.0);
        assert_eq!(empty.warnings.len(), 1);
    }

    #[test]
    fn semantic_affinity_matches_soft_counts() {
        let (p, tg) = random_probs(9, 24, 3);
        let got = val(scene_class_affinity(&t(&p, &[24, 3]), &tg, AffinityMode::Semantic).unwrap());
        let mut sum = 0.0;
        let mut valid = 0;
        for c in 0..3 {
            let (mut tp, mut ps, mut pos, mut tn, mut neg) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..24 {
                let (pi, yi) = (p[i * 3 + c], (tg[i] == c) as u8 as f64);
                tp += pi * yi;
                ps += pi;
                pos += yi;
                tn += (1.0 - pi) * (1.0 - yi);
                neg += 1.0 - yi;
            }
            if pos == 0.0 {
                continue;
            }
            valid += 1;
            sum -= (tp / ps).ln() + (tp / pos).ln() + (tn / neg).ln();
        }
        assert!((got - sum / valid as f64).abs() < 1e-6);
    }

    #[test]
    fn downsampling_prefers_occupied_then_lowest() {
        let mut block = vec![0u8; 8];
        block[3] = 5;
        assert_eq!(downsample_labels(&block, [2, 2, 2]).unwrap().0, vec![5]);
        let tie = vec![7, 7, 3, 3, 0, 0, 0, 0];
        assert_eq!(downsample_labels(&tie, [2, 2, 2]).unwrap().0, vec![3]);
        assert_eq!(downsample_labels(&[0u8; 8], [2, 2, 2]).unwrap().0, vec![0]);
        assert!(downsample_labels(&[0u8; 12], [3, 2, 2]).is_err());
    }

    #[test]
    fn scale_weight_arithmetic() {
        let w = scale_weights(4);
        assert_eq!(w, vec![0.5, 0.25, 0.125, 0.0625]);
        assert_eq!(w.iter().sum::<f64>(), 1.0 - 0.5f64.powi(4));
    }

    fn one_hot(labels: &[u8], k: usize) -> Vec<f64> {
        // `[1, K, N, 1, 1]` layout: class-major.
        let n = labels.len();
        let mut v = vec![0.0; k * n];
        for (i, &l) in labels.iter().enumerate() {
            v[l as usize * n + i] = 1.0;
        }
        v
    }

    #[test]
    fn perfect_occupancy_prediction_is_zero() {
        let labels = [0u8, 0, 1, 2, 0, 2, 1, 0];
        let p = t(&one_hot(&labels, 3), &[1, 3, 8, 1, 1]);
        let (l, r) = occ_loss(&[p], &[labels.to_vec()], &LossConfig::default()).unwrap();
        assert_eq!(l.item(), 0.0);
        assert_eq!(r.occ_total, 0.0);
    }

    #[test]
    fn single_scale_weight_is_half() {
        let (p, tg) = random_probs(4, 8, 3);
        // Rearrange item-major probs into `[1, 3, 8, 1, 1]`.
        let cm: Vec<f64> = (0..3).flat_map(|c| (0..8).map(move |i| (i, c))).map(|(i, c)| p[i * 3 + c]).collect();
        let labels: Vec<u8> = tg.iter().map(|&x| x as u8).collect();
        let (l, r) = occ_loss(&[t(&cm, &[1, 3, 8, 1, 1])], &[labels], &LossConfig::default()).unwrap();
        let sum: f64 = r.terms.values().sum();
        assert!((l.item() - sum / 2.0).abs() < 1e-12);
        assert!(occ_loss(&[t(&cm, &[1, 3, 8, 1, 1])], &[], &LossConfig::default()).is_err());
    }

    #[test]
    fn total_and_report() {
        let two = Tensor::<f64>::scalar(1.0);
        assert_eq!(total_loss(&two, &two, 2.0).unwrap().item(), 3.0);
        assert_eq!(total_loss(&two, &two, 0.0).unwrap().item(), 1.0);
        let occ = LossReport { occ_total: 1.5, terms: [("a".into(), 1.5)].into(), ..Default::default() };
        let det = LossReport { det_total: 0.5, terms: [("b".into(), 0.5)].into(), ..Default::default() };
        let r = combine_reports(occ, Some(det), 2.0);
        assert_eq!(r.total, 3.5);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.as_object().unwrap().values().all(|v| v.is_number()));
        assert_eq!(json["a"], 1.5);
    }

    fn softmax_rows(logits: &Tensor<f64>) -> Result<Tensor<f64>> {
        logits.softmax(1)
    }

    #[test]
    fn losses_pass_gradient_check() {
        let (p, tg) = random_probs(1, 6, 3);
        let logits: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let input = [(logits, vec![6, 3])];
        let tg2 = tg.clone();
        let r = gradient_check_many(
            move |x| focal_loss(&softmax_rows(&x[0])?, &tg2, 2.0, 0.25).map(|l| l.value),
            &input,
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let tg2 = tg.clone();
        let r = gradient_check_many(
            move |x| lovasz_softmax(&softmax_rows(&x[0])?, &tg2, None).map(|l| l.value),
            &input,
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        for mode in [AffinityMode::Geometric, AffinityMode::Semantic] {
            let tg2 = tg.clone();
            let r = gradient_check_many(
                move |x| scene_class_affinity(&softmax_rows(&x[0])?, &tg2, mode).map(|l| l.value),
                &input,
                1e-6,
                1e-3,
            )
            .unwrap();
            assert!(r.passed, "{mode:?} {r:?}");
        }
    }

    fn head(layer: usize, module: CaModule, logits: Vec<f64>, boxes: Vec<f64>) -> HeadOutput<f64> {
        let m = boxes.len() / BOX_CODE;
        HeadOutput {
            layer,
            module,
            class_logits: t(&logits, &[m, NUM_DET_CLASSES + 1]),
            boxes: t(&boxes, &[m, BOX_CODE]),
        }
    }

    #[test]
    fn empty_scene_background_is_nearly_free() {
        let mut logits = vec![0.0; 2 * (NUM_DET_CLASSES + 1)];
        logits[NUM_DET_CLASSES] = 40.0;
        logits[2 * NUM_DET_CLASSES + 1] = 40.0;
        let out = DetectionOutput { heads: vec![head(0, CaModule::Visual, logits, vec![0.5; 20])], points: vec![] };
        let (l, r, m) = det_loss(&out, &[], &GridSpec::default(), [2.0, 1.5, 1.5], &LossConfig::default()).unwrap();
        assert!(l.item() < 1e-12);
        assert_eq!(r.terms["det.l1_visual.l1"], 0.0);
        assert_eq!(m[0].num_matched(), 0);
    }

    #[test]
    fn perfect_box_has_zero_l1_and_eighteen_pairs() {
        let grid = GridSpec::default();
        let size = [2.0, 1.5, 1.5];
        let gt = BBox3D::from_params([3.0, -4.0, 0.0, 4.0, 1.6, 1.8, 0.4, 0.0, 0.0], 4).unwrap();
        let code = encode_box(&gt, &grid, size);
        let mut boxes = vec![0.0; 2 * BOX_CODE];
        boxes[BOX_CODE..].copy_from_slice(&code);
        let mut logits = vec![0.0; 2 * (NUM_DET_CLASSES + 1)];
        logits[NUM_DET_CLASSES + 1 + det_index(4).unwrap()] = 40.0;
        let mut heads = Vec::new();
        for layer in 0..6 {
            for module in [CaModule::Visual, CaModule::Bev, CaModule::Volume] {
                heads.push(head(layer, module, logits.clone(), boxes.clone()));
            }
        }
        let out = DetectionOutput { heads, points: vec![] };
        let (_, r, m) = det_loss(&out, &[gt], &grid, size, &LossConfig::default()).unwrap();
        assert_eq!(r.terms.len(), 36);
        assert!(r.terms.keys().filter(|k| k.ends_with(".l1")).all(|k| r.terms[k] == 0.0));
        assert!(m.iter().all(|m| m.query_to_gt == vec![None, Some(0)]));
        let too_many = vec![gt; 3];
        assert!(det_loss(&out, &too_many, &grid, size, &LossConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn losses_non_negative(seed in 0u64..500, n in 2usize..12) {
            let (p, tg) = random_probs(seed, n, 4);
            let x = t(&p, &[n, 4]);
            prop_assert!(val(focal_loss(&x, &tg, 2.0, 0.25).unwrap()) >= 0.0);
            prop_assert!(val(lovasz_softmax(&x, &tg, None).unwrap()) >= 0.0);
            prop_assert!(val(scene_class_affinity(&x, &tg, AffinityMode::Semantic).unwrap()) >= 0.0);
            prop_assert!(val(scene_class_affinity(&x, &tg, AffinityMode::Geometric).unwrap()) >= 0.0);
        }
    }
}
