//! Optimization loop: forward, losses, backward and AdamW per step.

use std::io::Write;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::OccupancyGrid;
use crate::losses::{combine_reports, det_loss, downsample_labels, occ_loss, total_loss, LossReport};
use crate::metrics::{confusion, iou_scores, ConfusionCounts, MetricsReport};
use crate::model::OccModel;
use crate::synth::Sample;
use crate::tensor::optim::OptimizerState;
use crate::tensor::Tensor;

/// Label grids at the finest resolution and each halving below it.
pub fn target_pyramid(grid: &OccupancyGrid, scales: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = vec![grid.labels.clone()];
    let mut res = grid.resolution;
    for _ in 1..scales {
        let (next, r) = downsample_labels(out.last().unwrap(), res)?;
        out.push(next);
        res = r;
    }
    Ok(out)
}

/// Stacks the samples' images into one `[B, N, 3, H, W]` batch.
pub fn batch_images(samples: &[Sample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (w, h) = first.rig.image_size()?;
    let mut data = Vec::with_capacity(samples.len() * first.images.len());
    for s in samples {
        if s.rig != first.rig {
            return Err(Error::Contract("samples in a batch must share the camera rig".into()));
        }
        data.extend_from_slice(&s.images);
    }
    Tensor::from_vec(data, &[samples.len(), first.rig.len(), 3, h, w])
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct StepLog<'a> {
    pub step: usize,
    #[serde(flatten)]
    pub report: &'a LossReport,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: OccModel,
    pub opt: OptimizerState<f32>,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, model: OccModel) -> Self {
        let opt = OptimizerState::new(&model.store.params(), cfg.optim);
        Trainer { cfg: cfg.clone(), model, opt, step: 0 }
    }

    /// Loss of a batch with the graph attached, plus its report.
    pub fn losses(&self, batch: &[Sample], train: bool, mask_seed: Option<u64>) -> Result<(Tensor<f32>, LossReport)> {
        let images = batch_images(batch)?;
        let out = self.model.forward(&images, train, self.model.has_aux(), mask_seed)?;
        let scales = out.probs.len();
        let mut targets = vec![Vec::new(); scales];
        for s in batch {
            for (t, labels) in targets.iter_mut().zip(target_pyramid(&s.occupancy, scales)?) {
                t.extend(labels);
            }
        }
        let (occ, occ_report) = occ_loss(&out.probs, &targets, &self.cfg.loss)?;
        let lambda = self.cfg.loss.lambda;
        let (total, report) = match self.model.detection() {
            Some(det) => {
                let mut det_sum: Option<Tensor<f32>> = None;
                let mut det_report = LossReport::default();
                for (b, (o, s)) in out.detection.iter().zip(batch).enumerate() {
                    let (l, mut r, _) = det_loss(o, &s.boxes, &self.model.grid, det.cfg.default_size, &self.cfg.loss)?;
                    if batch.len() > 1 {
                        r.terms = r.terms.into_iter().map(|(k, v)| (format!("b{b}.{k}"), v)).collect();
                    }
                    det_report.terms.extend(r.terms);
                    det_report.warnings.extend(r.warnings);
                    det_sum = Some(match det_sum {
                        Some(a) => a.add(&l)?,
                        None => l,
                    });
                }
                let det = det_sum.unwrap().scale(1.0 / batch.len() as f64)?;
                det_report.det_total = det.to_f64_vec()[0];
                (total_loss(&occ, &det, lambda)?, combine_reports(occ_report, Some(det_report), lambda))
            }
            None => (occ.scale(lambda)?, combine_reports(occ_report, None, lambda)),
        };
        Ok((total, report))
    }

    /// One optimization step; fails before updating if any loss term is
    /// negative or non-finite.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LossReport> {
        let mask_seed = self.cfg.train.augment.then(|| self.cfg.seed ^ (self.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        self.model.store.zero_grad();
        let (total, report) = self.losses(batch, true, mask_seed)?;
        if let Some((term, value)) = report.first_invalid() {
            return Err(Error::BadLoss { term, value });
        }
        total.backward()?;
        self.model.store.fill_missing_grads();
        self.opt.step(&self.model.store.params())?;
        self.step += 1;
        Ok(report)
    }

    /// Runs `steps` steps over `data` (cycled), writing one JSON line per
    /// step to `log`.
    pub fn run(&mut self, data: &[Sample], steps: usize, mut log: Option<&mut dyn Write>) -> Result<Vec<LossReport>> {
        if data.is_empty() && steps > 0 {
            return Err(Error::Contract("no training samples".into()));
        }
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            let i = self.step % data.len();
            let report = self.train_step(&data[i..i + 1])?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &StepLog { step: self.step, report: &report })?;
                w.write_all(b"\n")?;
            }
            reports.push(report);
        }
        Ok(reports)
    }

    /// Aggregated confusion and scores of inference on `data`.
    pub fn evaluate(&self, data: &[Sample], include_free: bool) -> Result<MetricsReport> {
        evaluate_model(&self.model, data, include_free)
    }
}

pub fn evaluate_model(model: &OccModel, data: &[Sample], include_free: bool) -> Result<MetricsReport> {
    let mut counts = ConfusionCounts::default();
    for s in data {
        let pred = model.predict(&s.image_tensor()?)?;
        counts.merge(&confusion(&pred[0], &s.occupancy, None)?);
    }
    Ok(iou_scores(&counts, include_free))
}

/// Means of consecutive non-overlapping windows of `values`.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values.chunks_exact(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct OverfitResult {
    pub steps: usize,
    pub scene_iou: f64,
    pub reached: bool,
    pub losses: Vec<f64>,
}

/// Trains on one sample until inference reaches `target_iou` occupied-IoU
/// (checked every `check_every` steps) or `max_steps` is spent.
pub fn overfit(trainer: &mut Trainer, sample: &Sample, max_steps: usize, check_every: usize, target_iou: f64) -> Result<OverfitResult> {
    let mut losses = Vec::new();
    let mut iou = 0.0;
    let data = std::slice::from_ref(sample);
    while trainer.step < max_steps {
        let n = check_every.min(max_steps - trainer.step);
        losses.extend(trainer.run(data, n, None)?.iter().map(|r| r.total));
        iou = trainer.evaluate(data, false)?.scene_iou.unwrap_or(0.0);
        if iou >= target_iou {
            return Ok(OverfitResult { steps: trainer.step, scene_iou: iou, reached: true, losses });
        }
    }
    Ok(OverfitResult { steps: trainer.step, scene_iou: iou, reached: false, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;
    use crate::synth::generate;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.scene.grid = GridSpec::new([-8.0, -8.0, -2.0], [8.0, 8.0, 2.0], [16, 16, 8]).unwrap();
        cfg.scene.image_size = [64, 64];
        cfg.model.det.queries = 10;
        cfg.model.det.layers = 1;
        cfg.optim.lr = 1e-3;
        cfg
    }

    #[test]
    fn target_pyramid_halves() {
        let g = OccupancyGrid::empty([16, 16, 8]);
        let t = target_pyramid(&g, 4).unwrap();
        assert_eq!(t.iter().map(Vec::len).collect::<Vec<_>>(), vec![2048, 256, 32, 4]);
    }

    #[test]
    fn report_arithmetic_and_log_lines() {
        let cfg = tiny_cfg();
        let s = generate(&cfg.scene).unwrap();
        let model = OccModel::new(&cfg.model, &cfg.scene.grid, &s.rig, 0).unwrap();
        let mut tr = Trainer::new(&cfg, model);
        let mut log = Vec::new();
        let reports = tr.run(std::slice::from_ref(&s), 2, Some(&mut log)).unwrap();
        let r = &reports[0];
        assert_eq!(r.total, r.det_total + 2.0 * r.occ_total);
        assert_eq!(r.terms.keys().filter(|k| k.starts_with("det.")).count(), 6);
        let lines: Vec<serde_json::Value> =
            String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1]["step"], 2);
        assert!(lines[0]["total"].is_number());
    }

    #[test]
    fn aux_off_has_no_detection_terms() {
        let mut cfg = tiny_cfg();
        cfg.model.aux = false;
        let s = generate(&cfg.scene).unwrap();
        let model = OccModel::new(&cfg.model, &cfg.scene.grid, &s.rig, 0).unwrap();
        let mut tr = Trainer::new(&cfg, model);
        let r = tr.train_step(std::slice::from_ref(&s)).unwrap();
        assert!(r.terms.keys().all(|k| !k.starts_with("det.")));
        assert_eq!(r.total, 2.0 * r.occ_total);
    }

    #[test]
    fn window_means_chunks() {
        assert_eq!(window_means(&[1.0, 3.0, 2.0, 2.0, 9.0], 2), vec![2.0, 2.0]);
    }
}
