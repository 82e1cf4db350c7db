//! Seeded invariant suites run by `occu check`: finite-difference gradients,
//! view-transform equivalence, matching optimality, loss definitions and
//! metric counting, each against an independent oracle.

use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classes::{FREE, NUM_CLASSES, NUM_DET_CLASSES};
use crate::detection::attention::{sparse_self_attention, voxelize, weighted_sum};
use crate::detection::matching::hungarian;
use crate::detection::{CaModule, DetectionOutput, HeadOutput, BOX_CODE};
use crate::error::{Error, Result};
use crate::geometry::{BBox3D, Camera, CameraRig, GridSpec, OccupancyGrid, LEVEL_STRIDES};
use crate::losses::{
    det_loss, focal_loss, focal_loss_class_mean, lovasz_softmax, occ_loss, scale_weights, scene_class_affinity,
    total_loss, AffinityMode, LossConfig,
};
use crate::metrics::{confusion, iou_scores, range_binned_eval};
use crate::nn::{Conv3d, LayerNorm};
use crate::tensor::gradcheck::gradient_check_many;
use crate::tensor::{ConvSpec, Tensor, Upsample};
use crate::vt::{apply_vt, build_vt, FusionGate, SparseCsr};

pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_INSTANCES: u64 = 20;
/// Step for smooth cases.
pub const GRAD_STEP: f64 = 1e-3;
/// Step for piecewise-linear cases (sorting, matching, sampling), small
/// enough not to cross a breakpoint.
pub const GRAD_STEP_FINE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Grad,
    Vt,
    Match,
    Loss,
    Metrics,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Grad, Suite::Vt, Suite::Match, Suite::Loss, Suite::Metrics];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Vt => "vt",
            Suite::Match => "match",
            Suite::Loss => "loss",
            Suite::Metrics => "metrics",
        }
    }

    pub fn run(self) -> Result<SuiteReport> {
        let properties = match self {
            Suite::Grad => grad_suite()?,
            Suite::Vt => vt_suite()?,
            Suite::Match => match_suite()?,
            Suite::Loss => loss_suite()?,
            Suite::Metrics => metrics_suite()?,
        };
        let passed = properties.iter().all(|p| p.passed);
        Ok(SuiteReport { suite: self, passed, properties })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown suite {s:?}; expected grad, vt, match, loss or metrics")))
    }
}

/// One failing instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub seed: u64,
    pub observed: f64,
    pub expected: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub instances: usize,
    pub passed: bool,
    /// Largest error seen over all instances.
    pub worst: f64,
    pub failures: Vec<Failure>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub properties: Vec<PropertyResult>,
}

impl SuiteReport {
    pub fn failing(&self) -> impl Iterator<Item = &PropertyResult> {
        self.properties.iter().filter(|p| !p.passed)
    }
}

/// Collects per-instance errors of one property against a tolerance.
struct Tally {
    name: String,
    tol: f64,
    instances: usize,
    worst: f64,
    failures: Vec<Failure>,
}

impl Tally {
    fn new(name: impl Into<String>, tol: f64) -> Self {
        Tally { name: name.into(), tol, instances: 0, worst: 0.0, failures: Vec::new() }
    }

    /// Records an error; passes when `err <= tol` (`err < tol` if `strict`).
    fn record(&mut self, seed: u64, err: f64, strict: bool) {
        self.instances += 1;
        let ok = if strict { err < self.tol } else { err <= self.tol };
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
        if !ok {
            let op = if strict { "<" } else { "<=" };
            self.failures.push(Failure { seed, observed: err, expected: format!("{op} {:e}", self.tol) });
        }
    }

    fn finish(self) -> PropertyResult {
        PropertyResult {
            passed: self.failures.is_empty() && self.instances > 0,
            name: self.name,
            instances: self.instances,
            worst: self.worst,
            failures: self.failures,
        }
    }
}

fn rng_for(property: &str, seed: u64) -> ChaCha8Rng {
    let h = property.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    ChaCha8Rng::seed_from_u64(h ^ seed)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values with magnitude in `[lo, hi)` and random sign, away from zero.
fn signed(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

/// Coordinates in `[0, n - 1)` whose fractional part stays away from the
/// integer breakpoints.
fn off_grid(rng: &mut ChaCha8Rng, n: usize) -> f64 {
    rng.random_range(0..n - 1) as f64 + rng.random_range(0.15..0.85)
}

type Input = (Vec<f64>, Vec<usize>);
type ScalarFn = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;

struct GradInstance {
    inputs: Vec<Input>,
    f: ScalarFn,
}

struct GradCase {
    name: &'static str,
    step: f64,
    build: fn(&mut ChaCha8Rng) -> Result<GradInstance>,
}

/// Contracts `y` with fixed random weights so every output entry matters.
fn contract(y: &Tensor<f64>, w: &[f64]) -> Result<Tensor<f64>> {
    y.mul(&Tensor::from_vec(w.to_vec(), y.shape())?)?.sum()
}

/// Builds a case from inputs and a tensor-valued map whose output has
/// `out_len` elements.
fn contracted(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Input>,
    out_len: usize,
    g: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'static,
) -> Result<GradInstance> {
    let w = uniform(rng, out_len, -1.0, 1.0);
    Ok(GradInstance { inputs, f: Box::new(move |xs| contract(&g(xs)?, &w)) })
}

fn unary_case(
    rng: &mut ChaCha8Rng,
    x: Vec<f64>,
    g: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>> + 'static,
) -> Result<GradInstance> {
    let n = x.len();
    contracted(rng, vec![(x, vec![3, n / 3])], n, move |xs| g(&xs[0]))
}

fn binary_case(
    rng: &mut ChaCha8Rng,
    b: Vec<f64>,
    g: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>> + 'static,
) -> Result<GradInstance> {
    let a = uniform(rng, 12, -2.0, 2.0);
    contracted(rng, vec![(a, vec![3, 4]), (b, vec![3, 4])], 12, move |xs| g(&xs[0], &xs[1]))
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

fn random_box(rng: &mut ChaCha8Rng, grid: &GridSpec) -> BBox3D {
    BBox3D {
        center: std::array::from_fn(|a| rng.random_range(grid.min[a] + 1.0..grid.max[a] - 1.0)),
        length: rng.random_range(0.5..5.0),
        width: rng.random_range(0.5..3.0),
        height: rng.random_range(0.5..2.5),
        yaw: rng.random_range(-3.0..3.0),
        velocity: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
        class: crate::classes::det_label(rng.random_range(0..NUM_DET_CLASSES)),
    }
}

fn grad_cases() -> Vec<GradCase> {
    let fine = GRAD_STEP_FINE;
    let smooth = GRAD_STEP;
    vec![
        GradCase { name: "relu", step: smooth, build: |r| { let x = signed(r, 12, 0.05, 1.0); unary_case(r, x, |t| t.relu()) } },
        GradCase { name: "sigmoid", step: smooth, build: |r| { let x = uniform(r, 12, -3.0, 3.0); unary_case(r, x, |t| t.sigmoid()) } },
        GradCase { name: "exp", step: smooth, build: |r| { let x = uniform(r, 12, -2.0, 2.0); unary_case(r, x, |t| t.exp()) } },
        GradCase { name: "log", step: smooth, build: |r| { let x = uniform(r, 12, 0.2, 3.0); unary_case(r, x, |t| t.log()) } },
        GradCase { name: "abs", step: smooth, build: |r| { let x = signed(r, 12, 0.05, 1.0); unary_case(r, x, |t| t.abs()) } },
        GradCase { name: "neg", step: smooth, build: |r| { let x = uniform(r, 12, -1.0, 1.0); unary_case(r, x, |t| t.neg()) } },
        GradCase {
            name: "powf",
            step: smooth,
            build: |r| {
                let x = uniform(r, 12, 0.2, 2.0);
                let p = r.random_range(0.5..3.0);
                unary_case(r, x, move |t| t.powf(p))
            },
        },
        GradCase { name: "scale", step: smooth, build: |r| { let x = uniform(r, 12, -1.0, 1.0); unary_case(r, x, |t| t.scale(-1.7)) } },
        GradCase { name: "add_scalar", step: smooth, build: |r| { let x = uniform(r, 12, -1.0, 1.0); unary_case(r, x, |t| t.add_scalar(0.3)?.mul(t)) } },
        GradCase {
            name: "clamp",
            step: smooth,
            build: |r| {
                let x = (0..12)
                    .map(|_| {
                        let v: f64 = r.random_range(-1.0..1.0);
                        if (v.abs() - 0.5).abs() < 0.02 { v * 1.1 } else { v }
                    })
                    .collect();
                unary_case(r, x, |t| t.clamp(-0.5, 0.5))
            },
        },
        GradCase { name: "add", step: smooth, build: |r| { let b = uniform(r, 12, -2.0, 2.0); binary_case(r, b, |a, b| a.add(b)?.mul(a)) } },
        GradCase { name: "sub", step: smooth, build: |r| { let b = uniform(r, 12, -2.0, 2.0); binary_case(r, b, |a, b| a.sub(b)?.mul(b)) } },
        GradCase { name: "mul", step: smooth, build: |r| { let b = uniform(r, 12, -2.0, 2.0); binary_case(r, b, |a, b| a.mul(b)) } },
        GradCase { name: "div", step: smooth, build: |r| { let b = signed(r, 12, 0.5, 2.0); binary_case(r, b, |a, b| a.div(b)) } },
        GradCase {
            name: "sum",
            step: smooth,
            build: |r| Ok(GradInstance {
                inputs: vec![(uniform(r, 12, -1.0, 1.0), vec![3, 4])],
                f: Box::new(|xs| { let s = xs[0].sum()?; s.mul(&s) }),
            }),
        },
        GradCase {
            name: "mean",
            step: smooth,
            build: |r| Ok(GradInstance {
                inputs: vec![(uniform(r, 12, -1.0, 1.0), vec![3, 4])],
                f: Box::new(|xs| { let s = xs[0].mean()?; s.mul(&s) }),
            }),
        },
        GradCase {
            name: "sum_axis",
            step: smooth,
            build: |r| { let x = uniform(r, 24, -1.0, 1.0); contracted(r, vec![(x, vec![3, 4, 2])], 6, |xs| xs[0].sum_axis(1)?.exp()) },
        },
        GradCase {
            name: "softmax",
            step: smooth,
            build: |r| {
                let x = uniform(r, 24, -2.0, 2.0);
                contracted(r, vec![(x, vec![2, 3, 4])], 24, |xs| xs[0].softmax(1)?.add(&xs[0].softmax(2)?))
            },
        },
        GradCase {
            name: "matmul",
            step: smooth,
            build: |r| {
                let (a, b) = (uniform(r, 12, -1.0, 1.0), uniform(r, 8, -1.0, 1.0));
                contracted(r, vec![(a, vec![3, 4]), (b, vec![4, 2])], 6, |xs| xs[0].matmul(&xs[1]))
            },
        },
        GradCase {
            name: "permute_reshape",
            step: smooth,
            build: |r| {
                let x = uniform(r, 24, -1.0, 1.0);
                contracted(r, vec![(x, vec![2, 3, 4])], 24, |xs| xs[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?.exp())
            },
        },
        GradCase {
            name: "expand",
            step: smooth,
            build: |r| { let x = uniform(r, 3, -1.0, 1.0); contracted(r, vec![(x, vec![3, 1])], 12, |xs| xs[0].expand(&[3, 4])?.exp()) },
        },
        GradCase {
            name: "narrow_concat",
            step: smooth,
            build: |r| {
                let x = uniform(r, 20, -1.0, 1.0);
                contracted(r, vec![(x, vec![4, 5])], 20, |xs| {
                    Tensor::concat(&[xs[0].narrow(1, 2, 3)?.exp()?, xs[0].narrow(1, 0, 2)?], 1)
                })
            },
        },
        GradCase {
            name: "gather_rows",
            step: smooth,
            build: |r| {
                let x = uniform(r, 15, -1.0, 1.0);
                let idx: Vec<usize> = (0..7).map(|_| r.random_range(0..5)).collect();
                contracted(r, vec![(x, vec![5, 3])], 21, move |xs| xs[0].gather_rows(&idx)?.exp())
            },
        },
        GradCase {
            name: "scatter_add_rows",
            step: smooth,
            build: |r| {
                let x = uniform(r, 18, -1.0, 1.0);
                let idx: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
                contracted(r, vec![(x, vec![6, 3])], 12, move |xs| xs[0].scatter_add_rows(&idx, 4)?.exp())
            },
        },
        GradCase {
            name: "batch_norm",
            step: smooth,
            build: |r| {
                let x = uniform(r, 24, -2.0, 2.0);
                let (g, b) = (uniform(r, 2, 0.5, 1.5), uniform(r, 2, -0.5, 0.5));
                contracted(r, vec![(x, vec![3, 2, 4]), (g, vec![2]), (b, vec![2])], 24, |xs| {
                    Ok(xs[0].batch_norm(&xs[1], &xs[2], None, 1e-5)?.0)
                })
            },
        },
        GradCase {
            name: "layer_norm",
            step: smooth,
            build: |r| {
                let x = uniform(r, 24, -2.0, 2.0);
                let (g, b) = (uniform(r, 6, 0.5, 1.5), uniform(r, 6, -0.5, 0.5));
                contracted(r, vec![(x, vec![4, 6]), (g, vec![6]), (b, vec![6])], 24, |xs| {
                    LayerNorm { gamma: xs[1].clone(), beta: xs[2].clone(), eps: 1e-5 }.forward(&xs[0])
                })
            },
        },
        GradCase {
            name: "conv3d",
            step: smooth,
            build: |r| {
                let x = uniform(r, 2 * 2 * 4 * 4 * 3, -1.0, 1.0);
                let w = uniform(r, 3 * 2 * 27, -0.5, 0.5);
                let b = uniform(r, 3, -0.5, 0.5);
                contracted(r, vec![(x, vec![2, 2, 4, 4, 3]), (w, vec![3, 2, 3, 3, 3]), (b, vec![3])], 2 * 3 * 48, |xs| {
                    xs[0].conv3d(&xs[1], Some(&xs[2]), ConvSpec::new(1, 1))
                })
            },
        },
        GradCase {
            name: "conv3d_strided",
            step: smooth,
            build: |r| {
                let x = uniform(r, 2 * 5 * 4 * 3, -1.0, 1.0);
                let w = uniform(r, 2 * 2 * 27, -0.5, 0.5);
                contracted(r, vec![(x, vec![1, 2, 5, 4, 3]), (w, vec![2, 2, 3, 3, 3])], 2 * 3 * 2 * 2, |xs| {
                    xs[0].conv3d(&xs[1], None, ConvSpec::new(2, 1))
                })
            },
        },
        GradCase {
            name: "conv_transpose3d",
            step: smooth,
            build: |r| {
                let x = uniform(r, 3 * 8, -1.0, 1.0);
                let w = uniform(r, 3 * 2 * 27, -0.5, 0.5);
                let b = uniform(r, 2, -0.5, 0.5);
                contracted(r, vec![(x, vec![1, 3, 2, 2, 2]), (w, vec![3, 2, 3, 3, 3]), (b, vec![2])], 2 * 27, |xs| {
                    xs[0].conv_transpose3d(&xs[1], Some(&xs[2]), ConvSpec::new(2, 1))
                })
            },
        },
        GradCase {
            name: "conv2d",
            step: smooth,
            build: |r| {
                let x = uniform(r, 2 * 2 * 25, -1.0, 1.0);
                let w = uniform(r, 3 * 2 * 9, -0.5, 0.5);
                let b = uniform(r, 3, -0.5, 0.5);
                contracted(r, vec![(x, vec![2, 2, 5, 5]), (w, vec![3, 2, 3, 3]), (b, vec![3])], 2 * 3 * 9, |xs| {
                    xs[0].conv2d(&xs[1], Some(&xs[2]), 2, 1)
                })
            },
        },
        GradCase {
            name: "bilinear_sample_2d",
            step: fine,
            build: |r| {
                let f = uniform(r, 2 * 4 * 5, -1.0, 1.0);
                let c: Vec<f64> = (0..6).flat_map(|_| [off_grid(r, 4), off_grid(r, 5)]).collect();
                contracted(r, vec![(f, vec![2, 4, 5]), (c, vec![6, 2])], 12, |xs| xs[0].bilinear_sample_2d(&xs[1]))
            },
        },
        GradCase {
            name: "trilinear_sample_3d",
            step: fine,
            build: |r| {
                let f = uniform(r, 2 * 3 * 4 * 3, -1.0, 1.0);
                let c: Vec<f64> = (0..5).flat_map(|_| [off_grid(r, 3), off_grid(r, 4), off_grid(r, 3)]).collect();
                contracted(r, vec![(f, vec![2, 3, 4, 3]), (c, vec![5, 3])], 10, |xs| xs[0].trilinear_sample_3d(&xs[1]))
            },
        },
        GradCase {
            name: "upsample_trilinear",
            step: smooth,
            build: |r| {
                let x = uniform(r, 2 * 12, -1.0, 1.0);
                contracted(r, vec![(x, vec![1, 2, 2, 3, 2])], 2 * 96, |xs| xs[0].upsample([2, 2, 2], Upsample::Trilinear))
            },
        },
        GradCase {
            name: "upsample_nearest",
            step: smooth,
            build: |r| {
                let x = uniform(r, 2 * 12, -1.0, 1.0);
                contracted(r, vec![(x, vec![1, 2, 2, 3, 2])], 2 * 96, |xs| xs[0].upsample([2, 2, 2], Upsample::Nearest))
            },
        },
        GradCase {
            name: "upsample_2d",
            step: smooth,
            build: |r| {
                let x = uniform(r, 2 * 9, -1.0, 1.0);
                contracted(r, vec![(x, vec![1, 2, 3, 3])], 2 * 36, |xs| xs[0].upsample_2d(2, Upsample::Trilinear))
            },
        },
        GradCase {
            name: "apply_csr",
            step: smooth,
            build: |r| {
                let hits: Vec<Vec<u32>> =
                    (0..6).map(|_| (0..r.random_range(0..5)).map(|_| r.random_range(0..8)).collect()).collect();
                let m = Rc::new(SparseCsr::from_hits(8, &hits));
                let x = uniform(r, 24, -1.0, 1.0);
                contracted(r, vec![(x, vec![3, 8])], 18, move |xs| xs[0].apply_csr(&m))
            },
        },
        GradCase {
            name: "global_local_fusion",
            step: smooth,
            build: |r| {
                let local = uniform(r, 16, -1.0, 1.0);
                let bev = uniform(r, 8, -1.0, 1.0);
                let w = uniform(r, 4, -1.0, 1.0);
                let b = uniform(r, 1, -0.5, 0.5);
                let inputs = vec![(local, vec![1, 2, 2, 2, 2]), (bev, vec![1, 2, 2, 2]), (w, vec![1, 4, 1, 1, 1]), (b, vec![1])];
                contracted(r, inputs, 16, |xs| {
                    let gate =
                        FusionGate { conv: Conv3d { weight: xs[2].clone(), bias: Some(xs[3].clone()), spec: ConvSpec::default() } };
                    FusionGate::fuse(Some(&gate), &xs[0], &xs[1])
                })
            },
        },
        GradCase {
            name: "sparse_self_attention",
            step: smooth,
            build: |r| {
                let pts: Vec<[f64; 3]> = (0..6).map(|_| std::array::from_fn(|_| r.random_range(0.0..3.0))).collect();
                let vox = voxelize(&pts, [0.0; 3], [1.0; 3]);
                let q = uniform(r, 18, -1.0, 1.0);
                let w = uniform(r, 27 * 9, -0.5, 0.5);
                contracted(r, vec![(q, vec![6, 3]), (w, vec![27, 3, 3])], 18, move |xs| sparse_self_attention(&xs[0], &vox, &xs[1]))
            },
        },
        GradCase {
            name: "weighted_sum",
            step: smooth,
            build: |r| {
                let s = uniform(r, 36, -1.0, 1.0);
                let w = uniform(r, 12, -1.0, 1.0);
                contracted(r, vec![(s, vec![3, 4, 3]), (w, vec![4, 3])], 12, |xs| {
                    let samples = (0..3).map(|l| xs[0].narrow(0, l, 1)?.reshape(&[4, 3])).collect::<Result<Vec<_>>>()?;
                    weighted_sum(&samples, &xs[1].softmax(1)?)
                })
            },
        },
        GradCase {
            name: "focal_loss",
            step: smooth,
            build: |r| {
                let x = uniform(r, 24, -2.0, 2.0);
                let t = random_targets(r, 6, 4);
                Ok(GradInstance {
                    inputs: vec![(x, vec![6, 4])],
                    f: Box::new(move |xs| Ok(focal_loss(&xs[0].softmax(1)?, &t, 2.0, 0.25)?.value)),
                })
            },
        },
        GradCase {
            name: "focal_loss_class_mean",
            step: smooth,
            build: |r| {
                let x = uniform(r, 24, -2.0, 2.0);
                let t = random_targets(r, 6, 4);
                Ok(GradInstance {
                    inputs: vec![(x, vec![6, 4])],
                    f: Box::new(move |xs| Ok(focal_loss_class_mean(&xs[0].softmax(1)?, &t, 2.0, 1.0)?.value)),
                })
            },
        },
        GradCase {
            name: "lovasz_softmax",
            step: fine,
            build: |r| {
                let x = uniform(r, 48, -2.0, 2.0);
                let t = random_targets(r, 12, 4);
                Ok(GradInstance {
                    inputs: vec![(x, vec![12, 4])],
                    f: Box::new(move |xs| Ok(lovasz_softmax(&xs[0].softmax(1)?, &t, None)?.value)),
                })
            },
        },
        GradCase {
            name: "scal_geometric",
            step: smooth,
            build: |r| {
                let x = uniform(r, 40, -2.0, 2.0);
                let t = random_targets(r, 10, 4);
                Ok(GradInstance {
                    inputs: vec![(x, vec![10, 4])],
                    f: Box::new(move |xs| Ok(scene_class_affinity(&xs[0].softmax(1)?, &t, AffinityMode::Geometric)?.value)),
                })
            },
        },
        GradCase {
            name: "scal_semantic",
            step: smooth,
            build: |r| {
                let x = uniform(r, 40, -2.0, 2.0);
                let t = random_targets(r, 10, 4);
                Ok(GradInstance {
                    inputs: vec![(x, vec![10, 4])],
                    f: Box::new(move |xs| Ok(scene_class_affinity(&xs[0].softmax(1)?, &t, AffinityMode::Semantic)?.value)),
                })
            },
        },
        GradCase {
            name: "occ_loss",
            step: fine,
            build: |r| {
                let fine_x = uniform(r, 3 * 8, -2.0, 2.0);
                let coarse_x = uniform(r, 3, -2.0, 2.0);
                let targets: Vec<Vec<u8>> =
                    vec![(0..8).map(|_| r.random_range(0..3u8)).collect(), vec![r.random_range(0..3u8)]];
                Ok(GradInstance {
                    inputs: vec![(fine_x, vec![1, 3, 2, 2, 2]), (coarse_x, vec![1, 3, 1, 1, 1])],
                    f: Box::new(move |xs| {
                        let probs = [xs[0].softmax(1)?, xs[1].softmax(1)?];
                        Ok(occ_loss(&probs, &targets, &LossConfig::default())?.0)
                    }),
                })
            },
        },
        GradCase {
            name: "det_loss",
            step: fine,
            build: |r| {
                let grid = GridSpec::default();
                let gt: Vec<BBox3D> = (0..2).map(|_| random_box(r, &grid)).collect();
                let m = 5;
                let inputs = (0..2)
                    .flat_map(|_| {
                        [
                            (uniform(r, m * (NUM_DET_CLASSES + 1), -2.0, 2.0), vec![m, NUM_DET_CLASSES + 1]),
                            (uniform(r, m * BOX_CODE, -1.0, 1.0), vec![m, BOX_CODE]),
                        ]
                    })
                    .collect();
                Ok(GradInstance {
                    inputs,
                    f: Box::new(move |xs| {
                        let heads = [CaModule::Visual, CaModule::Bev]
                            .into_iter()
                            .enumerate()
                            .map(|(i, module)| HeadOutput {
                                layer: 0,
                                module,
                                class_logits: xs[2 * i].clone(),
                                boxes: xs[2 * i + 1].clone(),
                            })
                            .collect();
                        let out = DetectionOutput { heads, points: Vec::new() };
                        Ok(det_loss(&out, &gt, &grid, [2.0, 1.5, 1.5], &LossConfig::default())?.0)
                    }),
                })
            },
        },
        GradCase {
            name: "total_loss",
            step: smooth,
            build: |r| Ok(GradInstance {
                inputs: vec![(uniform(r, 3, 0.1, 2.0), vec![3]), (uniform(r, 3, 0.1, 2.0), vec![3])],
                f: Box::new(|xs| total_loss(&xs[0].mul(&xs[0])?.sum()?, &xs[1].exp()?.sum()?, 2.0)),
            }),
        },
    ]
}

/// Names of the differentiable operations and losses the gradient suite
/// covers.
pub fn grad_case_names() -> Vec<&'static str> {
    grad_cases().iter().map(|c| c.name).collect()
}

/// Central finite-difference check of every registered case on
/// [`GRAD_INSTANCES`] seeded instances; max relative error must stay below
/// [`GRAD_TOL`].
pub fn grad_suite() -> Result<Vec<PropertyResult>> {
    let mut out = Vec::new();
    for case in grad_cases() {
        let mut tally = Tally::new(case.name, GRAD_TOL);
        for seed in 0..GRAD_INSTANCES {
            let inst = (case.build)(&mut rng_for(case.name, seed))?;
            let report = gradient_check_many(inst.f, &inst.inputs, case.step, GRAD_TOL)?;
            tally.record(seed, report.max_rel_err, true);
        }
        out.push(tally.finish());
    }
    Ok(out)
}

/// Random rig of 1–4 outward-looking cameras around a random grid of at
/// most 16^3 voxels, with image sizes divisible by the coarsest stride.
pub fn random_rig_and_grid(rng: &mut ChaCha8Rng) -> (CameraRig, GridSpec) {
    let res = [4usize, 8, 16];
    let resolution = [res[rng.random_range(0..3)], res[rng.random_range(0..3)], [4usize, 8][rng.random_range(0..2)]];
    let half = [rng.random_range(4.0..12.0), rng.random_range(4.0..12.0)];
    let grid = GridSpec::new([-half[0], -half[1], -2.0], [half[0], half[1], rng.random_range(1.0..3.0)], resolution)
        .expect("valid random grid");
    let n = rng.random_range(1..=4);
    let (w, h) = ([32usize, 64][rng.random_range(0..2)], [32usize, 64][rng.random_range(0..2)]);
    let hfov = rng.random_range(50f64..110.0).to_radians();
    let cameras = (0..n)
        .map(|_| {
            let pos = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)];
            Camera::facing(pos, rng.random_range(-3.1..3.1), hfov, w, h)
        })
        .collect();
    (CameraRig { cameras }, grid)
}

/// Dense `rows x cols` row-normalized lifting matrices of one level rebuilt
/// from voxel sample points by direct projection.
fn dense_vt(rig: &CameraRig, grid: &GridSpec, stride: usize, hw: (usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = hw;
    let cols = rig.len() * h * w;
    let [nx, ny, nz] = grid.resolution;
    let cs = grid.cell_size();
    let mut local = vec![0.0; nx * ny * nz * cols];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let row = (i * ny + j) * nz + k;
                let c = [
                    grid.min[0] + (i as f64 + 0.5) * cs[0],
                    grid.min[1] + (j as f64 + 0.5) * cs[1],
                    grid.min[2] + (k as f64 + 0.5) * cs[2],
                ];
                let (dx, dy) = (cs[0] / 4.0, cs[1] / 4.0);
                let pts = [c, [c[0] + dx, c[1], c[2]], [c[0] - dx, c[1], c[2]], [c[0], c[1] + dy, c[2]], [c[0], c[1] - dy, c[2]]];
                for (n, cam) in rig.cameras.iter().enumerate() {
                    let m = cam.world_to_image();
                    for p in pts {
                        let hv: Vec<f64> = (0..3).map(|r| (0..3).map(|a| m[r][a] * p[a]).sum::<f64>() + m[r][3]).collect();
                        let d = hv[2];
                        if d <= 0.0 {
                            continue;
                        }
                        let (u, v) = (hv[0] / d, hv[1] / d);
                        if u < 0.0 || v < 0.0 || u >= cam.width as f64 || v >= cam.height as f64 {
                            continue;
                        }
                        let px = ((u / stride as f64) as usize).min(w - 1);
                        let py = ((v / stride as f64) as usize).min(h - 1);
                        local[row * cols + (n * h + py) * w + px] += 1.0;
                    }
                }
            }
        }
    }
    let mut global = vec![0.0; nx * ny * cols];
    for p in 0..nx * ny {
        for k in 0..nz {
            for c in 0..cols {
                global[p * cols + c] += local[(p * nz + k) * cols + c];
            }
        }
    }
    for m in [&mut local, &mut global] {
        for row in m.chunks_mut(cols) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
    (local, global)
}

fn dense_apply(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub const VT_INSTANCES: u64 = 10;
pub const VT_TOL: f64 = 1e-5;

/// Sparse lifting against the dense oracle on random rigs, and exact
/// reproduction of constant features at every non-empty row.
pub fn vt_suite() -> Result<Vec<PropertyResult>> {
    let mut dense = Tally::new("sparse_vs_dense", VT_TOL);
    let mut constant = Tally::new("constant_reproduction", 0.0);
    let mut seed = 0u64;
    let mut accepted = 0;
    while accepted < VT_INSTANCES {
        let mut rng = rng_for("vt", seed);
        let (rig, grid) = random_rig_and_grid(&mut rng);
        let (w, h) = (rig.cameras[0].width, rig.cameras[0].height);
        let hw = [(h / 8, w / 8)];
        let vt = match build_vt(&rig, &grid, &hw) {
            Ok(vt) => vt,
            Err(Error::DegenerateRig(_)) => {
                seed += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        accepted += 1;
        let level = &vt.levels[0];
        let (fh, fw) = hw[0];
        let (ncam, c) = (rig.len(), 2);
        let feats = uniform(&mut rng, ncam * c * fh * fw, -1.0, 1.0);
        let x = Tensor::<f64>::from_vec(feats.clone(), &[1, ncam, c, fh, fw])?;
        let (local, bev) = apply_vt(&x, level)?;
        let (dl, dg) = dense_vt(&rig, &grid, LEVEL_STRIDES[0], (fh, fw));
        let cols = ncam * fh * fw;
        let mut err: f64 = 0.0;
        for ch in 0..c {
            let xs: Vec<f64> = (0..cols)
                .map(|col| {
                    let (n, p) = (col / (fh * fw), col % (fh * fw));
                    feats[(n * c + ch) * fh * fw + p]
                })
                .collect();
            for (got, m) in [(&local, &dl), (&bev, &dg)] {
                let want = dense_apply(m, cols, &xs);
                let g = got.to_vec();
                let per = want.len();
                for (i, wv) in want.iter().enumerate() {
                    err = err.max((g[ch * per + i] - wv).abs());
                }
            }
        }
        dense.record(seed, err, false);

        let value = rng.random_range(-3.0..3.0);
        let ones = Tensor::<f32>::full(&[1, ncam, 1, fh, fw], value as f32)?;
        let (l32, _) = apply_vt(&ones, level)?;
        let lv = l32.to_vec();
        let mut cerr: f64 = 0.0;
        for (r, v) in lv.iter().enumerate() {
            if !level.local.row_is_empty(r) {
                cerr = cerr.max((*v as f64 - value as f32 as f64).abs());
            }
        }
        constant.record(seed, cerr, false);
        seed += 1;
    }
    Ok(vec![dense.finish(), constant.finish()])
}

/// Minimum assignment cost by trying every injective row-to-column map.
pub fn exhaustive_assignment(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(cost: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if r == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                go(cost, rows, cols, r + 1, used, acc + cost[r * cols + c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, rows, cols, 0, &mut vec![false; cols], 0.0, &mut best);
    if rows == 0 {
        0.0
    } else {
        best
    }
}

pub const MATCH_INSTANCES: u64 = 50;

/// Hungarian assignment against exhaustive search on random instances with
/// at most 6 rows and columns.
pub fn match_suite() -> Result<Vec<PropertyResult>> {
    let mut optimal = Tally::new("hungarian_vs_exhaustive", 1e-9);
    let mut injective = Tally::new("assignment_is_injective", 0.0);
    for seed in 0..MATCH_INSTANCES {
        let mut rng = rng_for("match", seed);
        let rows = rng.random_range(1..=6);
        let cols = rng.random_range(rows..=6);
        let cost = if seed % 5 == 0 {
            (0..rows * cols).map(|_| rng.random_range(0..4) as f64).collect()
        } else {
            uniform(&mut rng, rows * cols, -1.0, 2.0)
        };
        let (assign, total) = hungarian(&cost, rows, cols)?;
        let want = exhaustive_assignment(&cost, rows, cols);
        let recomputed: f64 = assign.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum();
        optimal.record(seed, (total - want).abs().max((recomputed - want).abs()), false);
        let mut seen = vec![false; cols];
        let dup = assign.iter().filter(|&&c| std::mem::replace(&mut seen[c], true)).count();
        injective.record(seed, dup as f64 + (assign.len() != rows) as u8 as f64, false);
    }
    Ok(vec![optimal.finish(), injective.finish()])
}

/// Lovász extension of the per-class Jaccard loss from its definition:
/// errors sorted decreasingly, each weighted by the Jaccard loss increment
/// of the growing mispredicted set.
pub fn lovasz_oracle(probs: &[f64], k: usize, targets: &[usize]) -> f64 {
    let n = targets.len();
    let (mut sum, mut count) = (0.0, 0);
    for c in 0..k {
        let fg: Vec<bool> = targets.iter().map(|&t| t == c).collect();
        if !fg.contains(&true) {
            continue;
        }
        count += 1;
        let e: Vec<f64> = (0..n).map(|i| if fg[i] { 1.0 - probs[i * k + c] } else { probs[i * k + c] }).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| e[b].total_cmp(&e[a]));
        let mut mis = vec![false; n];
        let mut prev = 0.0;
        for &i in &order {
            mis[i] = true;
            let inter = (0..n).filter(|&j| fg[j] && !mis[j]).count() as f64;
            let union = (0..n).filter(|&j| fg[j] || mis[j]).count() as f64;
            let cur = 1.0 - inter / union;
            sum += e[i] * (cur - prev);
            prev = cur;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Scene-class affinity from soft precision, recall and specificity sums.
pub fn affinity_oracle(probs: &[f64], k: usize, targets: &[usize], mode: AffinityMode) -> f64 {
    let n = targets.len();
    let free = FREE as usize;
    let columns: Vec<(Vec<f64>, Vec<bool>)> = match mode {
        AffinityMode::Geometric => {
            vec![((0..n).map(|i| 1.0 - probs[i * k + free]).collect(), targets.iter().map(|&t| t != free).collect())]
        }
        AffinityMode::Semantic => {
            (0..k).map(|c| ((0..n).map(|i| probs[i * k + c]).collect(), targets.iter().map(|&t| t == c).collect())).collect()
        }
    };
    let nlog = |v: f64| -v.clamp(1e-12, 1.0).ln();
    let (mut sum, mut count) = (0.0, 0);
    for (p, y) in columns {
        let pos = y.iter().filter(|&&b| b).count();
        if pos == 0 {
            continue;
        }
        count += 1;
        let hit: f64 = (0..n).filter(|&i| y[i]).map(|i| p[i]).sum();
        let psum: f64 = p.iter().sum();
        if psum > 0.0 {
            sum += nlog(hit / psum);
        }
        sum += nlog(hit / pos as f64);
        if pos < n {
            let spec: f64 = (0..n).filter(|&i| !y[i]).map(|i| 1.0 - p[i]).sum::<f64>() / (n - pos) as f64;
            sum += nlog(spec);
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row = uniform(rng, k, 0.01, 1.0);
        let s: f64 = row.iter().sum();
        p.extend(row.iter().map(|v| v / s));
    }
    p
}

pub const LOSS_INSTANCES: u64 = 20;
pub const LOSS_TOL: f64 = 1e-6;

/// Loss definitions against definition-level oracles, the focal/cross-
/// entropy identity, and exact scale weighting and total arithmetic.
pub fn loss_suite() -> Result<Vec<PropertyResult>> {
    let mut lovasz = Tally::new("lovasz_vs_definition", LOSS_TOL);
    let mut geo = Tally::new("scal_geometric_vs_definition", LOSS_TOL);
    let mut sem = Tally::new("scal_semantic_vs_definition", LOSS_TOL);
    let mut ce = Tally::new("focal_gamma0_is_cross_entropy", LOSS_TOL);
    let mut weighting = Tally::new("occ_loss_scale_weighting_exact", 0.0);
    let mut total = Tally::new("total_loss_exact", 0.0);
    let mut nonneg = Tally::new("losses_nonnegative", 0.0);
    let cfg = LossConfig::default();
    for seed in 0..LOSS_INSTANCES {
        let mut rng = rng_for("loss", seed);
        let n = rng.random_range(2..=20);
        let k = rng.random_range(2..=5);
        let p = random_distribution(&mut rng, n, k);
        let t = random_targets(&mut rng, n, k);
        let pt = Tensor::<f64>::from_vec(p.clone(), &[n, k])?;

        let got = lovasz_softmax(&pt, &t, None)?.value.item();
        lovasz.record(seed, (got - lovasz_oracle(&p, k, &t)).abs(), false);
        let g = scene_class_affinity(&pt, &t, AffinityMode::Geometric)?.value.item();
        geo.record(seed, (g - affinity_oracle(&p, k, &t, AffinityMode::Geometric)).abs(), false);
        let s = scene_class_affinity(&pt, &t, AffinityMode::Semantic)?.value.item();
        sem.record(seed, (s - affinity_oracle(&p, k, &t, AffinityMode::Semantic)).abs(), false);
        let f = focal_loss(&pt, &t, 0.0, 1.0)?.value.item();
        let want_ce = -(0..n).map(|i| p[i * k + t[i]].ln()).sum::<f64>() / n as f64;
        ce.record(seed, (f - want_ce).abs(), false);

        let fine = random_distribution(&mut rng, 8, k);
        let coarse = random_distribution(&mut rng, 1, k);
        let to5 = |v: &[f64], dims: [usize; 3]| -> Result<Tensor<f64>> {
            let m = dims.iter().product::<usize>();
            let cl: Vec<f64> = (0..k).flat_map(|c| (0..m).map(move |i| v[i * k + c])).collect();
            Tensor::from_vec(cl, &[1, k, dims[0], dims[1], dims[2]])
        };
        let probs = [to5(&fine, [2, 2, 2])?, to5(&coarse, [1, 1, 1])?];
        let tf: Vec<u8> = (0..8).map(|_| rng.random_range(0..k as u8)).collect();
        let tc = vec![rng.random_range(0..k as u8)];
        let (occ, report) = occ_loss(&probs, &[tf.clone(), tc.clone()], &cfg)?;
        let mut want = 0.0;
        for (s, (items, tg)) in [(&fine, &tf), (&coarse, &tc)].into_iter().enumerate() {
            let rows = items.len() / k;
            let it = Tensor::<f64>::from_vec(items.clone(), &[rows, k])?;
            let tg: Vec<usize> = tg.iter().map(|&v| v as usize).collect();
            let parts = focal_loss_class_mean(&it, &tg, cfg.occ_gamma, cfg.occ_alpha)?.value.item()
                + lovasz_softmax(&it, &tg, None)?.value.item()
                + scene_class_affinity(&it, &tg, AffinityMode::Geometric)?.value.item()
                + scene_class_affinity(&it, &tg, AffinityMode::Semantic)?.value.item();
            want += parts * scale_weights(2)[s];
        }
        weighting.record(seed, (occ.item() - want).abs(), false);
        let negatives = report.terms.values().filter(|&&v| !(v >= 0.0)).count();
        nonneg.record(seed, negatives as f64, false);

        let (o, d) = (rng.random_range(0.0..10.0f32), rng.random_range(0.0..10.0f32));
        let tl = total_loss(&Tensor::scalar(o), &Tensor::scalar(d), 2.0)?.item();
        total.record(seed, if tl == d + 2.0 * o { 0.0 } else { (tl - (d + 2.0 * o)).abs().max(f32::MIN_POSITIVE) as f64 }, false);
    }
    Ok(vec![lovasz.finish(), geo.finish(), sem.finish(), ce.finish(), weighting.finish(), total.finish(), nonneg.finish()])
}

pub const METRIC_INSTANCES: u64 = 20;

/// Confusion counts and scores against per-class voxel loops on random
/// 8x8x4 grid pairs; range bins nest.
pub fn metrics_suite() -> Result<Vec<PropertyResult>> {
    let mut counts = Tally::new("confusion_vs_loops", 0.0);
    let mut scores = Tally::new("iou_miou_vs_loops", 0.0);
    let mut nesting = Tally::new("range_bins_nest", 0.0);
    let spec = GridSpec::new([-8.0, -8.0, -2.0], [8.0, 8.0, 2.0], [8, 8, 4])?;
    for seed in 0..METRIC_INSTANCES {
        let mut rng = rng_for("metrics", seed);
        let classes = rng.random_range(2..=NUM_CLASSES) as u8;
        let labels = |rng: &mut ChaCha8Rng| -> Vec<u8> { (0..256).map(|_| rng.random_range(0..classes)).collect() };
        let pred = OccupancyGrid::new([8, 8, 4], labels(&mut rng))?;
        let gt = OccupancyGrid::new([8, 8, 4], labels(&mut rng))?;
        let c = confusion(&pred, &gt, None)?;
        let mut mismatches = 0u64;
        let mut ious = Vec::new();
        for cls in 0..NUM_CLASSES as u8 {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for i in 0..256 {
                let (p, g) = (pred.labels[i] == cls, gt.labels[i] == cls);
                tp += (p && g) as u64;
                fp += (p && !g) as u64;
                fn_ += (!p && g) as u64;
            }
            let got = c.classes[cls as usize];
            mismatches += (got.tp != tp) as u64 + (got.fp != fp) as u64 + (got.fn_ != fn_) as u64;
            ious.push((tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64));
        }
        let (mut btp, mut bfp, mut bfn) = (0u64, 0u64, 0u64);
        for i in 0..256 {
            let (p, g) = (pred.labels[i] != FREE, gt.labels[i] != FREE);
            btp += (p && g) as u64;
            bfp += (p && !g) as u64;
            bfn += (!p && g) as u64;
        }
        mismatches += (c.binary.tp != btp) as u64 + (c.binary.fp != bfp) as u64 + (c.binary.fn_ != bfn) as u64;
        counts.record(seed, mismatches as f64, false);

        let report = iou_scores(&c, false);
        let sem = &ious[1..];
        let want_miou = sem.iter().any(Option::is_some).then(|| sem.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / 16.0);
        let present: Vec<f64> = sem.iter().flatten().copied().collect();
        let want_present = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        let want_scene = (btp + bfp + bfn > 0).then(|| btp as f64 / (btp + bfp + bfn) as f64);
        let mut bad = (report.miou != want_miou) as u8 + (report.scene_iou != want_scene) as u8;
        bad += (report.miou_present != want_present) as u8;
        bad += report.classes.iter().zip(sem).filter(|(a, b)| a.iou != **b).count() as u8;
        scores.record(seed, bad as f64, false);

        let (bins, _) = range_binned_eval(&pred, &gt, &spec, &[2.0, 4.0, 6.0, 8.0], false)?;
        let mut violations = 0u64;
        for w in bins.windows(2) {
            let (a, b) = (&w[0].report.counts, &w[1].report.counts);
            violations += (a.voxels > b.voxels) as u64;
            for (x, y) in a.classes.iter().zip(&b.classes).chain([(&a.binary, &b.binary)]) {
                violations += (x.tp > y.tp || x.fp > y.fp || x.fn_ > y.fn_) as u64;
            }
        }
        violations += (bins.last().unwrap().report.counts != c) as u64;
        nesting.record(seed, violations as f64, false);
    }
    Ok(vec![counts.finish(), scores.finish(), nesting.finish()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("gradient".parse::<Suite>().is_err());
    }

    #[test]
    fn exhaustive_search_small_cases() {
        assert_eq!(exhaustive_assignment(&[4.0, 1.0, 2.0, 3.0], 2, 2), 3.0);
        assert_eq!(exhaustive_assignment(&[5.0, 1.0, 9.0], 1, 3), 1.0);
    }

    #[test]
    fn lovasz_oracle_hard_binary() {
        // One foreground item predicted with certainty, one background item
        // wrongly predicted as foreground.
        let probs = [0.0, 1.0, 0.0, 1.0];
        assert!((lovasz_oracle(&probs, 2, &[1, 0]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn tally_flags_failures() {
        let mut t = Tally::new("p", 1.0);
        t.record(3, 0.5, true);
        t.record(4, 1.0, true);
        let r = t.finish();
        assert!(!r.passed);
        assert_eq!(r.failures, vec![Failure { seed: 4, observed: 1.0, expected: "< 1e0".into() }]);
    }

    #[test]
    fn fast_suites_pass() {
        for s in [Suite::Match, Suite::Loss, Suite::Metrics] {
            let r = s.run().unwrap();
            assert!(r.passed, "{}", serde_json::to_string_pretty(&r).unwrap());
        }
    }
}
