//! `occu`: generate synthetic scenes, train, evaluate, run invariant
//! suites and export predicted grids.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use occu_core::checks::Suite;
use occu_core::config::{RunConfig, SEED_ENV};
use occu_core::io::{self as oio, Checkpoint, Manifest, ManifestEntry};
use occu_core::metrics::{confusion, iou_scores, range_mask, render_table, ConfusionCounts, MetricsReport};
use occu_core::model::OccModel;
use occu_core::synth::{generate, Sample, SceneSpec};
use occu_core::train::Trainer;
use occu_core::Error;

#[derive(Parser)]
#[command(name = "occu", version, about = "Camera-only 3D semantic occupancy on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic samples and a manifest.
    Gen {
        /// Scene spec JSON; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train on a generated dataset and write a checkpoint.
    Train {
        /// Run config JSON; defaults (with the data's scene) when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the config's step count.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines loss log; `<out>.jsonl` when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long, required_unless_present = "oracle_pred")]
        ckpt: Option<PathBuf>,
        /// Build the model from this config and load the checkpoint into it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated range radii in metres.
        #[arg(long, value_delimiter = ',')]
        ranges: Vec<f64>,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle_pred: bool,
        /// Include the free class in the per-class scores and mean.
        #[arg(long)]
        include_free: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a seeded invariant suite.
    Check {
        #[arg(long, value_parser = parse_suite)]
        suite: Suite,
    },
    /// Predict one sample and write its `.occgrid`.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sample directory.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failing property or training guard, as opposed to bad input.
#[derive(Debug)]
struct PropertyFailure(String);

impl std::fmt::Display for PropertyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for PropertyFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<PropertyFailure>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::BadLoss { .. } | Error::NonFinite { .. } | Error::OracleInvalid(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Cmd::Gen { spec, out, count } => cmd_gen(spec.as_deref(), &out, count),
        Cmd::Train { config, data, steps, out, log } => cmd_train(config.as_deref(), &data, steps, &out, log.as_deref()),
        Cmd::Eval { ckpt, config, data, ranges, oracle_pred, include_free, out } => {
            cmd_eval(ckpt.as_deref(), config.as_deref(), &data, &ranges, oracle_pred, include_free, out.as_deref())
        }
        Cmd::Check { suite } => cmd_check(suite),
        Cmd::Export { ckpt, sample, out } => cmd_export(&ckpt, &sample, &out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not a u64"))?)),
        Err(_) => Ok(None),
    }
}

fn cmd_gen(spec: Option<&Path>, out: &Path, count: usize) -> anyhow::Result<()> {
    let mut base = match spec {
        Some(p) => serde_json::from_slice::<SceneSpec>(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SceneSpec::default(),
    };
    if let Some(s) = env_seed()? {
        base.seed = s;
    }
    base.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = Manifest::default();
    for i in 0..count {
        let spec = SceneSpec { seed: base.seed.wrapping_add(i as u64), ..base.clone() };
        let sample = generate(&spec)?;
        let name = oio::sample_dir_name(i);
        oio::save_sample(&out.join(&name), &spec, &sample)?;
        manifest.samples.push(ManifestEntry { path: name, seed: spec.seed });
    }
    manifest.save(out)?;
    eprintln!("wrote {count} samples to {}", out.display());
    Ok(())
}

/// Loads every listed sample and checks they share one scene layout.
fn load_data(dir: &Path) -> anyhow::Result<(Option<SceneSpec>, Vec<Sample>)> {
    let mut first: Option<SceneSpec> = None;
    let mut samples = Vec::new();
    for path in oio::sample_paths(dir).with_context(|| format!("reading dataset {}", dir.display()))? {
        let (spec, sample) = oio::load_sample(&path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(f) = &first {
            if !same_layout(f, &spec) {
                bail!("{} has a different grid or camera rig than the first sample", path.display());
            }
        } else {
            first = Some(spec);
        }
        samples.push(sample);
    }
    Ok((first, samples))
}

fn same_layout(a: &SceneSpec, b: &SceneSpec) -> bool {
    a.grid == b.grid && a.rig() == b.rig()
}

fn cmd_train(config: Option<&Path>, data: &Path, steps: Option<usize>, out: &Path, log: Option<&Path>) -> anyhow::Result<()> {
    let (scene, samples) = load_data(data)?;
    let scene = scene.context("dataset is empty")?;
    let mut cfg = match config {
        Some(p) => {
            let cfg = RunConfig::load(p).with_context(|| format!("config {}", p.display()))?;
            if !same_layout(&cfg.scene, &scene) {
                bail!("config scene grid/rig does not match the data in {}", data.display());
            }
            cfg
        }
        None => {
            let cfg = RunConfig { scene: scene.clone(), ..Default::default() };
            cfg.validate()?;
            cfg
        }
    };
    cfg.apply_env()?;
    let steps = steps.unwrap_or(cfg.train.steps);
    let model = OccModel::new(&cfg.model, &cfg.scene.grid, &cfg.scene.rig(), cfg.seed)?;
    let mut trainer = Trainer::new(&cfg, model);
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("jsonl"));
    let mut w = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let reports = trainer.run(&samples, steps, Some(&mut w));
    w.flush()?;
    let reports = reports?;
    Checkpoint::from_model(&cfg, &trainer.model).save(out)?;
    if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
        eprintln!("{steps} steps, total loss {:.4} -> {:.4}", first.total, last.total);
    }
    eprintln!("checkpoint {}, log {}", out.display(), log_path.display());
    Ok(())
}

#[derive(Serialize)]
struct RangeReport {
    radius: f64,
    report: MetricsReport,
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    overall: MetricsReport,
    ranges: Vec<RangeReport>,
    warnings: Vec<String>,
}

fn cmd_eval(
    ckpt: Option<&Path>,
    config: Option<&Path>,
    data: &Path,
    ranges: &[f64],
    oracle_pred: bool,
    include_free: bool,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    if ranges.windows(2).any(|w| w[1] <= w[0]) || ranges.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Contract(format!("--ranges must be positive and increasing: {ranges:?}")).into());
    }
    let (scene, samples) = load_data(data)?;
    let model = match (oracle_pred, ckpt) {
        (false, Some(p)) => {
            let ck = Checkpoint::load(p).with_context(|| format!("checkpoint {}", p.display()))?;
            if let Some(s) = &scene {
                if !same_layout(&ck.config.scene, s) {
                    bail!("checkpoint scene grid/rig does not match the data in {}", data.display());
                }
            }
            match config {
                Some(c) => {
                    let cfg = RunConfig::load(c).with_context(|| format!("config {}", c.display()))?;
                    let model = OccModel::new(&cfg.model, &cfg.scene.grid, &cfg.scene.rig(), cfg.seed)?;
                    ck.apply(&model)?;
                    Some(model)
                }
                None => Some(ck.into_model()?),
            }
        }
        _ => None,
    };
    let grid = scene.as_ref().map(|s| s.grid);
    let reach = grid.map_or(0.0, |g| [g.min[0], g.max[0], g.min[1], g.max[1]].into_iter().map(f64::abs).fold(0.0, f64::max));
    let mut warnings = Vec::new();
    let radii: Vec<f64> = ranges
        .iter()
        .map(|&r| {
            if r > reach {
                warnings.push(format!("range {r} m exceeds grid extent, clamped to {reach} m"));
                reach
            } else {
                r
            }
        })
        .collect();
    let masks: Vec<Vec<bool>> = grid.map_or_else(Vec::new, |g| radii.iter().map(|&r| range_mask(&g, r)).collect());
    let mut overall = ConfusionCounts::default();
    let mut per_range = vec![ConfusionCounts::default(); radii.len()];
    for s in &samples {
        let pred = match &model {
            Some(m) => m.predict(&s.image_tensor()?)?.remove(0),
            None => s.occupancy.clone(),
        };
        overall.merge(&confusion(&pred, &s.occupancy, None)?);
        for (acc, mask) in per_range.iter_mut().zip(&masks) {
            acc.merge(&confusion(&pred, &s.occupancy, Some(mask))?);
        }
    }
    let report = EvalReport {
        samples: samples.len(),
        overall: iou_scores(&overall, include_free),
        ranges: radii
            .iter()
            .zip(&per_range)
            .map(|(&radius, c)| RangeReport { radius, report: iou_scores(c, include_free) })
            .collect(),
        warnings,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    match out {
        Some(p) => std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{json}"),
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    eprint!("{}", render_table(&report.overall));
    for r in &report.ranges {
        eprintln!("range {} m: mIoU {}", r.radius, r.report.miou.map_or("-".into(), |v| format!("{:.2}", 100.0 * v)));
    }
    Ok(())
}

fn cmd_check(suite: Suite) -> anyhow::Result<()> {
    let report = suite.run()?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    for p in report.failing() {
        for f in &p.failures {
            eprintln!("FAIL {} seed {} observed {:e} expected {}", p.name, f.seed, f.observed, f.expected);
        }
        if p.failures.is_empty() {
            eprintln!("FAIL {}: no instances", p.name);
        }
    }
    if report.passed {
        Ok(())
    } else {
        let names: Vec<&str> = report.failing().map(|p| p.name.as_str()).collect();
        Err(PropertyFailure(format!("suite {} failed: {}", suite.name(), names.join(", "))).into())
    }
}

fn cmd_export(ckpt: &Path, sample: &Path, out: &Path) -> anyhow::Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("checkpoint {}", ckpt.display()))?;
    let (spec, s) = oio::load_sample(sample).with_context(|| format!("sample {}", sample.display()))?;
    if !same_layout(&ck.config.scene, &spec) {
        bail!("checkpoint scene grid/rig does not match {}", sample.display());
    }
    let model = ck.into_model()?;
    let pred = model.predict(&s.image_tensor()?)?.remove(0);
    oio::save_occgrid(out, &pred)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
