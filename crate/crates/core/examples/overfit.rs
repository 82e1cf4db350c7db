//! Overfits the default desk configuration on one synthetic scene and
//! prints progress. Usage: `overfit [max_steps] [aux:0|1] [scene_seed] [config.json]`.

use std::time::Instant;

use occu_core::config::RunConfig;
use occu_core::model::OccModel;
use occu_core::synth::generate;
use occu_core::train::Trainer;

fn main() -> occu_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let max_steps: usize = args.get(1).map_or(300, |s| s.parse().unwrap());
    let aux = args.get(2).is_none_or(|s| s != "0");
    let mut cfg = match args.get(4) {
        Some(p) => RunConfig::load(std::path::Path::new(p))?,
        None => RunConfig::default(),
    };
    cfg.model.aux = aux;
    cfg.scene.seed = args.get(3).map_or(0, |s| s.parse().unwrap());
    let sample = generate(&cfg.scene)?;
    let model = OccModel::new(&cfg.model, &cfg.scene.grid, &sample.rig, cfg.seed)?;
    println!("params: {}", model.store.num_scalars());
    let mut tr = Trainer::new(&cfg, model);
    let t0 = Instant::now();
    while tr.step < max_steps {
        let reports = tr.run(std::slice::from_ref(&sample), 25, None)?;
        let mean = reports.iter().map(|r| r.total).sum::<f64>() / reports.len() as f64;
        let occ = reports.iter().map(|r| r.occ_total).sum::<f64>() / reports.len() as f64;
        let m = tr.evaluate(std::slice::from_ref(&sample), false)?;
        println!(
            "step {:4} loss {:.4} occ {:.4} iou {:.3} miou {:.3} {:.2}s/step",
            tr.step,
            mean,
            occ,
            m.scene_iou.unwrap_or(0.0),
            m.miou.unwrap_or(0.0),
            t0.elapsed().as_secs_f64() / tr.step as f64
        );
    }
    Ok(())
}
