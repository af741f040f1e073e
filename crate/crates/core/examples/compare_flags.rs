//! Trains the full model and the baseline on the same data for a few seeds
//! and prints seed-mean metrics for both.
//!
//! `cargo run --release --example compare_flags -- [config.toml] [steps] [seeds]`

use topdown_slots::config::{Ablation, TrainConfig};
use topdown_slots::data::eval_split;
use topdown_slots::eval::{evaluate, EvalOptions};
use topdown_slots::train::{full_forward, run_training, TrainState};

fn main() -> topdown_slots::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = match args.get(1) {
        Some(p) => TrainConfig::from_path(p.as_ref())?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.get(2) {
        cfg.steps = s.parse().expect("steps");
    }
    let seeds: u64 = args.get(3).map_or(1, |s| s.parse().expect("seeds"));
    let scenes = eval_split(&cfg.data, cfg.eval_scenes)?;
    for (name, ablation) in [("baseline", Ablation::BASELINE), ("full", Ablation::FULL)] {
        let (mut ari, mut miou) = (0.0, 0.0);
        for seed in 0..seeds {
            let c = TrainConfig { ablation, seed, ..cfg.clone() };
            let mut st = TrainState::new(&c)?;
            run_training(&mut st, c.steps, &full_forward, |_, r| {
                if r.step % 1000 == 0 {
                    eprintln!("{name} seed {seed} step {} recon {:.5}", r.step, r.recon);
                }
                Ok(())
            })?;
            let m = evaluate(&st.model, &scenes, &EvalOptions::default())?.mean_modulated();
            println!("{name:<9} seed {seed}  FG-ARI {:.4}  mBO {:.4}  mIoU {:.4}", m.fg_ari, m.mbo_i, m.miou);
            ari += m.fg_ari;
            miou += m.miou;
        }
        println!("{name:<9} mean    FG-ARI {:.4}  mIoU {:.4}", ari / seeds as f64, miou / seeds as f64);
    }
    Ok(())
}
