//! Scores a model before and after a short training run, comparing the
//! bottom-up masks with the masks after self-modulation.
//!
//! `cargo run --release --example evaluate -- [steps]`

use topdown_slots::config::TrainConfig;
use topdown_slots::data::{eval_split, SceneSpec};
use topdown_slots::eval::{evaluate, EvalOptions};
use topdown_slots::metrics::MboMode;
use topdown_slots::train::{full_forward, run_training, TrainState};

fn main() -> topdown_slots::Result<()> {
    let steps = std::env::args().nth(1).map_or(500, |s| s.parse().expect("steps"));
    let cfg = TrainConfig {
        slots: 4,
        codebook_size: 16,
        slot_dim: 16,
        batch_size: 4,
        lr: 1e-3,
        decoder_blocks: 1,
        decoder_heads: 2,
        data: SceneSpec {
            grid_h: 6,
            grid_w: 6,
            feat_dim: 8,
            ..SceneSpec::default()
        },
        ..TrainConfig::default()
    };
    let scenes = eval_split(&cfg.data, 64)?;
    let mut st = TrainState::new(&cfg)?;
    for opts in [
        EvalOptions::default(),
        EvalOptions {
            mbo_mode: MboMode::PerPred,
            last_block_masks: true,
        },
    ] {
        println!("-- {opts:?}");
        println!("untrained\n{}", evaluate(&st.model, &scenes, &opts)?.to_text());
    }
    run_training(&mut st, steps, &full_forward, |_, _| Ok(()))?;
    let rep = evaluate(&st.model, &scenes, &EvalOptions::default())?;
    println!("after {steps} steps\n{}", rep.to_text());
    let worst = rep
        .modulated
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.fg_ari.total_cmp(&b.1.fg_ari))
        .map(|(i, m)| (i, m.fg_ari));
    println!("hardest scene {worst:?}");
    Ok(())
}
