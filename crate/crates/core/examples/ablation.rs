//! Runs the six-row ablation table (baseline, channel cue with and without
//! quantisation, spatial cue with and without the shift, full model) on a
//! small grid and prints it.
//!
//! `cargo run --release --example ablation -- [steps]`

use topdown_slots::cli::{ablation_text, run_ablation};
use topdown_slots::config::TrainConfig;
use topdown_slots::data::SceneSpec;
use topdown_slots::eval::EvalOptions;

fn main() -> topdown_slots::Result<()> {
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let cfg = TrainConfig {
        steps,
        slots: 4,
        codebook_size: 16,
        slot_dim: 16,
        batch_size: 4,
        lr: 1e-3,
        decoder_blocks: 1,
        decoder_heads: 2,
        eval_scenes: 64,
        data: SceneSpec {
            grid_h: 6,
            grid_w: 6,
            feat_dim: 8,
            ..SceneSpec::default()
        },
        ..TrainConfig::default()
    };
    let rows = run_ablation(&cfg, &EvalOptions::default())?;
    print!("{}", ablation_text(&rows));
    Ok(())
}
