//! Trains briefly, then writes per-slot attention heatmaps (both passes) and
//! predicted / ground-truth mask images for one eval scene.
//!
//! `cargo run --release --example visualize -- [sample]`

use topdown_slots::cli::{cmd_train, cmd_visualize};
use topdown_slots::config::TrainConfig;
use topdown_slots::data::SceneSpec;
use topdown_slots::eval::EvalOptions;

fn main() -> topdown_slots::Result<()> {
    let sample = std::env::args().nth(1).map_or(0, |s| s.parse().expect("sample"));
    let cfg = TrainConfig {
        steps: 200,
        slots: 4,
        codebook_size: 16,
        slot_dim: 16,
        batch_size: 4,
        decoder_blocks: 1,
        decoder_heads: 2,
        eval_scenes: 8,
        data: SceneSpec {
            grid_h: 8,
            grid_w: 8,
            feat_dim: 8,
            ..SceneSpec::default()
        },
        ..TrainConfig::default()
    };
    let root = std::env::temp_dir().join("topdown-visualize");
    cmd_train(&cfg, &root.join("run"), None, &EvalOptions::default())?;
    let images = cmd_visualize(&root.join("run").join("checkpoint.bin"), sample, None, &root.join("images"), false)?;
    for p in images {
        println!("{}", p.display());
    }
    Ok(())
}
