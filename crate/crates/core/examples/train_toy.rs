//! Trains the full model on a toy grid for a few hundred steps through the
//! same entry point as `topdown train`, then reloads the checkpoint.
//!
//! `cargo run --release --example train_toy -- [steps]`

use topdown_slots::checkpoint;
use topdown_slots::cli::cmd_train;
use topdown_slots::config::TrainConfig;
use topdown_slots::eval::EvalOptions;
use topdown_slots::train::{moving_average, read_loss_csv};

const CONFIG: &str = r#"
slots = 4
codebook_size = 16
slot_dim = 16
batch_size = 4
lr = 1e-3
decoder_blocks = 1
decoder_heads = 2
eval_scenes = 32
[data]
grid_h = 6
grid_w = 6
feat_dim = 8
min_objects = 1
max_objects = 3
categories = 4
"#;

fn main() -> topdown_slots::Result<()> {
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    let cfg = TrainConfig {
        steps,
        ..TrainConfig::from_toml_str(CONFIG)?
    };
    let dir = std::env::temp_dir().join("topdown-train-toy");
    let manifest = cmd_train(&cfg, &dir, None, &EvalOptions::default())?;
    println!("artifacts: {:?}", manifest.artifacts);

    let log = read_loss_csv(&dir.join("loss.csv"))?;
    let ma = moving_average(&log.iter().map(|r| r.recon).collect::<Vec<_>>(), 50);
    for (i, v) in ma.iter().enumerate().step_by(50) {
        println!("step {:>5}  recon (MA-50) {v:.5}", i + 50);
    }
    if let Some(p) = log.last().and_then(|r| r.perplexity) {
        println!("code perplexity {p:.2} of {}", cfg.codebook_size);
    }

    let st = checkpoint::load(&dir.join("checkpoint.bin"))?;
    println!("checkpoint at step {} with {} parameter tensors", st.step, st.model.store.iter().count());
    Ok(())
}
