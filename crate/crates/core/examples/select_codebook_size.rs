//! Codebook-size selection: double E while code perplexity keeps growing.
//!
//! First replays a recorded perplexity log through the selection rule, then
//! runs the real sweep on a tiny configuration.
//!
//! `cargo run --release --example select_codebook_size -- [steps]`

use topdown_slots::cli::{measure_perplexity, select_codebook_size};
use topdown_slots::config::TrainConfig;
use topdown_slots::data::SceneSpec;

fn main() -> topdown_slots::Result<()> {
    let recorded = [(256, 176.9), (512, 253.9), (1024, 242.8)];
    let sel = select_codebook_size(256, 1024, |e| Ok(recorded.iter().find(|r| r.0 == e).unwrap().1))?;
    println!("recorded log -> E = {} (plateau {})", sel.chosen, sel.plateau);

    let steps = std::env::args().nth(1).map_or(200, |s| s.parse().expect("steps"));
    let cfg = TrainConfig {
        steps,
        log_window: 50,
        slots: 4,
        slot_dim: 8,
        batch_size: 4,
        decoder_blocks: 1,
        decoder_heads: 2,
        max_codebook_size: 64,
        data: SceneSpec {
            grid_h: 4,
            grid_w: 4,
            feat_dim: 6,
            ..SceneSpec::default()
        },
        ..TrainConfig::default()
    };
    let sel = select_codebook_size(4, cfg.max_codebook_size, |e| {
        let p = measure_perplexity(&cfg, e)?;
        println!("  E = {e:>3}  perplexity {p:.3}");
        Ok(p)
    })?;
    println!("sweep -> E = {} (plateau {})", sel.chosen, sel.plateau);
    Ok(())
}
