//! Per-component FLOP counts for one forward pass, analytic and measured
//! on the autodiff tape.
//!
//! `cargo run --release --example flops_report -- [config.toml]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use topdown_slots::config::TrainConfig;
use topdown_slots::data::eval_split;
use topdown_slots::flops::{count_flops, measure_flops};
use topdown_slots::model::Model;

fn main() -> topdown_slots::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => TrainConfig::from_path(p.as_ref())?,
        None => TrainConfig::default(),
    };
    let analytic = count_flops(&cfg)?;
    println!("analytic\n{}", analytic.to_text());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(&cfg, &mut rng)?;
    let scene = &eval_split(&cfg.data, 1)?[0];
    let noise = model.sample_noise(&mut rng)?;
    let measured = measure_flops(&model, &scene.features, analytic.encoder, noise)?;
    println!("measured\n{}", measured.to_text());
    println!("agree: {}", analytic == measured);
    Ok(())
}
