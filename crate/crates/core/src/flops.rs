//! Per-component operation counts, analytic and measured on the tape.
//!
//! Cost model: a matrix product costs `2mkn`, element-wise ops one per
//! output value, softmax three and layer norm seven per value, reductions one
//! per input value, nearest-code search `3KED`. Gathers, slices and
//! concatenations are free.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Component, Graph, Tensor};
use crate::config::TrainConfig;
use crate::error::Result;
use crate::model::{ForwardOptions, Model};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopReport {
    /// Synthesis of the input features (stands in for the frozen encoder).
    pub encoder: u64,
    /// Input adapter, key/value projections and slot initialisation, shared by both passes.
    pub slot_input: u64,
    pub pass1: u64,
    pub pathway: u64,
    pub pass2: u64,
    pub decoder: u64,
    pub loss: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.encoder + self.slot_input + self.pass1 + self.pathway + self.pass2 + self.decoder + self.loss
    }

    pub fn get(&self, c: Component) -> u64 {
        match c {
            Component::Encoder => self.encoder,
            Component::SlotInput => self.slot_input,
            Component::Pass1 => self.pass1,
            Component::Pathway => self.pathway,
            Component::Pass2 => self.pass2,
            Component::Decoder => self.decoder,
            Component::Loss => self.loss,
        }
    }

    /// Second slot-attention pass as a percentage of the total.
    pub fn pass2_pct(&self) -> f64 {
        100.0 * self.pass2 as f64 / self.total() as f64
    }

    /// Everything the top-down pathway adds over a single bottom-up pass
    /// (cue construction plus the second pass), as a percentage of the total.
    pub fn topdown_overhead_pct(&self) -> f64 {
        100.0 * (self.pathway + self.pass2) as f64 / self.total() as f64
    }

    /// Aligned two-column text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in Component::ALL {
            s.push_str(&format!("{:<12} {:>14}\n", c.name(), self.get(c)));
        }
        s.push_str(&format!("{:<12} {:>14}\n", "total", self.total()));
        s.push_str(&format!("pass2 share {:.3}%  top-down overhead {:.3}%\n", self.pass2_pct(), self.topdown_overhead_pct()));
        s
    }
}

/// Analytic counts for one training forward of `cfg`.
pub fn count_flops(cfg: &TrainConfig) -> Result<FlopReport> {
    let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(model_flops(&model))
}

pub fn model_flops(model: &Model) -> FlopReport {
    let cfg = &model.cfg;
    let (k, n, d, f, t) = (cfg.slots, cfg.positions(), cfg.slot_dim, cfg.data.feat_dim, cfg.iterations as u64);
    let e = cfg.codebook_size;
    let sa = &model.slot_attention;
    let ab = cfg.ablation;

    let mut pathway = (k * n * d) as u64; // outer products
    if ab.use_vq {
        pathway += (3 * k * e * d + 2 * k * d) as u64;
    }
    if ab.use_m_c {
        pathway += model.channel_mlp.flops(k);
    }
    if ab.use_m_s && ab.use_shift {
        pathway += (3 * k * n) as u64;
    }
    let mut loss = (3 * n * f) as u64;
    if ab.use_vq {
        loss += (3 * k * d + 2) as u64;
    }
    FlopReport {
        encoder: (n * f) as u64,
        slot_input: sa.input_flops(k, n),
        pass1: t * sa.iteration_flops(k, n),
        pathway,
        pass2: t * (sa.iteration_flops(k, n) + (k * n * d) as u64),
        decoder: model.decoder.flops(k),
        loss,
    }
}

/// Counts accumulated by the tape during one real forward on `x`.
pub fn measure_flops(model: &Model, x: &Tensor, synthesis_flops: u64, noise: Tensor) -> Result<FlopReport> {
    let mut g = Graph::new();
    g.set_scope(Component::Encoder);
    g.record_flops(synthesis_flops);
    let p = model.store.bind(&mut g);
    model.forward(&mut g, &p, x, noise, &ForwardOptions::default())?;
    Ok(FlopReport {
        encoder: g.flops(Component::Encoder),
        slot_input: g.flops(Component::SlotInput),
        pass1: g.flops(Component::Pass1),
        pathway: g.flops(Component::Pathway),
        pass2: g.flops(Component::Pass2),
        decoder: g.flops(Component::Decoder),
        loss: g.flops(Component::Loss),
    })
}
