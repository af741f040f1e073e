//! Optimisation loop: per-sample tapes, gradient averaging over the batch,
//! global-norm clipping and Adam.

use std::fs::{File, OpenOptions};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamConfig, Bound, Graph, Tensor, Var};
use crate::config::TrainConfig;
use crate::data::{derive_seed, SceneSample, SceneStream};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::pathway::CodeUsage;

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub rng: ChaCha8Rng,
    /// Completed optimiser steps.
    pub step: u64,
    /// Code usage in the current logging window.
    pub usage: CodeUsage,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "model", 0));
        let model = Model::new(cfg, &mut rng)?;
        Ok(Self {
            usage: CodeUsage::new(cfg.codebook_size),
            model,
            rng,
            step: 0,
        })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.model.cfg
    }
}

/// Loss nodes produced by a forward function for one sample.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub recon: Var,
    pub vq: Option<Var>,
    pub total: Var,
    pub code_indices: Option<Vec<usize>>,
}

/// Signature shared by the full model and any reference forward.
pub type ForwardFn<'a> = dyn Fn(&Model, &mut Graph, &Bound, &SceneSample, Tensor) -> Result<StepOutput> + 'a;

pub fn full_forward(model: &Model, g: &mut Graph, p: &Bound, s: &SceneSample, noise: Tensor) -> Result<StepOutput> {
    let out = model.forward(g, p, &s.features, noise, &ForwardOptions::default())?;
    Ok(StepOutput {
        recon: out.losses.recon,
        vq: out.losses.vq,
        total: out.losses.total,
        code_indices: out.quantized.map(|q| q.indices),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub recon: f64,
    pub vq: Option<f64>,
    /// Perplexity of code usage in the current window, including this step.
    pub perplexity: Option<f64>,
}

/// One optimiser step on `batch`.
pub fn train_step(state: &mut TrainState, batch: &[SceneSample], forward: &ForwardFn) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    let step = state.step + 1;
    let scale = 1.0 / batch.len() as f64;
    let (mut recon, mut vq, mut has_vq) = (0.0, 0.0, false);
    for s in batch {
        let noise = state.model.sample_noise(&mut state.rng)?;
        let mut g = Graph::new();
        let p = state.model.store.bind(&mut g);
        let out = forward(&state.model, &mut g, &p, s, noise)?;
        let r = g.value(out.recon).item();
        if !r.is_finite() {
            return Err(Error::NonFiniteLoss { step, component: "L_recon" });
        }
        recon += r;
        if let Some(v) = out.vq {
            let v = g.value(v).item();
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { step, component: "L_vq" });
            }
            vq += v;
            has_vq = true;
        }
        g.backward_scaled(out.total, scale)?;
        state.model.store.accumulate_grads(&g);
        if let Some(idx) = &out.code_indices {
            state.usage.record(idx);
        }
    }
    let cfg = state.model.cfg.clone();
    state.model.store.clip_grad_norm(cfg.clip_norm);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    state.model.store.adam_step(&adam)?;
    state.step = step;
    let perplexity = if state.usage.total() > 0 {
        Some(state.usage.perplexity()?)
    } else {
        None
    };
    if step.is_multiple_of(cfg.log_window) {
        state.usage.reset();
    }
    Ok(StepRecord {
        step,
        recon: recon * scale,
        vq: has_vq.then_some(vq * scale),
        perplexity,
    })
}

/// Runs `steps` more steps. Batch `b` of the training stream feeds step `b + 1`,
/// so a resumed state sees the same data as an uninterrupted one.
pub fn run_training(
    state: &mut TrainState,
    steps: u64,
    forward: &ForwardFn,
    mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let stream = SceneStream::new(&state.model.cfg.data, state.model.cfg.batch_size);
    let mut log = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let batch = stream.batch_at(state.step)?;
        let rec = train_step(state, &batch, forward)?;
        on_step(state, &rec)?;
        log.push(rec);
    }
    Ok(log)
}

pub const LOSS_HEADER: [&str; 4] = ["step", "l_recon", "l_vq", "perplexity"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV writer for the loss curve; appends when the file already exists.
pub struct LossLog {
    writer: csv::Writer<File>,
}

impl LossLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let exists = append && path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(exists)
            .truncate(!exists)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            writer.write_record(LOSS_HEADER)?;
        }
        Ok(Self { writer })
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<()> {
        self.writer
            .write_record([r.step.to_string(), r.recon.to_string(), opt(r.vq), opt(r.perplexity)])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io("loss log", e))
    }
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let parse = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::format(path, format!("bad number `{s}`")))
        }
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::format(path, "expected 4 columns"));
        }
        out.push(StepRecord {
            step: rec[0].parse().map_err(|_| Error::format(path, "bad step"))?,
            recon: parse(&rec[1])?.ok_or_else(|| Error::format(path, "missing l_recon"))?,
            vq: parse(&rec[2])?,
            perplexity: parse(&rec[3])?,
        });
    }
    Ok(out)
}

/// Trailing moving average of `values` over `window` entries.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    values
        .windows(w.min(values.len()).max(1))
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;
    use crate::data::SceneSpec;

    fn tiny() -> TrainConfig {
        TrainConfig {
            slots: 3,
            codebook_size: 8,
            slot_dim: 8,
            decoder_blocks: 1,
            decoder_heads: 2,
            batch_size: 2,
            log_window: 3,
            ablation: Ablation::FULL,
            data: SceneSpec {
                grid_h: 4,
                grid_w: 4,
                feat_dim: 6,
                min_objects: 1,
                max_objects: 2,
                ..SceneSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn usage_window_counts_slots() {
        let mut st = TrainState::new(&tiny()).unwrap();
        let recs = run_training(&mut st, 2, &full_forward, |s, _| {
            assert_eq!(s.usage.total() % (3 * 2), 0);
            Ok(())
        })
        .unwrap();
        assert_eq!(st.usage.total(), 2 * 2 * 3);
        assert!(recs.iter().all(|r| r.perplexity.unwrap() >= 1.0 && r.perplexity.unwrap() <= 8.0));
        run_training(&mut st, 1, &full_forward, |_, _| Ok(())).unwrap();
        assert_eq!(st.usage.total(), 0, "window of 3 steps resets");
    }

    #[test]
    fn nan_loss_names_step_and_component() {
        let mut st = TrainState::new(&tiny()).unwrap();
        let bad = |m: &Model, g: &mut Graph, p: &Bound, s: &SceneSample, n: Tensor| {
            let mut out = full_forward(m, g, p, s, n)?;
            out.recon = g.constant(Tensor::scalar(f64::NAN));
            Ok(out)
        };
        let err = run_training(&mut st, 1, &bad, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 1, component: "L_recon" }), "{err}");
    }

    #[test]
    fn moving_average_basic() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
    }
}
