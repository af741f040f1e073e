//! Mask prediction and metric evaluation over a scene split.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::data::{derive_seed, SceneSample};
use crate::decoder::extract_masks;
use crate::error::{Error, Result};
use crate::metrics::{fg_ari, masks_from_labels, mbo, merge_by_category, miou_hungarian, MboMode};
use crate::model::{ForwardOptions, Model};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub last_block_masks: bool,
    pub mbo_mode: MboMode,
}

/// Everything the model predicts for one scene.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Hard slot label per position from the modulated slots.
    pub labels: Vec<usize>,
    /// `K x N` soft masks from the modulated slots.
    pub soft_masks: Tensor,
    /// Hard labels when decoding the bottom-up slots instead.
    pub labels_bottom_up: Vec<usize>,
    /// `K x N` slot-normalised attention of the last iteration of each pass.
    pub attn_pass1: Tensor,
    pub attn_pass2: Tensor,
    /// Code index per slot, when quantisation is on.
    pub code_indices: Option<Vec<usize>>,
    pub recon_loss: f64,
}

/// Initial-slot noise for evaluation is fixed by the model seed and the scene.
pub fn eval_noise(model: &Model, scene: &SceneSample) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(model.cfg.seed, "eval-noise", scene.seed));
    model.sample_noise(&mut rng)
}

pub fn predict(model: &Model, scene: &SceneSample, opts: &EvalOptions) -> Result<Prediction> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let noise = eval_noise(model, scene)?;
    let fo = ForwardOptions {
        ste_anchor: None,
        decode_bottom_up: true,
    };
    let out = model.forward(&mut g, &p, &scene.features, noise, &fo)?;
    let (soft_masks, labels) = extract_masks(&g, &out.decoded, opts.last_block_masks)?;
    let bottom_up = out.decoded_bottom_up.as_ref().expect("requested above");
    let (_, labels_bottom_up) = extract_masks(&g, bottom_up, opts.last_block_masks)?;
    Ok(Prediction {
        labels,
        soft_masks,
        labels_bottom_up,
        attn_pass1: g.value(out.attn.attn).clone(),
        attn_pass2: g.value(out.attn_mod.attn).clone(),
        code_indices: out.quantized.map(|q| q.indices),
        recon_loss: g.value(out.losses.recon).item(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SceneMetrics {
    pub fg_ari: f64,
    pub mbo_i: f64,
    pub mbo_c: f64,
    pub miou: f64,
}

impl SceneMetrics {
    pub fn is_finite(&self) -> bool {
        [self.fg_ari, self.mbo_i, self.mbo_c, self.miou].iter().all(|v| v.is_finite())
    }
}

/// Metrics of hard `labels` (one of `k` slots per position) against a scene.
pub fn score(scene: &SceneSample, labels: &[usize], k: usize, mode: MboMode) -> Result<SceneMetrics> {
    let pred = masks_from_labels(labels, k);
    Ok(SceneMetrics {
        fg_ari: fg_ari(&scene.gt_labels, labels, &scene.foreground())?,
        mbo_i: mbo(&scene.gt_masks, &pred, mode),
        mbo_c: mbo(&merge_by_category(&scene.gt_masks, &scene.categories), &pred, mode),
        miou: miou_hungarian(&scene.masks_with_background(), &pred),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub modulated: Vec<SceneMetrics>,
    pub bottom_up: Vec<SceneMetrics>,
}

fn mean(xs: &[SceneMetrics]) -> SceneMetrics {
    let n = xs.len().max(1) as f64;
    let sum = |f: fn(&SceneMetrics) -> f64| xs.iter().map(f).sum::<f64>() / n;
    SceneMetrics {
        fg_ari: sum(|m| m.fg_ari),
        mbo_i: sum(|m| m.mbo_i),
        mbo_c: sum(|m| m.mbo_c),
        miou: sum(|m| m.miou),
    }
}

impl EvalReport {
    pub fn mean_modulated(&self) -> SceneMetrics {
        mean(&self.modulated)
    }

    pub fn mean_bottom_up(&self) -> SceneMetrics {
        mean(&self.bottom_up)
    }

    /// Per-scene rows then two aggregate rows (`index` = `mean`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "pass", "fg_ari", "mbo_i", "mbo_c", "miou"])?;
        let row = |w: &mut csv::Writer<std::fs::File>, idx: &str, pass: &str, m: &SceneMetrics| {
            w.write_record([
                idx.to_string(),
                pass.to_string(),
                m.fg_ari.to_string(),
                m.mbo_i.to_string(),
                m.mbo_c.to_string(),
                m.miou.to_string(),
            ])
        };
        for (i, (a, b)) in self.modulated.iter().zip(&self.bottom_up).enumerate() {
            row(&mut w, &i.to_string(), "modulated", a)?;
            row(&mut w, &i.to_string(), "bottom_up", b)?;
        }
        row(&mut w, "mean", "modulated", &self.mean_modulated())?;
        row(&mut w, "mean", "bottom_up", &self.mean_bottom_up())?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let (a, b) = (self.mean_modulated(), self.mean_bottom_up());
        format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8}\n{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            "pass", "FG-ARI", "mBO_i", "mBO_c", "mIoU",
            "modulated", a.fg_ari, a.mbo_i, a.mbo_c, a.miou,
            "bottom-up", b.fg_ari, b.mbo_i, b.mbo_c, b.miou
        )
    }
}

/// Scores every scene that has at least one object.
pub fn evaluate(model: &Model, scenes: &[SceneSample], opts: &EvalOptions) -> Result<EvalReport> {
    let (h, w, f) = (model.cfg.data.grid_h, model.cfg.data.grid_w, model.cfg.data.feat_dim);
    let mut report = EvalReport::default();
    for s in scenes {
        if (s.height, s.width, s.features.cols()) != (h, w, f) {
            return Err(Error::Config(format!(
                "config hash mismatch: checkpoint {} expects {h}x{w}x{f} scenes, dataset has {}x{}x{}",
                model.cfg.config_hash(),
                s.height,
                s.width,
                s.features.cols()
            )));
        }
        if s.num_objects() == 0 {
            continue;
        }
        let pred = predict(model, s, opts)?;
        let k = model.cfg.slots;
        report.modulated.push(score(s, &pred.labels, k, opts.mbo_mode)?);
        report.bottom_up.push(score(s, &pred.labels_bottom_up, k, opts.mbo_mode)?);
    }
    Ok(report)
}
