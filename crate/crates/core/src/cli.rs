//! Command-line entry points. Every command writes under its output
//! directory and lists what it wrote in `manifest.json`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{hex_digest, Ablation, TrainConfig};
use crate::data::{self, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict, EvalOptions, SceneMetrics};
use crate::flops::count_flops;
use crate::image::{write_heatmap, write_labels};
use crate::metrics::MboMode;
use crate::pathway::codebook_report;
use crate::train::{full_forward, run_training, LossLog, TrainState};

pub const OUT_ENV: &str = "TOPDOWN_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "topdown", version, about = "Slot attention with a bootstrapped top-down pathway")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $TOPDOWN_OUT, else ./runs).
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config step count.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Take decoder masks from the last block only.
    #[arg(long)]
    pub last_block_masks: bool,
    /// per-gt | per-pred
    #[arg(long, default_value = "per-gt")]
    pub mbo_mode: MboMode,
}

impl std::fmt::Display for MboMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MboMode::PerGt => "per-gt",
            MboMode::PerPred => "per-pred",
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a scene dataset directory.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 256)]
        train_scenes: usize,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint (its config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        masks: MaskArgs,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by `gen`; generated from the checkpoint config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        #[command(flatten)]
        masks: MaskArgs,
    },
    /// Train and evaluate the six ablation rows.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        masks: MaskArgs,
    },
    /// Double the codebook until code perplexity plateaus.
    SelectCodebookSize {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        start: usize,
    },
    /// Attention heatmaps and mask images for one eval scene, or code groups.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        /// Group eval scenes by the code their slots select.
        #[arg(long)]
        codebook: bool,
        /// Number of most-used codes to dump in codebook mode.
        #[arg(long, default_value_t = 8)]
        top: usize,
        #[arg(long)]
        last_block_masks: bool,
    },
    /// Dump code usage and nearest-other-code distances.
    Codebook {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Print per-component operation counts for a config.
    Flops {
        #[command(flatten)]
        common: Common,
    },
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub code_hash: String,
    pub config_toml: String,
    pub config_hash: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub out_dir: PathBuf,
    /// Paths relative to `out_dir`.
    pub artifacts: Vec<PathBuf>,
}

struct Run {
    manifest: RunManifest,
}

impl Run {
    fn start(command: &str, cfg: &TrainConfig, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let version = format!("topdown-slots {}", env!("CARGO_PKG_VERSION"));
        Ok(Self {
            manifest: RunManifest {
                command: command.to_string(),
                code_hash: hex_digest(version.as_bytes())[..16].to_string(),
                code_version: version,
                config_toml: cfg.to_toml(),
                config_hash: cfg.config_hash(),
                seed: cfg.seed,
                started: chrono::Utc::now().to_rfc3339(),
                finished: String::new(),
                out_dir: out.to_path_buf(),
                artifacts: Vec::new(),
            },
        })
    }

    fn add(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.manifest.out_dir).unwrap_or(path).to_path_buf();
        if !self.manifest.artifacts.contains(&rel) {
            self.manifest.artifacts.push(rel);
        }
    }

    fn write_text(&mut self, path: &Path, text: &str) -> Result<()> {
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        self.add(path);
        Ok(())
    }

    fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished = chrono::Utc::now().to_rfc3339();
        self.manifest.artifacts.sort();
        let path = self.manifest.out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }
}

fn out_dir(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

pub fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_path(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

/// Writes train and eval splits under `out`.
pub fn cmd_gen(cfg: &TrainConfig, out: &Path, train_scenes: usize) -> Result<RunManifest> {
    let mut run = Run::start("gen", cfg, out)?;
    for (split, n) in [(Split::Train, train_scenes), (Split::Eval, cfg.eval_scenes)] {
        for p in data::write_split(out, &cfg.data, split, n)? {
            run.add(&p);
        }
    }
    run.write_text(&out.join("config.toml"), &cfg.to_toml())?;
    run.finish()
}

fn eval_scenes(cfg: &TrainConfig, data_dir: Option<&Path>) -> Result<Vec<data::SceneSample>> {
    match data_dir {
        Some(d) => {
            let idx = data::read_index(d, Split::Eval)?;
            if (idx.height, idx.width, idx.feat_dim) != (cfg.data.grid_h, cfg.data.grid_w, cfg.data.feat_dim) {
                return Err(Error::Config(format!(
                    "config hash mismatch: checkpoint {} expects {}x{}x{} scenes, dataset {} has {}x{}x{}",
                    cfg.config_hash(),
                    cfg.data.grid_h,
                    cfg.data.grid_w,
                    cfg.data.feat_dim,
                    d.display(),
                    idx.height,
                    idx.width,
                    idx.feat_dim
                )));
            }
            data::read_split(d, Split::Eval)
        }
        None => data::eval_split(&cfg.data, cfg.eval_scenes),
    }
}

const EVAL_LOG_HEADER: [&str; 6] = ["step", "pass", "fg_ari", "mbo_i", "mbo_c", "miou"];

fn eval_row(step: u64, pass: &str, m: &SceneMetrics) -> [String; 6] {
    [
        step.to_string(),
        pass.to_string(),
        m.fg_ari.to_string(),
        m.mbo_i.to_string(),
        m.mbo_c.to_string(),
        m.miou.to_string(),
    ]
}

/// Trains (or resumes) and writes the loss curve, periodic evaluations and checkpoints.
pub fn cmd_train(cfg: &TrainConfig, out: &Path, resume: Option<&Path>, opts: &EvalOptions) -> Result<RunManifest> {
    let (mut state, target) = match resume {
        Some(p) => {
            let st = checkpoint::load(p)?;
            let target = cfg.steps.max(st.step);
            (st, target)
        }
        None => (TrainState::new(cfg)?, cfg.steps),
    };
    let cfg = state.cfg().clone();
    let mut run = Run::start("train", &cfg, out)?;
    run.write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let loss_path = out.join("loss.csv");
    let mut log = LossLog::create(&loss_path, resume.is_some())?;
    run.add(&loss_path);
    let ckpt_path = out.join("checkpoint.bin");
    let eval_path = out.join("eval_log.csv");
    let eval_set = if cfg.eval_every > 0 {
        data::eval_split(&cfg.data, cfg.eval_scenes)?
    } else {
        Vec::new()
    };
    let mut eval_log = csv::Writer::from_path(&eval_path)?;
    eval_log.write_record(EVAL_LOG_HEADER)?;
    run.add(&eval_path);

    let remaining = target - state.step;
    run_training(&mut state, remaining, &full_forward, |st, rec| {
        log.write(rec)?;
        if rec.step % cfg.log_window == 0 {
            log.flush()?;
            progress(format!(
                "step {:>6}  recon {:.5}  vq {}  ppl {}",
                rec.step,
                rec.recon,
                rec.vq.map_or("-".into(), |v| format!("{v:.5}")),
                rec.perplexity.map_or("-".into(), |v| format!("{v:.2}"))
            ));
        }
        if cfg.eval_every > 0 && rec.step % cfg.eval_every == 0 {
            let rep = evaluate(&st.model, &eval_set, opts)?;
            eval_log.write_record(eval_row(rec.step, "modulated", &rep.mean_modulated()))?;
            eval_log.write_record(eval_row(rec.step, "bottom_up", &rep.mean_bottom_up()))?;
            eval_log.flush().map_err(|e| Error::io("eval log", e))?;
        }
        if cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 {
            checkpoint::save(st, &ckpt_path)?;
        }
        Ok(())
    })?;
    log.flush()?;
    eval_log.flush().map_err(|e| Error::io(&eval_path, e))?;
    for p in checkpoint::save(&state, &ckpt_path)? {
        run.add(&p);
    }
    run.finish()
}

/// Evaluates a checkpoint; writes `metrics.csv` and `metrics.txt`.
pub fn cmd_eval(ckpt: &Path, data_dir: Option<&Path>, out: &Path, opts: &EvalOptions) -> Result<RunManifest> {
    let state = checkpoint::load(ckpt)?;
    let cfg = state.cfg().clone();
    let scenes = eval_scenes(&cfg, data_dir)?;
    let report = evaluate(&state.model, &scenes, opts)?;
    let mut run = Run::start("eval", &cfg, out)?;
    let csv_path = out.join("metrics.csv");
    report.write_csv(&csv_path)?;
    run.add(&csv_path);
    let text = report.to_text();
    print!("{text}");
    run.write_text(&out.join("metrics.txt"), &text)?;
    run.finish()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub ablation: Ablation,
    pub metrics: SceneMetrics,
}

/// Trains and evaluates one configuration per ablation row, all with `cfg.seed`.
pub fn run_ablation(cfg: &TrainConfig, opts: &EvalOptions) -> Result<Vec<AblationRow>> {
    let scenes = data::eval_split(&cfg.data, cfg.eval_scenes)?;
    Ablation::table()
        .iter()
        .map(|&(name, ablation)| {
            let c = TrainConfig { ablation, ..cfg.clone() };
            let mut st = TrainState::new(&c)?;
            progress(format!("ablation {name}: training {} steps", c.steps));
            run_training(&mut st, c.steps, &full_forward, |_, _| Ok(()))?;
            let rep = evaluate(&st.model, &scenes, opts)?;
            Ok(AblationRow {
                name: name.to_string(),
                ablation,
                metrics: rep.mean_modulated(),
            })
        })
        .collect()
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<14} {:>4} {:>4} {:>4} {:>5} {:>8} {:>8} {:>8}\n",
        "row", "m_c", "vq", "m_s", "shift", "FG-ARI", "mBO", "mIoU"
    );
    let mark = |b: bool| if b { "x" } else { "-" };
    for r in rows {
        let a = r.ablation;
        s.push_str(&format!(
            "{:<14} {:>4} {:>4} {:>4} {:>5} {:>8.4} {:>8.4} {:>8.4}\n",
            r.name,
            mark(a.use_m_c),
            mark(a.use_vq),
            mark(a.use_m_s),
            mark(a.use_shift),
            r.metrics.fg_ari,
            r.metrics.mbo_i,
            r.metrics.miou
        ));
    }
    s
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "use_m_c", "use_vq", "use_m_s", "use_shift", "fg_ari", "mbo", "miou"])?;
    for r in rows {
        let a = r.ablation;
        w.write_record([
            r.name.clone(),
            a.use_m_c.to_string(),
            a.use_vq.to_string(),
            a.use_m_s.to_string(),
            a.use_shift.to_string(),
            r.metrics.fg_ari.to_string(),
            r.metrics.mbo_i.to_string(),
            r.metrics.miou.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_ablate(cfg: &TrainConfig, out: &Path, opts: &EvalOptions) -> Result<Vec<AblationRow>> {
    let mut run = Run::start("ablate", cfg, out)?;
    let rows = run_ablation(cfg, opts)?;
    let csv_path = out.join("ablation.csv");
    write_ablation_csv(&csv_path, &rows)?;
    run.add(&csv_path);
    let text = ablation_text(&rows);
    print!("{text}");
    run.write_text(&out.join("ablation.txt"), &text)?;
    run.finish()?;
    Ok(rows)
}

/// Result of the codebook-size sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub chosen: usize,
    /// False when the sweep reached the maximum size without a plateau.
    pub plateau: bool,
    pub log: Vec<(usize, f64)>,
}

pub const PLATEAU_RATIO: f64 = 1.1;

/// Doubles `E` from `start` up to `max`, measuring perplexity lazily.
/// Stops at the first `E` with `ppl(2E) < 1.1 ppl(E)` and picks `E` if
/// `ppl(2E) <= ppl(E)`, else `2E`.
pub fn select_codebook_size(
    start: usize,
    max: usize,
    mut measure: impl FnMut(usize) -> Result<f64>,
) -> Result<Selection> {
    if start < 2 {
        return Err(Error::invalid("select_codebook_size", "start size must be at least 2"));
    }
    let mut log = Vec::new();
    let mut e = start;
    let mut prev = None;
    while e <= max {
        let ppl = measure(e)?;
        log.push((e, ppl));
        if let Some((pe, pp)) = prev {
            if ppl < PLATEAU_RATIO * pp {
                let chosen = if ppl <= pp { pe } else { e };
                return Ok(Selection {
                    chosen,
                    plateau: true,
                    log,
                });
            }
        }
        prev = Some((e, ppl));
        e *= 2;
    }
    if log.len() < 2 {
        return Err(Error::invalid(
            "select_codebook_size",
            format!("fewer than two sizes between {start} and {max}"),
        ));
    }
    let chosen = log.last().unwrap().0;
    Ok(Selection {
        chosen,
        plateau: false,
        log,
    })
}

/// Perplexity of code usage over the last logging window of a short run.
pub fn measure_perplexity(cfg: &TrainConfig, size: usize) -> Result<f64> {
    let c = TrainConfig {
        codebook_size: size,
        ablation: Ablation {
            use_vq: true,
            ..cfg.ablation
        },
        ..cfg.clone()
    };
    let mut st = TrainState::new(&c)?;
    let log = run_training(&mut st, c.steps, &full_forward, |_, _| Ok(()))?;
    let last = log.last().ok_or_else(|| Error::invalid("select_codebook_size", "no steps run"))?;
    last.perplexity
        .ok_or_else(|| Error::invalid("select_codebook_size", "no code usage recorded"))
}

pub fn cmd_select_codebook_size(cfg: &TrainConfig, out: &Path, start: usize) -> Result<Selection> {
    let mut run = Run::start("select-codebook-size", cfg, out)?;
    let sel = select_codebook_size(start, cfg.max_codebook_size, |e| {
        progress(format!("codebook size {e}: training {} steps", cfg.steps));
        let ppl = measure_perplexity(cfg, e)?;
        progress(format!("codebook size {e}: perplexity {ppl:.3}"));
        Ok(ppl)
    })?;
    let csv_path = out.join("perplexity.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["codebook_size", "perplexity"])?;
    for (e, p) in &sel.log {
        w.write_record([e.to_string(), p.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    run.add(&csv_path);
    let summary = format!(
        "chosen {}\nplateau {}\n",
        sel.chosen,
        if sel.plateau { "yes" } else { "no (reached max size)" }
    );
    print!("{summary}");
    run.write_text(&out.join("selection.txt"), &summary)?;
    run.finish()?;
    Ok(sel)
}

/// Writes `2K` attention heatmaps and the predicted and GT mask images for
/// eval scene `sample`. Returns the image paths.
pub fn cmd_visualize(
    ckpt: &Path,
    sample: usize,
    data_dir: Option<&Path>,
    out: &Path,
    last_block_masks: bool,
) -> Result<Vec<PathBuf>> {
    let state = checkpoint::load(ckpt)?;
    let cfg = state.cfg().clone();
    let scenes = eval_scenes(&cfg, data_dir)?;
    let scene = scenes.get(sample).ok_or_else(|| {
        Error::invalid("visualize", format!("sample {sample} out of range (eval split has {})", scenes.len()))
    })?;
    let mut run = Run::start("visualize", &cfg, out)?;
    let opts = EvalOptions {
        last_block_masks,
        mbo_mode: MboMode::PerGt,
    };
    let pred = predict(&state.model, scene, &opts)?;
    let (h, w) = (scene.height, scene.width);
    let mut images = Vec::new();
    for (tag, attn) in [("pass1", &pred.attn_pass1), ("pass2", &pred.attn_pass2)] {
        for k in 0..attn.rows() {
            let p = out.join(format!("sample{sample:04}_{tag}_slot{k}.pgm"));
            write_heatmap(&p, w, h, attn.row_slice(k))?;
            images.push(p);
        }
    }
    let pm = out.join(format!("sample{sample:04}_pred_mask.ppm"));
    write_labels(&pm, w, h, &pred.labels.iter().map(|&l| l + 1).collect::<Vec<_>>())?;
    images.push(pm);
    let gm = out.join(format!("sample{sample:04}_gt_mask.ppm"));
    write_labels(&gm, w, h, &scene.gt_labels)?;
    images.push(gm);
    let labels_path = out.join(format!("sample{sample:04}_labels.csv"));
    let mut wr = csv::Writer::from_path(&labels_path)?;
    wr.write_record(["position", "pred_slot", "gt_instance"])?;
    for (i, (&p, &g)) in pred.labels.iter().zip(&scene.gt_labels).enumerate() {
        wr.write_record([i.to_string(), p.to_string(), g.to_string()])?;
    }
    wr.flush().map_err(|e| Error::io(&labels_path, e))?;
    run.add(&labels_path);
    for p in &images {
        run.add(p);
    }
    run.finish()?;
    Ok(images)
}

/// A slot of an eval scene that selected a given code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeMember {
    pub scene: usize,
    pub slot: usize,
}

/// Groups the slots of every eval scene by the code they select.
pub fn codebook_groups(
    state: &TrainState,
    scenes: &[data::SceneSample],
    opts: &EvalOptions,
) -> Result<(BTreeMap<usize, Vec<CodeMember>>, Vec<Vec<usize>>)> {
    let mut groups: BTreeMap<usize, Vec<CodeMember>> = BTreeMap::new();
    let mut labels = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let pred = predict(&state.model, s, opts)?;
        let idx = pred
            .code_indices
            .ok_or_else(|| Error::invalid("visualize", "codebook mode needs a model with quantisation on"))?;
        for (slot, code) in idx.into_iter().enumerate() {
            groups.entry(code).or_default().push(CodeMember { scene: i, slot });
        }
        labels.push(pred.labels);
    }
    Ok((groups, labels))
}

/// Most-used codes first, ties by index; each with its member slots.
pub fn top_codes(groups: &BTreeMap<usize, Vec<CodeMember>>, top: usize) -> Vec<(usize, &[CodeMember])> {
    let mut v: Vec<(usize, &[CodeMember])> = groups.iter().map(|(&c, m)| (c, m.as_slice())).collect();
    v.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    v.truncate(top);
    v
}

pub fn cmd_visualize_codebook(ckpt: &Path, data_dir: Option<&Path>, out: &Path, top: usize) -> Result<RunManifest> {
    let state = checkpoint::load(ckpt)?;
    let cfg = state.cfg().clone();
    let scenes = eval_scenes(&cfg, data_dir)?;
    let mut run = Run::start("visualize --codebook", &cfg, out)?;
    let opts = EvalOptions::default();
    let (groups, labels) = codebook_groups(&state, &scenes, &opts)?;
    let csv_path = out.join("code_groups.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["code", "scene", "slot", "mask_cells", "image"])?;
    for (code, members) in top_codes(&groups, top) {
        let dir = out.join(format!("code{code:04}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for m in members {
            let s = &scenes[m.scene];
            let mask: Vec<f64> = labels[m.scene].iter().map(|&l| (l == m.slot) as u8 as f64).collect();
            let p = dir.join(format!("scene{:04}_slot{}.pgm", m.scene, m.slot));
            write_heatmap(&p, s.width, s.height, &mask)?;
            run.add(&p);
            w.write_record([
                code.to_string(),
                m.scene.to_string(),
                m.slot.to_string(),
                (mask.iter().sum::<f64>() as usize).to_string(),
                p.strip_prefix(out).unwrap_or(&p).display().to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    run.add(&csv_path);
    run.finish()
}

/// `codebook.csv`: code index, usage over the eval split, distance to the nearest other code.
pub fn cmd_codebook(ckpt: &Path, data_dir: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let state = checkpoint::load(ckpt)?;
    let cfg = state.cfg().clone();
    let scenes = eval_scenes(&cfg, data_dir)?;
    let mut run = Run::start("codebook", &cfg, out)?;
    let mut usage = vec![0u64; cfg.codebook_size];
    if cfg.ablation.use_vq {
        let (groups, _) = codebook_groups(&state, &scenes, &EvalOptions::default())?;
        for (c, m) in groups {
            usage[c] = m.len() as u64;
        }
    }
    let codes = &state.model.store.get(state.model.codebook.codes).tensor;
    let path = out.join("codebook.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["code_index", "usage_count", "nearest_other_distance"])?;
    for s in codebook_report(codes, &usage) {
        w.write_record([s.index.to_string(), s.usage.to_string(), s.nearest_other.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    run.add(&path);
    run.finish()
}

pub fn cmd_flops(cfg: &TrainConfig, out: &Path) -> Result<RunManifest> {
    let mut run = Run::start("flops", cfg, out)?;
    let r = count_flops(cfg)?;
    let text = r.to_text();
    print!("{text}");
    run.write_text(&out.join("flops.txt"), &text)?;
    run.finish()
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, train_scenes } => {
            let cfg = load_config(&common)?;
            cmd_gen(&cfg, &out_dir(common.out), train_scenes).map(drop)
        }
        Command::Train { common, resume, masks } => {
            let cfg = load_config(&common)?;
            let opts = EvalOptions {
                last_block_masks: masks.last_block_masks || cfg.last_block_masks,
                mbo_mode: masks.mbo_mode,
            };
            cmd_train(&cfg, &out_dir(common.out), resume.as_deref(), &opts).map(drop)
        }
        Command::Eval { checkpoint, data, out, masks } => {
            let opts = EvalOptions {
                last_block_masks: masks.last_block_masks,
                mbo_mode: masks.mbo_mode,
            };
            cmd_eval(&checkpoint, data.as_deref(), &out_dir(out), &opts).map(drop)
        }
        Command::Ablate { common, masks } => {
            let cfg = load_config(&common)?;
            let opts = EvalOptions {
                last_block_masks: masks.last_block_masks || cfg.last_block_masks,
                mbo_mode: masks.mbo_mode,
            };
            cmd_ablate(&cfg, &out_dir(common.out), &opts).map(drop)
        }
        Command::SelectCodebookSize { common, start } => {
            let cfg = load_config(&common)?;
            cmd_select_codebook_size(&cfg, &out_dir(common.out), start).map(drop)
        }
        Command::Visualize {
            checkpoint,
            sample,
            data,
            out,
            codebook,
            top,
            last_block_masks,
        } => {
            let out = out_dir(out);
            if codebook {
                cmd_visualize_codebook(&checkpoint, data.as_deref(), &out, top).map(drop)
            } else {
                cmd_visualize(&checkpoint, sample, data.as_deref(), &out, last_block_masks).map(drop)
            }
        }
        Command::Codebook { checkpoint, data, out } => {
            cmd_codebook(&checkpoint, data.as_deref(), &out_dir(out)).map(drop)
        }
        Command::Flops { common } => {
            let cfg = load_config(&common)?;
            cmd_flops(&cfg, &out_dir(common.out)).map(drop)
        }
    }
}

/// Parses `args` and runs the command. Exit codes: 0 success, 1 usage error,
/// 2 runtime error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(entries: &'static [(usize, f64)]) -> impl FnMut(usize) -> Result<f64> {
        move |e| {
            entries
                .iter()
                .find(|(s, _)| *s == e)
                .map(|&(_, p)| p)
                .ok_or_else(|| Error::invalid("test", format!("no entry for {e}")))
        }
    }

    #[test]
    fn plateau_rule_edges() {
        let flat = select_codebook_size(64, 1024, table(&[(64, 30.0), (128, 29.0)])).unwrap();
        assert_eq!((flat.chosen, flat.plateau), (64, true));
        let growing = select_codebook_size(64, 256, table(&[(64, 10.0), (128, 20.0), (256, 40.0)])).unwrap();
        assert_eq!((growing.chosen, growing.plateau), (256, false));
        assert_eq!(growing.log.len(), 3);
        assert!(select_codebook_size(64, 100, table(&[(64, 1.0)])).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["topdown", "no-such-command"]), 1);
        assert_eq!(main_with_args(["topdown", "--help"]), 0);
    }
}
