use std::fs;
use std::path::Path;
use std::process::Command;

use topdown_slots::checkpoint;
use topdown_slots::cli::{cmd_ablate, cmd_eval, cmd_gen, cmd_train, cmd_visualize, codebook_groups};
use topdown_slots::config::{Ablation, TrainConfig};
use topdown_slots::data::{eval_split, SceneSpec};
use topdown_slots::eval::{evaluate, predict, EvalOptions};
use topdown_slots::train::{full_forward, moving_average, read_loss_csv, run_training, TrainState};

const TINY: &str = r#"
slots = 3
codebook_size = 8
slot_dim = 8
batch_size = 2
decoder_blocks = 1
decoder_heads = 2
eval_scenes = 16
[data]
grid_h = 8
grid_w = 8
feat_dim = 6
min_objects = 1
max_objects = 2
categories = 3
"#;

fn tiny() -> TrainConfig {
    TrainConfig::from_toml_str(TINY).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_topdown"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn training_lowers_reconstruction_loss() {
    let cfg = TrainConfig {
        batch_size: 4,
        ..tiny()
    };
    let mut st = TrainState::new(&cfg).unwrap();
    let recs = run_training(&mut st, 2000, &full_forward, |_, _| Ok(())).unwrap();
    let ma = moving_average(&recs.iter().map(|r| r.recon).collect::<Vec<_>>(), 100);
    assert!(ma.last().unwrap() < ma.first().unwrap(), "{} vs {}", ma.last().unwrap(), ma.first().unwrap());
    for r in &recs {
        if let Some(p) = r.perplexity {
            assert!((1.0..=cfg.codebook_size as f64).contains(&p));
        }
    }
    assert!(recs.iter().any(|r| r.perplexity.is_some()));
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope").join("absent.toml");
    let out = bin().arg("train").arg("--config").arg(&missing).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing.display().to_string()));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("bogus_knob = 3\n{TINY}"));
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_knob"));
}

#[test]
fn usage_errors_exit_one() {
    let out = bin().arg("train").arg("--steps").arg("many").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tiny_cli_run_writes_one_row_per_step_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = bin()
            .args(["train", "--steps", "200", "--seed", "4", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let text = fs::read_to_string(out_dir.join("loss.csv")).unwrap();
        assert_eq!(text.lines().count(), 201);
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
        let listed: Vec<&str> = manifest["artifacts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        for f in ["loss.csv", "checkpoint.bin", "config.toml"] {
            assert!(listed.contains(&f), "{f} not in {listed:?}");
        }
        assert_eq!(manifest["seed"], 4);
        csvs.push(text);
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn env_var_sets_default_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let root = dir.path().join("from_env");
    let out = bin().arg("flops").arg("--config").arg(&cfg).env("TOPDOWN_OUT", &root).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(root.join("flops.txt").exists());
    assert!(root.join("manifest.json").exists());
}

#[test]
fn resumed_training_continues_the_trace() {
    let cfg = TrainConfig { steps: 60, ..tiny() };
    let dir = tempfile::tempdir().unwrap();
    let opts = EvalOptions::default();
    cmd_train(&cfg, &dir.path().join("full"), None, &opts).unwrap();
    cmd_train(&TrainConfig { steps: 25, ..cfg.clone() }, &dir.path().join("part"), None, &opts).unwrap();
    let ckpt = dir.path().join("part").join("checkpoint.bin");
    cmd_train(&cfg, &dir.path().join("part"), Some(&ckpt), &opts).unwrap();
    let a = fs::read(dir.path().join("full").join("loss.csv")).unwrap();
    let b = fs::read(dir.path().join("part").join("loss.csv")).unwrap();
    assert_eq!(a, b);
    let (x, y) = (
        checkpoint::load(&dir.path().join("full").join("checkpoint.bin")).unwrap(),
        checkpoint::load(&ckpt).unwrap(),
    );
    assert_eq!(x.step, y.step);
    for (p, q) in x.model.store.iter().zip(y.model.store.iter()) {
        assert_eq!(p.tensor, q.tensor, "{}", p.name);
    }
}

#[test]
fn untrained_model_scores_near_chance_and_eval_is_repeatable() {
    // The tiny scenes have too few categories for chance-level grouping.
    let cfg = TrainConfig {
        eval_scenes: 512,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("checkpoint.bin");
    checkpoint::save(&TrainState::new(&cfg).unwrap(), &ckpt).unwrap();
    let before = fs::read(&ckpt).unwrap();
    let mut outputs = Vec::new();
    for run in ["e1", "e2"] {
        cmd_eval(&ckpt, None, &dir.path().join(run), &EvalOptions::default()).unwrap();
        outputs.push(fs::read_to_string(dir.path().join(run).join("metrics.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(before, fs::read(&ckpt).unwrap());
    let means: Vec<&str> = outputs[0].lines().filter(|l| l.starts_with("mean,")).collect();
    assert_eq!(means.len(), 2);
    assert!(means[0].contains(",modulated,") && means[1].contains(",bottom_up,"));
    let st = checkpoint::load(&ckpt).unwrap();
    let rep = evaluate(&st.model, &eval_split(&cfg.data, 512).unwrap(), &EvalOptions::default()).unwrap();
    for m in rep.modulated.iter().chain(&rep.bottom_up) {
        assert!(m.is_finite());
    }
    let ari = rep.mean_modulated().fg_ari;
    assert!(ari.abs() < 0.2, "untrained FG-ARI {ari}");
}

#[test]
fn eval_rejects_dataset_with_other_dims() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { steps: 1, ..tiny() };
    cmd_train(&cfg, &dir.path().join("run"), None, &EvalOptions::default()).unwrap();
    let other = TrainConfig {
        data: SceneSpec {
            grid_h: 6,
            grid_w: 6,
            ..cfg.data.clone()
        },
        ..cfg.clone()
    };
    let data = dir.path().join("data");
    cmd_gen(&other, &data, 4).unwrap();
    let err = cmd_eval(&dir.path().join("run").join("checkpoint.bin"), Some(&data), &dir.path().join("e"), &EvalOptions::default())
        .unwrap_err();
    assert!(err.to_string().contains("config hash mismatch"), "{err}");
}

#[test]
fn eval_on_generated_dataset_matches_regenerated_split_and_leaves_it_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { steps: 5, ..tiny() };
    cmd_train(&cfg, &dir.path().join("run"), None, &EvalOptions::default()).unwrap();
    let data = dir.path().join("data");
    cmd_gen(&cfg, &data, 4).unwrap();
    let snapshot = |p: &Path| {
        let mut v: Vec<_> = walk(p).into_iter().map(|f| (f.clone(), fs::read(&f).unwrap())).collect();
        v.sort();
        v
    };
    let before = snapshot(&data);
    let ckpt = dir.path().join("run").join("checkpoint.bin");
    cmd_eval(&ckpt, Some(&data), &dir.path().join("a"), &EvalOptions::default()).unwrap();
    cmd_eval(&ckpt, None, &dir.path().join("b"), &EvalOptions::default()).unwrap();
    assert_eq!(before, snapshot(&data));
    assert_eq!(
        fs::read(dir.path().join("a").join("metrics.csv")).unwrap(),
        fs::read(dir.path().join("b").join("metrics.csv")).unwrap()
    );
}

fn walk(p: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(p).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn visualize_emits_two_heatmaps_per_slot_and_two_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { steps: 3, ..tiny() };
    cmd_train(&cfg, &dir.path().join("run"), None, &EvalOptions::default()).unwrap();
    let ckpt = dir.path().join("run").join("checkpoint.bin");
    let images = cmd_visualize(&ckpt, 2, None, &dir.path().join("viz"), false).unwrap();
    assert_eq!(images.len(), 2 * cfg.slots + 2);
    for p in &images {
        assert!(p.exists());
    }
    assert!(cmd_visualize(&ckpt, 10_000, None, &dir.path().join("viz2"), false).is_err());
}

#[test]
fn codebook_groups_share_codes_across_scenes() {
    // Three slots per scene over a four-code book: some code must recur across scenes.
    let cfg = TrainConfig {
        codebook_size: 4,
        eval_scenes: 6,
        ..tiny()
    };
    let st = TrainState::new(&cfg).unwrap();
    let scenes = eval_split(&cfg.data, cfg.eval_scenes).unwrap();
    assert!(scenes.iter().any(|s| {
        let mut c = s.categories.clone();
        c.sort();
        c.windows(2).any(|w| w[0] == w[1])
    }) || scenes.len() > cfg.codebook_size);
    let opts = EvalOptions::default();
    let (groups, _) = codebook_groups(&st, &scenes, &opts).unwrap();
    assert!(groups.values().any(|m| {
        let mut s: Vec<usize> = m.iter().map(|c| c.scene).collect();
        s.dedup();
        s.len() >= 2
    }));
    for (i, s) in scenes.iter().enumerate() {
        let idx = predict(&st.model, s, &opts).unwrap().code_indices.unwrap();
        for (slot, code) in idx.into_iter().enumerate() {
            assert!(groups[&code].iter().any(|m| m.scene == i && m.slot == slot));
        }
    }
    let total: usize = groups.values().map(Vec::len).sum();
    assert_eq!(total, scenes.len() * cfg.slots);
}

#[test]
fn ablate_writes_six_rows_with_table_flags() {
    let cfg = TrainConfig {
        steps: 2,
        eval_scenes: 4,
        ..tiny()
    };
    let dir = tempfile::tempdir().unwrap();
    let rows = cmd_ablate(&cfg, dir.path(), &EvalOptions::default()).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].ablation, Ablation::BASELINE);
    assert_eq!(rows[5].ablation, Ablation::FULL);
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(dir.path().join("ablation.txt").exists());
}

#[test]
fn loss_csv_round_trips() {
    let cfg = TrainConfig { steps: 10, ..tiny() };
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, dir.path(), None, &EvalOptions::default()).unwrap();
    let recs = read_loss_csv(&dir.path().join("loss.csv")).unwrap();
    assert_eq!(recs.len(), 10);
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
    assert!(recs.iter().all(|r| r.vq.is_some()));
}
