//! Training configuration, read from TOML. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SceneSpec;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};

/// Which parts of the top-down pathway are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_m_c: bool,
    pub use_vq: bool,
    pub use_m_s: bool,
    pub use_shift: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation {
        use_m_c: false,
        use_vq: false,
        use_m_s: false,
        use_shift: false,
    };
    pub const FULL: Ablation = Ablation {
        use_m_c: true,
        use_vq: true,
        use_m_s: true,
        use_shift: true,
    };

    pub const fn new(use_m_c: bool, use_vq: bool, use_m_s: bool, use_shift: bool) -> Self {
        Self {
            use_m_c,
            use_vq,
            use_m_s,
            use_shift,
        }
    }

    /// The six rows of the ablation table, top to bottom.
    pub fn table() -> [(&'static str, Ablation); 6] {
        [
            ("baseline", Self::BASELINE),
            ("m_c+m_s+shift", Self::new(true, false, true, true)),
            ("m_s+shift", Self::new(false, false, true, true)),
            ("m_c+vq+m_s", Self::new(true, true, true, false)),
            ("m_c+vq", Self::new(true, true, false, false)),
            ("full", Self::FULL),
        ]
    }

    pub fn is_baseline(&self) -> bool {
        *self == Self::BASELINE
    }

    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "1" } else { "0" };
        format!(
            "m_c={} vq={} m_s={} shift={}",
            mark(self.use_m_c),
            mark(self.use_vq),
            mark(self.use_m_s),
            mark(self.use_shift)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of slots K.
    pub slots: usize,
    /// Codebook size E.
    pub codebook_size: usize,
    /// Slot width D (also the attention width).
    pub slot_dim: usize,
    /// Slot-attention iterations T per pass.
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub clip_norm: f64,
    pub vq_weight: f64,
    /// Standard deviation of the initial-slot Gaussian (and of codebook init).
    pub init_sigma: f64,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub ffn_mult: usize,
    pub last_block_masks: bool,
    /// Steps per code-usage window.
    pub log_window: u64,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: u64,
    pub eval_scenes: usize,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Largest codebook size tried by the size-selection sweep.
    pub max_codebook_size: usize,
    pub ablation: Ablation,
    pub data: SceneSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            slots: 6,
            codebook_size: 128,
            slot_dim: 64,
            iterations: 3,
            lr: 4e-4,
            batch_size: 16,
            steps: 20_000,
            seed: 0,
            clip_norm: 1.0,
            vq_weight: 1.0,
            init_sigma: 1.0,
            decoder_blocks: 4,
            decoder_heads: 8,
            ffn_mult: 4,
            last_block_masks: false,
            log_window: 100,
            eval_every: 0,
            eval_scenes: 512,
            checkpoint_every: 0,
            max_codebook_size: 1024,
            ablation: Ablation::FULL,
            data: SceneSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::ConfigKey(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::ConfigKey(m) => Error::ConfigKey(format!("{}: {m}", path.display())),
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn positions(&self) -> usize {
        self.data.grid_h * self.data.grid_w
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            width: self.data.feat_dim,
            slot_dim: self.slot_dim,
            positions: self.positions(),
            blocks: self.decoder_blocks,
            heads: self.decoder_heads,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("slots", self.slots),
            ("slot_dim", self.slot_dim),
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("decoder_heads", self.decoder_heads),
            ("ffn_mult", self.ffn_mult),
            ("eval_scenes", self.eval_scenes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if self.steps == 0 || self.log_window == 0 {
            return Err(Error::Config("steps and log_window must be positive".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
            ("vq_weight", self.vq_weight),
            ("init_sigma", self.init_sigma),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be a positive number")));
            }
        }
        self.data.validate()?;
        self.decoder().validate()
    }

    /// Hash over everything that fixes parameter shapes.
    pub fn config_hash(&self) -> String {
        let dims = format!(
            "K={} E={} D={} F={} H={} W={} blocks={} heads={} ffn={}",
            self.slots,
            self.codebook_size,
            self.slot_dim,
            self.data.feat_dim,
            self.data.grid_h,
            self.data.grid_w,
            self.decoder_blocks,
            self.decoder_heads,
            self.ffn_mult
        );
        hex_digest(dims.as_bytes())[..16].to_string()
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_toml_str("slots = 4\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = TrainConfig::from_toml_str("[data]\ngrid = 3\n").unwrap_err();
        assert!(err.to_string().contains("grid"), "{err}");
    }

    #[test]
    fn inconsistent_config_is_rejected() {
        assert!(TrainConfig::from_toml_str("slots = 0").is_err());
        assert!(TrainConfig::from_toml_str("decoder_heads = 5").is_err());
        assert!(TrainConfig::from_toml_str("codebook_size = 1").is_err());
    }

    #[test]
    fn ablation_table_layout() {
        let t = Ablation::table();
        assert_eq!(t.len(), 6);
        assert!(t[0].1.is_baseline());
        assert_eq!(t[5].1, Ablation::FULL);
        assert_eq!(t[1].1, Ablation::new(true, false, true, true));
    }

    #[test]
    fn hash_tracks_shapes_only() {
        let a = TrainConfig::default();
        let b = TrainConfig { lr: 0.1, ..a.clone() };
        let c = TrainConfig { slots: 5, ..a.clone() };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
    }
}
