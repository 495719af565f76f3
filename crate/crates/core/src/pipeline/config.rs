use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, EcgSpec};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossWeights;
use crate::networks::TransformerConfig;
use crate::numerics::Rng;

/// Where the training corpus comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Sines {
        n: usize,
        seq_len: usize,
        features: usize,
    },
    Ecg {
        n: usize,
        seq_len: usize,
        features: usize,
        #[serde(default)]
        spec: EcgSpec,
    },
    Csv {
        path: PathBuf,
        seq_len: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        columns: Option<Vec<String>>,
    },
}

fn one() -> usize {
    1
}

impl DatasetConfig {
    pub fn seq_len(&self) -> usize {
        match self {
            DatasetConfig::Sines { seq_len, .. } | DatasetConfig::Ecg { seq_len, .. } | DatasetConfig::Csv { seq_len, .. } => {
                *seq_len
            }
        }
    }

    /// Builds the normalized dataset. CSV paths are resolved against `base`
    /// when relative.
    pub fn build(&self, base: &Path, rng: &mut Rng) -> Result<Dataset> {
        match self {
            DatasetConfig::Sines { n, seq_len, features } => data::gen_sines(*n, *seq_len, *features, rng),
            DatasetConfig::Ecg {
                n,
                seq_len,
                features,
                spec,
            } => data::gen_ecg(*n, *seq_len, *features, spec, rng),
            DatasetConfig::Csv {
                path,
                seq_len,
                stride,
                columns,
            } => {
                let path = if path.is_relative() { base.join(path) } else { path.clone() };
                data::load_csv_windowed(&path, *seq_len, *stride, columns.as_deref())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epochs {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
}

/// Component removals, one per ablation variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// No supervisor: no pretraining, no AR term, samples are the raw
    /// denoised estimates.
    pub disable_asl: bool,
    pub disable_mmd: bool,
    /// No critic updates and no Wasserstein term.
    pub disable_wc: bool,
    /// Full bidirectional attention in every network.
    pub disable_mask: bool,
}

impl Ablation {
    /// `(label, flags)` for the full model and each single removal.
    pub fn variants() -> [(&'static str, Ablation); 5] {
        let none = Ablation::default();
        [
            ("timed", none),
            ("wo_asl", Ablation { disable_asl: true, ..none }),
            ("wo_mmd", Ablation { disable_mmd: true, ..none }),
            ("wo_ma", Ablation { disable_mask: true, ..none }),
            ("wo_wc", Ablation { disable_wc: true, ..none }),
        ]
    }
}

/// One training run, read from a single JSON document. Unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub loss: LossWeights,
    /// Fixed MMD bandwidth; the median heuristic when absent.
    #[serde(default)]
    pub mmd_sigma: Option<f64>,
    pub delta: usize,
    pub epochs: Epochs,
    pub batch_size: usize,
    pub lr: f64,
    pub critic_updates_per_step: usize,
    pub seed: u64,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Shipped desk-scale configuration.
pub const DESK_CONFIG: &str = include_str!("../../configs/desk.json");
/// Shipped full-scale configuration.
pub const FULL_SCALE_CONFIG: &str = include_str!("../../configs/paper.json");

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn desk() -> RunConfig {
        RunConfig::from_json(DESK_CONFIG).expect("shipped desk config is valid")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.loss.validate()?;
        self.eval.validate()?;
        self.transformer(1).validate().map_err(|e| Error::Config(e.to_string()))?;
        let t = self.dataset.seq_len();
        if self.delta == 0 || self.delta >= t {
            return bad(format!("delta {} must be in 1..{t}", self.delta));
        }
        let DiffusionConfig {
            steps,
            beta_start,
            beta_end,
        } = self.diffusion;
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return bad(format!("diffusion schedule {:?} is invalid", self.diffusion));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if let Some(s) = self.mmd_sigma {
            if !(s.is_finite() && s > 0.0) {
                return bad(format!("mmd_sigma must be > 0, got {s}"));
            }
        }
        match &self.dataset {
            DatasetConfig::Sines { n, features, .. } | DatasetConfig::Ecg { n, features, .. } if *n == 0 || *features == 0 => {
                bad("dataset needs n >= 1 and features >= 1".into())
            }
            DatasetConfig::Ecg { spec, features, .. } => spec.validate(t, *features),
            DatasetConfig::Csv { stride: 0, .. } => bad("csv stride must be >= 1".into()),
            _ => Ok(()),
        }
    }

    /// Backbone shape for data with `features` channels.
    pub fn transformer(&self, features: usize) -> TransformerConfig {
        TransformerConfig {
            layers: self.model.layers,
            heads: self.model.heads,
            width: self.model.width,
            ff_width: self.model.ff_width,
            seq_len: self.dataset.seq_len(),
            features,
        }
    }

    /// Effective loss weights after the ablation flags.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss;
        if self.ablation.disable_asl {
            w.lambda_ar = 0.0;
        }
        if self.ablation.disable_mmd {
            w.lambda_mmd = 0.0;
        }
        if self.ablation.disable_wc {
            w.lambda_w = 0.0;
        }
        w
    }

    /// Hash of everything that influences training numbers. The output
    /// directory and the evaluation budget are excluded.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
            m.remove("eval");
        }
        hash_json(&v)
    }

    /// Hash of what a checkpoint's weights must agree with to be usable for
    /// sampling: architecture, data layout, diffusion schedule and the flags
    /// that change the generator's structure.
    pub fn model_fingerprint(&self, features: usize) -> String {
        let v = serde_json::json!({
            "transformer": self.transformer(features),
            "diffusion": self.diffusion,
            "delta": self.delta,
            "disable_asl": self.ablation.disable_asl,
            "disable_mask": self.ablation.disable_mask,
        });
        hash_json(&v)
    }

    /// Fingerprint of the evaluation: the training fingerprint plus the
    /// metric budget.
    pub fn eval_fingerprint(&self) -> String {
        let v = serde_json::json!({ "train": self.fingerprint(), "eval": self.eval });
        hash_json(&v)
    }
}

// serde_json maps are ordered by key, so this is canonical
fn hash_json(v: &serde_json::Value) -> String {
    let digest = Sha256::digest(v.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
