//! Declarative experiment configuration (TOML, versioned schema).
//!
//! A config names a preset (`full` or `desk`) and overrides any subset of
//! its fields:
//!
//! ```toml
//! schema_version = 1
//! preset = "desk"
//!
//! [fl]
//! strategy = "VanillaWM"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::PostAttack;
use crate::error::{Error, Result};
use crate::fedsim::{FlConfig, Strategy};
use crate::seeds::Seeds;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    Desk,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config {
                field: "preset".into(),
                reason: format!("unknown preset {other:?} (expected \"full\" or \"desk\")"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeParams {
    pub m: usize,
    pub q: usize,
    pub tau: f64,
    pub kappa: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhiteboxParams {
    pub p: usize,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataParams {
    pub mnist_dir: PathBuf,
    pub corpus_fraction: f64,
    pub eval_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackParams {
    pub fine_tune_epochs: usize,
    pub fine_tune_batch: usize,
    pub fine_tune_learning_rate: f32,
    pub prune_fraction: f64,
}

impl AttackParams {
    pub fn fine_tune(&self) -> PostAttack {
        PostAttack::FineTune {
            epochs: self.fine_tune_epochs,
            batch: self.fine_tune_batch,
            learning_rate: self.fine_tune_learning_rate,
        }
    }

    pub fn prune(&self) -> PostAttack {
        PostAttack::Prune {
            fraction: self.prune_fraction,
        }
    }

    pub fn by_label(&self, label: &str) -> Option<PostAttack> {
        match label {
            "none" => Some(PostAttack::None),
            "finetune" => Some(self.fine_tune()),
            "prune" => Some(self.prune()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialParams {
    pub collusion_sizes: Vec<usize>,
    /// Any of `none`, `finetune`, `prune`.
    pub attacks: Vec<String>,
    pub trials_per_cell: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub preset: Preset,
    pub code: CodeParams,
    pub whitebox: WhiteboxParams,
    pub data: DataParams,
    pub fl: FlConfig,
    pub attack: AttackParams,
    pub trials: TrialParams,
    pub seeds: Seeds,
}

impl ExperimentConfig {
    /// Full-scale settings: 100 owners, the whole corpus, 5 epochs.
    pub fn full() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            preset: Preset::Full,
            code: CodeParams {
                m: 1000,
                q: 10,
                tau: 0.038,
                kappa: 100.0,
                epsilon: 1e-6,
            },
            whitebox: WhiteboxParams { p: 1000, threshold: 0.11 },
            data: DataParams {
                mnist_dir: PathBuf::from("data/mnist"),
                corpus_fraction: 1.0,
                eval_fraction: 0.25,
            },
            fl: FlConfig::default(),
            attack: AttackParams {
                fine_tune_epochs: 5,
                fine_tune_batch: 16,
                fine_tune_learning_rate: 0.001,
                prune_fraction: 0.8,
            },
            trials: TrialParams {
                collusion_sizes: vec![1, 2, 3, 4, 5, 6],
                attacks: vec!["none".into(), "finetune".into(), "prune".into()],
                trials_per_cell: 500,
            },
            seeds: Seeds::default(),
        }
    }

    /// Reduced scale for a single CPU: 20 owners, a fifth of the corpus,
    /// 300 rounds of two owners (a little over one epoch), a 300-step code.
    pub fn desk() -> Self {
        let full = Self::full();
        Self {
            preset: Preset::Desk,
            code: CodeParams { m: 300, ..full.code },
            data: DataParams {
                corpus_fraction: 0.2,
                ..full.data
            },
            fl: FlConfig {
                n_owners: 20,
                owners_per_round: 2,
                epochs: 2,
                iterations: Some(300),
                learning_rate: 0.05,
                wm_learning_rate: Some(0.02),
                log_every: 25,
                eval_subset: 1000,
                ..full.fl
            },
            attack: AttackParams {
                fine_tune_epochs: 1,
                ..full.attack
            },
            trials: TrialParams {
                collusion_sizes: vec![1, 2, 6],
                trials_per_cell: 12,
                ..full.trials
            },
            ..full
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self::full(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Parses a TOML document: the named preset (default `full`) with the
    /// document's fields laid over it.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            field: "<document>".into(),
            reason: e.message().to_string(),
        })?;
        let version = match doc.get("schema_version") {
            None => {
                return Err(Error::Config {
                    field: "schema_version".into(),
                    reason: format!("missing (current version is {SCHEMA_VERSION})"),
                })
            }
            Some(v) => v.as_integer(),
        };
        if version != Some(SCHEMA_VERSION as i64) {
            return Err(Error::Config {
                field: "schema_version".into(),
                reason: format!("unsupported version (expected {SCHEMA_VERSION})"),
            });
        }
        let preset = match doc.get("preset") {
            None => Preset::Full,
            Some(v) => Preset::parse(v.as_str().ok_or_else(|| Error::Config {
                field: "preset".into(),
                reason: "must be a string".into(),
            })?)?,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config {
            field: "<preset>".into(),
            reason: e.to_string(),
        })?;
        merge(&mut base, doc, "")?;
        let config: Self = toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::Config {
            field: "<document>".into(),
            reason: e.message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path.to_path_buf())),
            Err(e) => return Err(e.into()),
        };
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// The federated-training parameters with this config's seeds.
    pub fn fl_config(&self, strategy: Strategy) -> FlConfig {
        FlConfig {
            strategy,
            seeds: self.seeds,
            ..self.fl.clone()
        }
    }

    pub fn attacks(&self) -> Vec<PostAttack> {
        self.trials.attacks.iter().filter_map(|a| self.attack.by_label(a)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.code;
        check(c.m > 0, "code.m", "must be positive")?;
        check(c.q >= 2, "code.q", "must be at least 2")?;
        check(c.kappa > 0.0 && c.kappa.is_finite(), "code.kappa", "must be positive")?;
        check(
            c.tau > 0.0 && c.tau < 1.0 / c.q as f64,
            "code.tau",
            &format!("must lie in (0, 1/q) = (0, {})", 1.0 / c.q as f64),
        )?;
        check(c.epsilon > 0.0 && c.epsilon < 1.0, "code.epsilon", "must lie in (0, 1)")?;
        check(self.whitebox.p >= self.fl.n_owners, "whitebox.p", "must be at least fl.n_owners")?;
        check(self.whitebox.threshold > 0.0, "whitebox.threshold", "must be positive")?;
        let d = &self.data;
        check(d.corpus_fraction > 0.0 && d.corpus_fraction <= 1.0, "data.corpus_fraction", "must lie in (0, 1]")?;
        check(d.eval_fraction > 0.0 && d.eval_fraction < 1.0, "data.eval_fraction", "must lie in (0, 1)")?;
        self.fl.validate().map_err(|e| match e {
            Error::InvalidParameter { name, reason } => Error::Config {
                field: format!("fl.{name}"),
                reason,
            },
            other => other,
        })?;
        let a = &self.attack;
        check(a.fine_tune_batch > 0, "attack.fine_tune_batch", "must be positive")?;
        check(a.fine_tune_learning_rate > 0.0, "attack.fine_tune_learning_rate", "must be positive")?;
        check((0.0..1.0).contains(&a.prune_fraction), "attack.prune_fraction", "must lie in [0, 1)")?;
        for (i, &size) in self.trials.collusion_sizes.iter().enumerate() {
            check(
                size >= 1 && size <= self.fl.n_owners,
                &format!("trials.collusion_sizes[{i}]"),
                "must lie in [1, fl.n_owners]",
            )?;
        }
        for (i, label) in self.trials.attacks.iter().enumerate() {
            check(
                a.by_label(label).is_some(),
                &format!("trials.attacks[{i}]"),
                "must be one of \"none\", \"finetune\", \"prune\"",
            )?;
        }
        Ok(())
    }
}

fn check(ok: bool, field: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config {
            field: field.into(),
            reason: reason.into(),
        })
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in overlay {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &path)?,
            (Some(toml::Value::Table(_)), _) => {
                return Err(Error::Config {
                    field: path,
                    reason: "expected a table".into(),
                })
            }
            (Some(_), value) | (None, value) => {
                if base.get(&key).is_none() && !prefix.is_empty() && !optional_key(&path) {
                    return Err(Error::Config {
                        field: path,
                        reason: "unknown field".into(),
                    });
                }
                base.insert(key, value);
            }
        }
    }
    Ok(())
}

/// Fields that may be absent from a serialized preset.
fn optional_key(path: &str) -> bool {
    matches!(path, "fl.iterations" | "fl.wm_learning_rate")
}
