//! End-to-end plumbing shared by the CLI and the acceptance suite: artifact
//! generation from a config, the on-disk run layout, and trained-model I/O.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::container::Artifact;
use crate::datasets::{apply_manifest, generate_triggers, load_corpus, partition, MnistFiles, PartitionManifest, PartitionedData, TriggerSet};
use crate::error::{Error, Result};
use crate::evaluation::TraceKit;
use crate::fedsim::{Strategy, WmArtifacts};
use crate::nn::{checkpoint, Architecture, Model};
use crate::tardos::{generate_codebook, sample_bias_matrix, BiasMatrix, CodeBook};
use crate::whitebox::{OwnerBasis, ProjectionMatrix};

/// Everything `setup` produces, except the data partition.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub bias: BiasMatrix,
    pub codebook: CodeBook,
    pub shared_triggers: Vec<TriggerSet>,
    pub owner_triggers: Vec<TriggerSet>,
    pub basis: OwnerBasis,
    pub projection: ProjectionMatrix,
}

impl Artifacts {
    pub fn generate(config: &ExperimentConfig) -> Result<Self> {
        let (c, s, n) = (&config.code, &config.seeds, config.fl.n_owners);
        let bias = sample_bias_matrix(c.m, c.q, c.kappa, c.tau, s.bias)?;
        let codebook = generate_codebook(&bias, n, s.codebook)?;
        let carrier = Architecture::small_cnn().layers()[Architecture::small_cnn().carrier_layer()].weight_len();
        Ok(Self {
            shared_triggers: generate_triggers(c.m, true, n, s.triggers)?,
            owner_triggers: generate_triggers(c.m, false, n, s.triggers)?,
            basis: OwnerBasis::generate(config.whitebox.p, n, s.basis)?,
            projection: ProjectionMatrix::generate(carrier, config.whitebox.p, s.projection)?,
            bias,
            codebook,
        })
    }

    /// Training material for `strategy` (per-owner triggers for the Dif
    /// strategies, the shared set otherwise).
    pub fn wm(&self, strategy: Strategy) -> WmArtifacts<'_> {
        WmArtifacts {
            triggers: if strategy.shared_triggers() { &self.shared_triggers } else { &self.owner_triggers },
            codebook: &self.codebook,
            basis: &self.basis,
            projection: &self.projection,
        }
    }

    /// Tracing material; black-box queries use the shared trigger set.
    pub fn kit(&self, config: &ExperimentConfig) -> TraceKit<'_> {
        TraceKit {
            triggers: &self.shared_triggers[0],
            codebook: &self.codebook,
            bias: &self.bias,
            epsilon: config.code.epsilon,
            projection: &self.projection,
            basis: &self.basis,
            threshold: config.whitebox.threshold,
        }
    }

    pub fn save(&self, layout: &RunLayout) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(layout.artifacts())?;
        let mut written = vec![layout.bias(), layout.codebook(), layout.basis(), layout.projection(), layout.shared_triggers()];
        self.bias.save(&written[0])?;
        self.codebook.save(&written[1])?;
        self.basis.save(&written[2])?;
        self.projection.save(&written[3])?;
        self.shared_triggers[0].save(&written[4])?;
        for t in &self.owner_triggers {
            let path = layout.owner_triggers(t.owner.expect("per-owner set"));
            t.save(&path)?;
            written.push(path);
        }
        Ok(written)
    }

    pub fn load(layout: &RunLayout, n_owners: usize) -> Result<Self> {
        Ok(Self {
            bias: BiasMatrix::load(&layout.bias())?,
            codebook: CodeBook::load(&layout.codebook())?,
            shared_triggers: vec![TriggerSet::load(&layout.shared_triggers())?],
            owner_triggers: (0..n_owners).map(|j| TriggerSet::load(&layout.owner_triggers(j))).collect::<Result<_>>()?,
            basis: OwnerBasis::load(&layout.basis())?,
            projection: ProjectionMatrix::load(&layout.projection())?,
        })
    }
}

/// Loads the corpus named by the config and partitions it.
pub fn partition_corpus(config: &ExperimentConfig) -> Result<PartitionedData> {
    let corpus = load_corpus(&MnistFiles::in_dir(&config.data.mnist_dir))?;
    partition(&corpus, config.fl.n_owners, config.data.eval_fraction, config.data.corpus_fraction, config.seeds.partition)
}

/// Rebuilds the partition recorded by `setup`.
pub fn load_partition(config: &ExperimentConfig, layout: &RunLayout) -> Result<PartitionedData> {
    let manifest: PartitionManifest = read_json(&layout.partition())?;
    let corpus = load_corpus(&MnistFiles::in_dir(&config.data.mnist_dir))?;
    apply_manifest(&corpus, &manifest)
}

/// File names under a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn partition(&self) -> PathBuf {
        self.root.join("partition.json")
    }

    pub fn artifacts(&self) -> PathBuf {
        self.root.join("artifacts")
    }

    pub fn bias(&self) -> PathBuf {
        self.artifacts().join("bias.trc")
    }

    pub fn codebook(&self) -> PathBuf {
        self.artifacts().join("codebook.trc")
    }

    pub fn basis(&self) -> PathBuf {
        self.artifacts().join("basis.trc")
    }

    pub fn projection(&self) -> PathBuf {
        self.artifacts().join("projection.trc")
    }

    pub fn shared_triggers(&self) -> PathBuf {
        self.artifacts().join("triggers_shared.trc")
    }

    pub fn owner_triggers(&self, owner: usize) -> PathBuf {
        self.artifacts().join(format!("triggers_owner_{owner:03}.trc"))
    }

    pub fn models(&self, strategy: Strategy) -> PathBuf {
        self.root.join("models").join(strategy.name())
    }

    /// Checkpoint of `owner`'s copy; NoWM keeps one global model.
    pub fn model(&self, strategy: Strategy, owner: usize) -> PathBuf {
        match strategy {
            Strategy::NoWm => self.models(strategy).join("global.tfnn"),
            _ => self.models(strategy).join(format!("owner_{owner:03}.tfnn")),
        }
    }

    pub fn round_log(&self, strategy: Strategy) -> PathBuf {
        self.models(strategy).join("rounds.jsonl")
    }

    pub fn training_summary(&self, strategy: Strategy) -> PathBuf {
        self.models(strategy).join("summary.json")
    }

    pub fn attacks(&self) -> PathBuf {
        self.root.join("attacks")
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// What `train` records next to the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub strategy: Strategy,
    /// Owners with a checkpoint (all owners for federated strategies).
    pub owners: Vec<usize>,
    pub iterations: usize,
    /// Main accuracy on the full evaluation split, per checkpoint.
    pub main_accuracy: Vec<f64>,
    pub wall_seconds: f64,
}

/// Loads every checkpoint listed in a training summary, in owner order.
pub fn load_models(layout: &RunLayout, summary: &TrainingSummary) -> Result<Vec<Model>> {
    summary.owners.iter().map(|&j| checkpoint::load(&layout.model(summary.strategy, j))).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}
