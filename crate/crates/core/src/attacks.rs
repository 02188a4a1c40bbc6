//! Owner-side attacks on fingerprinted copies: collusion by parameter
//! averaging, fine-tuning on held-out data, and activation-based channel
//! pruning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImages;
use crate::error::{Error, Result};
use crate::nn::{LayerKind, Model, TrainStepSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PostAttack {
    None,
    FineTune { epochs: usize, batch: usize, learning_rate: f32 },
    Prune { fraction: f64 },
}

impl PostAttack {
    pub fn fine_tune_default() -> Self {
        PostAttack::FineTune {
            epochs: 5,
            batch: 16,
            learning_rate: 0.001,
        }
    }

    pub fn prune_default() -> Self {
        PostAttack::Prune { fraction: 0.8 }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PostAttack::None => "none",
            PostAttack::FineTune { .. } => "finetune",
            PostAttack::Prune { .. } => "prune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub colluders: Vec<usize>,
    pub post_attack: PostAttack,
    pub seed: u64,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.colluders.is_empty() {
            return Err(Error::invalid("colluders", "need at least one colluder"));
        }
        if let PostAttack::Prune { fraction } = self.post_attack {
            if !(0.0..1.0).contains(&fraction) {
                return Err(Error::invalid("fraction", "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Element-wise mean of the copies. Each parameter is summed in sorted order
/// in `f64`, so the result does not depend on the order of `copies`.
pub fn collude(copies: &[&Model]) -> Result<Model> {
    let first = *copies.first().ok_or_else(|| Error::invalid("copies", "need at least one copy"))?;
    if copies.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::ShapeMismatch("colluding copies differ in architecture".into()));
    }
    if copies.len() == 1 {
        return Ok(first.clone());
    }
    let c = copies.len() as f64;
    let mut merged = first.clone();
    let mut column = vec![0.0f32; copies.len()];
    for (k, out) in merged.params_mut().iter_mut().enumerate() {
        for (slot, m) in column.iter_mut().zip(copies) {
            *slot = m.params()[k];
        }
        column.sort_unstable_by(f32::total_cmp);
        let sum: f64 = column.iter().map(|&v| v as f64).sum();
        *out = (sum / c) as f32;
    }
    Ok(merged)
}

/// Plain cross-entropy SGD on `data` (no dropout, no watermark terms).
pub fn fine_tune(model: &Model, data: &LabeledImages, epochs: usize, batch: usize, learning_rate: f32, seed: u64) -> Result<Model> {
    if data.is_empty() {
        return Err(Error::invalid("data", "fine-tuning needs at least one example"));
    }
    if batch == 0 {
        return Err(Error::invalid("batch", "must be positive"));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let b = data.subset(idx);
            model
                .train_step(TrainStepSpec {
                    learning_rate,
                    images: &b.images,
                    targets: &b.labels,
                    dropout: None,
                    wm_term: None,
                })
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { iteration: step },
                    other => other,
                })?;
            step += 1;
        }
    }
    Ok(model)
}

/// Mean activation of every output channel of every convolution over `data`.
pub fn channel_relevance(model: &Model, images: &[f32]) -> Result<Vec<Vec<f64>>> {
    let convs: Vec<_> = model.layers().iter().filter(|s| s.kind == LayerKind::Conv).copied().collect();
    let mut out = Vec::with_capacity(convs.len());
    for (l, spec) in convs.iter().enumerate() {
        let ch = spec.out_channels;
        let mut sums = vec![0.0f64; ch];
        let mut count = 0usize;
        model.conv_activations(images, l, |chunk| {
            for row in chunk.chunks_exact(ch) {
                for (s, v) in sums.iter_mut().zip(row) {
                    *s += v.abs() as f64;
                }
            }
            count += chunk.len() / ch;
        })?;
        out.push(sums.into_iter().map(|s| s / count as f64).collect());
    }
    Ok(out)
}

/// Zeroes the filters and biases of the `floor(fraction * channels)` least
/// relevant channels of each convolution (relevance measured on the
/// unpruned model). The dense layer is left alone.
pub fn prune(model: &Model, data: &LabeledImages, fraction: f64) -> Result<Model> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("fraction", "must lie in [0, 1)"));
    }
    if fraction == 0.0 {
        return Ok(model.clone());
    }
    if data.is_empty() {
        return Err(Error::invalid("data", "pruning needs at least one example"));
    }
    let relevance = channel_relevance(model, &data.images)?;
    let mut pruned = model.clone();
    let specs: Vec<_> = model.layers().iter().filter(|s| s.kind == LayerKind::Conv).copied().collect();
    for (spec, rel) in specs.iter().zip(&relevance) {
        let ch = spec.out_channels;
        let count = (fraction * ch as f64).floor() as usize;
        let params = pruned.params_mut();
        let dead = |c: usize| params[spec.weights()].iter().skip(c).step_by(ch).all(|&w| w == 0.0) && params[spec.biases()][c] == 0.0;
        let dead: Vec<bool> = (0..ch).map(dead).collect();
        let mut order: Vec<usize> = (0..ch).collect();
        // equal relevance: already-dead channels first, then lower index
        order.sort_by(|&a, &b| rel[a].total_cmp(&rel[b]).then(dead[b].cmp(&dead[a])).then(a.cmp(&b)));
        for &c in &order[..count] {
            for w in params[spec.weights()].iter_mut().skip(c).step_by(ch) {
                *w = 0.0;
            }
            params[spec.biases()][c] = 0.0;
        }
    }
    Ok(pruned)
}

/// Merges the colluders' copies and applies the post-collusion attack.
pub fn run_attack(copies: &[Model], spec: &AttackSpec, data: &LabeledImages) -> Result<Model> {
    spec.validate()?;
    let chosen: Vec<&Model> = spec
        .colluders
        .iter()
        .map(|&j| copies.get(j).ok_or_else(|| Error::invalid("colluders", format!("no copy for owner {j}"))))
        .collect::<Result<_>>()?;
    attack_models(&chosen, spec.post_attack, spec.seed, data)
}

/// Merges the given colluder copies and applies `post_attack`.
pub fn attack_models(chosen: &[&Model], post_attack: PostAttack, seed: u64, data: &LabeledImages) -> Result<Model> {
    let merged = collude(chosen)?;
    match post_attack {
        PostAttack::None => Ok(merged),
        PostAttack::FineTune {
            epochs,
            batch,
            learning_rate,
        } => fine_tune(&merged, data, epochs, batch, learning_rate, seed),
        PostAttack::Prune { fraction } => prune(&merged, data, fraction),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn tiny(seed: u64) -> Model {
        Model::new(
            Architecture {
                input_side: 28,
                conv_channels: vec![2, 3, 5],
                classes: 10,
            },
            seed,
        )
        .unwrap()
    }

    fn data(n: usize) -> LabeledImages {
        let images = (0..n * 784).map(|i| ((i * 31) % 97) as f32 / 97.0).collect();
        LabeledImages::new(images, (0..n).map(|i| i % 10).collect()).unwrap()
    }

    #[test]
    fn collude_single_copy_is_identity() {
        let m = tiny(1);
        assert_eq!(collude(&[&m]).unwrap(), m);
        assert!(collude(&[]).is_err());
    }

    #[test]
    fn opposite_copies_cancel() {
        let m = tiny(2);
        let mut neg = m.clone();
        neg.params_mut().iter_mut().for_each(|v| *v = -*v);
        let merged = collude(&[&m, &neg]).unwrap();
        assert!(merged.params().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collude_rejects_mixed_architectures() {
        let a = tiny(1);
        let b = Model::small_cnn(1);
        assert!(matches!(collude(&[&a, &b]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_epoch_fine_tune_and_zero_prune_are_identity() {
        let m = tiny(3);
        let d = data(8);
        assert_eq!(fine_tune(&m, &d, 0, 16, 0.001, 0).unwrap(), m);
        assert_eq!(prune(&m, &d, 0.0).unwrap(), m);
        assert!(prune(&m, &d, 1.0).is_err());
    }

    #[test]
    fn prune_zeroes_floor_fraction_per_layer_and_is_idempotent() {
        let m = tiny(4);
        let d = data(6);
        let once = prune(&m, &d, 0.8).unwrap();
        for spec in once.layers().iter().filter(|s| s.kind == LayerKind::Conv) {
            let ch = spec.out_channels;
            let dead = (0..ch)
                .filter(|&c| {
                    once.params()[spec.weights()].iter().skip(c).step_by(ch).all(|&w| w == 0.0) && once.params()[spec.biases()][c] == 0.0
                })
                .count();
            assert!(dead >= (0.8 * ch as f64).floor() as usize);
        }
        let nonzero = |m: &Model| m.params().iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero(&once) <= nonzero(&m));
        let twice = prune(&once, &d, 0.8).unwrap();
        assert_eq!(twice, once);
        // dense layer untouched
        let dense = *m.layers().last().unwrap();
        assert_eq!(&once.params()[dense.weights()], &m.params()[dense.weights()]);
    }

    #[test]
    fn attack_spec_validation() {
        let spec = AttackSpec {
            colluders: vec![],
            post_attack: PostAttack::None,
            seed: 0,
        };
        assert!(spec.validate().is_err());
        let spec = AttackSpec {
            colluders: vec![0],
            post_attack: PostAttack::Prune { fraction: 1.5 },
            seed: 0,
        };
        assert!(spec.validate().is_err());
    }
}
