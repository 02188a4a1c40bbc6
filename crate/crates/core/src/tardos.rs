//! q-ary Tardos fingerprinting codes over a shared trigger set and the
//! sequential catch-one accusation.
//!
//! Every trigger `i` has a secret bias vector `p^(i)` drawn from a symmetric
//! Dirichlet distribution restricted to the box `[tau, 1 - (q-1) tau]`. Owner
//! labels are sampled independently from those biases. During accusation the
//! suspect's answer `y` to each trigger adds `U1(p_y)` to owners holding label
//! `y` and `U0(p_y)` to everyone else; an owner is accused once its cumulative
//! score reaches the false-positive-bounded threshold `Z_t`.

use std::fmt::Display;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Draws allowed per row before the cutoff box is declared unsatisfiable.
const MAX_REJECTIONS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasMatrix {
    m: usize,
    q: usize,
    tau: f64,
    kappa: f64,
    /// Row-major `m x q`.
    entries: Vec<f64>,
}

impl BiasMatrix {
    pub fn from_entries(m: usize, q: usize, tau: f64, kappa: f64, entries: Vec<f64>) -> Result<Self> {
        validate_params(m, q, kappa, tau)?;
        if entries.len() != m * q {
            return Err(Error::ShapeMismatch(format!("bias matrix needs {} entries, got {}", m * q, entries.len())));
        }
        let (lo, hi) = cutoff_box(q, tau);
        for (i, row) in entries.chunks_exact(q).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("entries", format!("row {i} sums to {sum}")));
            }
            if row.iter().any(|&p| p < lo - 1e-12 || p > hi + 1e-12) {
                return Err(Error::invalid("entries", format!("row {i} leaves the cutoff box")));
            }
        }
        Ok(Self { m, q, tau, kappa, entries })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn row(&self, trigger: usize) -> &[f64] {
        &self.entries[trigger * self.q..(trigger + 1) * self.q]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// `[tau, 1 - (q-1) tau]`
pub fn cutoff_box(q: usize, tau: f64) -> (f64, f64) {
    (tau, 1.0 - (q as f64 - 1.0) * tau)
}

fn validate_params(m: usize, q: usize, kappa: f64, tau: f64) -> Result<()> {
    if m == 0 {
        return Err(Error::invalid("m", "need at least one trigger"));
    }
    if q < 2 {
        return Err(Error::invalid("q", "alphabet needs at least two symbols"));
    }
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::invalid("kappa", format!("must be positive, got {kappa}")));
    }
    if !(tau > 0.0 && tau < 1.0 / q as f64) {
        return Err(Error::invalid("tau", format!("must lie in (0, 1/q) = (0, {}), got {tau}", 1.0 / q as f64)));
    }
    Ok(())
}

/// Samples `m` bias rows i.i.d. from a symmetric Dirichlet(kappa), redrawing
/// any row that leaves the cutoff box.
pub fn sample_bias_matrix(m: usize, q: usize, kappa: f64, tau: f64, seed: u64) -> Result<BiasMatrix> {
    validate_params(m, q, kappa, tau)?;
    let gamma = Gamma::new(kappa, 1.0).map_err(|e| Error::invalid("kappa", e.to_string()))?;
    let (lo, hi) = cutoff_box(q, tau);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(m * q);
    let mut row = vec![0.0; q];
    for _ in 0..m {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_REJECTIONS {
                return Err(Error::invalid("tau", "cutoff box rejects (almost) every Dirichlet draw"));
            }
            for v in row.iter_mut() {
                *v = rng.sample(gamma);
            }
            let sum: f64 = row.iter().sum();
            if !(sum > 0.0) {
                continue;
            }
            row.iter_mut().for_each(|v| *v /= sum);
            if row.iter().all(|&p| p >= lo && p <= hi) {
                break;
            }
        }
        entries.extend_from_slice(&row);
    }
    Ok(BiasMatrix { m, q, tau, kappa, entries })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeBook {
    q: usize,
    m: usize,
    owner_ids: Vec<u32>,
    /// Row-major `n_owners x m`.
    labels: Vec<u16>,
}

impl CodeBook {
    pub fn from_labels(q: usize, m: usize, owner_ids: Vec<u32>, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != owner_ids.len() * m || owner_ids.is_empty() {
            return Err(Error::ShapeMismatch("codebook labels disagree with owner count".into()));
        }
        if labels.iter().any(|&l| l as usize >= q) {
            return Err(Error::invalid("labels", "label outside the alphabet"));
        }
        Ok(Self { q, m, owner_ids, labels })
    }

    pub fn n_owners(&self) -> usize {
        self.owner_ids.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn owner_ids(&self) -> &[u32] {
        &self.owner_ids
    }

    /// Codeword `x_j` of the owner at row `owner`.
    pub fn codeword(&self, owner: usize) -> &[u16] {
        &self.labels[owner * self.m..(owner + 1) * self.m]
    }

    pub fn label(&self, owner: usize, trigger: usize) -> usize {
        self.labels[owner * self.m + trigger] as usize
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// The codeword as class indices, ready to use as training targets.
    pub fn targets(&self, owner: usize) -> Vec<usize> {
        self.codeword(owner).iter().map(|&l| l as usize).collect()
    }
}

/// Samples one codeword per owner; owner `j` gets identifier `j`.
pub fn generate_codebook(bias: &BiasMatrix, n_owners: usize, seed: u64) -> Result<CodeBook> {
    if n_owners == 0 {
        return Err(Error::invalid("n_owners", "need at least one owner"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(n_owners * bias.m);
    for _ in 0..n_owners {
        for i in 0..bias.m {
            labels.push(sample_categorical(bias.row(i), &mut rng) as u16);
        }
    }
    Ok(CodeBook {
        q: bias.q,
        m: bias.m,
        owner_ids: (0..n_owners as u32).collect(),
        labels,
    })
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

/// `U1(p) = sqrt((1 - p) / p)`
pub fn u1(p: f64) -> f64 {
    ((1.0 - p) / p).sqrt()
}

/// `U0(p) = -sqrt(p / (1 - p))`
pub fn u0(p: f64) -> f64 {
    -(p / (1.0 - p)).sqrt()
}

/// Score contribution of one query for one owner. `p_y` is the bias of the
/// class the suspect actually returned.
pub fn score_increment(owner_label: usize, observed: usize, bias_row: &[f64]) -> Result<f64> {
    let q = bias_row.len();
    if owner_label >= q || observed >= q {
        return Err(Error::invalid("class", format!("label {owner_label} / output {observed} outside 0..{q}")));
    }
    let p = bias_row[observed];
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::DegenerateBias { p });
    }
    Ok(if owner_label == observed { u1(p) } else { u0(p) })
}

/// Positive threshold `Z_t` attaining false-positive bound `epsilon` after `t`
/// queries: the positive root of
/// `Z^2 / (2t) / (1 + Z / (3 t sqrt(tau))) = -ln(epsilon)`.
pub fn accusation_threshold(t: usize, epsilon: f64, tau: f64) -> f64 {
    let ln_eps = epsilon.ln();
    let a = 1.0 / (3.0 * tau.sqrt());
    let t = t as f64;
    ln_eps * (-a - (a * a - 2.0 * t / ln_eps).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccusationResult {
    pub accused: Option<usize>,
    /// Queries answered when the process stopped (`m` when exhausted).
    pub t_star: usize,
    pub final_scores: Vec<f64>,
    pub threshold_at_stop: f64,
    pub exhausted: bool,
}

/// Sequential catch-one accusation. Triggers are queried in index order; the
/// process stops at the first `t` where some owner's cumulative score reaches
/// `Z_t`, accusing the highest-scoring owner (lowest index on ties).
pub fn accuse<E: Display>(mut oracle: impl FnMut(usize) -> std::result::Result<usize, E>, codebook: &CodeBook, bias: &BiasMatrix, epsilon: f64) -> Result<AccusationResult> {
    if codebook.m() != bias.m() || codebook.q() != bias.q() {
        return Err(Error::ShapeMismatch("codebook and bias matrix dimensions differ".into()));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid("epsilon", "must lie in (0, 1)"));
    }
    let n = codebook.n_owners();
    let mut scores = vec![0.0f64; n];
    for i in 0..bias.m() {
        let y = oracle(i).map_err(|e| Error::OracleFailure {
            index: i,
            reason: e.to_string(),
        })?;
        if y >= bias.q() {
            return Err(Error::OracleFailure {
                index: i,
                reason: format!("class {y} outside the alphabet"),
            });
        }
        let p = bias.row(i)[y];
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::DegenerateBias { p });
        }
        let (hit, miss) = (u1(p), u0(p));
        for (j, s) in scores.iter_mut().enumerate() {
            *s += if codebook.label(j, i) == y { hit } else { miss };
        }
        let t = i + 1;
        let z = accusation_threshold(t, epsilon, bias.tau());
        let best = leader(&scores);
        if scores[best] >= z {
            return Ok(AccusationResult {
                accused: Some(best),
                t_star: t,
                final_scores: scores,
                threshold_at_stop: z,
                exhausted: false,
            });
        }
    }
    Ok(AccusationResult {
        accused: None,
        t_star: bias.m(),
        threshold_at_stop: accusation_threshold(bias.m(), epsilon, bias.tau()),
        final_scores: scores,
        exhausted: true,
    })
}

/// Highest score, lowest index on ties.
fn leader(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = j;
        }
    }
    best
}

/// Coordinate-wise majority vote over the colluders' codewords; ties resolve
/// to the lowest class index.
pub fn majority_vote(codebook: &CodeBook, colluders: &[usize]) -> Vec<usize> {
    let mut counts = vec![0usize; codebook.q()];
    (0..codebook.m())
        .map(|i| {
            counts.iter_mut().for_each(|c| *c = 0);
            for &j in colluders {
                counts[codebook.label(j, i)] += 1;
            }
            let mut best = 0;
            for (a, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}
