//! Metrics and end-to-end accusation experiments: trigger accuracy, Marking
//! Assumption violations (MAV), black-box and white-box tracing of suspect
//! models, activation histograms, the protection threshold, and batched
//! collusion trials with JSON/CSV reporting.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackSpec, PostAttack};
use crate::datasets::{LabeledImages, TriggerSet};
use crate::error::{Error, Result};
use crate::nn::{Model, IMAGE_PIXELS};
use crate::seeds::derive_seed;
use crate::tardos::{accuse, AccusationResult, BiasMatrix, CodeBook};
use crate::whitebox::{accuse_whitebox, OwnerBasis, ProjectionMatrix, WhiteboxReport};

/// Triggers answered per forward pass while serving accusation queries.
const ORACLE_BLOCK: usize = 50;

/// Fraction of triggers whose argmax output equals the owner's label.
pub fn trigger_accuracy(model: &Model, triggers: &TriggerSet, labels: &[usize]) -> Result<f64> {
    if labels.len() != triggers.len() {
        return Err(Error::ShapeMismatch(format!("{} triggers but {} labels", triggers.len(), labels.len())));
    }
    let predicted = model.predict(&triggers.images)?;
    Ok(predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Fraction of triggers on which the suspect outputs a class held by none of
/// the colluders.
pub fn mav(suspect: &Model, triggers: &TriggerSet, codebook: &CodeBook, colluders: &[usize]) -> Result<f64> {
    let predicted = suspect.predict(&triggers.images)?;
    mav_from_outputs(&predicted, codebook, colluders)
}

pub fn mav_from_outputs(outputs: &[usize], codebook: &CodeBook, colluders: &[usize]) -> Result<f64> {
    if colluders.is_empty() {
        return Err(Error::invalid("colluders", "MAV needs at least one colluder"));
    }
    if outputs.len() != codebook.m() {
        return Err(Error::ShapeMismatch("outputs and codebook length differ".into()));
    }
    let violations = outputs
        .iter()
        .enumerate()
        .filter(|&(i, &y)| colluders.iter().all(|&j| codebook.label(j, i) != y))
        .count();
    Ok(violations as f64 / outputs.len() as f64)
}

/// Black-box catch-one tracing: the suspect's argmax answers serve as the
/// accusation oracle, computed lazily in blocks so early stops stay cheap.
pub fn blackbox_trace(suspect: &Model, triggers: &TriggerSet, codebook: &CodeBook, bias: &BiasMatrix, epsilon: f64) -> Result<AccusationResult> {
    if triggers.len() != codebook.m() {
        return Err(Error::ShapeMismatch(format!(
            "{} triggers but codewords of length {}",
            triggers.len(),
            codebook.m()
        )));
    }
    let mut answers: Vec<usize> = Vec::with_capacity(triggers.len());
    let oracle = |i: usize| -> Result<usize> {
        while answers.len() <= i {
            let start = answers.len();
            let end = (start + ORACLE_BLOCK).min(triggers.len());
            answers.extend(suspect.predict(&triggers.images[start * IMAGE_PIXELS..end * IMAGE_PIXELS])?);
        }
        Ok(answers[i])
    };
    accuse(oracle, codebook, bias, epsilon)
}

/// White-box catch-all tracing on the carrier layer.
pub fn whitebox_trace(suspect: &Model, projection: &ProjectionMatrix, basis: &OwnerBasis, threshold: f64) -> Result<WhiteboxReport> {
    accuse_whitebox(&suspect.carrier_f64(), projection, basis, threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationHistogram {
    pub layer: usize,
    /// Upper edge of the last bin; bins are uniform over `[0, max_activation]`.
    pub max_activation: f64,
    pub counts: Vec<u64>,
    pub threshold: f64,
    pub above_threshold: u64,
    pub total: u64,
}

/// Histogram (100 uniform bins over `[0, max]`) of the post-ReLU outputs of
/// convolution `layer` on every trigger, plus the count above `threshold`.
pub fn activation_histogram(model: &Model, triggers: &TriggerSet, layer: usize, threshold: f64) -> Result<ActivationHistogram> {
    const BINS: usize = 100;
    let mut max = 0.0f32;
    let mut above = 0u64;
    let mut total = 0u64;
    model.conv_activations(&triggers.images, layer, |chunk| {
        for &v in chunk {
            max = max.max(v);
            above += u64::from(v as f64 > threshold);
        }
        total += chunk.len() as u64;
    })?;
    let mut counts = vec![0u64; if max > 0.0 { BINS } else { 1 }];
    if max > 0.0 {
        let width = max as f64 / BINS as f64;
        model.conv_activations(&triggers.images, layer, |chunk| {
            for &v in chunk {
                let bin = ((v as f64 / width) as usize).min(BINS - 1);
                counts[bin] += 1;
            }
        })?;
    } else {
        counts[0] = total;
    }
    Ok(ActivationHistogram {
        layer,
        max_activation: max as f64,
        counts,
        threshold,
        above_threshold: above,
        total,
    })
}

/// Mean of the owners' independent accuracies: the main-task level beyond
/// which the collaborative model must already be traceable.
pub fn protection_threshold(baseline_accuracies: &[f64]) -> Result<f64> {
    if baseline_accuracies.is_empty() {
        return Err(Error::invalid("baseline_accuracies", "need at least one baseline"));
    }
    // shifted by the first value so identical inputs return that value exactly
    let first = baseline_accuracies[0];
    let offset: f64 = baseline_accuracies.iter().map(|a| a - first).sum();
    Ok(first + offset / baseline_accuracies.len() as f64)
}

/// Everything needed to trace a suspect.
pub struct TraceKit<'a> {
    pub triggers: &'a TriggerSet,
    pub codebook: &'a CodeBook,
    pub bias: &'a BiasMatrix,
    pub epsilon: f64,
    pub projection: &'a ProjectionMatrix,
    pub basis: &'a OwnerBasis,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub collusion_sizes: Vec<usize>,
    pub attacks: Vec<PostAttack>,
    pub trials_per_cell: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub c: usize,
    pub attack: PostAttack,
    pub colluders: Vec<usize>,
    pub blackbox: AccusationResult,
    /// No accusation although a collusion exists.
    pub false_negative: bool,
    /// The black-box process accused an owner outside the collusion.
    pub innocent_accused: bool,
    pub whitebox: WhiteboxReport,
    /// White-box accused set equals the colluder set.
    pub whitebox_exact: bool,
    pub mav: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub strategy: String,
    pub plan: TrialPlan,
    pub trials: usize,
    pub records: Vec<TrialRecord>,
}

/// Traces one (possibly attacked) suspect built from `colluders`.
pub fn trace_suspect(suspect: &Model, colluders: &[usize], kit: &TraceKit<'_>) -> Result<(AccusationResult, WhiteboxReport, f64)> {
    let outputs = suspect.predict(&kit.triggers.images)?;
    let mav = mav_from_outputs(&outputs, kit.codebook, colluders)?;
    let oracle = |i: usize| -> Result<usize> { Ok(outputs[i]) };
    let blackbox = accuse(oracle, kit.codebook, kit.bias, kit.epsilon)?;
    let whitebox = whitebox_trace(suspect, kit.projection, kit.basis, kit.threshold)?;
    Ok((blackbox, whitebox, mav))
}

/// Random collusions of the given sizes, each merged, attacked and traced.
/// Trial `k` draws its colluders and attack randomness from stream `k` of
/// `plan.seed`, so results do not depend on scheduling.
pub fn run_trials(strategy: &str, copies: &[Model], kit: &TraceKit<'_>, attack_data: &LabeledImages, plan: &TrialPlan) -> Result<ExperimentReport> {
    let mut cells = Vec::new();
    for &c in &plan.collusion_sizes {
        if c == 0 || c > copies.len() {
            return Err(Error::invalid("collusion_sizes", format!("cannot draw {c} of {} copies", copies.len())));
        }
        for attack in &plan.attacks {
            for _ in 0..plan.trials_per_cell {
                cells.push((c, *attack));
            }
        }
    }
    let records = cells
        .par_iter()
        .enumerate()
        .map(|(trial, &(c, attack))| {
            let seed = derive_seed(plan.seed, trial as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut colluders = sample(&mut rng, copies.len(), c).into_vec();
            colluders.sort_unstable();
            let spec = AttackSpec {
                colluders: colluders.clone(),
                post_attack: attack,
                seed,
            };
            let suspect = run_attack(copies, &spec, attack_data)?;
            let (blackbox, whitebox, mav) = trace_suspect(&suspect, &colluders, kit)?;
            let false_negative = blackbox.exhausted;
            let innocent_accused = blackbox.accused.is_some_and(|j| !colluders.contains(&j));
            let whitebox_exact = whitebox.accused == colluders;
            Ok(TrialRecord {
                trial,
                c,
                attack,
                colluders,
                blackbox,
                false_negative,
                innocent_accused,
                whitebox,
                whitebox_exact,
                mav,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        strategy: strategy.to_string(),
        plan: plan.clone(),
        trials: records.len(),
        records,
    })
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    strategy: &'a str,
    c: usize,
    attack: &'static str,
    trial: usize,
    colluders: String,
    t_star: usize,
    accused: String,
    false_negative: bool,
    innocent_accused: bool,
    mav: f64,
    whitebox_accused: String,
    whitebox_exact: bool,
    r_guilty_min: f64,
    r_innocent_max: f64,
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(";")
}

fn guilty_innocent(record: &TrialRecord) -> (f64, f64) {
    let mut guilty = f64::INFINITY;
    let mut innocent = f64::NEG_INFINITY;
    for (&j, &r) in &record.whitebox.projections {
        if record.colluders.contains(&j) {
            guilty = guilty.min(r);
        } else {
            innocent = innocent.max(r);
        }
    }
    (guilty, innocent)
}

impl ExperimentReport {
    /// One CSV row per trial, ready for plotting.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            let (g, i) = guilty_innocent(r);
            w.serialize(CsvRow {
                strategy: &self.strategy,
                c: r.c,
                attack: r.attack.label(),
                trial: r.trial,
                colluders: join(&r.colluders),
                t_star: r.blackbox.t_star,
                accused: r.blackbox.accused.map(|j| j.to_string()).unwrap_or_default(),
                false_negative: r.false_negative,
                innocent_accused: r.innocent_accused,
                mav: r.mav,
                whitebox_accused: join(&r.whitebox.accused),
                whitebox_exact: r.whitebox_exact,
                r_guilty_min: g,
                r_innocent_max: i,
            })
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> Vec<CellSummary> {
        let mut cells: BTreeMap<(usize, &'static str), Vec<&TrialRecord>> = BTreeMap::new();
        for r in &self.records {
            cells.entry((r.c, r.attack.label())).or_default().push(r);
        }
        cells
            .into_iter()
            .map(|((c, attack), rs)| {
                let mut t: Vec<usize> = rs.iter().filter(|r| !r.false_negative).map(|r| r.blackbox.t_star).collect();
                t.sort_unstable();
                let (min_g, max_i) = rs.iter().map(|r| guilty_innocent(r)).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (g, i)| (a.min(g), b.max(i)));
                CellSummary {
                    strategy: self.strategy.clone(),
                    c,
                    attack: attack.to_string(),
                    trials: rs.len(),
                    false_negatives: rs.iter().filter(|r| r.false_negative).count(),
                    innocent_accusations: rs.iter().filter(|r| r.innocent_accused).count(),
                    t_star_min: t.first().copied(),
                    t_star_median: (!t.is_empty()).then(|| t[t.len() / 2]),
                    t_star_max: t.last().copied(),
                    t_star_mean: (!t.is_empty()).then(|| t.iter().sum::<usize>() as f64 / t.len() as f64),
                    whitebox_exact: rs.iter().filter(|r| r.whitebox_exact).count(),
                    r_guilty_min: min_g,
                    r_innocent_max: max_i,
                    mav_mean: rs.iter().map(|r| r.mav).sum::<f64>() / rs.len() as f64,
                }
            })
            .collect()
    }
}

/// Distribution statistics for one (collusion size, attack) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub strategy: String,
    pub c: usize,
    pub attack: String,
    pub trials: usize,
    pub false_negatives: usize,
    pub innocent_accusations: usize,
    pub t_star_min: Option<usize>,
    pub t_star_median: Option<usize>,
    pub t_star_max: Option<usize>,
    pub t_star_mean: Option<f64>,
    pub whitebox_exact: usize,
    pub r_guilty_min: f64,
    pub r_innocent_max: f64,
    pub mav_mean: f64,
}

impl std::fmt::Display for CellSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
        write!(
            f,
            "{:<18} c={} {:<9} trials={:<4} FN={} ({:.1}%) innocent={} t*[min/med/max]={}/{}/{} wb_exact={}/{} r_guilty_min={:.3} r_innocent_max={:.3} mav={:.3}",
            self.strategy,
            self.c,
            self.attack,
            self.trials,
            self.false_negatives,
            100.0 * self.false_negatives as f64 / self.trials.max(1) as f64,
            self.innocent_accusations,
            opt(self.t_star_min),
            opt(self.t_star_median),
            opt(self.t_star_max),
            self.whitebox_exact,
            self.trials,
            self.r_guilty_min,
            self.r_innocent_max,
            self.mav_mean
        )
    }
}
