use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fltrace::attacks::{attack_models, AttackSpec, PostAttack};
use fltrace::config::ExperimentConfig;
use fltrace::datasets::PartitionedData;
use fltrace::evaluation::{blackbox_trace, protection_threshold, run_trials, whitebox_trace, TrialPlan};
use fltrace::fedsim::{run_fl_training, train_independent, IndependentMode, RoundLog, Strategy};
use fltrace::nn::{checkpoint, evaluate_accuracy, Architecture, Model};
use fltrace::pipeline::{load_models, load_partition, partition_corpus, read_json, write_json, Artifacts, RunLayout, TrainingSummary};
use fltrace::tardos::AccusationResult;
use fltrace::whitebox::WhiteboxReport;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::{relative, unix_now, RunManifest};

pub struct SetupArgs {
    pub config: PathBuf,
}

pub fn setup(layout: &RunLayout, args: &SetupArgs) -> CliResult<()> {
    let started = (unix_now(), Instant::now());
    let config = ExperimentConfig::load(&args.config)?;
    std::fs::create_dir_all(&layout.root)?;
    let data = partition_corpus(&config).map_err(|e| match e {
        fltrace::Error::MissingFile(path) => CliError::MissingArtifact {
            path,
            hint: "fetch MNIST with scripts/fetch_mnist.sh or set data.mnist_dir".into(),
        },
        other => other.into(),
    })?;
    let artifacts = Artifacts::generate(&config)?;
    let mut outputs = artifacts.save(layout)?;
    write_json(&layout.partition(), &data.manifest)?;
    std::fs::write(layout.config(), config.to_toml_string())?;
    outputs.push(layout.partition());
    outputs.push(layout.config());

    let mut manifest = RunManifest::new(config);
    for path in &outputs {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        manifest.artifacts.insert(name, relative(&layout.root, path));
    }
    manifest.record(layout, "setup", vec![args.config.display().to_string()], started.0, started.1.elapsed().as_secs_f64(), &outputs);
    manifest.save(layout)?;
    eprintln!(
        "setup: {} owners, m={}, p={}, {} training / {} evaluation images -> {}",
        data.n_owners(),
        artifacts.codebook.m(),
        artifacts.basis.dim(),
        data.train_size(),
        data.eval_set.len(),
        layout.root.display()
    );
    Ok(())
}

/// Everything a post-setup command needs.
struct Loaded {
    manifest: RunManifest,
    artifacts: Artifacts,
    data: PartitionedData,
}

fn load_run(layout: &RunLayout) -> CliResult<Loaded> {
    let manifest = RunManifest::load(layout)?;
    let artifacts = Artifacts::load(layout, manifest.config.fl.n_owners)?;
    let data = load_partition(&manifest.config, layout)?;
    Ok(Loaded { manifest, artifacts, data })
}

pub struct TrainArgs {
    pub strategy: Strategy,
    /// Owners for the independent strategies.
    pub owners: Vec<usize>,
}

pub fn train(layout: &RunLayout, args: &TrainArgs) -> CliResult<()> {
    let started = (unix_now(), Instant::now());
    let Loaded { mut manifest, artifacts, data } = load_run(layout)?;
    let config = manifest.config.fl_config(args.strategy);
    let wm = artifacts.wm(args.strategy);
    let arch = Architecture::small_cnn();
    let dir = layout.models(args.strategy);
    std::fs::create_dir_all(&dir)?;
    let name = args.strategy.name();
    let mut outputs = Vec::new();

    let (owners, models) = if args.strategy.is_federated() {
        let log_path = layout.round_log(args.strategy);
        let mut log = BufWriter::new(std::fs::File::create(&log_path)?);
        let outcome = run_fl_training(&config, &data, &wm, arch, |l| {
            progress(name, l);
            let _ = writeln!(log, "{}", serde_json::to_string(l).expect("round logs serialize"));
            let _ = log.flush();
        })?;
        outputs.push(log_path);
        let owners = if args.strategy == Strategy::NoWm { vec![0] } else { (0..outcome.copies.len()).collect() };
        (owners, outcome.copies)
    } else {
        let mode = if args.strategy == Strategy::IndependentWm { IndependentMode::FullDataWm } else { IndependentMode::OwnerBaseline };
        let mut models = Vec::new();
        for &owner in &args.owners {
            let log_path = dir.join(format!("rounds_owner_{owner:03}.jsonl"));
            let mut log = BufWriter::new(std::fs::File::create(&log_path)?);
            let outcome = train_independent(mode, &config, &data, &wm, arch.clone(), owner, |l| {
                progress(&format!("{name}[{owner}]"), l);
                let _ = writeln!(log, "{}", serde_json::to_string(l).expect("round logs serialize"));
                let _ = log.flush();
            })?;
            outputs.push(log_path);
            models.push(outcome.model);
        }
        (args.owners.clone(), models)
    };

    let mut main_accuracy = Vec::with_capacity(models.len());
    for (&owner, model) in owners.iter().zip(&models) {
        let path = layout.model(args.strategy, owner);
        checkpoint::save(model, &path)?;
        outputs.push(path);
        main_accuracy.push(evaluate_accuracy(model, &data.eval_set.images, &data.eval_set.labels)?);
    }
    let summary = TrainingSummary {
        strategy: args.strategy,
        owners,
        iterations: config.total_iterations(data.train_size()),
        main_accuracy,
        wall_seconds: started.1.elapsed().as_secs_f64(),
    };
    write_json(&layout.training_summary(args.strategy), &summary)?;
    outputs.push(layout.training_summary(args.strategy));
    let mean = summary.main_accuracy.iter().sum::<f64>() / summary.main_accuracy.len() as f64;
    eprintln!("train {name}: {} checkpoint(s), mean main accuracy {mean:.4}, {:.1}s", summary.owners.len(), summary.wall_seconds);
    manifest.record(layout, "train", vec![name.to_string()], started.0, summary.wall_seconds, &outputs);
    manifest.save(layout)?;
    Ok(())
}

fn progress(name: &str, l: &RoundLog) {
    let mav = l.mav_c2.map(|m| format!(" mav_c2={m:.3}")).unwrap_or_default();
    eprintln!(
        "{name} round {:>5} epoch {} loss {:.4} main {:.4} trigger {:.4} r {:.4}{mav}",
        l.iteration, l.epoch, l.train_loss, l.main_accuracy, l.trigger_accuracy, l.mean_projection
    );
}

fn load_summary(layout: &RunLayout, strategy: Strategy) -> CliResult<TrainingSummary> {
    let path = layout.training_summary(strategy);
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            path,
            hint: format!("run `fltrace train --strategy {strategy}` first"),
        });
    }
    Ok(read_json(&path)?)
}

/// Written next to every attacked checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackManifest {
    pub strategy: Strategy,
    pub spec: AttackSpec,
    pub sources: Vec<PathBuf>,
    pub output: PathBuf,
    pub main_accuracy: f64,
}

pub struct AttackArgs {
    pub strategy: Strategy,
    pub spec: AttackSpec,
    pub name: Option<String>,
}

pub fn attack(layout: &RunLayout, args: &AttackArgs) -> CliResult<PathBuf> {
    let started = (unix_now(), Instant::now());
    args.spec.validate()?;
    let mut manifest = RunManifest::load(layout)?;
    let data = load_partition(&manifest.config, layout)?;
    let summary = load_summary(layout, args.strategy)?;
    let mut sources = Vec::new();
    for &j in &args.spec.colluders {
        if !summary.owners.contains(&j) {
            return Err(CliError::Validation(format!("no {} checkpoint for owner {j}", args.strategy)));
        }
        sources.push(layout.model(args.strategy, j));
    }
    let copies: Vec<Model> = sources.iter().map(|p| checkpoint::load(p)).collect::<Result<_, _>>()?;
    let chosen: Vec<&Model> = copies.iter().collect();
    let attacked = attack_models(&chosen, args.spec.post_attack, args.spec.seed, &data.eval_set)?;
    let name = args.name.clone().unwrap_or_else(|| default_attack_name(args.strategy, &args.spec));
    std::fs::create_dir_all(layout.attacks())?;
    let output = layout.attacks().join(format!("{name}.tfnn"));
    checkpoint::save(&attacked, &output)?;
    let record = AttackManifest {
        strategy: args.strategy,
        spec: args.spec.clone(),
        sources: sources.iter().map(|p| relative(&layout.root, p)).collect(),
        output: relative(&layout.root, &output),
        main_accuracy: evaluate_accuracy(&attacked, &data.eval_set.images, &data.eval_set.labels)?,
    };
    let record_path = layout.attacks().join(format!("{name}.json"));
    write_json(&record_path, &record)?;
    eprintln!("attack {name}: main accuracy {:.4} -> {}", record.main_accuracy, output.display());
    manifest.record(layout, "attack", vec![name], started.0, started.1.elapsed().as_secs_f64(), &[output.clone(), record_path]);
    manifest.save(layout)?;
    Ok(output)
}

fn default_attack_name(strategy: Strategy, spec: &AttackSpec) -> String {
    let ids: Vec<String> = spec.colluders.iter().map(|j| j.to_string()).collect();
    format!("{strategy}_c{}_{}_{}", spec.colluders.len(), spec.post_attack.label(), ids.join("-"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    Blackbox,
    Whitebox,
    Both,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceReport {
    pub suspect: PathBuf,
    pub mode: TraceMode,
    pub blackbox: Option<AccusationResult>,
    pub whitebox: Option<WhiteboxReport>,
}

pub struct TraceArgs {
    pub suspect: PathBuf,
    pub mode: TraceMode,
}

pub fn trace(layout: &RunLayout, args: &TraceArgs) -> CliResult<TraceReport> {
    let started = (unix_now(), Instant::now());
    let mut manifest = RunManifest::load(layout)?;
    let artifacts = Artifacts::load(layout, manifest.config.fl.n_owners)?;
    let kit = artifacts.kit(&manifest.config);
    if !args.suspect.exists() {
        return Err(CliError::MissingArtifact {
            path: args.suspect.clone(),
            hint: "expected a TFNN checkpoint".into(),
        });
    }
    let suspect = checkpoint::load(&args.suspect)?;
    let blackbox = match args.mode {
        TraceMode::Whitebox => None,
        _ => Some(blackbox_trace(&suspect, kit.triggers, kit.codebook, kit.bias, kit.epsilon)?),
    };
    let whitebox = match args.mode {
        TraceMode::Blackbox => None,
        _ => Some(whitebox_trace(&suspect, kit.projection, kit.basis, kit.threshold)?),
    };
    let report = TraceReport {
        suspect: args.suspect.clone(),
        mode: args.mode,
        blackbox,
        whitebox,
    };
    let stem = args.suspect.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "suspect".into());
    let path = layout.traces().join(format!("{stem}.json"));
    write_json(&path, &report)?;
    if let Some(b) = &report.blackbox {
        match b.accused {
            Some(j) => println!("black-box: accused owner {j} after t*={} queries", b.t_star),
            None => println!("black-box: no accusation after {} queries", b.t_star),
        }
    }
    if let Some(w) = &report.whitebox {
        let ids: Vec<String> = w.accused.iter().map(|j| j.to_string()).collect();
        println!("white-box: accused [{}] at threshold {}", ids.join(", "), w.threshold);
    }
    manifest.record(layout, "trace", vec![args.suspect.display().to_string()], started.0, started.1.elapsed().as_secs_f64(), &[path]);
    manifest.save(layout)?;
    if let Some(b) = &report.blackbox {
        if b.exhausted {
            return Err(CliError::Exhausted { queries: b.t_star });
        }
    }
    Ok(report)
}

pub struct ReportArgs {
    /// Strategies to report; every trained one when empty.
    pub strategies: Vec<Strategy>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtectionReport {
    pub baseline_owners: Vec<usize>,
    pub baseline_accuracies: Vec<f64>,
    pub threshold: f64,
}

pub fn report(layout: &RunLayout, args: &ReportArgs) -> CliResult<()> {
    let started = (unix_now(), Instant::now());
    if !layout.manifest().exists() {
        return Err(CliError::Validation(format!("{} is not a run directory (no manifest.json)", layout.root.display())));
    }
    let Loaded { mut manifest, artifacts, data } = load_run(layout)?;
    let config = manifest.config.clone();
    let trained: Vec<Strategy> = Strategy::ALL.into_iter().filter(|&s| layout.training_summary(s).exists()).collect();
    let selected: Vec<Strategy> = if args.strategies.is_empty() { trained.clone() } else { args.strategies.clone() };
    if selected.is_empty() {
        return Err(CliError::Validation("nothing to report: no trained strategy in this run directory".into()));
    }
    let mut outputs = Vec::new();
    std::fs::create_dir_all(layout.reports())?;
    for strategy in selected {
        let summary = load_summary(layout, strategy)?;
        if strategy == Strategy::IndependentOwnerBaseline {
            let report = ProtectionReport {
                baseline_owners: summary.owners.clone(),
                baseline_accuracies: summary.main_accuracy.clone(),
                threshold: protection_threshold(&summary.main_accuracy)?,
            };
            let path = layout.reports().join("protection.json");
            write_json(&path, &report)?;
            outputs.push(path);
            println!("protection threshold (mean of {} owner baselines): {:.4}", report.baseline_accuracies.len(), report.threshold);
            continue;
        }
        if !strategy.watermarks() || !strategy.shared_triggers() || !strategy.is_federated() {
            println!("{strategy}: no collusion trials (needs federated copies fingerprinted on the shared trigger set)");
            continue;
        }
        let copies = load_models(layout, &summary)?;
        let largest = config.trials.collusion_sizes.iter().copied().max().unwrap_or(1);
        if largest > copies.len() {
            return Err(CliError::Validation(format!("collusions of {largest} need at least {largest} copies, found {}", copies.len())));
        }
        let plan = TrialPlan {
            collusion_sizes: config.trials.collusion_sizes.clone(),
            attacks: config.attacks(),
            trials_per_cell: config.trials.trials_per_cell,
            seed: config.seeds.trials,
        };
        let report = run_trials(strategy.name(), &copies, &artifacts.kit(&config), &data.eval_set, &plan)?;
        let json = layout.reports().join(format!("{strategy}.json"));
        let csv = layout.reports().join(format!("{strategy}.csv"));
        write_json(&json, &report)?;
        report.write_csv(BufWriter::new(std::fs::File::create(&csv)?))?;
        for cell in report.summary() {
            println!("{cell}");
        }
        outputs.extend([json, csv]);
    }
    manifest.record(layout, "report", Vec::new(), started.0, started.1.elapsed().as_secs_f64(), &outputs);
    manifest.save(layout)?;
    Ok(())
}

/// Reads an attack spec from a JSON file.
pub fn read_attack_spec(path: &Path) -> CliResult<AttackSpec> {
    Ok(read_json(path)?)
}

pub fn parse_post_attack(config: &ExperimentConfig, label: &str) -> CliResult<PostAttack> {
    config
        .attack
        .by_label(label)
        .ok_or_else(|| CliError::Validation(format!("unknown post-attack {label:?} (expected none, finetune or prune)")))
}
