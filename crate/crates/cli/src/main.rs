use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use visattack::attacks::{parse_scenarios, AttackConfig, AttackTrace, Scenario};
use visattack::catalog::{
    generate_synthetic, load_dataset, load_interactions, read_dataset, save_dataset, split_holdout, Dataset,
    MissingImagePolicy,
};
use visattack::config::{DatasetSection, RunConfig};
use visattack::experiment::{extract_all, TargetFamily, World};
use visattack::extractor::{load_extractor, save_extractor, ExtractorWeights};
use visattack::recommender::{load_model, save_model, train, visual_gain, ModelKind};
use visattack::report::{self, ExperimentResult};

const DATASET_FILE: &str = "dataset.bin";
const EXTRACTOR_FILE: &str = "extractor.bin";
const MODEL_FILE: &str = "model.bin";
const TRAIN_REPORT_FILE: &str = "train_report.json";
const RESULTS_FILE: &str = "results.json";
const CONFIG_ECHO: &str = "config.resolved.toml";

#[derive(Parser)]
#[command(name = "visattack", version, about = "Visual push attacks on visually-aware recommenders")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for scenario-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory, overriding `report.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or import the dataset.
    GenData,
    /// Train the configured model and report AUC and visual gain.
    Train,
    /// Run an attack batch against the trained model.
    Attack {
        /// Scenario file; without it, `scenarios.count` scenarios are sampled.
        #[arg(long)]
        scenarios: Option<PathBuf>,
    },
    /// Rebuild CSV and summary exports from a results directory.
    Report {
        /// Directory holding results.json; defaults to the output directory.
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config: RunConfig = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("config not found: {}", path.display()))?;
            toml::from_str(&text).map_err(|e| anyhow::anyhow!("invalid config {}: {}", path.display(), one_line(&e)))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.report.output_dir = out.clone();
    }
    let config = config.resolve();
    config.validate().context("invalid config")?;
    Ok(config)
}

fn one_line(e: &impl std::fmt::Display) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        bail!("--jobs must be >= 1");
    }
    let config = load_config(&cli)?;
    let out = config.report.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    match cli.command {
        Command::GenData => {
            write_echo(&out, &config)?;
            gen_data(&config, &out)
        }
        Command::Train => {
            write_echo(&out, &config)?;
            cmd_train(&config, &out)
        }
        Command::Attack { scenarios } => {
            write_echo(&out, &config)?;
            cmd_attack(&config, &out, scenarios.as_deref(), cli.jobs)
        }
        Command::Report { results } => cmd_report(results.as_deref().unwrap_or(&out), &out),
    }
}

fn write_echo(out: &Path, config: &RunConfig) -> Result<()> {
    let text = toml::to_string_pretty(config).context("cannot serialize config")?;
    write(&out.join(CONFIG_ECHO), text)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)?)
}

fn require(out: &Path, file: &str, what: &str) -> Result<PathBuf> {
    let path = out.join(file);
    if !path.exists() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(path)
}

fn gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    let dataset = match &config.dataset {
        DatasetSection::Synthetic(s) => {
            let extractor = ExtractorWeights::new(&config.extractor)?;
            generate_synthetic(s, &extractor)?
        }
        DatasetSection::Files {
            interactions,
            images,
            min_interactions,
        } => {
            let table = load_interactions(interactions)?;
            let (dataset, dropped) = load_dataset(&table, images, MissingImagePolicy::Drop, *min_interactions)?;
            if !dropped.is_empty() {
                eprintln!("dropped {} items without images", dropped.len());
            }
            dataset
        }
    };
    save_dataset(&dataset, out.join(DATASET_FILE))?;
    println!(
        "dataset: {} users, {} items, {} categories, {} interactions",
        dataset.num_users(),
        dataset.num_items(),
        dataset.num_categories(),
        dataset.interactions().len()
    );
    Ok(())
}

fn read_inputs(out: &Path) -> Result<Dataset> {
    Ok(read_dataset(require(out, DATASET_FILE, "dataset")?)?)
}

#[derive(Serialize)]
struct TrainSummary {
    kind: ModelKind,
    auc: Option<f64>,
    bpr_auc: Option<f64>,
    visual_gain: Option<f64>,
    best_epoch: usize,
    epoch_loss: Vec<f64>,
    epoch_auc: Vec<f64>,
}

fn cmd_train(config: &RunConfig, out: &Path) -> Result<()> {
    let dataset = read_inputs(out)?;
    let extractor = ExtractorWeights::new(&config.extractor)?;
    let split = split_holdout(&dataset, config.model.split_seed);
    let features = extract_all(&extractor, dataset.images())?;
    let hyper = &config.model.hyper;
    let (model, rep) = train(&dataset, &split, &features, hyper, config.model.kind)?;
    let bpr_auc = if config.model.kind.is_visual() {
        train(&dataset, &split, &features, hyper, ModelKind::Bpr)?.1.best_auc
    } else {
        rep.best_auc
    };
    let gain = match (rep.best_auc, bpr_auc) {
        (Some(v), Some(p)) if config.model.kind.is_visual() => Some(visual_gain(v, p)?),
        _ => None,
    };
    save_extractor(&extractor, out.join(EXTRACTOR_FILE))?;
    save_model(&model, out.join(MODEL_FILE))?;
    let summary = TrainSummary {
        kind: rep.kind,
        auc: rep.best_auc,
        bpr_auc,
        visual_gain: gain,
        best_epoch: rep.best_epoch,
        epoch_loss: rep.epoch_loss,
        epoch_auc: rep.epoch_auc,
    };
    write_json(&out.join(TRAIN_REPORT_FILE), &summary)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "trained {:?}: auc {} bpr auc {} visual gain {}",
        summary.kind,
        fmt(summary.auc),
        fmt(summary.bpr_auc),
        fmt(summary.visual_gain)
    );
    Ok(())
}

fn cmd_attack(config: &RunConfig, out: &Path, scenario_file: Option<&Path>, jobs: usize) -> Result<()> {
    let model_path = require(out, MODEL_FILE, "model")?;
    let extractor_path = require(out, EXTRACTOR_FILE, "extractor")?;
    let dataset = read_inputs(out)?;
    let model = load_model(model_path)?;
    let extractor = load_extractor(extractor_path)?;
    let split = split_holdout(&dataset, config.model.split_seed);
    let world = World::from_parts(dataset, extractor, split, model)?;

    let batch: Vec<(Scenario, AttackConfig)> = match scenario_file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("scenario file not found: {}", path.display()))?;
            parse_scenarios(&text)?
                .into_iter()
                .map(|spec| Ok((spec.scenario, spec.config(&config.attack)?)))
                .collect::<visattack::Result<_>>()?
        }
        None => world
            .sample_scenarios(TargetFamily::of(config.attack.kind), config.scenarios.count, config.scenarios.seed)?
            .into_iter()
            .map(|s| (s, config.attack.clone()))
            .collect(),
    };

    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let traces: Vec<AttackTrace> = pool.install(|| {
        batch
            .par_iter()
            .enumerate()
            .map(|(idx, (scenario, attack))| {
                world
                    .run(*scenario, attack, &config.oracle, config.scenario_seed(idx))
                    .with_context(|| format!("scenario {idx} ({} on item {})", attack.kind.name(), scenario.pushed_item))
            })
            .collect::<Result<_>>()
    })?;

    let result = ExperimentResult::new(config.seed, config, config.report.ks.clone(), traces)?;
    report::export_json(&result, out.join(RESULTS_FILE))?;
    write_exports(&result, out)
}

#[derive(Serialize)]
struct Curves {
    k: usize,
    hr: Vec<f64>,
    mean_ssim: Vec<f64>,
}

fn write_exports(result: &ExperimentResult, out: &Path) -> Result<()> {
    report::export_csv(result, out.join("results.csv"))?;
    let table = report::summary_table(&result.traces, &result.ks)?;
    write(&out.join("summary.txt"), &table)?;
    let curves = result
        .ks
        .iter()
        .map(|&k| {
            Ok(Curves {
                k,
                hr: report::hr_curve(&result.traces, k)?,
                mean_ssim: report::ssim_curve(&result.traces),
            })
        })
        .collect::<visattack::Result<Vec<_>>>()?;
    write_json(&out.join("curves.json"), &curves)?;
    print!("{table}");
    Ok(())
}

fn cmd_report(results_dir: &Path, out: &Path) -> Result<()> {
    let path = require(results_dir, RESULTS_FILE, "results")?;
    let result = report::import_json(path)?;
    write_exports(&result, out)
}
