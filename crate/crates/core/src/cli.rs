//! Command-line entry points: data generation, training, evaluation,
//! ablation grids and pseudo-label diagnostics.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::datagen::{read_world, write_world, Dataset};
use crate::diagnose::{
    default_thresholds, image_cooccurrence, similarity_histograms, threshold_sweep, write_cooccurrence_csv,
    write_histogram_csv, PseudoModule,
};
use crate::error::{Error, Result};
use crate::metrics::{average_over_proportions, classification_metrics, MetricSummary};
use crate::numerics::Checkpoint;
use crate::trainer::{build_memory, fit, CooccurrenceSource, SstModel, TrainReport, TrainingConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "train_report.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const WORLD_FILE: &str = "world.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

#[derive(Debug, Parser)]
#[command(name = "sst", version, about = "Multi-label recognition with partial labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic world and write train/test splits.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and report.
    Train(TrainArgs),
    /// Score checkpoints on a test split; one CSV row per proportion.
    Evaluate(EvaluateArgs),
    /// Train a grid of component variants over several seeds.
    Ablate(AblateArgs),
    /// Threshold sweeps and dumps for one pseudo-label generator.
    PseudoDiagnose(DiagnoseArgs),
}

/// Which components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Partial BCE only.
    Baseline,
    /// Learned intra-image transfer only.
    #[value(alias = "no-cst")]
    Ist,
    /// Intra-image transfer from dataset co-occurrence statistics.
    IstStat,
    /// Cross-image transfer only.
    #[value(alias = "no-ist")]
    Cst,
    /// Both transfers.
    Sst,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::Baseline, Self::Ist, Self::IstStat, Self::Cst, Self::Sst];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Ist => "ist",
            Self::IstStat => "ist-stat",
            Self::Cst => "cst",
            Self::Sst => "sst",
        }
    }

    pub fn apply(self, cfg: &TrainingConfig) -> TrainingConfig {
        let mut t = cfg.clone();
        let (ist, cst) = match self {
            Self::Baseline => (false, false),
            Self::Ist | Self::IstStat => (true, false),
            Self::Cst => (false, true),
            Self::Sst => (true, true),
        };
        t.use_ist = ist;
        t.use_cst = cst;
        t.cooccurrence_source = if self == Self::IstStat {
            CooccurrenceSource::Statistical
        } else {
            CooccurrenceSource::Learned
        };
        t
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub categories: usize,
    /// Total images; a fifth go to the test split.
    #[arg(long, default_value_t = 2500)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.1)]
    pub known_prop: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub d_raw: usize,
    #[arg(long, default_value_t = 0.15)]
    pub link_density: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = crate::datagen::DEFAULT_DISTRACTOR_RATE)]
    pub distractor_rate: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML); the built-in benchmark when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `gen-data`; generated from the config when
    /// omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum)]
    pub ablate: Option<Variant>,
    /// Re-drop training labels at these proportions; one run each.
    #[arg(long, value_delimiter = ',')]
    pub known_prop: Vec<f64>,
    /// Overrides the config seed (data and training).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// A checkpoint file, or a run directory from `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Data directory (its test split is used) or a record file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_DECISION_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Variants to run, in output order.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = Variant::ALL.to_vec())]
    pub grid: Vec<Variant>,
    /// Seeds `s, s+1, …` starting from the config seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Known-label proportions; the config's when omitted.
    #[arg(long, value_delimiter = ',')]
    pub known_prop: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long, value_enum)]
    pub module: DiagnoseModule,
    /// A checkpoint file, or a run directory from `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Data directory; its training split supplies the known labels.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Re-drop the training labels at this proportion first.
    #[arg(long)]
    pub known_prop: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub thetas: Vec<f64>,
    /// Images whose co-occurrence matrix is dumped (ist).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub images: Vec<u64>,
    /// Histogram bins over [-1, 1] (cst).
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value_t = crate::cst::DEFAULT_MEMORY_SIZE)]
    pub memory_size: usize,
    /// Seed for re-dropping labels.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiagnoseModule {
    Ist,
    Cst,
}

impl From<DiagnoseModule> for PseudoModule {
    fn from(m: DiagnoseModule) -> Self {
        match m {
            DiagnoseModule::Ist => PseudoModule::Ist,
            DiagnoseModule::Cst => PseudoModule::Cst,
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Ablate(a) => ablate(&a),
        Command::PseudoDiagnose(a) => pseudo_diagnose(&a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::bench_small()), RunConfig::load)
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.samples < 2 {
        return Err(Error::invalid("--samples must be at least 2 (train and test)"));
    }
    let n_test = (a.samples / 5).max(1);
    let mut cfg = RunConfig::bench_small();
    cfg.seed = a.seed;
    cfg.world.categories = a.categories;
    cfg.world.d_raw = a.d_raw;
    cfg.world.link_density = a.link_density;
    cfg.world.noise_sigma = a.noise_sigma;
    cfg.world.distractor_rate = a.distractor_rate;
    cfg.world.n_train = a.samples - n_test;
    cfg.world.n_test = n_test;
    cfg.world.known_prop = a.known_prop;
    cfg.validate()?;
    let (world, train, test) = cfg.datasets(a.known_prop)?;

    create_dir(&a.out)?;
    write_world(&world, &a.out.join(WORLD_FILE))?;
    train.write_jsonl(&a.out.join(TRAIN_FILE))?;
    test.write_jsonl(&a.out.join(TEST_FILE))?;
    println!(
        "wrote {} train / {} test images (C={}, positive rate {:.3}) to {}",
        train.len(),
        test.len(),
        world.categories,
        train.positive_rate(),
        a.out.display()
    );
    Ok(())
}

/// Train and test splits from a `gen-data` directory.
pub fn load_data_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        Dataset::read_jsonl(&dir.join(TRAIN_FILE))?,
        Dataset::read_jsonl(&dir.join(TEST_FILE))?,
    ))
}

fn mean_ap_of(model: &SstModel, test: &Dataset, threshold: f64) -> Result<MetricSummary> {
    let scores = model.predict_dataset(test)?;
    let gt: Vec<Vec<i8>> = test.samples.iter().map(|s| s.full_labels.clone()).collect();
    Ok(classification_metrics(&scores, &gt, threshold)?.summary)
}

/// Everything one training run writes.
pub struct RunOutput {
    pub model: SstModel,
    pub report: TrainReport,
    pub config: RunConfig,
}

/// Trains on `train` under `cfg` and scores on `test`.
pub fn train_run(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    let (model, mut report) = fit(train, &cfg.train)?;
    report.final_metrics = Some(mean_ap_of(&model, test, cfg.eval.threshold)?);
    Ok(RunOutput {
        model,
        report,
        config: cfg.clone(),
    })
}

pub fn write_run(out: &RunOutput, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    out.model.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
    out.report.write_jsonl(&dir.join(REPORT_FILE))?;
    out.config.save(&dir.join(CONFIG_FILE))
}

fn proportion_dir(q: f64) -> String {
    format!("q{q}")
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(v) = a.ablate {
        cfg.train = v.apply(&cfg.train);
    }
    cfg.validate()?;

    let (train_base, test) = match &a.data {
        Some(dir) => load_data_dir(dir)?,
        None => {
            let (_, tr, te) = cfg.datasets(cfg.world.known_prop)?;
            (tr, te)
        }
    };

    let runs: Vec<(Option<f64>, PathBuf)> = match a.known_prop.as_slice() {
        [] => vec![(None, a.out_dir.clone())],
        [q] => vec![(Some(*q), a.out_dir.clone())],
        qs => qs
            .iter()
            .map(|&q| (Some(q), a.out_dir.join(proportion_dir(q))))
            .collect(),
    };
    for (q, dir) in runs {
        let mut run_cfg = cfg.clone();
        let train = match q {
            Some(q) => {
                run_cfg.world.known_prop = q;
                run_cfg.validate()?;
                train_base.with_known_proportion(q, cfg.seed)?
            }
            None => train_base.clone(),
        };
        let out = train_run(&run_cfg, &train, &test)?;
        write_run(&out, &dir)?;
        let m = out.report.final_metrics.unwrap_or_default();
        println!(
            "trained known_prop={} -> {}: test mAP {:.4}",
            run_cfg.world.known_prop,
            dir.display(),
            m.map
        );
    }
    Ok(())
}

/// Checkpoint files under `path`, each with the known proportion recorded
/// next to it (if any). A run directory with per-proportion
/// subdirectories yields one entry per subdirectory.
pub fn find_checkpoints(path: &Path) -> Result<Vec<(Option<f64>, PathBuf)>> {
    let proportion_of = |dir: &Path| -> Result<Option<f64>> {
        let cfg = dir.join(CONFIG_FILE);
        Ok(if cfg.is_file() {
            Some(RunConfig::load(&cfg)?.world.known_prop)
        } else {
            None
        })
    };
    if path.is_file() {
        let dir = path.parent().unwrap_or(Path::new("."));
        return Ok(vec![(proportion_of(dir)?, path.to_path_buf())]);
    }
    if !path.is_dir() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such checkpoint or run directory"),
        });
    }
    let mut found = Vec::new();
    if path.join(CHECKPOINT_FILE).is_file() {
        found.push((proportion_of(path)?, path.join(CHECKPOINT_FILE)));
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CHECKPOINT_FILE).is_file())
        .collect();
    subdirs.sort();
    for d in subdirs {
        found.push((proportion_of(&d)?, d.join(CHECKPOINT_FILE)));
    }
    if found.is_empty() {
        return Err(Error::invalid(format!("no {CHECKPOINT_FILE} under {}", path.display())));
    }
    found.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (x, y) => x.is_none().cmp(&y.is_none()),
    });
    Ok(found)
}

#[derive(Debug, Serialize)]
struct ReportRow {
    known_prop: String,
    map: f64,
    op: f64,
    or: f64,
    of1: f64,
    cp: f64,
    cr: f64,
    cf1: f64,
}

impl ReportRow {
    fn new(label: String, m: &MetricSummary) -> Self {
        Self {
            known_prop: label,
            map: m.map,
            op: m.op,
            or: m.or,
            of1: m.of1,
            cp: m.cp,
            cr: m.cr,
            cf1: m.cf1,
        }
    }
}

fn load_eval_split(data: &Path) -> Result<Dataset> {
    if data.is_dir() {
        Dataset::read_jsonl(&data.join(TEST_FILE))
    } else {
        Dataset::read_jsonl(data)
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(Error::invalid("--threshold must lie in (0, 1)"));
    }
    let checkpoints = find_checkpoints(&a.checkpoint)?;
    let test = load_eval_split(&a.data)?;
    let mut rows = Vec::new();
    let mut keyed = Vec::new();
    for (k, (q, path)) in checkpoints.iter().enumerate() {
        let model = SstModel::from_checkpoint_inferred(&Checkpoint::load(path)?)?;
        let m = mean_ap_of(&model, &test, a.threshold)?;
        let label = q.map_or_else(|| format!("run{k}"), |q| q.to_string());
        rows.push(ReportRow::new(label, &m));
        keyed.push((q.unwrap_or(f64::NAN), m));
    }
    let avg = average_over_proportions(&keyed)?;
    rows.push(ReportRow::new("average".into(), &avg));
    crate::diagnose::write_rows(&a.out, &rows)?;
    println!(
        "evaluated {} checkpoint(s): average mAP {:.4} -> {}",
        checkpoints.len(),
        avg.map,
        a.out.display()
    );
    Ok(())
}

/// One variant at one proportion: test mAP per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub known_prop: f64,
    pub seeds: Vec<u64>,
    pub map: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.map.iter().sum::<f64>() / self.map.len() as f64
    }
}

/// Trains every variant for every seed and proportion. Each seed draws its
/// own world and data.
pub fn ablation_grid(cfg: &RunConfig, grid: &[Variant], seeds: u64, props: &[f64]) -> Result<Vec<AblationRow>> {
    if grid.is_empty() || seeds == 0 || props.is_empty() {
        return Err(Error::invalid("ablation needs at least one variant, seed and proportion"));
    }
    let seed_list: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
    let mut rows: Vec<AblationRow> = props
        .iter()
        .flat_map(|&q| {
            grid.iter().map(move |&v| AblationRow {
                variant: v,
                known_prop: q,
                seeds: Vec::new(),
                map: Vec::new(),
            })
        })
        .collect();
    for &s in &seed_list {
        let mut seed_cfg = cfg.clone();
        seed_cfg.seed = s;
        seed_cfg.train.seed = s;
        for &q in props {
            let (_, train, test) = seed_cfg.datasets(q)?;
            for row in rows.iter_mut().filter(|r| r.known_prop == q) {
                let mut run_cfg = seed_cfg.clone();
                run_cfg.world.known_prop = q;
                run_cfg.train = row.variant.apply(&seed_cfg.train);
                let out = train_run(&run_cfg, &train, &test)?;
                let m = out.report.final_metrics.unwrap_or_default().map;
                println!("seed {s} known_prop {q} {}: mAP {m:.4}", row.variant.name());
                row.seeds.push(s);
                row.map.push(m);
            }
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let seeds = rows.first().map(|r| r.seeds.clone()).unwrap_or_default();
    let mut header = vec!["variant".to_string(), "known_prop".to_string()];
    header.extend(seeds.iter().map(|s| format!("seed_{s}")));
    header.push("mean".into());
    let wr = |w: &mut csv::Writer<fs::File>, rec: &[String]| {
        w.write_record(rec)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    };
    wr(&mut w, &header)?;
    for r in rows {
        let mut rec = vec![r.variant.name().to_string(), r.known_prop.to_string()];
        rec.extend(r.map.iter().map(|m| m.to_string()));
        rec.push(r.mean().to_string());
        wr(&mut w, &rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let props = if a.known_prop.is_empty() {
        vec![cfg.world.known_prop]
    } else {
        a.known_prop.clone()
    };
    let rows = ablation_grid(&cfg, &a.grid, a.seeds, &props)?;
    write_ablation_csv(&rows, &a.out)?;
    for r in &rows {
        println!("{:>9} known_prop {}: mean mAP {:.4}", r.variant.name(), r.known_prop, r.mean());
    }
    Ok(())
}

fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn pseudo_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let model = SstModel::from_checkpoint_inferred(&Checkpoint::load(&checkpoint_path(&a.checkpoint))?)?;
    let mut train = Dataset::read_jsonl(&a.data.join(TRAIN_FILE))?;
    if let Some(q) = a.known_prop {
        train = train.with_known_proportion(q, a.seed)?;
    }
    if a.data.join(WORLD_FILE).is_file() {
        let world = read_world(&a.data.join(WORLD_FILE))?;
        if world.categories != model.categories() {
            return Err(Error::invalid("data and checkpoint disagree on the number of categories"));
        }
    }
    let module = PseudoModule::from(a.module);
    let thetas = if a.thetas.is_empty() {
        default_thresholds()
    } else {
        a.thetas.clone()
    };
    create_dir(&a.out_dir)?;
    let memory = build_memory(&model, &train, a.memory_size)?;
    let sweep = threshold_sweep(&model, &train, module, &thetas, &memory)?;
    sweep.write_csv(&a.out_dir.join(format!("{module}_sweep.csv")))?;
    for p in &sweep.points {
        println!(
            "{module} theta {:.3}: {} pseudo positives, precision {}",
            p.theta,
            p.pseudo_positives,
            p.precision.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    println!(
        "{module}: counts non-increasing: {}, nesting violations: {}",
        sweep.is_monotone(),
        sweep.nesting_violations()
    );

    match module {
        PseudoModule::Ist => {
            for &id in &a.images {
                let sample = train
                    .samples
                    .iter()
                    .find(|s| s.id == id)
                    .ok_or_else(|| Error::invalid(format!("no training image with id {id}")))?;
                let m = image_cooccurrence(&model, sample)?;
                write_cooccurrence_csv(&m, sample, &a.out_dir.join(format!("ist_cooccurrence_{id}.csv")))?;
            }
        }
        PseudoModule::Cst => {
            let rows = similarity_histograms(&model, &train, &memory, a.bins)?;
            write_histogram_csv(&rows, &a.out_dir.join("cst_similarity_hist.csv"))?;
        }
    }
    Ok(())
}
