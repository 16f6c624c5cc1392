//! Experiment plans: isolated training of the first task, task addition under
//! a chosen strategy, and evaluation of every registered task after every
//! phase, repeated over seeds.
//!
//! Output directory layout of [`run_plan`]:
//!
//! ```text
//! metrics.csv        one row per (seed, phase, evaluated task); deterministic
//! training_log.csv   per-epoch loss and accuracy; deterministic
//! timings.csv        wall-clock seconds per phase (not reproducible)
//! manifest.json      plan, config hash, code version
//! seed<S>/phase<K>.sena   checkpoint after each phase
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::datasets::{
    load_cifar_split, load_raw_images, make_synthetic_task, CifarVariant, Dataset, FileSplit, SplitSpec,
    TaskData,
};
use crate::error::{Result, SenaError};
use crate::model::{Architecture, MultiTaskModel};
use crate::rng::Rng;
use crate::training::{
    evaluate, train_finetune, train_lwf, train_sena, train_task, LwfConfig, SgdConfig, TrainReport,
};

pub const METRICS_HEADER: &str = "strategy,seed,phase,trained_task,task_id,role,accuracy";
pub const TIMINGS_HEADER: &str = "strategy,seed,phase,trained_task,wallclock_s";
pub const TRAINING_LOG_HEADER: &str =
    "strategy,seed,phase,task_id,epoch,train_loss,train_accuracy,validation_accuracy";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Sena,
    Lwf,
    Finetune,
    Isolated,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sena => "sena",
            Strategy::Lwf => "lwf",
            Strategy::Finetune => "finetune",
            Strategy::Isolated => "isolated",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = SenaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sena" => Ok(Strategy::Sena),
            "lwf" => Ok(Strategy::Lwf),
            "finetune" => Ok(Strategy::Finetune),
            "isolated" => Ok(Strategy::Isolated),
            other => Err(SenaError::InvalidArgument(format!(
                "unknown strategy {other:?} (expected sena, lwf, finetune or isolated)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a named dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated task; split 80/10/10 by the run seed.
    Synthetic {
        task: usize,
        #[serde(default)]
        n_classes: Option<usize>,
        #[serde(default)]
        per_class: Option<usize>,
    },
    /// Extracted CIFAR binary directory; validation carved from train.
    Cifar {
        variant: CifarVariant,
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Pair of `IMGS1` files; validation carved from train.
    Imgs {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDefaults {
    pub n_classes: usize,
    pub per_class: usize,
    /// Generation seed; `None` regenerates the data from each run seed.
    pub data_seed: Option<u64>,
}

impl Default for SyntheticDefaults {
    fn default() -> Self {
        SyntheticDefaults {
            n_classes: 4,
            per_class: 60,
            data_seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransferSource {
    /// Copy the body of the most recently added branch.
    #[default]
    MostRecent,
    /// Copy the body of the first task's branch.
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SenaOptions {
    pub transfer_from: TransferSource,
    /// Train all weights after the new branch converges. Breaks freeze-exactness.
    pub unfreeze_phase2: bool,
}

/// Declarative description of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub strategy: Strategy,
    pub task_sequence: Vec<String>,
    pub seeds: Vec<u64>,
    pub sgd: SgdConfig,
    pub lwf: LwfConfig,
    pub sena: SenaOptions,
    pub architecture: Architecture,
    pub validation_fraction: f64,
    pub synthetic: SyntheticDefaults,
    pub datasets: BTreeMap<String, DatasetSource>,
    pub output_dir: PathBuf,
    pub eval_batch_size: usize,
    pub save_checkpoints: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            strategy: Strategy::Sena,
            task_sequence: vec!["synth0".into(), "synth1".into()],
            seeds: vec![1],
            sgd: SgdConfig::default(),
            lwf: LwfConfig::default(),
            sena: SenaOptions::default(),
            architecture: Architecture::default(),
            validation_fraction: 0.1,
            synthetic: SyntheticDefaults::default(),
            datasets: BTreeMap::new(),
            output_dir: PathBuf::from("runs/default"),
            eval_batch_size: 128,
            save_checkpoints: true,
        }
    }
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: ExperimentPlan =
            serde_json::from_str(text).map_err(|e| SenaError::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SenaError::io(path, e))?;
        let mut plan = Self::from_json(&text)?;
        // Relative dataset paths are taken relative to the plan file.
        if let Some(base) = path.parent() {
            for src in plan.datasets.values_mut() {
                match src {
                    DatasetSource::Cifar { dir, .. } if dir.is_relative() => *dir = base.join(&*dir),
                    DatasetSource::Imgs { train, test, .. } => {
                        if train.is_relative() {
                            *train = base.join(&*train);
                        }
                        if test.is_relative() {
                            *test = base.join(&*test);
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_sequence.is_empty() {
            return Err(SenaError::Config("task_sequence must name at least one dataset".into()));
        }
        if self.seeds.is_empty() {
            return Err(SenaError::Config("seeds must not be empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.task_sequence {
            if !seen.insert(t) {
                return Err(SenaError::Config(format!("task {t:?} appears twice in task_sequence")));
            }
        }
        if self.eval_batch_size == 0 {
            return Err(SenaError::Config("eval_batch_size must be positive".into()));
        }
        self.sgd.validate()?;
        self.lwf.validate()?;
        self.architecture.validate()?;
        SplitSpec {
            seed: 0,
            validation_fraction: self.validation_fraction,
            test_fraction: 0.1,
        }
        .validate()?;
        Ok(())
    }

    /// Canonical JSON of the plan, used for the config hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    fn source(&self, name: &str) -> Result<DatasetSource> {
        if let Some(src) = self.datasets.get(name) {
            return Ok(src.clone());
        }
        if let Some(task) = name.strip_prefix("synth").and_then(|n| n.parse::<usize>().ok()) {
            return Ok(DatasetSource::Synthetic {
                task,
                n_classes: None,
                per_class: None,
            });
        }
        Err(SenaError::NotFound(format!(
            "dataset {name:?} is neither declared in the plan nor a synthN name"
        )))
    }
}

/// Resolves dataset names to seeded train/validation/test splits, caching
/// file-backed pools.
#[derive(Default)]
pub struct DataCatalog {
    file_cache: HashMap<String, (Dataset, Dataset)>,
}

fn take_first(ds: Dataset, limit: Option<usize>) -> Result<Dataset> {
    match limit {
        Some(n) if n < ds.len() => {
            let idx: Vec<usize> = (0..n).collect();
            ds.subset(&idx, ds.name().to_string())
        }
        _ => Ok(ds),
    }
}

impl DataCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn task_data(&mut self, plan: &ExperimentPlan, name: &str, seed: u64) -> Result<TaskData> {
        let spec = SplitSpec {
            seed,
            validation_fraction: plan.validation_fraction,
            test_fraction: 0.1,
        };
        match plan.source(name)? {
            DatasetSource::Synthetic {
                task,
                n_classes,
                per_class,
            } => {
                let pool = make_synthetic_task(
                    plan.synthetic.data_seed.unwrap_or(seed),
                    task,
                    n_classes.unwrap_or(plan.synthetic.n_classes),
                    per_class.unwrap_or(plan.synthetic.per_class),
                )?;
                let mut data = TaskData::from_pool(&pool, &spec)?;
                data.name = name.to_string();
                Ok(data)
            }
            src @ (DatasetSource::Cifar { .. } | DatasetSource::Imgs { .. }) => {
                if !self.file_cache.contains_key(name) {
                    let pair = load_files(&src)?;
                    self.file_cache.insert(name.to_string(), pair);
                }
                let (train, test) = &self.file_cache[name];
                TaskData::from_train_test(name, train, test.clone(), &spec)
            }
        }
    }
}

fn load_files(src: &DatasetSource) -> Result<(Dataset, Dataset)> {
    match src {
        DatasetSource::Cifar {
            variant,
            dir,
            train_limit,
            test_limit,
        } => {
            if !dir.is_dir() {
                return Err(SenaError::NotFound(format!("CIFAR directory {}", dir.display())));
            }
            let train = load_cifar_split(dir, *variant, FileSplit::Train)?;
            let test = load_cifar_split(dir, *variant, FileSplit::Test)?;
            Ok((take_first(train, *train_limit)?, take_first(test, *test_limit)?))
        }
        DatasetSource::Imgs {
            train,
            test,
            train_limit,
            test_limit,
        } => {
            for p in [train, test] {
                if !p.exists() {
                    return Err(SenaError::NotFound(format!("{}", p.display())));
                }
            }
            Ok((
                take_first(load_raw_images(train)?, *train_limit)?,
                take_first(load_raw_images(test)?, *test_limit)?,
            ))
        }
        DatasetSource::Synthetic { .. } => unreachable!("synthetic sources are generated"),
    }
}

/// One evaluation of one task after one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub strategy: Strategy,
    pub seed: u64,
    /// 1-based index of the phase after which the evaluation ran.
    pub phase: usize,
    pub trained_task: String,
    pub task_id: String,
    /// Accuracy in `[0, 1]`.
    pub accuracy: f64,
    /// Training time of the phase; kept out of the metrics CSV.
    pub wallclock_s: f64,
}

impl MetricsRecord {
    pub fn role(&self) -> &'static str {
        if self.task_id == self.trained_task {
            "new"
        } else {
            "old"
        }
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6}",
            self.strategy,
            self.seed,
            self.phase,
            self.trained_task,
            self.task_id,
            self.role(),
            self.accuracy
        )
    }
}

/// A trained model after some phase, with everything needed to continue.
#[derive(Clone, Debug)]
pub struct PhaseState {
    pub seed: u64,
    pub phase: usize,
    pub model: MultiTaskModel,
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub state: PhaseState,
    pub records: Vec<MetricsRecord>,
    pub report: TrainReport,
}

/// Adds `name` to `model` under `strategy` and trains it with the plan's
/// settings. `Strategy::Isolated` is rejected; start a fresh model instead.
pub fn train_new_task(
    plan: &ExperimentPlan,
    strategy: Strategy,
    model: &mut MultiTaskModel,
    name: &str,
    data: &TaskData,
    rng: &mut Rng,
) -> Result<TrainReport> {
    let val = Some(&data.validation);
    match strategy {
        Strategy::Sena => {
            let source = match plan.sena.transfer_from {
                TransferSource::MostRecent => None,
                TransferSource::First => model.task_ids().first().map(|s| s.to_string()),
            };
            train_sena(
                model,
                name,
                &data.train,
                val,
                &plan.sgd,
                source.as_deref(),
                plan.sena.unfreeze_phase2,
                rng,
            )
        }
        Strategy::Finetune => train_finetune(model, name, &data.train, val, &plan.sgd, rng),
        Strategy::Lwf => train_lwf(model, name, &data.train, val, &plan.sgd, &plan.lwf, rng),
        Strategy::Isolated => Err(SenaError::InvalidArgument(
            "isolated training starts a new model; it cannot add a task".into(),
        )),
    }
}

/// Rng streams per (phase, purpose), so that phase `k` consumes the same
/// random numbers whatever strategy produced the model it starts from.
pub fn phase_rng(seed: u64, phase: usize) -> Rng {
    Rng::with_stream(seed, 1000 + phase as u64)
}

/// Runs the protocol for a plan, phase by phase.
pub struct Runner<'a> {
    plan: &'a ExperimentPlan,
    catalog: DataCatalog,
    data: HashMap<(String, u64), TaskData>,
}

impl<'a> Runner<'a> {
    pub fn new(plan: &'a ExperimentPlan) -> Result<Self> {
        plan.validate()?;
        Ok(Runner {
            plan,
            catalog: DataCatalog::new(),
            data: HashMap::new(),
        })
    }

    pub fn plan(&self) -> &ExperimentPlan {
        self.plan
    }

    pub fn task_data(&mut self, name: &str, seed: u64) -> Result<&TaskData> {
        let key = (name.to_string(), seed);
        if !self.data.contains_key(&key) {
            let d = self.catalog.task_data(self.plan, name, seed)?;
            self.data.insert(key.clone(), d);
        }
        Ok(&self.data[&key])
    }

    fn evaluate_all(
        &mut self,
        strategy: Strategy,
        seed: u64,
        phase: usize,
        trained: &str,
        model: &MultiTaskModel,
        wallclock_s: f64,
    ) -> Result<Vec<MetricsRecord>> {
        let mut out = Vec::new();
        for task in model.task_ids() {
            let bs = self.plan.eval_batch_size;
            let data = self.task_data(task, seed)?;
            let accuracy = evaluate(model, task, &data.test, bs)?;
            out.push(MetricsRecord {
                strategy,
                seed,
                phase,
                trained_task: trained.to_string(),
                task_id: task.to_string(),
                accuracy,
                wallclock_s,
            });
        }
        Ok(out)
    }

    /// Phase 1: a fresh network trained on task `index` of the sequence alone.
    pub fn isolated_phase(&mut self, seed: u64, index: usize, strategy: Strategy) -> Result<PhaseOutcome> {
        let plan = self.plan;
        let name = plan
            .task_sequence
            .get(index)
            .ok_or_else(|| SenaError::InvalidArgument(format!("no task at position {index}")))?
            .clone();
        let phase = index + 1;
        let mut rng = phase_rng(seed, phase);
        let data = self.task_data(&name, seed)?.clone();
        let start = Instant::now();
        let mut model =
            MultiTaskModel::build_isolated(plan.architecture.clone(), &name, data.n_classes(), &mut rng)?;
        let report = train_task(&mut model, &name, &data.train, Some(&data.validation), &plan.sgd, &mut rng)?;
        let wall = start.elapsed().as_secs_f64();
        let records = self.evaluate_all(strategy, seed, phase, &name, &model, wall)?;
        Ok(PhaseOutcome {
            state: PhaseState { seed, phase, model },
            records,
            report,
        })
    }

    /// Adds the next task of the sequence to `state.model` under `strategy`.
    pub fn add_task_phase(&mut self, state: PhaseState, strategy: Strategy) -> Result<PhaseOutcome> {
        let plan = self.plan;
        let PhaseState { seed, phase, mut model } = state;
        let index = phase;
        if strategy == Strategy::Isolated {
            return self.isolated_phase(seed, index, strategy);
        }
        let name = plan
            .task_sequence
            .get(index)
            .ok_or_else(|| SenaError::InvalidArgument(format!("no task at position {index}")))?
            .clone();
        let phase = index + 1;
        let mut rng = phase_rng(seed, phase);
        let data = self.task_data(&name, seed)?.clone();
        let start = Instant::now();
        let report = train_new_task(plan, strategy, &mut model, &name, &data, &mut rng)?;
        let wall = start.elapsed().as_secs_f64();
        let records = self.evaluate_all(strategy, seed, phase, &name, &model, wall)?;
        Ok(PhaseOutcome {
            state: PhaseState { seed, phase, model },
            records,
            report,
        })
    }

    /// Every phase of the plan for one seed, calling `on_phase` after each.
    pub fn run_seed(
        &mut self,
        seed: u64,
        mut on_phase: impl FnMut(&PhaseOutcome) -> Result<()>,
    ) -> Result<Vec<PhaseOutcome>> {
        let strategy = self.plan.strategy;
        let mut outcomes: Vec<PhaseOutcome> = Vec::new();
        let first = self.isolated_phase(seed, 0, strategy)?;
        on_phase(&first)?;
        outcomes.push(first);
        for _ in 1..self.plan.task_sequence.len() {
            let state = outcomes.last().expect("at least one phase").state.clone();
            let next = self.add_task_phase(state, strategy)?;
            on_phase(&next)?;
            outcomes.push(next);
        }
        Ok(outcomes)
    }
}

/// Everything a finished plan produced.
#[derive(Debug)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub reports: Vec<(u64, usize, TrainReport)>,
    pub output_dir: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    code_version: &'a str,
    config_hash: String,
    metrics_header: &'a str,
    plan: &'a ExperimentPlan,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| SenaError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| SenaError::io(path, e))
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Runs every seed of `plan`, writing metrics, logs and checkpoints to the
/// plan's output directory.
pub fn run_plan(plan: &ExperimentPlan) -> Result<RunResult> {
    plan.validate()?;
    let out = plan.output_dir.clone();
    create_dir(&out)?;
    let manifest = Manifest {
        code_version: env!("CARGO_PKG_VERSION"),
        config_hash: plan.config_hash(),
        metrics_header: METRICS_HEADER,
        plan,
    };
    write_file(
        &out.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )?;

    let mut runner = Runner::new(plan)?;
    let mut records = Vec::new();
    let mut reports = Vec::new();
    let mut timings = String::from(TIMINGS_HEADER) + "\n";
    let mut log = String::from(TRAINING_LOG_HEADER) + "\n";
    for &seed in &plan.seeds {
        let seed_dir = out.join(format!("seed{seed}"));
        if plan.save_checkpoints {
            create_dir(&seed_dir)?;
        }
        let outcomes = runner.run_seed(seed, |o| {
            log::info!(
                "{} seed {} phase {}: {}",
                plan.strategy,
                seed,
                o.state.phase,
                o.records
                    .iter()
                    .map(|r| format!("{}={:.4}", r.task_id, r.accuracy))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            if plan.save_checkpoints {
                checkpoint::save(&o.state.model, &seed_dir.join(format!("phase{}.sena", o.state.phase)))?;
            }
            Ok(())
        })?;
        for o in outcomes {
            let trained = &o.report.task_id;
            let _ = writeln!(
                timings,
                "{},{},{},{},{:.3}",
                plan.strategy, seed, o.state.phase, trained, o.report.wallclock_s
            );
            for e in &o.report.epochs {
                let _ = writeln!(
                    log,
                    "{},{},{},{},{},{:.6},{:.6},{}",
                    plan.strategy,
                    seed,
                    o.state.phase,
                    trained,
                    e.epoch,
                    e.train_loss,
                    e.train_accuracy,
                    fmt_opt(e.validation_accuracy)
                );
            }
            records.extend(o.records);
            reports.push((seed, o.state.phase, o.report));
        }
        // Rewrite after every seed so partial runs leave usable output.
        write_file(&out.join("metrics.csv"), &metrics_csv(&records))?;
    }
    write_file(&out.join("metrics.csv"), &metrics_csv(&records))?;
    write_file(&out.join("timings.csv"), &timings)?;
    write_file(&out.join("training_log.csv"), &log)?;
    Ok(RunResult {
        records,
        reports,
        output_dir: out,
    })
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Parses a metrics CSV written by [`run_plan`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| SenaError::io(path, e))?;
    parse_metrics(&text)
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| SenaError::format(0, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if headers != METRICS_HEADER {
        return Err(SenaError::format(0, format!("unexpected metrics header {headers:?}")));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let offset = e.position().map(|p| p.byte()).unwrap_or(0);
            SenaError::format(offset, e.to_string())
        })?;
        let offset = row.position().map(|p| p.byte()).unwrap_or(0);
        let bad = |what: &str| SenaError::format(offset, format!("bad {what} in metrics row"));
        out.push(MetricsRecord {
            strategy: row[0].parse().map_err(|_| bad("strategy"))?,
            seed: row[1].parse().map_err(|_| bad("seed"))?,
            phase: row[2].parse().map_err(|_| bad("phase"))?,
            trained_task: row[3].to_string(),
            task_id: row[4].to_string(),
            accuracy: row[6].parse().map_err(|_| bad("accuracy"))?,
            wallclock_s: 0.0,
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation of one (strategy, phase, task) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryCell {
    pub strategy: Strategy,
    pub phase: usize,
    pub trained_task: String,
    pub task_id: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator); 0 for a single value.
    pub std: f64,
}

impl SummaryCell {
    pub fn role(&self) -> &'static str {
        if self.task_id == self.trained_task {
            "new"
        } else {
            "old"
        }
    }
}

pub fn mean_and_sample_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

pub fn aggregate(records: &[MetricsRecord]) -> Vec<SummaryCell> {
    let mut groups: BTreeMap<(Strategy, usize, String, String), Vec<f64>> = BTreeMap::new();
    let mut order: Vec<(Strategy, usize, String, String)> = Vec::new();
    for r in records {
        let key = (r.strategy, r.phase, r.trained_task.clone(), r.task_id.clone());
        let entry = groups.entry(key.clone()).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        entry.push(r.accuracy);
    }
    order.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    order
        .into_iter()
        .filter_map(|key| {
            let values = &groups[&key];
            let (mean, std) = mean_and_sample_std(values)?;
            Some(SummaryCell {
                strategy: key.0,
                phase: key.1,
                trained_task: key.2,
                task_id: key.3,
                n: values.len(),
                mean,
                std,
            })
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "strategy,phase,trained_task,task_id,role,n,mean,std";

pub fn summary_csv(cells: &[SummaryCell]) -> String {
    let mut out = String::from(SUMMARY_HEADER) + "\n";
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6}",
            c.strategy,
            c.phase,
            c.trained_task,
            c.task_id,
            c.role(),
            c.n,
            c.mean,
            c.std
        );
    }
    out
}

fn pct(mean: f64, std: f64) -> String {
    format!("{:.2}({:.2})", mean * 100.0, std * 100.0)
}

/// Text table with one row per (phase, trained task) and, per strategy, the
/// new-task accuracy and the old-task accuracies as `mean(std)` in percent.
/// Cells without records are shown as `-`.
pub fn render_table(cells: &[SummaryCell]) -> String {
    let mut strategies: Vec<Strategy> = cells.iter().map(|c| c.strategy).collect();
    strategies.sort();
    strategies.dedup();
    let mut rows: Vec<(usize, String)> = cells.iter().map(|c| (c.phase, c.trained_task.clone())).collect();
    rows.sort();
    rows.dedup();

    let mut header = vec!["phase".to_string(), "old".to_string(), "new".to_string()];
    for s in &strategies {
        header.push(format!("{s} new"));
        header.push(format!("{s} old"));
    }
    let mut table = vec![header];
    for (phase, trained) in &rows {
        let old_tasks: Vec<String> = {
            let mut v: Vec<String> = cells
                .iter()
                .filter(|c| c.phase == *phase && &c.trained_task == trained && c.role() == "old")
                .map(|c| c.task_id.clone())
                .collect();
            v.dedup();
            v
        };
        let mut line = vec![
            phase.to_string(),
            if old_tasks.is_empty() {
                "-".into()
            } else {
                old_tasks.join(", ")
            },
            trained.clone(),
        ];
        for s in &strategies {
            let find = |task: &str| {
                cells
                    .iter()
                    .find(|c| c.strategy == *s && c.phase == *phase && &c.trained_task == trained && c.task_id == task)
            };
            line.push(find(trained).map(|c| pct(c.mean, c.std)).unwrap_or_else(|| "-".into()));
            let olds: Vec<String> = old_tasks
                .iter()
                .map(|t| find(t).map(|c| pct(c.mean, c.std)).unwrap_or_else(|| "-".into()))
                .collect();
            line.push(if olds.is_empty() { "-".into() } else { olds.join(", ") });
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|i| table.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-|-"));
            out.push('\n');
        }
    }
    out
}
