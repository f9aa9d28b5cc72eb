//! End-to-end experiments: configuration, dataset and schedule construction,
//! the round loop, evaluation and metrics files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::fed::{run_round, select_clients, Algorithm, FederationConfig, GlobalState};
use crate::net::NetworkSpec;
use crate::proto::Label;
use crate::seed::{derive_seed, tag};
use crate::stream::{
    build_round_plan, class_incremental_tasks, load_csv_dataset, make_synthetic_blobs, write_csv_dataset, Dataset,
    ScheduleMode, Split, StreamSchedule, TaskData, TaskSpec,
};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Gaussian blobs cut into class-incremental tasks.
    Synthetic {
        classes: usize,
        dims: usize,
        samples_per_class: usize,
        cluster_stddev: f64,
    },
    /// One train and one test CSV per task.
    Csv { train: Vec<PathBuf>, test: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleSpec {
    /// Last round of each task.
    Separate(Vec<usize>),
    /// `(start, end)` rounds of each task.
    Gradual(Vec<(usize, usize)>),
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<StreamSchedule> {
        match self {
            ScheduleSpec::Separate(b) => StreamSchedule::separate(b),
            ScheduleSpec::Gradual(d) => StreamSchedule::gradual(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    /// Number of tasks the synthetic classes are split into.
    pub tasks: usize,
    pub schedule: ScheduleSpec,
    pub hidden: Vec<usize>,
    /// Dirichlet concentration of the client partition.
    pub alpha: f64,
    /// Samples each client draws per round; 0 uses the whole shard.
    pub round_batch: usize,
    pub federation: FederationConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub checkpoints: bool,
    /// Posterior samples for predictions; 0 predicts with posterior means.
    pub eval_mc_samples: usize,
    /// Client training threads; 0 lets the pool decide, 1 runs inline.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                classes: 10,
                dims: 20,
                samples_per_class: 100,
                cluster_stddev: 1.0,
            },
            tasks: 2,
            schedule: ScheduleSpec::Separate(vec![15, 30]),
            hidden: vec![32],
            alpha: 0.5,
            round_batch: 0,
            federation: FederationConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            checkpoints: false,
            eval_mc_samples: 0,
            threads: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "algorithm",
    "seed",
    "out_dir",
    "checkpoints",
    "eval_mc_samples",
    "data",
    "classes",
    "dims",
    "samples_per_class",
    "cluster_stddev",
    "train_files",
    "test_files",
    "tasks",
    "schedule",
    "boundaries",
    "durations",
    "rounds",
    "hidden",
    "alpha",
    "round_batch",
    "clients",
    "participation",
    "snn_rounds",
    "sigma0",
    "local_epochs",
    "lr",
    "warmup_epochs",
    "warmup_lr",
    "mc_samples",
    "precision_floor",
    "minibatch_size",
];

struct Entries {
    origin: PathBuf,
    values: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if values
                .insert(key.to_string(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self {
            origin: origin.to_path_buf(),
            values,
        })
    }

    fn raw(&self, key: &str) -> Option<&(usize, String)> {
        self.values.get(key)
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|(line, v)| {
                v.parse::<T>().map_err(|e| Error::Parse {
                    path: self.origin.clone(),
                    line: *line,
                    message: format!("bad value `{v}` for `{key}`: {e}"),
                })
            })
            .transpose()
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|(line, v)| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>().map_err(|e| Error::Parse {
                            path: self.origin.clone(),
                            line: *line,
                            message: format!("bad list item `{s}` for `{key}`: {e}"),
                        })
                    })
                    .collect()
            })
            .transpose()
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected true or false, got `{other}`")),
    }
}

fn parse_duration(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once('-').ok_or_else(|| format!("expected start-end, got `{s}`"))?;
    let num = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
    Ok((num(a)?, num(b)?))
}

impl ExperimentConfig {
    /// Reads a `key = value` file. Data paths are taken relative to the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, path, base)
    }

    pub fn parse(text: &str, origin: &Path, base_dir: &Path) -> Result<Self> {
        let e = Entries::parse(text, origin)?;
        let mut c = ExperimentConfig::default();
        let f = &mut c.federation;

        if let Some((line, v)) = e.raw("algorithm") {
            f.algorithm = v.parse::<Algorithm>().map_err(|err| Error::Parse {
                path: origin.to_path_buf(),
                line: *line,
                message: err.to_string(),
            })?;
        }
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = e.get($key)? {
                    $field = v;
                }
            };
        }
        set!(f.num_clients, "clients");
        set!(f.participation_ratio, "participation");
        set!(f.snn_rounds, "snn_rounds");
        set!(f.sigma0, "sigma0");
        set!(f.local_epochs, "local_epochs");
        set!(f.lr, "lr");
        set!(f.warmup_epochs, "warmup_epochs");
        set!(f.warmup_lr, "warmup_lr");
        set!(f.mc_samples, "mc_samples");
        set!(f.precision_floor, "precision_floor");
        set!(f.minibatch_size, "minibatch_size");
        set!(c.seed, "seed");
        set!(c.eval_mc_samples, "eval_mc_samples");
        set!(c.tasks, "tasks");
        set!(c.alpha, "alpha");
        set!(c.round_batch, "round_batch");
        if let Some(v) = e.get::<String>("out_dir")? {
            c.out_dir = PathBuf::from(v);
        }
        if let Some((line, v)) = e.raw("checkpoints") {
            c.checkpoints = parse_bool(v).map_err(|message| Error::Parse {
                path: origin.to_path_buf(),
                line: *line,
                message,
            })?;
        }
        if let Some(h) = e.list::<usize>("hidden")? {
            c.hidden = h;
        }

        let data = e.get::<String>("data")?.unwrap_or_else(|| "synthetic".into());
        let synthetic_keys = ["classes", "dims", "samples_per_class", "cluster_stddev"];
        let csv_keys = ["train_files", "test_files"];
        let clash = |keys: &[&str], mode: &str| -> Result<()> {
            match keys.iter().find(|k| e.raw(k).is_some()) {
                Some(k) => Err(Error::Config(format!("`{k}` does not apply to data = {mode}"))),
                None => Ok(()),
            }
        };
        c.source = match data.as_str() {
            "synthetic" => {
                clash(&csv_keys, "synthetic")?;
                let DataSource::Synthetic {
                    mut classes,
                    mut dims,
                    mut samples_per_class,
                    mut cluster_stddev,
                } = c.source
                else {
                    unreachable!()
                };
                set!(classes, "classes");
                set!(dims, "dims");
                set!(samples_per_class, "samples_per_class");
                set!(cluster_stddev, "cluster_stddev");
                DataSource::Synthetic {
                    classes,
                    dims,
                    samples_per_class,
                    cluster_stddev,
                }
            }
            "csv" => {
                clash(&synthetic_keys, "csv")?;
                if e.raw("tasks").is_some() {
                    return Err(Error::Config("`tasks` does not apply to data = csv".into()));
                }
                let files = |key: &str| -> Result<Vec<PathBuf>> {
                    let list = e
                        .list::<String>(key)?
                        .ok_or_else(|| Error::Config(format!("data = csv needs `{key}`")))?;
                    list.into_iter()
                        .map(|p| {
                            let p = base_dir.join(p);
                            if p.is_file() {
                                Ok(p)
                            } else {
                                Err(Error::Config(format!("data file {} does not exist", p.display())))
                            }
                        })
                        .collect()
                };
                let (train, test) = (files("train_files")?, files("test_files")?);
                if train.len() != test.len() {
                    return Err(Error::Config(format!(
                        "{} train files but {} test files",
                        train.len(),
                        test.len()
                    )));
                }
                c.tasks = train.len();
                DataSource::Csv { train, test }
            }
            other => return Err(Error::Config(format!("unknown data source `{other}` (synthetic|csv)"))),
        };

        let rounds = e.get::<usize>("rounds")?;
        let mode = e.get::<String>("schedule")?.unwrap_or_else(|| "separate".into());
        c.schedule = match mode.as_str() {
            "separate" => {
                if e.raw("durations").is_some() {
                    return Err(Error::Config("`durations` needs schedule = gradual".into()));
                }
                match e.list::<usize>("boundaries")? {
                    Some(b) => ScheduleSpec::Separate(b),
                    None => {
                        let total = rounds.unwrap_or(c.federation.total_rounds);
                        if c.tasks == 0 || total < c.tasks {
                            return Err(Error::Config(format!("cannot spread {total} rounds over {} tasks", c.tasks)));
                        }
                        ScheduleSpec::Separate((1..=c.tasks).map(|t| t * total / c.tasks).collect())
                    }
                }
            }
            "gradual" => {
                if e.raw("boundaries").is_some() {
                    return Err(Error::Config("`boundaries` needs schedule = separate".into()));
                }
                let (line, v) = e
                    .raw("durations")
                    .ok_or_else(|| Error::Config("schedule = gradual needs `durations`".into()))?;
                let durations = v
                    .split(',')
                    .map(|s| parse_duration(s.trim()))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|message| Error::Parse {
                        path: origin.to_path_buf(),
                        line: *line,
                        message,
                    })?;
                ScheduleSpec::Gradual(durations)
            }
            other => return Err(Error::Config(format!("unknown schedule `{other}` (separate|gradual)"))),
        };
        let schedule = c.schedule.build()?;
        if let Some(r) = rounds {
            if r != schedule.total_rounds() {
                return Err(Error::Config(format!(
                    "rounds = {r} but the schedule covers {} rounds",
                    schedule.total_rounds()
                )));
            }
        }
        c.federation.total_rounds = schedule.total_rounds();
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        let schedule = self.schedule.build()?;
        if schedule.num_tasks() != self.tasks {
            return Err(Error::Config(format!(
                "schedule has {} tasks but the data has {}",
                schedule.num_tasks(),
                self.tasks
            )));
        }
        if schedule.total_rounds() != self.federation.total_rounds {
            return Err(Error::Config(format!(
                "total rounds {} disagree with the schedule's {}",
                self.federation.total_rounds,
                schedule.total_rounds()
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if let DataSource::Synthetic {
            classes,
            dims,
            samples_per_class,
            cluster_stddev,
        } = &self.source
        {
            if *classes == 0 || *dims == 0 || *samples_per_class == 0 {
                return Err(Error::Config("classes, dims and samples_per_class must be >= 1".into()));
            }
            if !(*cluster_stddev >= 0.0 && cluster_stddev.is_finite()) {
                return Err(Error::Config(format!("cluster_stddev must be >= 0, got {cluster_stddev}")));
            }
            if self.tasks == 0 || self.tasks > *classes {
                return Err(Error::Config(format!("cannot split {classes} classes into {} tasks", self.tasks)));
            }
        }
        Ok(())
    }

    /// The configuration with every key spelled out, in a form `parse`
    /// reads back.
    pub fn to_config_string(&self) -> String {
        let f = &self.federation;
        let join = |v: &[String]| v.join(", ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("algorithm", f.algorithm.to_string());
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("checkpoints", self.checkpoints.to_string());
        kv("eval_mc_samples", self.eval_mc_samples.to_string());
        match &self.source {
            DataSource::Synthetic {
                classes,
                dims,
                samples_per_class,
                cluster_stddev,
            } => {
                kv("data", "synthetic".into());
                kv("classes", classes.to_string());
                kv("dims", dims.to_string());
                kv("samples_per_class", samples_per_class.to_string());
                kv("cluster_stddev", format!("{cluster_stddev:?}"));
                kv("tasks", self.tasks.to_string());
            }
            DataSource::Csv { train, test } => {
                let paths = |v: &[PathBuf]| join(&v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>());
                kv("data", "csv".into());
                kv("train_files", paths(train));
                kv("test_files", paths(test));
            }
        }
        match &self.schedule {
            ScheduleSpec::Separate(b) => {
                kv("schedule", "separate".into());
                kv("boundaries", join(&b.iter().map(|x| x.to_string()).collect::<Vec<_>>()));
            }
            ScheduleSpec::Gradual(d) => {
                kv("schedule", "gradual".into());
                kv("durations", join(&d.iter().map(|(a, b)| format!("{a}-{b}")).collect::<Vec<_>>()));
            }
        }
        kv("rounds", f.total_rounds.to_string());
        kv("hidden", join(&self.hidden.iter().map(|x| x.to_string()).collect::<Vec<_>>()));
        kv("alpha", format!("{:?}", self.alpha));
        kv("round_batch", self.round_batch.to_string());
        kv("clients", f.num_clients.to_string());
        kv("participation", format!("{:?}", f.participation_ratio));
        kv("snn_rounds", f.snn_rounds.to_string());
        kv("sigma0", format!("{:?}", f.sigma0));
        kv("local_epochs", f.local_epochs.to_string());
        kv("lr", format!("{:?}", f.lr));
        kv("warmup_epochs", f.warmup_epochs.to_string());
        kv("warmup_lr", format!("{:?}", f.warmup_lr));
        kv("mc_samples", f.mc_samples.to_string());
        kv("precision_floor", format!("{:?}", f.precision_floor));
        kv("minibatch_size", f.minibatch_size.to_string());
        s
    }
}

/// Datasets, schedule and network shape of a configured experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub schedule: StreamSchedule,
    pub tasks: Vec<TaskData>,
    pub extractor: NetworkSpec,
}

fn task_splits(config: &ExperimentConfig) -> Result<Vec<(TaskSpec, Dataset, Dataset)>> {
    match &config.source {
        DataSource::Synthetic {
            classes,
            dims,
            samples_per_class,
            cluster_stddev,
        } => {
            let blobs = make_synthetic_blobs(
                *classes,
                *dims,
                *samples_per_class,
                *cluster_stddev,
                derive_seed(config.seed, &[tag::DATA]),
            )?;
            let labels: Vec<Label> = (0..*classes).collect();
            Ok(class_incremental_tasks(&labels, config.tasks)?
                .into_iter()
                .map(|t| {
                    let set: BTreeSet<Label> = t.classes.iter().copied().collect();
                    let (train, test) = (blobs.train.filter_classes(&set), blobs.test.filter_classes(&set));
                    (t, train, test)
                })
                .collect())
        }
        DataSource::Csv { train, test } => train
            .iter()
            .zip(test)
            .enumerate()
            .map(|(id, (tr, te))| {
                let train = load_csv_dataset(tr, Split::Train)?;
                let test = load_csv_dataset(te, Split::Test)?;
                if train.width() != test.width() {
                    return Err(Error::Schema {
                        path: te.clone(),
                        message: format!("{} features, train file has {}", test.width(), train.width()),
                    });
                }
                let spec = TaskSpec {
                    id,
                    classes: train.classes().to_vec(),
                };
                Ok((spec, train, test))
            })
            .collect(),
    }
}

/// Loads or generates the data, partitions every task over the clients and
/// builds the schedule.
pub fn build_experiment(config: &ExperimentConfig) -> Result<Experiment> {
    config.validate()?;
    let schedule = config.schedule.build()?;
    let splits = task_splits(config)?;
    let width = splits[0].1.width();
    if let Some((spec, d, _)) = splits.iter().find(|(_, d, _)| d.width() != width) {
        return Err(Error::Config(format!(
            "task {} has {} features, task 0 has {width}",
            spec.id,
            d.width()
        )));
    }
    let tasks = splits
        .into_iter()
        .map(|(spec, train, test)| {
            let seed = derive_seed(config.seed, &[tag::PARTITION, spec.id as u64]);
            TaskData::partitioned(spec, train, test, config.federation.num_clients, config.alpha, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Experiment {
        schedule,
        tasks,
        extractor: NetworkSpec::mlp(width, &config.hidden)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    AvgAcc,
    FonAcc,
    TaskAcc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::AvgAcc => "avg_acc",
            Metric::FonAcc => "fon_acc",
            Metric::TaskAcc => "task_acc",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "avg_acc" => Ok(Metric::AvgAcc),
            "fon_acc" => Ok(Metric::FonAcc),
            "task_acc" => Ok(Metric::TaskAcc),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// One accuracy value in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: usize,
    pub metric: Metric,
    pub task: Option<usize>,
    pub value: f64,
}

impl MetricRecord {
    fn key(&self) -> (usize, Metric, Option<usize>) {
        (self.round, self.metric, self.task)
    }
}

/// Percent of `test` classified correctly by `state`.
pub fn accuracy(state: &GlobalState, test: &Dataset, mc_samples: usize, seed: u64) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let predicted = state.predict(test.features().view(), mc_samples, seed)?;
    let hits = predicted.iter().zip(test.labels()).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / test.len() as f64)
}

/// Accuracy on every seen task, their average, and the mixture-weighted
/// accuracy on the current data distribution.
pub fn evaluate(
    state: &GlobalState,
    tests: &[&Dataset],
    seen: &[usize],
    mixture: &BTreeMap<usize, f64>,
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    if state.library.is_empty() {
        return Err(Error::Validation("cannot evaluate with an empty prototype library".into()));
    }
    let round = state.round;
    let mut acc = BTreeMap::new();
    for &t in seen.iter().chain(mixture.keys()) {
        if acc.contains_key(&t) {
            continue;
        }
        let test = tests
            .get(t)
            .ok_or_else(|| Error::Config(format!("no test set for task {t}")))?;
        acc.insert(t, accuracy(state, test, mc_samples, derive_seed(seed, &[t as u64]))?);
    }
    let mut out: Vec<MetricRecord> = seen
        .iter()
        .map(|&t| MetricRecord {
            round,
            metric: Metric::TaskAcc,
            task: Some(t),
            value: acc[&t],
        })
        .collect();
    if !seen.is_empty() {
        out.push(MetricRecord {
            round,
            metric: Metric::AvgAcc,
            task: None,
            value: seen.iter().map(|t| acc[t]).sum::<f64>() / seen.len() as f64,
        });
    }
    if !mixture.is_empty() {
        out.push(MetricRecord {
            round,
            metric: Metric::FonAcc,
            task: None,
            value: mixture.iter().map(|(t, p)| p * acc[t]).sum::<f64>().clamp(0.0, 100.0),
        });
    }
    Ok(out)
}

fn sorted(records: &[MetricRecord]) -> Vec<MetricRecord> {
    let mut v = records.to_vec();
    v.sort_by_key(|r| r.key());
    v
}

pub fn metrics_csv_string(records: &[MetricRecord]) -> String {
    let mut s = String::from("round,metric,task,value\n");
    for r in sorted(records) {
        let task = r.task.map_or_else(|| "-".to_string(), |t| t.to_string());
        let _ = writeln!(s, "{},{},{},{:.4}", r.round, r.metric.name(), task, r.value);
    }
    s
}

pub fn emit_metrics_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv_string(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "round,metric,task,value")) => {}
        _ => {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: "expected header `round,metric,task,value`".into(),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let cols: Vec<&str> = line.split(',').collect();
            let [round, metric, task, value] = cols[..] else {
                return Err(err(format!("expected 4 columns, got {}", cols.len())));
            };
            Ok(MetricRecord {
                round: round.parse().map_err(|e| err(format!("round: {e}")))?,
                metric: metric.parse().map_err(err)?,
                task: match task {
                    "-" => None,
                    t => Some(t.parse().map_err(|e| err(format!("task: {e}")))?),
                },
                value: value.parse().map_err(|e| err(format!("value: {e}")))?,
            })
        })
        .collect()
}

/// `task_acc` of `task` at `round`, if recorded.
pub fn task_accuracy(records: &[MetricRecord], round: usize, task: usize) -> Option<f64> {
    records
        .iter()
        .find(|r| r.round == round && r.metric == Metric::TaskAcc && r.task == Some(task))
        .map(|r| r.value)
}

/// Accuracy of each task at the last round of its interval. Not defined
/// for gradual schedules.
pub fn at_task_switch(records: &[MetricRecord], schedule: &StreamSchedule) -> Option<BTreeMap<usize, f64>> {
    if schedule.mode() == ScheduleMode::Gradual {
        return None;
    }
    Some(
        schedule
            .intervals()
            .iter()
            .filter_map(|iv| task_accuracy(records, iv.end, iv.task).map(|a| (iv.task, a)))
            .collect(),
    )
}

/// Accuracy of each task at `final_round`.
pub fn at_final(records: &[MetricRecord], final_round: usize) -> BTreeMap<usize, f64> {
    records
        .iter()
        .filter(|r| r.round == final_round && r.metric == Metric::TaskAcc)
        .filter_map(|r| r.task.map(|t| (t, r.value)))
        .collect()
}

fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads == 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    pub state: GlobalState,
    pub schedule: StreamSchedule,
}

/// Runs every round and evaluates after each one, calling `after_round`
/// with the new state.
pub fn run_rounds(
    config: &ExperimentConfig,
    mut after_round: impl FnMut(&GlobalState) -> Result<()>,
) -> Result<RunOutput> {
    let exp = build_experiment(config)?;
    let fed = &config.federation;
    let pool = thread_pool(config.threads)?;
    let tests: Vec<&Dataset> = exp.tasks.iter().map(|t| &t.test).collect();
    let mut state = GlobalState::initial(exp.extractor.clone(), fed, config.seed)?;
    let mut records = Vec::new();
    for round in 1..=exp.schedule.total_rounds() {
        let selected = select_clients(round, fed.num_clients, fed.participation_ratio, config.seed);
        let plan = build_round_plan(
            &exp.schedule,
            &exp.tasks,
            round,
            &selected,
            config.round_batch,
            derive_seed(config.seed, &[tag::PLAN]),
        )
        .map_err(|e| e.at_stage(round, "round planning"))?;
        state = run_round(&state, &plan, fed, config.seed, pool.as_ref())?.state;
        if !state.library.is_empty() {
            let seen = exp.schedule.seen_tasks(round);
            let eval_seed = derive_seed(config.seed, &[tag::EVAL, round as u64]);
            records.extend(
                evaluate(&state, &tests, &seen, &plan.mixture, config.eval_mc_samples, eval_seed)
                    .map_err(|e| e.at_stage(round, "evaluation"))?,
            );
        }
        after_round(&state)?;
    }
    Ok(RunOutput {
        records: sorted(&records),
        state,
        schedule: exp.schedule,
    })
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";

/// Runs the experiment and writes `metrics.csv`, the resolved configuration
/// and, if enabled, one checkpoint per round into `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    let out = &config.out_dir;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(if config.checkpoints { &ckpt_dir } else { out }).map_err(|e| Error::io(out, e))?;
    let resolved = out.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&resolved, config.to_config_string()).map_err(|e| Error::io(&resolved, e))?;
    let output = run_rounds(config, |state| {
        if config.checkpoints {
            save_checkpoint(state, &checkpoint_path(&ckpt_dir, state.round))
                .map_err(|e| e.at_stage(state.round, "checkpoint"))?;
        }
        Ok(())
    })?;
    emit_metrics_csv(&output.records, &out.join(METRICS_FILE))?;
    Ok(output)
}

pub fn checkpoint_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round-{round:04}.ckpt"))
}

/// Evaluates a stored state on the configured test sets at its round.
pub fn evaluate_checkpoint(config: &ExperimentConfig, state: &GlobalState) -> Result<Vec<MetricRecord>> {
    let exp = build_experiment(config)?;
    if state.extractor_spec != exp.extractor {
        return Err(Error::Config("checkpoint network does not match the configured data and hidden widths".into()));
    }
    let round = state.round;
    if round == 0 || round > exp.schedule.total_rounds() {
        return Err(Error::Config(format!(
            "checkpoint round {round} is outside the schedule's 1..={}",
            exp.schedule.total_rounds()
        )));
    }
    let tests: Vec<&Dataset> = exp.tasks.iter().map(|t| &t.test).collect();
    let mixture = exp.schedule.task_proportions(round)?;
    let seed = derive_seed(config.seed, &[tag::EVAL, round as u64]);
    evaluate(
        state,
        &tests,
        &exp.schedule.seen_tasks(round),
        &mixture,
        config.eval_mc_samples,
        seed,
    )
    .map(|r| sorted(&r))
}

/// Writes each synthetic task's train and test split as CSV under
/// `out_dir/data` and returns the file paths.
pub fn generate_data(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    if !matches!(config.source, DataSource::Synthetic { .. }) {
        return Err(Error::Config("gen-data needs data = synthetic".into()));
    }
    let dir = config.out_dir.join("data");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths = Vec::new();
    for (spec, train, test) in task_splits(config)? {
        for (split, data) in [("train", train), ("test", test)] {
            let path = dir.join(format!("task{}_{split}.csv", spec.id));
            write_csv_dataset(&data, &path)?;
            paths.push(path);
        }
    }
    Ok(paths)
}
