//! Data streams for federated continual learning: datasets, non-IID client
//! partitions and the round-by-round task schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Batch;
use crate::proto::Label;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<Label>,
    classes: Vec<Label>,
    split: Split,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<Label>, split: Split) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::dims("dataset labels", features.nrows(), labels.len()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("dataset features must be finite".into()));
        }
        let classes: BTreeSet<Label> = labels.iter().copied().collect();
        Ok(Self {
            features,
            labels,
            classes: classes.into_iter().collect(),
            split,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn classes(&self) -> &[Label] {
        &self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` as a new dataset.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let labels: Vec<Label> = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.features.select(Axis(0), indices), labels, self.split)
            .expect("selection of a valid dataset")
    }

    /// The samples whose label is in `classes`, in original order.
    pub fn filter_classes(&self, classes: &BTreeSet<Label>) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.select(&idx)
    }

    /// Rows `indices` as a training batch carrying the raw class labels.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch::new(
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
        .expect("selection of a valid dataset")
    }

    /// Concatenates datasets of equal width.
    pub fn concat(parts: &[&Dataset], split: Split) -> Result<Dataset> {
        let width = parts.first().map_or(0, |d| d.width());
        if let Some(d) = parts.iter().find(|d| d.width() != width) {
            return Err(Error::dims("dataset width", width, d.width()));
        }
        let views: Vec<_> = parts.iter().map(|d| d.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .unwrap_or_else(|_| Array2::zeros((0, width)));
        let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
        Dataset::new(features, labels, split)
    }
}

/// Train and test halves of one data source.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
}

/// Gaussian blobs around one uniformly drawn centre per class, split 80/20
/// per class into train and test.
pub fn make_synthetic_blobs(
    num_classes: usize,
    dims: usize,
    samples_per_class: usize,
    cluster_stddev: f64,
    seed: u64,
) -> Result<SplitDataset> {
    if num_classes == 0 || dims == 0 || samples_per_class == 0 {
        return Err(Error::Validation("blob counts must all be at least 1".into()));
    }
    if !(cluster_stddev >= 0.0 && cluster_stddev.is_finite()) {
        return Err(Error::Validation(format!("cluster stddev must be >= 0, got {cluster_stddev}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = ((0.8 * samples_per_class as f64).round() as usize).max(1);
    let (mut train_rows, mut train_labels) = (Vec::new(), Vec::new());
    let (mut test_rows, mut test_labels) = (Vec::new(), Vec::new());
    for class in 0..num_classes {
        let center: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..=1.0)).collect();
        for k in 0..samples_per_class {
            let (rows, labels) = if k < n_train {
                (&mut train_rows, &mut train_labels)
            } else {
                (&mut test_rows, &mut test_labels)
            };
            for c in &center {
                let e: f64 = rng.sample(StandardNormal);
                rows.push(c + cluster_stddev * e);
            }
            labels.push(class);
        }
    }
    let to_matrix = |rows: Vec<f64>| Array2::from_shape_vec((rows.len() / dims, dims), rows).expect("row-major blobs");
    Ok(SplitDataset {
        train: Dataset::new(to_matrix(train_rows), train_labels, Split::Train)?,
        test: Dataset::new(to_matrix(test_rows), test_labels, Split::Test)?,
    })
}

/// Splits `total` into integer parts proportional to `weights`; leftover units
/// go to the largest fractional remainders, lower index first on ties.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        parts[i] += 1;
    }
    parts
}

/// Per class, draws client shares from a symmetric Dirichlet(`alpha`) and
/// deals that class's samples out accordingly. Returned index sets are sorted
/// and partition the dataset.
pub fn dirichlet_partition(
    dataset: &Dataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if num_clients == 0 {
        return Err(Error::Validation("need at least one client".into()));
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|_| Error::Validation(format!("dirichlet alpha must be > 0, got {alpha}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shards = vec![Vec::new(); num_clients];
    for &class in dataset.classes() {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        members.shuffle(&mut rng);
        let mut shares: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        if shares.iter().sum::<f64>() <= 0.0 {
            // Every gamma draw underflowed: the small-alpha limit puts the
            // whole class on one client.
            shares.iter_mut().for_each(|s| *s = 0.0);
            shares[rng.random_range(0..num_clients)] = 1.0;
        }
        let counts = largest_remainder(&shares, members.len());
        let mut rest = members.as_slice();
        for (shard, n) in shards.iter_mut().zip(counts) {
            let (take, tail) = rest.split_at(n);
            shard.extend_from_slice(take);
            rest = tail;
        }
    }
    shards.iter_mut().for_each(|s| s.sort_unstable());
    Ok(shards)
}

/// Shannon entropy (nats) of the label histogram of `indices`.
pub fn label_entropy(dataset: &Dataset, indices: &[usize]) -> f64 {
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    for &i in indices {
        *counts.entry(dataset.labels[i]).or_default() += 1;
    }
    let n = indices.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mean label entropy over the non-empty shards.
pub fn mean_label_entropy(dataset: &Dataset, shards: &[Vec<usize>]) -> f64 {
    let nonempty: Vec<&Vec<usize>> = shards.iter().filter(|s| !s.is_empty()).collect();
    if nonempty.is_empty() {
        return 0.0;
    }
    nonempty.iter().map(|s| label_entropy(dataset, s)).sum::<f64>() / nonempty.len() as f64
}

/// One task of the stream: the classes it draws from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub classes: Vec<Label>,
}

/// Cuts `classes` into `num_tasks` consecutive groups of near-equal size.
pub fn class_incremental_tasks(classes: &[Label], num_tasks: usize) -> Result<Vec<TaskSpec>> {
    if num_tasks == 0 || num_tasks > classes.len() {
        return Err(Error::Config(format!(
            "cannot split {} classes into {num_tasks} tasks",
            classes.len()
        )));
    }
    let sizes = largest_remainder(&vec![1.0; num_tasks], classes.len());
    let mut rest = classes;
    Ok(sizes
        .into_iter()
        .enumerate()
        .map(|(id, n)| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            TaskSpec {
                id,
                classes: head.to_vec(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Separate,
    Gradual,
}

/// Inclusive round interval during which a task contributes data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInterval {
    pub task: usize,
    pub start: usize,
    pub end: usize,
}

/// When each task is live, over rounds `1..=total_rounds`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSchedule {
    intervals: Vec<TaskInterval>,
    mode: ScheduleMode,
    total_rounds: usize,
}

impl StreamSchedule {
    /// Back-to-back tasks; task `i` ends at round `boundaries[i]`.
    pub fn separate(boundaries: &[usize]) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(Error::Config("schedule needs at least one task".into()));
        }
        let mut start = 1;
        let mut intervals = Vec::with_capacity(boundaries.len());
        for (task, &end) in boundaries.iter().enumerate() {
            if end < start {
                return Err(Error::Config(format!(
                    "task boundaries must be strictly increasing and >= 1, got {boundaries:?}"
                )));
            }
            intervals.push(TaskInterval { task, start, end });
            start = end + 1;
        }
        Ok(Self {
            total_rounds: start - 1,
            intervals,
            mode: ScheduleMode::Separate,
        })
    }

    /// Overlapping task durations `(start, end)`. Neighbours may overlap and
    /// crossfade linearly over the overlap; no round may be left uncovered and
    /// non-neighbouring tasks may not overlap.
    pub fn gradual(durations: &[(usize, usize)]) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::Config("schedule needs at least one task".into()));
        }
        let bad = |msg: &str| Err(Error::Config(format!("gradual durations {durations:?}: {msg}")));
        if durations[0].0 > 1 {
            return bad("the first task must start at round 0 or 1");
        }
        for (i, &(s, e)) in durations.iter().enumerate() {
            if e < s.max(1) {
                return bad("every task must end at or after its start and at round >= 1");
            }
            if i > 0 {
                let (ps, pe) = durations[i - 1];
                if s <= ps || e <= pe {
                    return bad("tasks must start and end in increasing order");
                }
                if s > pe + 1 {
                    return bad("consecutive tasks leave a gap");
                }
            }
            if i >= 2 && s <= durations[i - 2].1 {
                return bad("non-consecutive tasks overlap");
            }
        }
        let intervals = durations
            .iter()
            .enumerate()
            .map(|(task, &(start, end))| TaskInterval { task, start, end })
            .collect();
        Ok(Self {
            intervals,
            mode: ScheduleMode::Gradual,
            total_rounds: durations[durations.len() - 1].1,
        })
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn total_rounds(&self) -> usize {
        self.total_rounds
    }

    pub fn intervals(&self) -> &[TaskInterval] {
        &self.intervals
    }

    pub fn num_tasks(&self) -> usize {
        self.intervals.len()
    }

    /// Share of the global data each task contributes at `round`; zero shares
    /// are omitted.
    pub fn task_proportions(&self, round: usize) -> Result<BTreeMap<usize, f64>> {
        if round == 0 || round > self.total_rounds {
            return Err(Error::Validation(format!(
                "round {round} outside 1..={}",
                self.total_rounds
            )));
        }
        let live: Vec<&TaskInterval> = self
            .intervals
            .iter()
            .filter(|iv| iv.start <= round && round <= iv.end)
            .collect();
        let mut out = BTreeMap::new();
        match live.as_slice() {
            [only] => {
                out.insert(only.task, 1.0);
            }
            [outgoing, incoming] => {
                let (s, e) = (incoming.start, outgoing.end);
                let (out_share, in_share) = if e == s {
                    (0.5, 0.5)
                } else {
                    let span = (e - s) as f64;
                    let out_share = (e - round) as f64 / span;
                    (out_share, 1.0 - out_share)
                };
                if out_share > 0.0 {
                    out.insert(outgoing.task, out_share);
                }
                if in_share > 0.0 {
                    out.insert(incoming.task, in_share);
                }
            }
            _ => unreachable!("schedule validation guarantees one or two live tasks"),
        }
        Ok(out)
    }

    /// First round at which `task` has a positive share.
    pub fn first_active_round(&self, task: usize) -> Option<usize> {
        (1..=self.total_rounds).find(|&r| {
            self.task_proportions(r)
                .map(|p| p.contains_key(&task))
                .unwrap_or(false)
        })
    }

    /// Last round of `task`'s interval.
    pub fn end_round(&self, task: usize) -> Option<usize> {
        self.intervals.get(task).map(|iv| iv.end)
    }

    /// Tasks that have contributed data at some round `<= round`.
    pub fn seen_tasks(&self, round: usize) -> Vec<usize> {
        (0..self.num_tasks())
            .filter(|&t| self.first_active_round(t).is_some_and(|r| r <= round))
            .collect()
    }
}

/// A task's data and its partition across clients.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub test: Dataset,
    /// `shards[client]` indexes rows of `train`.
    pub shards: Vec<Vec<usize>>,
}

impl TaskData {
    /// Partitions `train` over `num_clients` with a Dirichlet draw.
    pub fn partitioned(
        spec: TaskSpec,
        train: Dataset,
        test: Dataset,
        num_clients: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config(format!("task {} has no training samples", spec.id)));
        }
        let shards = dirichlet_partition(&train, num_clients, alpha, seed)?;
        Ok(Self {
            spec,
            train,
            test,
            shards,
        })
    }
}

/// One selected client's data for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client: usize,
    pub task: usize,
    /// Labels are dataset class labels, not classifier positions.
    pub batch: Batch,
}

/// Everything the selected clients train on in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round: usize,
    pub clients: Vec<ClientData>,
    /// Task shares of the global distribution this round.
    pub mixture: BTreeMap<usize, f64>,
}

/// Assigns the selected clients to tasks in proportion to the schedule and
/// draws each one a batch of at most `batch_size` samples (`0` = the whole
/// shard) from its shard of that task. Clients with an empty shard sit the
/// round out.
pub fn build_round_plan(
    schedule: &StreamSchedule,
    tasks: &[TaskData],
    round: usize,
    selected_clients: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<RoundPlan> {
    if selected_clients.is_empty() {
        return Err(Error::Validation("no clients selected".into()));
    }
    if tasks.len() != schedule.num_tasks() {
        return Err(Error::Config(format!(
            "schedule has {} tasks but {} task datasets were given",
            schedule.num_tasks(),
            tasks.len()
        )));
    }
    let mixture = schedule.task_proportions(round)?;
    let mut clients: Vec<usize> = selected_clients.to_vec();
    clients.sort_unstable();
    clients.dedup();

    let live: Vec<usize> = mixture.keys().copied().collect();
    let shares: Vec<f64> = mixture.values().copied().collect();
    let per_task = largest_remainder(&shares, clients.len());

    let mut plan = Vec::with_capacity(clients.len());
    let mut next = clients.iter();
    for (&task, n) in live.iter().zip(per_task) {
        let data = &tasks[task];
        if data.train.is_empty() {
            return Err(Error::Config(format!("task {task} has no remaining samples")));
        }
        for &client in next.by_ref().take(n) {
            let shard = data.shards.get(client).ok_or_else(|| {
                Error::Config(format!("client {client} has no shard for task {task}"))
            })?;
            if shard.is_empty() {
                continue;
            }
            let take = if batch_size == 0 { shard.len() } else { batch_size.min(shard.len()) };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[round as u64, client as u64]));
            let picked: Vec<usize> = rand::seq::index::sample(&mut rng, shard.len(), take)
                .into_iter()
                .map(|i| shard[i])
                .collect();
            plan.push(ClientData {
                client,
                task,
                batch: data.train.batch(&picked),
            });
        }
    }
    Ok(RoundPlan {
        round,
        clients: plan,
        mixture,
    })
}

/// Reads a `label,f1,...,fN` CSV file.
pub fn load_csv_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let schema = |message: String| Error::Schema {
        path: path.to_path_buf(),
        message,
    };
    let header = reader
        .headers()
        .map_err(|e| schema(format!("unreadable header: {e}")))?
        .clone();
    if header.is_empty() || &header[0] != "label" || header.len() < 2 {
        return Err(schema("header must be `label,f1,...,fN`".into()));
    }
    let width = header.len() - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() != width + 1 {
            return Err(schema(format!(
                "line {line} has {} fields, expected {}",
                record.len(),
                width + 1
            )));
        }
        let label: Label = record[0]
            .parse()
            .map_err(|_| parse_err(format!("label `{}` is not a nonnegative integer", &record[0])))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("feature `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("feature `{field}` is not finite")));
            }
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(schema("file has no samples".into()));
    }
    let features = Array2::from_shape_vec((labels.len(), width), values).expect("rows checked");
    Dataset::new(features, labels, split)
}

/// Writes `dataset` in the format [`load_csv_dataset`] reads. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_csv_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("label");
    for i in 1..=dataset.width() {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for (row, label) in dataset.features.outer_iter().zip(&dataset.labels) {
        out.push_str(&label.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
