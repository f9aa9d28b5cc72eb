//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use fedvb_core::experiment::{at_final, metrics_csv_string, run_experiment, run_rounds, Metric, RunOutput};
use fedvb_core::fed::{run_round, ClientUpdate, FederationConfig, GlobalState};
use fedvb_core::gauss::{gaussian_product, gaussian_quotient, DiagonalGaussian};
use fedvb_core::net::{bbb_grad, cross_entropy_grad, Batch, NetworkSpec, VariationalParams};
use fedvb_core::proto::Label;
use fedvb_core::stream::{
    build_round_plan, class_incremental_tasks, dirichlet_partition, make_synthetic_blobs, mean_label_entropy,
    StreamSchedule, TaskData,
};
use fedvb_core::{Algorithm, ExperimentConfig, ModelParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Criterion = (&'static str, fn() -> Outcome, Duration);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let mut c = ExperimentConfig::from_file(&path).expect("shipped config parses");
    c.threads = 1;
    c
}

fn with(mut c: ExperimentConfig, algorithm: Algorithm, seed: u64) -> ExperimentConfig {
    c.federation.algorithm = algorithm;
    c.seed = seed;
    c
}

// Composite Simpson rule over a uniform grid.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

// Mean and variance of the density proportional to exp(log_density) by
// quadrature. The log density is a concave quadratic; its peak and width are
// located from three samples so the grid covers +-14 standard deviations.
fn quadrature_moments(log_density: impl Fn(f64) -> f64) -> (f64, f64) {
    let (l0, l1, lm) = (log_density(0.0), log_density(1.0), log_density(-1.0));
    let curvature = -(l1 + lm - 2.0 * l0);
    let slope = (l1 - lm) / 2.0;
    let centre = slope / curvature;
    let width = curvature.powf(-0.5);
    let peak = log_density(centre);
    let (a, b) = (centre - 14.0 * width, centre + 14.0 * width);
    let density = |x: f64| (log_density(x) - peak).exp();
    let n = 40_000;
    let z = simpson(density, a, b, n);
    let m = simpson(|x| x * density(x), a, b, n) / z;
    let v = simpson(|x| (x - m) * (x - m) * density(x), a, b, n) / z;
    (m, v)
}

fn log_normal(m: f64, s: f64) -> impl Fn(f64) -> f64 {
    move |x| -0.5 * ((x - m) / s).powi(2)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn ac1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_mom, mut worst_trip) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (ma, sa) = (rng.random_range(-5.0..5.0), rng.random_range(0.1..3.0));
        let (mb, sb) = (rng.random_range(-5.0..5.0), rng.random_range(0.1..3.0));
        let a = DiagonalGaussian::new(vec![ma], vec![sa]).unwrap();
        let b = DiagonalGaussian::new(vec![mb], vec![sb]).unwrap();

        let prod = gaussian_product(&a, &b).unwrap();
        let (la, lb) = (log_normal(ma, sa), log_normal(mb, sb));
        let (m, v) = quadrature_moments(|x| la(x) + lb(x));
        worst_mom = worst_mom
            .max(rel(prod.mean()[0], m))
            .max((prod.stddev()[0].powi(2) - v).abs() / v);

        // A quotient with the wider factor as denominator is proper.
        let (num, den, ln, ld) = if sa < sb { (&a, &b, &la, &lb) } else { (&b, &a, &lb, &la) };
        if (num.stddev()[0] / den.stddev()[0]) < 0.99 {
            let quot = gaussian_quotient(num, den, 1e-8).unwrap();
            let (m, v) = quadrature_moments(|x| ln(x) - ld(x));
            worst_mom = worst_mom
                .max(rel(quot.mean()[0], m))
                .max((quot.stddev()[0].powi(2) - v).abs() / v);
        }

        let back = gaussian_quotient(&prod, &a, 1e-8).unwrap();
        worst_trip = worst_trip
            .max(rel(back.mean()[0], mb))
            .max((back.stddev()[0] / sb - 1.0).abs());
    }
    outcome(
        worst_mom <= 1e-6 && worst_trip <= 1e-9,
        format!("max moment error {worst_mom:.2e} (tol 1e-6), max round-trip error {worst_trip:.2e} (tol 1e-9)"),
    )
}

fn compare(a: &DiagonalGaussian, b: &DiagonalGaussian) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.len() {
        worst = worst
            .max(rel(a.mean()[i], b.mean()[i]))
            .max((a.stddev()[i] / b.stddev()[i] - 1.0).abs());
    }
    worst
}

fn ac2() -> Outcome {
    let exp = config("forgetting.cfg");
    let fed = FederationConfig {
        num_clients: 1,
        participation_ratio: 1.0,
        snn_rounds: 0,
        total_rounds: 5,
        ..exp.federation.clone()
    };
    let blobs = make_synthetic_blobs(4, 10, 100, 0.5, 2).unwrap();
    let schedule = StreamSchedule::separate(&[3, 5]).unwrap();
    let tasks: Vec<TaskData> = class_incremental_tasks(&[0, 1, 2, 3], 2)
        .unwrap()
        .into_iter()
        .map(|t| {
            let set: BTreeSet<Label> = t.classes.iter().copied().collect();
            let (train, test) = (blobs.train.filter_classes(&set), blobs.test.filter_classes(&set));
            TaskData::partitioned(t, train, test, 1, 0.5, 3).unwrap()
        })
        .collect();
    let mut state = GlobalState::initial(NetworkSpec::mlp(10, &[32]).unwrap(), &fed, 4).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for round in 1..=5 {
        let plan = build_round_plan(&schedule, &tasks, round, &[0], 0, 5).unwrap();
        let out = run_round(&state, &plan, &fed, 6, None).unwrap();
        let [client] = out.clients.as_slice() else {
            return outcome(false, format!("round {round}: expected one client result"));
        };
        let ModelParams::Variational(local) = &client.local_model else {
            return outcome(false, format!("round {round}: local model is not variational"));
        };
        worst = worst.max(compare(out.state.prior.as_ref().unwrap(), &local.to_gaussian()));
        let ClientUpdate::Bnn { library, class_counts, .. } = &client.update else {
            return outcome(false, format!("round {round}: update is not a BNN update"));
        };
        for &label in class_counts.keys() {
            let global = out.state.library.get(label).unwrap().to_gaussian().unwrap();
            let mine = library.get(label).unwrap().to_gaussian().unwrap();
            worst = worst.max(compare(&global, &mine));
        }
        checked += 1;
        state = out.state;
    }
    outcome(
        worst <= 1e-9 && checked == 5,
        format!("{checked} BNN rounds, max relative deviation {worst:.2e} (tol 1e-9)"),
    )
}

fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let h = 1e-5;
    let mut p = x.to_vec();
    p[i] += h;
    let up = f(&p);
    p[i] -= 2.0 * h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

fn grad_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn ac3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut largest = 0;
    for case in 0..20 {
        let input = rng.random_range(2..7);
        let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(2..9)).collect();
        let classes = rng.random_range(2..5);
        let spec = NetworkSpec::mlp(input, &hidden).unwrap().with_head(classes).unwrap();
        let n = spec.param_count();
        largest = largest.max(n);
        let rows = rng.random_range(1..7);
        let features = Array2::from_shape_fn((rows, input), |_| rng.sample::<f64, _>(StandardNormal));
        let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let batch = Batch::new(features, labels).unwrap();

        let w: Vec<f64> = (0..n).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let (_, g) = cross_entropy_grad(&spec, &w, &batch).unwrap();
        let ce = |x: &[f64]| cross_entropy_grad(&spec, x, &batch).unwrap().0;
        for (i, &gi) in g.iter().enumerate() {
            worst = worst.max(grad_error(gi, finite_difference(ce, &w, i)));
        }

        let rho: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..0.0)).collect();
        let q = VariationalParams::new(w.clone(), rho.clone()).unwrap();
        let prior_mean: Vec<f64> = (0..n).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let prior_sd: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let prior = DiagonalGaussian::new(prior_mean, prior_sd).unwrap();
        let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let kl_weight = rng.random_range(0.05..1.0);
        let g = bbb_grad(&spec, &q, &prior, &batch, kl_weight, &noise).unwrap();
        let objective = |m: &[f64], r: &[f64]| {
            let q = VariationalParams::new(m.to_vec(), r.to_vec()).unwrap();
            bbb_grad(&spec, &q, &prior, &batch, kl_weight, &noise).unwrap().objective
        };
        for i in 0..n {
            worst = worst.max(grad_error(g.grad_mean[i], finite_difference(|m| objective(m, &rho), &w, i)));
            worst = worst.max(grad_error(g.grad_rho[i], finite_difference(|r| objective(&w, r), &rho, i)));
        }
        assert!(n <= 500, "case {case} has {n} parameters");
    }
    outcome(
        worst < 1e-3,
        format!("20 nets (largest {largest} params), max relative error {worst:.2e} (tol 1e-3)"),
    )
}

fn ac4() -> Outcome {
    let blobs = make_synthetic_blobs(10, 3, 60, 1.0, 7).unwrap();
    let data = &blobs.train;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut exact = 0;
    for _ in 0..50 {
        let alpha = 10f64.powf(rng.random_range(-2.0..2.0));
        let clients = rng.random_range(1..30);
        let shards = dirichlet_partition(data, clients, alpha, rng.random()).unwrap();
        let mut seen: Vec<usize> = shards.concat();
        seen.sort_unstable();
        if shards.len() == clients && seen == (0..data.len()).collect::<Vec<_>>() {
            exact += 1;
        }
    }
    let separate = StreamSchedule::separate(&[25, 50, 75, 100]).unwrap();
    let gradual = StreamSchedule::gradual(&[(0, 30), (20, 55), (45, 80), (70, 100)]).unwrap();
    let mut worst = 0.0f64;
    let mut rounds = 0;
    for schedule in [&separate, &gradual] {
        for r in 1..=schedule.total_rounds() {
            let sum: f64 = schedule.task_proportions(r).unwrap().values().sum();
            worst = worst.max((sum - 1.0).abs());
            rounds += 1;
        }
    }
    outcome(
        exact == 50 && worst <= 1e-12 && rounds == 200,
        format!("{exact}/50 exact partitions; {rounds} rounds, max |sum - 1| = {worst:.1e} (tol 1e-12)"),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn final_accuracies(c: &ExperimentConfig) -> BTreeMap<usize, f64> {
    let out = run_rounds(c, |_| Ok(())).unwrap();
    at_final(&out.records, out.schedule.total_rounds())
}

fn ac5() -> Outcome {
    let base = config("forgetting.cfg");
    let (mut first, mut avg) = (BTreeMap::new(), BTreeMap::new());
    for alg in [Algorithm::FedBnn, Algorithm::FedAvg] {
        let (mut f, mut a) = (Vec::new(), Vec::new());
        for seed in 0..3 {
            let fin = final_accuracies(&with(base.clone(), alg, seed));
            f.push(fin[&0]);
            a.push(fin.values().sum::<f64>() / fin.len() as f64);
        }
        first.insert(alg.to_string(), mean(&f));
        avg.insert(alg.to_string(), mean(&a));
    }
    let gap = first["fedbnn"] - first["fedavg"];
    outcome(
        gap >= 10.0 && avg["fedbnn"] > avg["fedavg"],
        format!(
            "task 0 @Fin {:.2} vs {:.2} (gap {gap:.2} pp, need >= 10); average @Fin {:.2} vs {:.2}",
            first["fedbnn"], first["fedavg"], avg["fedbnn"], avg["fedavg"]
        ),
    )
}

fn ac6() -> Outcome {
    let base = config("split5.cfg");
    let mut score = BTreeMap::new();
    for alg in [Algorithm::FedBnn, Algorithm::FedAvg] {
        let per_seed: Vec<f64> = (0..3)
            .map(|seed| {
                let fin = final_accuracies(&with(base.clone(), alg, seed));
                mean(&(0..4).map(|t| fin[&t]).collect::<Vec<_>>())
            })
            .collect();
        score.insert(alg.to_string(), mean(&per_seed));
    }
    outcome(
        score["fedbnn"] > score["fedavg"],
        format!(
            "mean @Fin over tasks 0-3: fedbnn {:.2} vs fedavg {:.2}",
            score["fedbnn"], score["fedavg"]
        ),
    )
}

fn ac7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (i, threads) in [1, 1, 4, 0].into_iter().enumerate() {
        let mut c = config("forgetting.cfg");
        c.threads = threads;
        c.seed = 17;
        c.out_dir = dir.path().join(format!("run{i}"));
        run_experiment(&c).unwrap();
        files.push(std::fs::read(c.out_dir.join("metrics.csv")).unwrap());
    }
    let identical = files.windows(2).all(|w| w[0] == w[1]);
    outcome(
        identical,
        format!(
            "4 runs (threads 1, 1, 4, auto) of {} bytes each: {}",
            files[0].len(),
            if identical { "byte-identical" } else { "differ" }
        ),
    )
}

fn ac8() -> Outcome {
    let blobs = make_synthetic_blobs(10, 2, 100, 1.0, 8).unwrap();
    let mut wins = 0;
    let (mut low, mut high) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        let a = mean_label_entropy(&blobs.train, &dirichlet_partition(&blobs.train, 20, 0.1, seed).unwrap());
        let b = mean_label_entropy(&blobs.train, &dirichlet_partition(&blobs.train, 20, 100.0, seed).unwrap());
        if a < b {
            wins += 1;
        }
        low.push(a);
        high.push(b);
    }
    outcome(
        wins == 10,
        format!(
            "alpha 0.1 below alpha 100 in {wins}/10 seeds; mean entropy {:.3} vs {:.3} nats",
            mean(&low),
            mean(&high)
        ),
    )
}

fn ac9() -> Outcome {
    let c = config("gradual.cfg");
    let RunOutput { records, schedule, .. } = run_rounds(&c, |_| Ok(())).unwrap();
    let mut worst = 0.0f64;
    let mut fon_rows = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric == Metric::FonAcc) {
        *fon_rows.entry(r.round).or_insert(0) += 1;
        let mixture = schedule.task_proportions(r.round).unwrap();
        let combined: f64 = mixture
            .iter()
            .map(|(&t, p)| {
                let acc = records
                    .iter()
                    .find(|x| x.round == r.round && x.metric == Metric::TaskAcc && x.task == Some(t))
                    .expect("task_acc emitted for every task in the mixture")
                    .value;
                p * acc
            })
            .sum();
        worst = worst.max((combined - r.value).abs());
    }
    let rounds = schedule.total_rounds();
    let one_per_round = fon_rows.len() == rounds && fon_rows.values().all(|&n| n == 1);
    let csv_rows = metrics_csv_string(&records).lines().filter(|l| l.contains(",fon_acc,")).count();
    outcome(
        worst <= 1e-9 && one_per_round && csv_rows == rounds,
        format!("{csv_rows} fon_acc rows over {rounds} rounds, max deviation {worst:.1e} (tol 1e-9)"),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("AC-1 gaussian algebra vs quadrature", ac1, Duration::from_secs(5)),
        ("AC-2 single-client identity", ac2, Duration::from_secs(30)),
        ("AC-3 gradient checks", ac3, Duration::from_secs(60)),
        ("AC-4 partition and schedule", ac4, Duration::from_secs(10)),
        ("AC-5 forgetting mitigation", ac5, Duration::from_secs(600)),
        ("AC-6 split class-incremental", ac6, Duration::from_secs(900)),
        ("AC-7 determinism", ac7, Duration::from_secs(600)),
        ("AC-8 heterogeneity knob", ac8, Duration::from_secs(60)),
        ("AC-9 FON consistency", ac9, Duration::from_secs(600)),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let in_time = took <= budget;
        let passed = result.passed && in_time;
        if !passed {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.2}s, budget {}s]",
            if passed { "PASS" } else { "FAIL" },
            result.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
