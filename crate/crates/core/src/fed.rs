//! Round loop of the federation: client training, likelihood extraction,
//! server aggregation and the SNN-to-BNN transition.
//!
//! A run starts with point-weight FedAvg rounds. After `snn_rounds` rounds the
//! global model (shared extractor and prototype library) is converted into a
//! mean-field Gaussian which serves as the first prior. From then on each
//! selected client trains a variational posterior against the broadcast
//! prior, divides the prior back out to obtain a Gaussian likelihood message,
//! and the server multiplies every message into the prior. The product is the
//! new global posterior and the next round's prior.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{gaussian_product, gaussian_quotient, DiagonalGaussian, DEFAULT_PRECISION_FLOOR, SIGMA_MIN};
use crate::net::{
    self, train_local_bnn, train_local_snn, Batch, ModelParams, NetworkSpec, PointWeights, SgdConfig,
    VariationalParams,
};
use crate::proto::{
    aggregate_libraries, assemble_classifier, full_classifier, update_library, warm_up, Label,
    PrototypeKind, PrototypeLibrary, WarmUpConfig,
};
use crate::seed::{derive_seed, tag};
use crate::stream::{ClientData, RoundPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Bayesian aggregation after the SNN warm start.
    FedBnn,
    /// Point weights throughout, averaged by sample count.
    FedAvg,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedbnn" => Ok(Algorithm::FedBnn),
            "fedavg" => Ok(Algorithm::FedAvg),
            other => Err(Error::Config(format!("unknown algorithm `{other}` (fedbnn|fedavg)"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::FedBnn => "fedbnn",
            Algorithm::FedAvg => "fedavg",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Snn,
    Bnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    pub num_clients: usize,
    pub participation_ratio: f64,
    /// FedAvg rounds before the switch to the Bayesian model.
    pub snn_rounds: usize,
    /// Stddev given to every parameter at the switch.
    pub sigma0: f64,
    pub local_epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub mc_samples: usize,
    pub precision_floor: f64,
    pub minibatch_size: usize,
    pub total_rounds: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedBnn,
            num_clients: 10,
            participation_ratio: 1.0,
            snn_rounds: 5,
            sigma0: 0.1,
            local_epochs: 5,
            lr: 0.05,
            warmup_epochs: 3,
            warmup_lr: 0.05,
            mc_samples: 1,
            precision_floor: DEFAULT_PRECISION_FLOOR,
            minibatch_size: 16,
            total_rounds: 30,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_clients == 0 {
            return fail("num_clients must be >= 1".into());
        }
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return fail(format!("participation must be in (0, 1], got {}", self.participation_ratio));
        }
        if !(self.sigma0 >= SIGMA_MIN && self.sigma0.is_finite()) {
            return fail(format!("sigma0 must be >= {SIGMA_MIN}, got {}", self.sigma0));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.warmup_lr >= 0.0 && self.warmup_lr.is_finite()) {
            return fail("learning rates must be finite and >= 0".into());
        }
        if self.mc_samples == 0 {
            return fail("mc_samples must be >= 1".into());
        }
        if !(self.precision_floor > 0.0 && self.precision_floor.is_finite()) {
            return fail(format!("precision_floor must be > 0, got {}", self.precision_floor));
        }
        if self.minibatch_size == 0 {
            return fail("minibatch_size must be >= 1".into());
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            epochs: self.local_epochs,
        }
    }

    fn warm_up(&self) -> WarmUpConfig {
        WarmUpConfig {
            epochs: self.warmup_epochs,
            lr: self.warmup_lr,
            mc_samples: self.mc_samples,
        }
    }
}

/// What the server holds between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub phase: Phase,
    pub extractor_spec: NetworkSpec,
    pub shared: ModelParams,
    /// Global posterior of the shared model; `Some` exactly in the BNN phase.
    pub prior: Option<DiagonalGaussian>,
    pub library: PrototypeLibrary,
    /// Number of completed rounds.
    pub round: usize,
}

impl GlobalState {
    /// Random point extractor and an empty library. Converted straight away
    /// when FedBNN is configured without SNN rounds.
    pub fn initial(extractor_spec: NetworkSpec, config: &FederationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = extractor_spec.init_weights(derive_seed(seed, &[tag::INIT]));
        let library = PrototypeLibrary::new(extractor_spec.output_width(), PrototypeKind::Point);
        let mut state = Self {
            phase: Phase::Snn,
            extractor_spec,
            shared: ModelParams::Point(weights),
            prior: None,
            library,
            round: 0,
        };
        if config.algorithm == Algorithm::FedBnn && config.snn_rounds == 0 {
            state = state.into_bnn(config.sigma0)?;
        }
        Ok(state)
    }

    fn into_bnn(self, sigma0: f64) -> Result<Self> {
        let ModelParams::Point(weights) = &self.shared else {
            return Err(Error::PhaseMismatch("model is already Bayesian".into()));
        };
        let (q, prior, library) = snn_to_bnn(weights, &self.library, sigma0)?;
        Ok(Self {
            phase: Phase::Bnn,
            shared: ModelParams::Variational(q),
            prior: Some(prior),
            library,
            ..self
        })
    }

    fn bnn_prior(&self) -> Result<&DiagonalGaussian> {
        self.prior
            .as_ref()
            .ok_or_else(|| Error::PhaseMismatch("BNN phase without a prior".into()))
    }

    /// Labels predicted by the extractor followed by the full-library head.
    /// Variational models predict with posterior means unless `mc_samples > 0`.
    pub fn predict(&self, features: ndarray::ArrayView2<f64>, mc_samples: usize, seed: u64) -> Result<Vec<Label>> {
        let head = full_classifier(&self.library)?;
        let spec = self.extractor_spec.with_head(head.len())?;
        let positions = match &self.shared {
            ModelParams::Point(w) => {
                let mut flat = w.values().to_vec();
                flat.extend(head.point_params()?);
                net::predict(&spec, &flat, features)?
            }
            ModelParams::Variational(q) => {
                let full = q.concat(&head.variational_params()?);
                if mc_samples > 0 {
                    net::predict_mc(&spec, &full, features, mc_samples, seed)?
                } else {
                    net::predict(&spec, full.mean(), features)?
                }
            }
        };
        Ok(positions.into_iter().map(|p| head.labels()[p]).collect())
    }
}

/// Payload a client returns to the server.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientUpdate {
    Snn {
        client: usize,
        weights: PointWeights,
        samples: usize,
        library: PrototypeLibrary,
        class_counts: BTreeMap<Label, usize>,
    },
    Bnn {
        client: usize,
        likelihood: DiagonalGaussian,
        samples: usize,
        library: PrototypeLibrary,
        class_counts: BTreeMap<Label, usize>,
    },
}

impl ClientUpdate {
    pub fn client(&self) -> usize {
        match self {
            ClientUpdate::Snn { client, .. } | ClientUpdate::Bnn { client, .. } => *client,
        }
    }

    pub fn library(&self) -> &PrototypeLibrary {
        match self {
            ClientUpdate::Snn { library, .. } | ClientUpdate::Bnn { library, .. } => library,
        }
    }

    pub fn class_counts(&self) -> &BTreeMap<Label, usize> {
        match self {
            ClientUpdate::Snn { class_counts, .. } | ClientUpdate::Bnn { class_counts, .. } => class_counts,
        }
    }
}

/// A client's update plus the local shared model it never sends.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientResult {
    pub update: ClientUpdate,
    /// Trained local extractor: weights (SNN) or posterior (BNN).
    pub local_model: ModelParams,
}

/// `ceil(ratio * num_clients)` distinct client ids drawn uniformly for
/// `round`, ascending.
pub fn select_clients(round: usize, num_clients: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let want = ((ratio * num_clients as f64) - 1e-9).ceil().clamp(1.0, num_clients as f64) as usize;
    if want >= num_clients {
        return (0..num_clients).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag::SELECT, round as u64]));
    let mut ids = rand::seq::index::sample(&mut rng, num_clients, want).into_vec();
    ids.sort_unstable();
    ids
}

fn class_counts(batch: &Batch) -> BTreeMap<Label, usize> {
    let mut counts = BTreeMap::new();
    for &l in batch.labels() {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts
}

/// One client's local procedure on the broadcast `state`.
///
/// Assembles a head for the labels in the batch, warms up any fresh rows with
/// the extractor frozen, trains the full model (SGD or Bayes by Backprop with
/// the global posterior as prior), writes the head back into a copy of the
/// library and, in the BNN phase, extracts the likelihood message of the
/// shared model.
pub fn client_round(state: &GlobalState, config: &FederationConfig, data: &ClientData, seed: u64) -> Result<ClientResult> {
    let batch = &data.batch;
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: BTreeSet<Label> = batch.labels().iter().copied().collect();
    let assembled = assemble_classifier(&state.library, &labels)?;
    let positions: Vec<usize> = batch
        .labels()
        .iter()
        .map(|&l| assembled.position(l).expect("assembled from batch labels"))
        .collect();
    let local = Batch::new(batch.features().clone(), positions)?;
    let minibatches = local.minibatches(config.minibatch_size, derive_seed(seed, &[0]));

    let head = warm_up(
        &state.extractor_spec,
        &state.shared,
        &assembled,
        &minibatches,
        config.warm_up(),
        derive_seed(seed, &[1]),
    )?;
    let spec = state.extractor_spec.with_head(head.len())?;
    let split = state.shared.len();
    let train_seed = derive_seed(seed, &[2]);

    let (local_model, trained_head) = match &state.shared {
        ModelParams::Point(w) => {
            let mut flat = w.values().to_vec();
            flat.extend(head.point_params()?);
            let out = train_local_snn(&spec, &PointWeights::new(flat)?, &minibatches, config.sgd(), train_seed)?;
            let extractor = PointWeights::new(out.values()[..split].to_vec())?;
            let trained = head.with_point_params(&out.values()[split..])?;
            (ModelParams::Point(extractor), trained)
        }
        ModelParams::Variational(q) => {
            let shared_prior = state.bnn_prior()?;
            let init = q.concat(&head.variational_params()?);
            let prior = shared_prior.concat(&assembled.variational_params()?.to_gaussian());
            let out = train_local_bnn(
                &spec,
                &init,
                &prior,
                &minibatches,
                config.sgd(),
                config.mc_samples,
                train_seed,
            )?;
            let trained = head.with_variational_params(&out.slice(split..out.len()))?;
            (ModelParams::Variational(out.slice(0..split)), trained)
        }
    };

    let library = update_library(&state.library, &trained_head)?;
    let counts = class_counts(batch);
    let update = match &local_model {
        ModelParams::Point(w) => ClientUpdate::Snn {
            client: data.client,
            weights: w.clone(),
            samples: batch.len(),
            library,
            class_counts: counts,
        },
        ModelParams::Variational(q) => ClientUpdate::Bnn {
            client: data.client,
            likelihood: gaussian_quotient(&q.to_gaussian(), state.bnn_prior()?, config.precision_floor)?,
            samples: batch.len(),
            library,
            class_counts: counts,
        },
    };
    Ok(ClientResult { update, local_model })
}

/// `prior * prod(likelihoods)`, folded in slice order.
pub fn aggregate_global(prior: &DiagonalGaussian, likelihoods: &[DiagonalGaussian]) -> Result<DiagonalGaussian> {
    likelihoods
        .iter()
        .try_fold(prior.clone(), |acc, l| gaussian_product(&acc, l))
}

/// Sample-count weighted mean of point weights.
pub fn fedavg_aggregate(updates: &[(&PointWeights, usize)]) -> Result<PointWeights> {
    let Some((first, _)) = updates.first() else {
        return Err(Error::Validation("fedavg needs at least one update".into()));
    };
    let n = first.len();
    if let Some((w, _)) = updates.iter().find(|(w, _)| w.len() != n) {
        return Err(Error::dims("fedavg weights", n, w.len()));
    }
    if updates.iter().any(|(_, c)| *c == 0) {
        return Err(Error::Validation("fedavg sample counts must be >= 1".into()));
    }
    let total: usize = updates.iter().map(|(_, c)| c).sum();
    let mut out = vec![0.0; n];
    for (w, c) in updates {
        let share = *c as f64 / total as f64;
        out.iter_mut().zip(w.values()).for_each(|(a, v)| *a += share * v);
    }
    PointWeights::new(out)
}

/// Isomorphic Bayesian model: means copied from the point weights, every
/// stddev `sigma0`. The same distribution is returned as the prior.
pub fn snn_to_bnn(
    weights: &PointWeights,
    library: &PrototypeLibrary,
    sigma0: f64,
) -> Result<(VariationalParams, DiagonalGaussian, PrototypeLibrary)> {
    if !(sigma0 >= SIGMA_MIN && sigma0.is_finite()) {
        return Err(Error::Validation(format!("sigma0 must be >= {SIGMA_MIN}, got {sigma0}")));
    }
    let prior = DiagonalGaussian::isotropic(weights.values().to_vec(), sigma0)?;
    let q = VariationalParams::from_gaussian(&prior);
    Ok((q, prior, library.to_variational(sigma0)?))
}

/// New state plus per-client results of one round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub state: GlobalState,
    pub clients: Vec<ClientResult>,
}

/// Trains every client in `plan` (in parallel on `pool` when given) and
/// aggregates their updates in ascending client order.
pub fn run_round(
    state: &GlobalState,
    plan: &RoundPlan,
    config: &FederationConfig,
    seed: u64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<RoundOutcome> {
    let round = state.round + 1;
    if plan.round != round {
        return Err(Error::RoundMismatch {
            expected: round,
            found: plan.round,
        });
    }
    let mut data: Vec<&ClientData> = plan.clients.iter().collect();
    data.sort_by_key(|d| d.client);

    let train = |d: &&ClientData| {
        let s = derive_seed(seed, &[tag::TRAIN, round as u64, d.client as u64]);
        client_round(state, config, d, s)
    };
    let results: Vec<ClientResult> = match pool {
        Some(pool) => pool.install(|| data.par_iter().map(train).collect::<Result<_>>()),
        None => data.iter().map(train).collect::<Result<_>>(),
    }
    .map_err(|e| e.at_stage(round, "client training"))?;

    let next = aggregate(state, &results, config).map_err(|e| e.at_stage(round, "aggregation"))?;
    let next = if next.phase == Phase::Snn && config.algorithm == Algorithm::FedBnn && round == config.snn_rounds {
        next.into_bnn(config.sigma0).map_err(|e| e.at_stage(round, "snn to bnn transition"))?
    } else {
        next
    };
    Ok(RoundOutcome {
        state: next,
        clients: results,
    })
}

fn aggregate(state: &GlobalState, results: &[ClientResult], config: &FederationConfig) -> Result<GlobalState> {
    let libs: Vec<PrototypeLibrary> = results.iter().map(|r| r.update.library().clone()).collect();
    let counts: Vec<BTreeMap<Label, usize>> = results.iter().map(|r| r.update.class_counts().clone()).collect();
    let library = aggregate_libraries(&state.library, &libs, &counts, config.precision_floor)?;

    let (shared, prior) = match state.phase {
        Phase::Snn => {
            let mut updates = Vec::with_capacity(results.len());
            for r in results {
                let ClientUpdate::Snn { weights, samples, .. } = &r.update else {
                    return Err(Error::PhaseMismatch("BNN update in the SNN phase".into()));
                };
                updates.push((weights, *samples));
            }
            let shared = if updates.is_empty() {
                state.shared.clone()
            } else {
                ModelParams::Point(fedavg_aggregate(&updates)?)
            };
            (shared, None)
        }
        Phase::Bnn => {
            let mut likelihoods = Vec::with_capacity(results.len());
            for r in results {
                let ClientUpdate::Bnn { likelihood, .. } = &r.update else {
                    return Err(Error::PhaseMismatch("SNN update in the BNN phase".into()));
                };
                likelihoods.push(likelihood.clone());
            }
            let posterior = aggregate_global(state.bnn_prior()?, &likelihoods)?;
            (
                ModelParams::Variational(VariationalParams::from_gaussian(&posterior)),
                Some(posterior),
            )
        }
    };
    Ok(GlobalState {
        phase: state.phase,
        extractor_spec: state.extractor_spec.clone(),
        shared,
        prior,
        library,
        round: state.round + 1,
    })
}
