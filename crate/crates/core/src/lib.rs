//! Simulation engine for federated continual learning with mean-field
//! Bayesian neural networks.
//!
//! Clients train a variational posterior locally against the broadcast global
//! posterior, extract the Gaussian likelihood of their data by division, and
//! the server multiplies all likelihoods into the previous posterior. Class
//! rows of the classifier live in a prototype library so the label space can
//! grow over time. The first rounds run plain FedAvg to give the Bayesian
//! model an informed prior.

pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod gauss;
pub mod net;
pub mod proto;
pub mod seed;
pub mod stream;

pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, Metric, MetricRecord};
pub use fed::{Algorithm, FederationConfig, GlobalState, Phase};
pub use gauss::{DiagonalGaussian, SIGMA_MIN};
pub use net::{Batch, ModelParams, NetworkSpec, PointWeights, VariationalParams};
pub use proto::{Classifier, Label, Prototype, PrototypeLibrary};
pub use stream::{Dataset, StreamSchedule};
