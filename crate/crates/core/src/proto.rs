//! Prototype library: one classifier row per class label, kept outside the
//! shared feature extractor.
//!
//! Clients assemble a classifier from the rows of the labels present in
//! their batch, train it on top of the shared model, and write the rows back.
//! The server merges libraries label by label.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{gaussian_product, gaussian_quotient, DiagonalGaussian};
use crate::net::{
    inverse_softplus, train_bnn_from, train_snn_from, Batch, ModelParams, NetworkSpec, PointWeights,
    SgdConfig, VariationalParams,
};

pub type Label = usize;

/// Parameters of one classifier row, bias last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PrototypeParams {
    Point {
        weights: Vec<f64>,
        bias: f64,
    },
    Variational {
        mean: Vec<f64>,
        mean_bias: f64,
        rho: Vec<f64>,
        rho_bias: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub params: PrototypeParams,
    pub update_count: u64,
    pub mismatched: bool,
}

impl Prototype {
    pub fn width(&self) -> usize {
        match &self.params {
            PrototypeParams::Point { weights, .. } => weights.len(),
            PrototypeParams::Variational { mean, .. } => mean.len(),
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self.params, PrototypeParams::Variational { .. })
    }

    /// Row followed by bias, as a Gaussian. `None` for point prototypes.
    pub fn to_gaussian(&self) -> Option<DiagonalGaussian> {
        match &self.params {
            PrototypeParams::Point { .. } => None,
            PrototypeParams::Variational {
                mean,
                mean_bias,
                rho,
                rho_bias,
            } => {
                let mut m = mean.clone();
                m.push(*mean_bias);
                let mut r = rho.clone();
                r.push(*rho_bias);
                Some(
                    VariationalParams::new(m, r)
                        .expect("prototype parameters are finite")
                        .to_gaussian(),
                )
            }
        }
    }

    fn from_gaussian(g: &DiagonalGaussian, update_count: u64) -> Self {
        let q = VariationalParams::from_gaussian(g);
        let (mut mean, mut rho) = q.into_parts();
        let mean_bias = mean.pop().expect("row plus bias");
        let rho_bias = rho.pop().expect("row plus bias");
        Self {
            params: PrototypeParams::Variational {
                mean,
                mean_bias,
                rho,
                rho_bias,
            },
            update_count,
            mismatched: false,
        }
    }
}

/// How rows for unseen labels are initialized, and which variant the
/// library holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PrototypeKind {
    Point,
    Variational { sigma0: f64 },
}

impl PrototypeKind {
    fn fresh(&self, width: usize) -> Prototype {
        let params = match *self {
            PrototypeKind::Point => PrototypeParams::Point {
                weights: vec![0.0; width],
                bias: 0.0,
            },
            PrototypeKind::Variational { sigma0 } => {
                let rho = inverse_softplus(sigma0);
                PrototypeParams::Variational {
                    mean: vec![0.0; width],
                    mean_bias: 0.0,
                    rho: vec![rho; width],
                    rho_bias: rho,
                }
            }
        };
        Prototype {
            params,
            update_count: 0,
            mismatched: true,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            PrototypeKind::Point => "point",
            PrototypeKind::Variational { .. } => "variational",
        }
    }
}

/// Ordered map from class label to prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeLibrary {
    feature_width: usize,
    kind: PrototypeKind,
    entries: BTreeMap<Label, Prototype>,
}

impl PrototypeLibrary {
    pub fn new(feature_width: usize, kind: PrototypeKind) -> Self {
        Self {
            feature_width,
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn kind(&self) -> PrototypeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: Label) -> Option<&Prototype> {
        self.entries.get(&label)
    }

    pub fn labels(&self) -> BTreeSet<Label> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, &Prototype)> {
        self.entries.iter().map(|(&l, p)| (l, p))
    }

    /// Inserts or replaces a prototype, checking its width and variant.
    pub fn insert(&mut self, label: Label, proto: Prototype) -> Result<()> {
        if proto.width() != self.feature_width {
            return Err(Error::dims("prototype width", self.feature_width, proto.width()));
        }
        if proto.is_variational() != matches!(self.kind, PrototypeKind::Variational { .. }) {
            return Err(Error::PhaseMismatch(format!(
                "prototype for label {label} does not match a {} library",
                self.kind.name()
            )));
        }
        self.entries.insert(label, proto);
        Ok(())
    }

    fn fresh(&self) -> Prototype {
        self.kind.fresh(self.feature_width)
    }

    /// Point library converted to variational: means copied, every stddev `sigma0`.
    pub fn to_variational(&self, sigma0: f64) -> Result<PrototypeLibrary> {
        let rho = inverse_softplus(sigma0);
        let mut out = PrototypeLibrary::new(self.feature_width, PrototypeKind::Variational { sigma0 });
        for (&label, proto) in &self.entries {
            let PrototypeParams::Point { weights, bias } = &proto.params else {
                return Err(Error::PhaseMismatch("library is already variational".into()));
            };
            out.entries.insert(
                label,
                Prototype {
                    params: PrototypeParams::Variational {
                        mean: weights.clone(),
                        mean_bias: *bias,
                        rho: vec![rho; weights.len()],
                        rho_bias: rho,
                    },
                    update_count: proto.update_count,
                    mismatched: proto.mismatched,
                },
            );
        }
        Ok(out)
    }
}

/// Rows for an ordered list of labels, stacked into a classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    labels: Vec<Label>,
    rows: Vec<Prototype>,
    feature_width: usize,
}

impl Classifier {
    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn rows(&self) -> &[Prototype] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn position(&self, label: Label) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn has_mismatched(&self) -> bool {
        self.rows.iter().any(|r| r.mismatched)
    }

    /// Head parameters in network layout: all weight rows, then all biases.
    pub fn point_params(&self) -> Result<Vec<f64>> {
        let mut w = Vec::with_capacity(self.len() * (self.feature_width + 1));
        let mut b = Vec::with_capacity(self.len());
        for r in &self.rows {
            let PrototypeParams::Point { weights, bias } = &r.params else {
                return Err(Error::PhaseMismatch("expected point prototypes".into()));
            };
            w.extend_from_slice(weights);
            b.push(*bias);
        }
        w.extend(b);
        Ok(w)
    }

    /// Head variational parameters in network layout.
    pub fn variational_params(&self) -> Result<VariationalParams> {
        let n = self.len() * (self.feature_width + 1);
        let (mut m, mut r) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let (mut mb, mut rb) = (Vec::new(), Vec::new());
        for row in &self.rows {
            let PrototypeParams::Variational {
                mean,
                mean_bias,
                rho,
                rho_bias,
            } = &row.params
            else {
                return Err(Error::PhaseMismatch("expected variational prototypes".into()));
            };
            m.extend_from_slice(mean);
            r.extend_from_slice(rho);
            mb.push(*mean_bias);
            rb.push(*rho_bias);
        }
        m.extend(mb);
        r.extend(rb);
        VariationalParams::new(m, r)
    }

    /// Rows replaced from network-layout point parameters.
    pub fn with_point_params(&self, flat: &[f64]) -> Result<Classifier> {
        let (f, n) = (self.feature_width, self.len());
        if flat.len() != n * (f + 1) {
            return Err(Error::dims("classifier parameters", n * (f + 1), flat.len()));
        }
        let mut out = self.clone();
        for (i, row) in out.rows.iter_mut().enumerate() {
            row.params = PrototypeParams::Point {
                weights: flat[i * f..(i + 1) * f].to_vec(),
                bias: flat[n * f + i],
            };
        }
        Ok(out)
    }

    /// Rows replaced from network-layout variational parameters.
    pub fn with_variational_params(&self, q: &VariationalParams) -> Result<Classifier> {
        let (f, n) = (self.feature_width, self.len());
        if q.len() != n * (f + 1) {
            return Err(Error::dims("classifier parameters", n * (f + 1), q.len()));
        }
        let (m, r) = (q.mean(), q.rho());
        let mut out = self.clone();
        for (i, row) in out.rows.iter_mut().enumerate() {
            row.params = PrototypeParams::Variational {
                mean: m[i * f..(i + 1) * f].to_vec(),
                mean_bias: m[n * f + i],
                rho: r[i * f..(i + 1) * f].to_vec(),
                rho_bias: r[n * f + i],
            };
        }
        Ok(out)
    }

    fn clear_mismatched(mut self) -> Classifier {
        self.rows.iter_mut().for_each(|r| r.mismatched = false);
        self
    }
}

/// Fetches the rows for `labels` in ascending order; labels the library has
/// never seen get a fresh row flagged as mismatched.
pub fn assemble_classifier(library: &PrototypeLibrary, labels: &BTreeSet<Label>) -> Result<Classifier> {
    if labels.is_empty() {
        return Err(Error::Validation("cannot assemble a classifier for no labels".into()));
    }
    let rows = labels
        .iter()
        .map(|l| library.get(*l).cloned().unwrap_or_else(|| library.fresh()))
        .collect();
    Ok(Classifier {
        labels: labels.iter().copied().collect(),
        rows,
        feature_width: library.feature_width,
    })
}

/// The full library as a prediction head.
pub fn full_classifier(library: &PrototypeLibrary) -> Result<Classifier> {
    assemble_classifier(library, &library.labels())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmUpConfig {
    pub epochs: usize,
    pub lr: f64,
    pub mc_samples: usize,
}

/// Fine-tunes only the classifier on `batches` with the extractor frozen.
///
/// Batch labels are classifier positions. A classifier with no mismatched
/// rows comes back unchanged. For a variational extractor the KL prior of the
/// head is the head as assembled.
pub fn warm_up(
    extractor_spec: &NetworkSpec,
    extractor: &ModelParams,
    classifier: &Classifier,
    batches: &[Batch],
    config: WarmUpConfig,
    seed: u64,
) -> Result<Classifier> {
    if !classifier.has_mismatched() {
        return Ok(classifier.clone());
    }
    if extractor_spec.output_width() != classifier.feature_width {
        return Err(Error::dims(
            "classifier width",
            extractor_spec.output_width(),
            classifier.feature_width,
        ));
    }
    let full = extractor_spec.with_head(classifier.len())?;
    let frozen = extractor.len();
    let sgd = SgdConfig {
        lr: config.lr,
        epochs: config.epochs,
    };
    let trained = match extractor {
        ModelParams::Point(w) => {
            let mut flat = w.values().to_vec();
            flat.extend(classifier.point_params()?);
            let out = train_snn_from(&full, &PointWeights::new(flat)?, batches, sgd, seed, frozen)?;
            classifier.with_point_params(&out.values()[frozen..])?
        }
        ModelParams::Variational(q) => {
            let head = classifier.variational_params()?;
            let init = q.concat(&head);
            let prior = q.to_gaussian().concat(&head.to_gaussian());
            let out = train_bnn_from(&full, &init, &prior, batches, sgd, config.mc_samples, seed, frozen)?;
            classifier.with_variational_params(&out.slice(frozen..out.len()))?
        }
    };
    Ok(trained.clear_mismatched())
}

/// Writes every classifier row back under its label and bumps its count.
pub fn update_library(library: &PrototypeLibrary, classifier: &Classifier) -> Result<PrototypeLibrary> {
    let mut out = library.clone();
    for (&label, row) in classifier.labels.iter().zip(&classifier.rows) {
        let update_count = library.get(label).map_or(0, |p| p.update_count) + 1;
        out.insert(
            label,
            Prototype {
                params: row.params.clone(),
                update_count,
                mismatched: false,
            },
        )?;
    }
    Ok(out)
}

/// Merges client libraries label by label.
///
/// Only clients that trained on a label this round (a positive entry in
/// `class_counts`) take part for that label. Point prototypes are averaged
/// weighted by those counts. Variational prototypes are treated as local
/// posteriors: each one's likelihood against the previous global prototype
/// is multiplied into that prototype. Labels nobody trained this round are
/// carried over. Clients are folded in slice order.
pub fn aggregate_libraries(
    previous: &PrototypeLibrary,
    client_libs: &[PrototypeLibrary],
    class_counts: &[BTreeMap<Label, usize>],
    precision_floor: f64,
) -> Result<PrototypeLibrary> {
    if client_libs.len() != class_counts.len() {
        return Err(Error::dims("client class counts", client_libs.len(), class_counts.len()));
    }
    for lib in client_libs {
        if std::mem::discriminant(&lib.kind) != std::mem::discriminant(&previous.kind) {
            return Err(Error::PhaseMismatch(format!(
                "client library is {} but the global library is {}",
                lib.kind.name(),
                previous.kind.name()
            )));
        }
        if lib.feature_width != previous.feature_width {
            return Err(Error::dims("client library width", previous.feature_width, lib.feature_width));
        }
    }

    let mut labels = previous.labels();
    for lib in client_libs {
        labels.extend(lib.entries.keys());
    }

    let mut out = previous.clone();
    for label in labels {
        let holders: Vec<(&Prototype, usize)> = client_libs
            .iter()
            .zip(class_counts)
            .filter_map(|(lib, counts)| {
                let c = counts.get(&label).copied().unwrap_or(0);
                lib.get(label).filter(|_| c > 0).map(|p| (p, c))
            })
            .collect();
        if holders.is_empty() {
            continue;
        }
        let base = previous.get(label).cloned().unwrap_or_else(|| previous.fresh());
        let update_count = base.update_count + holders.len() as u64;
        let merged = match previous.kind {
            PrototypeKind::Point => {
                let width = previous.feature_width;
                let total: usize = holders.iter().map(|(_, c)| c).sum();
                let mut weights = vec![0.0; width];
                let mut bias = 0.0;
                for (p, c) in &holders {
                    let PrototypeParams::Point { weights: w, bias: b } = &p.params else {
                        return Err(Error::PhaseMismatch(format!("label {label} is not a point prototype")));
                    };
                    let share = *c as f64 / total as f64;
                    weights.iter_mut().zip(w).for_each(|(a, v)| *a += share * v);
                    bias += share * b;
                }
                Prototype {
                    params: PrototypeParams::Point { weights, bias },
                    update_count,
                    mismatched: false,
                }
            }
            PrototypeKind::Variational { .. } => {
                let prior = base.to_gaussian().expect("variational library");
                let mut global = prior.clone();
                for (p, _) in &holders {
                    let posterior = p.to_gaussian().ok_or_else(|| {
                        Error::PhaseMismatch(format!("label {label} is not a variational prototype"))
                    })?;
                    let likelihood = gaussian_quotient(&posterior, &prior, precision_floor)?;
                    global = gaussian_product(&global, &likelihood)?;
                }
                Prototype::from_gaussian(&global, update_count)
            }
        };
        out.entries.insert(label, merged);
    }
    Ok(out)
}
