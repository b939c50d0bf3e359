//! Python bindings.

#![allow(clippy::type_complexity)]

use std::path::PathBuf;

use conna_core::config::RunConfig;
use conna_core::datagen::{self, InteractionRecord};
use conna_core::decoder::PositionDistributions;
use conna_core::matching::{self, CostMatrix};
use conna_core::types::{BundleCreative, CandidateContext};
use conna_core::{eval, losses, numeric, trainer, ConnaError};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(
    conna,
    Error,
    PyException,
    "Raised for any conna-core failure."
);

fn err(e: ConnaError) -> PyErr {
    Error::new_err(e.to_string())
}

type Creative = (Vec<usize>, Vec<usize>, usize);

fn creative(c: Creative) -> BundleCreative {
    BundleCreative {
        items: c.0,
        slogans: c.1,
        template: c.2,
    }
}

fn tuple(c: &BundleCreative) -> Creative {
    (c.items.clone(), c.slogans.clone(), c.template)
}

/// Run configuration (`[data]`, `[model]`, `[train]`).
#[pyclass(name = "Config", module = "conna", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml=None, overrides=Vec::new()))]
    fn new(toml: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        let base = match toml {
            Some(t) => RunConfig::from_toml(t).map_err(err)?,
            None => RunConfig::default(),
        };
        let inner = base.with_overrides(&overrides).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        let inner = self.inner.with_overrides(&overrides).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash_hex()
    }
}

/// Train/dev/test records.
#[pyclass(name = "Dataset", module = "conna")]
struct PyDataset {
    inner: datagen::Dataset,
}

fn split<'a>(d: &'a datagen::Dataset, name: &str) -> PyResult<&'a [InteractionRecord]> {
    d.split(name)
        .ok_or_else(|| Error::new_err(format!("unknown split `{name}`")))
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn generate(config: &PyConfig) -> PyResult<Self> {
        let (_, inner) = datagen::generate_dataset(&config.inner.data).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        datagen::Dataset::read_dir(&dir)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write_dir(&dir).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.train.len() + self.inner.dev.len() + self.inner.test.len()
    }

    /// Number of records in a split.
    fn size(&self, split_name: &str) -> PyResult<usize> {
        split(&self.inner, split_name).map(<[_]>::len)
    }

    /// `(user, history, candidate_slogans, candidate_templates)` of a record.
    fn context(
        &self,
        split_name: &str,
        index: usize,
    ) -> PyResult<(usize, Vec<usize>, Vec<usize>, Vec<usize>)> {
        let r = record(&self.inner, split_name, index)?;
        let c = &r.context;
        Ok((
            c.user,
            c.history.clone(),
            c.candidate_slogans.clone(),
            c.candidate_templates.clone(),
        ))
    }

    /// Positive creative of a record as `(items, slogans, template)`.
    fn positive(&self, split_name: &str, index: usize) -> PyResult<Creative> {
        record(&self.inner, split_name, index).map(|r| tuple(&r.positive))
    }

    fn negatives(&self, split_name: &str, index: usize) -> PyResult<Vec<Creative>> {
        record(&self.inner, split_name, index).map(|r| r.negatives.iter().map(tuple).collect())
    }
}

fn record<'a>(
    d: &'a datagen::Dataset,
    name: &str,
    index: usize,
) -> PyResult<&'a InteractionRecord> {
    let s = split(d, name)?;
    s.get(index)
        .ok_or_else(|| Error::new_err(format!("record {index} outside split of {}", s.len())))
}

/// Encoder-decoder model with its parameters.
#[pyclass(name = "Model", module = "conna")]
struct PyModel {
    inner: conna_core::model::Model,
    config: RunConfig,
}

fn context(
    user: usize,
    history: Vec<usize>,
    slogans: Vec<usize>,
    templates: Vec<usize>,
) -> CandidateContext {
    CandidateContext {
        user,
        history,
        candidate_slogans: slogans,
        candidate_templates: templates,
    }
}

#[pymethods]
impl PyModel {
    /// Fresh model seeded by `train.seed`.
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let inner = trainer::init_model(&config.inner).map_err(err)?;
        Ok(Self {
            inner,
            config: config.inner.clone(),
        })
    }

    #[staticmethod]
    fn load(config: &PyConfig, path: PathBuf) -> PyResult<Self> {
        let (inner, _) = trainer::load_model(&config.inner, &path).map_err(err)?;
        Ok(Self {
            inner,
            config: config.inner.clone(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_model(&self.inner, &self.config, &path).map_err(err)
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Argmax creative and the number of decoder passes it took.
    fn generate(
        &self,
        user: usize,
        history: Vec<usize>,
        slogans: Vec<usize>,
        templates: Vec<usize>,
    ) -> PyResult<(Creative, usize)> {
        let g = self
            .inner
            .generate(&context(user, history, slogans, templates))
            .map_err(err)?;
        Ok((tuple(&g.creative), g.decoder_passes))
    }

    /// Per-slot probability vectors `(items, slogans, template)`.
    fn distributions(
        &self,
        user: usize,
        history: Vec<usize>,
        slogans: Vec<usize>,
        templates: Vec<usize>,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
        let d = self
            .inner
            .distributions(&context(user, history, slogans, templates))
            .map_err(err)?;
        Ok((d.items, d.slogans, d.template))
    }

    /// Mean `(hit_ratio, diversity)` over a split.
    fn evaluate(&self, dataset: &PyDataset, split_name: &str) -> PyResult<(f64, f64)> {
        let r = eval::evaluate(&self.inner, split(&dataset.inner, split_name)?).map_err(err)?;
        Ok((r.hit_ratio, r.diversity))
    }
}

/// Trains a model; returns it with the per-step `(l_set, l_cl, l_total)` log.
#[pyfunction]
fn train(
    py: Python<'_>,
    config: &PyConfig,
    dataset: &PyDataset,
) -> PyResult<(PyModel, Vec<(f64, f64, f64)>)> {
    let cfg = config.inner.clone();
    let out = py
        .detach(|| trainer::train(&cfg, &dataset.inner))
        .map_err(err)?;
    let log = out
        .steps
        .iter()
        .map(|s| (s.l_set, s.l_cl, s.l_total))
        .collect();
    Ok((
        PyModel {
            inner: out.model,
            config: cfg,
        },
        log,
    ))
}

#[pyfunction]
fn softmax(v: Vec<f64>) -> PyResult<Vec<f64>> {
    numeric::softmax(&v).map_err(err)
}

#[pyfunction]
fn layer_norm(v: Vec<f64>, gain: Vec<f64>, bias: Vec<f64>, eps: f64) -> PyResult<Vec<f64>> {
    numeric::layer_norm(&v, &gain, &bias, eps).map_err(err)
}

#[pyfunction]
fn cross_entropy(dist: Vec<f64>, target: usize) -> PyResult<f64> {
    numeric::cross_entropy(&dist, target).map_err(err)
}

/// Minimal-cost assignment `(perm, total_cost)` of a square cost matrix.
#[pyfunction]
fn hungarian(costs: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let a = matching::hungarian_min_assignment(&CostMatrix::new(costs).map_err(err)?);
    Ok((a.perm, a.total_cost))
}

#[pyfunction]
fn brute_force_assignment(costs: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let a = matching::brute_force_assignment(&CostMatrix::new(costs).map_err(err)?).map_err(err)?;
    Ok((a.perm, a.total_cost))
}

fn dists(
    items: Vec<Vec<f64>>,
    slogans: Vec<Vec<f64>>,
    template: Vec<f64>,
) -> PositionDistributions {
    PositionDistributions {
        items,
        slogans,
        template,
    }
}

/// Set loss of `target` under the given slot distributions.
#[pyfunction]
fn set_loss(
    items: Vec<Vec<f64>>,
    slogans: Vec<Vec<f64>>,
    template: Vec<f64>,
    target: Creative,
) -> PyResult<f64> {
    losses::set_loss_value(&dists(items, slogans, template), &creative(target))
        .map(|b| b.l_set_total)
        .map_err(err)
}

#[pyfunction]
fn xent_independent(
    items: Vec<Vec<f64>>,
    slogans: Vec<Vec<f64>>,
    template: Vec<f64>,
    target: Creative,
) -> PyResult<f64> {
    losses::xent_independent_value(&dists(items, slogans, template), &creative(target)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (items, slogans, template, positive, negatives, gamma=1.0))]
fn contrastive_loss(
    items: Vec<Vec<f64>>,
    slogans: Vec<Vec<f64>>,
    template: Vec<f64>,
    positive: Creative,
    negatives: Vec<Creative>,
    gamma: f64,
) -> PyResult<f64> {
    let negs: Vec<BundleCreative> = negatives.into_iter().map(creative).collect();
    losses::contrastive_loss_value(
        &dists(items, slogans, template),
        &creative(positive),
        &negs,
        gamma,
    )
    .map_err(err)
}

#[pyfunction]
fn hit_ratio(gold: Creative, generated: Creative) -> PyResult<f64> {
    let shape = conna_core::types::CreativeShape {
        items: gold.0.len(),
        slogans: gold.1.len(),
    };
    eval::hit_ratio(&creative(gold), &creative(generated), shape).map_err(err)
}

#[pyfunction]
fn diversity(items: Vec<usize>) -> f64 {
    eval::diversity(&items)
}

#[pymodule]
mod conna {
    #[pymodule_export]
    use super::{
        brute_force_assignment, contrastive_loss, cross_entropy, diversity, hit_ratio, hungarian,
        layer_norm, set_loss, softmax, train, xent_independent, Error, PyConfig, PyDataset,
        PyModel,
    };
}
