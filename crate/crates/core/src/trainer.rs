//! Optimization loop, checkpoints and the ablation drivers.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DecoderMode, Objective, RunConfig};
use crate::datagen::{Dataset, InteractionRecord};
use crate::decoder::{ar_teacher_forced, decode_nar};
use crate::encoder;
use crate::error::{ConnaError, Result};
use crate::eval::{self, EvalReport};
use crate::losses::{self, LossBreakdown};
use crate::model::{Model, ModelDims};
use crate::numeric::checkpoint::{self, CheckpointMeta};
use crate::numeric::{Gradients, ParamStore, Tape};
use crate::types::TypeOrdering;

impl ModelDims {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            vocab: cfg.data.vocab(),
            shape: cfg.data.shape(),
            history_len: cfg.data.history_len,
        }
    }
}

/// Fresh model for a run, seeded by the training seed.
pub fn init_model(cfg: &RunConfig) -> Result<Model> {
    cfg.validate()?;
    Model::new(
        cfg.model.clone(),
        ModelDims::from_config(cfg),
        cfg.train.seed,
    )
}

/// Adaptive moment estimation.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Parameters without a gradient this step keep their moments and values.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = params.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss and gradients of one record.
pub fn record_gradients(
    model: &Model,
    record: &InteractionRecord,
    cfg: &RunConfig,
) -> Result<(Gradients, LossBreakdown)> {
    let mut tape = Tape::new(&model.params);
    let enc = encoder::encode(&mut tape, model, &record.context)?;
    let (loss, breakdown) = match model.config.decoder {
        DecoderMode::Nar => {
            let lp = decode_nar(&mut tape, model, &enc)?;
            let t = &cfg.train;
            losses::total_loss(
                &mut tape,
                &lp,
                &record.positive,
                &record.negatives,
                t.objective,
                t.gamma,
                t.lambda,
            )?
        }
        DecoderMode::ArBaseline => {
            let lp = ar_teacher_forced(
                &mut tape,
                model,
                &enc,
                &record.positive,
                model.config.ar_ordering,
            )?;
            losses::total_loss(
                &mut tape,
                &lp,
                &record.positive,
                &[],
                Objective::IndependentXent,
                0.0,
                0.0,
            )?
        }
    };
    Ok((tape.backward(loss), breakdown))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_set: f64,
    pub l_cl: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_hit_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best dev epoch.
    pub model: Model,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_hit_ratio: f64,
    /// Step at which a non-finite loss stopped training.
    pub diverged_at: Option<usize>,
}

/// Averaged loss and gradients over a batch.
fn batch_gradients(
    model: &Model,
    batch: &[&InteractionRecord],
    cfg: &RunConfig,
) -> Result<(Gradients, StepLog)> {
    let mut grads = Gradients::new(model.params.len());
    let mut log = StepLog {
        step: 0,
        l_set: 0.0,
        l_cl: 0.0,
        l_total: 0.0,
    };
    for r in batch {
        let (g, b) = record_gradients(model, r, cfg)?;
        grads.merge(g);
        log.l_set += b.l_set_total;
        log.l_cl += b.l_contrastive;
        log.l_total += b.l_total;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    log.l_set *= inv;
    log.l_cl *= inv;
    log.l_total *= inv;
    Ok((grads, log))
}

/// Mini-batch Adam on the train split with early stopping on dev
/// HitRatio. Deterministic given the config.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, data, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    cfg: &RunConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(ConnaError::config("data.n_records", "train split is empty"));
    }
    let mut model = init_model(cfg)?;
    let t = &cfg.train;
    let mut opt = Adam::new(&model.params, t.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut order: Vec<&InteractionRecord> = data.train.iter().collect();

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best = (model.params.clone(), 0usize, f64::NEG_INFINITY);
    let mut stale = 0;
    let mut diverged_at = None;

    'epochs: for epoch in 1..=t.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(t.batch_size) {
            if t.max_steps > 0 && steps.len() >= t.max_steps {
                break;
            }
            let step = steps.len() + 1;
            let (grads, mut log) = match batch_gradients(&model, batch, cfg) {
                Ok(out) => out,
                Err(ConnaError::NumericDomain(_)) => {
                    diverged_at = Some(step);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            log.step = step;
            if !log.l_total.is_finite() || !grads.all_finite() {
                diverged_at = Some(step);
                break 'epochs;
            }
            opt.step(&mut model.params, &grads);
            loss_sum += log.l_total;
            batches += 1;
            steps.push(log);
        }
        if batches == 0 {
            break;
        }
        let dev_hit_ratio = if data.dev.is_empty() {
            0.0
        } else {
            eval::mean_hit_ratio(&model, &data.dev)?
        };
        let e = EpochLog {
            epoch,
            mean_loss: loss_sum / batches as f64,
            dev_hit_ratio,
        };
        on_epoch(&e);
        epochs.push(e);
        if dev_hit_ratio > best.2 {
            best = (model.params.clone(), epoch, dev_hit_ratio);
            stale = 0;
        } else {
            stale += 1;
            if stale >= t.patience {
                break;
            }
        }
    }

    let (params, best_epoch, best_dev) = if best.1 == 0 {
        // no completed epoch: keep the last finite parameters
        (model.params.clone(), 0, f64::NAN)
    } else {
        best
    };
    model.params = params;
    Ok(TrainOutcome {
        model,
        steps,
        epochs,
        best_epoch,
        best_dev_hit_ratio: best_dev,
        diverged_at,
    })
}

pub fn write_metrics_log(steps: &[StepLog], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for s in steps {
        serde_json::to_writer(&mut out, s).map_err(|e| ConnaError::Data(e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| ConnaError::io(path, e))
}

pub fn save_model(model: &Model, cfg: &RunConfig, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        seed: cfg.train.seed,
        config_hash: cfg.hash(),
    };
    checkpoint::save(path, &model.params, &meta)
}

/// Loads a checkpoint and checks it fits the architecture in `cfg`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model, CheckpointMeta)> {
    let (params, meta) = checkpoint::load(path)?;
    let model = Model::from_params(cfg.model.clone(), ModelDims::from_config(cfg), params)?;
    Ok((model, meta))
}

// ---- ablations --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mean_hit_ratio: f64,
    /// Sample standard deviation over seeds (0 for one seed).
    pub std_hit_ratio: f64,
    pub mean_diversity: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.title)?;
        write!(
            f,
            "{:<26} {:>10} {:>8} {:>10}",
            "variant", "hit_ratio", "std", "diversity"
        )?;
        for r in &self.rows {
            write!(
                f,
                "\n{:<26} {:>10.4} {:>8.4} {:>10.4}",
                r.label, r.mean_hit_ratio, r.std_hit_ratio, r.mean_diversity
            )?;
        }
        Ok(())
    }
}

fn summarize(label: String, reports: &[EvalReport]) -> AblationRow {
    let per_seed: Vec<f64> = reports.iter().map(|r| r.hit_ratio).collect();
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let var = if per_seed.len() > 1 {
        per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    AblationRow {
        label,
        mean_hit_ratio: mean,
        std_hit_ratio: var.sqrt(),
        mean_diversity: reports.iter().map(|r| r.diversity).sum::<f64>() / n,
        per_seed,
    }
}

fn train_and_test(cfg: &RunConfig, data: &Dataset) -> Result<EvalReport> {
    let out = train(cfg, data)?;
    eval::evaluate(&out.model, &data.test)
}

/// Full objective, set loss only and independent cross-entropy, each
/// trained once per seed on the same data.
pub fn ablate_objective(cfg: &RunConfig, data: &Dataset, seeds: &[u64]) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for objective in [
        Objective::SetContrastive,
        Objective::SetOnly,
        Objective::IndependentXent,
    ] {
        let mut reports = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone();
            c.model.decoder = DecoderMode::Nar;
            c.train.objective = objective;
            c.train.seed = seed;
            reports.push(train_and_test(&c, data)?);
        }
        rows.push(summarize(objective.label().to_string(), &reports));
    }
    Ok(AblationTable {
        title: "objective ablation (test HitRatio)".into(),
        rows,
    })
}

/// The autoregressive baseline trained once per type ordering, plus the
/// non-autoregressive model trained once and evaluated under every
/// ordering label.
pub fn ablate_ordering(
    cfg: &RunConfig,
    data: &Dataset,
    orderings: &[TypeOrdering],
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &ordering in orderings {
        let mut c = cfg.clone();
        c.model.decoder = DecoderMode::ArBaseline;
        c.model.ar_ordering = ordering;
        let report = train_and_test(&c, data)?;
        rows.push(summarize(format!("ar {ordering}"), &[report]));
    }
    let mut c = cfg.clone();
    c.model.decoder = DecoderMode::Nar;
    let nar = train(&c, data)?.model;
    for &ordering in orderings {
        let mut relabeled = nar.clone();
        relabeled.config.ar_ordering = ordering;
        let report = eval::evaluate(&relabeled, &data.test)?;
        rows.push(summarize(format!("nar {ordering}"), &[report]));
    }
    Ok(AblationTable {
        title: "type ordering (test HitRatio)".into(),
        rows,
    })
}
