//! Training loop: forward through both mappers and the frozen composer,
//! semantic-set selection, the combined loss, backward, AdamW.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{Composer, Template};
use crate::error::{Error, Result};
use crate::mappers::{MapperPair, MapperParams, MapperVars};
use crate::numerics::{self, Tape, Tensor, Var};
use crate::objectives::{self, BatchEmbeddings, BatchVars, LossWeights};
use crate::rng::{derive_seed, rng_from, DetRng};
use crate::sset::{self, SelectMode};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn default_batch_size() -> usize {
    64
}
fn default_steps() -> usize {
    500
}
fn default_lr() -> f32 {
    5e-4
}
fn default_wd() -> f32 {
    0.1
}
fn default_warmup() -> usize {
    50
}
fn default_temp() -> f32 {
    0.01
}
fn default_lambda() -> f32 {
    sset::DEFAULT_LAMBDA
}
fn default_alpha() -> f32 {
    1.0
}
fn default_beta() -> f32 {
    2.0
}
fn default_dim() -> usize {
    32
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_wd")]
    pub weight_decay: f32,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_temp")]
    pub tau: f32,
    #[serde(default = "default_temp")]
    pub sigma: f32,
    #[serde(default = "default_lambda")]
    pub lambda: f32,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default = "default_beta")]
    pub beta: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub use_itcon: bool,
    #[serde(default = "yes")]
    pub use_mse: bool,
    #[serde(default = "yes")]
    pub use_sset: bool,
    #[serde(default)]
    pub sset_select: SelectMode,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Mapper hidden width; 4 * dim when absent.
    #[serde(default)]
    pub hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(4 * self.dim)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
        }
    }

    /// The "w/o all" row: only the pseudo-token contrastive term.
    pub fn without_all(mut self) -> Self {
        self.use_itcon = false;
        self.use_mse = false;
        self.use_sset = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("steps", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        if self.dim == 0 || self.hidden_width() == 0 {
            return Err(Error::param("dim", "dimensions must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate", "must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::param("weight_decay", "must be finite and >= 0"));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::param("sigma", "must be finite and > 0"));
        }
        if !self.lambda.is_finite() {
            return Err(Error::param("lambda", "must be finite"));
        }
        self.loss_weights().validate()
    }
}

pub fn lr_schedule(step: usize, base_lr: f32, warmup_steps: usize) -> f32 {
    if step < warmup_steps {
        (base_lr as f64 * step as f64 / warmup_steps as f64) as f32
    } else {
        base_lr
    }
}

/// First and second moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        OptimizerState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update. Decay is applied to the parameter first,
/// then the Adam delta.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    lr_t: f32,
    weight_decay: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.m.len() != state.v.len() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "{} params, {} grads, {} moment pairs",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("tensor {}: param {:?}, grad {:?}", i, p.shape(), g.shape()),
            ));
        }
    }
    if !(lr_t >= 0.0) {
        return Err(Error::param("lr_t", format!("must be >= 0, got {}", lr_t)));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = lr_t as f64;
    let decay = 1.0 - lr * weight_decay as f64;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj as f64;
            let mj = ADAM_BETA1 * m[j] as f64 + (1.0 - ADAM_BETA1) * gj;
            let vj = ADAM_BETA2 * v[j] as f64 + (1.0 - ADAM_BETA2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let m_hat = mj / bc1;
            let v_hat = vj / bc2;
            let decayed = *theta as f64 * decay;
            *theta = (decayed - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
        }
    }
    Ok(())
}

/// Aligned (image, text) embedding pairs, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub images: Tensor,
    pub texts: Tensor,
}

impl PairDataset {
    pub fn new(images: Tensor, texts: Tensor) -> Result<Self> {
        if images.shape().len() != 2 || images.shape() != texts.shape() {
            return Err(Error::shape(
                "dataset",
                format!("images {:?}, texts {:?}", images.shape(), texts.shape()),
            ));
        }
        Ok(PairDataset { images, texts })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        Ok((
            numerics::select_rows(&self.images, indices)?,
            numerics::select_rows(&self.texts, indices)?,
        ))
    }
}

struct Recorded {
    phi: MapperVars,
    phi_ts: MapperVars,
    batch: BatchVars,
}

fn record_forward(
    tape: &mut Tape,
    images: &Tensor,
    texts: &Tensor,
    mappers: &MapperPair,
    composer: &Composer,
) -> Result<Recorded> {
    let phi = mappers.phi.register(tape);
    let phi_ts = mappers.phi_ts.register(tape);
    let v = tape.constant(images.clone());
    let w = tape.constant(texts.clone());
    let pseudo = mappers.phi.forward(tape, &phi, v)?;
    let supplement = mappers.phi_ts.forward(tape, &phi_ts, w)?;
    let composed_pseudo = composer.compose(tape, Template::PhotoOf, &[pseudo])?;
    let composed_supplement = composer.compose(tape, Template::PhotoOf, &[supplement])?;
    Ok(Recorded {
        phi,
        phi_ts,
        batch: BatchVars {
            images: v,
            texts: w,
            composed_pseudo,
            composed_supplement,
        },
    })
}

/// Composed blocks for one batch of pairs, without gradients.
pub fn forward_batch(
    images: &Tensor,
    texts: &Tensor,
    mappers: &MapperPair,
    composer: &Composer,
) -> Result<BatchEmbeddings> {
    if images.shape() != texts.shape() {
        return Err(Error::shape(
            "forward_batch",
            format!("images {:?}, texts {:?}", images.shape(), texts.shape()),
        ));
    }
    if images.cols() != composer.dim() || mappers.dim() != composer.dim() {
        return Err(Error::shape(
            "forward_batch",
            format!(
                "embedding width {}, mapper dim {}, composer dim {}",
                images.cols(),
                mappers.dim(),
                composer.dim()
            ),
        ));
    }
    let mut tape = Tape::new();
    let r = record_forward(&mut tape, images, texts, mappers, composer)?;
    BatchEmbeddings::new(
        images.clone(),
        texts.clone(),
        tape.value(r.batch.composed_pseudo).clone(),
        tape.value(r.batch.composed_supplement).clone(),
    )
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f32,
    #[serde(rename = "L_ori")]
    pub l_ori: f32,
    #[serde(rename = "L_itcon")]
    pub l_itcon: f32,
    #[serde(rename = "L_mse")]
    pub l_mse: f32,
    #[serde(rename = "L_ts")]
    pub l_ts: f32,
    #[serde(rename = "L_ss")]
    pub l_ss: f32,
    #[serde(rename = "L_deg")]
    pub l_deg: f32,
    #[serde(rename = "N_S")]
    pub n_s: usize,
}

/// Stateful trainer; `step()` advances one optimizer step.
pub struct Trainer<'a> {
    config: TrainConfig,
    composer: &'a Composer,
    data: &'a PairDataset,
    mappers: MapperPair,
    optimizer: OptimizerState,
    shuffle_rng: DetRng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    /// Mappers are initialized from seeds derived from `config.seed`.
    pub fn new(config: TrainConfig, composer: &'a Composer, data: &'a PairDataset) -> Result<Self> {
        let mappers = MapperPair::init(
            config.dim,
            config.hidden_width(),
            derive_seed(config.seed, "phi"),
            derive_seed(config.seed, "phi_ts"),
        )?;
        Self::with_mappers(config, composer, data, mappers)
    }

    pub fn with_mappers(
        config: TrainConfig,
        composer: &'a Composer,
        data: &'a PairDataset,
        mappers: MapperPair,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyDataset("no training pairs".into()));
        }
        if data.len() < config.batch_size {
            return Err(Error::EmptyDataset(format!(
                "{} pairs cannot fill one batch of {}",
                data.len(),
                config.batch_size
            )));
        }
        if data.dim() != composer.dim() || mappers.dim() != composer.dim() || config.dim != composer.dim() {
            return Err(Error::shape(
                "train",
                format!(
                    "data dim {}, config dim {}, mapper dim {}, composer dim {}",
                    data.dim(),
                    config.dim,
                    mappers.dim(),
                    composer.dim()
                ),
            ));
        }
        let optimizer = OptimizerState::for_params(
            mappers
                .phi
                .named_tensors()
                .into_iter()
                .chain(mappers.phi_ts.named_tensors())
                .map(|(_, t)| t),
        );
        Ok(Trainer {
            shuffle_rng: rng_from(derive_seed(config.seed, "shuffle")),
            config,
            composer,
            data,
            mappers,
            optimizer,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    pub fn mappers(&self) -> &MapperPair {
        &self.mappers
    }

    pub fn into_mappers(self) -> MapperPair {
        self.mappers
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Next full batch; reshuffles at epoch boundaries and drops the tail.
    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.config.batch_size;
        if self.order.is_empty() || self.cursor + b > self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.shuffle_rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        idx
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let cfg = &self.config;
        let step = self.step;
        let lr = lr_schedule(step, cfg.learning_rate, cfg.warmup_steps);
        let indices = self.next_batch();
        let cfg = &self.config;
        let (images, texts) = self.data.batch(&indices)?;

        let mut tape = Tape::new();
        let rec = record_forward(&mut tape, &images, &texts, &self.mappers, self.composer)?;
        let b = rec.batch;

        let ori = objectives::loss_ori(&mut tape, &b, cfg.tau)?;
        let itcon = if cfg.use_itcon {
            Some(objectives::loss_itcon(&mut tape, &b, cfg.tau)?)
        } else {
            None
        };
        let mse = if cfg.use_mse {
            Some(objectives::loss_mse(&mut tape, &b)?)
        } else {
            None
        };
        let (ss, n_s) = if cfg.use_sset {
            let sel = sset::select_with_mode(&images, &texts, cfg.sigma, cfg.lambda, cfg.sset_select)?;
            let ss = objectives::loss_sset(&mut tape, &b, &sel.selected, cfg.tau)?;
            (Some(ss), sel.len())
        } else {
            (None, 0)
        };

        // Terms are chained only when active so that a disabled term leaves
        // no trace in the gradient.
        let ts = match (itcon, mse) {
            (Some(i), Some(m)) => {
                let w = tape.scale(m, cfg.alpha);
                Some(tape.add(i, w)?)
            }
            (Some(i), None) => Some(i),
            (None, Some(m)) => Some(tape.scale(m, cfg.alpha)),
            (None, None) => None,
        };
        let mut total = ori;
        if let Some(ts) = ts {
            total = tape.add(total, ts)?;
        }
        if let Some(ss) = ss {
            if cfg.beta != 0.0 {
                let w = tape.scale(ss, cfg.beta);
                total = tape.add(total, w)?;
            }
        }

        let value = |v: Option<Var>| -> Result<f32> {
            match v {
                Some(v) => tape.value(v).item(),
                None => Ok(0.0),
            }
        };
        let log = StepLog {
            step,
            lr,
            l_ori: tape.value(ori).item()?,
            l_itcon: value(itcon)?,
            l_mse: value(mse)?,
            l_ts: value(ts)?,
            l_ss: value(ss)?,
            l_deg: tape.value(total).item()?,
            n_s,
        };
        if !log.l_deg.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!(
                    "L_ori={} L_itcon={} L_mse={} L_ss={}",
                    log.l_ori, log.l_itcon, log.l_mse, log.l_ss
                ),
            });
        }

        let grads = tape.backward(total)?;
        let vars: Vec<Var> = rec.phi.all().chain(rec.phi_ts.all()).collect();
        let grad_tensors: Vec<&Tensor> = vars
            .iter()
            .map(|v| grads.get(*v).ok_or_else(|| Error::Contract("missing mapper gradient".into())))
            .collect::<Result<_>>()?;
        let mut params: Vec<&mut Tensor> = self
            .mappers
            .phi
            .tensors_mut()
            .chain(self.mappers.phi_ts.tensors_mut())
            .collect();
        adamw_step(&mut params, &grad_tensors, &mut self.optimizer, lr, cfg.weight_decay)?;
        if !self.mappers.all_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "mapper parameters left the finite range".into(),
            });
        }
        self.step += 1;
        Ok(log)
    }

    /// Runs the remaining configured steps.
    pub fn run(&mut self) -> Result<Vec<StepLog>> {
        let mut log = Vec::with_capacity(self.config.steps.saturating_sub(self.step));
        while self.step < self.config.steps {
            log.push(self.step()?);
        }
        Ok(log)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub mappers: MapperPair,
    pub optimizer: OptimizerState,
    pub log: Vec<StepLog>,
}

pub fn train(config: &TrainConfig, data: &PairDataset, composer: &Composer) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), composer, data)?;
    let log = t.run()?;
    Ok(TrainOutcome {
        optimizer: t.optimizer.clone(),
        mappers: t.mappers,
        log,
    })
}

/// Parameters as a flat vector, `phi` then `phi_ts`, for comparisons.
pub fn flat_params(mappers: &MapperPair) -> Vec<f32> {
    fn push(out: &mut Vec<f32>, m: &MapperParams) {
        for (_, t) in m.named_tensors() {
            out.extend_from_slice(t.data());
        }
    }
    let mut out = Vec::new();
    push(&mut out, &mappers.phi);
    push(&mut out, &mappers.phi_ts);
    out
}
