//! Action-conditioned collision predictor and its weight posteriors.
//!
//! Every posterior kind implements [`Posterior`] and is created by name through
//! [`new_posterior`]; the evaluation code only ever sees `dyn Posterior`.

mod kinds;
mod net;

pub use kinds::{bbb_kl, Bbb, ConcreteDropout, Deterministic, Ensemble};
pub use net::{probabilities, PredictorArch, PredictorNet, GATED_LAYERS};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConcreteDropoutConfig;
use crate::pipeline::RiskEstimate;
use crate::seed::{derive_seed, rng_for};
use crate::sim::{ActionSequence, Dataset, Labels, HORIZON};
use crate::tensor::{AdamConfig, Adam, BoundParams, ParamStore, Record, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub arch: PredictorArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Ensemble size.
    pub members: usize,
    /// Resample each member's training set with replacement.
    pub bootstrap: bool,
    pub dropout: ConcreteDropoutConfig,
    pub prior_sigma: f32,
    /// Initial ρ of every weight; σ = softplus(ρ).
    pub rho_init: f32,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            arch: PredictorArch::default(),
            epochs: 12,
            batch_size: 32,
            adam: AdamConfig::default(),
            members: 5,
            bootstrap: false,
            dropout: ConcreteDropoutConfig::default(),
            prior_sigma: 1.0,
            rho_init: -5.0,
        }
    }
}

/// Images, steering sequences and labels in training layout.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub images: Vec<Vec<f32>>,
    pub actions: Vec<ActionSequence>,
    pub labels: Vec<Labels>,
}

impl TrainingSet {
    pub fn from_dataset(d: &Dataset) -> Self {
        TrainingSet {
            images: d.motions.iter().map(|m| m.observation.to_floats()).collect(),
            actions: d.motions.iter().map(|m| m.actions).collect(),
            labels: d.motions.iter().map(|m| m.labels).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub(crate) fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let pix = self.images.first().map_or(0, Vec::len);
        let mut x = Vec::with_capacity(idx.len() * pix);
        let mut a = Vec::with_capacity(idx.len() * HORIZON);
        let mut y = Vec::with_capacity(idx.len() * HORIZON);
        for &i in idx {
            x.extend_from_slice(&self.images[i]);
            a.extend_from_slice(&self.actions[i]);
            y.extend(self.labels[i].iter().map(|&l| l as f32));
        }
        Ok((
            Tensor::new(vec![idx.len(), pix], x)?,
            Tensor::new(vec![idx.len(), HORIZON], a)?,
            Tensor::new(vec![idx.len(), HORIZON], y)?,
        ))
    }
}

/// Stacks flat images and steering sequences into predictor inputs.
pub fn stack_inputs(images: &[&[f32]], actions: &[ActionSequence]) -> Result<(Tensor, Tensor)> {
    if images.len() != actions.len() {
        return Err(Error::Dimension(format!(
            "{} images but {} action sequences",
            images.len(),
            actions.len()
        )));
    }
    let pix = images.first().map_or(0, |i| i.len());
    let mut x = Vec::with_capacity(images.len() * pix);
    for im in images {
        if im.len() != pix {
            return Err(Error::Dimension(format!("image of {} values, expected {pix}", im.len())));
        }
        x.extend_from_slice(im);
    }
    let a: Vec<f32> = actions.iter().flatten().copied().collect();
    Ok((
        Tensor::new(vec![images.len(), pix], x)?,
        Tensor::new(vec![actions.len(), HORIZON], a)?,
    ))
}

/// One row of a predictor training trace; epoch 0 is before any update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRow {
    pub member: usize,
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
}

pub fn train_trace_csv(rows: &[TrainRow]) -> String {
    let mut s = String::from("member,epoch,loss,bce\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6}\n", r.member, r.epoch, r.loss, r.bce));
    }
    s
}

/// A weight posterior over [`PredictorNet`] parameters.
pub trait Posterior: Send + Sync {
    fn kind(&self) -> &'static str;

    fn net(&self) -> &PredictorNet;

    fn is_trained(&self) -> bool;

    fn train(&mut self, data: &TrainingSet, seed: u64) -> Result<Vec<TrainRow>>;

    /// Draws sharing a key produce identical predictions; `None` means every
    /// draw is distinct. Lets callers skip repeated forward passes.
    fn draw_key(&self, draw_seed: u64) -> Option<u64>;

    /// Per-step logits `[N·16]` under one weight draw shared by the whole batch.
    fn logits(&self, x: &Tensor, actions: &Tensor, draw_seed: u64) -> Result<Vec<f32>>;

    /// Weight records without provenance; the kind record comes first.
    fn records(&self) -> Vec<Record>;

    fn load(&mut self, records: &[Record]) -> Result<()>;
}

pub type PosteriorFactory = fn(&PredictorConfig, (usize, usize, usize), u64) -> Result<Box<dyn Posterior>>;

/// Registered posterior kinds, by name.
pub fn registry() -> &'static [(&'static str, PosteriorFactory)] {
    &[
        ("deterministic", |c, d, s| Ok(Box::new(Deterministic::new(c, d, s)?))),
        ("ensemble", |c, d, s| Ok(Box::new(Ensemble::new(c, d, s)?))),
        ("dropout", |c, d, s| Ok(Box::new(ConcreteDropout::new(c, d, s)?))),
        ("bbb", |c, d, s| Ok(Box::new(Bbb::new(c, d, s)?))),
    ]
}

pub fn posterior_kinds() -> Vec<&'static str> {
    registry().iter().map(|(k, _)| *k).collect()
}

pub fn new_posterior(
    kind: &str,
    config: &PredictorConfig,
    dims: (usize, usize, usize),
    seed: u64,
) -> Result<Box<dyn Posterior>> {
    let (_, make) = registry().iter().find(|(k, _)| *k == kind).ok_or_else(|| {
        Error::Config(format!(
            "unknown posterior kind {kind:?}; valid kinds: {}",
            posterior_kinds().join(", ")
        ))
    })?;
    make(config, dims, seed)
}

/// Rebuilds a trained posterior from its records; the kind comes from the file.
pub fn load_posterior(records: &[Record], config: &PredictorConfig, dims: (usize, usize, usize)) -> Result<Box<dyn Posterior>> {
    let kind = crate::artifact::kind_of(records)
        .ok_or_else(|| Error::Format("weights file has no kind record".into()))?;
    let mut config = config.clone();
    if kind == "ensemble" {
        let members = records
            .iter()
            .filter_map(|r| r.name.strip_prefix("member")?.split_once('/'))
            .filter_map(|(i, _)| i.parse::<usize>().ok())
            .max()
            .map_or(0, |m| m + 1);
        config.members = members;
    }
    let mut p = new_posterior(kind, &config, dims, 0)?;
    p.load(records)?;
    Ok(p)
}

/// Builds one batch's objective on a tape; returns `(loss, bce)`.
pub(crate) type Objective<'o> =
    dyn FnMut(&mut Tape, &ParamStore, BoundParams, Var, &Tensor, &Tensor, &mut rand_chacha::ChaCha8Rng) -> Result<(Var, Var)> + 'o;

/// Minibatch Adam over `pool` (indices into `data`, repeats allowed).
pub(crate) fn fit(
    params: &mut ParamStore,
    cfg: &PredictorConfig,
    data: &TrainingSet,
    pool: &[usize],
    seed: u64,
    member: usize,
    objective: &mut Objective,
) -> Result<Vec<TrainRow>> {
    if pool.is_empty() {
        return Err(Error::Contract("predictor training set is empty".into()));
    }
    let coords = [member as u64];
    let eval = |params: &ParamStore, objective: &mut Objective, idx: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
        let (x, a, y) = data.batch(idx)?;
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let (loss, bce) = objective(&mut tape, params, bound, xv, &a, &y, rng)?;
        Ok::<_, Error>((tape.value(loss).data()[0] as f64, tape.value(bce).data()[0] as f64))
    };
    let probe: Vec<usize> = pool.iter().take(256).copied().collect();
    let mut rng = rng_for(seed, "predictor-probe", &coords);
    let (l0, b0) = eval(params, objective, &probe, &mut rng)?;
    let mut trace = vec![TrainRow {
        member,
        epoch: 0,
        loss: l0,
        bce: b0,
    }];
    let mut adam = Adam::new(cfg.adam);
    let mut order = pool.to_vec();
    for epoch in 1..=cfg.epochs {
        let mut rng = rng_for(seed, "predictor-epoch", &[member as u64, epoch as u64]);
        order.shuffle(&mut rng);
        let mut acc = [0f64; 2];
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let (x, a, y) = data.batch(idx)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xv = tape.constant(x);
            let step = (|| {
                let (loss, bce) = objective(&mut tape, params, bound.clone(), xv, &a, &y, &mut rng)?;
                let vals = [tape.value(loss).data()[0] as f64, tape.value(bce).data()[0] as f64];
                if !vals.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite loss {vals:?}")));
                }
                let mut grads = tape.backward(loss)?;
                Ok((vals, bound.collect(&mut grads)))
            })();
            let (vals, grads) = step.map_err(|e| {
                Error::Numeric(format!(
                    "predictor training diverged (member {member}, epoch {epoch}): {e}; trace so far: {trace:?}"
                ))
            })?;
            adam.step(params, &grads)?;
            for (s, v) in acc.iter_mut().zip(vals) {
                *s += v * idx.len() as f64;
            }
        }
        let n = order.len() as f64;
        let row = TrainRow {
            member,
            epoch,
            loss: acc[0] / n,
            bce: acc[1] / n,
        };
        log::info!("predictor member {member} epoch {epoch}: loss {:.4} bce {:.4}", row.loss, row.bce);
        trace.push(row);
    }
    Ok(trace)
}

/// How a probability profile becomes a time to collision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TtcMode {
    /// First step whose probability exceeds the threshold.
    Threshold,
    /// First step of a sampled Bernoulli chain.
    Bernoulli,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtcRule {
    pub dt: f64,
    pub p_thresh: f32,
    pub mode: TtcMode,
}

impl Default for TtcRule {
    fn default() -> Self {
        TtcRule {
            dt: 0.125,
            p_thresh: 0.5,
            mode: TtcMode::Threshold,
        }
    }
}

impl TtcRule {
    /// Value reported when no collision is predicted within the horizon.
    pub fn sentinel(&self) -> f64 {
        (HORIZON as f64 + 1.0) * self.dt
    }

    fn apply(&self, probs: &[f32], rng: &mut impl Rng) -> f64 {
        match self.mode {
            TtcMode::Threshold => ttc_from_profile(probs, self.dt, self.p_thresh),
            TtcMode::Bernoulli => {
                let hit = probs.iter().position(|&p| rng.gen::<f32>() < p);
                hit.map_or((probs.len() as f64 + 1.0) * self.dt, |i| self.dt * (i as f64 + 1.0))
            }
        }
    }
}

/// `dt·(1 + first index with p > p_thresh)`, or `(len + 1)·dt` when none.
pub fn ttc_from_profile(probs: &[f32], dt: f64, p_thresh: f32) -> f64 {
    match probs.iter().position(|&p| p > p_thresh) {
        Some(i) => dt * (i as f64 + 1.0),
        None => dt * (probs.len() as f64 + 1.0),
    }
}

fn require_trained(p: &dyn Posterior) -> Result<()> {
    if p.is_trained() {
        Ok(())
    } else {
        Err(Error::Contract(format!("{} posterior has not been trained", p.kind())))
    }
}

/// One weight draw's collision probabilities for a single motion.
pub fn predict(p: &dyn Posterior, x: &[f32], actions: &ActionSequence, draw_seed: u64) -> Result<Vec<f32>> {
    require_trained(p)?;
    let (xt, at) = stack_inputs(&[x], &[*actions])?;
    Ok(probabilities(&p.logits(&xt, &at, draw_seed)?))
}

/// Rows per forward pass when predicting many motions.
pub const PREDICT_CHUNK: usize = 256;

/// TTC samples `[motion][draw]` for the given draw seeds; `offset` is the
/// index of the first motion in the full set. Rows are processed in
/// fixed chunks; each draw is shared by every motion and draws with equal
/// [`Posterior::draw_key`] are computed once.
pub fn ttc_samples(
    p: &dyn Posterior,
    images: &[&[f32]],
    actions: &[ActionSequence],
    draw_seeds: &[u64],
    rule: &TtcRule,
    offset: usize,
) -> Result<Vec<Vec<f64>>> {
    require_trained(p)?;
    let mut out = vec![Vec::with_capacity(draw_seeds.len()); images.len()];
    for (c, (ims, acts)) in images.chunks(PREDICT_CHUNK).zip(actions.chunks(PREDICT_CHUNK)).enumerate() {
        let (x, a) = stack_inputs(ims, acts)?;
        let mut cache: Vec<(u64, Vec<Vec<f32>>)> = Vec::new();
        for &ds in draw_seeds {
            let key = p.draw_key(ds);
            let cached = key.and_then(|k| cache.iter().position(|(ck, _)| *ck == k));
            let profiles = match cached {
                Some(i) => cache[i].1.clone(),
                None => {
                    let probs = probabilities(&p.logits(&x, &a, ds)?);
                    let rows: Vec<Vec<f32>> = probs.chunks(HORIZON).map(<[f32]>::to_vec).collect();
                    if let Some(k) = key {
                        cache.push((k, rows.clone()));
                    }
                    rows
                }
            };
            for (r, prof) in profiles.iter().enumerate() {
                let m = c * PREDICT_CHUNK + r;
                let mut rng = rng_for(ds, "ttc-chain", &[(offset + m) as u64]);
                out[m].push(rule.apply(prof, &mut rng));
            }
        }
    }
    Ok(out)
}

/// Seed of the `w`-th weight draw for direct (non-projected) prediction.
pub fn direct_draw_seed(seed: u64, w: usize) -> u64 {
    derive_seed(seed, "weight-draw", &[w as u64])
}

/// `n_w` weight draws per motion pooled into a [`RiskEstimate`] each.
pub fn mc_predict_direct_batch(
    p: &dyn Posterior,
    images: &[&[f32]],
    actions: &[ActionSequence],
    n_w: usize,
    seed: u64,
    rule: &TtcRule,
) -> Result<Vec<RiskEstimate>> {
    if n_w == 0 {
        return Err(Error::Contract("n_w must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..n_w).map(|w| direct_draw_seed(seed, w)).collect();
    let samples = ttc_samples(p, images, actions, &seeds, rule, 0)?;
    Ok(samples
        .into_iter()
        .map(|s| RiskEstimate::from_samples(s, 1, n_w, rule.sentinel()))
        .collect())
}

pub fn mc_predict_direct(
    p: &dyn Posterior,
    x: &[f32],
    actions: &ActionSequence,
    n_w: usize,
    seed: u64,
    rule: &TtcRule,
) -> Result<RiskEstimate> {
    Ok(mc_predict_direct_batch(p, &[x], &[*actions], n_w, seed, rule)?.remove(0))
}

/// Mean per-step BCE of point predictions averaged over `draws` weight draws.
pub fn mean_bce(p: &dyn Posterior, data: &TrainingSet, draws: usize, seed: u64) -> Result<f64> {
    require_trained(p)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0f64;
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let (x, a, y) = data.batch(chunk)?;
        let mut mean = vec![0f64; chunk.len() * HORIZON];
        for d in 0..draws.max(1) {
            let probs = probabilities(&p.logits(&x, &a, direct_draw_seed(seed, d))?);
            for (m, q) in mean.iter_mut().zip(probs) {
                *m += q as f64 / draws.max(1) as f64;
            }
        }
        for (q, &l) in mean.iter().zip(y.data()) {
            let q = q.clamp(1e-6, 1.0 - 1e-6);
            total -= if l > 0.5 { q.ln() } else { (1.0 - q).ln() };
        }
    }
    Ok(total / (data.len() * HORIZON) as f64)
}
