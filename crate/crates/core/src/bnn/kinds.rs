use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{fit, Objective, Posterior, PredictorConfig, PredictorNet, TrainRow, TrainingSet, GATED_LAYERS};
use crate::artifact::kind_record;
use crate::error::{Error, Result};
use crate::nn::{concrete_dropout_gate, concrete_dropout_regularizer, logistic_noise, ForwardContext, PointWeights};
use crate::seed::{derive_seed, rng_for};
use crate::sim::HORIZON;
use crate::tensor::{BoundParams, ParamStore, Record, Tape, Tensor, Var};
use crate::vae::standard_normal;

fn init_store(net: &PredictorNet, seed: u64, member: usize) -> ParamStore {
    net.init_params(&mut rng_for(seed, "predictor-init", &[member as u64]))
}

fn point_logits(net: &PredictorNet, store: &ParamStore, x: &Tensor, a: &Tensor) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let mut ctx = PointWeights::frozen(store, &mut tape);
    let xv = tape.constant(x.clone());
    let l = net.logits(&mut tape, &mut ctx, xv, a)?;
    Ok(tape.value(l).data().to_vec())
}

fn point_objective(net: &PredictorNet) -> impl FnMut(&mut Tape, &ParamStore, BoundParams, Var, &Tensor, &Tensor, &mut ChaCha8Rng) -> Result<(Var, Var)> + '_ {
    move |tape, store, bound, x, a, y, _rng| {
        let mut ctx = PointWeights::from_bound(store, bound);
        let l = net.logits(tape, &mut ctx, x, a)?;
        let bce = tape.bce_with_logits(l, y)?;
        Ok((bce, bce))
    }
}

/// A single MAP network.
pub struct Deterministic {
    net: PredictorNet,
    config: PredictorConfig,
    pub params: ParamStore,
    trained: bool,
}

impl Deterministic {
    pub fn new(config: &PredictorConfig, dims: (usize, usize, usize), seed: u64) -> Result<Self> {
        let net = PredictorNet::new(config.arch.clone(), dims)?;
        Ok(Deterministic {
            params: init_store(&net, seed, 0),
            net,
            config: config.clone(),
            trained: false,
        })
    }

    /// Wraps given weights as a trained model.
    pub fn from_params(net: PredictorNet, params: ParamStore) -> Self {
        Deterministic {
            net,
            config: PredictorConfig::default(),
            params,
            trained: true,
        }
    }
}

impl Posterior for Deterministic {
    fn kind(&self) -> &'static str {
        "deterministic"
    }
    fn net(&self) -> &PredictorNet {
        &self.net
    }
    fn is_trained(&self) -> bool {
        self.trained
    }

    fn train(&mut self, data: &TrainingSet, seed: u64) -> Result<Vec<TrainRow>> {
        let pool: Vec<usize> = (0..data.len()).collect();
        let mut obj = point_objective(&self.net);
        let trace = fit(&mut self.params, &self.config, data, &pool, seed, 0, &mut obj)?;
        self.trained = true;
        Ok(trace)
    }

    fn draw_key(&self, _draw_seed: u64) -> Option<u64> {
        Some(0)
    }

    fn logits(&self, x: &Tensor, a: &Tensor, _draw_seed: u64) -> Result<Vec<f32>> {
        point_logits(&self.net, &self.params, x, a)
    }

    fn records(&self) -> Vec<Record> {
        let mut out = vec![kind_record(self.kind())];
        out.extend(self.params.to_records(""));
        out
    }

    fn load(&mut self, records: &[Record]) -> Result<()> {
        self.params.load_records(records, "")?;
        self.trained = true;
        Ok(())
    }
}

/// M independently initialised networks; each draw picks one uniformly.
pub struct Ensemble {
    net: PredictorNet,
    config: PredictorConfig,
    pub members: Vec<ParamStore>,
    trained: bool,
}

impl Ensemble {
    pub fn new(config: &PredictorConfig, dims: (usize, usize, usize), seed: u64) -> Result<Self> {
        if config.members == 0 {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        let net = PredictorNet::new(config.arch.clone(), dims)?;
        Ok(Ensemble {
            members: (0..config.members).map(|i| init_store(&net, seed, i)).collect(),
            net,
            config: config.clone(),
            trained: false,
        })
    }

    pub fn member_for(&self, draw_seed: u64) -> usize {
        (derive_seed(draw_seed, "member", &[]) % self.members.len() as u64) as usize
    }
}

impl Posterior for Ensemble {
    fn kind(&self) -> &'static str {
        "ensemble"
    }
    fn net(&self) -> &PredictorNet {
        &self.net
    }
    fn is_trained(&self) -> bool {
        self.trained
    }

    fn train(&mut self, data: &TrainingSet, seed: u64) -> Result<Vec<TrainRow>> {
        let mut trace = Vec::new();
        let n = data.len();
        for (i, params) in self.members.iter_mut().enumerate() {
            let pool: Vec<usize> = if self.config.bootstrap {
                let mut rng = rng_for(seed, "bootstrap", &[i as u64]);
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut obj = point_objective(&self.net);
            trace.extend(fit(params, &self.config, data, &pool, seed, i, &mut obj)?);
        }
        self.trained = true;
        Ok(trace)
    }

    fn draw_key(&self, draw_seed: u64) -> Option<u64> {
        Some(self.member_for(draw_seed) as u64)
    }

    fn logits(&self, x: &Tensor, a: &Tensor, draw_seed: u64) -> Result<Vec<f32>> {
        point_logits(&self.net, &self.members[self.member_for(draw_seed)], x, a)
    }

    fn records(&self) -> Vec<Record> {
        let mut out = vec![kind_record(self.kind())];
        for (i, m) in self.members.iter().enumerate() {
            out.extend(m.to_records(&format!("member{i}/")));
        }
        out
    }

    fn load(&mut self, records: &[Record]) -> Result<()> {
        for (i, m) in self.members.iter_mut().enumerate() {
            m.load_records(records, &format!("member{i}/"))?;
        }
        self.trained = true;
        Ok(())
    }
}

fn rate_name(layer: &str) -> String {
    format!("{layer}.p")
}

/// Gates the outputs of [`GATED_LAYERS`] with concrete dropout.
///
/// With `tiled` set, one mask per example is drawn and repeated over the
/// batch, so every row sees the same sub-network.
struct Gated<'a, R: Rng> {
    inner: PointWeights<'a>,
    rng: &'a mut R,
    temperature: f32,
    batch: usize,
    tiled: bool,
}

impl<R: Rng> ForwardContext for Gated<'_, R> {
    fn weight(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        self.inner.weight(tape, name)
    }

    fn after_layer(&mut self, tape: &mut Tape, layer: &str, x: Var) -> Result<Var> {
        if !GATED_LAYERS.contains(&layer) {
            return Ok(x);
        }
        let logit = self.inner.weight(tape, &rate_name(layer))?;
        let shape = tape.shape(x).to_vec();
        let noise = if self.tiled {
            let per = shape.iter().product::<usize>() / self.batch;
            let one = logistic_noise(self.rng, &[per]);
            let data: Vec<f32> = one.data().iter().copied().cycle().take(per * self.batch).collect();
            Tensor::new(shape, data)?
        } else {
            logistic_noise(self.rng, &shape)
        };
        concrete_dropout_gate(tape, x, logit, self.temperature, &noise)
    }
}

/// One network whose dense-layer outputs pass learnable-rate concrete dropout.
pub struct ConcreteDropout {
    net: PredictorNet,
    config: PredictorConfig,
    pub params: ParamStore,
    trained: bool,
}

impl ConcreteDropout {
    pub fn new(config: &PredictorConfig, dims: (usize, usize, usize), seed: u64) -> Result<Self> {
        let net = PredictorNet::new(config.arch.clone(), dims)?;
        let mut params = init_store(&net, seed, 0);
        let p0 = config.dropout.initial_rate;
        if !(p0 > 0.0 && p0 < 1.0) {
            return Err(Error::Config(format!("dropout initial rate {p0} outside (0, 1)")));
        }
        for l in GATED_LAYERS {
            params.insert(rate_name(l), Tensor::scalar((p0 / (1.0 - p0)).ln()));
        }
        Ok(ConcreteDropout {
            net,
            config: config.clone(),
            params,
            trained: false,
        })
    }

    /// Current drop probability of each gated layer.
    pub fn rates(&self) -> Vec<(String, f32)> {
        GATED_LAYERS
            .iter()
            .map(|l| {
                let v = self.params.get(&rate_name(l)).map_or(f32::NAN, |t| t.data()[0]);
                (l.to_string(), crate::tensor::sigmoid(v))
            })
            .collect()
    }
}

impl Posterior for ConcreteDropout {
    fn kind(&self) -> &'static str {
        "dropout"
    }
    fn net(&self) -> &PredictorNet {
        &self.net
    }
    fn is_trained(&self) -> bool {
        self.trained
    }

    fn train(&mut self, data: &TrainingSet, seed: u64) -> Result<Vec<TrainRow>> {
        let net = &self.net;
        let cfg = self.config.dropout;
        let n_train = data.len();
        let mut obj = move |tape: &mut Tape,
                            store: &ParamStore,
                            bound: BoundParams,
                            x: Var,
                            a: &Tensor,
                            y: &Tensor,
                            rng: &mut ChaCha8Rng| {
            let batch = tape.shape(x)[0];
            let mut ctx = Gated {
                inner: PointWeights::from_bound(store, bound),
                rng,
                temperature: cfg.temperature,
                batch,
                tiled: false,
            };
            let l = net.logits(tape, &mut ctx, x, a)?;
            let bce = tape.bce_with_logits(l, y)?;
            let mut loss = bce;
            for name in GATED_LAYERS {
                let layer = net.layer(name).expect("gated layer exists");
                let logit = ctx.inner.weight(tape, &rate_name(name))?;
                let w = ctx.inner.weight(tape, &layer.weight_name())?;
                let reg = concrete_dropout_regularizer(tape, logit, w, layer.units(), &cfg, n_train)?;
                loss = tape.add(loss, reg)?;
            }
            Ok((loss, bce))
        };
        let pool: Vec<usize> = (0..data.len()).collect();
        let trace = fit(&mut self.params, &self.config, data, &pool, seed, 0, &mut obj as &mut Objective)?;
        self.trained = true;
        log::info!("dropout rates after training: {:?}", self.rates());
        Ok(trace)
    }

    fn draw_key(&self, _draw_seed: u64) -> Option<u64> {
        None
    }

    fn logits(&self, x: &Tensor, a: &Tensor, draw_seed: u64) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let mut rng = rng_for(draw_seed, "dropout-mask", &[]);
        let batch = x.shape()[0];
        let mut ctx = Gated {
            inner: PointWeights::frozen(&self.params, &mut tape),
            rng: &mut rng,
            temperature: self.config.dropout.temperature,
            batch,
            tiled: true,
        };
        let xv = tape.constant(x.clone());
        let l = self.net.logits(&mut tape, &mut ctx, xv, a)?;
        Ok(tape.value(l).data().to_vec())
    }

    fn records(&self) -> Vec<Record> {
        let mut out = vec![kind_record(self.kind())];
        out.extend(self.params.to_records(""));
        out
    }

    fn load(&mut self, records: &[Record]) -> Result<()> {
        self.params.load_records(records, "")?;
        self.trained = true;
        Ok(())
    }
}

fn rho_name(param: &str) -> String {
    format!("{param}.rho")
}

/// Samples every weight once per forward pass as `μ + softplus(ρ)·ε`,
/// optionally accumulating the KL to the Gaussian prior.
struct Sampled<'a, R: Rng> {
    store: &'a ParamStore,
    bound: BoundParams,
    rng: &'a mut R,
    cache: HashMap<String, Var>,
    prior_sigma: f32,
    kl: Option<Vec<Var>>,
}

impl<R: Rng> ForwardContext for Sampled<'_, R> {
    fn weight(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.cache.get(name) {
            return Ok(v);
        }
        let mu = self.bound.var(self.store.id(name)?);
        let rho = self.bound.var(self.store.id(&rho_name(name))?);
        let sigma = tape.softplus(rho)?;
        let shape = tape.shape(mu).to_vec();
        let n = shape.iter().product();
        let eps = tape.constant(Tensor::new(shape, standard_normal(self.rng, n))?);
        let spread = tape.mul(sigma, eps)?;
        let w = tape.add(mu, spread)?;
        if let Some(kl) = self.kl.as_mut() {
            // ln σp − ln σ + (σ² + μ²)/(2σp²) − ½ per weight
            let sp = self.prior_sigma;
            let ln_sigma = tape.log(sigma)?;
            let s2 = tape.square(sigma)?;
            let m2 = tape.square(mu)?;
            let t = tape.add(s2, m2)?;
            let t = tape.scale(t, 1.0 / (2.0 * sp * sp))?;
            let t = tape.sub(t, ln_sigma)?;
            let t = tape.sum(t)?;
            kl.push(tape.offset(t, n as f32 * (sp.ln() - 0.5))?);
        }
        self.cache.insert(name.to_string(), w);
        Ok(w)
    }
}

/// Closed-form KL from the factorised Gaussian posterior to N(0, σp²), in nats.
pub fn bbb_kl(params: &ParamStore, prior_sigma: f32) -> Result<f64> {
    let sp = prior_sigma as f64;
    let mut kl = 0f64;
    for (name, mu) in params.iter() {
        if name.ends_with(".rho") {
            continue;
        }
        let rho = params.get(&rho_name(name))?;
        for (&m, &r) in mu.data().iter().zip(rho.data()) {
            let s = crate::tensor::softplus(r) as f64;
            let m = m as f64;
            kl += sp.ln() - s.ln() + (s * s + m * m) / (2.0 * sp * sp) - 0.5;
        }
    }
    Ok(kl)
}

/// Bayes-by-backprop with a factorised Gaussian posterior over every weight.
pub struct Bbb {
    net: PredictorNet,
    config: PredictorConfig,
    /// Means under the layer names, `ρ` under `{name}.rho`.
    pub params: ParamStore,
    trained: bool,
}

impl Bbb {
    pub fn new(config: &PredictorConfig, dims: (usize, usize, usize), seed: u64) -> Result<Self> {
        if config.prior_sigma <= 0.0 {
            return Err(Error::Config(format!("prior sigma must be positive, got {}", config.prior_sigma)));
        }
        let net = PredictorNet::new(config.arch.clone(), dims)?;
        let means = init_store(&net, seed, 0);
        let mut params = means.clone();
        for (name, t) in means.iter() {
            params.insert(rho_name(name), Tensor::full(t.shape(), config.rho_init));
        }
        Ok(Bbb {
            net,
            config: config.clone(),
            params,
            trained: false,
        })
    }

    /// Point network at the posterior means.
    pub fn mean_network(&self) -> Deterministic {
        let mut means = ParamStore::new();
        for (name, t) in self.params.iter() {
            if !name.ends_with(".rho") {
                means.insert(name, t.clone());
            }
        }
        Deterministic::from_params(self.net.clone(), means)
    }

    pub fn set_trained(&mut self) {
        self.trained = true;
    }
}

impl Posterior for Bbb {
    fn kind(&self) -> &'static str {
        "bbb"
    }
    fn net(&self) -> &PredictorNet {
        &self.net
    }
    fn is_trained(&self) -> bool {
        self.trained
    }

    fn train(&mut self, data: &TrainingSet, seed: u64) -> Result<Vec<TrainRow>> {
        let net = &self.net;
        let sp = self.config.prior_sigma;
        let n_train = data.len() as f32;
        let mut obj = move |tape: &mut Tape,
                            store: &ParamStore,
                            bound: BoundParams,
                            x: Var,
                            a: &Tensor,
                            y: &Tensor,
                            rng: &mut ChaCha8Rng| {
            let mut ctx = Sampled {
                store,
                bound,
                rng,
                cache: HashMap::new(),
                prior_sigma: sp,
                kl: Some(Vec::new()),
            };
            let l = net.logits(tape, &mut ctx, x, a)?;
            let bce = tape.bce_with_logits(l, y)?;
            // Per-motion negative log-likelihood: the mean is over 16 steps.
            let mut loss = tape.scale(bce, HORIZON as f32)?;
            for k in ctx.kl.take().unwrap_or_default() {
                let k = tape.scale(k, 1.0 / n_train)?;
                loss = tape.add(loss, k)?;
            }
            Ok((loss, bce))
        };
        let pool: Vec<usize> = (0..data.len()).collect();
        let trace = fit(&mut self.params, &self.config, data, &pool, seed, 0, &mut obj as &mut Objective)?;
        self.trained = true;
        Ok(trace)
    }

    fn draw_key(&self, _draw_seed: u64) -> Option<u64> {
        None
    }

    fn logits(&self, x: &Tensor, a: &Tensor, draw_seed: u64) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let mut rng = rng_for(draw_seed, "bbb-weights", &[]);
        let bound = self.params.bind_frozen(&mut tape);
        let mut ctx = Sampled {
            store: &self.params,
            bound,
            rng: &mut rng,
            cache: HashMap::new(),
            prior_sigma: self.config.prior_sigma,
            kl: None,
        };
        let xv = tape.constant(x.clone());
        let l = self.net.logits(&mut tape, &mut ctx, xv, a)?;
        Ok(tape.value(l).data().to_vec())
    }

    fn records(&self) -> Vec<Record> {
        let mut out = vec![kind_record(self.kind())];
        out.extend(self.params.to_records(""));
        out
    }

    fn load(&mut self, records: &[Record]) -> Result<()> {
        self.params.load_records(records, "")?;
        self.trained = true;
        Ok(())
    }
}
