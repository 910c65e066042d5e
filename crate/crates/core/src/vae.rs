//! Variational autoencoder over observations with a Gaussian pixel likelihood.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifact::{kind_of, kind_record, Provenance};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Activation, ForwardContext, Layer, LayerSpec, PointWeights};
use crate::seed::rng_for;
use crate::tensor::{Adam, AdamConfig, ParamStore, Record, Tape, Tensor, Var};

pub const LOGVAR_MIN: f32 = -10.0;
pub const LOGVAR_MAX: f32 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VaeArch {
    /// Strided 5×5 conv encoder and a mirrored transposed-conv decoder.
    Conv { filters: Vec<usize>, kernel: usize },
    /// Fully connected encoder/decoder; used for small toy models.
    Dense { hidden: Vec<usize> },
}

impl Default for VaeArch {
    fn default() -> Self {
        VaeArch::Conv {
            filters: vec![32, 64, 128],
            kernel: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub arch: VaeArch,
    pub latent_dim: usize,
    /// Fixed pixel standard deviation of the decoder likelihood.
    pub sigma_x: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            arch: VaeArch::default(),
            latent_dim: 32,
            sigma_x: 0.1,
            epochs: 12,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

/// Diagonal Gaussian `q(z|x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mean: Vec<f32>,
    pub logvar: Vec<f32>,
}

impl LatentDistribution {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `mean + exp(logvar/2)·noise`.
pub fn reparameterize(dist: &LatentDistribution, noise: &[f32]) -> Result<Vec<f32>> {
    if noise.len() != dist.dim() {
        return dim_err(format!("{} noise values for {} latents", noise.len(), dist.dim()));
    }
    Ok(dist
        .mean
        .iter()
        .zip(&dist.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp() * e)
        .collect())
}

/// `KL(q ‖ N(0, I))` in nats.
pub fn kl_diag_gaussian(dist: &LatentDistribution) -> f64 {
    dist.mean
        .iter()
        .zip(&dist.logvar)
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum()
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboParts {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    pub config: VaeConfig,
    /// `(channels, height, width)`; dense models use `(1, 1, pixels)`.
    pub dims: (usize, usize, usize),
    encoder: Vec<Layer>,
    mean_head: Layer,
    logvar_head: Layer,
    decoder_input: Layer,
    decoder: Vec<Layer>,
    /// Grid the decoder input is reshaped to before the transposed convs.
    grid: Option<[usize; 3]>,
    pub params: ParamStore,
}

impl VaeModel {
    pub fn new(config: VaeConfig, dims: (usize, usize, usize), seed: u64) -> Result<Self> {
        if config.latent_dim == 0 || !(config.sigma_x > 0.0) {
            return Err(Error::Config(format!(
                "vae needs latent_dim > 0 and sigma_x > 0, got {} and {}",
                config.latent_dim, config.sigma_x
            )));
        }
        let (c, h, w) = dims;
        let latent = config.latent_dim;
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        let (flat, decoder_input, grid) = match &config.arch {
            VaeArch::Conv { filters, kernel } => {
                if filters.is_empty() {
                    return Err(Error::Config("conv vae needs at least one filter count".into()));
                }
                let (k, stride, pad) = (*kernel, 2, kernel / 2);
                let mut shapes = vec![vec![c, h, w]];
                let mut in_ch = c;
                for (i, &f) in filters.iter().enumerate() {
                    let spec = LayerSpec::Conv {
                        in_channels: in_ch,
                        filters: f,
                        kernel: (k, k),
                        stride,
                        padding: pad,
                        activation: Activation::Relu,
                    };
                    shapes.push(spec.output_shape(shapes.last().unwrap())?);
                    encoder.push(Layer::new(format!("enc{i}"), spec));
                    in_ch = f;
                }
                let last = shapes.last().unwrap().clone();
                let flat: usize = last.iter().product();
                // Mirror: each transposed conv restores the shape before the matching conv.
                for i in (0..filters.len()).rev() {
                    let (src, dst) = (&shapes[i + 1], &shapes[i]);
                    let base = |n: usize| (n - 1) * stride + k;
                    let op = |n: usize, target: usize| -> Result<usize> {
                        let b = base(n) as isize - 2 * pad as isize;
                        let op = target as isize - b;
                        if op < 0 || op >= stride as isize {
                            return dim_err(format!("cannot mirror conv shape {n} -> {target}"));
                        }
                        Ok(op as usize)
                    };
                    let spec = LayerSpec::Deconv {
                        in_channels: src[0],
                        filters: dst[0],
                        kernel: (k, k),
                        stride,
                        padding: pad,
                        output_padding: (op(src[1], dst[1])?, op(src[2], dst[2])?),
                        activation: if i == 0 {
                            Activation::Sigmoid
                        } else {
                            Activation::Relu
                        },
                    };
                    decoder.push(Layer::new(format!("dec{}", filters.len() - 1 - i), spec));
                }
                let dec_in = Layer::new(
                    "dec_in",
                    LayerSpec::Dense {
                        inputs: latent,
                        outputs: flat,
                        activation: Activation::Relu,
                    },
                );
                (flat, dec_in, Some([last[0], last[1], last[2]]))
            }
            VaeArch::Dense { hidden } => {
                let d = c * h * w;
                let mut prev = d;
                for (i, &n) in hidden.iter().enumerate() {
                    encoder.push(Layer::new(
                        format!("enc{i}"),
                        LayerSpec::Dense {
                            inputs: prev,
                            outputs: n,
                            activation: Activation::Tanh,
                        },
                    ));
                    prev = n;
                }
                let flat = prev;
                let mut sizes: Vec<usize> = hidden.iter().rev().copied().collect();
                sizes.push(d);
                let first_out = sizes[0];
                let dec_in = Layer::new(
                    "dec_in",
                    LayerSpec::Dense {
                        inputs: latent,
                        outputs: first_out,
                        activation: if sizes.len() == 1 {
                            Activation::Sigmoid
                        } else {
                            Activation::Tanh
                        },
                    },
                );
                for i in 1..sizes.len() {
                    decoder.push(Layer::new(
                        format!("dec{}", i - 1),
                        LayerSpec::Dense {
                            inputs: sizes[i - 1],
                            outputs: sizes[i],
                            activation: if i + 1 == sizes.len() {
                                Activation::Sigmoid
                            } else {
                                Activation::Tanh
                            },
                        },
                    ));
                }
                (flat, dec_in, None)
            }
        };
        let head = |name: &str| {
            Layer::new(
                name,
                LayerSpec::Dense {
                    inputs: flat,
                    outputs: latent,
                    activation: Activation::Identity,
                },
            )
        };
        let mut model = VaeModel {
            config,
            dims,
            encoder,
            mean_head: head("mean"),
            logvar_head: head("logvar"),
            decoder_input,
            decoder,
            grid,
            params: ParamStore::new(),
        };
        let mut rng = rng_for(seed, "vae-init", &[]);
        for layer in model.layers() {
            layer.init(&mut model.params, &mut rng);
        }
        // Start with a tight posterior so early KL pressure is mild.
        for v in model.params.get_mut("logvar.w")?.data_mut() {
            *v *= 0.1;
        }
        Ok(model)
    }

    fn layers(&self) -> Vec<Layer> {
        let mut v = self.encoder.clone();
        v.push(self.mean_head.clone());
        v.push(self.logvar_head.clone());
        v.push(self.decoder_input.clone());
        v.extend(self.decoder.iter().cloned());
        v
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn pixels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    /// `x` is `[N, pixels]`; returns `(mean, clamped logvar)`, each `[N, latent]`.
    pub fn encode_vars(&self, tape: &mut Tape, ctx: &mut dyn ForwardContext, x: Var) -> Result<(Var, Var)> {
        let n = tape.shape(x)[0];
        if tape.shape(x) != [n, self.pixels()] {
            return dim_err(format!(
                "vae input {:?}, expected [N, {}]",
                tape.shape(x),
                self.pixels()
            ));
        }
        let mut hcur = match self.grid {
            Some(_) => tape.reshape(x, &[n, self.dims.0, self.dims.1, self.dims.2])?,
            None => x,
        };
        for layer in &self.encoder {
            hcur = layer.forward(tape, ctx, hcur)?;
        }
        let flat = tape.value(hcur).numel() / n;
        let hcur = tape.reshape(hcur, &[n, flat])?;
        let mean = self.mean_head.forward(tape, ctx, hcur)?;
        let logvar = self.logvar_head.forward(tape, ctx, hcur)?;
        let logvar = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mean, logvar))
    }

    /// `z` is `[N, latent]`; returns decoder means `[N, pixels]` in `[0, 1]`.
    pub fn decode_vars(&self, tape: &mut Tape, ctx: &mut dyn ForwardContext, z: Var) -> Result<Var> {
        let n = tape.shape(z)[0];
        if tape.shape(z) != [n, self.latent_dim()] {
            return dim_err(format!(
                "latent batch {:?}, expected [N, {}]",
                tape.shape(z),
                self.latent_dim()
            ));
        }
        let mut hcur = self.decoder_input.forward(tape, ctx, z)?;
        if let Some([c, h, w]) = self.grid {
            hcur = tape.reshape(hcur, &[n, c, h, w])?;
        }
        for layer in &self.decoder {
            hcur = layer.forward(tape, ctx, hcur)?;
        }
        tape.reshape(hcur, &[n, self.pixels()])
    }

    fn stack(&self, rows: &[&[f32]], width: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return dim_err(format!("row of {} values, expected {width}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), width], data)
    }

    pub fn encode_batch(&self, images: &[&[f32]]) -> Result<Vec<LatentDistribution>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let mut ctx = PointWeights::frozen(&self.params, &mut tape);
        let x = tape.constant(self.stack(images, self.pixels())?);
        let (m, lv) = self.encode_vars(&mut tape, &mut ctx, x)?;
        let l = self.latent_dim();
        let (m, lv) = (tape.value(m).data(), tape.value(lv).data());
        Ok((0..images.len())
            .map(|i| LatentDistribution {
                mean: m[i * l..(i + 1) * l].to_vec(),
                logvar: lv[i * l..(i + 1) * l].to_vec(),
            })
            .collect())
    }

    pub fn encode(&self, image: &[f32]) -> Result<LatentDistribution> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    pub fn decode_batch(&self, latents: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let mut ctx = PointWeights::frozen(&self.params, &mut tape);
        let z = tape.constant(self.stack(latents, self.latent_dim())?);
        let y = self.decode_vars(&mut tape, &mut ctx, z)?;
        Ok(tape
            .value(y)
            .data()
            .chunks(self.pixels())
            .map(<[f32]>::to_vec)
            .collect())
    }

    pub fn decode(&self, z: &[f32]) -> Result<Vec<f32>> {
        Ok(self.decode_batch(&[z])?.remove(0))
    }

    /// Decoder mean plus i.i.d. `N(0, sigma_x²)` pixel noise, clamped to `[0, 1]`.
    pub fn sample_pixels(&self, mean: &[f32], rng: &mut impl Rng) -> Vec<f32> {
        mean.iter()
            .map(|&m| (m + self.config.sigma_x * rng.sample::<f32, _>(StandardNormal)).clamp(0.0, 1.0))
            .collect()
    }

    /// `log p(x | x̂)` under the Gaussian pixel likelihood.
    pub fn log_likelihood(&self, x: &[f32], mean: &[f32]) -> f64 {
        let s = self.config.sigma_x as f64;
        let sq: f64 = x.iter().zip(mean).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
        -sq / (2.0 * s * s) - x.len() as f64 * (s * (2.0 * PI).sqrt()).ln()
    }

    /// Batch loss `-mean ELBO` on the tape, with closed-form KL.
    /// Returns `(loss, mean recon, mean kl)`.
    pub fn elbo_loss(
        &self,
        tape: &mut Tape,
        ctx: &mut dyn ForwardContext,
        x: Var,
        noise: &Tensor,
    ) -> Result<(Var, Var, Var)> {
        let n = tape.shape(x)[0];
        let (mean, logvar) = self.encode_vars(tape, ctx, x)?;
        if noise.shape() != [n, self.latent_dim()] {
            return dim_err(format!("noise shape {:?}", noise.shape()));
        }
        let eps = tape.constant(noise.clone());
        let half = tape.scale(logvar, 0.5)?;
        let std = tape.exp(half)?;
        let spread = tape.mul(std, eps)?;
        let z = tape.add(mean, spread)?;
        let xhat = self.decode_vars(tape, ctx, z)?;

        let s = self.config.sigma_x as f64;
        let diff = tape.sub(x, xhat)?;
        let sq = tape.square(diff)?;
        let sq = tape.sum(sq)?;
        let per = -(self.pixels() as f64) * (s * (2.0 * PI).sqrt()).ln();
        let recon = tape.scale(sq, (-1.0 / (2.0 * s * s) / n as f64) as f32)?;
        let recon = tape.offset(recon, per as f32)?;

        let m2 = tape.square(mean)?;
        let var = tape.exp(logvar)?;
        let t = tape.add(m2, var)?;
        let t = tape.sub(t, logvar)?;
        let t = tape.sum(t)?;
        let kl = tape.scale(t, 0.5 / n as f32)?;
        let kl = tape.offset(kl, -0.5 * self.latent_dim() as f32)?;

        let elbo = tape.sub(recon, kl)?;
        let loss = tape.neg(elbo)?;
        Ok((loss, recon, kl))
    }

    /// Single-sample ELBO with closed-form KL for one image.
    pub fn elbo(&self, x: &[f32], noise: &[f32]) -> Result<ElboParts> {
        let dist = self.encode(x)?;
        let z = reparameterize(&dist, noise)?;
        let xhat = self.decode(&z)?;
        let recon = self.log_likelihood(x, &xhat);
        let kl = kl_diag_gaussian(&dist);
        for (name, v) in [("recon", recon), ("kl", kl)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("elbo part {name} is {v}")));
            }
        }
        Ok(ElboParts {
            elbo: recon - kl,
            recon,
            kl,
        })
    }

    /// `log p(x|z) + log p(z) - log q(z|x)` for latents built from `noises`.
    fn log_weights(&self, x: &[f32], dist: &LatentDistribution, noises: &[Vec<f32>]) -> Result<Vec<f64>> {
        let zs = noises
            .iter()
            .map(|e| reparameterize(dist, e))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f32]> = zs.iter().map(Vec::as_slice).collect();
        let decoded = self.decode_batch(&refs)?;
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        Ok(zs
            .iter()
            .zip(noises)
            .zip(&decoded)
            .map(|((z, e), xhat)| {
                let log_pz: f64 = z.iter().map(|&v| -0.5 * (v as f64).powi(2) - half_log_2pi).sum();
                let log_qz: f64 = e
                    .iter()
                    .zip(&dist.logvar)
                    .map(|(&e, &lv)| -0.5 * (e as f64).powi(2) - 0.5 * lv as f64 - half_log_2pi)
                    .sum();
                self.log_likelihood(x, xhat) + log_pz - log_qz
            })
            .collect())
    }

    /// Single-sample ELBO estimate with a Monte Carlo KL term.
    pub fn elbo_estimate(&self, x: &[f32], noise: &[f32]) -> Result<f64> {
        let dist = self.encode(x)?;
        Ok(self.log_weights(x, &dist, &[noise.to_vec()])?[0])
    }

    /// Importance-weighted NLL bound with `noises.len()` samples.
    pub fn nll_with_noise(&self, x: &[f32], noises: &[Vec<f32>]) -> Result<f64> {
        if noises.is_empty() {
            return Err(Error::Contract("nll estimate needs k >= 1".into()));
        }
        let dist = self.encode(x)?;
        let lw = self.log_weights(x, &dist, noises)?;
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lw.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let nll = -(lse - (noises.len() as f64).ln());
        if !nll.is_finite() {
            return Err(Error::Numeric(format!("nll estimate is {nll}")));
        }
        Ok(nll)
    }

    pub fn nll_estimate(&self, x: &[f32], k: usize, rng: &mut impl Rng) -> Result<f64> {
        let noises: Vec<Vec<f32>> = (0..k).map(|_| standard_normal(rng, self.latent_dim())).collect();
        self.nll_with_noise(x, &noises)
    }

    pub fn to_records(&self, provenance: &Provenance) -> Vec<Record> {
        let mut out = vec![kind_record("vae")];
        out.extend(provenance.to_records());
        out.extend(self.params.to_records(""));
        out
    }

    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        if kind_of(records) != Some("vae") {
            return Err(Error::Format("weights file is not a vae".into()));
        }
        self.params.load_records(records, "")
    }
}

/// One row of the training trace. Epoch 0 is the untrained model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
}

pub fn loss_trace_csv(trace: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,elbo,recon,kl\n");
    for r in trace {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.epoch, r.elbo, r.recon, r.kl));
    }
    s
}

/// Mean ELBO parts over `images` with noise from `seed`.
pub fn evaluate_elbo(model: &VaeModel, images: &[Vec<f32>], seed: u64) -> Result<ElboParts> {
    let mut acc = [0f64; 3];
    let batch = 64;
    for (b, chunk) in images.chunks(batch).enumerate() {
        let mut rng = rng_for(seed, "vae-eval", &[b as u64]);
        let mut tape = Tape::new();
        let mut ctx = PointWeights::frozen(&model.params, &mut tape);
        let refs: Vec<&[f32]> = chunk.iter().map(Vec::as_slice).collect();
        let x = tape.constant(model.stack(&refs, model.pixels())?);
        let noise = Tensor::new(
            vec![chunk.len(), model.latent_dim()],
            standard_normal(&mut rng, chunk.len() * model.latent_dim()),
        )?;
        let (loss, recon, kl) = model.elbo_loss(&mut tape, &mut ctx, x, &noise)?;
        let w = chunk.len() as f64;
        acc[0] -= tape.value(loss).data()[0] as f64 * w;
        acc[1] += tape.value(recon).data()[0] as f64 * w;
        acc[2] += tape.value(kl).data()[0] as f64 * w;
    }
    let n = images.len().max(1) as f64;
    Ok(ElboParts {
        elbo: acc[0] / n,
        recon: acc[1] / n,
        kl: acc[2] / n,
    })
}

/// Minibatch Adam on `-ELBO`. Deterministic given `seed`.
pub fn train_vae(model: &mut VaeModel, images: &[Vec<f32>], seed: u64) -> Result<Vec<EpochLoss>> {
    if images.is_empty() {
        return Err(Error::Contract("vae training set is empty".into()));
    }
    let cfg = model.config.clone();
    let probe: Vec<Vec<f32>> = images.iter().take(256).cloned().collect();
    let start = evaluate_elbo(model, &probe, seed)?;
    let mut trace = vec![EpochLoss {
        epoch: 0,
        elbo: start.elbo,
        recon: start.recon,
        kl: start.kl,
    }];
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(seed, "vae-epoch", &[epoch as u64]));
        order.shuffle(&mut rng);
        let mut acc = [0f64; 3];
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let refs: Vec<&[f32]> = idx.iter().map(|&i| images[i].as_slice()).collect();
            let mut tape = Tape::new();
            let mut ctx = PointWeights::trainable(&model.params, &mut tape);
            let x = tape.constant(model.stack(&refs, model.pixels())?);
            let noise = Tensor::new(
                vec![idx.len(), model.latent_dim()],
                standard_normal(&mut rng, idx.len() * model.latent_dim()),
            )?;
            let step = (|| {
                let (loss, recon, kl) = model.elbo_loss(&mut tape, &mut ctx, x, &noise)?;
                let vals = [
                    -(tape.value(loss).data()[0] as f64),
                    tape.value(recon).data()[0] as f64,
                    tape.value(kl).data()[0] as f64,
                ];
                let mut grads = tape.backward(loss)?;
                Ok::<_, Error>((vals, ctx.bound().collect(&mut grads)))
            })();
            let (vals, grads) = step.map_err(|e| {
                Error::Numeric(format!("vae training diverged in epoch {epoch}: {e}; trace so far: {trace:?}"))
            })?;
            adam.step(&mut model.params, &grads)?;
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += v * idx.len() as f64;
            }
        }
        let n = images.len() as f64;
        let row = EpochLoss {
            epoch,
            elbo: acc[0] / n,
            recon: acc[1] / n,
            kl: acc[2] / n,
        };
        log::info!("vae epoch {epoch}: elbo {:.2} recon {:.2} kl {:.2}", row.elbo, row.recon, row.kl);
        trace.push(row);
    }
    Ok(trace)
}
