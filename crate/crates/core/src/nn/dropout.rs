//! Concrete (relaxed Bernoulli) dropout with a learnable rate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConcreteDropoutConfig {
    /// Initial drop probability.
    pub initial_rate: f32,
    pub temperature: f32,
    /// Weight-decay coefficient before the 1/N scaling.
    pub weight_decay: f32,
    /// Entropy coefficient before the 1/N scaling.
    pub entropy_weight: f32,
}

impl Default for ConcreteDropoutConfig {
    fn default() -> Self {
        ConcreteDropoutConfig {
            initial_rate: 0.1,
            temperature: 0.1,
            weight_decay: 1e-4,
            entropy_weight: 2.0,
        }
    }
}

/// `log u - log(1 - u)` for `u ~ Uniform(0, 1)`, one per element of `shape`.
pub fn logistic_noise<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f32 = rng.gen_range(1e-6f32..1.0 - 1e-6);
            u.ln() - (1.0 - u).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches data")
}

/// Gates `x` with a relaxed Bernoulli keep mask and rescales by `1/(1-p)`.
///
/// `p_logit` is a scalar `log p - log(1-p)`; `noise` holds `log u - log(1-u)`
/// per unit. The relaxed drop indicator is
/// `sigmoid((p_logit + noise) / temperature)` and the unit is kept with
/// weight one minus that.
pub fn concrete_dropout_gate(
    tape: &mut Tape,
    x: Var,
    p_logit: Var,
    temperature: f32,
    noise: &Tensor,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Contract(format!(
            "dropout temperature must be positive, got {temperature}"
        )));
    }
    if !tape.value(p_logit).is_scalar() {
        return dim_err("dropout rate logit must be a scalar");
    }
    if noise.numel() != tape.value(x).numel() {
        return dim_err(format!(
            "dropout noise has {} values for {} activations",
            noise.numel(),
            tape.value(x).numel()
        ));
    }
    let logit = tape.value(p_logit).data()[0];
    let p = crate::tensor::sigmoid(logit);
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Contract(format!(
            "dropout rate {p} (logit {logit}) left (0, 1)"
        )));
    }
    let noise = tape.constant(noise.clone().reshaped(tape.shape(x).to_vec())?);
    let z = tape.add(noise, p_logit)?;
    let z = tape.scale(z, 1.0 / temperature)?;
    let drop = tape.sigmoid(z)?;
    let keep = tape.neg(drop)?;
    let keep = tape.offset(keep, 1.0)?;
    let gated = tape.mul(x, keep)?;
    // 1 / (1 - p) = 1 + exp(logit)
    let inv_keep = tape.exp(p_logit)?;
    let inv_keep = tape.offset(inv_keep, 1.0)?;
    tape.mul(gated, inv_keep)
}

/// `weight_decay·‖W‖²/(1-p) + entropy_weight·units·(p ln p + (1-p) ln(1-p))`,
/// scaled by `1/n_train`.
pub fn concrete_dropout_regularizer(
    tape: &mut Tape,
    p_logit: Var,
    weights: Var,
    units: usize,
    cfg: &ConcreteDropoutConfig,
    n_train: usize,
) -> Result<Var> {
    let scale = 1.0 / n_train.max(1) as f32;
    let sq = tape.square(weights)?;
    let sq = tape.sum(sq)?;
    // 1/(1-p) = 1 + exp(logit)
    let inv_keep = tape.exp(p_logit)?;
    let inv_keep = tape.offset(inv_keep, 1.0)?;
    let decay = tape.mul(sq, inv_keep)?;
    let decay = tape.scale(decay, cfg.weight_decay * scale)?;

    // ln p = -softplus(-logit), ln(1-p) = -softplus(logit)
    let p = tape.sigmoid(p_logit)?;
    let neg_logit = tape.neg(p_logit)?;
    let sp_neg = tape.softplus(neg_logit)?;
    let sp_pos = tape.softplus(p_logit)?;
    let one_minus_p = tape.neg(p)?;
    let one_minus_p = tape.offset(one_minus_p, 1.0)?;
    let a = tape.mul(p, sp_neg)?;
    let b = tape.mul(one_minus_p, sp_pos)?;
    let neg_entropy = tape.add(a, b)?;
    let neg_entropy = tape.neg(neg_entropy)?;
    let ent = tape.scale(neg_entropy, cfg.entropy_weight * units as f32 * scale)?;
    tape.add(decay, ent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f32) -> f32 {
        (p / (1.0 - p)).ln()
    }

    fn gate_once(x: &Tensor, p: f32, noise: &Tensor) -> Vec<f32> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let lv = tape.leaf(Tensor::scalar(logit(p)));
        let y = concrete_dropout_gate(&mut tape, xv, lv, 0.1, noise).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn half_rate_at_median_noise_is_identity() {
        let x = Tensor::from_slice(&[1.0, -2.0, 3.5]);
        // u = 0.5 gives zero logistic noise.
        let y = gate_once(&x, 0.5, &Tensor::zeros(&[3]));
        for (a, b) in y.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn vanishing_rate_passes_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_slice(&[1.0, -2.0, 3.5, 0.25]);
        let noise = logistic_noise(&mut rng, &[4]);
        let y = gate_once(&x, 1e-6, &noise);
        for (a, b) in y.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-3 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn saturated_rate_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1.0]));
        let l = tape.leaf(Tensor::scalar(200.0));
        let r = concrete_dropout_gate(&mut tape, x, l, 0.1, &Tensor::zeros(&[1]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn regularizer_matches_closed_form() {
        let cfg = ConcreteDropoutConfig::default();
        let p = 0.2f32;
        let w = Tensor::from_slice(&[1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let lv = tape.leaf(Tensor::scalar(logit(p)));
        let wv = tape.leaf(w);
        let r = concrete_dropout_regularizer(&mut tape, lv, wv, 7, &cfg, 100).unwrap();
        let expect = (cfg.weight_decay * 5.25 / (1.0 - p)
            + cfg.entropy_weight * 7.0 * (p * p.ln() + (1.0 - p) * (1.0 - p).ln()))
            / 100.0;
        assert!((tape.value(r).data()[0] - expect).abs() < 1e-6);
    }
}
