//! Test-time projection: encode, sample latents, decode, then push every
//! decoded image through the weight posterior.

use serde::{Deserialize, Serialize};

use crate::bnn::{ttc_samples, Posterior, TtcRule, PREDICT_CHUNK};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};
use crate::sim::ActionSequence;
use crate::vae::{reparameterize, standard_normal, VaeModel};

/// Monte Carlo time-to-collision distribution for one motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub ttc_samples: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub n_z: usize,
    pub n_w: usize,
    pub censored_fraction: f64,
}

impl RiskEstimate {
    /// Sample mean and population std of `samples`.
    pub fn from_samples(samples: Vec<f64>, n_z: usize, n_w: usize, sentinel: f64) -> Self {
        let n = samples.len().max(1) as f64;
        let mu = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n;
        let censored = samples.iter().filter(|&&s| s >= sentinel - 1e-9).count() as f64 / n;
        RiskEstimate {
            ttc_samples: samples,
            mu,
            sigma: var.sqrt(),
            n_z,
            n_w,
            censored_fraction: censored,
        }
    }

    /// A point estimate with no spread.
    pub fn point(mu: f64) -> Self {
        RiskEstimate::from_samples(vec![mu], 1, 1, f64::INFINITY)
    }
}

/// One JSON object per line.
pub fn write_estimates_jsonl(estimates: &[RiskEstimate]) -> Result<String> {
    let mut s = String::new();
    for e in estimates {
        s.push_str(&serde_json::to_string(e).map_err(|e| Error::Format(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_estimates_jsonl(text: &str) -> Result<Vec<RiskEstimate>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("bad estimate line: {e}"))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub n_z: usize,
    pub n_w: usize,
    /// Feed `decode(z)` plus Gaussian pixel noise instead of the decoder mean.
    pub pixel_noise: bool,
    /// Use the posterior mean for every latent draw.
    pub zero_latent_noise: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            n_z: 10,
            n_w: 10,
            pixel_noise: false,
            zero_latent_noise: false,
        }
    }
}

/// Seed of weight draw `w` under latent draw `z`.
pub fn projected_draw_seed(seed: u64, z: usize, w: usize) -> u64 {
    derive_seed(seed, "projected-weight-draw", &[z as u64, w as u64])
}

/// Decoded images for latent draw `z` of every motion, clamped to [0, 1].
/// Noise for motion `m` depends only on `(seed, offset + m, z)`.
pub fn projected_images(
    vae: &VaeModel,
    images: &[&[f32]],
    z: usize,
    seed: u64,
    offset: usize,
    cfg: &ProjectionConfig,
) -> Result<Vec<Vec<f32>>> {
    let dists = vae.encode_batch(images)?;
    let latents: Vec<Vec<f32>> = dists
        .iter()
        .enumerate()
        .map(|(m, d)| {
            if cfg.zero_latent_noise {
                Ok(d.mean.clone())
            } else {
                let mut rng = rng_for(seed, "latent", &[(offset + m) as u64, z as u64]);
                reparameterize(d, &standard_normal(&mut rng, d.dim()))
            }
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[f32]> = latents.iter().map(Vec::as_slice).collect();
    let mut decoded = vae.decode_batch(&refs)?;
    for (m, img) in decoded.iter_mut().enumerate() {
        if cfg.pixel_noise {
            let mut rng = rng_for(seed, "pixel", &[(offset + m) as u64, z as u64]);
            *img = vae.sample_pixels(img, &mut rng);
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(decoded)
}

/// Pools `n_z × n_w` TTC samples per motion: latent draws through the VAE,
/// fresh weight draws under each latent draw.
pub fn project_and_predict_batch(
    vae: &VaeModel,
    posterior: &dyn Posterior,
    images: &[&[f32]],
    actions: &[ActionSequence],
    seed: u64,
    cfg: &ProjectionConfig,
    rule: &TtcRule,
) -> Result<Vec<RiskEstimate>> {
    if cfg.n_z == 0 || cfg.n_w == 0 {
        return Err(Error::Contract("n_z and n_w must be at least 1".into()));
    }
    if vae.pixels() != posterior.net().pixels() {
        return Err(Error::Dimension(format!(
            "vae emits {} values per image, predictor expects {}",
            vae.pixels(),
            posterior.net().pixels()
        )));
    }
    let mut samples = vec![Vec::with_capacity(cfg.n_z * cfg.n_w); images.len()];
    for (c, ims) in images.chunks(PREDICT_CHUNK).enumerate() {
        let offset = c * PREDICT_CHUNK;
        let acts = &actions[offset..offset + ims.len()];
        for z in 0..cfg.n_z {
            let decoded = projected_images(vae, ims, z, seed, offset, cfg)?;
            let refs: Vec<&[f32]> = decoded.iter().map(Vec::as_slice).collect();
            let seeds: Vec<u64> = (0..cfg.n_w).map(|w| projected_draw_seed(seed, z, w)).collect();
            let ttc = ttc_samples(posterior, &refs, acts, &seeds, rule, offset)?;
            for (m, t) in ttc.into_iter().enumerate() {
                samples[offset + m].extend(t);
            }
        }
    }
    Ok(samples
        .into_iter()
        .map(|s| RiskEstimate::from_samples(s, cfg.n_z, cfg.n_w, rule.sentinel()))
        .collect())
}

pub fn project_and_predict(
    vae: &VaeModel,
    posterior: &dyn Posterior,
    x_star: &[f32],
    actions: &ActionSequence,
    seed: u64,
    cfg: &ProjectionConfig,
    rule: &TtcRule,
) -> Result<RiskEstimate> {
    Ok(project_and_predict_batch(vae, posterior, &[x_star], &[*actions], seed, cfg, rule)?.remove(0))
}

/// `k` decoded samples per image, image-major. With `zero_noise` every sample
/// is the reconstruction from the posterior mean.
pub fn reconstruction_gallery(
    vae: &VaeModel,
    images: &[&[f32]],
    k: usize,
    seed: u64,
    zero_noise: bool,
) -> Result<Vec<Vec<f32>>> {
    if k == 0 {
        return Err(Error::Contract("gallery needs k ≥ 1".into()));
    }
    let cfg = ProjectionConfig {
        zero_latent_noise: zero_noise,
        ..ProjectionConfig::default()
    };
    let per_draw: Vec<Vec<Vec<f32>>> = (0..k)
        .map(|z| projected_images(vae, images, z, seed, 0, &cfg))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(images.len() * k);
    for m in 0..images.len() {
        for d in &per_draw {
            out.push(d[m].clone());
        }
    }
    Ok(out)
}

/// Lays images (channel-major, `h × w`) side by side into one binary PPM.
pub fn gallery_ppm(images: &[Vec<f32>], dims: (usize, usize, usize), columns: usize) -> Vec<u8> {
    let (c, h, w) = dims;
    let cols = columns.max(1);
    let rows = images.len().div_ceil(cols);
    let (width, height) = (cols * w, rows.max(1) * h);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    let mut px = vec![0u8; width * height * 3];
    for (i, img) in images.iter().enumerate() {
        let (gx, gy) = ((i % cols) * w, (i / cols) * h);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = img[(ch.min(c - 1) * h + y) * w + x];
                    px[((gy + y) * width + gx + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    out.extend(px);
    out
}
