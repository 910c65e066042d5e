//! Intervention rules, autonomy-vs-averted sweeps, and distribution diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::vae::VaeModel;

/// Seconds; a motion is flagged when its risk-adjusted TTC falls below this.
pub const DECISION_HORIZON: f64 = 2.0;

/// What a rule may look at for one motion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionScore {
    /// `(mu, sigma)` of the TTC estimate.
    pub estimate: Option<(f64, f64)>,
    pub nll: Option<f64>,
    /// NLL z-scored against the training images.
    pub nll_z: Option<f64>,
    pub would_crash: bool,
}

impl MotionScore {
    fn estimate(&self, rule: &str) -> Result<(f64, f64)> {
        self.estimate
            .ok_or_else(|| Error::Contract(format!("{rule} rule needs a risk estimate")))
    }
    fn nll(&self, rule: &str) -> Result<f64> {
        self.nll.ok_or_else(|| Error::Contract(format!("{rule} rule needs an nll score")))
    }
    fn nll_z(&self, rule: &str) -> Result<f64> {
        self.nll_z
            .ok_or_else(|| Error::Contract(format!("{rule} rule needs a normalised nll score")))
    }
}

/// An intervention rule with a threshold parameter vector β.
///
/// `grid` lists β values from least to most risk-averse; its first entry
/// never intervenes and its last always does.
pub trait DecisionRule: Send + Sync {
    fn name(&self) -> &'static str;

    fn decide(&self, beta: &[f64], m: &MotionScore) -> Result<bool>;

    fn grid(&self, motions: &[MotionScore]) -> Vec<Vec<f64>>;

    /// Whether the curve is the upper envelope of a multi-parameter search
    /// rather than a single monotone path.
    fn searched(&self) -> bool {
        false
    }
}

fn sentinel(beta: f64) -> Option<bool> {
    if beta == f64::INFINITY {
        Some(true)
    } else if beta == f64::NEG_INFINITY {
        Some(false)
    } else {
        None
    }
}

/// `μ − β_σ·σ < 2`.
pub struct Bayesian;
/// `μ − β_μ < 2`.
pub struct DeterministicRule;
/// `nll > β_NLL`.
pub struct NllRule;
/// `μ − β_μ − β_NLL·ñ < 2`.
pub struct Combined;

/// 61 log-spaced magnitudes from 1e-3 to 10, both signs, plus zero and ±∞.
pub fn sigma_grid() -> Vec<f64> {
    let mags: Vec<f64> = (0..61).map(|i| 10f64.powf(-3.0 + 4.0 * i as f64 / 60.0)).collect();
    let mut g = vec![f64::NEG_INFINITY];
    g.extend(mags.iter().rev().map(|m| -m));
    g.push(0.0);
    g.extend(mags.iter().copied());
    g.push(f64::INFINITY);
    g
}

/// −2 s to 2 s in 0.05 s steps, plus ±∞.
pub fn mu_grid() -> Vec<f64> {
    let mut g = vec![f64::NEG_INFINITY];
    g.extend((0..=80).map(|i| -2.0 + 0.05 * i as f64));
    g.push(f64::INFINITY);
    g
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// NLL thresholds at quantiles 1.00, 0.98, …, 0.00 of the scored set,
/// wrapped in +∞ (never) and −∞ (always).
pub fn nll_grid(motions: &[MotionScore]) -> Vec<f64> {
    let mut v: Vec<f64> = motions.iter().filter_map(|m| m.nll).collect();
    v.sort_by(f64::total_cmp);
    let mut g = vec![f64::INFINITY];
    g.extend((0..=50).rev().map(|i| quantile(&v, i as f64 * 0.02)));
    g.push(f64::NEG_INFINITY);
    g
}

/// Weights on the normalised NLL searched by the combined rule.
pub fn nll_weight_grid() -> Vec<f64> {
    (0..=20).map(|i| 0.1 * i as f64).collect()
}

impl DecisionRule for Bayesian {
    fn name(&self) -> &'static str {
        "bayesian"
    }
    fn decide(&self, beta: &[f64], m: &MotionScore) -> Result<bool> {
        let (mu, sigma) = m.estimate(self.name())?;
        Ok(sentinel(beta[0]).unwrap_or(mu - beta[0] * sigma < DECISION_HORIZON))
    }
    fn grid(&self, _: &[MotionScore]) -> Vec<Vec<f64>> {
        sigma_grid().into_iter().map(|b| vec![b]).collect()
    }
}

impl DecisionRule for DeterministicRule {
    fn name(&self) -> &'static str {
        "deterministic"
    }
    fn decide(&self, beta: &[f64], m: &MotionScore) -> Result<bool> {
        let (mu, _) = m.estimate(self.name())?;
        Ok(sentinel(beta[0]).unwrap_or(mu - beta[0] < DECISION_HORIZON))
    }
    fn grid(&self, _: &[MotionScore]) -> Vec<Vec<f64>> {
        mu_grid().into_iter().map(|b| vec![b]).collect()
    }
}

impl DecisionRule for NllRule {
    fn name(&self) -> &'static str {
        "nll"
    }
    fn decide(&self, beta: &[f64], m: &MotionScore) -> Result<bool> {
        let nll = m.nll(self.name())?;
        // Reversed sense: a lower threshold is more averse.
        Ok(sentinel(-beta[0]).unwrap_or(nll > beta[0]))
    }
    fn grid(&self, motions: &[MotionScore]) -> Vec<Vec<f64>> {
        nll_grid(motions).into_iter().map(|b| vec![b]).collect()
    }
}

impl DecisionRule for Combined {
    fn name(&self) -> &'static str {
        "combined"
    }
    fn decide(&self, beta: &[f64], m: &MotionScore) -> Result<bool> {
        let (mu, _) = m.estimate(self.name())?;
        let z = m.nll_z(self.name())?;
        Ok(sentinel(beta[0]).unwrap_or(mu - beta[0] - beta[1] * z < DECISION_HORIZON))
    }
    fn grid(&self, _: &[MotionScore]) -> Vec<Vec<f64>> {
        let mut g = Vec::new();
        for bm in mu_grid() {
            if bm.is_infinite() {
                g.push(vec![bm, 0.0]);
                continue;
            }
            for bn in nll_weight_grid() {
                g.push(vec![bm, bn]);
            }
        }
        g
    }
    fn searched(&self) -> bool {
        true
    }
}

pub type RuleFactory = fn() -> Box<dyn DecisionRule>;

pub fn rule_registry() -> &'static [(&'static str, RuleFactory)] {
    &[
        ("bayesian", || Box::new(Bayesian)),
        ("deterministic", || Box::new(DeterministicRule)),
        ("nll", || Box::new(NllRule)),
        ("combined", || Box::new(Combined)),
    ]
}

pub fn rule_by_name(name: &str) -> Result<Box<dyn DecisionRule>> {
    rule_registry()
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| f())
        .ok_or_else(|| {
            let names: Vec<&str> = rule_registry().iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown decision rule {name:?}; valid rules: {}", names.join(", ")))
        })
}

/// Intervention flag per motion for one β.
pub fn interventions(rule: &dyn DecisionRule, beta: &[f64], motions: &[MotionScore]) -> Result<Vec<bool>> {
    motions.iter().map(|m| rule.decide(beta, m)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub beta: Vec<f64>,
    pub autonomy: f64,
    pub averted: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// No motion would have crashed; `averted` is reported as 1.
    pub averted_undefined: bool,
    /// `FP / (FP + TP)`, an alternative reading of "not autonomous"; kept
    /// for reference, zero when nothing is flagged.
    pub footnote_ratio: f64,
}

impl CurvePoint {
    pub fn from_outcomes(beta: Vec<f64>, intervened: &[bool], motions: &[MotionScore]) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&i, m) in intervened.iter().zip(motions) {
            match (i, m.would_crash) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let total = (tp + fp + fn_ + tn).max(1) as f64;
        let undefined = tp + fn_ == 0;
        CurvePoint {
            beta,
            autonomy: (tn + fn_) as f64 / total,
            averted: if undefined { 1.0 } else { tp as f64 / (tp + fn_) as f64 },
            tp,
            fp,
            fn_,
            tn,
            averted_undefined: undefined,
            footnote_ratio: if tp + fp == 0 { 0.0 } else { fp as f64 / (tp + fp) as f64 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub method: String,
    pub rule: String,
    pub points: Vec<CurvePoint>,
}

/// One curve point per β of `grid`, in grid order. Searched rules keep only
/// the upper envelope (highest averted at each autonomy).
pub fn sweep(
    method: &str,
    rule: &dyn DecisionRule,
    motions: &[MotionScore],
    grid: &[Vec<f64>],
) -> Result<TradeoffCurve> {
    if motions.is_empty() {
        return Err(Error::Contract(format!("cannot sweep {method}: no motions")));
    }
    let mut points = Vec::with_capacity(grid.len());
    for beta in grid {
        let flags = interventions(rule, beta, motions)?;
        points.push(CurvePoint::from_outcomes(beta.clone(), &flags, motions));
    }
    if rule.searched() {
        points = pareto_envelope(points);
    }
    Ok(TradeoffCurve {
        method: method.to_string(),
        rule: rule.name().to_string(),
        points,
    })
}

/// Points not dominated in (autonomy, averted), ordered by falling autonomy,
/// plus the lowest-autonomy point.
pub fn pareto_envelope(mut points: Vec<CurvePoint>) -> Vec<CurvePoint> {
    points.sort_by(|a, b| {
        b.autonomy
            .total_cmp(&a.autonomy)
            .then(b.averted.total_cmp(&a.averted))
    });
    let mut out: Vec<CurvePoint> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let n = points.len();
    // The lowest-autonomy point stays so the curve still spans down to it.
    for (i, p) in points.into_iter().enumerate() {
        if p.averted > best || i + 1 == n {
            best = p.averted;
            out.push(p);
        }
    }
    out
}

/// Averted fraction at `level` by linear interpolation between the nearest
/// curve points on either side; never extrapolates.
pub fn averted_at(curve: &TradeoffCurve, level: f64) -> Result<f64> {
    let mut below: Option<(f64, f64)> = None;
    let mut above: Option<(f64, f64)> = None;
    let mut exact: Option<f64> = None;
    for p in &curve.points {
        let (a, v) = (p.autonomy, p.averted);
        if (a - level).abs() < 1e-12 {
            exact = Some(exact.map_or(v, |e: f64| e.max(v)));
        } else if a < level {
            if below.map_or(true, |(ba, bv)| a > ba || (a == ba && v > bv)) {
                below = Some((a, v));
            }
        } else if above.map_or(true, |(aa, av)| a < aa || (a == aa && v > av)) {
            above = Some((a, v));
        }
    }
    if let Some(v) = exact {
        return Ok(v);
    }
    match (below, above) {
        (Some((a0, v0)), Some((a1, v1))) => Ok(v0 + (v1 - v0) * (level - a0) / (a1 - a0)),
        _ => Err(Error::Contract(format!(
            "autonomy level {level} lies outside the range of curve {}",
            curve.method
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutonomyTable {
    pub levels: Vec<f64>,
    /// `(method, averted fraction per level)`.
    pub rows: Vec<(String, Vec<f64>)>,
    pub interpolation: String,
}

pub const TABLE_LEVELS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

pub fn table_at_autonomy(curves: &[TradeoffCurve], levels: &[f64]) -> Result<AutonomyTable> {
    let rows = curves
        .iter()
        .map(|c| {
            let vals = levels.iter().map(|&l| averted_at(c, l)).collect::<Result<Vec<_>>>()?;
            Ok((c.method.clone(), vals))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AutonomyTable {
        levels: levels.to_vec(),
        rows,
        interpolation: "linear between neighbouring sweep points".into(),
    })
}

impl AutonomyTable {
    pub fn get(&self, method: &str, level: f64) -> Option<f64> {
        let col = self.levels.iter().position(|&l| (l - level).abs() < 1e-12)?;
        self.rows.iter().find(|(m, _)| m == method).map(|(_, v)| v[col])
    }

    /// Averted percentages, one row per method.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for l in &self.levels {
            s.push_str(&format!(",autonomy_{l:.2}"));
        }
        s.push('\n');
        for (m, vals) in &self.rows {
            s.push_str(m);
            for v in vals {
                s.push_str(&format!(",{:.2}", 100.0 * v));
            }
            s.push('\n');
        }
        s
    }
}

pub fn curves_csv(curves: &[TradeoffCurve]) -> String {
    let mut s = String::from("method,rule,beta,beta_nll,autonomy,averted,tp,fp,fn,tn,averted_undefined,footnote_ratio\n");
    for c in curves {
        for p in &c.points {
            let b1 = p.beta.get(1).map_or(String::new(), |b| b.to_string());
            s.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{},{},{},{},{},{:.6}\n",
                c.method,
                c.rule,
                p.beta[0],
                b1,
                p.autonomy,
                p.averted,
                p.tp,
                p.fp,
                p.fn_,
                p.tn,
                p.averted_undefined,
                p.footnote_ratio
            ));
        }
    }
    s
}

/// Importance-weighted NLL per image with `k` samples; noise keyed by image index.
pub fn nll_values(vae: &VaeModel, images: &[&[f32]], k: usize, seed: u64) -> Result<Vec<f64>> {
    images
        .iter()
        .enumerate()
        .map(|(i, x)| vae.nll_estimate(x, k, &mut rng_for(seed, "nll", &[i as u64])))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllHistogram {
    pub edges: Vec<f64>,
    /// Normalised to sum to one.
    pub train: Vec<f64>,
    pub test: Vec<f64>,
    pub overlap: f64,
}

fn normalised_counts(values: &[f64], lo: f64, width: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0f64; bins];
    for &v in values {
        let i = if width > 0.0 { ((v - lo) / width).floor() as isize } else { 0 };
        h[i.clamp(0, bins as isize - 1) as usize] += 1.0;
    }
    let n = values.len().max(1) as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

/// Histograms on shared edges and the overlap `Σ min(h_train, h_test)`.
pub fn nll_histogram(train: &[f64], test: &[f64], bins: usize) -> Result<NllHistogram> {
    if train.is_empty() || test.is_empty() || bins == 0 {
        return Err(Error::Contract("nll histogram needs two non-empty sets and ≥1 bin".into()));
    }
    let all = train.iter().chain(test);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let htr = normalised_counts(train, lo, width, bins);
    let hte = normalised_counts(test, lo, width, bins);
    let overlap = htr.iter().zip(&hte).map(|(a, b)| a.min(*b)).sum::<f64>().min(1.0);
    Ok(NllHistogram {
        edges,
        train: htr,
        test: hte,
        overlap,
    })
}

impl NllHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,train,test\n");
        for i in 0..self.train.len() {
            s.push_str(&format!(
                "{:.6},{:.6},{:.6},{:.6}\n",
                self.edges[i],
                self.edges[i + 1],
                self.train[i],
                self.test[i]
            ));
        }
        s
    }
}

pub const LATENT_GRID: usize = 64;

/// Top-two principal axes of `rows` (each of length `d`), by power iteration
/// with deflation. Falls back to the first two coordinates when the
/// covariance is degenerate.
pub fn principal_axes(rows: &[Vec<f64>]) -> (Vec<f64>, [Vec<f64>; 2]) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0f64; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut cov = vec![0f64; d * d];
    for r in rows {
        for i in 0..d {
            let a = r[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += a * (r[j] - mean[j]) / n;
            }
        }
    }
    let unit = |i: usize| {
        let mut v = vec![0f64; d];
        if i < d {
            v[i] = 1.0;
        }
        v
    };
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if d < 2 || trace <= 1e-12 {
        return (mean, [unit(0), unit(1)]);
    }
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for k in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * ((i * 7 + k * 3) % 11) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum()).collect();
            for a in &axes {
                let dot: f64 = w.iter().zip(a).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(a).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-12 * trace {
                lambda = 0.0;
                break;
            }
            lambda = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        if lambda <= 1e-9 * trace {
            return (mean, [unit(0), unit(1)]);
        }
        axes.push(v);
    }
    let b = axes.pop().expect("two axes");
    let a = axes.pop().expect("two axes");
    (mean, [a, b])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDiagnostic {
    /// Row-major `64 × 64` occupancy, normalised to sum to one: train,
    /// in-distribution holdout, out-of-distribution.
    pub grids: [Vec<f64>; 3],
    /// Holdout minus train, OOD minus train.
    pub probability_difference: [Vec<f64>; 2],
    /// +1 where only the compared set occupies a cell, −1 where only train does.
    pub support_difference: [Vec<i8>; 2],
    /// Total-variation distance to the train grid: holdout, OOD.
    pub tv_distance: [f64; 2],
    pub extent: [f64; 4],
}

fn occupancy(points: &[[f64; 2]], extent: [f64; 4]) -> Vec<f64> {
    let g = LATENT_GRID;
    let mut h = vec![0f64; g * g];
    let [x0, x1, y0, y1] = extent;
    for p in points {
        let cx = (((p[0] - x0) / (x1 - x0)) * g as f64).floor().clamp(0.0, (g - 1) as f64) as usize;
        let cy = (((p[1] - y0) / (y1 - y0)) * g as f64).floor().clamp(0.0, (g - 1) as f64) as usize;
        h[cy * g + cx] += 1.0;
    }
    let n = points.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Projects `samples_per_image` latent draws of every image onto the train
/// principal plane and compares occupancy grids.
pub fn latent_diagnostic(
    vae: &VaeModel,
    train: &[&[f32]],
    holdout: &[&[f32]],
    ood: &[&[f32]],
    samples_per_image: usize,
    seed: u64,
) -> Result<LatentDiagnostic> {
    // Noise is keyed by image index only, so identical sets give identical grids.
    let draw = |images: &[&[f32]]| -> Result<Vec<Vec<f64>>> {
        let dists = vae.encode_batch(images)?;
        let mut out = Vec::new();
        for (i, d) in dists.iter().enumerate() {
            let mut rng = rng_for(seed, "latent-diagnostic", &[i as u64]);
            for _ in 0..samples_per_image.max(1) {
                let e = crate::vae::standard_normal(&mut rng, d.dim());
                let z = crate::vae::reparameterize(d, &e)?;
                out.push(z.into_iter().map(f64::from).collect());
            }
        }
        Ok(out)
    };
    let sets = [draw(train)?, draw(holdout)?, draw(ood)?];
    let (mean, axes) = principal_axes(&sets[0]);
    let project = |rows: &Vec<Vec<f64>>| -> Vec<[f64; 2]> {
        rows.iter()
            .map(|r| {
                let c: Vec<f64> = r.iter().zip(&mean).map(|(a, m)| a - m).collect();
                let p = |ax: &Vec<f64>| c.iter().zip(ax).map(|(a, b)| a * b).sum::<f64>();
                [p(&axes[0]), p(&axes[1])]
            })
            .collect()
    };
    let pts: Vec<Vec<[f64; 2]>> = sets.iter().map(project).collect();
    let mut extent = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for p in pts.iter().flatten() {
        extent[0] = extent[0].min(p[0]);
        extent[1] = extent[1].max(p[0]);
        extent[2] = extent[2].min(p[1]);
        extent[3] = extent[3].max(p[1]);
    }
    for k in [0, 2] {
        let pad = 1e-6 + 0.01 * (extent[k + 1] - extent[k]);
        extent[k] -= pad;
        extent[k + 1] += pad;
    }
    let grids = [occupancy(&pts[0], extent), occupancy(&pts[1], extent), occupancy(&pts[2], extent)];
    let diff = |g: &Vec<f64>| -> Vec<f64> { g.iter().zip(&grids[0]).map(|(a, b)| a - b).collect() };
    let support = |g: &Vec<f64>| -> Vec<i8> {
        g.iter()
            .zip(&grids[0])
            .map(|(&a, &b)| match (a > 0.0, b > 0.0) {
                (true, false) => 1,
                (false, true) => -1,
                _ => 0,
            })
            .collect()
    };
    let tv = |g: &Vec<f64>| 0.5 * g.iter().zip(&grids[0]).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(LatentDiagnostic {
        probability_difference: [diff(&grids[1]), diff(&grids[2])],
        support_difference: [support(&grids[1]), support(&grids[2])],
        tv_distance: [tv(&grids[1]), tv(&grids[2])],
        grids,
        extent,
    })
}

/// A `64 × 64` grid as CSV rows.
pub fn grid_csv<T: std::fmt::Display>(grid: &[T]) -> String {
    let mut s = String::new();
    for row in grid.chunks(LATENT_GRID) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0f64; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
