//! End-to-end runs driven by one TOML config: collect, train, evaluate, report.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/{train,holdout,<test world>}.oods   + .json sidecars
//! models/vae.oodw, models/predictor-<kind>.oodw, *_loss.csv
//! eval/<set>/{curves,table}.{csv,json}, scores.csv, nll_histogram.csv, summary.json
//! eval/latent/*.csv, eval/summary.json
//! report.md, manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::{load_records, save_records, Provenance};
use crate::bnn::{
    load_posterior, mc_predict_direct_batch, new_posterior, posterior_kinds, train_trace_csv, Posterior,
    PredictorConfig, TrainingSet, TtcRule,
};
use crate::error::{Error, Result};
use crate::eval::{
    grid_csv, latent_diagnostic, nll_histogram, nll_values, rule_by_name, spearman, sweep, table_at_autonomy,
    curves_csv, AutonomyTable, MotionScore, TradeoffCurve, TABLE_LEVELS,
};
use crate::pipeline::{project_and_predict_batch, ProjectionConfig};
use crate::seed::derive_seed;
use crate::sim::{builtin_world, collect_dataset, true_ttc, Camera, Controller, Dataset, Dynamics, WorldSpec, HORIZON};
use crate::vae::{loss_trace_csv, train_vae, VaeConfig, VaeModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_worlds: Vec<String>,
    /// Split evenly over `train_worlds`.
    pub train_motions: usize,
    /// Held-out motions from the training worlds, fresh episodes.
    pub holdout_motions: usize,
    pub test_worlds: Vec<String>,
    pub test_motions: usize,
    /// Extra world specs loaded from TOML files, keyed by id.
    pub world_files: BTreeMap<String, PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_worlds: vec!["train-1".into(), "train-2".into(), "train-3".into()],
            train_motions: 5000,
            holdout_motions: 1000,
            test_worlds: vec!["test-texture".into(), "test-cones".into()],
            test_motions: 3000,
            world_files: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Posterior kinds; each runs directly and through the VAE.
    pub methods: Vec<String>,
    /// Weight draws for the direct variants.
    pub direct_draws: usize,
    /// Importance samples per NLL estimate.
    pub nll_samples: usize,
    /// Training images scored to normalise NLL and as the histogram reference.
    pub reference_images: usize,
    pub histogram_bins: usize,
    /// Images per set in the latent diagnostic, and draws per image.
    pub latent_images: usize,
    pub latent_samples: usize,
    pub autonomy_levels: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            methods: posterior_kinds().iter().map(|s| s.to_string()).collect(),
            direct_draws: 100,
            nll_samples: 16,
            reference_images: 1000,
            histogram_bins: 40,
            latent_images: 500,
            latent_samples: 4,
            autonomy_levels: TABLE_LEVELS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dt: f64,
    pub horizon: usize,
    /// Accept `dt · horizon ≠ 2 s` with a warning instead of an error.
    pub allow_horizon_override: bool,
    pub camera: Camera,
    pub dynamics: Dynamics,
    pub controller: Controller,
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub predictor: PredictorConfig,
    pub projection: ProjectionConfig,
    pub ttc: TtcRule,
    pub evaluation: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dt: 0.125,
            horizon: HORIZON,
            allow_horizon_override: false,
            camera: Camera::default(),
            dynamics: Dynamics::default(),
            controller: Controller::default(),
            data: DataConfig::default(),
            vae: VaeConfig::default(),
            predictor: PredictorConfig::default(),
            projection: ProjectionConfig::default(),
            ttc: TtcRule::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.synced())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Keeps the copies of dt in dynamics and the TTC rule equal to the top-level one.
    fn synced(mut self) -> Self {
        self.dynamics.dt = self.dt;
        self.ttc.dt = self.dt;
        self
    }

    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        self.synced()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon != HORIZON {
            return Err(Error::Config(format!("horizon must be {HORIZON}, got {}", self.horizon)));
        }
        let span = self.dt * self.horizon as f64;
        if (span - 2.0).abs() > 1e-9 {
            if self.allow_horizon_override {
                log::warn!("dt·horizon = {span} s, not 2 s");
            } else {
                return Err(Error::Config(format!(
                    "dt·horizon = {span} s; set allow_horizon_override to run with a horizon other than 2 s"
                )));
            }
        }
        self.camera.validate()?;
        self.dynamics.validate()?;
        if self.data.train_worlds.is_empty() {
            return Err(Error::Config("data.train_worlds is empty".into()));
        }
        for id in self.data.train_worlds.iter().chain(&self.data.test_worlds) {
            self.world(id)?;
        }
        for kind in &self.evaluation.methods {
            if !posterior_kinds().contains(&kind.as_str()) {
                return Err(Error::Config(format!(
                    "unknown method {kind:?}; valid kinds: {}",
                    posterior_kinds().join(", ")
                )));
            }
        }
        if self.projection.n_z == 0 || self.projection.n_w == 0 || self.evaluation.direct_draws == 0 {
            return Err(Error::Config("sample counts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn world(&self, id: &str) -> Result<WorldSpec> {
        if let Some(path) = self.data.world_files.get(id) {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("world {id:?}: cannot read {}: {e}", path.display())))?;
            let mut w = WorldSpec::from_toml(&text)?;
            w.id = id.to_string();
            w.validate()?;
            return Ok(w);
        }
        builtin_world(id).map_err(|_| Error::Config(format!("world id {id:?} is not defined")))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (3, self.camera.height, self.camera.width)
    }

    /// Hex SHA-256 of the canonical TOML form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let text = toml::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            seed: self.seed,
        }
    }

    fn path(&self, parts: &[&str]) -> PathBuf {
        let mut p = self.out.clone();
        for part in parts {
            p.push(part);
        }
        p
    }

    pub fn dataset_path(&self, name: &str) -> PathBuf {
        self.path(&["data", &format!("{name}.oods")])
    }

    pub fn vae_path(&self) -> PathBuf {
        self.path(&["models", "vae.oodw"])
    }

    pub fn predictor_path(&self, kind: &str) -> PathBuf {
        self.path(&["models", &format!("predictor-{kind}.oodw")])
    }

    pub fn eval_dir(&self, set: &str) -> PathBuf {
        self.path(&["eval", set])
    }

    /// First line of every CSV the run writes.
    fn stamp(&self) -> String {
        format!("# config_sha256={} seed={}\n", self.hash(), self.seed)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub config_hash: String,
    pub seed: u64,
    pub name: String,
    pub worlds: Vec<String>,
    pub motions: usize,
    pub base_rate: f64,
}

fn collect_split(cfg: &ExperimentConfig, worlds: &[String], total: usize, tag: &str) -> Result<Dataset> {
    let k = worlds.len();
    let mut parts = Vec::with_capacity(k);
    for (i, id) in worlds.iter().enumerate() {
        let n = total / k + usize::from(i < total % k);
        let world = cfg.world(id)?;
        let seed = derive_seed(cfg.seed, tag, &[i as u64]);
        parts.push(collect_dataset(&world, n, &cfg.camera, &cfg.dynamics, &cfg.controller, seed)?);
    }
    Dataset::concat(parts)
}

/// Dataset names a run produces, in order.
pub fn dataset_names(cfg: &ExperimentConfig) -> Vec<String> {
    let mut v = vec!["train".to_string(), "holdout".to_string()];
    v.extend(cfg.data.test_worlds.iter().cloned());
    v
}

pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<Vec<DatasetInfo>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut jobs: Vec<(String, Vec<String>, usize, String)> = vec![
        ("train".into(), cfg.data.train_worlds.clone(), cfg.data.train_motions, "collect-train".into()),
        ("holdout".into(), cfg.data.train_worlds.clone(), cfg.data.holdout_motions, "collect-holdout".into()),
    ];
    for (j, id) in cfg.data.test_worlds.iter().enumerate() {
        jobs.push((id.clone(), vec![id.clone()], cfg.data.test_motions, format!("collect-test-{j}")));
    }
    for (name, worlds, n, tag) in jobs {
        let d = collect_split(cfg, &worlds, n, &tag)?;
        let path = cfg.dataset_path(&name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        d.save(&path)?;
        let info = DatasetInfo {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            name: name.clone(),
            worlds,
            motions: d.len(),
            base_rate: d.base_rate(),
        };
        write(&path.with_extension("json"), to_json(&info)?)?;
        out.push(info);
    }
    Ok(out)
}

pub fn load_dataset(cfg: &ExperimentConfig, name: &str) -> Result<Dataset> {
    let path = cfg.dataset_path(name);
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} not found; run `oodrisk collect` first",
            path.display()
        )));
    }
    let d = Dataset::load(&path)?;
    if (d.width, d.height) != (cfg.camera.width, cfg.camera.height) {
        return Err(Error::Dimension(format!(
            "{} holds {}x{} images, config expects {}x{}",
            path.display(),
            d.width,
            d.height,
            cfg.camera.width,
            cfg.camera.height
        )));
    }
    Ok(d)
}

/// What `train` can build.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainTarget {
    Vae,
    Predictor(String),
}

impl TrainTarget {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "vae" {
            return Ok(TrainTarget::Vae);
        }
        if let Some(kind) = s.strip_prefix("predictor:") {
            if posterior_kinds().contains(&kind) {
                return Ok(TrainTarget::Predictor(kind.to_string()));
            }
        }
        let kinds: Vec<String> = posterior_kinds().iter().map(|k| format!("predictor:{k}")).collect();
        Err(Error::Config(format!(
            "unknown training target {s:?}; valid targets: vae, {}",
            kinds.join(", ")
        )))
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, target: &TrainTarget) -> Result<()> {
    cfg.validate()?;
    let data = TrainingSet::from_dataset(&load_dataset(cfg, "train")?);
    let prov = cfg.provenance();
    match target {
        TrainTarget::Vae => {
            let mut vae = VaeModel::new(cfg.vae.clone(), cfg.dims(), derive_seed(cfg.seed, "vae-init", &[]))?;
            let trace = train_vae(&mut vae, &data.images, derive_seed(cfg.seed, "vae-train", &[]))?;
            fs::create_dir_all(cfg.vae_path().parent().expect("models dir"))?;
            save_records(&cfg.vae_path(), &vae.to_records(&prov))?;
            write(&cfg.path(&["models", "vae_loss.csv"]), cfg.stamp() + &loss_trace_csv(&trace))?;
        }
        TrainTarget::Predictor(kind) => {
            let tag = format!("predictor-{kind}");
            let mut p = new_posterior(kind, &cfg.predictor, cfg.dims(), derive_seed(cfg.seed, &tag, &[0]))?;
            let trace = p.train(&data, derive_seed(cfg.seed, &tag, &[1]))?;
            let mut recs = p.records();
            recs.extend(prov.to_records());
            let path = cfg.predictor_path(kind);
            fs::create_dir_all(path.parent().expect("models dir"))?;
            save_records(&path, &recs)?;
            write(
                &cfg.path(&["models", &format!("predictor-{kind}_loss.csv")]),
                cfg.stamp() + &train_trace_csv(&trace),
            )?;
        }
    }
    Ok(())
}

pub fn load_vae(cfg: &ExperimentConfig) -> Result<VaeModel> {
    let recs = load_records(&cfg.vae_path(), "oodrisk train vae")?;
    let mut vae = VaeModel::new(cfg.vae.clone(), cfg.dims(), 0)?;
    vae.load_records(&recs)?;
    Ok(vae)
}

pub fn load_predictor(cfg: &ExperimentConfig, kind: &str) -> Result<Box<dyn Posterior>> {
    let recs = load_records(&cfg.predictor_path(kind), &format!("oodrisk train predictor:{kind}"))?;
    load_posterior(&recs, &cfg.predictor, cfg.dims())
}

/// Per-motion inputs of one evaluation set, every method side by side.
#[derive(Clone, Debug)]
pub struct SetScores {
    pub set: String,
    pub would_crash: Vec<bool>,
    pub true_ttc: Vec<f64>,
    pub nll: Vec<f64>,
    pub nll_z: Vec<f64>,
    /// `(method, rule, (μ, σ) per motion)`.
    pub methods: Vec<(String, String, Vec<(f64, f64)>)>,
}

impl SetScores {
    /// Inputs for one method's rule. `nll` and `combined` read the NLL; the
    /// combined rule takes its μ from the deterministic direct estimate.
    pub fn motion_scores(&self, method: &str) -> Vec<MotionScore> {
        let est = self
            .methods
            .iter()
            .find(|(m, _, _)| m == method || (method == "combined" && m == "deterministic"))
            .map(|(_, _, e)| e);
        (0..self.would_crash.len())
            .map(|i| MotionScore {
                estimate: est.map(|e| e[i]),
                nll: Some(self.nll[i]),
                nll_z: Some(self.nll_z[i]),
                would_crash: self.would_crash[i],
            })
            .collect()
    }

    /// `(method, rule)` for every curve of the set.
    pub fn curve_methods(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = self.methods.iter().map(|(m, r, _)| (m.clone(), r.clone())).collect();
        v.push(("nll".into(), "nll".into()));
        if self.methods.iter().any(|(m, _, _)| m == "deterministic") {
            v.push(("combined".into(), "combined".into()));
        }
        v
    }

    pub fn scores_csv(&self) -> String {
        let mut s = String::from("motion,would_crash,true_ttc,nll,nll_z");
        for (m, _, _) in &self.methods {
            s.push_str(&format!(",{m}_mu,{m}_sigma"));
        }
        s.push('\n');
        for i in 0..self.would_crash.len() {
            s.push_str(&format!(
                "{i},{},{:.3},{:.4},{:.4}",
                u8::from(self.would_crash[i]),
                self.true_ttc[i],
                self.nll[i],
                self.nll_z[i]
            ));
            for (_, _, e) in &self.methods {
                s.push_str(&format!(",{:.6},{:.6}", e[i].0, e[i].1));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub set: String,
    pub motions: usize,
    pub base_rate: f64,
    pub table: AutonomyTable,
    pub mean_sigma: BTreeMap<String, f64>,
    /// Rank correlation of each method's μ with the true TTC.
    pub spearman_true_ttc: BTreeMap<String, f64>,
    /// Overlap of this set's NLL histogram with the training reference.
    pub nll_overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub seed: u64,
    pub methods: Vec<String>,
    pub sets: Vec<SetSummary>,
    /// Set the latent diagnostic compared against training latents.
    pub latent_ood_set: String,
    /// Total-variation distance to the training latent grid: holdout, OOD.
    pub latent_tv: [f64; 2],
}

impl EvalSummary {
    pub fn set(&self, name: &str) -> Option<&SetSummary> {
        self.sets.iter().find(|s| s.set == name)
    }
}

/// In-memory results of `evaluate`, for callers that want more than the files.
pub struct Evaluation {
    pub summary: EvalSummary,
    pub scores: Vec<SetScores>,
    pub curves: Vec<Vec<TradeoffCurve>>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    (m, s)
}

fn strided<T>(v: &[T], k: usize) -> Vec<&T> {
    if v.len() <= k || k == 0 {
        return v.iter().collect();
    }
    (0..k).map(|i| &v[i * v.len() / k]).collect()
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, methods: &[String]) -> Result<Evaluation> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods to evaluate".into()));
    }
    for m in methods {
        if !posterior_kinds().contains(&m.as_str()) {
            return Err(Error::Config(format!(
                "unknown method {m:?}; valid kinds: {}",
                posterior_kinds().join(", ")
            )));
        }
    }
    let ev = &cfg.evaluation;
    let vae = load_vae(cfg)?;
    let posteriors: Vec<(String, Box<dyn Posterior>)> = methods
        .iter()
        .map(|k| Ok((k.clone(), load_predictor(cfg, k)?)))
        .collect::<Result<_>>()?;

    let train = load_dataset(cfg, "train")?;
    let train_imgs: Vec<Vec<f32>> = strided(&train.motions, ev.reference_images)
        .iter()
        .map(|m| m.observation.to_floats())
        .collect();
    let train_refs: Vec<&[f32]> = train_imgs.iter().map(Vec::as_slice).collect();
    let ref_nll = nll_values(&vae, &train_refs, ev.nll_samples, derive_seed(cfg.seed, "nll-reference", &[]))?;
    let (nll_mean, nll_std) = mean_std(&ref_nll);
    let nll_std = if nll_std > 0.0 { nll_std } else { 1.0 };

    let stamp = cfg.stamp();
    let mut summaries = Vec::new();
    let mut all_scores = Vec::new();
    let mut all_curves = Vec::new();
    let mut latent_sets: Vec<Vec<Vec<f32>>> = Vec::new();
    let sets: Vec<String> = dataset_names(cfg).into_iter().skip(1).collect();
    for (si, set) in sets.iter().enumerate() {
        let d = load_dataset(cfg, set)?;
        let data = TrainingSet::from_dataset(&d);
        let refs: Vec<&[f32]> = data.images.iter().map(Vec::as_slice).collect();
        let set_seed = derive_seed(cfg.seed, "evaluate", &[si as u64]);
        log::info!("evaluating {} motions of {set}", d.len());

        let nll = nll_values(&vae, &refs, ev.nll_samples, derive_seed(set_seed, "nll", &[]))?;
        let nll_z: Vec<f64> = nll.iter().map(|v| (v - nll_mean) / nll_std).collect();
        let mut est_methods = Vec::new();
        for (kind, p) in &posteriors {
            let rule = if kind == "deterministic" { "deterministic" } else { "bayesian" };
            let direct = mc_predict_direct_batch(
                p.as_ref(),
                &refs,
                &data.actions,
                ev.direct_draws,
                derive_seed(set_seed, "direct", &[]),
                &cfg.ttc,
            )?;
            est_methods.push((kind.clone(), rule.to_string(), direct.iter().map(|e| (e.mu, e.sigma)).collect()));
            let projected = project_and_predict_batch(
                &vae,
                p.as_ref(),
                &refs,
                &data.actions,
                derive_seed(set_seed, "projected", &[]),
                &cfg.projection,
                &cfg.ttc,
            )?;
            est_methods.push((format!("{kind}+vae"), rule.to_string(), projected.iter().map(|e| (e.mu, e.sigma)).collect()));
        }
        let scores = SetScores {
            set: set.clone(),
            would_crash: d.motions.iter().map(|m| m.would_crash()).collect(),
            true_ttc: d.motions.iter().map(|m| true_ttc(&m.labels, cfg.dt)).collect(),
            nll,
            nll_z,
            methods: est_methods,
        };
        for (_, _, e) in &scores.methods {
            if e.iter().any(|(mu, s)| !mu.is_finite() || !s.is_finite()) {
                return Err(Error::Numeric(format!("non-finite risk estimate on {set}")));
            }
        }

        let mut curves = Vec::new();
        for (method, rule_name) in scores.curve_methods() {
            let rule = rule_by_name(&rule_name)?;
            let ms = scores.motion_scores(&method);
            curves.push(sweep(&method, rule.as_ref(), &ms, &rule.grid(&ms))?);
        }
        let table = table_at_autonomy(&curves, &ev.autonomy_levels)?;
        let hist = nll_histogram(&ref_nll, &scores.nll, ev.histogram_bins)?;
        let summary = SetSummary {
            set: set.clone(),
            motions: d.len(),
            base_rate: d.base_rate(),
            table: table.clone(),
            mean_sigma: scores
                .methods
                .iter()
                .map(|(m, _, e)| (m.clone(), e.iter().map(|x| x.1).sum::<f64>() / e.len().max(1) as f64))
                .collect(),
            spearman_true_ttc: scores
                .methods
                .iter()
                .map(|(m, _, e)| (m.clone(), spearman(&e.iter().map(|x| x.0).collect::<Vec<_>>(), &scores.true_ttc)))
                .collect(),
            nll_overlap: hist.overlap,
        };

        let dir = cfg.eval_dir(set);
        write(&dir.join("curves.csv"), stamp.clone() + &curves_csv(&curves))?;
        write(&dir.join("curves.json"), to_json(&serde_json::json!({
            "config_hash": cfg.hash(), "seed": cfg.seed, "set": set,
            "beta_infinities": "±inf thresholds are written as null",
            "curves": curves,
        }))?)?;
        write(&dir.join("table.csv"), stamp.clone() + &table.to_csv())?;
        write(&dir.join("table.json"), to_json(&serde_json::json!({
            "config_hash": cfg.hash(), "seed": cfg.seed, "set": set, "table": table,
        }))?)?;
        write(&dir.join("scores.csv"), stamp.clone() + &scores.scores_csv())?;
        write(&dir.join("nll_histogram.csv"), stamp.clone() + &hist.to_csv())?;
        write(&dir.join("summary.json"), to_json(&serde_json::json!({
            "config_hash": cfg.hash(), "seed": cfg.seed, "summary": summary,
        }))?)?;

        // Holdout plus the first shifted set feed the latent diagnostic.
        if si < 2 {
            latent_sets.push(strided(&data.images, ev.latent_images).into_iter().cloned().collect());
        }
        summaries.push(summary);
        all_scores.push(scores);
        all_curves.push(curves);
    }

    // Latent occupancy of train vs holdout vs the first shifted set.
    let ood_set = sets.get(1).cloned().unwrap_or_default();
    let mut latent_tv = [0.0; 2];
    if latent_sets.len() == 2 {
        let tr: Vec<&[f32]> = strided(&train_refs, ev.latent_images).into_iter().copied().collect();
        let hr: Vec<&[f32]> = latent_sets[0].iter().map(Vec::as_slice).collect();
        let or: Vec<&[f32]> = latent_sets[1].iter().map(Vec::as_slice).collect();
        let diag = latent_diagnostic(&vae, &tr, &hr, &or, ev.latent_samples, derive_seed(cfg.seed, "latent", &[]))?;
        let dir = cfg.eval_dir("latent");
        for (name, g) in ["train", "holdout", "ood"].iter().zip(&diag.grids) {
            write(&dir.join(format!("{name}_grid.csv")), stamp.clone() + &grid_csv(g))?;
        }
        for (i, name) in ["holdout", "ood"].iter().enumerate() {
            write(
                &dir.join(format!("{name}_probability_difference.csv")),
                stamp.clone() + &grid_csv(&diag.probability_difference[i]),
            )?;
            write(
                &dir.join(format!("{name}_support_difference.csv")),
                stamp.clone() + &grid_csv(&diag.support_difference[i]),
            )?;
        }
        latent_tv = diag.tv_distance;
    }

    let summary = EvalSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        methods: methods.to_vec(),
        sets: summaries,
        latent_ood_set: ood_set,
        latent_tv,
    };
    write(&cfg.path(&["eval", "summary.json"]), to_json(&summary)?)?;
    Ok(Evaluation {
        summary,
        scores: all_scores,
        curves: all_curves,
    })
}

pub fn load_summary(cfg: &ExperimentConfig) -> Result<EvalSummary> {
    let path = cfg.path(&["eval", "summary.json"]);
    let text = fs::read_to_string(&path).map_err(|_| {
        Error::MissingArtifact(format!("{} not found; run `oodrisk evaluate` first", path.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Markdown summary of an evaluated run.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let s = load_summary(cfg)?;
    let mut md = format!(
        "# Run report\n\nconfig sha256 `{}`, seed {}\n\nMethods: {}\n",
        s.config_hash,
        s.seed,
        s.methods.join(", ")
    );
    for set in &s.sets {
        md.push_str(&format!(
            "\n## {}\n\n{} motions, collision rate {:.3}, NLL overlap with training {:.3}\n\nCrashes averted (%) at fixed autonomy ({}):\n\n| method |",
            set.set, set.motions, set.base_rate, set.nll_overlap, set.table.interpolation
        ));
        for l in &set.table.levels {
            md.push_str(&format!(" {:.0}% |", 100.0 * l));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(set.table.levels.len()));
        md.push('\n');
        for (m, vals) in &set.table.rows {
            md.push_str(&format!("| {m} |"));
            for v in vals {
                md.push_str(&format!(" {:.1} |", 100.0 * v));
            }
            md.push('\n');
        }
        md.push_str("\n| method | mean σ (s) | Spearman(μ, true TTC) |\n|---|---|---|\n");
        for (m, sig) in &set.mean_sigma {
            md.push_str(&format!("| {m} | {sig:.4} | {:.3} |\n", set.spearman_true_ttc[m]));
        }
    }
    md.push_str(&format!(
        "\nLatent total-variation distance to training: holdout {:.3}, {} {:.3}\n",
        s.latent_tv[0], s.latent_ood_set, s.latent_tv[1]
    ));
    let path = cfg.path(&["report.md"]);
    write(&path, md)?;
    Ok(path)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandTiming {
    pub command: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    /// Latest run of each command; excluded from any byte-level comparison.
    pub timings: Vec<CommandTiming>,
}

/// Records a finished command in `manifest.json`, replacing an older entry.
pub fn record_command(cfg: &ExperimentConfig, command: &str, seconds: f64) -> Result<()> {
    let path = cfg.path(&["manifest.json"]);
    let mut m: Manifest = fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    if m.config_hash != cfg.hash() || m.seed != cfg.seed {
        m.timings.clear();
    }
    m.config_hash = cfg.hash();
    m.seed = cfg.seed;
    m.versions
        .insert("oodrisk".into(), env!("CARGO_PKG_VERSION").into());
    m.versions.insert("dataset_format".into(), crate::sim::DATASET_VERSION.to_string());
    m.timings.retain(|t| t.command != command);
    m.timings.push(CommandTiming {
        command: command.to_string(),
        seconds,
    });
    write(&path, to_json(&m)?)
}
