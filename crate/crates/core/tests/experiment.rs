use oodrisk::experiment::*;
use oodrisk::Error;

const TINY: &str = r#"
seed = 3

[data]
train_worlds = ["train-1", "train-2"]
train_motions = 60
holdout_motions = 24
test_worlds = ["test-texture", "test-cones"]
test_motions = 24

[vae]
latent_dim = 4
epochs = 1
arch = { kind = "conv", filters = [4, 4, 4], kernel = 5 }

[predictor]
epochs = 1
members = 2
arch = { filters = [4, 4, 4, 4], image_units = 8 }

[projection]
n_z = 2
n_w = 2

[evaluation]
methods = ["deterministic", "ensemble"]
direct_draws = 3
nll_samples = 2
reference_images = 16
latent_images = 8
latent_samples = 2
"#;

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY)
        .unwrap()
        .with_overrides(None, Some(dir.to_path_buf()))
}

#[test]
fn config_defaults_and_validation() {
    let c = ExperimentConfig::default();
    assert_eq!(c.data.train_motions, 5000);
    assert_eq!(c.data.test_motions, 3000);
    assert_eq!(c.vae.latent_dim, 32);
    assert_eq!((c.projection.n_z, c.projection.n_w, c.evaluation.direct_draws), (10, 10, 100));
    c.validate().unwrap();
    // Round-trips through its own TOML form.
    let text = toml::to_string(&c).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);

    let mut bad = c.clone();
    bad.data.test_worlds.push("moon-base".into());
    assert!(matches!(bad.validate(), Err(Error::Config(ref m)) if m.contains("moon-base")));

    let mut slow = c.clone();
    slow.dt = 0.25;
    assert!(matches!(slow.clone().with_overrides(None, None).validate(), Err(Error::Config(_))));
    slow.allow_horizon_override = true;
    slow.with_overrides(None, None).validate().unwrap();

    assert!(matches!(ExperimentConfig::from_toml("sede = 1"), Err(Error::Config(_))));
}

#[test]
fn hash_ignores_output_dir_but_not_seed() {
    let a = ExperimentConfig::default();
    let b = a.clone().with_overrides(None, Some("elsewhere".into()));
    let c = a.clone().with_overrides(Some(9), None);
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn train_targets_parse() {
    assert_eq!(TrainTarget::parse("vae").unwrap(), TrainTarget::Vae);
    assert_eq!(
        TrainTarget::parse("predictor:bbb").unwrap(),
        TrainTarget::Predictor("bbb".into())
    );
    let err = TrainTarget::parse("predictor:gp").unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("predictor:dropout")));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn tiny_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());

    // Nothing collected yet.
    let missing = cmd_train(&cfg, &TrainTarget::Vae).unwrap_err();
    assert_eq!(missing.exit_code(), 3);

    let infos = cmd_collect(&cfg).unwrap();
    let names: Vec<&str> = infos.iter().map(|i| i.name.as_str()).collect();
    assert_eq!(names, ["train", "holdout", "test-texture", "test-cones"]);
    assert_eq!(infos[0].motions, 60);

    let methods = vec!["deterministic".to_string(), "ensemble".to_string()];
    let err = cmd_evaluate(&cfg, &methods).err().unwrap();
    assert!(matches!(err, Error::MissingArtifact(ref m) if m.contains("oodrisk train vae")));

    cmd_train(&cfg, &TrainTarget::Vae).unwrap();
    cmd_train(&cfg, &TrainTarget::Predictor("deterministic".into())).unwrap();
    let err = cmd_evaluate(&cfg, &methods).err().unwrap();
    assert!(matches!(err, Error::MissingArtifact(ref m) if m.contains("predictor:ensemble")));
    cmd_train(&cfg, &TrainTarget::Predictor("ensemble".into())).unwrap();

    assert!(matches!(cmd_evaluate(&cfg, &[]), Err(Error::Config(_))));
    let ev = cmd_evaluate(&cfg, &methods).unwrap();
    let s = &ev.summary;
    assert_eq!(s.sets.len(), 3);
    let rows: Vec<&str> = s.sets[0].table.rows.iter().map(|(m, _)| m.as_str()).collect();
    assert_eq!(
        rows,
        ["deterministic", "deterministic+vae", "ensemble", "ensemble+vae", "nll", "combined"]
    );
    for curves in &ev.curves {
        for c in curves {
            let last = c.points.last().unwrap();
            assert_eq!((last.autonomy, last.averted), (0.0, 1.0), "{}", c.method);
        }
    }
    assert_eq!(s.sets[0].mean_sigma["deterministic"], 0.0);
    assert!(s.sets.iter().all(|x| x.nll_overlap >= 0.0 && x.nll_overlap <= 1.0));

    for f in ["curves.csv", "curves.json", "table.csv", "table.json", "scores.csv", "nll_histogram.csv", "summary.json"] {
        let p = cfg.eval_dir("test-texture").join(f);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains(&cfg.hash()), "{f} lacks provenance");
    }
    let grid = std::fs::read_to_string(cfg.eval_dir("latent").join("ood_support_difference.csv")).unwrap();
    assert_eq!(grid.lines().count(), 65);
    assert_eq!(load_summary(&cfg).unwrap(), ev.summary);

    let report = std::fs::read_to_string(cmd_report(&cfg).unwrap()).unwrap();
    assert!(report.contains("ensemble+vae") && report.contains("| 50% |"));

    record_command(&cfg, "collect", 1.5).unwrap();
    record_command(&cfg, "collect", 2.5).unwrap();
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.timings.len(), 1);
    assert_eq!(m.config_hash, cfg.hash());
}
