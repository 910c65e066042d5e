use oodrisk::eval::*;
use oodrisk::sim::*;
use oodrisk::vae::*;
use oodrisk::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn est(mu: f64, sigma: f64, crash: bool) -> MotionScore {
    MotionScore {
        estimate: Some((mu, sigma)),
        would_crash: crash,
        ..MotionScore::default()
    }
}

fn random_scores(seed: u64, n: usize) -> Vec<MotionScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let nll: f64 = rng.gen_range(100.0..200.0);
            MotionScore {
                estimate: Some((rng.gen_range(0.1..2.2), rng.gen_range(0.0..0.8))),
                nll: Some(nll),
                nll_z: Some((nll - 150.0) / 30.0),
                would_crash: rng.gen_bool(0.3),
            }
        })
        .collect()
}

#[test]
fn bayesian_rule_arithmetic() {
    let b = Bayesian;
    for beta in [-10.0, -1.0, 0.0, 1.0, 10.0] {
        assert!(!b.decide(&[beta], &est(2.5, 0.0, false)).unwrap());
    }
    for sigma in [0.0, 0.3, 5.0] {
        assert!(b.decide(&[0.0], &est(1.9, sigma, false)).unwrap());
    }
    assert!(b.decide(&[1.0], &est(2.2, 0.5, false)).unwrap());
    assert!(DeterministicRule.decide(&[0.5], &est(2.2, 0.0, false)).unwrap());
    assert!(!DeterministicRule.decide(&[0.1], &est(2.2, 0.0, false)).unwrap());
}

#[test]
fn rules_reject_missing_inputs() {
    let no_nll = est(1.0, 0.0, false);
    assert!(matches!(NllRule.decide(&[0.0], &no_nll), Err(Error::Contract(_))));
    assert!(matches!(Combined.decide(&[0.0, 1.0], &no_nll), Err(Error::Contract(_))));
    let only_nll = MotionScore {
        nll: Some(3.0),
        ..MotionScore::default()
    };
    assert!(matches!(Bayesian.decide(&[0.0], &only_nll), Err(Error::Contract(_))));
    assert!(NllRule.decide(&[2.0], &only_nll).unwrap());
    assert!(!NllRule.decide(&[4.0], &only_nll).unwrap());
    let err = rule_by_name("vibes").err().unwrap();
    assert!(matches!(err, Error::Config(ref m) if m.contains("bayesian") && m.contains("combined")));
}

#[test]
fn decision_flip_is_scale_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let (d, s): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(0.05..1.0));
        let c: f64 = rng.gen_range(0.1..10.0);
        // The flip sits at β = (μ − 2)/σ for both scalings.
        let flip = d / s;
        for (mu, sigma) in [(2.0 + d, s), (2.0 + c * d, c * s)] {
            assert!(!Bayesian.decide(&[flip - 1e-6], &est(mu, sigma, false)).unwrap());
            assert!(Bayesian.decide(&[flip + 1e-6], &est(mu, sigma, false)).unwrap());
        }
    }
}

#[test]
fn sweep_endpoints_and_counts() {
    let m = random_scores(1, 300);
    let grid = Bayesian.grid(&m);
    let c = sweep("ensemble", &Bayesian, &m, &grid).unwrap();
    assert_eq!(c.points.len(), grid.len());
    let last = c.points.last().unwrap();
    assert_eq!((last.autonomy, last.averted), (0.0, 1.0));
    for p in &c.points {
        assert_eq!(p.tp + p.fp + p.fn_ + p.tn, m.len());
        assert!((0.0..=1.0).contains(&p.autonomy) && (0.0..=1.0).contains(&p.averted));
    }
    for w in c.points.windows(2) {
        assert!(w[1].autonomy <= w[0].autonomy);
    }
    // With every μ above the horizon, −∞ never intervenes.
    let safe: Vec<MotionScore> = (0..10).map(|i| est(2.1 + i as f64 * 0.1, 0.2, i % 3 == 0)).collect();
    let c = sweep("x", &Bayesian, &safe, &Bayesian.grid(&safe)).unwrap();
    assert_eq!((c.points[0].autonomy, c.points[0].averted), (1.0, 0.0));
    assert!(matches!(sweep("x", &Bayesian, &[], &grid), Err(Error::Contract(_))));
}

#[test]
fn no_crashes_reports_full_aversion_with_flag() {
    let m: Vec<MotionScore> = (0..5).map(|_| est(2.125, 0.0, false)).collect();
    let c = sweep("x", &DeterministicRule, &m, &[vec![0.0]]).unwrap();
    assert!(c.points[0].averted_undefined);
    assert_eq!(c.points[0].averted, 1.0);
}

#[test]
fn sweep_ignores_motion_order() {
    let m = random_scores(2, 200);
    let mut r = m.clone();
    r.reverse();
    r.rotate_left(37);
    for name in ["bayesian", "deterministic", "nll", "combined"] {
        let rule = rule_by_name(name).unwrap();
        let a = sweep("x", rule.as_ref(), &m, &rule.grid(&m)).unwrap();
        let b = sweep("x", rule.as_ref(), &r, &rule.grid(&r)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn oracle_estimator_matches_brute_force_confusion() {
    let w = builtin_world("train-2").unwrap();
    let d = collect_dataset(&w, 400, &Camera::default(), &Dynamics::default(), &Controller::default(), 8).unwrap();
    let dt = Dynamics::default().dt;
    let ttc = |m: &Motion| match m.labels.iter().position(|&l| l == 1) {
        Some(i) => dt * (i + 1) as f64,
        None => dt * 17.0,
    };
    let scores: Vec<MotionScore> = d.motions.iter().map(|m| est(ttc(m), 0.0, m.would_crash())).collect();
    let c = sweep("oracle", &Bayesian, &scores, &[vec![0.0]]).unwrap();
    let p = &c.points[0];
    // Brute force, counted directly from the labels.
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for m in &d.motions {
        let flag = ttc(m) < 2.0;
        match (flag, m.labels.contains(&1)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    assert_eq!((p.tp, p.fp, p.fn_, p.tn), (tp, fp, fn_, tn));
    assert_eq!(p.fp, 0);
    assert!(tp > 0);
    // Crashes first labelled in the final step sit exactly on the horizon
    // and are the only ones the strict rule lets through.
    let last_step = d.motions.iter().filter(|m| m.labels.iter().position(|&l| l == 1) == Some(15)).count();
    assert_eq!(fn_, last_step);
    let early: Vec<MotionScore> = d
        .motions
        .iter()
        .filter(|m| m.labels.iter().position(|&l| l == 1) != Some(15))
        .map(|m| est(ttc(m), 0.0, m.would_crash()))
        .collect();
    let safe = early.iter().filter(|s| !s.would_crash).count() as f64 / early.len() as f64;
    let p = &sweep("oracle", &Bayesian, &early, &[vec![0.0]]).unwrap().points[0];
    assert_eq!(p.averted, 1.0);
    assert!((p.autonomy - safe).abs() < 1e-12);
}

#[test]
fn interventions_nest_along_the_grid() {
    let all = random_scores(3, 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let subset: Vec<MotionScore> = all.iter().filter(|_| rng.gen_bool(0.2)).copied().collect();
        for name in ["bayesian", "deterministic", "nll"] {
            let rule = rule_by_name(name).unwrap();
            let grid = rule.grid(&subset);
            let mut prev = interventions(rule.as_ref(), &grid[0], &subset).unwrap();
            assert!(prev.iter().all(|&f| !f), "{name}: first grid point intervenes");
            for beta in &grid[1..] {
                let cur = interventions(rule.as_ref(), beta, &subset).unwrap();
                assert!(prev.iter().zip(&cur).all(|(&a, &b)| !a || b), "{name} trial {trial} β {beta:?}");
                prev = cur;
            }
            assert!(prev.iter().all(|&f| f));
        }
    }
}

#[test]
fn combined_curve_is_an_envelope() {
    let m = random_scores(5, 400);
    let c = sweep("combined", &Combined, &m, &Combined.grid(&m)).unwrap();
    for w in c.points.windows(2) {
        assert!(w[1].autonomy < w[0].autonomy && w[1].averted >= w[0].averted);
    }
    let last = c.points.last().unwrap();
    assert_eq!((last.autonomy, last.averted), (0.0, 1.0));
    // Never worse than β_NLL = 0 alone, which is the plain μ rule.
    let det = sweep("det", &DeterministicRule, &m, &DeterministicRule.grid(&m)).unwrap();
    for level in [0.5, 0.6, 0.7] {
        assert!(averted_at(&c, level).unwrap() >= averted_at(&det, level).unwrap() - 1e-12);
    }
}

fn curve(points: &[(f64, f64)]) -> TradeoffCurve {
    let m = vec![est(1.0, 0.0, true)];
    TradeoffCurve {
        method: "m".into(),
        rule: "deterministic".into(),
        points: points
            .iter()
            .map(|&(a, v)| {
                let mut p = CurvePoint::from_outcomes(vec![0.0], &[true], &m);
                p.autonomy = a;
                p.averted = v;
                p
            })
            .collect(),
    }
}

#[test]
fn table_interpolates_and_refuses_to_extrapolate() {
    let c = curve(&[(0.4, 0.9), (0.6, 0.7)]);
    assert!((averted_at(&c, 0.5).unwrap() - 0.8).abs() < 1e-12);
    assert_eq!(averted_at(&c, 0.6).unwrap(), 0.7);
    assert!(matches!(averted_at(&c, 0.7), Err(Error::Contract(_))));
    let full = curve(&[(0.0, 1.0), (0.5, 0.95), (0.75, 0.6), (1.0, 0.0)]);
    let t = table_at_autonomy(&[full.clone()], &TABLE_LEVELS).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.get("m", 0.5), Some(0.95));
    assert!((t.get("m", 0.6).unwrap() - 0.81).abs() < 1e-12);
    assert!(t.to_csv().starts_with("method,autonomy_0.50"));
    assert!(table_at_autonomy(&[full, c], &TABLE_LEVELS).is_err());
}

#[test]
fn nll_histogram_overlap_extremes() {
    let a: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
    let h = nll_histogram(&a, &a, 20).unwrap();
    assert!((h.overlap - 1.0).abs() < 1e-12);
    assert_eq!(h.edges.len(), 21);
    let b: Vec<f64> = a.iter().map(|v| v + 50.0).collect();
    assert_eq!(nll_histogram(&a, &b, 20).unwrap().overlap, 0.0);
    let c: Vec<f64> = a.iter().map(|v| v + 5.0).collect();
    let half = nll_histogram(&a, &c, 30).unwrap().overlap;
    assert!(half > 0.3 && half < 0.7);
    assert!(nll_histogram(&[], &a, 10).is_err());
}

#[test]
fn principal_axes_find_the_long_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = [0.6, 0.8, 0.0];
    let rows: Vec<Vec<f64>> = (0..500)
        .map(|_| {
            let t: f64 = rng.gen_range(-5.0..5.0);
            let e: f64 = rng.gen_range(-0.1..0.1);
            vec![dir[0] * t, dir[1] * t, e]
        })
        .collect();
    let (_, [a, b]) = principal_axes(&rows);
    let dot: f64 = a.iter().zip(dir).map(|(x, y)| x * y).sum();
    assert!(dot.abs() > 0.999);
    assert!(b[2].abs() > 0.99);
    let flat = vec![vec![1.0, 2.0, 3.0]; 10];
    let (_, [a, b]) = principal_axes(&flat);
    assert_eq!((a, b), (vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]));
}

#[test]
fn latent_diagnostic_grids() {
    let w = builtin_world("train-1").unwrap();
    let d = collect_dataset(&w, 24, &Camera::default(), &Dynamics::default(), &Controller::default(), 2).unwrap();
    let ims: Vec<Vec<f32>> = d.motions.iter().map(|m| m.observation.to_floats()).collect();
    let refs: Vec<&[f32]> = ims.iter().map(Vec::as_slice).collect();
    let vae = VaeModel::new(
        VaeConfig {
            arch: VaeArch::Conv {
                filters: vec![4, 8, 8],
                kernel: 5,
            },
            latent_dim: 8,
            ..VaeConfig::default()
        },
        (3, 18, 32),
        1,
    )
    .unwrap();
    let diag = latent_diagnostic(&vae, &refs, &refs, &refs[..8], 3, 5).unwrap();
    assert_eq!(diag.grids[0].len(), LATENT_GRID * LATENT_GRID);
    for g in &diag.grids {
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(diag.probability_difference[0].iter().all(|&v| v == 0.0));
    assert_eq!(diag.tv_distance[0], 0.0);
    assert!(diag.support_difference[0].iter().all(|&v| v == 0));
    assert!(diag.support_difference.iter().flatten().all(|v| [-1, 0, 1].contains(v)));
    assert_eq!(grid_csv(&diag.support_difference[1]).lines().count(), LATENT_GRID);
}

#[test]
fn spearman_of_monotone_and_reversed() {
    let a = [1.0, 2.0, 3.0, 4.0];
    assert!((spearman(&a, &[10.0, 20.0, 35.0, 100.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    assert_eq!(spearman(&a, &[1.0, 1.0, 1.0, 1.0]), 0.0);
}
