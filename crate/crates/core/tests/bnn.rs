use oodrisk::bnn::*;
use oodrisk::nn::{ForwardContext, PointWeights};
use oodrisk::pipeline::RiskEstimate;
use oodrisk::sim::*;
use oodrisk::tensor::{gradient_check, ParamStore, Record, Tape, Tensor, Var};
use oodrisk::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: (usize, usize, usize) = (3, 18, 32);

fn tiny_config() -> PredictorConfig {
    PredictorConfig {
        arch: PredictorArch {
            filters: vec![2, 2, 2, 2],
            kernels: vec![3, 3, 3, 3],
            strides: vec![1, 1, 1, 1],
            image_units: 6,
            hidden: 3,
            head_units: 3,
        },
        epochs: 1,
        batch_size: 8,
        members: 3,
        ..PredictorConfig::default()
    }
}

fn corridor(n: usize, seed: u64) -> TrainingSet {
    let w = builtin_world("train-1").unwrap();
    let d = collect_dataset(&w, n, &Camera::default(), &Dynamics::default(), &Controller::default(), seed).unwrap();
    TrainingSet::from_dataset(&d)
}

fn random_inputs(rng: &mut ChaCha8Rng, n: usize, dims: (usize, usize, usize)) -> (Vec<Vec<f32>>, Vec<ActionSequence>) {
    let pix = dims.0 * dims.1 * dims.2;
    let ims = (0..n).map(|_| (0..pix).map(|_| rng.gen()).collect()).collect();
    let acts = (0..n)
        .map(|_| {
            let mut a = [0f32; HORIZON];
            a.iter_mut().for_each(|v| *v = rng.gen_range(-30.0..30.0));
            a
        })
        .collect();
    (ims, acts)
}

#[test]
fn ttc_rule_examples() {
    assert_eq!(ttc_from_profile(&[0.01; 16], 0.125, 0.5), 2.125);
    let mut p = [0.1f32; 16];
    p[4] = 0.7;
    p[9] = 0.9;
    assert_eq!(ttc_from_profile(&p, 0.125, 0.5), 0.625);
    assert_eq!(ttc_from_profile(&[0.9; 16], 0.125, 0.5), 0.125);
    assert_eq!(TtcRule::default().sentinel(), 2.125);
}

proptest! {
    #[test]
    fn raising_a_probability_never_delays_collision(
        probs in proptest::collection::vec(0.0f32..1.0, 16),
        idx in 0usize..16,
        bump in 0.0f32..1.0,
    ) {
        let before = ttc_from_profile(&probs, 0.125, 0.5);
        let mut raised = probs.clone();
        raised[idx] = (raised[idx] + bump).min(1.0);
        prop_assert!(ttc_from_profile(&raised, 0.125, 0.5) <= before);
    }
}

#[test]
fn network_emits_sixteen_probabilities() {
    for dims in [DIMS, (3, 36, 64)] {
        let cfg = PredictorConfig::default();
        let p = Deterministic::new(&cfg, dims, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ims, acts) = random_inputs(&mut rng, 3, dims);
        let (x, a) = stack_inputs(&[&ims[0][..], &ims[1], &ims[2]], &acts).unwrap();
        let probs = probabilities(&p.logits(&x, &a, 0).unwrap());
        assert_eq!(probs.len(), 3 * HORIZON);
        assert!(probs.iter().all(|&q| q > 0.0 && q < 1.0));
    }
}

#[test]
fn untrained_model_refuses_prediction() {
    let p = new_posterior("deterministic", &tiny_config(), DIMS, 0).unwrap();
    let r = predict(p.as_ref(), &vec![0.5; 3 * 18 * 32], &[0.0; 16], 0);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn unknown_kind_lists_valid_ones() {
    let Err(Error::Config(msg)) = new_posterior("mcmc", &tiny_config(), DIMS, 0) else {
        panic!("expected a config error");
    };
    for k in ["deterministic", "ensemble", "dropout", "bbb"] {
        assert!(msg.contains(k), "{msg}");
    }
}

#[test]
fn deterministic_prediction_ignores_draw_seed() {
    let data = corridor(64, 2);
    let mut p = new_posterior("deterministic", &tiny_config(), DIMS, 0).unwrap();
    p.train(&data, 1).unwrap();
    let a = predict(p.as_ref(), &data.images[0], &data.actions[0], 1).unwrap();
    let b = predict(p.as_ref(), &data.images[0], &data.actions[0], 99).unwrap();
    assert_eq!(a, b);
    for n_w in [1, 7] {
        let e = mc_predict_direct(p.as_ref(), &data.images[0], &data.actions[0], n_w, 5, &TtcRule::default()).unwrap();
        assert_eq!(e.sigma, 0.0);
        assert_eq!(e.ttc_samples.len(), n_w);
    }
}

#[test]
fn single_member_ensemble_is_the_deterministic_model() {
    let data = corridor(64, 2);
    let cfg = PredictorConfig {
        members: 1,
        ..tiny_config()
    };
    let mut e = new_posterior("ensemble", &cfg, DIMS, 4).unwrap();
    let mut d = new_posterior("deterministic", &cfg, DIMS, 4).unwrap();
    e.train(&data, 8).unwrap();
    d.train(&data, 8).unwrap();
    let refs: Vec<&[f32]> = data.images.iter().map(Vec::as_slice).collect();
    let rule = TtcRule::default();
    let a = mc_predict_direct_batch(e.as_ref(), &refs, &data.actions, 10, 1, &rule).unwrap();
    let b = mc_predict_direct_batch(d.as_ref(), &refs, &data.actions, 10, 1, &rule).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|r| r.sigma == 0.0));
}

#[test]
fn ensemble_members_differ_and_are_drawn_uniformly() {
    let data = corridor(64, 2);
    let mut e = Ensemble::new(&tiny_config(), DIMS, 4).unwrap();
    e.train(&data, 8).unwrap();
    let mut worst = f64::INFINITY;
    for i in 0..e.members.len() {
        for j in 0..i {
            worst = worst.min(e.members[i].distance(&e.members[j]));
        }
    }
    assert!(worst > 0.0);
    let mut counts = [0usize; 3];
    let draws = 30_000;
    for w in 0..draws {
        counts[e.member_for(direct_draw_seed(11, w))] += 1;
    }
    for c in counts {
        let frac = c as f64 / draws as f64;
        assert!((frac - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
    }
}

/// Two fixed profiles picked like ensemble members: one crossing the threshold
/// at step 3 (0.5 s), one at step 11 (1.5 s).
struct TwoPoint {
    net: PredictorNet,
}

impl Posterior for TwoPoint {
    fn kind(&self) -> &'static str {
        "two-point"
    }
    fn net(&self) -> &PredictorNet {
        &self.net
    }
    fn is_trained(&self) -> bool {
        true
    }
    fn train(&mut self, _: &TrainingSet, _: u64) -> oodrisk::Result<Vec<TrainRow>> {
        Ok(vec![])
    }
    fn draw_key(&self, draw_seed: u64) -> Option<u64> {
        Some(oodrisk::seed::derive_seed(draw_seed, "member", &[]) % 2)
    }
    fn logits(&self, x: &Tensor, _: &Tensor, draw_seed: u64) -> oodrisk::Result<Vec<f32>> {
        let cross = if self.draw_key(draw_seed) == Some(0) { 3 } else { 11 };
        let row: Vec<f32> = (0..HORIZON).map(|t| if t >= cross { 4.0 } else { -4.0 }).collect();
        Ok(row.iter().copied().cycle().take(x.shape()[0] * HORIZON).collect())
    }
    fn records(&self) -> Vec<Record> {
        vec![]
    }
    fn load(&mut self, _: &[Record]) -> oodrisk::Result<()> {
        Ok(())
    }
}

#[test]
fn two_point_mixture_statistics() {
    let p = TwoPoint {
        net: PredictorNet::new(tiny_config().arch, DIMS).unwrap(),
    };
    let e = mc_predict_direct(&p, &vec![0.0; 3 * 18 * 32], &[0.0; 16], 4000, 3, &TtcRule::default()).unwrap();
    assert!((e.mu - 1.0).abs() < 0.05, "{}", e.mu);
    assert!((e.sigma - 0.5).abs() < 0.025, "{}", e.sigma);
    let again = RiskEstimate::from_samples(e.ttc_samples.clone(), 1, 4000, 2.125);
    assert_eq!(again, e);
    assert_eq!(e.censored_fraction, 0.0);
}

#[test]
fn bbb_with_vanishing_spread_matches_mean_network() {
    let mut b = Bbb::new(&PredictorConfig::default(), DIMS, 6).unwrap();
    let names: Vec<String> = b.params.iter().map(|(n, _)| n.to_string()).filter(|n| n.ends_with(".rho")).collect();
    for n in names {
        let t = b.params.get_mut(&n).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = -30.0);
    }
    b.set_trained();
    let mean = b.mean_network();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (ims, acts) = random_inputs(&mut rng, 4, DIMS);
    for (im, a) in ims.iter().zip(&acts) {
        let p = predict(&b, im, a, 17).unwrap();
        let q = predict(&mean, im, a, 0).unwrap();
        for (x, y) in p.iter().zip(&q) {
            assert!((x - y).abs() < 1e-4);
        }
    }
}

#[test]
fn bbb_kl_vanishes_at_the_prior() {
    let cfg = PredictorConfig::default();
    let mut b = Bbb::new(&cfg, DIMS, 6).unwrap();
    assert!(bbb_kl(&b.params, 1.0).unwrap() > 0.0);
    // softplus(ρ) = 1 at ρ = ln(e − 1).
    let rho = (std::f32::consts::E - 1.0).ln();
    let names: Vec<String> = b.params.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let v = if n.ends_with(".rho") { rho } else { 0.0 };
        b.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x = v);
    }
    let kl = bbb_kl(&b.params, 1.0).unwrap();
    assert!(kl.abs() < 1e-3, "{kl}");
}

#[test]
fn dropout_masks_do_not_depend_on_batch_company() {
    let data = corridor(40, 2);
    let mut p = new_posterior("dropout", &tiny_config(), DIMS, 0).unwrap();
    p.train(&data, 1).unwrap();
    let refs: Vec<&[f32]> = data.images.iter().map(Vec::as_slice).collect();
    let seeds = [5u64, 6, 7];
    let rule = TtcRule::default();
    let all = ttc_samples(p.as_ref(), &refs, &data.actions, &seeds, &rule, 0).unwrap();
    let (x, a) = stack_inputs(&refs[..10], &data.actions[..10]).unwrap();
    let (x1, a1) = stack_inputs(&refs[3..4], &data.actions[3..4]).unwrap();
    let batch = probabilities(&p.logits(&x, &a, 5).unwrap());
    let alone = probabilities(&p.logits(&x1, &a1, 5).unwrap());
    for (u, v) in batch[3 * HORIZON..4 * HORIZON].iter().zip(&alone) {
        assert!((u - v).abs() < 1e-5);
    }
    // Different draws give different masks.
    assert_ne!(p.logits(&x1, &a1, 5).unwrap(), p.logits(&x1, &a1, 6).unwrap());
    assert_eq!(all.len(), 40);
}

#[test]
fn every_kind_round_trips_through_records() {
    let data = corridor(32, 2);
    let cfg = tiny_config();
    for kind in posterior_kinds() {
        let mut p = new_posterior(kind, &cfg, DIMS, 3).unwrap();
        p.train(&data, 2).unwrap();
        let recs = p.records();
        assert_eq!(oodrisk::artifact::kind_of(&recs), Some(kind));
        let mut buf = Vec::new();
        oodrisk::tensor::write_records(&mut buf, &recs).unwrap();
        let back = oodrisk::tensor::read_records(buf.as_slice()).unwrap();
        let q = load_posterior(&back, &PredictorConfig { members: 99, ..cfg.clone() }, DIMS).unwrap();
        let (x, a) = stack_inputs(&[&data.images[0][..]], &data.actions[..1]).unwrap();
        for ds in [1u64, 2, 3] {
            assert_eq!(p.logits(&x, &a, ds).unwrap(), q.logits(&x, &a, ds).unwrap(), "{kind}");
        }
    }
    let ens = new_posterior("ensemble", &cfg, DIMS, 0).unwrap();
    let members = ens.records().iter().filter(|r| r.name.ends_with("/out.b")).count();
    assert_eq!(members, cfg.members);
}

/// Substitutes one named weight with the probed variable.
struct Probe<'a> {
    inner: PointWeights<'a>,
    name: &'a str,
    var: Var,
}

impl ForwardContext for Probe<'_> {
    fn weight(&mut self, tape: &mut Tape, name: &str) -> oodrisk::Result<Var> {
        if name == self.name {
            Ok(self.var)
        } else {
            self.inner.weight(tape, name)
        }
    }
}

/// Same-sign weights scaled by fan-in keep every ReLU active, so the loss is
/// smooth around the point and no gradient is lost in f32 round-off.
fn conditioned(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        let s = t.shape().to_vec();
        let fan = match s.len() {
            4 => s[1] * s[2] * s[3],
            2 => s[0],
            _ => 1,
        } as f32;
        let sign = if n.starts_with("out.") { -1.0 } else { 1.0 };
        let bias = n.ends_with(".b");
        for v in t.data_mut() {
            *v = if bias { 0.1 } else { sign * rng.gen_range(0.5f32..1.5) / fan };
        }
    }
    store.get_mut("out.b").unwrap().data_mut()[0] = 0.2;
}

#[test]
fn predictor_loss_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let dims = (3, 4, 6);
    let net = PredictorNet::new(cfg.arch.clone(), dims).unwrap();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(8 + seed);
        let mut store: ParamStore = net.init_params(&mut rng);
        conditioned(&mut store, &mut rng);
        let (ims, acts) = random_inputs(&mut rng, 2, dims);
        let (x, a) = stack_inputs(&[&ims[0][..], &ims[1]], &acts).unwrap();
        let y = Tensor::new(vec![2, 16], (0..32).map(|i| ((i / 5) % 2) as f32).collect()).unwrap();
        for name in ["out.w", "head2.w", "head1.b", "cell.w", "init.w", "context.w", "image.w", "conv4.w", "conv1.w"] {
            // The initial state reaches the loss only through the whole unroll.
            let h = if name == "init.w" { 0.1 } else { 0.02 };
            let err = gradient_check(
                |t, v| {
                    let mut ctx = Probe {
                        inner: PointWeights::frozen(&store, t),
                        name,
                        var: v,
                    };
                    let xv = t.constant(x.clone());
                    let l = net.logits(t, &mut ctx, xv, &a)?;
                    t.bce_with_logits(l, &y)
                },
                store.get(name).unwrap(),
                h,
            )
            .unwrap();
            assert!(err < 1e-3, "seed {seed} {name}: {err}");
        }
    }
}

/// Trains every kind on the same corridor data and compares held-out BCE.
#[test]
fn corridor_training_run() {
    let train = corridor(2000, 3);
    let held = corridor(600, 77);
    let cfg = PredictorConfig {
        epochs: 5,
        ..PredictorConfig::default()
    };
    let mut scores = Vec::new();
    for kind in posterior_kinds() {
        let mut p = new_posterior(kind, &cfg, DIMS, 1).unwrap();
        let trace = p.train(&train, 2).unwrap();
        let first = trace.iter().find(|r| r.epoch == 0).unwrap().bce;
        let last = trace.iter().filter(|r| r.member == 0).last().unwrap().bce;
        assert!(last < 0.7 * first, "{kind}: bce {first} -> {last}");
        scores.push((kind, mean_bce(p.as_ref(), &held, 10, 4).unwrap()));
    }
    let base = scores[0].1;
    for (kind, s) in &scores {
        assert!((s - base).abs() <= 0.2 * base, "{kind} held-out bce {s} vs deterministic {base}");
    }
}
