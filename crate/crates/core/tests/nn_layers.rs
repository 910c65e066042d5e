use oodrisk::nn::*;
use oodrisk::tensor::{gradient_check, ParamStore, Tape, Tensor, Var};
use oodrisk::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Weights and activations drawn from one sign band so FD differences stay well above f32 round-off.
fn band(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.5f32..1.5)).collect()).unwrap()
}

fn scaled(t: Tensor, s: f32) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::new(shape, t.data().iter().map(|v| v * s).collect()).unwrap()
}

/// Uses the probed tensor for one named weight and constants for the rest.
struct Probe<'a> {
    store: &'a ParamStore,
    name: String,
    var: Var,
}

impl ForwardContext for Probe<'_> {
    fn weight(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if name == self.name {
            Ok(self.var)
        } else {
            Ok(tape.constant(self.store.get(name)?.clone()))
        }
    }
}

fn readout(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone().reshaped(tape.shape(y).to_vec())?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Checks d(readout ∘ layer) wrt the input and every parameter of `layer`.
fn check_layer(layer: &Layer, store: &ParamStore, x: &Tensor, read: &Tensor, h: f32) -> f64 {
    let mut worst = 0.0f64;
    let fx = |t: &mut Tape, v: Var| {
        let mut ctx = Probe {
            store,
            name: String::new(),
            var: v,
        };
        let y = layer.forward(t, &mut ctx, v)?;
        readout(t, y, read)
    };
    worst = worst.max(gradient_check(fx, x, h).unwrap());
    for name in [layer.weight_name(), layer.bias_name()] {
        let f = |t: &mut Tape, v: Var| {
            let xv = t.constant(x.clone());
            let mut ctx = Probe {
                store,
                name: name.clone(),
                var: v,
            };
            let y = layer.forward(t, &mut ctx, xv)?;
            readout(t, y, read)
        };
        worst = worst.max(gradient_check(f, store.get(&name).unwrap(), h).unwrap());
    }
    worst
}

#[test]
fn dense_layer_matches_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = Layer::new(
        "d",
        LayerSpec::Dense {
            inputs: 5,
            outputs: 3,
            activation: Activation::Identity,
        },
    );
    let mut store = ParamStore::new();
    store.insert("d.w", random(&mut rng, &[5, 3], 1.0));
    store.insert("d.b", random(&mut rng, &[3], 1.0));
    let x = random(&mut rng, &[2, 5], 1.0);
    let mut tape = Tape::new();
    let mut ctx = PointWeights::frozen(&store, &mut tape);
    let xv = tape.constant(x.clone());
    let y = layer.forward(&mut tape, &mut ctx, xv).unwrap();
    let (w, b) = (store.get("d.w").unwrap(), store.get("d.b").unwrap());
    for r in 0..2 {
        for c in 0..3 {
            let mut s = b.data()[c] as f64;
            for k in 0..5 {
                s += x.data()[r * 5 + k] as f64 * w.data()[k * 3 + c] as f64;
            }
            assert!((tape.value(y).data()[r * 3 + c] as f64 - s).abs() < 1e-5);
        }
    }
}

#[test]
fn every_layer_kind_passes_gradient_check() {
    let mut cases = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let specs = [
            (
                LayerSpec::Dense {
                    inputs: 4,
                    outputs: 3,
                    activation: Activation::Tanh,
                },
                vec![2, 4],
                1e-2f32,
            ),
            (
                LayerSpec::Dense {
                    inputs: 3,
                    outputs: 2,
                    activation: Activation::Sigmoid,
                },
                vec![2, 3],
                1e-2,
            ),
            (
                LayerSpec::Conv {
                    in_channels: 2,
                    filters: 2,
                    kernel: (3, 3),
                    stride: 2,
                    padding: 1,
                    activation: Activation::Identity,
                },
                vec![1, 2, 5, 5],
                0.25,
            ),
            (
                LayerSpec::Deconv {
                    in_channels: 2,
                    filters: 2,
                    kernel: (3, 3),
                    stride: 2,
                    padding: 1,
                    output_padding: (1, 0),
                    activation: Activation::Identity,
                },
                vec![1, 2, 3, 3],
                0.25,
            ),
        ];
        for (i, (spec, in_shape, h)) in specs.into_iter().enumerate() {
            let layer = Layer::new(format!("l{i}"), spec.clone());
            let mut store = ParamStore::new();
            for (suffix, shape) in spec.param_shapes() {
                let t = if h > 0.1 { band(&mut rng, &shape) } else { random(&mut rng, &shape, 1.0) };
                store.insert(format!("l{i}.{suffix}"), t);
            }
            let x = if h > 0.1 { band(&mut rng, &in_shape) } else { random(&mut rng, &in_shape, 1.0) };
            let out = spec.output_shape(&in_shape[1..]).unwrap();
            let mut oshape = vec![in_shape[0]];
            oshape.extend(out);
            let read = band(&mut rng, &oshape);
            let err = check_layer(&layer, &store, &x, &read, h);
            assert!(err < 1e-3, "{spec:?} seed {seed}: {err}");
            cases += 1;
        }
        // LSTM step: gradient wrt the joint weight and the input.
        let cell = Layer::new("cell", LayerSpec::LstmCell { inputs: 3, hidden: 2 });
        let mut store = ParamStore::new();
        // Small same-sign weights keep gates unsaturated and input gradients
        // free of cancellation, where FD noise would dominate.
        store.insert("cell.w", scaled(band(&mut rng, &[5, 8]), 0.3));
        store.insert("cell.b", random(&mut rng, &[8], 0.5));
        let h0 = band(&mut rng, &[1, 2]);
        let c0 = band(&mut rng, &[1, 2]);
        let read = band(&mut rng, &[1, 2]);
        let step = |t: &mut Tape, x: Var, name: &str, v: Var| -> Result<Var> {
            let mut ctx = Probe {
                store: &store,
                name: name.into(),
                var: v,
            };
            let state = RecurrentState {
                hidden: t.constant(h0.clone()),
                cell: t.constant(c0.clone()),
            };
            let (h, s) = lstm_step(t, &mut ctx, &cell, x, state)?;
            let a = readout(t, h, &read)?;
            let b = readout(t, s.cell, &read)?;
            t.add(a, b)
        };
        let x = band(&mut rng, &[1, 3]);
        let ex = gradient_check(|t, v| step(t, v, "", v), &x, 1e-2).unwrap();
        let ew = gradient_check(
            |t, v| {
                let xv = t.constant(x.clone());
                step(t, xv, "cell.w", v)
            },
            store.get("cell.w").unwrap(),
            1e-2,
        )
        .unwrap();
        assert!(ex < 1e-3 && ew < 1e-3, "lstm seed {seed}: {ex} {ew}");
        cases += 1;

        // Concrete dropout: gradient wrt activations and the rate logit, noise fixed.
        let noise = logistic_noise(&mut rng, &[1, 4]);
        let x = band(&mut rng, &[1, 4]);
        let read = band(&mut rng, &[1, 4]);
        let logit = Tensor::scalar(rng.gen_range(-2.5f32..-0.5));
        let fx = |t: &mut Tape, v: Var| {
            let l = t.constant(logit.clone());
            let y = concrete_dropout_gate(t, v, l, 0.5, &noise)?;
            readout(t, y, &read)
        };
        let fl = |t: &mut Tape, l: Var| {
            let xv = t.constant(x.clone());
            let y = concrete_dropout_gate(t, xv, l, 0.5, &noise)?;
            readout(t, y, &read)
        };
        let e1 = gradient_check(fx, &x, 1e-2).unwrap();
        let e2 = gradient_check(fl, &logit, 1e-2).unwrap();
        assert!(e1 < 1e-3 && e2 < 1e-3, "dropout seed {seed}: {e1} {e2}");
        cases += 1;
    }
    assert!(cases >= 60);
}

#[test]
fn concrete_dropout_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_slice(&[1.0, -2.0, 0.5, 3.0]);
    let p = 0.3f32;
    let draws = 10_000;
    let mut sum = [0f64; 4];
    for _ in 0..draws {
        let noise = logistic_noise(&mut rng, &[4]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let l = tape.constant(Tensor::scalar((p / (1.0 - p)).ln()));
        let y = concrete_dropout_gate(&mut tape, xv, l, 0.1, &noise).unwrap();
        for (s, v) in sum.iter_mut().zip(tape.value(y).data()) {
            *s += *v as f64;
        }
    }
    for (s, v) in sum.iter().zip(x.data()) {
        let mean = s / draws as f64;
        assert!((mean - *v as f64).abs() < 0.02 * v.abs() as f64, "{mean} vs {v}");
    }
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn lstm_step_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (ni, nh) = (5, 4);
    let cell = Layer::new("cell", LayerSpec::LstmCell { inputs: ni, hidden: nh });
    let mut store = ParamStore::new();
    cell.init(&mut store, &mut rng);
    store.insert("cell.b", random(&mut rng, &[4 * nh], 0.5));
    let x = random(&mut rng, &[1, ni], 1.0);
    let h0 = random(&mut rng, &[1, nh], 1.0);
    let c0 = random(&mut rng, &[1, nh], 1.0);
    let mut tape = Tape::new();
    let mut ctx = PointWeights::frozen(&store, &mut tape);
    let state = RecurrentState {
        hidden: tape.constant(h0.clone()),
        cell: tape.constant(c0.clone()),
    };
    let xv = tape.constant(x.clone());
    let (h, s) = lstm_step(&mut tape, &mut ctx, &cell, xv, state).unwrap();

    let w = store.get("cell.w").unwrap().data();
    let b = store.get("cell.b").unwrap().data();
    let joined: Vec<f64> = x.data().iter().chain(h0.data()).map(|&v| v as f64).collect();
    let gate = |g: usize, j: usize| {
        let col = g * nh + j;
        b[col] as f64 + joined.iter().enumerate().map(|(r, v)| v * w[r * 4 * nh + col] as f64).sum::<f64>()
    };
    for j in 0..nh {
        let i = sig(gate(0, j));
        let f = sig(gate(1, j));
        let g = gate(2, j).tanh();
        let o = sig(gate(3, j));
        let c = f * c0.data()[j] as f64 + i * g;
        let hv = o * c.tanh();
        assert!((tape.value(s.cell).data()[j] as f64 - c).abs() < 1e-5);
        assert!((tape.value(h).data()[j] as f64 - hv).abs() < 1e-5);
    }
}
