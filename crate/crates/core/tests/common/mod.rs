//! Finite-difference gradient checking shared by the test targets.
#![allow(dead_code)]

use psae::loss::{Loss, MsSsimConfig};
use psae::model::{Autoencoder, DecoderConfig, EncoderConfig};
use psae::tensor::{
    BatchNormConfig, BatchNormState, BatchNormStats, ConvTransposeSpec, Graph, Mode, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Below this norm a gradient counts as zero (e.g. a bias feeding batch norm),
/// and the error is measured absolutely.
pub const ZERO_GRADIENT: f64 = 1e-5;

/// `‖a − b‖ / max(‖a‖, ‖b‖, ZERO_GRADIENT)`, the norm-wise relative error.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    diff / scale.max(ZERO_GRADIENT)
}

/// Builds a scalar on a fresh tape from leaf inputs.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

/// Worst relative error between tape gradients and central differences,
/// taken over every input tensor.
pub fn check_graph(inputs: &[Tensor<f64>], build: &Builder<'_>) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let value = g.value(out).data()[0];
        let grads = g.backward(out).expect("backward");
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        (value, gs)
    };
    let value_of = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };
    let (_, analytic) = eval(inputs);
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.numel()];
        let mut xs = inputs.to_vec();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let up = value_of(&xs);
            xs[k].data_mut()[i] = orig - FD_STEP;
            let down = value_of(&xs);
            xs[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(a.data(), &numeric));
    }
    worst
}

/// Random projection that turns a tensor output into a scalar.
pub fn projection(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    randn(rng, shape, 1.0)
}

pub fn check_dense(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, i, o) = (r.gen_range(1..5), r.gen_range(1..7), r.gen_range(1..7));
    let inputs = [
        randn(&mut r, &[b, i], 1.0),
        randn(&mut r, &[i, o], 1.0),
        randn(&mut r, &[o], 1.0),
    ];
    let p = projection(&mut r, &[b, o]);
    check_graph(&inputs, &|g, v| {
        let y = g.dense(v[0], v[1], v[2]).unwrap();
        g.dot(y, p.clone()).unwrap()
    })
}

pub fn check_conv_transpose(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (cin, cout) = (r.gen_range(1..4), r.gen_range(1..4));
    let k = (r.gen_range(1..6), r.gen_range(1..6));
    let stride = (r.gen_range(1..3), r.gen_range(1..3));
    let padding = (r.gen_range(0..k.0.min(3)), r.gen_range(0..k.1.min(3)));
    let output_padding = (
        if stride.0 > 1 {
            r.gen_range(0..stride.0)
        } else {
            0
        },
        if stride.1 > 1 {
            r.gen_range(0..stride.1)
        } else {
            0
        },
    );
    let spec = ConvTransposeSpec::new(cin, cout, k)
        .with_stride(stride)
        .with_padding(padding)
        .with_output_padding(output_padding);
    let (h, w) = (r.gen_range(2..5), r.gen_range(2..5));
    let (oh, ow) = spec.output_size(h, w).expect("valid geometry");
    let b = r.gen_range(1..3);
    let inputs = [
        randn(&mut r, &[b, cin, h, w], 1.0),
        randn(&mut r, &spec.weight_shape(), 1.0),
        randn(&mut r, &[cout], 1.0),
    ];
    let p = projection(&mut r, &[b, cout, oh, ow]);
    check_graph(&inputs, &|g, v| {
        let y = g.conv_transpose2d(v[0], v[1], v[2], spec).unwrap();
        g.dot(y, p.clone()).unwrap()
    })
}

pub fn check_batch_norm(seed: u64, mode: Mode) -> f64 {
    let mut r = rng(seed);
    let (b, c, h, w) = (
        r.gen_range(2..5),
        r.gen_range(1..4),
        r.gen_range(1..4),
        r.gen_range(1..4),
    );
    let inputs = [
        randn(&mut r, &[b, c, h, w], 2.0),
        uniform(&mut r, &[c], 0.5, 1.5),
        randn(&mut r, &[c], 1.0),
    ];
    let mut state = BatchNormState::new(c);
    state.running_mean = (0..c).map(|_| r.gen_range(-0.5..0.5)).collect();
    state.running_var = (0..c).map(|_| r.gen_range(0.5..2.0)).collect();
    let p = projection(&mut r, &[b, c, h, w]);
    let cfg = BatchNormConfig::default();
    check_graph(&inputs, &|g, v| {
        let mut st = state.clone();
        let stats = match mode {
            Mode::Train => BatchNormStats::Train(&mut st),
            Mode::Infer => BatchNormStats::Infer(&st),
        };
        let y = g.batch_norm(v[0], v[1], v[2], stats, &cfg).unwrap();
        g.dot(y, p.clone()).unwrap()
    })
}

pub fn check_activations(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(4..20);
    // keep inputs off the leaky-ReLU kink so the difference quotient is smooth
    let x = Tensor::from_fn([n], |_| {
        let v: f64 = r.gen_range(0.01..3.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let p = projection(&mut r, &[n]);
    let leaky = check_graph(std::slice::from_ref(&x), &|g, v| {
        let a = g.leaky_relu(v[0], 0.2);
        g.dot(a, p.clone()).unwrap()
    });
    let sigmoid = check_graph(&[x], &|g, v| {
        let s = g.sigmoid(v[0]);
        g.dot(s, p.clone()).unwrap()
    });
    leaky.max(sigmoid)
}

pub fn check_ms_ssim(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.gen_range(1..3);
    let (h, w) = (r.gen_range(32..40), r.gen_range(32..40));
    let target = uniform(&mut r, &[b, 1, h, w], 0.0, 1.0);
    // stay a few steps clear of zero so the perturbed image remains valid
    let pred = uniform(&mut r, &[b, 1, h, w], 10.0 * FD_STEP, 1.0);
    let loss = Loss::MsSsim(MsSsimConfig::default());
    check_graph(&[pred], &|g, v| loss.record(g, v[0], &target).unwrap())
}

/// Result of the whole-model check.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModelCheck {
    pub error: f64,
    /// Coordinates where a step of `FD_STEP` crosses a kink.
    pub kinks: usize,
    pub coordinates: usize,
    /// Checks in which no coordinate was excluded.
    pub kink_free: usize,
}

/// At most this share of coordinates may be set aside as kink crossings. One
/// unit near zero puts a kink in front of every parameter upstream of it, so
/// exclusions come in groups.
pub const MAX_KINK_SHARE: f64 = 0.1;

impl ModelCheck {
    /// Error within tolerance, few exclusions, and at least one check that
    /// covered every coordinate.
    pub fn passed(&self) -> bool {
        self.error < FD_TOLERANCE
            && (self.kinks as f64) <= MAX_KINK_SHARE * self.coordinates as f64
            && self.kink_free > 0
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            error: self.error.max(other.error),
            kinks: self.kinks + other.kinks,
            coordinates: self.coordinates + other.coordinates,
            kink_free: self.kink_free + other.kink_free,
        }
    }
}

/// Kink test on `f(-2h), f(-h), f(0), f(h), f(2h)`. For a smooth function the
/// four successive slopes change at a steady rate; a leaky-ReLU pre-activation
/// changing sign within the stencil shows up as one jump.
fn crosses_kink(f: [f64; 5]) -> bool {
    let s: Vec<f64> = f.windows(2).map(|w| (w[1] - w[0]) / FD_STEP).collect();
    let d: Vec<f64> = s.windows(2).map(|w| w[1] - w[0]).collect();
    let spread = d.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - d.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    spread > 1e-6 + 1e-3 * scale
}

/// Gradient of the training loss with respect to every model parameter,
/// through encoder, decoder, batch norm and MS-SSIM. Coordinates whose
/// perturbation crosses a kink are excluded and counted.
pub fn check_autoencoder(seed: u64) -> ModelCheck {
    let mut r = rng(seed);
    let latent = 3;
    let decoder = DecoderConfig {
        latent_dim: latent,
        stages: vec![
            ConvTransposeSpec::new(latent, 2, (3, 4)),
            ConvTransposeSpec::new(2, 2, (3, 3)).with_padding((1, 1)),
            ConvTransposeSpec::new(2, 2, (5, 5))
                .with_stride((2, 2))
                .with_padding((2, 2))
                .with_output_padding((1, 1)),
            ConvTransposeSpec::new(2, 1, (5, 5))
                .with_stride((2, 2))
                .with_padding((2, 2))
                .with_output_padding((1, 1)),
        ],
        n_upsample: 2,
    };
    let enc = EncoderConfig::new(2, latent).with_hidden([4, 4]);
    let base = Autoencoder::<f64>::build("E", &enc, &decoder, seed).unwrap();
    let x = randn(&mut r, &[3, 2], 1.0);
    let target = uniform(&mut r, &[3, 1, 12, 16], 0.0, 1.0);
    let loss = Loss::MsSsim(MsSsimConfig {
        alphas: vec![0.5, 0.5],
        window_size: 4,
        ..MsSsimConfig::default()
    });
    let value = |m: &mut Autoencoder<f64>| -> (f64, Vec<(String, Tensor<f64>)>) {
        let mut g = Graph::new();
        let fp = m.forward_graph(&mut g, &x, "E", Mode::Train).unwrap();
        let l = loss.record(&mut g, fp.output, &target).unwrap();
        let grads = g.backward(l).unwrap();
        let named = fp
            .params
            .iter()
            .map(|(n, v)| (n.clone(), grads.get(*v).unwrap().clone()))
            .collect();
        (g.value(l).data()[0], named)
    };
    let (f0, analytic) = value(&mut base.clone());
    let (mut a_kept, mut n_kept) = (Vec::new(), Vec::new());
    let mut out = ModelCheck::default();
    for (name, grad) in analytic {
        for i in 0..grad.numel() {
            let mut f = [f0; 5];
            for (slot, steps) in [(0, -2.0), (1, -1.0), (3, 1.0), (4, 2.0)] {
                let mut m = base.clone();
                for (n, _, t) in m.parameters_mut() {
                    if n == name {
                        t.data_mut()[i] += steps * FD_STEP;
                    }
                }
                f[slot] = value(&mut m).0;
            }
            out.coordinates += 1;
            if crosses_kink(f) {
                out.kinks += 1;
                continue;
            }
            a_kept.push(grad.data()[i]);
            n_kept.push((f[3] - f[1]) / (2.0 * FD_STEP));
        }
    }
    out.error = rel_err(&a_kept, &n_kept);
    out.kink_free = usize::from(out.kinks == 0);
    out
}
