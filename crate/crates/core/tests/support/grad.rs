//! Finite-difference gradient suite shared by the gradcheck and acceptance
//! targets. Every suite returns its worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mvhand::config::{ExperimentConfig, ModelConfig};
use mvhand::cvi::ViewMask;
use mvhand::fusion::fuse;
use mvhand::handmodel::Skeleton;
use mvhand::model::{forward, fused_targets, init_params, prepare_input, relative_rotations};
use mvhand::params::ParamStore;
use mvhand::synthdata::{generate_dataset, Dataset};
use mvhand::{losses, Graph, Tensor, Var};

pub const CASES: u64 = 50;
const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Largest relative error seen so far and where it occurred.
#[derive(Clone, Debug, Default)]
pub struct Worst {
    pub err: f64,
    pub at: String,
}

impl Worst {
    fn record(&mut self, e: f64, name: &str, seed: u64) {
        if e > self.err || e.is_nan() {
            self.err = e;
            self.at = format!("{name} case {seed}");
        }
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-10)
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let d = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

/// Values with magnitude in `[lo, hi]` and random sign; keeps inputs away
/// from the kinks of abs, leaky relu and the L1 distance.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), d).unwrap()
}

/// Checks the gradient of `sum(op(inputs) * w)` for a fixed random `w`.
fn check(w0: &mut Worst, name: &str, inputs: &[Tensor], seed: u64, op: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let eval = |xs: &[Tensor], w: Option<&Tensor>| -> (f64, Vec<Tensor>, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let y = op(&mut g, &vars);
        let w = w.cloned().unwrap_or_else(|| Tensor::zeros(g.shape(y)));
        let wv = g.input(w.clone());
        let p = g.mul(y, wv).unwrap();
        let s = g.sum_all(p);
        let grads = g.backward(s).unwrap();
        let gs = vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        (g.value(s).item(), gs, w)
    };
    let (_, _, zero) = eval(inputs, None);
    let w = normal(&mut rng, zero.shape());
    let (_, analytic, _) = eval(inputs, Some(&w));
    let mut a = Vec::new();
    let mut n = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        a.extend_from_slice(analytic[k].data());
        for i in 0..x.len() {
            let mut xs = inputs.to_vec();
            let mut d = xs[k].clone().into_data();
            d[i] += H;
            xs[k] = Tensor::new(x.shape().to_vec(), d.clone()).unwrap();
            let fp = eval(&xs, Some(&w)).0;
            d[i] -= 2.0 * H;
            xs[k] = Tensor::new(x.shape().to_vec(), d).unwrap();
            let fm = eval(&xs, Some(&w)).0;
            n.push((fp - fm) / (2.0 * H));
        }
    }
    w0.record(rel_err(&a, &n), name, seed);
}

fn each_case(mut f: impl FnMut(&mut Worst, u64, &mut ChaCha8Rng)) -> Worst {
    let mut w = Worst::default();
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(&mut w, seed, &mut rng);
    }
    w
}

pub fn matmul_and_bmm() -> Worst {
    each_case(|w, s, r| {
        let (m, k, n) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..4));
        check(w, "matmul", &[normal(r, &[m, k]), normal(r, &[k, n])], s, |g, v| g.matmul(v[0], v[1]).unwrap());
        let b = r.random_range(1..3);
        check(w, "bmm", &[normal(r, &[b, m, k]), normal(r, &[b, k, n])], s, |g, v| g.bmm(v[0], v[1]).unwrap());
    })
}

pub fn elementwise_binary() -> Worst {
    each_case(|w, s, r| {
        let shape = [r.random_range(1..4), r.random_range(1..4)];
        let (a, b) = (normal(r, &shape), normal(r, &shape));
        check(w, "add", &[a.clone(), b.clone()], s, |g, v| g.add(v[0], v[1]).unwrap());
        check(w, "sub", &[a.clone(), b.clone()], s, |g, v| g.sub(v[0], v[1]).unwrap());
        check(w, "mul", &[a, b], s, |g, v| g.mul(v[0], v[1]).unwrap());
    })
}

pub fn elementwise_unary() -> Worst {
    each_case(|w, s, r| {
        let shape = [r.random_range(1..4), r.random_range(1..5)];
        let x = away_from_zero(r, &shape, 0.05, 2.0);
        let c: f64 = r.random_range(-3.0..3.0);
        check(w, "scale", &[x.clone()], s, |g, v| g.scale(v[0], c));
        check(w, "leaky_relu", &[x.clone()], s, |g, v| g.leaky_relu(v[0], 0.01));
        check(w, "softplus", &[normal(r, &shape)], s, |g, v| g.softplus(v[0]));
        check(w, "abs", &[x.clone()], s, |g, v| g.abs(v[0]));
        // Bounds sit between the sampled magnitudes, never on them.
        check(w, "clamp", &[x], s, |g, v| g.clamp(v[0], -1.0125, 0.5125));
    })
}

pub fn shape_ops() -> Worst {
    each_case(|w, s, r| {
        let (a, b, c) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let x = normal(r, &[a, b, c]);
        check(w, "reshape", &[x.clone()], s, |g, v| g.reshape(v[0], &[a * b, c]).unwrap());
        check(w, "permute", &[x.clone()], s, |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
        let m = normal(r, &[a, b]);
        check(w, "transpose", &[m.clone()], s, |g, v| g.transpose(v[0]).unwrap());
        let b2 = r.random_range(1..4);
        let y = normal(r, &[a, b2, c]);
        check(w, "concat", &[x.clone(), y], s, |g, v| g.concat(&[v[0], v[1]], 1).unwrap());
        let idx: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..b)).collect();
        check(w, "index_select", &[x.clone()], s, |g, v| g.index_select(v[0], 1, &idx).unwrap());
        let rows: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..a)).collect();
        check(w, "gather_rows", &[x], s, |g, v| g.gather_rows(v[0], &rows).unwrap());
        let n = r.random_range(1..4);
        check(w, "repeat", &[normal(r, &[a, 1, c])], s, |g, v| g.repeat(v[0], 1, n).unwrap());
    })
}

pub fn reductions() -> Worst {
    each_case(|w, s, r| {
        let shape = [r.random_range(1..4), r.random_range(2..5), r.random_range(1..3)];
        let x = normal(r, &shape);
        let axis = r.random_range(0..3);
        check(w, "softmax", &[x.clone()], s, |g, v| g.softmax(v[0], axis).unwrap());
        check(w, "reduce_sum", &[x.clone()], s, |g, v| g.reduce_sum(v[0], axis).unwrap());
        check(w, "reduce_mean", &[x.clone()], s, |g, v| g.reduce_mean(v[0], axis).unwrap());
        check(w, "sum_all", &[x.clone()], s, |g, v| g.sum_all(v[0]));
        check(w, "mean_all", &[x], s, |g, v| g.mean_all(v[0]));
        // Distinct values spaced well beyond the step keep the argmax fixed.
        let n: usize = shape.iter().product();
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        for i in (1..n).rev() {
            vals.swap(i, r.random_range(0..=i));
        }
        let x = Tensor::new(shape.to_vec(), vals).unwrap();
        check(w, "max_axis", &[x], s, |g, v| g.max_axis(v[0], axis).unwrap());
    })
}

pub fn distances() -> Worst {
    each_case(|w, s, r| {
        let shape = [r.random_range(1..4), 3];
        let a = normal(r, &shape);
        let off = away_from_zero(r, &shape, 0.05, 1.0);
        let b: Vec<f64> = a.data().iter().zip(off.data()).map(|(x, d)| x + d).collect();
        let b = Tensor::new(shape.to_vec(), b).unwrap();
        check(w, "l1_distance", &[a.clone(), b.clone()], s, |g, v| g.l1_distance(v[0], v[1]).unwrap());
        check(w, "l2_squared", &[a, b], s, |g, v| g.l2_squared(v[0], v[1]).unwrap());
    })
}

pub fn bilinear_sample() -> Worst {
    each_case(|worst, s, r| {
        let (b, h, w, c, m) = (r.random_range(1..3), 4, 5, r.random_range(1..4), r.random_range(1..4));
        let map = normal(r, &[b, h, w, c]);
        // Interior, non-integer coordinates.
        let coords: Vec<f64> = (0..b * m)
            .flat_map(|_| {
                let x = r.random_range(0..w - 1) as f64 + r.random_range(0.1..0.9);
                let y = r.random_range(0..h - 1) as f64 + r.random_range(0.1..0.9);
                [x, y]
            })
            .collect();
        let coords = Tensor::new(vec![b, m, 2], coords).unwrap();
        check(worst, "bilinear_sample", &[map, coords], s, |g, v| g.bilinear_sample(v[0], v[1]).unwrap());
    })
}

pub fn rodrigues() -> Worst {
    each_case(|w, s, r| {
        let n = r.random_range(1..4);
        let x = normal(r, &[n, 3]);
        check(w, "rodrigues", &[x], s, |g, v| g.rodrigues(v[0]).unwrap());
    })
}

pub fn detach_blocks_gradient() -> Worst {
    each_case(|w, s, r| {
        let x = normal(r, &[3]);
        let mut g = Graph::new();
        let v = g.variable(x);
        let d = g.detach(v);
        let y = g.mul(v, d).unwrap();
        let t = g.sum_all(y);
        let grads = g.backward(t).unwrap();
        let gx = grads.get(v).unwrap();
        // d/dx (x * stop(x)) is x itself.
        let e = rel_err(gx.data(), g.value(v).data());
        w.record(e, "detach", s);
    })
}

fn reduced() -> (ExperimentConfig, Dataset) {
    let mut cfg = ExperimentConfig::default();
    let m = &mut cfg.model;
    *m = ModelConfig {
        grid: 32,
        channels: [4, 4, 8, 8],
        head_hidden: 8,
        c1: 8,
        c2: 8,
        heads: 2,
        blocks: 1,
        refine_width: 8,
        heatmap_sigma: 1.0,
        ..ModelConfig::default()
    };
    cfg.train.views = 3;
    let data = generate_dataset(&cfg.data.rig, &cfg.data.noise, 4, 11).unwrap();
    (cfg, data)
}

/// Initial parameters plus Gaussian noise, so zero-initialized projections
/// carry gradient too.
fn perturbed(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut p = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let names: Vec<String> = p.names().to_vec();
    for name in names {
        let t = p.get(&name).unwrap().clone();
        let noise = normal(&mut rng, t.shape());
        let d = t.data().iter().zip(noise.data()).map(|(a, b)| a + 0.05 * b).collect();
        p.set(&name, Tensor::new(t.shape().to_vec(), d).unwrap()).unwrap();
    }
    p
}

fn shifted(p: &ParamStore, dir: &[Tensor], h: f64) -> ParamStore {
    let mut q = p.clone();
    for ((name, t), d) in p.iter().zip(dir) {
        let v = t.data().iter().zip(d.data()).map(|(a, b)| a + h * b).collect();
        q.set(name, Tensor::new(t.shape().to_vec(), v).unwrap()).unwrap();
    }
    q
}

/// Compares the analytic directional derivative of `loss` along random
/// parameter directions with central differences.
/// Only parameters accepted by `moves` are perturbed. `loss(g, params, base,
/// trainable)` may read constants off `base`, the unshifted parameters.
fn check_composite(
    name: &str,
    moves: impl Fn(&str) -> bool,
    loss: impl Fn(&mut Graph, &ParamStore, &ParamStore, bool) -> (Var, Vec<Var>),
) -> Worst {
    let mut w = Worst::default();
    let (cfg, _) = reduced();
    for seed in 0..CASES {
        let p = perturbed(&cfg.model, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
        let dir: Vec<Tensor> = p
            .iter()
            .map(|(n, t)| {
                let d = normal(&mut rng, t.shape());
                if moves(n) { d } else { Tensor::zeros(t.shape()) }
            })
            .collect();
        let mut g = Graph::new();
        let (l, vars) = loss(&mut g, &p, &p, true);
        let grads = g.backward(l).unwrap();
        let analytic: f64 = vars
            .iter()
            .zip(&dir)
            .map(|(&v, d)| grads.get(v).map_or(0.0, |gr| gr.data().iter().zip(d.data()).map(|(a, b)| a * b).sum()))
            .sum();
        let f = |q: &ParamStore| {
            let mut g = Graph::new();
            let (l, _) = loss(&mut g, q, &p, false);
            g.value(l).item()
        };
        // Thousands of leaky-relu and L1 kinks lie along the direction; a
        // short step keeps the difference from straddling one.
        let h = 1e-7;
        let numeric = (f(&shifted(&p, &dir, h)) - f(&shifted(&p, &dir, -h))) / (2.0 * h);
        w.record(rel_err(&[analytic], &[numeric]), name, seed);
    }
    w
}

fn bind_vars<'a>(g: &mut Graph, p: &'a ParamStore, trainable: bool) -> (mvhand::params::Bound<'a>, Vec<Var>) {
    let b = p.bind(g, trainable);
    let vars = p.names().iter().map(|n| b.get(n)).collect();
    (b, vars)
}

pub fn estimator_projection_loss_path() -> Worst {
    let (cfg, data) = reduced();
    let views: Vec<usize> = (0..3).collect();
    let input = prepare_input(&data.samples[0], &views, (256, 256), &cfg.model, true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = normal(&mut rng, &[3, 21, 3]).map(|x| 0.05 * x);
    check_composite("estimator->projection->loss", |n| n.starts_with("est."), |g, p, _, t| {
        let (b, vars) = bind_vars(g, p, t);
        let x = g.input(input.heatmaps.clone());
        let s = mvhand::estimator::estimate(g, &b, &cfg.model, x, (256, 256)).unwrap();
        let l2 = losses::l_2d(g, s.joints2d, &input.labels, &input.conf).unwrap();
        let lp = losses::l_prior(g, s.theta, s.theta, s.beta, &cfg.loss).unwrap();
        let ld = losses::l_d(g, s.joints, &target).unwrap();
        let l = g.add(l2, lp).unwrap();
        (g.add(l, ld).unwrap(), vars)
    })
}

pub fn cvi_end_to_end_path() -> Worst {
    let (cfg, data) = reduced();
    let views: Vec<usize> = (0..3).collect();
    let cams: Vec<_> = views.iter().map(|&v| data.rig().cameras[v].clone()).collect();
    let input = prepare_input(&data.samples[1], &views, (256, 256), &cfg.model, true);
    let mask = ViewMask::all(3);
    // Fusion targets are constants of the loss; fix them at the unperturbed
    // parameters so both sides of the difference see the same target.
    let targets = |p: &ParamStore| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.input(input.heatmaps.clone());
        let out = forward(&mut g, &b, &cfg.model, x, (256, 256), &mask, &cfg.ablation()).unwrap();
        let rows: Vec<Skeleton> = g
            .value(out.refined.joints)
            .data()
            .chunks(63)
            .map(|c| Skeleton::from_rows(&c.chunks(3).map(|r| [r[0], r[1], r[2]]).collect::<Vec<_>>()).unwrap())
            .collect();
        let f = fuse(&rows, Some(&cams), 0).unwrap();
        (relative_rotations(&f), fused_targets(&f))
    };
    // The refinement starts from detached single-view parameters, so only the
    // interaction network is perturbed here.
    check_composite("cvi end to end", |n| n.starts_with("cvi."), |g, p, base, t| {
        let (rel, tgt) = targets(base);
        let (b, vars) = bind_vars(g, p, t);
        let x = g.input(input.heatmaps.clone());
        let out = forward(g, &b, &cfg.model, x, (256, 256), &mask, &cfg.ablation()).unwrap();
        let (s, r) = (out.single, out.refined);
        let mut total = losses::l_2d(g, r.joints2d, &input.labels, &input.conf).unwrap();
        let terms = [
            losses::l_2d(g, s.joints2d, &input.labels, &input.conf).unwrap(),
            losses::l_prior(g, s.theta, r.theta, s.beta, &cfg.loss).unwrap(),
            losses::l_c2d(g, r.joints, r.cam, r.joints2d, &rel).unwrap(),
            losses::l_cf(g, r.joints, &tgt).unwrap(),
            losses::l_d(g, s.joints, &tgt).unwrap(),
        ];
        for term in terms {
            total = g.add(total, term).unwrap();
        }
        (total, vars)
    })
}

/// Every suite, op-level first.
pub const SUITES: [(&str, fn() -> Worst); 11] = [
    ("matmul_and_bmm", matmul_and_bmm),
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("shape_ops", shape_ops),
    ("reductions", reductions),
    ("distances", distances),
    ("bilinear_sample", bilinear_sample),
    ("rodrigues", rodrigues),
    ("detach", detach_blocks_gradient),
    ("estimator_projection_loss_path", estimator_projection_loss_path),
    ("cvi_end_to_end_path", cvi_end_to_end_path),
];
