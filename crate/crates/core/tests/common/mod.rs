//! Shared test oracles: 64-bit reference forward passes and a central
//! finite-difference gradient checker built on them.

#![allow(dead_code)]

use sena_core::layers::{dropout_mask, LayerSpec};
use sena_core::model::LayerScope;
use sena_core::training::{distillation_loss, soft_targets};
use sena_core::layers::{cross_entropy_loss, softmax_cross_entropy_grad, softmax_forward};
use sena_core::{Architecture, ForwardContext, LayerNode, LayerStack, MultiTaskModel, Padding, Rng, Tensor};

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_SEEDS: u64 = 10;

/// Dense f64 tensor used by the reference implementations.
#[derive(Clone, Debug)]
pub struct T64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T64 {
    pub fn from_f32(t: &Tensor) -> Self {
        T64 {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        T64 {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

pub fn ref_conv2d(x: &T64, w: &T64, b: &[f64], padding: Padding) -> T64 {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (f, k) = (w.shape[0], w.shape[2]);
    let (pad, oh, ow) = match padding {
        Padding::Same => (k / 2, h, wd),
        Padding::Valid => (0, h - k + 1, wd - k + 1),
    };
    let mut out = T64::zeros(&[n, f, oh, ow]);
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[fi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy + ky) as isize - pad as isize;
                                let ix = (ox + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data[((fi * c + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn ref_relu(x: &T64) -> T64 {
    T64 {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn ref_maxpool(x: &T64) -> T64 {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = T64::zeros(&[n, c, oh, ow]);
    for nc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data[(nc * h + 2 * oy + dy) * w + 2 * ox + dx]);
                    }
                }
                out.data[(nc * oh + oy) * ow + ox] = m;
            }
        }
    }
    out
}

pub fn ref_dense(x: &T64, w: &T64, b: &[f64]) -> T64 {
    let (n, inputs) = (x.shape[0], x.shape[1]);
    let units = w.shape[1];
    let mut out = T64::zeros(&[n, units]);
    for i in 0..n {
        for u in 0..units {
            let mut acc = b[u];
            for j in 0..inputs {
                acc += x.data[i * inputs + j] * w.data[j * units + u];
            }
            out.data[i * units + u] = acc;
        }
    }
    out
}

pub fn ref_softmax(x: &T64) -> T64 {
    let k = *x.shape.last().unwrap();
    let mut out = x.clone();
    for row in out.data.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - m).exp() / s;
        }
    }
    out
}

pub fn ref_cross_entropy(probs: &T64, labels: &[usize]) -> f64 {
    let k = probs.shape[1];
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.data[i * k + l].max(1e-12).ln())
        .sum::<f64>()
        / labels.len() as f64
}

pub fn ref_kd(logits: &T64, targets: &T64, t: f64) -> f64 {
    let k = logits.shape[1];
    let n = logits.shape[0];
    let scaled = T64 {
        shape: logits.shape.clone(),
        data: logits.data.iter().map(|v| v / t).collect(),
    };
    let p = ref_softmax(&scaled);
    let mut loss = 0.0;
    for i in 0..n * k {
        let q = targets.data[i];
        if q > 0.0 {
            loss += q * (q.ln() - p.data[i].ln());
        }
    }
    loss / n as f64
}

/// Reference forward of one layer; `mask` supplies the dropout mask (None = identity).
pub fn ref_layer(spec: &LayerSpec, params: &[T64], x: &T64, mask: Option<&T64>) -> T64 {
    match spec {
        LayerSpec::Conv2d { padding, .. } => ref_conv2d(x, &params[0], &params[1].data, *padding),
        LayerSpec::Relu => ref_relu(x),
        LayerSpec::MaxPool2x2 => ref_maxpool(x),
        LayerSpec::Dropout { .. } => match mask {
            Some(m) => T64 {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&m.data).map(|(a, b)| a * b).collect(),
            },
            None => x.clone(),
        },
        LayerSpec::Flatten => {
            let n = x.shape[0];
            T64 {
                shape: vec![n, x.data.len() / n],
                data: x.data.clone(),
            }
        }
        LayerSpec::Dense { .. } => ref_dense(x, &params[0], &params[1].data),
        LayerSpec::Softmax => ref_softmax(x),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = dot(analytic, analytic).sqrt();
    let nn = dot(numeric, numeric).sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` over the chosen coordinates.
pub fn central_differences(x: &[f64], coords: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// ReLU signs and max-pool winners of an activation, used to tell whether a
/// finite-difference probe crossed a kink.
pub fn kink_pattern(spec: &LayerSpec, x: &T64, out: &mut Vec<u32>) {
    match spec {
        LayerSpec::Relu => out.extend(x.data.iter().map(|&v| (v > 0.0) as u32)),
        LayerSpec::MaxPool2x2 => {
            let (nc, h, w) = (x.shape[0] * x.shape[1], x.shape[2], x.shape[3]);
            for c in 0..nc {
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        let mut best = (f64::NEG_INFINITY, 0);
                        for d in 0..4 {
                            let v = x.data[(c * h + 2 * oy + d / 2) * w + 2 * ox + d % 2];
                            if v > best.0 {
                                best = (v, d);
                            }
                        }
                        out.push(best.1 as u32);
                    }
                }
            }
        }
        _ => {}
    }
}

/// Central differences that report `None` where either probe changes the
/// activation pattern, i.e. where the function is not smooth over the step.
pub fn smooth_central_differences(
    x: &[f64],
    coords: &[usize],
    mut f: impl FnMut(&[f64]) -> (f64, Vec<u32>),
) -> Vec<Option<f64>> {
    let (_, base) = f(x);
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + FD_STEP;
            let (up, pu) = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let (down, pd) = f(&probe);
            probe[i] = x[i];
            (pu == base && pd == base).then(|| (up - down) / (2.0 * FD_STEP))
        })
        .collect()
}

/// Up to `max` distinct coordinates of a tensor with `len` entries.
pub fn sample_coords(len: usize, max: usize, rng: &mut Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    if len > max {
        rng.shuffle(&mut all);
        all.truncate(max);
        all.sort_unstable();
    }
    all
}

fn pick(v: &[f64], coords: &[usize]) -> Vec<f64> {
    coords.iter().map(|&i| v[i]).collect()
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub seeds: u64,
    pub worst: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.seeds >= GRAD_SEEDS && self.worst < GRAD_TOL
    }
}

/// Checks one layer on input `x` with loss `sum(r * y)`: input gradient and
/// every parameter gradient, against the 64-bit reference. Returns the worst
/// norm-relative error.
pub fn check_layer(layer: &LayerNode, x: &Tensor, seed: u64, mask: Option<&Tensor>) -> f64 {
    let mut rng = Rng::with_stream(seed, 77);
    let mut ctx = match mask {
        Some(_) => ForwardContext::training(Rng::new(seed)),
        None => ForwardContext::eval(),
    };
    let mut stack = LayerStack::new(vec![layer.clone()]);
    let y = stack.forward(x, &mut ctx).expect("forward");
    let r = rng.uniform(y.shape(), -1.0, 1.0).unwrap();
    let gx = stack.backward(&mut ctx, r.clone(), true).expect("backward").expect("input grad");

    let spec = layer.spec().clone();
    let params: Vec<T64> = layer.params().iter().map(T64::from_f32).collect();
    let mask64 = mask.map(T64::from_f32);
    let r64 = T64::from_f32(&r);
    let x64 = T64::from_f32(x);

    // The f32 forward must agree with the reference before gradients mean anything.
    let y_ref = ref_layer(&spec, &params, &x64, mask64.as_ref());
    let fwd_err = y.data().iter().zip(&y_ref.data).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(fwd_err < 1e-5, "{:?} forward differs from reference by {fwd_err}", spec.kind());

    let mut worst: f64 = 0.0;
    let coords = sample_coords(x64.data.len(), 200, &mut rng);
    let numeric = central_differences(&x64.data, &coords, |xs| {
        let xt = T64 {
            shape: x64.shape.clone(),
            data: xs.to_vec(),
        };
        dot(&ref_layer(&spec, &params, &xt, mask64.as_ref()).data, &r64.data)
    });
    let analytic = pick(&T64::from_f32(&gx).data, &coords);
    worst = worst.max(norm_relative_error(&analytic, &numeric));

    for (pi, g) in stack.layers()[0].grads().iter().enumerate() {
        let coords = sample_coords(params[pi].data.len(), 200, &mut rng);
        let numeric = central_differences(&params[pi].data, &coords, |ps| {
            let mut p = params.clone();
            p[pi].data = ps.to_vec();
            dot(&ref_layer(&spec, &p, &x64, mask64.as_ref()).data, &r64.data)
        });
        let analytic = pick(&T64::from_f32(g).data, &coords);
        worst = worst.max(norm_relative_error(&analytic, &numeric));
    }
    worst
}

/// Values spaced at least `gap` apart in random order, so that max-pooling and
/// ReLU stay away from their kinks under a finite-difference step.
pub fn well_separated(shape: &[usize], gap: f32, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let half = n as f32 / 2.0;
    let data = order.iter().map(|&i| (i as f32 - half + 0.5) * gap).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn grad_conv(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let padding = if seed % 2 == 0 { Padding::Same } else { Padding::Valid };
    let (c, f) = (2 + (seed % 2) as usize, 3);
    let x = rng.uniform(&[1 + (seed % 3) as usize, c, 5, 5], -1.0, 1.0).unwrap();
    let mut layer = LayerNode::conv2d(c, f, 3, padding, &mut rng).unwrap();
    layer.params_mut()[1] = rng.uniform(&[f], -0.5, 0.5).unwrap();
    check_layer(&layer, &x, seed, None)
}

pub fn grad_relu(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let x = well_separated(&[2, 3, 4, 4], 0.01, &mut rng);
    check_layer(&LayerNode::relu(), &x, seed, None)
}

pub fn grad_maxpool(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let x = well_separated(&[2, 2, 6, 6], 0.01, &mut rng);
    check_layer(&LayerNode::maxpool2x2(), &x, seed, None)
}

pub fn grad_dropout(seed: u64) -> f64 {
    let mut rng = Rng::new(seed + 1000);
    let x = rng.uniform(&[3, 2, 4, 4], -1.0, 1.0).unwrap();
    let rate = 0.25 + 0.05 * (seed % 5) as f32;
    // The layer draws its mask from the context rng, which starts as Rng::new(seed).
    let mask = dropout_mask(x.shape(), rate, &mut Rng::new(seed)).unwrap();
    check_layer(&LayerNode::dropout(rate).unwrap(), &x, seed, Some(&mask))
}

pub fn grad_flatten(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let x = rng.uniform(&[2, 3, 2, 2], -1.0, 1.0).unwrap();
    check_layer(&LayerNode::flatten(), &x, seed, None)
}

pub fn grad_dense(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, i, u) = (1 + (seed % 4) as usize, 7, 5);
    let x = rng.uniform(&[n, i], -1.0, 1.0).unwrap();
    let mut layer = LayerNode::dense(i, u, &mut rng).unwrap();
    layer.params_mut()[1] = rng.uniform(&[u], -0.5, 0.5).unwrap();
    check_layer(&layer, &x, seed, None)
}

pub fn grad_softmax(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let x = rng.uniform(&[3, 5], -3.0, 3.0).unwrap();
    check_layer(&LayerNode::softmax(), &x, seed, None)
}

/// Fused softmax + cross-entropy gradient with respect to the logits.
pub fn grad_softmax_cross_entropy(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (n, k) = (4, 6);
    let z = rng.uniform(&[n, k], -3.0, 3.0).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
    let probs = softmax_forward(&z).unwrap();
    let loss = cross_entropy_loss(&probs, &labels).unwrap() as f64;
    let z64 = T64::from_f32(&z);
    let ref_loss = ref_cross_entropy(&ref_softmax(&z64), &labels);
    assert!((loss - ref_loss).abs() < 1e-5, "CE {loss} vs reference {ref_loss}");
    let g = softmax_cross_entropy_grad(&probs, &labels).unwrap();
    let coords: Vec<usize> = (0..n * k).collect();
    let numeric = central_differences(&z64.data, &coords, |zs| {
        ref_cross_entropy(
            &ref_softmax(&T64 {
                shape: z64.shape.clone(),
                data: zs.to_vec(),
            }),
            &labels,
        )
    });
    norm_relative_error(&T64::from_f32(&g).data, &numeric)
}

/// Distillation loss gradient with respect to the student logits on a
/// 3-class head.
pub fn grad_distillation(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let t = [1.0f32, 2.0, 4.0][(seed % 3) as usize];
    let z = rng.uniform(&[4, 3], -3.0, 3.0).unwrap();
    let teacher = rng.uniform(&[4, 3], -3.0, 3.0).unwrap();
    let q = soft_targets(&teacher, t).unwrap();
    let (loss, g) = distillation_loss(&z, &q, t).unwrap();
    let z64 = T64::from_f32(&z);
    let q64 = T64::from_f32(&q);
    let ref_loss = ref_kd(&z64, &q64, t as f64);
    assert!((loss as f64 - ref_loss).abs() < 1e-5, "KD {loss} vs reference {ref_loss}");
    let coords: Vec<usize> = (0..12).collect();
    let numeric = central_differences(&z64.data, &coords, |zs| {
        ref_kd(
            &T64 {
                shape: z64.shape.clone(),
                data: zs.to_vec(),
            },
            &q64,
            t as f64,
        )
    });
    norm_relative_error(&T64::from_f32(&g).data, &numeric)
}

pub fn tiny_architecture() -> Architecture {
    Architecture {
        input_channels: 2,
        input_size: 8,
        trunk_filters: 3,
        branch_filters: 4,
        kernel: 3,
        dense_units: 6,
        block_dropout: 0.25,
        head_dropout: 0.5,
    }
}

/// Reference logits of every task, walking the model's layer specs with
/// f64 parameters `params` (ordered like `model.layers()`).
fn ref_model_logits(
    model: &MultiTaskModel,
    params: &[Vec<T64>],
    x: &T64,
    tasks: &[&str],
    pattern: &mut Vec<u32>,
) -> Vec<T64> {
    let layers: Vec<(LayerScope, &LayerNode)> = model.layers().collect();
    let mut run = |scope: &LayerScope, input: T64, stop_before_softmax: bool| {
        let mut h = input;
        for (i, (s, l)) in layers.iter().enumerate() {
            if s != scope {
                continue;
            }
            if stop_before_softmax && matches!(l.spec(), LayerSpec::Softmax) {
                break;
            }
            kink_pattern(l.spec(), &h, pattern);
            h = ref_layer(l.spec(), &params[i], &h, None);
        }
        h
    };
    let trunk = run(&LayerScope::Trunk, x.clone(), false);
    tasks
        .iter()
        .map(|t| {
            let owner = match model.branch(t).unwrap().body() {
                sena_core::model::BranchBody::Owned(_) => t.to_string(),
                sena_core::model::BranchBody::Shared(o) => o.clone(),
            };
            let feat = run(&LayerScope::Body(owner), trunk.clone(), false);
            run(&LayerScope::Head(t.to_string()), feat, true)
        })
        .collect()
}

/// Gradient of `sum_t r_t * logits_t` over three heads (two sharing a body,
/// one with its own branch) through the whole multi-task model.
pub fn grad_multitask_model(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut model = MultiTaskModel::build_isolated(tiny_architecture(), "a", 3, &mut rng).unwrap();
    model.add_head("b", 2, "a", &mut rng).unwrap();
    model.add_task("c", 4, None, &mut rng).unwrap();
    model.unfreeze_all();
    // Non-zero biases so that no ReLU sits exactly on its kink.
    for (_, l) in model.layers_mut() {
        if l.params().len() == 2 {
            let shape = l.params()[1].shape().to_vec();
            l.params_mut()[1] = rng.uniform(&shape, -0.1, 0.1).unwrap();
        }
    }
    let tasks = ["a", "b", "c"];
    let x = rng.uniform(&[2, 2, 8, 8], -1.0, 1.0).unwrap();
    let pass = model.forward_heads(&tasks, &x, None).unwrap();
    let rs: Vec<Tensor> = pass
        .logits()
        .iter()
        .map(|z| rng.uniform(z.shape(), -1.0, 1.0).unwrap())
        .collect();
    model.backward_heads(pass, rs.clone()).unwrap();

    let params: Vec<Vec<T64>> = model.layers().map(|(_, l)| l.params().iter().map(T64::from_f32).collect()).collect();
    let x64 = T64::from_f32(&x);
    let r64: Vec<T64> = rs.iter().map(T64::from_f32).collect();
    let loss = |p: &[Vec<T64>]| -> (f64, Vec<u32>) {
        let mut pattern = Vec::new();
        let value = ref_model_logits(&model, p, &x64, &tasks, &mut pattern)
            .iter()
            .zip(&r64)
            .map(|(z, r)| dot(&z.data, &r.data))
            .sum();
        (value, pattern)
    };
    let grads: Vec<Vec<T64>> = model.layers().map(|(_, l)| l.grads().iter().map(T64::from_f32).collect()).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probed = 0;
    for li in 0..params.len() {
        for pi in 0..params[li].len() {
            let coords = sample_coords(params[li][pi].data.len(), 12, &mut rng);
            let base = params[li][pi].data.clone();
            let nd = smooth_central_differences(&base, &coords, |ps| {
                let mut p = params.clone();
                p[li][pi].data = ps.to_vec();
                loss(&p)
            });
            probed += coords.len();
            for (&c, n) in coords.iter().zip(nd) {
                if let Some(n) = n {
                    analytic.push(grads[li][pi].data[c]);
                    numeric.push(n);
                }
            }
        }
    }
    // A check that skipped most coordinates would prove little.
    assert!(numeric.len() * 2 >= probed, "{} of {probed} coordinates smooth", numeric.len());
    norm_relative_error(&analytic, &numeric)
}

pub type GradCase = (&'static str, fn(u64) -> f64);

pub const GRAD_CASES: [GradCase; 10] = [
    ("conv2d", grad_conv),
    ("relu", grad_relu),
    ("maxpool2x2", grad_maxpool),
    ("dropout", grad_dropout),
    ("flatten", grad_flatten),
    ("dense", grad_dense),
    ("softmax", grad_softmax),
    ("softmax_cross_entropy", grad_softmax_cross_entropy),
    ("distillation", grad_distillation),
    ("multitask_model", grad_multitask_model),
];

pub fn run_grad_case(case: &GradCase) -> GradCheck {
    let worst = (0..GRAD_SEEDS).map(case.1).fold(0.0, f64::max);
    GradCheck {
        name: case.0,
        seeds: GRAD_SEEDS,
        worst,
    }
}
