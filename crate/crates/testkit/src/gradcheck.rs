//! Finite-difference gradient checks.
//!
//! The analytic gradient comes from the production `f32` backward pass; the
//! numerical gradient from central differences of the `f64` forward pass.

use octdistill_autodiff::{Element, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A differentiable scalar function of some input tensors.
pub trait Probe {
    fn name(&self) -> String;

    fn inputs(&self) -> Vec<Tensor<f64>>;

    /// Inputs whose gradients are compared. Defaults to all of them.
    fn checked(&self) -> Vec<usize> {
        (0..self.inputs().len()).collect()
    }

    fn eval<F: Element>(&self, g: &mut Graph<F>, vars: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    /// Lower bound on the magnitude used as the relative-error denominator.
    pub floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel: 1e-3,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passed(&self, tol: &Tolerance) -> bool {
        self.max_rel_err <= tol.rel
    }
}

fn eval_f64<P: Probe>(probe: &P, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = probe.eval(&mut g, &vars).expect("f64 forward");
    g.value(out).item().expect("scalar probe")
}

pub fn check<P: Probe>(probe: &P, tol: &Tolerance) -> GradReport {
    let inputs = probe.inputs();
    let checked = probe.checked();

    let mut g = Graph::<f32>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.cast::<f32>().with_requires_grad(checked.contains(&i))))
        .collect();
    let out = probe.eval(&mut g, &vars).expect("f32 forward");
    let grads = g.backward(out).expect("backward");

    let mut report = GradReport {
        name: probe.name(),
        elements: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for &i in &checked {
        let analytic = grads.wrt(vars[i], inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += tol.step;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= tol.step;
            let numeric = (eval_f64(probe, &plus) - eval_f64(probe, &minus)) / (2.0 * tol.step);
            let a = analytic[j] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(tol.floor);
            report.elements += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    report
}

/// Deterministic pseudo-random projection weight in `[-1, 1)`.
fn projection_weight(i: usize) -> f64 {
    let h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ 0x5DEE_CE66_D;
    (h % 2000) as f64 / 1000.0 - 1.0
}

/// Reduces any tensor to a scalar by a fixed random projection.
pub fn project<F: Element>(g: &mut Graph<F>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(shape, |i| F::of(projection_weight(i)))?;
    let w = g.constant(w);
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    // Magnitudes bounded away from zero keep probes off the ReLU kink.
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .expect("valid shape")
}

/// Every differentiable primitive and loss.
#[derive(Clone, Debug)]
pub enum OpKind {
    Add,
    Mul,
    Scale,
    Sum,
    Mean,
    Flatten,
    Permute,
    Conv2d { stride: usize, padding: usize },
    Depthwise { stride: usize, padding: usize },
    Linear,
    Gelu,
    Relu,
    Sigmoid,
    LayerNorm { axes: usize },
    Grn,
    Softmax { temperature: f64 },
    GlobalAvgPool,
    Dropout { p: f64, seed: u64 },
    DropPath { p: f64, seed: u64 },
    ChannelScale,
    CrossEntropy { labels: Vec<usize> },
    Focal { labels: Vec<usize>, alpha: Vec<f64>, gamma: f64 },
    SoftenedKl { temperature: f64 },
    /// conv2d -> gelu -> global_avg_pool -> linear -> cross-entropy
    Chain { labels: Vec<usize>, stride: usize, padding: usize },
}

impl OpKind {
    pub fn label(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Flatten => "flatten",
            OpKind::Permute => "permute",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Depthwise { .. } => "depthwise_conv2d",
            OpKind::Linear => "linear",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Grn => "global_response_norm",
            OpKind::Softmax { .. } => "softmax_with_temperature",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Dropout { .. } => "dropout",
            OpKind::DropPath { .. } => "drop_path",
            OpKind::ChannelScale => "channel_scale",
            OpKind::CrossEntropy { .. } => "cross_entropy",
            OpKind::Focal { .. } => "focal_loss",
            OpKind::SoftenedKl { .. } => "softened_kl",
            OpKind::Chain { .. } => "conv_gelu_pool_linear_ce",
        }
    }
}

#[derive(Clone, Debug)]
pub struct OpProbe {
    pub kind: OpKind,
    pub inputs: Vec<Tensor<f64>>,
    pub checked: Vec<usize>,
}

impl Probe for OpProbe {
    fn name(&self) -> String {
        let shapes: Vec<_> = self.inputs.iter().map(|t| t.shape().to_vec()).collect();
        format!("{} {:?}", self.kind.label(), shapes)
    }

    fn inputs(&self) -> Vec<Tensor<f64>> {
        self.inputs.clone()
    }

    fn checked(&self) -> Vec<usize> {
        self.checked.clone()
    }

    fn eval<F: Element>(&self, g: &mut Graph<F>, v: &[Var]) -> Result<Var> {
        let y = match &self.kind {
            OpKind::Add => g.add(v[0], v[1])?,
            OpKind::Mul => g.mul(v[0], v[1])?,
            OpKind::Scale => g.scale(v[0], F::of(-1.7))?,
            OpKind::Sum => return g.sum(v[0]),
            OpKind::Mean => return g.mean(v[0]),
            OpKind::Flatten => g.flatten(v[0])?,
            OpKind::Permute => g.permute(v[0], &[0, 2, 3, 1])?,
            OpKind::Conv2d { stride, padding } => g.conv2d(v[0], v[1], Some(v[2]), *stride, *padding)?,
            OpKind::Depthwise { stride, padding } => {
                g.depthwise_conv2d(v[0], v[1], Some(v[2]), *stride, *padding)?
            }
            OpKind::Linear => g.linear(v[0], v[1], Some(v[2]))?,
            OpKind::Gelu => g.gelu(v[0])?,
            OpKind::Relu => g.relu(v[0])?,
            OpKind::Sigmoid => g.sigmoid(v[0])?,
            OpKind::LayerNorm { axes } => g.layer_norm(v[0], *axes, v[1], v[2], F::of(1e-5))?,
            OpKind::Grn => g.global_response_norm(v[0], v[1], v[2], F::of(1e-6))?,
            OpKind::Softmax { temperature } => g.softmax_with_temperature(v[0], F::of(*temperature))?,
            OpKind::GlobalAvgPool => g.global_avg_pool(v[0])?,
            OpKind::Dropout { p, seed } => g.dropout(v[0], *p, true, &mut ChaCha8Rng::seed_from_u64(*seed))?,
            OpKind::DropPath { p, seed } => {
                g.drop_path(v[0], *p, true, &mut ChaCha8Rng::seed_from_u64(*seed))?
            }
            OpKind::ChannelScale => g.channel_scale(v[0], v[1])?,
            OpKind::CrossEntropy { labels } => return g.cross_entropy(v[0], labels),
            OpKind::Focal { labels, alpha, gamma } => return g.focal_loss(v[0], labels, alpha, *gamma),
            OpKind::SoftenedKl { temperature } => return g.softened_kl(v[0], v[1], *temperature),
            OpKind::Chain {
                labels,
                stride,
                padding,
            } => {
                let c = g.conv2d(v[0], v[1], Some(v[2]), *stride, *padding)?;
                let a = g.gelu(c)?;
                let p = g.global_avg_pool(a)?;
                let l = g.linear(p, v[3], Some(v[4]))?;
                return g.cross_entropy(l, labels);
            }
        };
        project(g, y)
    }
}

/// At least `per_op` randomly shaped probes for every [`OpKind`].
pub fn standard_probes(seed: u64, per_op: usize) -> Vec<OpProbe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    let dim = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    for _ in 0..per_op {
        let a = [dim(&mut rng, 1, 3), dim(&mut rng, 1, 4), dim(&mut rng, 2, 4)];
        let t = |rng: &mut ChaCha8Rng, s: &[usize]| random_tensor(rng, s);
        let p = |kind: OpKind, inputs: Vec<Tensor<f64>>, checked: Vec<usize>| OpProbe {
            kind,
            inputs,
            checked,
        };

        probes.push(p(OpKind::Add, vec![t(&mut rng, &a), t(&mut rng, &a)], vec![0, 1]));
        probes.push(p(OpKind::Mul, vec![t(&mut rng, &a), t(&mut rng, &a)], vec![0, 1]));
        probes.push(p(OpKind::Scale, vec![t(&mut rng, &a)], vec![0]));
        probes.push(p(OpKind::Sum, vec![t(&mut rng, &a)], vec![0]));
        probes.push(p(OpKind::Mean, vec![t(&mut rng, &a)], vec![0]));
        probes.push(p(OpKind::Flatten, vec![t(&mut rng, &a)], vec![0]));

        let nchw = [dim(&mut rng, 1, 2), dim(&mut rng, 1, 3), dim(&mut rng, 3, 5), dim(&mut rng, 3, 5)];
        probes.push(p(OpKind::Permute, vec![t(&mut rng, &nchw)], vec![0]));

        let (stride, padding) = (dim(&mut rng, 1, 2), dim(&mut rng, 0, 1));
        let cout = dim(&mut rng, 1, 3);
        let k = dim(&mut rng, 1, 3);
        probes.push(p(
            OpKind::Conv2d { stride, padding },
            vec![t(&mut rng, &nchw), t(&mut rng, &[cout, nchw[1], k, k]), t(&mut rng, &[cout])],
            vec![0, 1, 2],
        ));
        let kd = dim(&mut rng, 1, 3);
        probes.push(p(
            OpKind::Depthwise {
                stride,
                padding: dim(&mut rng, 0, 2),
            },
            vec![t(&mut rng, &nchw), t(&mut rng, &[nchw[1], 1, kd, kd]), t(&mut rng, &[nchw[1]])],
            vec![0, 1, 2],
        ));

        let (din, dout) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 4));
        let rows = dim(&mut rng, 1, 3);
        probes.push(p(
            OpKind::Linear,
            vec![t(&mut rng, &[rows, 2, din]), t(&mut rng, &[dout, din]), t(&mut rng, &[dout])],
            vec![0, 1, 2],
        ));

        probes.push(p(OpKind::Gelu, vec![t(&mut rng, &a)], vec![0]));
        probes.push(p(OpKind::Relu, vec![t(&mut rng, &a)], vec![0]));
        probes.push(p(OpKind::Sigmoid, vec![t(&mut rng, &a)], vec![0]));

        let axes = dim(&mut rng, 1, 2);
        let trailing = &nchw[4 - axes..];
        probes.push(p(
            OpKind::LayerNorm { axes },
            vec![t(&mut rng, &nchw), t(&mut rng, trailing), t(&mut rng, trailing)],
            vec![0, 1, 2],
        ));
        probes.push(p(
            OpKind::Grn,
            vec![t(&mut rng, &nchw), t(&mut rng, &[nchw[1]]), t(&mut rng, &[nchw[1]])],
            vec![0, 1, 2],
        ));

        let (n, kc) = (dim(&mut rng, 1, 4), dim(&mut rng, 2, 5));
        let temperature = [1.0, 2.0, 4.0, 0.5, 3.0][probes.len() % 5];
        probes.push(p(OpKind::Softmax { temperature }, vec![t(&mut rng, &[n, kc])], vec![0]));
        probes.push(p(OpKind::GlobalAvgPool, vec![t(&mut rng, &nchw)], vec![0]));
        probes.push(p(
            OpKind::Dropout {
                p: 0.3,
                seed: rng.gen(),
            },
            vec![t(&mut rng, &a)],
            vec![0],
        ));
        probes.push(p(
            OpKind::DropPath {
                p: 0.4,
                seed: rng.gen(),
            },
            vec![t(&mut rng, &nchw)],
            vec![0],
        ));
        probes.push(p(
            OpKind::ChannelScale,
            vec![t(&mut rng, &nchw), t(&mut rng, &[nchw[0], nchw[1]])],
            vec![0, 1],
        ));

        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kc)).collect();
        probes.push(p(
            OpKind::CrossEntropy { labels: labels.clone() },
            vec![t(&mut rng, &[n, kc])],
            vec![0],
        ));
        let alpha: Vec<f64> = (0..kc).map(|_| rng.gen_range(0.2..2.0)).collect();
        let gamma = [2.0, 0.0, 1.0, 0.5, 3.0][probes.len() % 5];
        probes.push(p(
            OpKind::Focal {
                labels: labels.clone(),
                alpha,
                gamma,
            },
            vec![t(&mut rng, &[n, kc])],
            vec![0],
        ));
        probes.push(p(
            OpKind::SoftenedKl { temperature },
            vec![t(&mut rng, &[n, kc]), t(&mut rng, &[n, kc])],
            vec![0],
        ));

        let cin = nchw[1];
        let c_mid = dim(&mut rng, 2, 4);
        probes.push(p(
            OpKind::Chain {
                labels: (0..nchw[0]).map(|_| rng.gen_range(0..3)).collect(),
                stride: 1,
                padding: 1,
            },
            vec![
                t(&mut rng, &nchw),
                t(&mut rng, &[c_mid, cin, 3, 3]),
                t(&mut rng, &[c_mid]),
                t(&mut rng, &[3, c_mid]),
                t(&mut rng, &[3]),
            ],
            vec![0, 1, 2, 3, 4],
        ));
    }
    probes
}
