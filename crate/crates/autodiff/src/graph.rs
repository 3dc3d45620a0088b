use rand::Rng;

use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeometry, GrnStats, NormStats};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        group: usize,
        stats: NormStats<F>,
    },
    Grn {
        input: Var,
        gamma: Var,
        beta: Var,
        stats: GrnStats<F>,
    },
    Softmax {
        input: Var,
        temperature: F,
    },
    GlobalAvgPool(Var),
    /// Elementwise multiplication by a constant mask (dropout).
    Mask(Var, Vec<F>),
    /// Per-sample scaling of the leading axis by constants (drop path).
    SampleScale(Var, Vec<F>),
    /// `x[n,c,h,w] * gate[n,c]`.
    ChannelScale { input: Var, gate: Var },
    /// Scalar loss with its gradient w.r.t. `input` precomputed in f64.
    FusedLoss { input: Var, dinput: Vec<f64>, exact: f64 },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are only ever appended, and every op's inputs already exist when it
/// is recorded, so insertion order is a topological order and the graph is
/// acyclic by construction.
pub struct Graph<F: Element = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<F: Element>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(AutodiffError::Rank {
            op,
            expected: a.len(),
            found: b.len(),
        });
    }
    for (axis, (x, y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(AutodiffError::Dimension {
                op,
                axis: format!("axis {axis}"),
                expected: *x,
                found: *y,
            });
        }
    }
    Ok(())
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(AutodiffError::Rank {
            op,
            expected: rank,
            found: shape.len(),
        });
    }
    Ok(())
}

fn dim_err(op: &'static str, axis: &str, expected: usize, found: usize) -> AutodiffError {
    AutodiffError::Dimension {
        op,
        axis: axis.to_string(),
        expected,
        found,
    }
}

fn check_probability(op: &'static str, p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(AutodiffError::InvalidArgument {
            op,
            reason: format!("probability {p} outside [0, 1)"),
        })
    }
}

fn check_labels(op: &'static str, labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(dim_err(op, "labels", rows, labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(AutodiffError::InvalidArgument {
            op,
            reason: format!("label {bad} out of range for {classes} classes"),
        });
    }
    Ok(())
}

fn accumulate<F: Element>(slot: &mut Option<Vec<F>>, contribution: Vec<F>) {
    match slot {
        Some(buf) => {
            for (g, c) in buf.iter_mut().zip(contribution) {
                *g = *g + c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<F>> {
        self.nodes.get(v.0).ok_or(AutodiffError::UnknownVar(v.0))
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The 64-bit value of a fused loss node, before rounding to `F`.
    pub fn loss_value_f64(&self, v: Var) -> Option<f64> {
        match &self.nodes.get(v.0)?.op {
            Op::FusedLoss { exact, .. } => Some(*exact),
            _ => None,
        }
    }

    fn make(&self, shape: Vec<usize>, data: Vec<F>) -> Result<Tensor<F>> {
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape("add", ta.shape(), tb.shape())?;
        let data: Vec<F> = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        check_finite("add", &data)?;
        let t = self.make(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape("mul", ta.shape(), tb.shape())?;
        let data: Vec<F> = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        check_finite("mul", &data)?;
        let t = self.make(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let data: Vec<F> = ta.data().iter().map(|x| *x * factor).collect();
        check_finite("scale", &data)?;
        let t = self.make(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Scale(a, factor), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let s = ta.data().iter().fold(F::zero(), |acc, v| acc + *v);
        check_finite("sum", &[s])?;
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let s = ta.data().iter().fold(F::zero(), |acc, v| acc + *v) / F::of(ta.numel() as f64);
        check_finite("mean", &[s])?;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let t = Tensor::new(shape.to_vec(), ta.data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Collapses every axis after the first into one.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.node(a)?.value.shape().to_vec();
        let lead = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(a, &[lead, rest])
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let rank = ta.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(AutodiffError::InvalidArgument {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of {rank} axes"),
            });
        }
        let data = kernels::permute(ta.data(), ta.shape(), perm);
        let shape = perm.iter().map(|&p| ta.shape()[p]).collect::<Vec<_>>();
        let t = self.make(shape, data)?;
        Ok(self.push(t, Op::Permute(a, perm.to_vec()), &[a]))
    }

    fn conv_geometry(
        &self,
        op: &'static str,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        depthwise: bool,
    ) -> Result<ConvGeometry> {
        let xs = self.node(input)?.value.shape();
        let ks = self.node(kernel)?.value.shape();
        expect_rank(op, xs, 4)?;
        expect_rank(op, ks, 4)?;
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument {
                op,
                reason: "stride must be positive".into(),
            });
        }
        if depthwise {
            if ks[0] != xs[1] {
                return Err(dim_err(op, "kernel channels (axis 0)", xs[1], ks[0]));
            }
            if ks[1] != 1 {
                return Err(dim_err(op, "kernel input channels (axis 1)", 1, ks[1]));
            }
        } else if ks[1] != xs[1] {
            return Err(dim_err(op, "input channels (axis 1)", ks[1], xs[1]));
        }
        if ks[2] > xs[2] + 2 * padding {
            return Err(dim_err(op, "kernel height (axis 2)", xs[2] + 2 * padding, ks[2]));
        }
        if ks[3] > xs[3] + 2 * padding {
            return Err(dim_err(op, "kernel width (axis 3)", xs[3] + 2 * padding, ks[3]));
        }
        Ok(ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ks[0],
            kernel_h: ks[2],
            kernel_w: ks[3],
            stride,
            padding,
        })
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, len: usize) -> Result<()> {
        if let Some(b) = bias {
            let bs = self.node(b)?.value.shape();
            expect_rank(op, bs, 1)?;
            if bs[0] != len {
                return Err(dim_err(op, "bias (axis 0)", len, bs[0]));
            }
        }
        Ok(())
    }

    /// Cross-correlation of NCHW `input` with `[Cout, Cin, Kh, Kw]` `kernel`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = self.conv_geometry("conv2d", input, kernel, stride, padding, false)?;
        self.check_bias("conv2d", bias, geom.out_channels)?;
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        check_finite("conv2d", &data)?;
        let t = self.make(vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()], data)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Per-channel convolution with a `[C, 1, Kh, Kw]` kernel.
    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = self.conv_geometry("depthwise_conv2d", input, kernel, stride, padding, true)?;
        self.check_bias("depthwise_conv2d", bias, geom.out_channels)?;
        let data = kernels::depthwise_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        check_finite("depthwise_conv2d", &data)?;
        let t = self.make(vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()], data)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            t,
            Op::Depthwise {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Affine map over the trailing axis with a `[Dout, Din]` weight.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.node(input)?.value.shape().to_vec();
        let ws = self.node(weight)?.value.shape();
        expect_rank("linear", ws, 2)?;
        let (d_out, d_in) = (ws[0], ws[1]);
        let last = *xs.last().ok_or(AutodiffError::Rank {
            op: "linear",
            expected: 1,
            found: 0,
        })?;
        if last != d_in {
            return Err(dim_err("linear", "trailing axis", d_in, last));
        }
        self.check_bias("linear", bias, d_out)?;
        let data = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            d_in,
            d_out,
        );
        check_finite("linear", &data)?;
        let mut shape = xs;
        *shape.last_mut().unwrap() = d_out;
        let t = self.make(shape, data)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(t, Op::Linear { input, weight, bias }, &inputs))
    }

    fn unary(&mut self, op_name: &'static str, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let ta = &self.node(a)?.value;
        let data: Vec<F> = ta.data().iter().map(|v| f(*v)).collect();
        check_finite(op_name, &data)?;
        let t = self.make(ta.shape().to_vec(), data)?;
        Ok(self.push(t, op, &[a]))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, kernels::gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |v| v.max(F::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, kernels::sigmoid, Op::Sigmoid(a))
    }

    /// Normalizes over the trailing `norm_axes` axes; `gamma`/`beta` have
    /// exactly that trailing shape.
    pub fn layer_norm(&mut self, input: Var, norm_axes: usize, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let xs = self.node(input)?.value.shape().to_vec();
        if norm_axes == 0 || norm_axes > xs.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "layer_norm",
                reason: format!("empty normalization group ({norm_axes} trailing axes of rank {})", xs.len()),
            });
        }
        let trailing = &xs[xs.len() - norm_axes..];
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let ps = self.node(p)?.value.shape();
            if ps != trailing {
                return Err(AutodiffError::InvalidArgument {
                    op: "layer_norm",
                    reason: format!("{name} shape {ps:?} does not match normalized shape {trailing:?}"),
                });
            }
        }
        let group: usize = trailing.iter().product();
        let (data, stats) = kernels::layer_norm_forward(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            group,
            eps,
        );
        check_finite("layer_norm", &data)?;
        let t = self.make(xs, data)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                group,
                stats,
            },
            &[input, gamma, beta],
        ))
    }

    /// Global response normalization over NCHW input, residual included.
    pub fn global_response_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let xs = self.node(input)?.value.shape().to_vec();
        expect_rank("global_response_norm", &xs, 4)?;
        for p in [gamma, beta] {
            let ps = self.node(p)?.value.shape();
            expect_rank("global_response_norm", ps, 1)?;
            if ps[0] != xs[1] {
                return Err(dim_err("global_response_norm", "channels (axis 1)", ps[0], xs[1]));
            }
        }
        let (data, stats) = kernels::grn_forward(
            self.value(input).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            xs[0],
            xs[1],
            xs[2] * xs[3],
            eps,
        );
        check_finite("global_response_norm", &data)?;
        let t = self.make(xs, data)?;
        Ok(self.push(
            t,
            Op::Grn {
                input,
                gamma,
                beta,
                stats,
            },
            &[input, gamma, beta],
        ))
    }

    /// Row-wise `softmax(logits / temperature)` over the trailing axis.
    pub fn softmax_with_temperature(&mut self, input: Var, temperature: F) -> Result<Var> {
        if !(temperature > F::zero()) {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax_with_temperature",
                reason: format!("temperature must be positive, got {temperature:?}"),
            });
        }
        let ta = &self.node(input)?.value;
        let k = *ta.shape().last().unwrap_or(&1);
        let data = kernels::softmax_rows(ta.data(), k, temperature);
        check_finite("softmax_with_temperature", &data)?;
        let t = self.make(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax { input, temperature }, &[input]))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let ta = &self.node(input)?.value;
        expect_rank("global_avg_pool", ta.shape(), 4)?;
        let s = ta.shape();
        let spatial = s[2] * s[3];
        let inv = F::one() / F::of(spatial as f64);
        let data: Vec<F> = ta
            .data()
            .chunks(spatial)
            .map(|c| c.iter().fold(F::zero(), |a, v| a + *v) * inv)
            .collect();
        let t = self.make(vec![s[0], s[1]], data)?;
        Ok(self.push(t, Op::GlobalAvgPool(input), &[input]))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        check_probability("dropout", p)?;
        if !train || p == 0.0 {
            return Ok(input);
        }
        let scale = F::of(1.0 / (1.0 - p));
        let n = self.node(input)?.value.numel();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { scale })
            .collect();
        let ta = &self.nodes[input.0].value;
        let data: Vec<F> = ta.data().iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        let t = self.make(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mask(input, mask), &[input]))
    }

    /// Stochastic depth: drops the whole branch of each sample (leading axis)
    /// with probability `p`, scaling survivors by `1/(1-p)`.
    pub fn drop_path<R: Rng + ?Sized>(&mut self, input: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        check_probability("drop_path", p)?;
        if !train || p == 0.0 {
            return Ok(input);
        }
        let scale = F::of(1.0 / (1.0 - p));
        let ta = &self.node(input)?.value;
        let batch = ta.shape().first().copied().unwrap_or(1);
        let scales: Vec<F> = (0..batch)
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { scale })
            .collect();
        let per = ta.numel() / batch;
        let data: Vec<F> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x * scales[i / per])
            .collect();
        let t = self.make(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::SampleScale(input, scales), &[input]))
    }

    /// Multiplies each `[H, W]` plane of NCHW `input` by `gate[n, c]`.
    pub fn channel_scale(&mut self, input: Var, gate: Var) -> Result<Var> {
        let xs = self.node(input)?.value.shape().to_vec();
        let gs = self.node(gate)?.value.shape();
        expect_rank("channel_scale", &xs, 4)?;
        expect_rank("channel_scale", gs, 2)?;
        if gs[0] != xs[0] {
            return Err(dim_err("channel_scale", "batch (axis 0)", xs[0], gs[0]));
        }
        if gs[1] != xs[1] {
            return Err(dim_err("channel_scale", "channels (axis 1)", xs[1], gs[1]));
        }
        let spatial = xs[2] * xs[3];
        let g = self.value(gate).data();
        let data: Vec<F> = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x * g[i / spatial])
            .collect();
        check_finite("channel_scale", &data)?;
        let t = self.make(xs, data)?;
        Ok(self.push(t, Op::ChannelScale { input, gate }, &[input, gate]))
    }

    fn rows_and_classes(&self, op: &'static str, logits: Var) -> Result<(usize, usize)> {
        let s = self.node(logits)?.value.shape();
        expect_rank(op, s, 2)?;
        Ok((s[0], s[1]))
    }

    fn push_loss(&mut self, op: &'static str, input: Var, value: f64, dinput: Vec<f64>) -> Result<Var> {
        if !value.is_finite() || dinput.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op });
        }
        Ok(self.push(Tensor::scalar(F::of(value)), Op::FusedLoss { input, dinput, exact: value }, &[input]))
    }

    /// Mean cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (value, grad) = self.cross_entropy_parts(logits, labels)?;
        self.push_loss("cross_entropy", logits, value, grad)
    }

    fn cross_entropy_parts(&self, logits: Var, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (n, k) = self.rows_and_classes("cross_entropy", logits)?;
        check_labels("cross_entropy", labels, n, k)?;
        let logp = kernels::log_softmax_rows_f64(self.value(logits).data(), k, 1.0);
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(n * k);
        for (r, &t) in labels.iter().enumerate() {
            let row = &logp[r * k..][..k];
            total += -row[t];
            for (j, lp) in row.iter().enumerate() {
                let onehot = if j == t { 1.0 } else { 0.0 };
                grad.push((lp.exp() - onehot) * inv_n);
            }
        }
        Ok((total * inv_n, grad))
    }

    /// Mean focal loss `-alpha_t (1 - p_t)^gamma log p_t`, with `alpha`
    /// indexed by class.
    pub fn focal_loss(&mut self, logits: Var, labels: &[usize], alpha: &[f64], gamma: f64) -> Result<Var> {
        let (n, k) = self.rows_and_classes("focal_loss", logits)?;
        check_labels("focal_loss", labels, n, k)?;
        if alpha.len() != k {
            return Err(dim_err("focal_loss", "alpha", k, alpha.len()));
        }
        if !(gamma >= 0.0) || alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(AutodiffError::InvalidArgument {
                op: "focal_loss",
                reason: format!("gamma ({gamma}) and alpha entries must be nonnegative"),
            });
        }
        let logp = kernels::log_softmax_rows_f64(self.value(logits).data(), k, 1.0);
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(n * k);
        for (r, &t) in labels.iter().enumerate() {
            let row = &logp[r * k..][..k];
            let probs: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let log_pt = row[t];
            let pt = probs[t];
            // 1 - p_t summed from the other classes keeps precision near p_t = 1
            let rest: f64 = probs.iter().enumerate().filter(|(j, _)| *j != t).map(|(_, p)| *p).sum();
            let weight = rest.powf(gamma);
            let a = alpha[t];
            total += -(a * weight) * log_pt;
            let focus = if gamma == 0.0 || rest == 0.0 {
                0.0
            } else {
                gamma * rest.powf(gamma - 1.0) * pt * log_pt
            };
            // dL/dz_j = alpha [gamma (1-p)^(gamma-1) p log p - (1-p)^gamma] (delta_tj - p_j)
            let coef = a * (focus - weight);
            for (j, p) in probs.iter().enumerate() {
                let onehot = if j == t { 1.0 } else { 0.0 };
                grad.push(coef * (onehot - p) * inv_n);
            }
        }
        self.push_loss("focal_loss", logits, total * inv_n, grad)
    }

    /// Batch-mean `KL(softmax(teacher/T) || softmax(student/T))`.
    ///
    /// `teacher` is read as a constant: no gradient ever flows into it.
    pub fn softened_kl(&mut self, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(AutodiffError::InvalidArgument {
                op: "softened_kl",
                reason: format!("temperature must be positive, got {temperature}"),
            });
        }
        let (n, k) = self.rows_and_classes("softened_kl", student)?;
        let ts = self.node(teacher)?.value.shape();
        same_shape("softened_kl", &[n, k], ts)?;
        let lq = kernels::log_softmax_rows_f64(self.value(student).data(), k, temperature);
        let lp = kernels::log_softmax_rows_f64(self.value(teacher).data(), k, temperature);
        let inv_n = 1.0 / n as f64;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(n * k);
        for r in 0..n {
            let (p_row, q_row) = (&lp[r * k..][..k], &lq[r * k..][..k]);
            let mut kl = 0.0;
            for j in 0..k {
                let p = p_row[j].exp();
                kl += p * (p_row[j] - q_row[j]);
                grad.push((q_row[j].exp() - p) / temperature * inv_n);
            }
            total += kl.max(0.0);
        }
        self.push_loss("softened_kl", student, total * inv_n, grad)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Visits nodes in exact reverse insertion order; a tensor used several
    /// times receives the sum of its contributions.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let node = self.node(loss)?;
        if node.value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(AutodiffError::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let mut send = |v: Var, contribution: Vec<F>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], contribution);
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                send(*a, g.iter().zip(y).map(|(g, y)| *g * *y).collect());
                send(*b, g.iter().zip(x).map(|(g, x)| *g * *x).collect());
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|v| *v * *f).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / F::of(n as f64); n]);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, p) in perm.iter().enumerate() {
                    inverse[*p] = i;
                }
                send(*a, kernels::permute(g, node.value.shape(), &inverse));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (gi, gk, gb) = kernels::conv2d_backward(geom, val(*input), val(*kernel), g);
                send(*input, gi);
                send(*kernel, gk);
                if let Some(b) = bias {
                    send(*b, gb);
                }
            }
            Op::Depthwise {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (gi, gk, gb) = kernels::depthwise_backward(geom, val(*input), val(*kernel), g);
                send(*input, gi);
                send(*kernel, gk);
                if let Some(b) = bias {
                    send(*b, gb);
                }
            }
            Op::Linear { input, weight, bias } => {
                let ws = self.nodes[weight.0].value.shape();
                let (gx, gw, gb) = kernels::linear_backward(val(*input), val(*weight), g, ws[1], ws[0]);
                send(*input, gx);
                send(*weight, gw);
                if let Some(b) = bias {
                    send(*b, gb);
                }
            }
            Op::Gelu(a) => send(
                *a,
                val(*a).iter().zip(g).map(|(x, g)| *g * kernels::gelu_grad(*x)).collect(),
            ),
            Op::Relu(a) => send(
                *a,
                val(*a)
                    .iter()
                    .zip(g)
                    .map(|(x, g)| if *x > F::zero() { *g } else { F::zero() })
                    .collect(),
            ),
            Op::Sigmoid(a) => send(
                *a,
                node.value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(y, g)| *g * *y * (F::one() - *y))
                    .collect(),
            ),
            Op::LayerNorm {
                input,
                gamma,
                beta,
                group,
                stats,
            } => {
                let (gx, gg, gb) = kernels::layer_norm_backward(val(*input), val(*gamma), stats, g, *group);
                send(*input, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
            Op::Grn {
                input,
                gamma,
                beta,
                stats,
            } => {
                let s = self.nodes[input.0].value.shape();
                let (gx, gg, gb) =
                    kernels::grn_backward(val(*input), val(*gamma), stats, g, s[0], s[1], s[2] * s[3]);
                send(*input, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
            Op::Softmax { input, temperature } => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(k).zip(g.chunks(k)) {
                    let dot = yr.iter().zip(gr).fold(F::zero(), |a, (y, g)| a + *y * *g);
                    gx.extend(yr.iter().zip(gr).map(|(y, g)| *y * (*g - dot) / *temperature));
                }
                send(*input, gx);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.nodes[a.0].value.shape();
                let spatial = s[2] * s[3];
                let inv = F::one() / F::of(spatial as f64);
                send(*a, (0..val(*a).len()).map(|i| g[i / spatial] * inv).collect());
            }
            Op::Mask(a, mask) => send(*a, g.iter().zip(mask).map(|(g, m)| *g * *m).collect()),
            Op::SampleScale(a, scales) => {
                let per = g.len() / scales.len();
                send(*a, g.iter().enumerate().map(|(i, g)| *g * scales[i / per]).collect());
            }
            Op::ChannelScale { input, gate } => {
                let s = self.nodes[input.0].value.shape();
                let spatial = s[2] * s[3];
                let (x, gt) = (val(*input), val(*gate));
                send(*input, g.iter().enumerate().map(|(i, g)| *g * gt[i / spatial]).collect());
                let mut gg = vec![F::zero(); gt.len()];
                for (i, (gv, xv)) in g.iter().zip(x).enumerate() {
                    gg[i / spatial] = gg[i / spatial] + *gv * *xv;
                }
                send(*gate, gg);
            }
            Op::FusedLoss { input, dinput, .. } => {
                let up = g[0].as_f64();
                send(*input, dinput.iter().map(|d| F::of(d * up)).collect());
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf variable.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Element> Gradients<F> {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf of `len` elements; zeros when it did not participate.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<F> {
        self.get(v).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); len])
    }
}
