//! Direct-formula reference implementations, written loop-by-loop in f64
//! without sharing any code with the production kernels.

/// Six-nested-loop convolution (plus batch and output-channel loops).
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    input: &[f64],
    in_shape: [usize; 4],
    kernel: &[f64],
    k_shape: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, w] = in_shape;
    let [cout, _, kh, kw] = k_shape;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = input[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                let kv = kernel[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

/// Grouped convolution with one group per channel.
pub fn depthwise_conv2d(
    input: &[f64],
    in_shape: [usize; 4],
    kernel: &[f64],
    kernel_hw: [usize; 2],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = in_shape;
    let [kh, kw] = kernel_hw;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[ch]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += input[((b * c + ch) * h + iy as usize) * w + ix as usize]
                                * kernel[(ch * kh + ky) * kw + kx];
                        }
                    }
                    out[((b * c + ch) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, c, oh, ow])
}

/// `x @ weight^T + bias` as explicit dot products.
pub fn linear(x: &[f64], weight: &[f64], bias: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    let rows = x.len() / d_in;
    let mut out = Vec::new();
    for r in 0..rows {
        for o in 0..d_out {
            let dot: f64 = (0..d_in).map(|i| x[r * d_in + i] * weight[o * d_in + i]).sum();
            out.push(dot + bias[o]);
        }
    }
    out
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` over contiguous groups.
pub fn layer_norm(x: &[f64], group: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for chunk in x.chunks(group) {
        let mean = chunk.iter().sum::<f64>() / group as f64;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / group as f64;
        for (i, v) in chunk.iter().enumerate() {
            out.push((v - mean) / (var + eps).sqrt() * gamma[i] + beta[i]);
        }
    }
    out
}

/// GRN written straight from its definition.
pub fn global_response_norm(x: &[f64], shape: [usize; 4], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let energy: Vec<f64> = (0..c)
            .map(|ch| {
                (0..hw)
                    .map(|p| x[(b * c + ch) * hw + p].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mean = energy.iter().sum::<f64>() / c as f64;
        for ch in 0..c {
            let nx = energy[ch] / (mean + eps);
            for p in 0..hw {
                let i = (b * c + ch) * hw + p;
                out[i] = gamma[ch] * (x[i] * nx) + beta[ch] + x[i];
            }
        }
    }
    out
}

pub fn softmax(row: &[f64], t: f64) -> Vec<f64> {
    let exps: Vec<f64> = row.iter().map(|v| (v / t).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// `sum_j p_j ln(p_j / q_j)` with `p = softmax(teacher/t)`, `q = softmax(student/t)`.
pub fn softened_kl(student: &[f64], teacher: &[f64], t: f64) -> f64 {
    let p = softmax(teacher, t);
    let q = softmax(student, t);
    p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum()
}

/// Standard normal CDF by composite Simpson quadrature of the density.
pub fn normal_cdf(x: f64) -> f64 {
    let steps = 20_000;
    let h = x / steps as f64;
    let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = pdf(0.0) + pdf(x);
    for i in 1..steps {
        let coef = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += coef * pdf(i as f64 * h);
    }
    0.5 + acc * h / 3.0
}

/// Exact fraction with a positive denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: i128,
    pub den: i128,
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    pub fn new(num: i128, den: i128) -> Self {
        assert!(den != 0);
        let g = gcd(num, den).max(1);
        let s = if den < 0 { -1 } else { 1 };
        Self {
            num: s * num / g,
            den: s * den / g,
        }
    }

    pub fn add(self, o: Ratio) -> Ratio {
        Ratio::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }

    pub fn div_int(self, k: i128) -> Ratio {
        Ratio::new(self.num, self.den * k)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Per-class one-vs-rest rates obtained by walking every individual sample
/// implied by the confusion matrix, rather than reading row/column sums.
pub struct OneVsRest {
    pub accuracy: Ratio,
    pub sensitivity: Option<Ratio>,
    pub specificity: Option<Ratio>,
}

pub fn one_vs_rest(matrix: &[Vec<u64>]) -> OneVsRest {
    let k = matrix.len();
    let mut samples = Vec::new();
    for (t, row) in matrix.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            for _ in 0..count {
                samples.push((t, p));
            }
        }
    }
    let n = samples.len() as i128;
    let correct = samples.iter().filter(|(t, p)| t == p).count() as i128;
    let mut sens = Vec::new();
    let mut spec = Vec::new();
    for c in 0..k {
        let (mut tp, mut fn_, mut fp, mut tn) = (0i128, 0i128, 0i128, 0i128);
        for &(t, p) in &samples {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (true, false) => fn_ += 1,
                (false, true) => fp += 1,
                (false, false) => tn += 1,
            }
        }
        if tp + fn_ > 0 {
            sens.push(Ratio::new(tp, tp + fn_));
        }
        if tn + fp > 0 {
            spec.push(Ratio::new(tn, tn + fp));
        }
    }
    let mean = |v: &[Ratio]| {
        (!v.is_empty()).then(|| v.iter().fold(Ratio::new(0, 1), |a, r| a.add(*r)).div_int(v.len() as i128))
    };
    OneVsRest {
        accuracy: Ratio::new(correct, n),
        sensitivity: mean(&sens),
        specificity: mean(&spec),
    }
}
