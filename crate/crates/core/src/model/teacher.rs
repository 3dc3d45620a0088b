use indexmap::IndexMap;
use octdistill_autodiff::{Element, Graph, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use super::{channel_layer_norm, format_list, Bound, FieldReader, ParamBuilder};
use crate::error::{Error, Result};

const DW_KERNEL: usize = 7;
const GRN_EPS: f64 = 1e-6;

/// ConvNeXtV2-style hierarchical network.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TeacherConfig {
    pub stage_depths: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub expansion_ratio: usize,
    pub drop_path_max: f64,
    pub head_dropout: f64,
    pub num_classes: usize,
    pub in_channels: usize,
    pub input_size: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            stage_depths: vec![2, 2, 4, 2],
            stage_widths: vec![16, 32, 64, 128],
            stem_kernel: 4,
            stem_stride: 4,
            expansion_ratio: 4,
            drop_path_max: 0.1,
            head_dropout: 0.1,
            num_classes: 3,
            in_channels: 3,
            input_size: 32,
        }
    }
}

impl TeacherConfig {
    pub(crate) fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("stage_depths", format_list(&self.stage_depths)),
            ("stage_widths", format_list(&self.stage_widths)),
            ("stem_kernel", self.stem_kernel.to_string()),
            ("stem_stride", self.stem_stride.to_string()),
            ("expansion_ratio", self.expansion_ratio.to_string()),
            ("drop_path_max", self.drop_path_max.to_string()),
            ("head_dropout", self.head_dropout.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("input_size", self.input_size.to_string()),
        ]
    }

    pub(crate) fn from_fields(f: &FieldReader) -> Result<Self> {
        Ok(Self {
            stage_depths: f.list("stage_depths")?,
            stage_widths: f.list("stage_widths")?,
            stem_kernel: f.usize("stem_kernel")?,
            stem_stride: f.usize("stem_stride")?,
            expansion_ratio: f.usize("expansion_ratio")?,
            drop_path_max: f.f64("drop_path_max")?,
            head_dropout: f.f64("head_dropout")?,
            num_classes: f.usize("num_classes")?,
            in_channels: f.usize("in_channels")?,
            input_size: f.usize("input_size")?,
        })
    }

    /// Spatial side length after the stem and after each downsample.
    pub fn stage_sizes(&self) -> Result<Vec<usize>> {
        let invalid = |m: String| Error::ModelConfig(m);
        if self.stage_depths.is_empty() || self.stage_depths.len() != self.stage_widths.len() {
            return Err(invalid(format!(
                "stage_depths ({}) and stage_widths ({}) must be nonempty and equally long",
                self.stage_depths.len(),
                self.stage_widths.len()
            )));
        }
        if self.stage_depths.contains(&0) || self.stage_widths.contains(&0) {
            return Err(invalid("stage depths and widths must be positive".into()));
        }
        if self.stage_widths.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("stage widths must be nondecreasing".into()));
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 || self.expansion_ratio == 0 {
            return Err(invalid("stem kernel, stem stride and expansion ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_max) || !(0.0..1.0).contains(&self.head_dropout) {
            return Err(invalid("drop_path_max and head_dropout must lie in [0, 1)".into()));
        }
        if self.num_classes < 2 || self.in_channels == 0 {
            return Err(invalid("need at least 2 classes and 1 input channel".into()));
        }
        if self.input_size < self.stem_kernel {
            return Err(invalid(format!(
                "input size {} is smaller than the stem kernel {}",
                self.input_size, self.stem_kernel
            )));
        }
        let mut sizes = vec![(self.input_size - self.stem_kernel) / self.stem_stride + 1];
        for s in 1..self.stage_depths.len() {
            let prev = sizes[s - 1];
            if prev < 2 {
                return Err(invalid(format!("spatial size reaches zero before stage {s}")));
            }
            sizes.push((prev - 2) / 2 + 1);
        }
        Ok(sizes)
    }
}

/// Linear stochastic-depth schedule from 0 to `max` over `blocks` blocks.
pub fn drop_path_rates(blocks: usize, max: f64) -> Vec<f64> {
    match blocks {
        0 => Vec::new(),
        1 => vec![max],
        n => (0..n).map(|i| max * i as f64 / (n - 1) as f64).collect(),
    }
}

pub(super) fn init<R: Rng>(c: &TeacherConfig, rng: &mut R) -> Result<IndexMap<String, Tensor>> {
    c.stage_sizes()?;
    let mut b = ParamBuilder::new(rng);
    let (k, w0) = (c.stem_kernel, c.stage_widths[0]);
    let fan = c.in_channels * k * k;
    b.uniform("stem.conv.weight".into(), vec![w0, c.in_channels, k, k], fan);
    b.uniform("stem.conv.bias".into(), vec![w0], fan);
    b.constant("stem.norm.weight".into(), vec![w0], 1.0);
    b.constant("stem.norm.bias".into(), vec![w0], 0.0);
    for (s, (&depth, &width)) in c.stage_depths.iter().zip(&c.stage_widths).enumerate() {
        if s > 0 {
            let cin = c.stage_widths[s - 1];
            let pre = format!("stages.{s}.downsample");
            b.constant(format!("{pre}.norm.weight"), vec![cin], 1.0);
            b.constant(format!("{pre}.norm.bias"), vec![cin], 0.0);
            b.uniform(format!("{pre}.conv.weight"), vec![width, cin, 2, 2], cin * 4);
            b.uniform(format!("{pre}.conv.bias"), vec![width], cin * 4);
        }
        let hidden = width * c.expansion_ratio;
        for i in 0..depth {
            let pre = format!("stages.{s}.blocks.{i}");
            let dw_fan = DW_KERNEL * DW_KERNEL;
            b.uniform(format!("{pre}.dwconv.weight"), vec![width, 1, DW_KERNEL, DW_KERNEL], dw_fan);
            b.uniform(format!("{pre}.dwconv.bias"), vec![width], dw_fan);
            b.constant(format!("{pre}.norm.weight"), vec![width], 1.0);
            b.constant(format!("{pre}.norm.bias"), vec![width], 0.0);
            b.uniform(format!("{pre}.pwconv1.weight"), vec![hidden, width], width);
            b.uniform(format!("{pre}.pwconv1.bias"), vec![hidden], width);
            b.constant(format!("{pre}.grn.gamma"), vec![hidden], 0.0);
            b.constant(format!("{pre}.grn.beta"), vec![hidden], 0.0);
            b.uniform(format!("{pre}.pwconv2.weight"), vec![width, hidden], hidden);
            b.uniform(format!("{pre}.pwconv2.bias"), vec![width], hidden);
        }
    }
    let last = *c.stage_widths.last().expect("validated nonempty");
    b.uniform("head.fc.weight".into(), vec![c.num_classes, last], last);
    b.uniform("head.fc.bias".into(), vec![c.num_classes], last);
    Ok(b.finish())
}

pub(super) fn forward<F: Element, R: Rng>(
    c: &TeacherConfig,
    g: &mut Graph<F>,
    p: &Bound<'_>,
    input: Var,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let total_blocks = c.stage_depths.iter().sum();
    let rates = drop_path_rates(total_blocks, c.drop_path_max);
    let mut x = g.conv2d(
        input,
        p.get("stem.conv.weight"),
        Some(p.get("stem.conv.bias")),
        c.stem_stride,
        0,
    )?;
    x = channel_layer_norm(g, x, p.get("stem.norm.weight"), p.get("stem.norm.bias"))?;
    let mut block_index = 0;
    for (s, &depth) in c.stage_depths.iter().enumerate() {
        if s > 0 {
            let pre = format!("stages.{s}.downsample");
            x = channel_layer_norm(g, x, p.get(&format!("{pre}.norm.weight")), p.get(&format!("{pre}.norm.bias")))?;
            x = g.conv2d(
                x,
                p.get(&format!("{pre}.conv.weight")),
                Some(p.get(&format!("{pre}.conv.bias"))),
                2,
                0,
            )?;
        }
        for i in 0..depth {
            let pre = format!("stages.{s}.blocks.{i}");
            x = block(g, p, &pre, x, rates[block_index], train, rng)?;
            block_index += 1;
        }
    }
    let pooled = g.global_avg_pool(x)?;
    let dropped = g.dropout(pooled, c.head_dropout, train, rng)?;
    Ok(g.linear(dropped, p.get("head.fc.weight"), Some(p.get("head.fc.bias")))?)
}

fn block<F: Element, R: Rng>(
    g: &mut Graph<F>,
    p: &Bound<'_>,
    pre: &str,
    x: Var,
    drop_rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let name = |s: &str| format!("{pre}.{s}");
    let dw = g.depthwise_conv2d(
        x,
        p.get(&name("dwconv.weight")),
        Some(p.get(&name("dwconv.bias"))),
        1,
        DW_KERNEL / 2,
    )?;
    let nhwc = g.permute(dw, &[0, 2, 3, 1])?;
    let normed = g.layer_norm(nhwc, 1, p.get(&name("norm.weight")), p.get(&name("norm.bias")), F::of(1e-6))?;
    let expanded = g.linear(normed, p.get(&name("pwconv1.weight")), Some(p.get(&name("pwconv1.bias"))))?;
    let act = g.gelu(expanded)?;
    let nchw = g.permute(act, &[0, 3, 1, 2])?;
    let grn = g.global_response_norm(nchw, p.get(&name("grn.gamma")), p.get(&name("grn.beta")), F::of(GRN_EPS))?;
    let back = g.permute(grn, &[0, 2, 3, 1])?;
    let reduced = g.linear(back, p.get(&name("pwconv2.weight")), Some(p.get(&name("pwconv2.bias"))))?;
    let branch = g.permute(reduced, &[0, 3, 1, 2])?;
    let branch = g.drop_path(branch, drop_rate, train, rng)?;
    Ok(g.add(x, branch)?)
}
