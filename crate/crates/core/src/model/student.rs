use indexmap::IndexMap;
use octdistill_autodiff::{Element, Graph, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use super::{format_list, Bound, FieldReader, ParamBuilder};
use crate::error::{Error, Result};

/// EfficientNet-style network of mobile inverted bottleneck blocks with
/// squeeze-excitation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudentConfig {
    pub block_counts: Vec<usize>,
    pub widths: Vec<usize>,
    pub expansion_ratio: usize,
    pub se_ratio: f64,
    pub num_classes: usize,
    pub in_channels: usize,
    pub input_size: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            block_counts: vec![1, 2, 2],
            widths: vec![16, 24, 40],
            expansion_ratio: 4,
            se_ratio: 0.25,
            num_classes: 3,
            in_channels: 3,
            input_size: 32,
        }
    }
}

/// Static description of one block.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub hidden: usize,
    pub squeeze: usize,
    pub stride: usize,
}

impl BlockSpec {
    pub fn residual(&self) -> bool {
        self.stride == 1 && self.cin == self.cout
    }
}

impl StudentConfig {
    pub(crate) fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("block_counts", format_list(&self.block_counts)),
            ("widths", format_list(&self.widths)),
            ("expansion_ratio", self.expansion_ratio.to_string()),
            ("se_ratio", self.se_ratio.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("input_size", self.input_size.to_string()),
        ]
    }

    pub(crate) fn from_fields(f: &FieldReader) -> Result<Self> {
        Ok(Self {
            block_counts: f.list("block_counts")?,
            widths: f.list("widths")?,
            expansion_ratio: f.usize("expansion_ratio")?,
            se_ratio: f.f64("se_ratio")?,
            num_classes: f.usize("num_classes")?,
            in_channels: f.usize("in_channels")?,
            input_size: f.usize("input_size")?,
        })
    }

    pub(crate) fn blocks(&self) -> Result<Vec<BlockSpec>> {
        let invalid = |m: String| Error::ModelConfig(m);
        if self.block_counts.is_empty() || self.block_counts.len() != self.widths.len() {
            return Err(invalid(format!(
                "block_counts ({}) and widths ({}) must be nonempty and equally long",
                self.block_counts.len(),
                self.widths.len()
            )));
        }
        if self.block_counts.contains(&0) || self.widths.contains(&0) || self.expansion_ratio == 0 {
            return Err(invalid("block counts, widths and expansion ratio must be positive".into()));
        }
        if !(self.se_ratio > 0.0 && self.se_ratio <= 1.0) {
            return Err(invalid(format!("se_ratio {} must lie in (0, 1]", self.se_ratio)));
        }
        if self.num_classes < 2 || self.in_channels == 0 {
            return Err(invalid("need at least 2 classes and 1 input channel".into()));
        }
        // stem halves, then every stage after the first halves again
        let mut size = self.input_size;
        for s in 0..self.widths.len() {
            if size < 2 {
                return Err(invalid(format!("spatial size reaches zero before stage {s}")));
            }
            size = (size - 1) / 2 + 1;
        }
        let mut specs = Vec::new();
        let mut cin = self.widths[0];
        for (s, (&count, &width)) in self.block_counts.iter().zip(&self.widths).enumerate() {
            for i in 0..count {
                specs.push(BlockSpec {
                    name: format!("stages.{s}.blocks.{i}"),
                    cin,
                    cout: width,
                    hidden: cin * self.expansion_ratio,
                    squeeze: ((cin as f64 * self.se_ratio).round() as usize).max(1),
                    stride: if s > 0 && i == 0 { 2 } else { 1 },
                });
                cin = width;
            }
        }
        Ok(specs)
    }
}

pub(super) fn init<R: Rng>(c: &StudentConfig, rng: &mut R) -> Result<IndexMap<String, Tensor>> {
    let specs = c.blocks()?;
    let mut b = ParamBuilder::new(rng);
    let w0 = c.widths[0];
    let fan = c.in_channels * 9;
    b.uniform("stem.conv.weight".into(), vec![w0, c.in_channels, 3, 3], fan);
    b.uniform("stem.conv.bias".into(), vec![w0], fan);
    for s in &specs {
        let pre = &s.name;
        b.uniform(format!("{pre}.expand.weight"), vec![s.hidden, s.cin, 1, 1], s.cin);
        b.uniform(format!("{pre}.expand.bias"), vec![s.hidden], s.cin);
        b.uniform(format!("{pre}.dwconv.weight"), vec![s.hidden, 1, 3, 3], 9);
        b.uniform(format!("{pre}.dwconv.bias"), vec![s.hidden], 9);
        b.uniform(format!("{pre}.se.reduce.weight"), vec![s.squeeze, s.hidden], s.hidden);
        b.uniform(format!("{pre}.se.reduce.bias"), vec![s.squeeze], s.hidden);
        b.uniform(format!("{pre}.se.expand.weight"), vec![s.hidden, s.squeeze], s.squeeze);
        b.uniform(format!("{pre}.se.expand.bias"), vec![s.hidden], s.squeeze);
        b.uniform(format!("{pre}.project.weight"), vec![s.cout, s.hidden, 1, 1], s.hidden);
        b.uniform(format!("{pre}.project.bias"), vec![s.cout], s.hidden);
    }
    let last = *c.widths.last().expect("validated nonempty");
    b.uniform("head.fc.weight".into(), vec![c.num_classes, last], last);
    b.uniform("head.fc.bias".into(), vec![c.num_classes], last);
    Ok(b.finish())
}

pub(super) fn forward<F: Element, R: Rng>(
    c: &StudentConfig,
    g: &mut Graph<F>,
    p: &Bound<'_>,
    input: Var,
    _train: bool,
    _rng: &mut R,
) -> Result<Var> {
    let stem = g.conv2d(input, p.get("stem.conv.weight"), Some(p.get("stem.conv.bias")), 2, 1)?;
    let mut x = g.gelu(stem)?;
    for s in c.blocks()? {
        x = mbconv(g, p, &s, x)?;
    }
    let pooled = g.global_avg_pool(x)?;
    Ok(g.linear(pooled, p.get("head.fc.weight"), Some(p.get("head.fc.bias")))?)
}

pub(crate) fn mbconv<F: Element>(g: &mut Graph<F>, p: &Bound<'_>, s: &BlockSpec, x: Var) -> Result<Var> {
    let name = |k: &str| format!("{}.{k}", s.name);
    let e = g.conv2d(x, p.get(&name("expand.weight")), Some(p.get(&name("expand.bias"))), 1, 0)?;
    let e = g.gelu(e)?;
    let d = g.depthwise_conv2d(e, p.get(&name("dwconv.weight")), Some(p.get(&name("dwconv.bias"))), s.stride, 1)?;
    let d = g.gelu(d)?;
    let squeezed = g.global_avg_pool(d)?;
    let r = g.linear(squeezed, p.get(&name("se.reduce.weight")), Some(p.get(&name("se.reduce.bias"))))?;
    let r = g.relu(r)?;
    let gate = g.linear(r, p.get(&name("se.expand.weight")), Some(p.get(&name("se.expand.bias"))))?;
    let gate = g.sigmoid(gate)?;
    let excited = g.channel_scale(d, gate)?;
    let out = g.conv2d(excited, p.get(&name("project.weight")), Some(p.get(&name("project.bias"))), 1, 0)?;
    if s.residual() {
        Ok(g.add(x, out)?)
    } else {
        Ok(out)
    }
}
