//! Teacher and student networks over a named, ordered parameter map.

mod checkpoint;
mod student;
mod teacher;

use indexmap::IndexMap;
use octdistill_autodiff::{Element, Gradients, Graph, Tensor, Var};
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, load_checkpoint_into, read_checkpoint, save_checkpoint, write_checkpoint, FORMAT_VERSION, MAGIC};
pub use student::StudentConfig;
pub use teacher::{drop_path_rates, TeacherConfig};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Teacher(TeacherConfig),
    Student(StudentConfig),
}

impl Architecture {
    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::Teacher(c) => c.num_classes,
            Architecture::Student(c) => c.num_classes,
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Architecture::Teacher(c) => c.input_size,
            Architecture::Student(c) => c.input_size,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Architecture::Teacher(_) => "teacher",
            Architecture::Student(_) => "student",
        }
    }

    /// `key = value` lines, the form stored inside checkpoints.
    pub fn to_text(&self) -> String {
        let mut out = format!("kind = {}\n", self.kind());
        let fields = match self {
            Architecture::Teacher(c) => c.fields(),
            Architecture::Student(c) => c.fields(),
        };
        for (k, v) in fields {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = IndexMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config line `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let kind = map
            .shift_remove("kind")
            .ok_or_else(|| Error::Format("config block lacks `kind`".into()))?;
        let fields = FieldReader(map);
        match kind.as_str() {
            "teacher" => Ok(Architecture::Teacher(TeacherConfig::from_fields(&fields)?)),
            "student" => Ok(Architecture::Student(StudentConfig::from_fields(&fields)?)),
            other => Err(Error::Format(format!("unknown model kind `{other}`"))),
        }
    }
}

pub(crate) struct FieldReader(IndexMap<String, String>);

impl FieldReader {
    fn raw(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("config block lacks `{key}`")))
    }

    pub(crate) fn usize(&self, key: &str) -> Result<usize> {
        self.raw(key)?
            .parse()
            .map_err(|_| Error::Format(format!("`{key}` is not an unsigned integer")))
    }

    pub(crate) fn f64(&self, key: &str) -> Result<f64> {
        self.raw(key)?
            .parse()
            .map_err(|_| Error::Format(format!("`{key}` is not a number")))
    }

    pub(crate) fn list(&self, key: &str) -> Result<Vec<usize>> {
        parse_usize_list(self.raw(key)?).ok_or_else(|| Error::Format(format!("`{key}` is not an integer list")))
    }
}

pub fn parse_usize_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

pub fn format_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Model {
    arch: Architecture,
    params: IndexMap<String, Tensor>,
    mode: Mode,
}

/// Collects named parameters in creation order.
pub(crate) struct ParamBuilder<'a, R: Rng> {
    params: IndexMap<String, Tensor>,
    rng: &'a mut R,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub(crate) fn new(rng: &'a mut R) -> Self {
        Self {
            params: IndexMap::new(),
            rng,
        }
    }

    pub(crate) fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound)).expect("nonempty parameter shape");
        self.insert(name, t);
    }

    pub(crate) fn constant(&mut self, name: String, shape: Vec<usize>, value: f32) {
        self.insert(name, Tensor::full(shape, value).expect("nonempty parameter shape"));
    }

    fn insert(&mut self, name: String, t: Tensor) {
        let previous = self.params.insert(name.clone(), t.with_requires_grad(true));
        assert!(previous.is_none(), "duplicate parameter name {name}");
    }

    pub(crate) fn finish(self) -> IndexMap<String, Tensor> {
        self.params
    }
}

/// Parameter variables of one model inside one graph, in parameter order.
pub struct Bound<'m> {
    model: &'m Model,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .model
            .params
            .get_index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Model {
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = crate::seed::rng(seed, crate::seed::Stream::Init, &[]);
        let params = match &arch {
            Architecture::Teacher(c) => teacher::init(c, &mut rng)?,
            Architecture::Student(c) => student::init(c, &mut rng)?,
        };
        Ok(Self {
            arch,
            params,
            mode: Mode::Train,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    /// Names of the final classifier parameters; everything else is backbone.
    pub fn is_head(name: &str) -> bool {
        name.starts_with("head.")
    }

    /// Records every parameter as a leaf of `g`, cast to `F`.
    pub fn bind<F: Element>(&self, g: &mut Graph<F>, trainable: bool) -> Bound<'_> {
        let vars = self
            .params
            .values()
            .map(|t| g.leaf(t.cast::<F>().with_requires_grad(trainable)))
            .collect();
        Bound { model: self, vars }
    }

    /// Wraps already-recorded variables, given in parameter order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Bound<'_> {
        assert_eq!(vars.len(), self.params.len());
        Bound { model: self, vars }
    }

    /// Forward pass honouring the current mode; `rng` drives dropout and
    /// drop path in train mode and is untouched in eval mode.
    pub fn forward<F: Element, R: Rng>(&self, g: &mut Graph<F>, p: &Bound<'_>, input: Var, rng: &mut R) -> Result<Var> {
        let train = self.mode == Mode::Train;
        match &self.arch {
            Architecture::Teacher(c) => teacher::forward(c, g, p, input, train, rng),
            Architecture::Student(c) => student::forward(c, g, p, input, train, rng),
        }
    }

    /// Deterministic eval-mode logits for an `[N, 3, S, S]` batch.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let y = match &self.arch {
            Architecture::Teacher(c) => teacher::forward(c, &mut g, &p, x, false, &mut rng)?,
            Architecture::Student(c) => student::forward(c, &mut g, &p, x, false, &mut rng)?,
        };
        Ok(g.value(y).clone())
    }

    /// Adds this graph's gradients into each parameter's grad buffer.
    pub fn accumulate_grads(&mut self, grads: &Gradients<f32>, bound_vars: &[Var]) -> Result<()> {
        for (t, v) in self.params.values_mut().zip(bound_vars) {
            if let Some(gv) = grads.get(*v) {
                t.accumulate_grad(gv)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.clear_grad();
        }
    }

    /// Replaces parameter values, keeping names, order and shapes.
    pub fn load_values(&mut self, values: &IndexMap<String, Vec<f32>>) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let v = values.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if v.len() != t.numel() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: vec![v.len()],
                });
            }
            t.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values of all parameters.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn build_teacher(config: TeacherConfig, seed: u64) -> Result<Model> {
    Model::build(Architecture::Teacher(config), seed)
}

pub fn build_student(config: StudentConfig, seed: u64) -> Result<Model> {
    Model::build(Architecture::Student(config), seed)
}

/// Total element count over all parameter tensors.
pub fn count_parameters<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> usize {
    params.into_iter().map(Tensor::numel).sum()
}

/// Moves an NCHW tensor to NHWC, applies layer norm over channels, and back.
pub(crate) fn channel_layer_norm<F: Element>(g: &mut Graph<F>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let nhwc = g.permute(x, &[0, 2, 3, 1])?;
    let y = g.layer_norm(nhwc, 1, gamma, beta, F::of(1e-6))?;
    Ok(g.permute(y, &[0, 3, 1, 2])?)
}
