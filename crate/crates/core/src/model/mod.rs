//! Small classifiers with an explicit embedding layer and layer-partitioned
//! parameters.
//!
//! Every model is `embedding -> [attention] -> mean-pool -> hidden* -> head`.
//! Parameters are organised in [`ParamGroup`]s: the embedding table first
//! (token inputs only), the optional attention block, one group per hidden
//! layer and the classifier head last. The group index is stable for the
//! lifetime of the model, which is what the group-wise optimizer relies on.

mod batch;
mod checkpoint;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{Batch, Inputs, Targets};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use crate::autodiff::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InputSpec {
    Tokens { vocab: usize, seq_len: usize },
    Features { dim: usize },
}

/// Architecture descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelSpec {
    pub input: InputSpec,
    /// Embedding width for token inputs; ignored for dense features.
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Number of classes; regression models always have one output.
    pub classes: usize,
    pub task: TaskKind,
    pub activation: Activation,
    pub attention: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input: InputSpec::Tokens {
                vocab: 64,
                seq_len: 16,
            },
            embed_dim: 16,
            hidden: vec![32, 32],
            classes: 2,
            task: TaskKind::Classification,
            activation: Activation::Tanh,
            attention: false,
        }
    }
}

impl ModelSpec {
    /// Width of the embedding tensor fed to the rest of the network.
    pub fn width(&self) -> usize {
        match self.input {
            InputSpec::Tokens { .. } => self.embed_dim,
            InputSpec::Features { dim } => dim,
        }
    }

    pub fn outputs(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.classes,
            TaskKind::Regression => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = match self.input {
            InputSpec::Tokens { vocab, seq_len } => vocab > 0 && seq_len > 0 && self.embed_dim > 0,
            InputSpec::Features { dim } => dim > 0,
        };
        if !positive || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("model sizes must be positive".into()));
        }
        if self.task == TaskKind::Classification && self.classes < 2 {
            return Err(Error::InvalidArgument("classification needs at least 2 classes".into()));
        }
        Ok(())
    }
}

/// One layer's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub id: usize,
    pub name: String,
    pub tensors: Vec<Tensor>,
    /// Estimated smoothness constant, filled in by diagnostics.
    pub alpha: Option<f64>,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        let flat: Vec<f64> = self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
        crate::tensor::l2_norm(&flat)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    groups: Vec<ParamGroup>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl Model {
    /// Reproducible initialization: uniform in `±1/sqrt(fan_in)`, with the
    /// embedding table uniform in `±1`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.width();
        let mut groups = Vec::new();
        let mut push = |name: String, tensors: Vec<Tensor>| {
            let id = groups.len();
            groups.push(ParamGroup {
                id,
                name,
                tensors,
                alpha: None,
            });
        };
        if let InputSpec::Tokens { vocab, .. } = spec.input {
            push("embedding".into(), vec![uniform(&mut rng, &[vocab, d], 1.0)]);
        }
        if spec.attention {
            let b = 1.0 / (d as f64).sqrt();
            let tensors = (0..3).map(|_| uniform(&mut rng, &[d, d], b)).collect();
            push("attention".into(), tensors);
        }
        let mut fan_in = d;
        for (k, &width) in spec.hidden.iter().enumerate() {
            let b = 1.0 / (fan_in as f64).sqrt();
            let w = uniform(&mut rng, &[fan_in, width], b);
            let bias = uniform(&mut rng, &[width], b);
            push(format!("hidden{k}"), vec![w, bias]);
            fan_in = width;
        }
        let b = 1.0 / (fan_in as f64).sqrt();
        let out = spec.outputs();
        let w = uniform(&mut rng, &[fan_in, out], b);
        let bias = uniform(&mut rng, &[out], b);
        push("head".into(), vec![w, bias]);
        Ok(Model {
            spec: spec.clone(),
            groups,
        })
    }

    pub fn from_parts(spec: ModelSpec, groups: Vec<ParamGroup>) -> Result<Self> {
        let reference = Model::init(&spec, 0)?;
        let shapes_match = reference.groups.len() == groups.len()
            && reference.groups.iter().zip(&groups).all(|(a, b)| {
                a.tensors.len() == b.tensors.len()
                    && a.tensors.iter().zip(&b.tensors).all(|(x, y)| x.shape() == y.shape())
            });
        if !shapes_match {
            return Err(Error::shape("model", "parameter groups do not match the spec"));
        }
        Ok(Model { spec, groups })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    /// Index range of each group inside [`Model::flat_params`].
    pub fn group_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.groups
            .iter()
            .map(|g| {
                let r = start..start + g.len();
                start = r.end;
                r
            })
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.groups
            .iter()
            .flat_map(|g| g.tensors.iter().flat_map(|t| t.data().iter().copied()))
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                "set_flat_params",
                format!("{} values for {} parameters", flat.len(), self.num_params()),
            ));
        }
        let mut offset = 0;
        for t in self.groups.iter_mut().flat_map(|g| g.tensors.iter_mut()) {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers every parameter tensor as a trainable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundModel<'g> {
        self.bind_with(graph, true)
    }

    /// Registers parameters as constants (no gradient bookkeeping).
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> BoundModel<'g> {
        self.bind_with(graph, false)
    }

    fn bind_with<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundModel<'g> {
        let params = self
            .groups
            .iter()
            .map(|g| {
                g.tensors
                    .iter()
                    .map(|t| {
                        if trainable {
                            graph.param(t.clone())
                        } else {
                            graph.constant(t.clone())
                        }
                    })
                    .collect()
            })
            .collect();
        BoundModel {
            spec: self.spec.clone(),
            params,
        }
    }

    /// Binds a flat parameter vector laid out like [`Model::flat_params`].
    pub fn bind_flat<'g>(&self, graph: &'g Graph, flat: &[f64]) -> Result<BoundModel<'g>> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("bind_flat", "parameter count"));
        }
        let mut offset = 0;
        let params = self
            .groups
            .iter()
            .map(|g| {
                g.tensors
                    .iter()
                    .map(|t| {
                        let n = t.len();
                        let data = flat[offset..offset + n].to_vec();
                        offset += n;
                        graph.param(Tensor::new(t.shape().to_vec(), data).expect("same shape"))
                    })
                    .collect()
            })
            .collect();
        Ok(BoundModel {
            spec: self.spec.clone(),
            params,
        })
    }

    /// Looked-up embeddings `[n, seq_len, width]`.
    pub fn embeddings(&self, batch: &Batch) -> Result<Tensor> {
        let graph = Graph::new();
        Ok(self.bind_frozen(&graph).embed(batch)?.value())
    }

    /// Logits (or regression outputs) for a batch, outside any training graph.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let graph = Graph::new();
        let (logits, _) = self.bind_frozen(&graph).forward(batch)?;
        Ok(logits.value())
    }

    /// Outputs computed from supplied embeddings `[n, seq_len, width]`.
    pub fn predict_from_embeddings(&self, y: &Tensor) -> Result<Tensor> {
        let graph = Graph::new();
        let bound = self.bind_frozen(&graph);
        Ok(bound.logits_from_embeddings(graph.constant(y.clone()))?.value())
    }

    /// Mean task loss on `batch`.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let graph = Graph::new();
        let bound = self.bind_frozen(&graph);
        let (logits, _) = bound.forward(batch)?;
        let loss = task_loss(logits, batch, self.spec.outputs(), Reduction::Mean)?;
        Ok(loss.item().expect("scalar loss"))
    }

    /// Accuracy for classification; coefficient of determination for
    /// regression.
    pub fn score(&self, batch: &Batch) -> Result<f64> {
        const CHUNK: usize = 1024;
        let n = batch.len();
        if n == 0 {
            return Ok(0.0);
        }
        let mut outputs = Vec::with_capacity(n * self.spec.outputs());
        for start in (0..n).step_by(CHUNK) {
            let part = batch.slice(start..(start + CHUNK).min(n));
            outputs.extend(self.predict(&part)?.into_data());
        }
        Ok(match &batch.targets {
            Targets::Classes(labels) => {
                let c = self.spec.outputs();
                let correct = labels
                    .iter()
                    .enumerate()
                    .filter(|(i, &k)| argmax(&outputs[i * c..(i + 1) * c]) == k)
                    .count();
                correct as f64 / n as f64
            }
            Targets::Values(values) => {
                let mean = values.iter().sum::<f64>() / n as f64;
                let ss_tot: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
                let ss_res: f64 = values.iter().zip(&outputs).map(|(v, o)| (v - o).powi(2)).sum();
                if ss_tot > 0.0 {
                    1.0 - ss_res / ss_tot
                } else {
                    0.0
                }
            }
        })
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// A model whose parameters live in a [`Graph`].
pub struct BoundModel<'g> {
    spec: ModelSpec,
    params: Vec<Vec<Var<'g>>>,
}

impl<'g> BoundModel<'g> {
    pub fn params(&self) -> &[Vec<Var<'g>>] {
        &self.params
    }

    /// Embedding tensor `[n, seq_len, width]` for a batch: the gathered table
    /// rows for token inputs, or the features as a constant.
    pub fn embed(&self, batch: &Batch) -> Result<Var<'g>> {
        let n = batch.len();
        match (&self.spec.input, &batch.inputs) {
            (InputSpec::Tokens { .. }, Inputs::Tokens { ids, seq_len }) => {
                let table = self.params[0][0];
                let rows = table.gather_rows(ids)?;
                rows.reshape(&[n, *seq_len, self.spec.embed_dim])
            }
            (InputSpec::Features { dim }, Inputs::Features { data, dim: bd }) if dim == bd => {
                let graph = self.params[0][0].graph();
                let t = Tensor::new(vec![n, 1, *dim], data.clone())?;
                Ok(graph.constant(t))
            }
            _ => Err(Error::shape("forward", "batch inputs do not match the model input kind")),
        }
    }

    /// Full forward pass: `(outputs [n, out], embeddings [n, seq_len, width])`.
    pub fn forward(&self, batch: &Batch) -> Result<(Var<'g>, Var<'g>)> {
        let emb = self.embed(batch)?;
        let logits = self.logits_from_embeddings(emb)?;
        Ok((logits, emb))
    }

    /// The network after the embedding lookup, applied to `y`.
    pub fn logits_from_embeddings(&self, y: Var<'g>) -> Result<Var<'g>> {
        let shape = y.shape();
        let d = self.spec.width();
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::shape(
                "forward_from_embeddings",
                format!("expected [n, l, {d}], got {shape:?}"),
            ));
        }
        let (n, l) = (shape[0], shape[1]);
        let mut group = usize::from(matches!(self.spec.input, InputSpec::Tokens { .. }));
        let mut h = y;
        if self.spec.attention {
            let p = &self.params[group];
            group += 1;
            let flat = y.reshape(&[n * l, d])?;
            let q = flat.matmul(&p[0])?.reshape(&[n, l, d])?;
            let k = flat.matmul(&p[1])?.reshape(&[n, l, d])?;
            let v = flat.matmul(&p[2])?.reshape(&[n, l, d])?;
            let scores = q.batch_matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt())?;
            let ctx = scores.softmax()?.batch_matmul(&v)?;
            h = y.add(&ctx)?;
        }
        let mut x = h.mean_axis1()?;
        for _ in &self.spec.hidden {
            let p = &self.params[group];
            group += 1;
            let z = x.matmul(&p[0])?.add_row(&p[1])?;
            x = match self.spec.activation {
                Activation::Tanh => z.tanh()?,
                Activation::Relu => z.relu()?,
            };
        }
        let head = &self.params[group];
        x.matmul(&head[0])?.add_row(&head[1])
    }

    /// Gradients of every parameter, flattened in group order.
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        self.params
            .iter()
            .flatten()
            .flat_map(|v| grads.wrt(*v).into_data())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Cross-entropy for classification, squared error for regression.
pub fn task_loss<'g>(
    outputs: Var<'g>,
    batch: &Batch,
    classes: usize,
    reduction: Reduction,
) -> Result<Var<'g>> {
    let graph = outputs.graph();
    let n = batch.len() as f64;
    let total = match &batch.targets {
        Targets::Classes(_) => {
            let onehot = graph.constant(batch.target_tensor(classes)?);
            outputs.log_softmax()?.mul(&onehot)?.sum()?.scale(-1.0)?
        }
        Targets::Values(_) => {
            let target = graph.constant(batch.target_tensor(1)?);
            outputs.sub(&target)?.square()?.sum()?
        }
    };
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => total.scale(1.0 / n),
    }
}

/// Mean task loss of a fixed batch as a function of the flat parameters.
pub struct TaskObjective<'a> {
    model: &'a Model,
    batch: &'a Batch,
}

impl<'a> TaskObjective<'a> {
    pub fn new(model: &'a Model, batch: &'a Batch) -> Self {
        TaskObjective { model, batch }
    }
}

impl Objective for TaskObjective<'_> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn groups(&self) -> Vec<Range<usize>> {
        self.model.group_ranges()
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let graph = Graph::new();
        let bound = self.model.bind_flat(&graph, x)?;
        let (logits, _) = bound.forward(self.batch)?;
        let loss = task_loss(logits, self.batch, self.model.spec.outputs(), Reduction::Mean)?;
        let value = loss.item().expect("scalar loss");
        let grads = graph.backward(loss)?;
        Ok((value, bound.flat_grad(&grads)))
    }
}
