use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Inputs {
    /// Row-major `[n, seq_len]` token ids.
    Tokens { ids: Vec<usize>, seq_len: usize },
    /// Row-major `[n, dim]` dense features.
    Features { data: Vec<f64>, dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// A set of examples with their targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Inputs,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Inputs, targets: Targets) -> Result<Self> {
        let b = Batch { inputs, targets };
        let n = b.targets_len();
        let rows = match &b.inputs {
            Inputs::Tokens { ids, seq_len } => {
                if *seq_len == 0 || ids.len() % seq_len != 0 {
                    return Err(Error::shape("batch", "token ids not a multiple of seq_len"));
                }
                ids.len() / seq_len
            }
            Inputs::Features { data, dim } => {
                if *dim == 0 || data.len() % dim != 0 {
                    return Err(Error::shape("batch", "features not a multiple of dim"));
                }
                data.len() / dim
            }
        };
        if rows != n {
            return Err(Error::shape(
                "batch",
                format!("{rows} inputs but {n} targets"),
            ));
        }
        Ok(b)
    }

    fn targets_len(&self) -> usize {
        match &self.targets {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sequence length of the embedding tensor (1 for dense features).
    pub fn seq_len(&self) -> usize {
        match &self.inputs {
            Inputs::Tokens { seq_len, .. } => *seq_len,
            Inputs::Features { .. } => 1,
        }
    }

    /// Examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let inputs = match &self.inputs {
            Inputs::Tokens { ids, seq_len } => Inputs::Tokens {
                ids: indices
                    .iter()
                    .flat_map(|&i| ids[i * seq_len..(i + 1) * seq_len].iter().copied())
                    .collect(),
                seq_len: *seq_len,
            },
            Inputs::Features { data, dim } => Inputs::Features {
                data: indices
                    .iter()
                    .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
                dim: *dim,
            },
        };
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(indices.iter().map(|&i| v[i]).collect()),
        };
        Batch { inputs, targets }
    }

    pub fn slice(&self, range: Range<usize>) -> Batch {
        let idx: Vec<usize> = range.collect();
        self.select(&idx)
    }

    /// Concatenates batches of the same input kind.
    pub fn concat(parts: &[Batch]) -> Result<Batch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of no batches".into()))?;
        let mut out = first.clone();
        for p in &parts[1..] {
            match (&mut out.inputs, &p.inputs) {
                (Inputs::Tokens { ids, seq_len }, Inputs::Tokens { ids: o, seq_len: s })
                    if seq_len == s =>
                {
                    ids.extend_from_slice(o)
                }
                (Inputs::Features { data, dim }, Inputs::Features { data: o, dim: d })
                    if dim == d =>
                {
                    data.extend_from_slice(o)
                }
                _ => return Err(Error::shape("concat", "incompatible inputs")),
            }
            match (&mut out.targets, &p.targets) {
                (Targets::Classes(a), Targets::Classes(b)) => a.extend_from_slice(b),
                (Targets::Values(a), Targets::Values(b)) => a.extend_from_slice(b),
                _ => return Err(Error::shape("concat", "incompatible targets")),
            }
        }
        Ok(out)
    }

    /// Targets as a `[n, classes]` one-hot tensor or a `[n, 1]` value column.
    pub fn target_tensor(&self, classes: usize) -> Result<Tensor> {
        match &self.targets {
            Targets::Classes(c) => {
                let mut data = vec![0.0; c.len() * classes];
                for (i, &k) in c.iter().enumerate() {
                    if k >= classes {
                        return Err(Error::IndexOutOfRange {
                            what: "class label",
                            index: k,
                            size: classes,
                        });
                    }
                    data[i * classes + k] = 1.0;
                }
                Tensor::new(vec![c.len(), classes], data)
            }
            Targets::Values(v) => Tensor::new(vec![v.len(), 1], v.clone()),
        }
    }
}
