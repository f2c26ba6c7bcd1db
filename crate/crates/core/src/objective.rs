//! Differentiable scalar functions of a flat, group-partitioned parameter
//! vector. Diagnostics (sharpness, smoothness probes, Moreau envelopes) are
//! written against this trait so they apply equally to models and to explicit
//! test functions.

use std::ops::Range;

use crate::error::{Error, Result};

pub trait Objective {
    fn dim(&self) -> usize;

    /// Contiguous index ranges of the parameter groups, in group order.
    fn groups(&self) -> Vec<Range<usize>> {
        vec![0..self.dim()]
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_and_grad(x)?.0)
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_grad(x)?.1)
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn groups(&self) -> Vec<Range<usize>> {
        (**self).groups()
    }
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        (**self).value_and_grad(x)
    }
}

/// `0.5 x^T A x + b^T x` with a dense symmetric `A`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    n: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    groups: Vec<Range<usize>>,
}

impl Quadratic {
    /// `a` is row-major `n x n`.
    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::shape("quadratic", format!("{} entries for n = {n}", a.len())));
        }
        Ok(Quadratic {
            n,
            a,
            b: vec![0.0; n],
            groups: vec![0..n],
        })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut a = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            a[i * n + i] = *d;
        }
        Quadratic {
            n,
            a,
            b: vec![0.0; n],
            groups: vec![0..n],
        }
    }

    pub fn with_linear(mut self, b: Vec<f64>) -> Result<Self> {
        if b.len() != self.n {
            return Err(Error::shape("quadratic", "linear term length"));
        }
        self.b = b;
        Ok(self)
    }

    /// Partitions the coordinates into contiguous groups of the given sizes.
    pub fn with_groups(mut self, sizes: &[usize]) -> Result<Self> {
        if sizes.iter().sum::<usize>() != self.n {
            return Err(Error::shape("quadratic", "group sizes must cover all coordinates"));
        }
        let mut start = 0;
        self.groups = sizes
            .iter()
            .map(|s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect();
        Ok(self)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.a
            .chunks(self.n)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.n
    }

    fn groups(&self) -> Vec<Range<usize>> {
        self.groups.clone()
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.n {
            return Err(Error::shape("quadratic", "point dimension"));
        }
        let ax = self.matvec(x);
        let value = 0.5 * x.iter().zip(&ax).map(|(a, b)| a * b).sum::<f64>()
            + x.iter().zip(&self.b).map(|(a, b)| a * b).sum::<f64>();
        let grad = ax.iter().zip(&self.b).map(|(a, b)| a + b).collect();
        Ok((value, grad))
    }
}

/// Objective backed by a closure returning `(value, gradient)`.
pub struct FnObjective<F> {
    dim: usize,
    groups: Vec<Range<usize>>,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnObjective {
            dim,
            groups: vec![0..dim],
            f,
        }
    }

    pub fn with_groups(mut self, groups: Vec<Range<usize>>) -> Self {
        self.groups = groups;
        self
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn groups(&self) -> Vec<Range<usize>> {
        self.groups.clone()
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        (self.f)(x)
    }
}
