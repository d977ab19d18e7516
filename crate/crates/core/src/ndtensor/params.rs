use indexmap::IndexMap;

use super::{numel, Result, TensorError};
use crate::real::Real;

/// One named trainable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<R> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
    pub grad: Option<Vec<R>>,
}

impl<R: Real> Param<R> {
    /// Gradient buffer, created zeroed on first use.
    pub fn grad_mut(&mut self) -> &mut [R] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![R::zero(); n])
    }
}

/// Ordered store of named parameters. Insertion order is the canonical
/// parameter order everywhere: optimizer walks, checkpoints, reports.
#[derive(Debug, Clone, Default)]
pub struct Params<R> {
    entries: IndexMap<String, Param<R>>,
}

impl<R: Real> Params<R> {
    pub fn new() -> Self {
        Params {
            entries: IndexMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<R>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        if data.len() != numel(shape) {
            return Err(TensorError::DataShape {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "register" });
        }
        self.entries.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                data,
                grad: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<R>> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<R>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<R>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<R>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Drop all gradient buffers (start of a fresh step).
    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Zero the gradient of selected rows of a rank-2 parameter; used to
    /// freeze e.g. a padding embedding row.
    pub fn zero_grad_rows(&mut self, name: &str, rows: &[usize]) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "zero_grad_rows",
                expected: 2,
                shape: p.shape.clone(),
            });
        }
        let (n, d) = (p.shape[0], p.shape[1]);
        if let Some(g) = p.grad.as_mut() {
            for &r in rows {
                if r >= n {
                    return Err(TensorError::IndexOutOfRange {
                        op: "zero_grad_rows",
                        index: r,
                        len: n,
                    });
                }
                for v in &mut g[r * d..(r + 1) * d] {
                    *v = R::zero();
                }
            }
        }
        Ok(())
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.data.len())
            .sum()
    }

    /// Largest absolute gradient component across the store, for divergence
    /// and health reporting. Absent buffers count as zero.
    pub fn max_abs_grad(&self) -> f64 {
        let mut m = 0.0f64;
        for p in self.entries.values() {
            if let Some(g) = &p.grad {
                for &v in g {
                    let a = v.to_f64().abs();
                    if a > m {
                        m = a;
                    }
                }
            }
        }
        m
    }

    /// Convert every value to another precision, dropping gradients.
    pub fn cast<T: Real>(&self) -> Params<T> {
        let mut out = Params::new();
        for (name, p) in &self.entries {
            out.entries.insert(
                name.clone(),
                Param {
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
                    grad: None,
                },
            );
        }
        out
    }
}
