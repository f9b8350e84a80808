//! Named parameter traversal, shared by parameter counting and weight bundles.

use crate::error::{Error, Result};
use crate::tensor::{BatchNormSpec, ConvSpec, Scalar};

/// Whether a tensor is a learned parameter or a running-statistics buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

pub type Visitor<'f, T> = dyn FnMut(&str, &[usize], &[T], ParamKind) + 'f;
pub type VisitorMut<'f, T> = dyn FnMut(&str, &[usize], &mut [T]) -> Result<()> + 'f;

/// Anything made of named tensors, visited in a stable order.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) -> Result<()>;

    /// Element count of learned parameters (buffers excluded).
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, data, kind| {
            if kind == ParamKind::Weight {
                n += data.len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Parameters<T> for ConvSpec<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        let w = self.weights();
        f(&join(prefix, "weight"), &w.shape(), w.data(), ParamKind::Weight);
        if let Some(b) = self.bias() {
            f(&join(prefix, "bias"), &[b.len()], b, ParamKind::Weight);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) -> Result<()> {
        let shape = self.weights().shape();
        f(&join(prefix, "weight"), &shape, self.weights_mut().data_mut())?;
        if let Some(b) = self.bias_mut() {
            f(&join(prefix, "bias"), &[b.len()], b)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for BatchNormSpec<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        let n = [self.channels()];
        f(&join(prefix, "gamma"), &n, &self.gamma, ParamKind::Weight);
        f(&join(prefix, "beta"), &n, &self.beta, ParamKind::Weight);
        f(&join(prefix, "running_mean"), &n, &self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &n, &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) -> Result<()> {
        let n = [self.channels()];
        f(&join(prefix, "gamma"), &n, &mut self.gamma)?;
        f(&join(prefix, "beta"), &n, &mut self.beta)?;
        f(&join(prefix, "running_mean"), &n, &mut self.running_mean)?;
        f(&join(prefix, "running_var"), &n, &mut self.running_var)?;
        self.validate()
    }
}

/// Overwrite every parameter of `target` from `source`, which must contain
/// exactly the same names and shapes.
pub fn load_from<T, P, F>(target: &mut P, mut source: F) -> Result<()>
where
    T: Scalar,
    P: Parameters<T> + ?Sized,
    F: FnMut(&str, &[usize]) -> Result<Vec<T>>,
{
    target.visit_mut("", &mut |name, dims, data| {
        let values = source(name, dims)?;
        if values.len() != data.len() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has {} values, expected {}",
                values.len(),
                data.len()
            )));
        }
        data.copy_from_slice(&values);
        Ok(())
    })
}
