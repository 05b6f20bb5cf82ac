use rand::Rng;

use super::{join_name, xavier_uniform, Params};
use crate::error::{Error, Result};
use crate::real::{gemm, Real, Trans};

/// Affine layer `y = W x + b`, weight stored row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn xavier<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            in_features,
            out_features,
            weight: xavier_uniform(rng, in_features, out_features, in_features * out_features),
            bias: vec![T::zero(); out_features],
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_features {
            return Err(Error::invalid(format!(
                "linear layer expects {} inputs, got {}",
                self.in_features,
                x.len()
            )));
        }
        let mut y = self.bias.clone();
        gemm(
            self.out_features,
            self.in_features,
            1,
            &self.weight,
            Trans::No,
            x,
            Trans::No,
            &mut y,
            true,
        );
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &[T], grad_out: &[T], grads: &mut Linear<T>) -> Vec<T> {
        debug_assert_eq!(grad_out.len(), self.out_features);
        for (o, &g) in grad_out.iter().enumerate() {
            grads.bias[o] += g;
            let row = &mut grads.weight[o * self.in_features..(o + 1) * self.in_features];
            for (w, &xi) in row.iter_mut().zip(x) {
                *w += g * xi;
            }
        }
        let mut dx = vec![T::zero(); self.in_features];
        gemm(
            self.in_features,
            self.out_features,
            1,
            &self.weight,
            Trans::Yes,
            grad_out,
            Trans::No,
            &mut dx,
            false,
        );
        dx
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        f(
            &join_name(prefix, "weight"),
            &[self.out_features, self.in_features],
            &self.weight,
        );
        f(&join_name(prefix, "bias"), &[self.out_features], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        f(
            &join_name(prefix, "weight"),
            &[self.out_features, self.in_features],
            &mut self.weight,
        );
        f(
            &join_name(prefix, "bias"),
            &[self.out_features],
            &mut self.bias,
        );
    }
}
