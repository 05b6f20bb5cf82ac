//! Minimal neural-network toolkit: CHW feature maps, convolution and affine
//! layers with hand-written backward passes, Xavier initialization and Adam.

mod adam;
mod conv;
mod linear;

pub use adam::{Adam, AdamSettings, AdamState};
pub use conv::{Conv2d, ConvGeometry, ConvSpec, ConvTranspose2d};
pub use linear::Linear;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

/// Dense channel-major (CHW) feature map for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Stacks `self` and `other` along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::invalid(format!(
                "cannot concatenate {}x{} with {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Inverse of [`concat_channels`](Self::concat_channels): splits after `first` channels.
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        assert!(first <= self.channels);
        let cut = first * self.plane_len();
        (
            Self {
                channels: first,
                height: self.height,
                width: self.width,
                data: self.data[..cut].to_vec(),
            },
            Self {
                channels: self.channels - first,
                height: self.height,
                width: self.width,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}

/// Leaky ReLU applied in place.
pub fn leaky_relu_inplace<T: Real>(x: &mut [T], slope: T) {
    for v in x {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Backward of leaky ReLU given the activation *output* (its sign matches the input).
pub fn leaky_relu_backward<T: Real>(grad: &mut [T], output: &[T], slope: T) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y < T::zero() {
            *g *= slope;
        }
    }
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A collection of named parameter tensors, visited in a fixed order.
///
/// Gradients use the same type as the parameters they belong to, so the
/// optimizer and checkpoint code pair tensors purely by visiting order.
pub trait Params<T: Real>: Clone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    fn fill_zero(&mut self) {
        self.visit_mut("", &mut |_, _, d| d.fill(T::zero()));
    }

    /// Flattened copy of every tensor in visiting order.
    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// Overwrites every tensor from a flat buffer in visiting order.
    fn assign_flat(&mut self, flat: &[T]) {
        let mut at = 0;
        self.visit_mut("", &mut |_, _, d| {
            d.copy_from_slice(&flat[at..at + d.len()]);
            at += d.len();
        });
        assert_eq!(at, flat.len(), "flat parameter length mismatch");
    }

    /// `self += alpha * other`.
    fn add_scaled(&mut self, alpha: T, other: &Self) {
        let src = other.flatten();
        let mut at = 0;
        self.visit_mut("", &mut |_, _, d| {
            for v in d.iter_mut() {
                *v += alpha * src[at];
                at += 1;
            }
        });
    }

    fn scale(&mut self, alpha: T) {
        self.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|v| *v *= alpha));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Xavier/Glorot uniform initialization.
pub fn xavier_uniform<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    len: usize,
) -> Vec<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len)
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect()
}
