use rand::Rng;

use super::{join_name, xavier_uniform, FeatureMap, Params};
use crate::error::{Error, Result};
use crate::real::{gemm_ld, Real, Trans};

/// Upper bound on im2col buffer size (elements) before the output is processed in row bands.
const COLS_BUDGET: usize = 1 << 22;

/// Hyper-parameters of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding for the given dilation.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (dilation * (kernel - 1) / 2, dilation * (kernel - 1) / 2),
            dilation: (dilation, dilation),
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let dim = |n: usize, k: usize, s: usize, p: usize, d: usize| {
            let span = d * (k - 1) + 1;
            let padded = n + 2 * p;
            (padded >= span).then(|| (padded - span) / s + 1)
        };
        Some((
            dim(
                height,
                self.kernel.0,
                self.stride.0,
                self.padding.0,
                self.dilation.0,
            )?,
            dim(
                width,
                self.kernel.1,
                self.stride.1,
                self.padding.1,
                self.dilation.1,
            )?,
        ))
    }

    /// Output size of the transposed convolution with these hyper-parameters.
    pub fn transposed_output_size(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let dim = |n: usize, k: usize, s: usize, p: usize, d: usize| {
            ((n - 1) * s + d * (k - 1) + 1).checked_sub(2 * p)
        };
        Some((
            dim(
                height,
                self.kernel.0,
                self.stride.0,
                self.padding.0,
                self.dilation.0,
            )?,
            dim(
                width,
                self.kernel.1,
                self.stride.1,
                self.padding.1,
                self.dilation.1,
            )?,
        ))
    }

    fn patch_len(&self, channels: usize) -> usize {
        channels * self.kernel.0 * self.kernel.1
    }
}

/// Pairing of an image with the sliding-window grid laid over it.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub spec: ConvSpec,
}

impl ConvGeometry {
    fn column_span(
        &self,
        offset: isize,
        stride: usize,
        extent: usize,
        out: usize,
    ) -> (usize, usize) {
        // valid output positions o satisfy 0 <= o*stride + offset < extent
        let s = stride as isize;
        let lo = if offset >= 0 {
            0
        } else {
            ((-offset) + s - 1) / s
        };
        let hi = if (extent as isize) <= offset {
            0
        } else {
            ((extent as isize - offset) + s - 1) / s
        };
        (
            lo.min(out as isize) as usize,
            hi.clamp(0, out as isize) as usize,
        )
    }

    /// Unfolds output rows `r0..r1` into a `(C*kh*kw) x ((r1-r0)*out_w)` matrix.
    pub fn im2col<T: Real>(&self, image: &[T], r0: usize, r1: usize, cols: &mut [T]) {
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let (dh, dw) = self.spec.dilation;
        let ow = self.out_width;
        let p = (r1 - r0) * ow;
        debug_assert!(cols.len() >= self.spec.patch_len(self.channels) * p);
        for ci in 0..self.channels {
            let plane = &image[ci * self.height * self.width..(ci + 1) * self.height * self.width];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let x_off = (kj * dw) as isize - pw as isize;
                    let (lo, hi) = self.column_span(x_off, sw, self.width, ow);
                    for oy in r0..r1 {
                        let dst = &mut cols[row * p + (oy - r0) * ow..row * p + (oy - r0 + 1) * ow];
                        let iy = (oy * sh + ki * dh) as isize - ph as isize;
                        if iy < 0 || iy >= self.height as isize || lo >= hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if sw == 1 {
                            let start = (lo as isize + x_off) as usize;
                            dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                                *d = src[(ox as isize * sw as isize + x_off) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back, accumulating into `image`.
    pub fn col2im<T: Real>(&self, cols: &[T], r0: usize, r1: usize, image: &mut [T]) {
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let (dh, dw) = self.spec.dilation;
        let ow = self.out_width;
        let p = (r1 - r0) * ow;
        for ci in 0..self.channels {
            let plane =
                &mut image[ci * self.height * self.width..(ci + 1) * self.height * self.width];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let x_off = (kj * dw) as isize - pw as isize;
                    let (lo, hi) = self.column_span(x_off, sw, self.width, ow);
                    if lo >= hi {
                        continue;
                    }
                    for oy in r0..r1 {
                        let iy = (oy * sh + ki * dh) as isize - ph as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src = &cols[row * p + (oy - r0) * ow..row * p + (oy - r0 + 1) * ow];
                        let dst =
                            &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in lo..hi {
                            dst[(ox as isize * sw as isize + x_off) as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }

    fn band_rows(&self) -> usize {
        let per_row = self.spec.patch_len(self.channels) * self.out_width;
        (COLS_BUDGET / per_row.max(1)).clamp(1, self.out_height.max(1))
    }
}

/// Standard 2D convolution with bias. Weight layout `out x (in*kh*kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(spec: ConvSpec) -> Self {
        Self {
            spec,
            weight: vec![T::zero(); spec.out_channels * spec.patch_len(spec.in_channels)],
            bias: vec![T::zero(); spec.out_channels],
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        let k = spec.kernel.0 * spec.kernel.1;
        let len = spec.out_channels * spec.patch_len(spec.in_channels);
        Self {
            spec,
            weight: xavier_uniform(rng, spec.in_channels * k, spec.out_channels * k, len),
            bias: vec![T::zero(); spec.out_channels],
        }
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<ConvGeometry> {
        let (out_height, out_width) = self.spec.output_size(height, width).ok_or_else(|| {
            Error::invalid(format!(
                "input {height}x{width} smaller than the kernel span"
            ))
        })?;
        Ok(ConvGeometry {
            channels: self.spec.in_channels,
            height,
            width,
            out_height,
            out_width,
            spec: self.spec,
        })
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.channels != self.spec.in_channels {
            return Err(Error::invalid(format!(
                "convolution expects {} input channels, got {}",
                self.spec.in_channels, x.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_input(x)?;
        let g = self.geometry(x.height, x.width)?;
        let (oh, ow) = (g.out_height, g.out_width);
        let k = self.spec.patch_len(x.channels);
        let mut out = FeatureMap::zeros(self.spec.out_channels, oh, ow);
        let band = g.band_rows();
        let mut cols = vec![T::zero(); k * band * ow];
        let mut r0 = 0;
        while r0 < oh {
            let r1 = (r0 + band).min(oh);
            let p = (r1 - r0) * ow;
            g.im2col(&x.data, r0, r1, &mut cols);
            gemm_ld(
                self.spec.out_channels,
                k,
                p,
                (&self.weight, k, Trans::No),
                (&cols, p, Trans::No),
                (&mut out.data[r0 * ow..], oh * ow),
                false,
            );
            r0 = r1;
        }
        for (co, &b) in self.bias.iter().enumerate() {
            out.data[co * oh * ow..(co + 1) * oh * ow]
                .iter_mut()
                .for_each(|v| *v += b);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient
    /// when `want_input` is set.
    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        grad_out: &FeatureMap<T>,
        grads: &mut Conv2d<T>,
        want_input: bool,
    ) -> Result<Option<FeatureMap<T>>> {
        self.check_input(x)?;
        let g = self.geometry(x.height, x.width)?;
        let (oh, ow) = (g.out_height, g.out_width);
        if grad_out.shape() != (self.spec.out_channels, oh, ow) {
            return Err(Error::invalid(
                "convolution output gradient has the wrong shape",
            ));
        }
        let k = self.spec.patch_len(x.channels);
        let cout = self.spec.out_channels;
        for co in 0..cout {
            grads.bias[co] += grad_out.data[co * oh * ow..(co + 1) * oh * ow]
                .iter()
                .copied()
                .sum::<T>();
        }
        let mut grad_in = want_input.then(|| FeatureMap::zeros(x.channels, x.height, x.width));
        let band = g.band_rows();
        let mut cols = vec![T::zero(); k * band * ow];
        let mut r0 = 0;
        while r0 < oh {
            let r1 = (r0 + band).min(oh);
            let p = (r1 - r0) * ow;
            g.im2col(&x.data, r0, r1, &mut cols);
            let dy = &grad_out.data[r0 * ow..];
            gemm_ld(
                cout,
                p,
                k,
                (dy, oh * ow, Trans::No),
                (&cols, p, Trans::Yes),
                (&mut grads.weight, k),
                true,
            );
            if let Some(gi) = grad_in.as_mut() {
                gemm_ld(
                    k,
                    cout,
                    p,
                    (&self.weight, k, Trans::Yes),
                    (dy, oh * ow, Trans::No),
                    (&mut cols, p),
                    false,
                );
                g.col2im(&cols, r0, r1, &mut gi.data);
            }
            r0 = r1;
        }
        Ok(grad_in)
    }
}

impl<T: Real> Params<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        let s = self.spec;
        f(
            &join_name(prefix, "weight"),
            &[s.out_channels, s.in_channels, s.kernel.0, s.kernel.1],
            &self.weight,
        );
        f(&join_name(prefix, "bias"), &[s.out_channels], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let s = self.spec;
        f(
            &join_name(prefix, "weight"),
            &[s.out_channels, s.in_channels, s.kernel.0, s.kernel.1],
            &mut self.weight,
        );
        f(
            &join_name(prefix, "bias"),
            &[s.out_channels],
            &mut self.bias,
        );
    }
}

/// Transposed 2D convolution with bias. Weight layout `in x (out*kh*kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub spec: ConvSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn zeros(spec: ConvSpec) -> Self {
        Self {
            spec,
            weight: vec![T::zero(); spec.in_channels * spec.patch_len(spec.out_channels)],
            bias: vec![T::zero(); spec.out_channels],
        }
    }

    pub fn xavier<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Self {
        let k = spec.kernel.0 * spec.kernel.1;
        let len = spec.in_channels * spec.patch_len(spec.out_channels);
        Self {
            spec,
            weight: xavier_uniform(rng, spec.out_channels * k, spec.in_channels * k, len),
            bias: vec![T::zero(); spec.out_channels],
        }
    }

    fn geometry(&self, x: &FeatureMap<T>) -> Result<ConvGeometry> {
        if x.channels != self.spec.in_channels {
            return Err(Error::invalid(format!(
                "transposed convolution expects {} input channels, got {}",
                self.spec.in_channels, x.channels
            )));
        }
        let (height, width) = self
            .spec
            .transposed_output_size(x.height, x.width)
            .ok_or_else(|| Error::invalid("transposed convolution output would be empty"))?;
        Ok(ConvGeometry {
            channels: self.spec.out_channels,
            height,
            width,
            out_height: x.height,
            out_width: x.width,
            spec: self.spec,
        })
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let g = self.geometry(x)?;
        let k = self.spec.patch_len(self.spec.out_channels);
        let p = x.plane_len();
        let mut cols = vec![T::zero(); k * p];
        gemm_ld(
            k,
            self.spec.in_channels,
            p,
            (&self.weight, k, Trans::Yes),
            (&x.data, p, Trans::No),
            (&mut cols, p),
            false,
        );
        let mut out = FeatureMap::zeros(self.spec.out_channels, g.height, g.width);
        g.col2im(&cols, 0, x.height, &mut out.data);
        let n = out.plane_len();
        for (co, &b) in self.bias.iter().enumerate() {
            out.data[co * n..(co + 1) * n]
                .iter_mut()
                .for_each(|v| *v += b);
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        x: &FeatureMap<T>,
        grad_out: &FeatureMap<T>,
        grads: &mut ConvTranspose2d<T>,
        want_input: bool,
    ) -> Result<Option<FeatureMap<T>>> {
        let g = self.geometry(x)?;
        if grad_out.shape() != (self.spec.out_channels, g.height, g.width) {
            return Err(Error::invalid(
                "transposed convolution output gradient has the wrong shape",
            ));
        }
        let n = grad_out.plane_len();
        for co in 0..self.spec.out_channels {
            grads.bias[co] += grad_out.data[co * n..(co + 1) * n]
                .iter()
                .copied()
                .sum::<T>();
        }
        let k = self.spec.patch_len(self.spec.out_channels);
        let p = x.plane_len();
        let mut cols = vec![T::zero(); k * p];
        g.im2col(&grad_out.data, 0, x.height, &mut cols);
        let cin = self.spec.in_channels;
        gemm_ld(
            cin,
            p,
            k,
            (&x.data, p, Trans::No),
            (&cols, p, Trans::Yes),
            (&mut grads.weight, k),
            true,
        );
        if !want_input {
            return Ok(None);
        }
        let mut gi = FeatureMap::zeros(cin, x.height, x.width);
        gemm_ld(
            cin,
            k,
            p,
            (&self.weight, k, Trans::No),
            (&cols, p, Trans::No),
            (&mut gi.data, p),
            false,
        );
        Ok(Some(gi))
    }
}

impl<T: Real> Params<T> for ConvTranspose2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        let s = self.spec;
        f(
            &join_name(prefix, "weight"),
            &[s.in_channels, s.out_channels, s.kernel.0, s.kernel.1],
            &self.weight,
        );
        f(&join_name(prefix, "bias"), &[s.out_channels], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let s = self.spec;
        f(
            &join_name(prefix, "weight"),
            &[s.in_channels, s.out_channels, s.kernel.0, s.kernel.1],
            &mut self.weight,
        );
        f(
            &join_name(prefix, "bias"),
            &[s.out_channels],
            &mut self.bias,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution.
    fn naive_conv(conv: &Conv2d<f64>, x: &FeatureMap<f64>) -> FeatureMap<f64> {
        let s = conv.spec;
        let (oh, ow) = s.output_size(x.height, x.width).unwrap();
        let mut out = FeatureMap::zeros(s.out_channels, oh, ow);
        for co in 0..s.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[co];
                    for ci in 0..s.in_channels {
                        for ki in 0..s.kernel.0 {
                            for kj in 0..s.kernel.1 {
                                let iy = (oy * s.stride.0 + ki * s.dilation.0) as isize
                                    - s.padding.0 as isize;
                                let ix = (ox * s.stride.1 + kj * s.dilation.1) as isize
                                    - s.padding.1 as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= x.height as isize
                                    || ix >= x.width as isize
                                {
                                    continue;
                                }
                                let w = conv.weight[((co * s.in_channels + ci) * s.kernel.0 + ki)
                                    * s.kernel.1
                                    + kj];
                                acc += w * x.get(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(co, oy, ox, acc);
                }
            }
        }
        out
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_vec(
            c,
            h,
            w,
            (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_matches_naive_for_assorted_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specs = [
            ConvSpec::same(3, 4, 3, 1),
            ConvSpec::same(2, 3, 3, 4),
            ConvSpec {
                in_channels: 5,
                out_channels: 2,
                kernel: (3, 1),
                stride: (2, 1),
                padding: (1, 0),
                dilation: (1, 1),
            },
            ConvSpec {
                in_channels: 2,
                out_channels: 3,
                kernel: (4, 4),
                stride: (2, 2),
                padding: (1, 1),
                dilation: (1, 1),
            },
        ];
        for spec in specs {
            let mut conv = Conv2d::<f64>::xavier(spec, &mut rng);
            conv.bias
                .iter_mut()
                .for_each(|b| *b = rng.gen_range(-1.0..1.0));
            let x = random_map(&mut rng, spec.in_channels, 8, 6);
            let got = conv.forward(&x).unwrap();
            let want = naive_conv(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} for {spec:?}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x) - b, y> == <x, dX(y)>, and dW matches the bilinear form.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ConvSpec::same(3, 2, 3, 2);
        let conv = Conv2d::<f64>::xavier(spec, &mut rng);
        let x = random_map(&mut rng, 3, 7, 5);
        let y = random_map(&mut rng, 2, 7, 5);
        let fx = conv.forward(&x).unwrap();
        let lhs: f64 = fx.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let mut grads = conv.zeros_like();
        let gx = conv.backward(&x, &y, &mut grads, true).unwrap().unwrap();
        let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum::<f64>()
            + conv
                .bias
                .iter()
                .zip(&grads.bias)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10);
        let wdot: f64 = conv
            .weight
            .iter()
            .zip(&grads.weight)
            .map(|(a, b)| a * b)
            .sum();
        let bdot: f64 = conv.bias.iter().zip(&grads.bias).map(|(a, b)| a * b).sum();
        assert!((lhs - wdot - bdot).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv_with_shared_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec {
            in_channels: 3,
            out_channels: 2,
            kernel: (4, 4),
            stride: (2, 2),
            padding: (1, 1),
            dilation: (1, 1),
        };
        // A conv 2->3 and a transposed conv 3->2 share the weight buffer layout.
        let conv_spec = ConvSpec {
            in_channels: 2,
            out_channels: 3,
            ..spec
        };
        let conv = Conv2d::<f64>::xavier(conv_spec, &mut rng);
        let tconv = ConvTranspose2d {
            spec,
            weight: conv.weight.clone(),
            bias: vec![0.0; 2],
        };
        let small = random_map(&mut rng, 3, 4, 4);
        let big = random_map(&mut rng, 2, 8, 8);
        let up = tconv.forward(&small).unwrap();
        assert_eq!(up.shape(), (2, 8, 8));
        let mut conv_nb = conv.clone();
        conv_nb.bias.fill(0.0);
        let down = conv_nb.forward(&big).unwrap();
        let a: f64 = up.data.iter().zip(&big.data).map(|(p, q)| p * q).sum();
        let b: f64 = down.data.iter().zip(&small.data).map(|(p, q)| p * q).sum();
        assert!((a - b).abs() < 1e-10);

        let mut grads = tconv.zeros_like();
        let gi = tconv
            .backward(&small, &big, &mut grads, true)
            .unwrap()
            .unwrap();
        for (p, q) in gi.data.iter().zip(&down.data) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn banded_forward_matches_single_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // large enough that COLS_BUDGET forces several bands
        let spec = ConvSpec::same(64, 2, 3, 1);
        let conv = Conv2d::<f32>::xavier(spec, &mut rng);
        let x = FeatureMap::from_vec(
            64,
            96,
            96,
            (0..64 * 96 * 96)
                .map(|_| rng.gen_range(-1.0f32..1.0))
                .collect(),
        )
        .unwrap();
        let g = conv.geometry(96, 96).unwrap();
        assert!(g.band_rows() < 96);
        let got = conv.forward(&x).unwrap();
        let mut single = vec![0.0f32; 64 * 9 * 96 * 96];
        g.im2col(&x.data, 0, 96, &mut single);
        let mut want = vec![0.0f32; 2 * 96 * 96];
        crate::real::gemm(
            2,
            64 * 9,
            96 * 96,
            &conv.weight,
            Trans::No,
            &single,
            Trans::No,
            &mut want,
            false,
        );
        for (a, b) in got.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
