use rand::Rng;

use super::raster::UVMap;
use crate::error::{Error, Result};
use crate::nn::{FeatureMap, Params};
use crate::real::Real;

pub const TEXTURE_SIZE: usize = 256;
pub const TEXTURE_CHANNELS: usize = 16;

/// Learnable square feature texture, stored channel-major (`C x S x S`).
///
/// Texel `(i, j)` has its centre at `u = (i + 0.5) / S`, `v = (j + 0.5) / S`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralTexture<T> {
    size: usize,
    channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> NeuralTexture<T> {
    /// Zero texture of arbitrary shape; the renderer default is
    /// [`TEXTURE_SIZE`]x[`TEXTURE_SIZE`]x[`TEXTURE_CHANNELS`].
    pub fn zeros(size: usize, channels: usize) -> Result<Self> {
        if size == 0 || channels == 0 {
            return Err(Error::invalid(
                "neural texture needs a positive size and channel count",
            ));
        }
        Ok(Self {
            size,
            channels,
            data: vec![T::zero(); channels * size * size],
        })
    }

    pub fn standard() -> Self {
        Self::zeros(TEXTURE_SIZE, TEXTURE_CHANNELS).expect("static shape")
    }

    /// Uniform values in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(
        size: usize,
        channels: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut t = Self::zeros(size, channels)?;
        for v in &mut t.data {
            *v = T::lit(rng.gen_range(-scale..=scale));
        }
        Ok(t)
    }

    pub fn from_vec(size: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != size * size * channels || size == 0 || channels == 0 {
            return Err(Error::invalid(
                "neural texture data does not match its shape",
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("neural texture values must be finite"));
        }
        Ok(Self {
            size,
            channels,
            data,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn texel(&self, c: usize, j: usize, i: usize) -> T {
        self.data[(c * self.size + j) * self.size + i]
    }

    /// The four texel indices and weights contributing at `(u, v)` (clamp-to-edge).
    fn taps(&self, u: f32, v: f32) -> [(usize, T); 4] {
        let s = self.size as f64;
        let x = u as f64 * s - 0.5;
        let y = v as f64 * s - 0.5;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let clamp = |k: f64| k.max(0.0).min(s - 1.0) as usize;
        let (i0, i1) = (clamp(x0), clamp(x0 + 1.0));
        let (j0, j1) = (clamp(y0), clamp(y0 + 1.0));
        let n = self.size;
        [
            (j0 * n + i0, T::lit((1.0 - fx) * (1.0 - fy))),
            (j0 * n + i1, T::lit(fx * (1.0 - fy))),
            (j1 * n + i0, T::lit((1.0 - fx) * fy)),
            (j1 * n + i1, T::lit(fx * fy)),
        ]
    }
}

impl<T: Real> Params<T> for NeuralTexture<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        f(prefix, &[self.channels, self.size, self.size], &self.data);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        f(
            prefix,
            &[self.channels, self.size, self.size],
            &mut self.data,
        );
    }
}

/// Bilinear texture lookup per covered pixel; uncovered pixels get zero features.
pub fn sample_texture<T: Real>(texture: &NeuralTexture<T>, uvmap: &UVMap) -> FeatureMap<T> {
    let (h, w) = (uvmap.height, uvmap.width);
    let plane = h * w;
    let tplane = texture.size * texture.size;
    let mut out = FeatureMap::zeros(texture.channels, h, w);
    for p in 0..plane {
        if !uvmap.covered[p] {
            continue;
        }
        let taps = texture.taps(uvmap.uv[p][0], uvmap.uv[p][1]);
        for c in 0..texture.channels {
            let base = &texture.data[c * tplane..(c + 1) * tplane];
            out.data[c * plane + p] = taps.iter().map(|&(k, wt)| wt * base[k]).sum();
        }
    }
    out
}

/// Accumulates `d loss / d texture` given `d loss / d features`.
pub fn sample_texture_backward<T: Real>(
    texture: &NeuralTexture<T>,
    uvmap: &UVMap,
    grad_features: &FeatureMap<T>,
    grad_texture: &mut NeuralTexture<T>,
) -> Result<()> {
    if grad_features.shape() != (texture.channels, uvmap.height, uvmap.width)
        || grad_texture.size != texture.size
        || grad_texture.channels != texture.channels
    {
        return Err(Error::invalid("texture gradient shapes do not match"));
    }
    let plane = uvmap.height * uvmap.width;
    let tplane = texture.size * texture.size;
    for p in 0..plane {
        if !uvmap.covered[p] {
            continue;
        }
        let taps = texture.taps(uvmap.uv[p][0], uvmap.uv[p][1]);
        for c in 0..texture.channels {
            let g = grad_features.data[c * plane + p];
            let base = &mut grad_texture.data[c * tplane..(c + 1) * tplane];
            for &(k, wt) in &taps {
                base[k] += wt * g;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_pixel(u: f32, v: f32) -> UVMap {
        let mut m = UVMap::empty(1, 1);
        m.uv[0] = [u, v];
        m.covered[0] = true;
        m
    }

    fn small_texture(seed: u64) -> NeuralTexture<f64> {
        NeuralTexture::random(4, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn texel_centre_returns_texel() {
        let t = small_texture(0);
        let f = sample_texture(&t, &single_pixel(2.5 / 4.0, 1.5 / 4.0));
        for c in 0..3 {
            assert!((f.data[c] - t.texel(c, 1, 2)).abs() < 1e-6);
        }
    }

    #[test]
    fn horizontal_midpoint_is_average() {
        let t = small_texture(1);
        let f = sample_texture(&t, &single_pixel(2.0 / 4.0, 0.5 / 4.0));
        for c in 0..3 {
            let avg = 0.5 * (t.texel(c, 0, 1) + t.texel(c, 0, 2));
            assert!((f.data[c] - avg).abs() < 1e-6);
        }
    }

    /// Independent bilinear: tent-weighted sum over every texel centre.
    /// Exact away from the border, where no tent mass leaves the grid.
    fn brute_bilinear(t: &NeuralTexture<f64>, c: usize, u: f64, v: f64) -> f64 {
        let s = t.size() as f64;
        let (x, y) = (u * s - 0.5, v * s - 0.5);
        let mut acc = 0.0;
        for j in 0..t.size() {
            for i in 0..t.size() {
                let wx = (1.0 - (x - i as f64).abs()).max(0.0);
                let wy = (1.0 - (y - j as f64).abs()).max(0.0);
                acc += wx * wy * t.texel(c, j, i);
            }
        }
        acc
    }

    #[test]
    fn interior_random_uv_matches_brute_force() {
        let t = small_texture(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            use rand::Rng;
            let (u, v) = (
                rng.gen_range(0.125..0.875f32),
                rng.gen_range(0.125..0.875f32),
            );
            let f = sample_texture(&t, &single_pixel(u, v));
            for c in 0..3 {
                let e = brute_bilinear(&t, c, u as f64, v as f64);
                assert!((f.data[c] - e).abs() < 1e-6, "{u},{v}");
            }
        }
    }

    #[test]
    fn clamp_to_edge_at_corners() {
        let t = small_texture(4);
        let f = sample_texture(&t, &single_pixel(0.0, 0.0));
        let g = sample_texture(&t, &single_pixel(1.0, 1.0));
        for c in 0..3 {
            assert!((f.data[c] - t.texel(c, 0, 0)).abs() < 1e-12);
            assert!((g.data[c] - t.texel(c, 3, 3)).abs() < 1e-12);
        }
    }

    #[test]
    fn uncovered_pixels_are_zero() {
        let t = small_texture(5);
        let mut m = single_pixel(0.3, 0.3);
        m.covered[0] = false;
        assert!(sample_texture(&t, &m).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_is_linear_in_the_texture() {
        let a = small_texture(6);
        let b = small_texture(7);
        let mut combo = a.clone();
        for (x, y) in combo.data.iter_mut().zip(&b.data) {
            *x = 2.0 * *x - 0.5 * y;
        }
        let mut m = UVMap::empty(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in 0..6 {
            use rand::Rng;
            m.uv[p] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            m.covered[p] = p != 4;
        }
        let (fa, fb, fc) = (
            sample_texture(&a, &m),
            sample_texture(&b, &m),
            sample_texture(&combo, &m),
        );
        for i in 0..fc.data.len() {
            assert!((fc.data[i] - (2.0 * fa.data[i] - 0.5 * fb.data[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_sampling() {
        let t = small_texture(9);
        let mut m = UVMap::empty(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        use rand::Rng;
        for p in 0..16 {
            m.uv[p] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            m.covered[p] = p % 5 != 0;
        }
        let f = sample_texture(&t, &m);
        let g = FeatureMap::from_vec(3, 4, 4, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let mut gt = t.zeros_like();
        sample_texture_backward(&t, &m, &g, &mut gt).unwrap();
        let lhs: f64 = f.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = t.data.iter().zip(&gt.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn standard_texture_shape() {
        let t = NeuralTexture::<f32>::standard();
        assert_eq!(
            (t.size(), t.channels(), t.param_count()),
            (256, 16, 256 * 256 * 16)
        );
        assert!(NeuralTexture::<f32>::from_vec(2, 1, vec![0.0, f32::NAN, 0.0, 0.0]).is_err());
    }
}
