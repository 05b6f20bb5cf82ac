//! Deferred neural rendering: rasterize to texture coordinates, sample a
//! learnable texture, translate features to RGB, then blend with the eroded
//! background through a second network.

mod raster;
mod texture;
mod unet;

pub use raster::{
    rasterize, rasterize_fragments, uvmap_from_fragments, CameraPose, Fragment, Intrinsics, UVMap,
};
pub use texture::{
    sample_texture, sample_texture_backward, NeuralTexture, TEXTURE_CHANNELS, TEXTURE_SIZE,
};
pub use unet::{
    Layer, UNet, UNetConfig, UNetTrace, UNetVariant, FULL_BASE_WIDTH, LEVELS,
    PARAM_COUNT_TOLERANCE, REFERENCE_PARAM_COUNT, RGB_CHANNELS, UNET_LEAKY_SLOPE,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{rendering_loss_with_grad, PerceptualLoss, RenderingLossTerms};
use crate::nn::{join_name, FeatureMap, Params};
use crate::real::Real;

/// Default output resolution and the erosion radius used at that resolution.
pub const DEFAULT_RESOLUTION: usize = 512;
pub const DEFAULT_EROSION_RADIUS: usize = 8;

/// Erosion radius scaled linearly from the default at 512 pixels.
pub fn erosion_radius_for(resolution: usize) -> usize {
    (DEFAULT_EROSION_RADIUS * resolution + DEFAULT_RESOLUTION / 2) / DEFAULT_RESOLUTION
}

/// Chebyshev dilation of a row-major mask.
pub fn dilate_mask(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let mut rows = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(width - 1));
                rows[y * width + x0..=y * width + x1].fill(true);
            }
        }
    }
    let mut out = vec![false; mask.len()];
    for x in 0..width {
        for y in 0..height {
            if rows[y * width + x] {
                let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(height - 1));
                for yy in y0..=y1 {
                    out[yy * width + x] = true;
                }
            }
        }
    }
    out
}

/// Blanks every pixel within `radius` (Chebyshev) of a covered pixel.
pub fn erode_background<T: Real>(
    frame: &FeatureMap<T>,
    coverage: &[bool],
    radius: usize,
) -> Result<FeatureMap<T>> {
    if coverage.len() != frame.plane_len() {
        return Err(Error::invalid(format!(
            "coverage has {} pixels, frame has {}",
            coverage.len(),
            frame.plane_len()
        )));
    }
    let blank = dilate_mask(coverage, frame.width, frame.height, radius);
    let mut out = frame.clone();
    let n = frame.plane_len();
    for c in 0..frame.channels {
        for (p, &b) in blank.iter().enumerate() {
            if b {
                out.data[c * n + p] = T::zero();
            }
        }
    }
    Ok(out)
}

/// Interior image from sampled texture features.
pub fn interior_forward<T: Real>(features: &FeatureMap<T>, net: &UNet<T>) -> Result<FeatureMap<T>> {
    net.forward(features)
}

/// Final image from the interior image and the eroded background.
pub fn composite_forward<T: Real>(
    interior: &FeatureMap<T>,
    eroded_background: &FeatureMap<T>,
    net: &UNet<T>,
) -> Result<FeatureMap<T>> {
    net.forward(&composite_input(interior, eroded_background)?)
}

fn composite_input<T: Real>(
    interior: &FeatureMap<T>,
    background: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    if interior.channels != RGB_CHANNELS || background.channels != RGB_CHANNELS {
        return Err(Error::invalid("compositing needs two RGB images"));
    }
    if (interior.height, interior.width) != (background.height, background.width) {
        return Err(Error::invalid(format!(
            "interior is {}x{} but background is {}x{}",
            interior.height, interior.width, background.height, background.width
        )));
    }
    interior.concat_channels(background)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendererConfig {
    pub variant: UNetVariant,
    pub base_width: usize,
    pub texture_size: usize,
    pub texture_channels: usize,
    /// Texture values are initialized uniformly in `[-scale, scale]`.
    pub texture_init_scale: f64,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            variant: UNetVariant::Dilated,
            base_width: FULL_BASE_WIDTH,
            texture_size: TEXTURE_SIZE,
            texture_channels: TEXTURE_CHANNELS,
            texture_init_scale: 1.0,
        }
    }
}

impl RendererConfig {
    pub fn interior_config(&self) -> UNetConfig {
        UNetConfig {
            variant: self.variant,
            in_channels: self.texture_channels,
            base_width: self.base_width,
        }
    }

    pub fn composite_config(&self) -> UNetConfig {
        UNetConfig {
            variant: self.variant,
            in_channels: 2 * RGB_CHANNELS,
            base_width: self.base_width,
        }
    }
}

/// Neural texture plus interior and compositing networks, trained jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct DeferredRenderer<T> {
    pub texture: NeuralTexture<T>,
    pub interior: UNet<T>,
    pub composite: UNet<T>,
}

#[derive(Debug, Clone)]
pub struct RenderOutput<T> {
    pub interior: FeatureMap<T>,
    pub final_image: FeatureMap<T>,
}

impl<T: Real> DeferredRenderer<T> {
    pub fn new<R: Rng + ?Sized>(config: &RendererConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            texture: NeuralTexture::random(
                config.texture_size,
                config.texture_channels,
                config.texture_init_scale,
                rng,
            )?,
            interior: UNet::xavier(config.interior_config(), rng)?,
            composite: UNet::xavier(config.composite_config(), rng)?,
        })
    }

    pub fn zeros(config: &RendererConfig) -> Result<Self> {
        Ok(Self {
            texture: NeuralTexture::zeros(config.texture_size, config.texture_channels)?,
            interior: UNet::zeros(config.interior_config())?,
            composite: UNet::zeros(config.composite_config())?,
        })
    }

    pub fn config(&self) -> RendererConfig {
        let ic = self.interior.config();
        RendererConfig {
            variant: ic.variant,
            base_width: ic.base_width,
            texture_size: self.texture.size(),
            texture_channels: self.texture.channels(),
            texture_init_scale: 0.0,
        }
    }

    pub fn render(
        &self,
        uvmap: &UVMap,
        eroded_background: &FeatureMap<T>,
    ) -> Result<RenderOutput<T>> {
        let features = sample_texture(&self.texture, uvmap);
        let interior = interior_forward(&features, &self.interior)?;
        let final_image = composite_forward(&interior, eroded_background, &self.composite)?;
        Ok(RenderOutput {
            interior,
            final_image,
        })
    }

    /// Rendering loss of one frame and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        uvmap: &UVMap,
        eroded_background: &FeatureMap<T>,
        reference: &FeatureMap<T>,
        interior_mask: &[bool],
        perceptual: &dyn PerceptualLoss<T>,
    ) -> Result<(RenderingLossTerms<T>, Self)> {
        let mut grads = self.zeros_like();
        let terms = self.accumulate_grad(
            uvmap,
            eroded_background,
            reference,
            interior_mask,
            perceptual,
            &mut grads,
        )?;
        Ok((terms, grads))
    }

    /// As [`Self::loss_and_grad`] but adds into an existing gradient.
    pub fn accumulate_grad(
        &self,
        uvmap: &UVMap,
        eroded_background: &FeatureMap<T>,
        reference: &FeatureMap<T>,
        interior_mask: &[bool],
        perceptual: &dyn PerceptualLoss<T>,
        grads: &mut Self,
    ) -> Result<RenderingLossTerms<T>> {
        let features = sample_texture(&self.texture, uvmap);
        let it = self.interior.forward_trace(&features)?;
        let comp_in = composite_input(it.output(), eroded_background)?;
        let ct = self.composite.forward_trace(&comp_in)?;
        let (terms, g_final, mut g_inter) = rendering_loss_with_grad(
            ct.output(),
            it.output(),
            reference,
            interior_mask,
            perceptual,
        )?;
        let g_comp_in = self
            .composite
            .backward(&ct, &g_final, &mut grads.composite, true)?
            .expect("input gradient requested");
        let (g_from_comp, _) = g_comp_in.split_channels(RGB_CHANNELS);
        g_inter
            .data
            .iter_mut()
            .zip(&g_from_comp.data)
            .for_each(|(a, b)| *a += *b);
        let g_features = self
            .interior
            .backward(&it, &g_inter, &mut grads.interior, true)?
            .expect("input gradient requested");
        sample_texture_backward(&self.texture, uvmap, &g_features, &mut grads.texture)?;
        Ok(terms)
    }
}

impl<T: Real> Params<T> for DeferredRenderer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &'a [T])) {
        self.texture.visit(&join_name(prefix, "texture"), f);
        self.interior.visit(&join_name(prefix, "interior"), f);
        self.composite.visit(&join_name(prefix, "composite"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.texture.visit_mut(&join_name(prefix, "texture"), f);
        self.interior.visit_mut(&join_name(prefix, "interior"), f);
        self.composite.visit_mut(&join_name(prefix, "composite"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{GradientPyramid, NoPerceptual};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rgb(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> FeatureMap<f64> {
        let mut m = FeatureMap::zeros(3, h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    m.set(c, y, x, f(c, y, x));
                }
            }
        }
        m
    }

    #[test]
    fn erosion_radius_zero_blanks_covered_pixels() {
        let frame = rgb(4, 5, |c, y, x| 1.0 + (c + y + x) as f64);
        let cov: Vec<bool> = (0..20).map(|p| p % 7 == 3).collect();
        let out = erode_background(&frame, &cov, 0).unwrap();
        for c in 0..3 {
            for p in 0..20 {
                let expect = if cov[p] { 0.0 } else { frame.data[c * 20 + p] };
                assert_eq!(out.data[c * 20 + p], expect);
            }
        }
    }

    #[test]
    fn erosion_with_empty_coverage_is_identity() {
        let frame = rgb(6, 6, |c, y, x| (c * y + x) as f64);
        assert_eq!(erode_background(&frame, &[false; 36], 3).unwrap(), frame);
    }

    #[test]
    fn erosion_single_pixel_radius_two_is_five_by_five() {
        let frame = rgb(9, 9, |_, _, _| 1.0);
        let mut cov = vec![false; 81];
        cov[4 * 9 + 4] = true;
        let out = erode_background(&frame, &cov, 2).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let inside = (y as i64 - 4).abs().max((x as i64 - 4).abs()) <= 2;
                assert_eq!(out.get(1, y, x), if inside { 0.0 } else { 1.0 });
            }
        }
        let mut corner = vec![false; 81];
        corner[0] = true;
        let out = erode_background(&frame, &corner, 2).unwrap();
        assert_eq!(out.data[..81].iter().filter(|&&v| v == 0.0).count(), 9);
    }

    #[test]
    fn erosion_radius_scales_with_resolution() {
        assert_eq!(erosion_radius_for(512), 8);
        assert_eq!(erosion_radius_for(64), 1);
        assert_eq!(erosion_radius_for(256), 4);
    }

    #[test]
    fn dilated_unet_full_width_parameter_count() {
        let net = UNet::<f32>::zeros(UNetConfig::dilated(16)).unwrap();
        let n = net.param_count();
        // 3x3 weights per layer plus biases, widths 32,64,128,256,256
        let weights = 9
            * (16 * 32
                + 32 * 64
                + 64 * 128
                + 128 * 256
                + 256 * 256
                + 256 * 256
                + 512 * 128
                + 256 * 64
                + 128 * 32
                + 64 * 3);
        let biases = 32 + 64 + 128 + 256 + 256 + 256 + 128 + 64 + 32 + 3;
        assert_eq!(n, weights + biases);
        let r = REFERENCE_PARAM_COUNT as f64;
        assert!((n as f64 - r).abs() <= PARAM_COUNT_TOLERANCE * r);
        let comp = UNet::<f32>::zeros(UNetConfig::dilated(6)).unwrap();
        assert_eq!(n - comp.param_count(), 9 * 10 * 32);
    }

    #[test]
    fn zero_networks_produce_zero_images() {
        let cfg = RendererConfig {
            base_width: 2,
            texture_size: 8,
            ..RendererConfig::default()
        };
        let r = DeferredRenderer::<f64>::zeros(&cfg).unwrap();
        let features = FeatureMap::from_vec(16, 8, 8, vec![0.7; 16 * 64]).unwrap();
        assert!(interior_forward(&features, &r.interior)
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));
        let img = rgb(8, 8, |_, _, _| 0.3);
        assert!(composite_forward(&img, &img, &r.composite)
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn dilated_layers_preserve_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (base, size) in [(FULL_BASE_WIDTH, 64), (2, 512)] {
            let net = UNet::<f32>::xavier(
                UNetConfig {
                    base_width: base,
                    ..UNetConfig::dilated(16)
                },
                &mut rng,
            )
            .unwrap();
            let x = FeatureMap::from_vec(16, size, size, vec![0.1; 16 * size * size]).unwrap();
            let trace = net.forward_trace(&x).unwrap();
            for (_, h, w) in trace.layer_shapes() {
                assert_eq!((h, w), (size, size));
            }
            assert_eq!(trace.output().shape(), (3, size, size));
        }
    }

    #[test]
    fn channel_and_resolution_mismatches_are_errors() {
        let net = UNet::<f64>::zeros(UNetConfig {
            base_width: 2,
            ..UNetConfig::dilated(16)
        })
        .unwrap();
        let x = FeatureMap::zeros(15, 8, 8);
        assert!(interior_forward(&x, &net).is_err());
        let comp = UNet::<f64>::zeros(UNetConfig {
            base_width: 2,
            ..UNetConfig::dilated(6)
        })
        .unwrap();
        assert!(
            composite_forward(&rgb(8, 8, |_, _, _| 0.0), &rgb(8, 6, |_, _, _| 0.0), &comp).is_err()
        );
        let strided = UNet::<f64>::zeros(UNetConfig {
            variant: UNetVariant::Strided,
            in_channels: 6,
            base_width: 2,
        })
        .unwrap();
        assert!(strided.forward(&FeatureMap::zeros(6, 48, 48)).is_err());
        assert_eq!(
            strided
                .forward(&FeatureMap::zeros(6, 64, 32))
                .unwrap()
                .shape(),
            (3, 64, 32)
        );
    }

    fn toy_renderer(variant: UNetVariant, seed: u64) -> DeferredRenderer<f64> {
        let cfg = RendererConfig {
            variant,
            base_width: 1,
            texture_size: 4,
            texture_channels: 2,
            texture_init_scale: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = DeferredRenderer::new(&cfg, &mut rng).unwrap();
        // Nonzero biases keep activations off the leaky-ReLU kink on blank regions.
        r.visit_mut("", &mut |_, _, d| {
            use rand::Rng;
            d.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        });
        r
    }

    fn toy_uvmap(size: usize, seed: u64) -> UVMap {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = UVMap::empty(size, size);
        for p in 0..size * size {
            m.covered[p] = rng.gen_bool(0.7);
            if m.covered[p] {
                m.uv[p] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            }
        }
        m
    }

    fn relative_gradient_error(
        r: &DeferredRenderer<f64>,
        uv: &UVMap,
        bg: &FeatureMap<f64>,
        reference: &FeatureMap<f64>,
        perceptual: &dyn PerceptualLoss<f64>,
    ) -> f64 {
        let mask = uv.covered.clone();
        let (_, grads) = r
            .loss_and_grad(uv, bg, reference, &mask, perceptual)
            .unwrap();
        let analytic = grads.flatten();
        let base = r.flatten();
        let h = 1e-6;
        let mut probe = r.clone();
        let mut loss_at = |p: &[f64]| {
            probe.assign_flat(p);
            let out = probe.render(uv, bg).unwrap();
            crate::losses::rendering_loss(
                &out.final_image,
                &out.interior,
                reference,
                &mask,
                perceptual,
            )
            .unwrap()
            .total
        };
        let (mut err, mut norm) = (0.0, 0.0);
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            let lp = loss_at(&p);
            p[i] -= 2.0 * h;
            let num = (lp - loss_at(&p)) / (2.0 * h);
            err += (num - analytic[i]).powi(2);
            norm += analytic[i].powi(2);
        }
        (err / norm).sqrt()
    }

    #[test]
    fn rendering_gradient_matches_finite_differences() {
        let uv = toy_uvmap(6, 1);
        let bg = erode_background(
            &rgb(6, 6, |c, y, x| ((c + y + 2 * x) % 5) as f64 / 5.0),
            &uv.covered,
            0,
        )
        .unwrap();
        let reference = rgb(6, 6, |c, y, x| ((3 * c + y * x) % 7) as f64 / 7.0 + 0.013);
        let r = toy_renderer(UNetVariant::Dilated, 2);
        let e = relative_gradient_error(&r, &uv, &bg, &reference, &NoPerceptual);
        assert!(e < 1e-3, "relative error {e}");
        let e = relative_gradient_error(&r, &uv, &bg, &reference, &GradientPyramid { levels: 2 });
        assert!(e < 1e-3, "relative error {e}");
    }

    #[test]
    fn strided_rendering_gradient_matches_finite_differences() {
        let uv = toy_uvmap(32, 3);
        let bg = erode_background(
            &rgb(32, 32, |c, y, x| ((c + y + 2 * x) % 5) as f64 / 5.0),
            &uv.covered,
            0,
        )
        .unwrap();
        let reference = rgb(32, 32, |c, y, x| ((3 * c + y * x) % 7) as f64 / 7.0 + 0.013);
        let r = toy_renderer(UNetVariant::Strided, 4);
        let e = relative_gradient_error(&r, &uv, &bg, &reference, &NoPerceptual);
        assert!(e < 1e-3, "relative error {e}");
    }
}
