//! Training objectives: weighted vertex RMS, the temporal difference term,
//! the combined expression loss and the compound rendering loss.
//!
//! Vertex arrays are flat `3V` slices (x, y, z per vertex) in millimetres.

use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::real::Real;

/// Weight of mouth-region vertices relative to the rest of the face.
pub const MOUTH_WEIGHT: f64 = 10.0;
/// Weight of the temporal term in the expression loss.
pub const DEFAULT_TEMPORAL_WEIGHT: f64 = 20.0;

/// Per-vertex loss weights, normalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexWeights {
    w: Vec<f64>,
}

impl VertexWeights {
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
            return Err(Error::invalid(
                "vertex weights must be finite and non-negative",
            ));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::invalid("vertex weights must not all be zero"));
        }
        Ok(Self {
            w: raw.into_iter().map(|x| x / sum).collect(),
        })
    }

    pub fn uniform(vertex_count: usize) -> Result<Self> {
        Self::new(vec![1.0; vertex_count])
    }

    /// Mouth vertices weigh [`MOUTH_WEIGHT`], all others 1.
    pub fn from_mouth_mask(mask: &[bool]) -> Result<Self> {
        Self::new(
            mask.iter()
                .map(|&m| if m { MOUTH_WEIGHT } else { 1.0 })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn cast<T: Real>(&self) -> Vec<T> {
        self.w.iter().map(|&x| T::lit(x)).collect()
    }
}

fn check_vertices<T>(a: &[T], b: &[T], weights: &[T]) -> Result<()> {
    if a.len() != b.len() || a.len() != 3 * weights.len() {
        return Err(Error::invalid(format!(
            "vertex arrays of length {} and {} do not match {} weights",
            a.len(),
            b.len(),
            weights.len()
        )));
    }
    Ok(())
}

/// `sqrt(sum_i w_i ||d_i||^2 / sum_i w_i)` for a flat displacement `d`.
fn rms_of<T: Real>(d: &[T], weights: &[T]) -> T {
    let wsum: T = weights.iter().copied().sum();
    let acc: T = d
        .chunks_exact(3)
        .zip(weights)
        .map(|(p, &w)| w * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]))
        .sum();
    (acc / wsum).sqrt()
}

/// Adds `scale * d rms(d) / d d` into `grad`; the subgradient at zero is zero.
fn rms_backward<T: Real>(d: &[T], weights: &[T], rms: T, scale: T, grad: &mut [T]) {
    if rms <= T::zero() {
        return;
    }
    let wsum: T = weights.iter().copied().sum();
    let k = scale / (wsum * rms);
    for ((g, p), &w) in grad.chunks_exact_mut(3).zip(d.chunks_exact(3)).zip(weights) {
        for a in 0..3 {
            g[a] += k * w * p[a];
        }
    }
}

fn diff<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// Weighted RMS vertex distance in millimetres.
pub fn weighted_rms<T: Real>(v: &[T], v_ref: &[T], weights: &[T]) -> Result<T> {
    check_vertices(v, v_ref, weights)?;
    Ok(rms_of(&diff(v, v_ref), weights))
}

/// Predicted and reference vertices at frames `t-1`, `t`, `t+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTriplet<T> {
    pub predicted: [Vec<T>; 3],
    pub reference: [Vec<T>; 3],
}

impl<T: Real> FrameTriplet<T> {
    fn check(&self, weights: &[T]) -> Result<()> {
        for i in 0..3 {
            check_vertices(&self.predicted[i], &self.reference[i], weights)?;
        }
        Ok(())
    }

    /// Per-frame errors `e_f = v_f - v*_f`.
    fn errors(&self) -> [Vec<T>; 3] {
        std::array::from_fn(|i| diff(&self.predicted[i], &self.reference[i]))
    }
}

/// Forward, backward and central difference terms on the per-frame errors,
/// since `(v_a - v_b) - (v*_a - v*_b) = e_a - e_b`.
const TEMPORAL_PAIRS: [(usize, usize); 3] = [(1, 0), (2, 1), (2, 0)];

/// Sum of the three weighted RMS terms on consecutive-frame displacement errors.
pub fn temporal_loss<T: Real>(triplet: &FrameTriplet<T>, weights: &[T]) -> Result<T> {
    triplet.check(weights)?;
    let e = triplet.errors();
    Ok(TEMPORAL_PAIRS
        .iter()
        .map(|&(a, b)| rms_of(&diff(&e[a], &e[b]), weights))
        .sum())
}

/// Value and per-frame gradients of an expression loss evaluation.
#[derive(Debug, Clone)]
pub struct ExpressionLossEval<T> {
    pub loss: T,
    pub position: T,
    pub temporal: T,
    /// `dL/dv` for frames `t-1`, `t`, `t+1`.
    pub grad: [Vec<T>; 3],
}

/// `RMS(v_t - v*_t) + lambda * temporal_loss`.
pub fn expression_loss<T: Real>(triplet: &FrameTriplet<T>, weights: &[T], lambda: T) -> Result<T> {
    Ok(expression_loss_with_grad(triplet, weights, lambda)?.loss)
}

pub fn expression_loss_with_grad<T: Real>(
    triplet: &FrameTriplet<T>,
    weights: &[T],
    lambda: T,
) -> Result<ExpressionLossEval<T>> {
    triplet.check(weights)?;
    let e = triplet.errors();
    let n = e[1].len();
    let mut grad: [Vec<T>; 3] = std::array::from_fn(|_| vec![T::zero(); n]);
    let position = rms_of(&e[1], weights);
    rms_backward(&e[1], weights, position, T::one(), &mut grad[1]);
    let mut temporal = T::zero();
    for &(a, b) in &TEMPORAL_PAIRS {
        let d = diff(&e[a], &e[b]);
        let r = rms_of(&d, weights);
        temporal += r;
        let mut gd = vec![T::zero(); n];
        rms_backward(&d, weights, r, lambda, &mut gd);
        for i in 0..n {
            grad[a][i] += gd[i];
            grad[b][i] -= gd[i];
        }
    }
    Ok(ExpressionLossEval {
        loss: position + lambda * temporal,
        position,
        temporal,
        grad,
    })
}

/// Feature distance used as the perceptual term of the rendering loss.
pub trait PerceptualLoss<T: Real>: Send + Sync {
    fn distance(&self, a: &FeatureMap<T>, b: &FeatureMap<T>) -> T;
    /// `d distance / d a`.
    fn gradient(&self, a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T>;
}

/// Disables the perceptual term.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPerceptual;

impl<T: Real> PerceptualLoss<T> for NoPerceptual {
    fn distance(&self, _a: &FeatureMap<T>, _b: &FeatureMap<T>) -> T {
        T::zero()
    }

    fn gradient(&self, a: &FeatureMap<T>, _b: &FeatureMap<T>) -> FeatureMap<T> {
        FeatureMap::zeros(a.channels, a.height, a.width)
    }
}

/// Mean absolute difference of horizontal and vertical image gradients over
/// an average-pooled pyramid.
#[derive(Debug, Clone, Copy)]
pub struct GradientPyramid {
    pub levels: usize,
}

impl Default for GradientPyramid {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

fn avg_pool2<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    let q = T::lit(0.25);
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                let s = x.get(c, 2 * y, 2 * xx)
                    + x.get(c, 2 * y + 1, 2 * xx)
                    + x.get(c, 2 * y, 2 * xx + 1)
                    + x.get(c, 2 * y + 1, 2 * xx + 1);
                out.set(c, y, xx, s * q);
            }
        }
    }
    out
}

fn avg_pool2_backward<T: Real>(g: &FeatureMap<T>, h: usize, w: usize) -> FeatureMap<T> {
    let mut out = FeatureMap::zeros(g.channels, h, w);
    let q = T::lit(0.25);
    for c in 0..g.channels {
        for y in 0..g.height {
            for x in 0..g.width {
                let v = g.get(c, y, x) * q;
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    out.set(c, 2 * y + dy, 2 * x + dx, v);
                }
            }
        }
    }
    out
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl GradientPyramid {
    fn pyramid<T: Real>(&self, x: &FeatureMap<T>) -> Vec<FeatureMap<T>> {
        let mut out = vec![x.clone()];
        for _ in 1..self.levels {
            let last = out.last().unwrap();
            if last.height < 4 || last.width < 4 {
                break;
            }
            out.push(avg_pool2(last));
        }
        out
    }

    /// Distance at one level, optionally accumulating `d/da` into `grad`.
    fn level<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>, grad: Option<&mut FeatureMap<T>>) -> T {
        let (c, h, w) = a.shape();
        let nx = (c * h * w.saturating_sub(1)).max(1);
        let ny = (c * h.saturating_sub(1) * w).max(1);
        let (sx, sy) = (T::one() / T::lit(nx as f64), T::one() / T::lit(ny as f64));
        let mut total = T::zero();
        let mut grad = grad;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if x + 1 < w {
                        let d = (a.get(ch, y, x + 1) - a.get(ch, y, x))
                            - (b.get(ch, y, x + 1) - b.get(ch, y, x));
                        total += d.abs() * sx;
                        if let Some(g) = grad.as_deref_mut() {
                            let s = sign(d) * sx;
                            g.set(ch, y, x + 1, g.get(ch, y, x + 1) + s);
                            g.set(ch, y, x, g.get(ch, y, x) - s);
                        }
                    }
                    if y + 1 < h {
                        let d = (a.get(ch, y + 1, x) - a.get(ch, y, x))
                            - (b.get(ch, y + 1, x) - b.get(ch, y, x));
                        total += d.abs() * sy;
                        if let Some(g) = grad.as_deref_mut() {
                            let s = sign(d) * sy;
                            g.set(ch, y + 1, x, g.get(ch, y + 1, x) + s);
                            g.set(ch, y, x, g.get(ch, y, x) - s);
                        }
                    }
                }
            }
        }
        total
    }
}

impl<T: Real> PerceptualLoss<T> for GradientPyramid {
    fn distance(&self, a: &FeatureMap<T>, b: &FeatureMap<T>) -> T {
        self.pyramid(a)
            .iter()
            .zip(self.pyramid(b).iter())
            .map(|(pa, pb)| Self::level(pa, pb, None))
            .sum()
    }

    fn gradient(&self, a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
        let pa = self.pyramid(a);
        let pb = self.pyramid(b);
        let mut carried: Option<FeatureMap<T>> = None;
        for lvl in (0..pa.len()).rev() {
            let mut g = match carried.take() {
                Some(up) => up,
                None => FeatureMap::zeros(pa[lvl].channels, pa[lvl].height, pa[lvl].width),
            };
            Self::level(&pa[lvl], &pb[lvl], Some(&mut g));
            if lvl > 0 {
                carried = Some(avg_pool2_backward(
                    &g,
                    pa[lvl - 1].height,
                    pa[lvl - 1].width,
                ));
            } else {
                carried = Some(g);
            }
        }
        carried.expect("at least one level")
    }
}

/// Individual terms of the rendering loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderingLossTerms<T> {
    pub total: T,
    pub final_l1: T,
    pub interior_l1: T,
    pub perceptual: T,
    /// The interior mask was empty, so the masked term contributed zero.
    pub empty_mask: bool,
}

fn check_images<T: Real>(imgs: &[&FeatureMap<T>], mask: &[bool]) -> Result<()> {
    let (_, h, w) = imgs[0].shape();
    for img in imgs {
        if img.channels != 3 || img.height != h || img.width != w {
            return Err(Error::invalid(format!(
                "rendering loss needs 3-channel {h}x{w} images, got {:?}",
                img.shape()
            )));
        }
    }
    if mask.len() != h * w {
        return Err(Error::invalid(format!(
            "interior mask has {} pixels, images have {}",
            mask.len(),
            h * w
        )));
    }
    Ok(())
}

/// Value of `l1(I, I*) + masked l1(I_hat, I*) + perceptual(I, I*)` together
/// with its gradients with respect to `final` and `intermediate`.
pub fn rendering_loss_with_grad<T: Real>(
    final_image: &FeatureMap<T>,
    intermediate: &FeatureMap<T>,
    reference: &FeatureMap<T>,
    interior_mask: &[bool],
    perceptual: &dyn PerceptualLoss<T>,
) -> Result<(RenderingLossTerms<T>, FeatureMap<T>, FeatureMap<T>)> {
    check_images(&[final_image, intermediate, reference], interior_mask)?;
    let (c, h, w) = final_image.shape();
    let plane = h * w;
    let n_all = T::lit((c * plane) as f64);
    let mut grad_final = perceptual.gradient(final_image, reference);
    let mut final_l1 = T::zero();
    for (i, (&a, &b)) in final_image.data.iter().zip(&reference.data).enumerate() {
        let d = a - b;
        final_l1 += d.abs();
        grad_final.data[i] += sign(d) / n_all;
    }
    final_l1 /= n_all;

    let covered = interior_mask.iter().filter(|&&m| m).count();
    let mut grad_inter = FeatureMap::zeros(c, h, w);
    let mut interior_l1 = T::zero();
    if covered > 0 {
        let n_in = T::lit((c * covered) as f64);
        for ch in 0..c {
            for (p, &m) in interior_mask.iter().enumerate() {
                if !m {
                    continue;
                }
                let i = ch * plane + p;
                let d = intermediate.data[i] - reference.data[i];
                interior_l1 += d.abs();
                grad_inter.data[i] = sign(d) / n_in;
            }
        }
        interior_l1 /= n_in;
    }
    let perceptual_term = perceptual.distance(final_image, reference);
    Ok((
        RenderingLossTerms {
            total: final_l1 + interior_l1 + perceptual_term,
            final_l1,
            interior_l1,
            perceptual: perceptual_term,
            empty_mask: covered == 0,
        },
        grad_final,
        grad_inter,
    ))
}

pub fn rendering_loss<T: Real>(
    final_image: &FeatureMap<T>,
    intermediate: &FeatureMap<T>,
    reference: &FeatureMap<T>,
    interior_mask: &[bool],
    perceptual: &dyn PerceptualLoss<T>,
) -> Result<RenderingLossTerms<T>> {
    Ok(rendering_loss_with_grad(
        final_image,
        intermediate,
        reference,
        interior_mask,
        perceptual,
    )?
    .0)
}
