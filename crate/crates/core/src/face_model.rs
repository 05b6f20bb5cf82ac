//! Linear blendshape face model, the shared audio-expression code and the
//! person-specific map from codes to generic expression coefficients.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::real::{gemm, Trans};

/// Number of shape parameters of the statistical model.
pub const SHAPE_DIM: usize = 100;
/// Number of generic expression blendshapes.
pub const EXPR_DIM: usize = 76;
/// Dimension of the audio-expression space.
pub const CODE_DIM: usize = 32;

const BASIS_MAGIC: &[u8; 4] = b"PFBS";
const TOPOLOGY_MAGIC: &[u8; 4] = b"PTOP";
const FORMAT_VERSION: u32 = 1;

/// Mean face plus shape and expression displacement bases, in millimetres.
///
/// Bases are stored as `(3V) x S` and `(3V) x E` row-major matrices, i.e. the
/// `V x 3 x S` tensor flattened with the coefficient index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceBasis {
    vertex_count: usize,
    shape_dim: usize,
    expr_dim: usize,
    mean: Vec<f64>,
    shape_basis: Vec<f64>,
    expression_basis: Vec<f64>,
    mouth_mask: Vec<bool>,
}

impl FaceBasis {
    pub fn new(
        mean: Vec<f64>,
        shape_basis: Vec<f64>,
        expression_basis: Vec<f64>,
        mouth_mask: Vec<bool>,
    ) -> Result<Self> {
        if mean.is_empty() || !mean.len().is_multiple_of(3) {
            return Err(Error::invalid(
                "mean must hold V >= 1 vertices of 3 coordinates",
            ));
        }
        let rows = mean.len();
        let v = rows / 3;
        if !shape_basis.len().is_multiple_of(rows) || !expression_basis.len().is_multiple_of(rows) {
            return Err(Error::invalid(
                "basis tensors are not a whole number of columns over the mean",
            ));
        }
        if mouth_mask.len() != v {
            return Err(Error::invalid(format!(
                "mouth mask has {} flags for {v} vertices",
                mouth_mask.len()
            )));
        }
        if mean
            .iter()
            .chain(&shape_basis)
            .chain(&expression_basis)
            .any(|x| !x.is_finite())
        {
            return Err(Error::invalid("face basis contains non-finite values"));
        }
        Ok(Self {
            vertex_count: v,
            shape_dim: shape_basis.len() / rows,
            expr_dim: expression_basis.len() / rows,
            mean,
            shape_basis,
            expression_basis,
            mouth_mask,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_dim
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn shape_basis(&self) -> &[f64] {
        &self.shape_basis
    }

    pub fn expression_basis(&self) -> &[f64] {
        &self.expression_basis
    }

    pub fn mouth_mask(&self) -> &[bool] {
        &self.mouth_mask
    }

    /// Column `k` of the expression basis as per-vertex displacements.
    pub fn expression_column(&self, k: usize) -> Vec<f64> {
        (0..3 * self.vertex_count)
            .map(|r| self.expression_basis[r * self.expr_dim + k])
            .collect()
    }

    /// Flat `3V` displacement `E · delta` without the mean and identity terms.
    pub fn expression_offsets(&self, delta: &[f64]) -> Result<Vec<f64>> {
        if delta.len() != self.expr_dim {
            return Err(Error::invalid(format!(
                "expected {} expression coefficients, got {}",
                self.expr_dim,
                delta.len()
            )));
        }
        let mut out = vec![0.0; 3 * self.vertex_count];
        gemm(
            3 * self.vertex_count,
            self.expr_dim,
            1,
            &self.expression_basis,
            Trans::No,
            delta,
            Trans::No,
            &mut out,
            false,
        );
        Ok(out)
    }

    /// Flat `3V` neutral geometry `mean + S · alpha`.
    pub fn identity_vertices(&self, alpha: &ShapeCoefficients) -> Result<Vec<f64>> {
        if alpha.0.len() != self.shape_dim {
            return Err(Error::invalid(format!(
                "expected {} shape coefficients, got {}",
                self.shape_dim,
                alpha.0.len()
            )));
        }
        let mut out = self.mean.clone();
        gemm(
            3 * self.vertex_count,
            self.shape_dim,
            1,
            &self.shape_basis,
            Trans::No,
            &alpha.0,
            Trans::No,
            &mut out,
            true,
        );
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BASIS_MAGIC);
        for v in [
            FORMAT_VERSION,
            self.vertex_count as u32,
            self.shape_dim as u32,
            self.expr_dim as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for x in self
            .mean
            .iter()
            .chain(&self.shape_basis)
            .chain(&self.expression_basis)
        {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        out.extend(self.mouth_mask.iter().map(|&m| m as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, BASIS_MAGIC, "face basis")?;
        let v = r.u32()? as usize;
        let s = r.u32()? as usize;
        let e = r.u32()? as usize;
        if v == 0 {
            return Err(Error::format(None, "face basis declares zero vertices"));
        }
        let mean = r.f32s(3 * v)?;
        let shape = r.f32s(3 * v * s)?;
        let expr = r.f32s(3 * v * e)?;
        let mask = r.bytes(v)?.iter().map(|&b| b != 0).collect();
        r.finish()?;
        FaceBasis::new(mean, shape, expr, mask).map_err(|e| Error::format(None, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Mesh connectivity and texture coordinates shared by every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTopology {
    pub triangles: Vec<[u32; 3]>,
    pub uvs: Vec<[f32; 2]>,
}

impl FaceTopology {
    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        if self.uvs.len() != vertex_count {
            return Err(Error::invalid(format!(
                "{} uv coordinates for {vertex_count} vertices",
                self.uvs.len()
            )));
        }
        if let Some(t) = self
            .triangles
            .iter()
            .position(|t| t.iter().any(|&i| i as usize >= vertex_count))
        {
            return Err(Error::invalid(format!(
                "triangle {t} references a missing vertex"
            )));
        }
        if self.uvs.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("uv coordinates must lie in [0,1]"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TOPOLOGY_MAGIC);
        for v in [
            FORMAT_VERSION,
            self.uvs.len() as u32,
            self.triangles.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for uv in &self.uvs {
            out.extend_from_slice(&uv[0].to_le_bytes());
            out.extend_from_slice(&uv[1].to_le_bytes());
        }
        for t in &self.triangles {
            for i in t {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, TOPOLOGY_MAGIC, "topology")?;
        let v = r.u32()? as usize;
        let t = r.u32()? as usize;
        let flat = r.f32s(2 * v)?;
        let uvs = flat
            .chunks_exact(2)
            .map(|c| [c[0] as f32, c[1] as f32])
            .collect();
        let mut triangles = Vec::with_capacity(t);
        for _ in 0..t {
            triangles.push([r.u32()?, r.u32()?, r.u32()?]);
        }
        r.finish()?;
        let topo = Self { triangles, uvs };
        topo.validate(v)
            .map_err(|e| Error::format(None, e.to_string()))?;
        Ok(topo)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 4], what: &str) -> Result<Self> {
        if !bytes.starts_with(magic) {
            return Err(Error::format(None, format!("not a {what} file")));
        }
        let mut r = Self { bytes, at: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                None,
                format!("unsupported {what} version {version}"),
            ));
        }
        Ok(r)
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(None, "truncated file"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .bytes(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::format(None, "trailing bytes after payload"));
        }
        Ok(())
    }
}

/// Identity coefficients shared by all frames of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCoefficients(pub Vec<f64>);

/// Generic blendshape weights for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionCoefficients(pub Vec<f64>);

impl ExpressionCoefficients {
    pub fn zeros() -> Self {
        Self(vec![0.0; EXPR_DIM])
    }

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != EXPR_DIM {
            return Err(Error::invalid(format!(
                "expression coefficients need {EXPR_DIM} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("expression coefficients are not finite"));
        }
        Ok(Self(values))
    }
}

/// A point of the shared audio-expression space; each component lies in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudioExpressionCode(pub [f64; CODE_DIM]);

impl AudioExpressionCode {
    pub fn zeros() -> Self {
        Self([0.0; CODE_DIM])
    }

    pub fn new(values: &[f64]) -> Result<Self> {
        let arr: [f64; CODE_DIM] = values.try_into().map_err(|_| {
            Error::invalid(format!(
                "audio-expression code needs {CODE_DIM} values, got {}",
                values.len()
            ))
        })?;
        if arr
            .iter()
            .any(|v| !(v.is_finite() && (-1.0..=1.0).contains(v)))
        {
            return Err(Error::invalid(
                "audio-expression code components must lie in [-1, 1]",
            ));
        }
        Ok(Self(arr))
    }

    pub fn unit(k: usize) -> Self {
        let mut z = Self::zeros();
        z.0[k] = 1.0;
        z
    }
}

/// Person-specific `76 x 32` map from audio-expression codes to blendshape weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonMapping {
    /// Row-major `EXPR_DIM x CODE_DIM`.
    pub matrix: Vec<f64>,
}

impl PersonMapping {
    pub fn zeros() -> Self {
        Self {
            matrix: vec![0.0; EXPR_DIM * CODE_DIM],
        }
    }

    pub fn new(matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != EXPR_DIM * CODE_DIM {
            return Err(Error::invalid(format!(
                "person mapping needs {EXPR_DIM}x{CODE_DIM} entries, got {}",
                matrix.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("person mapping is not finite"));
        }
        Ok(Self { matrix })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * CODE_DIM + col]
    }
}

/// `mean + S·alpha + E·delta` as per-vertex positions in millimetres.
pub fn reconstruct_vertices(
    basis: &FaceBasis,
    alpha: &ShapeCoefficients,
    delta: &ExpressionCoefficients,
) -> Result<Vec<[f64; 3]>> {
    let mut flat = basis.identity_vertices(alpha)?;
    let offsets = basis.expression_offsets(&delta.0)?;
    for (v, o) in flat.iter_mut().zip(&offsets) {
        *v += o;
    }
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// `delta = M · z`.
pub fn map_audio_expression(
    code: &AudioExpressionCode,
    mapping: &PersonMapping,
) -> ExpressionCoefficients {
    let mut out = vec![0.0; EXPR_DIM];
    gemm(
        EXPR_DIM,
        CODE_DIM,
        1,
        &mapping.matrix,
        Trans::No,
        &code.0,
        Trans::No,
        &mut out,
        false,
    );
    ExpressionCoefficients(out)
}

/// Outcome of a least-squares mapping fit.
#[derive(Debug, Clone)]
pub struct MappingFit {
    pub mapping: PersonMapping,
    /// Numerical rank of the stacked code matrix.
    pub rank: usize,
    /// Set when the unregularized system is rank deficient and the
    /// minimum-norm solution was returned.
    pub rank_deficient: bool,
    /// `sum_i ||M z_i - delta_i||^2` at the solution.
    pub residual: f64,
}

/// Solves `min_M sum_i ||M z_i - delta_i||^2 + ridge ||M||_F^2`.
///
/// `codes` is `N x 32` and `deltas` is `N x 76`, both row-major. The solve
/// goes through an SVD of the code matrix, so rank-deficient systems with
/// `ridge == 0` yield the minimum-Frobenius-norm solution.
pub fn fit_person_mapping(codes: &[f64], deltas: &[f64], ridge: f64) -> Result<MappingFit> {
    if codes.is_empty() || !codes.len().is_multiple_of(CODE_DIM) {
        return Err(Error::invalid("codes must be a non-empty N x 32 matrix"));
    }
    let n = codes.len() / CODE_DIM;
    if deltas.len() != n * EXPR_DIM {
        return Err(Error::invalid(format!(
            "expected {n} x {EXPR_DIM} expression targets, got {} values",
            deltas.len()
        )));
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::invalid("ridge must be a non-negative finite number"));
    }
    let z = DMatrix::from_row_slice(n, CODE_DIM, codes);
    let d = DMatrix::from_row_slice(n, EXPR_DIM, deltas);
    let svd = z.clone().svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors");
    let v_t = svd.v_t.as_ref().expect("right singular vectors");
    let sigma = &svd.singular_values;
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let tol = n.max(CODE_DIM) as f64 * f64::EPSILON * sigma_max;
    let rank = sigma.iter().filter(|&&s| s > tol).count();

    // X = V diag(s / (s^2 + ridge)) U^T D, with X = M^T (32 x 76)
    let ut_d = u.transpose() * &d;
    let mut scaled = ut_d;
    for (i, &s) in sigma.iter().enumerate() {
        let f = if ridge > 0.0 {
            s / (s * s + ridge)
        } else if s > tol {
            1.0 / s
        } else {
            0.0
        };
        scaled.row_mut(i).scale_mut(f);
    }
    let x = v_t.transpose() * scaled;
    let mut matrix = vec![0.0; EXPR_DIM * CODE_DIM];
    for r in 0..EXPR_DIM {
        for c in 0..CODE_DIM {
            matrix[r * CODE_DIM + c] = x[(c, r)];
        }
    }
    let residual = (&z * &x - &d).norm_squared();
    Ok(MappingFit {
        mapping: PersonMapping::new(matrix)?,
        rank,
        rank_deficient: ridge == 0.0 && rank < CODE_DIM,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_basis(rng: &mut ChaCha8Rng, v: usize, s: usize, e: usize) -> FaceBasis {
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>();
        let mean = draw(3 * v);
        let shape = draw(3 * v * s);
        let expr = draw(3 * v * e);
        FaceBasis::new(mean, shape, expr, vec![false; v]).unwrap()
    }

    #[test]
    fn zero_coefficients_give_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_basis(&mut rng, 5, 2, 3);
        let v = reconstruct_vertices(
            &b,
            &ShapeCoefficients(vec![0.0; 2]),
            &ExpressionCoefficients(vec![0.0; 3]),
        )
        .unwrap();
        let flat: Vec<f64> = v.iter().flatten().copied().collect();
        assert_eq!(flat, b.mean());
    }

    #[test]
    fn unit_expression_adds_one_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_basis(&mut rng, 5, 2, 3);
        let v = reconstruct_vertices(
            &b,
            &ShapeCoefficients(vec![0.0; 2]),
            &ExpressionCoefficients(vec![0.0, 1.0, 0.0]),
        )
        .unwrap();
        let col = b.expression_column(1);
        for (i, p) in v.iter().flatten().enumerate() {
            assert!((p - (b.mean()[i] + col[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (nv, ns, ne) = (5, 2, 3);
        let b = random_basis(&mut rng, nv, ns, ne);
        let alpha: Vec<f64> = (0..ns).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let delta: Vec<f64> = (0..ne).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = reconstruct_vertices(
            &b,
            &ShapeCoefficients(alpha.clone()),
            &ExpressionCoefficients(delta.clone()),
        )
        .unwrap();
        for vi in 0..nv {
            for axis in 0..3 {
                let row = vi * 3 + axis;
                let mut want = b.mean()[row];
                for (k, a) in alpha.iter().enumerate() {
                    want += b.shape_basis()[row * ns + k] * a;
                }
                for (k, d) in delta.iter().enumerate() {
                    want += b.expression_basis()[row * ne + k] * d;
                }
                assert!((got[vi][axis] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_invalid_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_basis(&mut rng, 5, 2, 3);
        let r = reconstruct_vertices(
            &b,
            &ShapeCoefficients(vec![0.0; 3]),
            &ExpressionCoefficients(vec![0.0; 3]),
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
        assert!(FaceBasis::new(vec![0.0; 6], vec![0.0; 5], vec![], vec![false; 2]).is_err());
    }

    #[test]
    fn zero_code_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = PersonMapping::new((0..EXPR_DIM * CODE_DIM).map(|_| rng.gen()).collect()).unwrap();
        let d = map_audio_expression(&AudioExpressionCode::zeros(), &m);
        assert!(d.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_block_passes_codes_through() {
        let mut m = PersonMapping::zeros();
        for i in 0..CODE_DIM {
            m.matrix[i * CODE_DIM + i] = 1.0;
        }
        let d = map_audio_expression(&AudioExpressionCode::unit(3), &m);
        for (i, &x) in d.0.iter().enumerate() {
            assert_eq!(x, if i == 3 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn mapping_matches_dot_product_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = PersonMapping::new(
            (0..EXPR_DIM * CODE_DIM)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let z: Vec<f64> = (0..CODE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = map_audio_expression(&AudioExpressionCode::new(&z).unwrap(), &m);
        for r in 0..EXPR_DIM {
            let want: f64 = (0..CODE_DIM).map(|c| m.get(r, c) * z[c]).sum();
            assert!((d.0[r] - want).abs() < 1e-12);
        }
    }

    fn generate(rng: &mut ChaCha8Rng, n: usize) -> (PersonMapping, Vec<f64>, Vec<f64>) {
        let m = PersonMapping::new(
            (0..EXPR_DIM * CODE_DIM)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();
        let mut codes = Vec::new();
        let mut deltas = Vec::new();
        for _ in 0..n {
            let z: Vec<f64> = (0..CODE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d = map_audio_expression(&AudioExpressionCode::new(&z).unwrap(), &m);
            codes.extend(z);
            deltas.extend(d.0);
        }
        (m, codes, deltas)
    }

    #[test]
    fn recovers_generator_from_consistent_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, codes, deltas) = generate(&mut rng, 64);
        let fit = fit_person_mapping(&codes, &deltas, 0.0).unwrap();
        assert_eq!(fit.rank, CODE_DIM);
        assert!(!fit.rank_deficient);
        let err = m
            .matrix
            .iter()
            .zip(&fit.mapping.matrix)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-8, "max error {err}");
    }

    #[test]
    fn single_equation_gives_minimum_norm_solution() {
        let mut codes = vec![0.0; CODE_DIM];
        codes[1] = 1.0;
        let d: Vec<f64> = (0..EXPR_DIM).map(|i| i as f64 * 0.1 - 3.0).collect();
        let fit = fit_person_mapping(&codes, &d, 0.0).unwrap();
        assert!(fit.rank_deficient);
        assert_eq!(fit.rank, 1);
        for r in 0..EXPR_DIM {
            for c in 0..CODE_DIM {
                let want = if c == 1 { d[r] } else { 0.0 };
                assert!((fit.mapping.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noisy_fit_is_no_worse_than_the_generator() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, codes, mut deltas) = generate(&mut rng, 100);
        deltas
            .iter_mut()
            .for_each(|d| *d += rng.gen_range(-0.1..0.1));
        let fit = fit_person_mapping(&codes, &deltas, 0.0).unwrap();
        let residual_of = |mapping: &PersonMapping| -> f64 {
            codes
                .chunks_exact(CODE_DIM)
                .zip(deltas.chunks_exact(EXPR_DIM))
                .map(|(z, d)| {
                    let p = map_audio_expression(&AudioExpressionCode::new(z).unwrap(), mapping);
                    p.0.iter().zip(d).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum()
        };
        assert!(residual_of(&fit.mapping) <= residual_of(&m) + 1e-9);
        assert!((fit.residual - residual_of(&fit.mapping)).abs() < 1e-8);
    }

    #[test]
    fn ridge_shrinks_and_zero_targets_give_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, codes, deltas) = generate(&mut rng, 40);
        let plain = fit_person_mapping(&codes, &deltas, 0.0).unwrap();
        let ridged = fit_person_mapping(&codes, &deltas, 10.0).unwrap();
        let norm = |m: &PersonMapping| m.matrix.iter().map(|x| x * x).sum::<f64>();
        assert!(norm(&ridged.mapping) < norm(&plain.mapping));
        let zeros = vec![0.0; deltas.len()];
        for ridge in [0.0, 1.0] {
            let fit = fit_person_mapping(&codes, &zeros, ridge).unwrap();
            assert!(fit.mapping.matrix.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn basis_and_topology_files_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut b = random_basis(&mut rng, 4, 2, 3);
        // f32 storage: use exactly representable values
        b = FaceBasis::from_bytes(&b.to_bytes()).unwrap();
        let b2 = FaceBasis::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(b, b2);
        let topo = FaceTopology {
            triangles: vec![[0, 1, 2], [1, 3, 2]],
            uvs: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
        };
        assert_eq!(FaceTopology::from_bytes(&topo.to_bytes()).unwrap(), topo);
        let bad = FaceTopology {
            triangles: vec![[0, 1, 9]],
            ..topo
        };
        assert!(bad.validate(4).is_err());
    }

    proptest! {
        #[test]
        fn mapping_is_linear(seed in 0u64..1000, a in -0.5f64..0.5, b in -0.5f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = PersonMapping::new((0..EXPR_DIM * CODE_DIM).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let z1: Vec<f64> = (0..CODE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z2: Vec<f64> = (0..CODE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| a * x + b * y).collect();
            let f = |z: &[f64]| map_audio_expression(&AudioExpressionCode::new(z).unwrap(), &m).0;
            let lhs = f(&mix);
            let (f1, f2) = (f(&z1), f(&z2));
            for i in 0..EXPR_DIM {
                let rhs = a * f1[i] + b * f2[i];
                prop_assert!((lhs[i] - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
            }
        }

        #[test]
        fn reconstruction_is_affine_in_expression(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let basis = random_basis(&mut rng, 6, 2, 4);
            let alpha = ShapeCoefficients((0..2).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let d1: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d2: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
            let base = basis.identity_vertices(&alpha).unwrap();
            let rec = |d: &[f64]| -> Vec<f64> {
                reconstruct_vertices(&basis, &alpha, &ExpressionCoefficients(d.to_vec()))
                    .unwrap().iter().flatten().zip(&base).map(|(v, m)| v - m).collect()
            };
            let (r1, r2, rm) = (rec(&d1), rec(&d2), rec(&mix));
            for i in 0..rm.len() {
                prop_assert!((rm[i] - (a * r1[i] + b * r2[i])).abs() < 1e-9);
            }
        }
    }
}
