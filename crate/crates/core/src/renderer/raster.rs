//! Software rasterization of a posed mesh into per-pixel texture coordinates.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square-pixel intrinsics centred on a `size`x`size` image with the given focal length.
    pub fn centered(size: usize, focal: f64) -> Self {
        let c = size as f64 / 2.0;
        Self {
            fx: focal,
            fy: focal,
            cx: c,
            cy: c,
        }
    }
}

/// World-to-camera rigid transform plus intrinsics.
///
/// Camera frame: x right, y down, z forward. A point `p` maps to
/// `R p + t` and then to pixel `(fx X/Z + cx, fy Y/Z + cy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn new(
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
        intrinsics: Intrinsics,
    ) -> Result<Self> {
        let r = &rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if !dot.is_finite() || (dot - expect).abs() > 1e-6 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("camera rotation must have determinant +1"));
        }
        let i = intrinsics;
        if ![i.fx, i.fy, i.cx, i.cy].iter().all(|v| v.is_finite()) || i.fx <= 0.0 || i.fy <= 0.0 {
            return Err(Error::invalid(
                "camera intrinsics must be finite with positive focal lengths",
            ));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
            intrinsics,
        })
    }

    /// Rotation `Ry(yaw) * Rx(pitch)`.
    pub fn from_yaw_pitch(
        yaw: f64,
        pitch: f64,
        translation: [f64; 3],
        intrinsics: Intrinsics,
    ) -> Result<Self> {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| ry[i][k] * rx[k][j]).sum();
            }
        }
        Self::new(r, translation, intrinsics)
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| {
            r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i]
        })
    }

    /// Rotates a direction into the camera frame.
    pub fn rotate(&self, d: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| r[i][0] * d[0] + r[i][1] * d[1] + r[i][2] * d[2])
    }

    /// Pixel coordinates and depth, or `None` behind the near plane.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        let c = self.to_camera(p);
        if c[2] <= NEAR_PLANE {
            return None;
        }
        let i = &self.intrinsics;
        Some([i.fx * c[0] / c[2] + i.cx, i.fy * c[1] / c[2] + i.cy, c[2]])
    }
}

const NEAR_PLANE: f64 = 1e-6;
const MIN_AREA: f64 = 1e-12;

/// Per-pixel texture coordinates with a coverage flag.
#[derive(Debug, Clone, PartialEq)]
pub struct UVMap {
    pub width: usize,
    pub height: usize,
    /// Row-major `(u, v)`; zero where not covered.
    pub uv: Vec<[f32; 2]>,
    pub covered: Vec<bool>,
}

const UVMAP_MAGIC: &[u8; 4] = b"PUVM";
const UVMAP_VERSION: u32 = 1;

impl UVMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            uv: vec![[0.0; 2]; width * height],
            covered: vec![false; width * height],
        }
    }

    pub fn coverage_count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }

    /// Little-endian header followed by `H x W x 3` f32 values `(u, v, coverage)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 12 * self.uv.len());
        out.extend_from_slice(UVMAP_MAGIC);
        out.extend_from_slice(&UVMAP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for (uv, &c) in self.uv.iter().zip(&self.covered) {
            out.extend_from_slice(&uv[0].to_le_bytes());
            out.extend_from_slice(&uv[1].to_le_bytes());
            out.extend_from_slice(&(if c { 1.0f32 } else { 0.0 }).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != UVMAP_MAGIC {
            return Err(Error::format(None, "not a UV map file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != UVMAP_VERSION {
            return Err(Error::format(
                None,
                format!("unsupported UV map version {}", word(4)),
            ));
        }
        let (height, width) = (word(8) as usize, word(12) as usize);
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Error::format(None, "UV map dimensions overflow"))?;
        if bytes.len() != 16 + 12 * n {
            return Err(Error::format(
                None,
                "UV map payload length does not match its header",
            ));
        }
        let mut map = Self::empty(width, height);
        for p in 0..n {
            let at = 16 + 12 * p;
            let f = |k: usize| {
                f32::from_le_bytes(bytes[at + 4 * k..at + 4 * k + 4].try_into().unwrap())
            };
            let (u, v, c) = (f(0), f(1), f(2));
            if c != 0.0 {
                if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                    return Err(Error::format(Some(p), "covered uv outside [0,1]"));
                }
                map.uv[p] = [u, v];
                map.covered[p] = true;
            }
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// The visible surface point at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub triangle: usize,
    /// Perspective-correct barycentric weights of the triangle's vertices.
    pub barycentric: [f64; 3],
    pub depth: f64,
}

fn edge(a: [f64; 3], b: [f64; 3], px: f64, py: f64) -> f64 {
    (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
}

/// Nearest front-facing fragment per pixel (row-major).
///
/// A triangle is front-facing when its projected signed area
/// `(x1-x0)(y2-y0) - (x2-x0)(y1-y0)` is positive. Degenerate triangles and
/// triangles touching the near plane are skipped.
pub fn rasterize_fragments(
    vertices: &[[f64; 3]],
    triangles: &[[u32; 3]],
    pose: &CameraPose,
    width: usize,
    height: usize,
) -> Result<Vec<Option<Fragment>>> {
    if let Some(t) = triangles
        .iter()
        .find(|t| t.iter().any(|&i| i as usize >= vertices.len()))
    {
        return Err(Error::invalid(format!(
            "triangle {t:?} references a vertex beyond {}",
            vertices.len()
        )));
    }
    let projected: Vec<Option<[f64; 3]>> = vertices.iter().map(|&p| pose.project(p)).collect();
    let mut frags: Vec<Option<Fragment>> = vec![None; width * height];
    for (ti, tri) in triangles.iter().enumerate() {
        let (Some(a), Some(b), Some(c)) = (
            projected[tri[0] as usize],
            projected[tri[1] as usize],
            projected[tri[2] as usize],
        ) else {
            continue;
        };
        let area = edge(a, b, c[0], c[1]);
        if !area.is_finite() || area <= MIN_AREA {
            continue;
        }
        let min_x = a[0].min(b[0]).min(c[0]).floor().max(0.0) as usize;
        let min_y = a[1].min(b[1]).min(c[1]).floor().max(0.0) as usize;
        let max_x = a[0].max(b[0]).max(c[0]).ceil().min(width as f64);
        let max_y = a[1].max(b[1]).max(c[1]).ceil().min(height as f64);
        if max_x <= 0.0 || max_y <= 0.0 {
            continue;
        }
        let (max_x, max_y) = (max_x as usize, max_y as usize);
        for py in min_y..max_y {
            let y = py as f64 + 0.5;
            for px in min_x..max_x {
                let x = px as f64 + 0.5;
                let w = [
                    edge(b, c, x, y) / area,
                    edge(c, a, x, y) / area,
                    edge(a, b, x, y) / area,
                ];
                if w.iter().any(|&wi| wi < 0.0) {
                    continue;
                }
                let q = [w[0] / a[2], w[1] / b[2], w[2] / c[2]];
                let inv_depth = q[0] + q[1] + q[2];
                let depth = 1.0 / inv_depth;
                let slot = &mut frags[py * width + px];
                if slot.is_none_or(|f| depth < f.depth) {
                    *slot = Some(Fragment {
                        triangle: ti,
                        barycentric: [q[0] * depth, q[1] * depth, q[2] * depth],
                        depth,
                    });
                }
            }
        }
    }
    Ok(frags)
}

/// Rasterizes interpolated texture coordinates of the visible surface.
pub fn rasterize(
    vertices: &[[f64; 3]],
    triangles: &[[u32; 3]],
    uv_coords: &[[f32; 2]],
    pose: &CameraPose,
    width: usize,
    height: usize,
) -> Result<UVMap> {
    if uv_coords.len() != vertices.len() {
        return Err(Error::invalid(format!(
            "{} uv coordinates for {} vertices",
            uv_coords.len(),
            vertices.len()
        )));
    }
    let frags = rasterize_fragments(vertices, triangles, pose, width, height)?;
    Ok(uvmap_from_fragments(
        &frags, triangles, uv_coords, width, height,
    ))
}

/// Interpolates per-vertex texture coordinates at each visible fragment.
pub fn uvmap_from_fragments(
    frags: &[Option<Fragment>],
    triangles: &[[u32; 3]],
    uv_coords: &[[f32; 2]],
    width: usize,
    height: usize,
) -> UVMap {
    let mut map = UVMap::empty(width, height);
    for (p, frag) in frags.iter().enumerate() {
        let Some(f) = frag else { continue };
        let t = triangles[f.triangle];
        let mut uv = [0.0f64; 2];
        for k in 0..3 {
            let c = uv_coords[t[k] as usize];
            uv[0] += f.barycentric[k] * c[0] as f64;
            uv[1] += f.barycentric[k] * c[1] as f64;
        }
        map.uv[p] = [uv[0].clamp(0.0, 1.0) as f32, uv[1].clamp(0.0, 1.0) as f32];
        map.covered[p] = true;
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_pose() -> CameraPose {
        CameraPose::new(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
            Intrinsics {
                fx: 10.0,
                fy: 10.0,
                cx: 0.0,
                cy: 0.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn empty_mesh_covers_nothing() {
        let map = rasterize(&[], &[], &[], &identity_pose(), 8, 8).unwrap();
        assert_eq!(map.coverage_count(), 0);
    }

    #[test]
    fn pose_validation() {
        let i = Intrinsics::centered(8, 8.0);
        assert!(CameraPose::new(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]],
            [0.0; 3],
            i
        )
        .is_err());
        assert!(CameraPose::new(
            [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
            i
        )
        .is_err());
        let p = CameraPose::from_yaw_pitch(0.3, -0.2, [0.0, 0.0, 5.0], i).unwrap();
        let r = p.rotation();
        assert!((r[0][0] * r[0][0] + r[1][0] * r[1][0] + r[2][0] * r[2][0] - 1.0).abs() < 1e-12);
    }

    /// Fronto-parallel right triangle at depth 1 projecting to pixel corners
    /// (0,0), (8,0), (0,8): covered centres satisfy x + y <= 8.
    fn right_triangle(z: f64) -> Vec<[f64; 3]> {
        vec![[0.0, 0.0, z], [0.8 * z, 0.0, z], [0.0, 0.8 * z, z]]
    }

    #[test]
    fn single_triangle_coverage_and_uv() {
        let verts = right_triangle(1.0);
        // area with this winding: (8-0)(8-0) - (0-0)(0-0) = 64 > 0
        let tris = [[0u32, 1, 2]];
        let uvs = [[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let map = rasterize(&verts, &tris, &uvs, &identity_pose(), 10, 10).unwrap();
        let mut expected = Vec::new();
        for py in 0..10 {
            for px in 0..10 {
                if (px as f64 + 0.5) + (py as f64 + 0.5) <= 8.0 {
                    expected.push(py * 10 + px);
                }
            }
        }
        let got: Vec<usize> = (0..100).filter(|&p| map.covered[p]).collect();
        assert_eq!(got, expected);
        // pixel (2,1): centre (2.5,1.5); affine weights (1-2.5/8-1.5/8, 2.5/8, 1.5/8); constant depth
        let uv = map.uv[10 + 2];
        assert!((uv[0] as f64 - 2.5 / 8.0).abs() < 1e-6);
        assert!((uv[1] as f64 - 1.5 / 8.0).abs() < 1e-6);
    }

    #[test]
    fn back_facing_and_degenerate_triangles_are_skipped() {
        let verts = right_triangle(1.0);
        let uvs = [[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let map = rasterize(&verts, &[[0, 2, 1]], &uvs, &identity_pose(), 10, 10).unwrap();
        assert_eq!(map.coverage_count(), 0);
        let line = vec![[0.0, 0.0, 1.0], [0.4, 0.4, 1.0], [0.8, 0.8, 1.0]];
        let map = rasterize(&line, &[[0, 1, 2]], &uvs, &identity_pose(), 10, 10).unwrap();
        assert_eq!(map.coverage_count(), 0);
        assert!(rasterize(&verts, &[[0, 1, 7]], &uvs, &identity_pose(), 10, 10).is_err());
    }

    #[test]
    fn perspective_correct_interpolation() {
        // A slanted triangle: hand-project, compute screen barycentrics, then correct by 1/z.
        let verts = vec![[0.0, 0.0, 1.0], [1.6, 0.0, 2.0], [0.0, 0.8, 1.0]];
        let uvs = [[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let pose = identity_pose();
        let frags = rasterize_fragments(&verts, &[[0, 1, 2]], &pose, 10, 10).unwrap();
        let map = rasterize(&verts, &[[0, 1, 2]], &uvs, &pose, 10, 10).unwrap();
        // projections: (0,0,1), (8,0,2), (0,8,1); pixel (3,2) centre (3.5,2.5)
        let (x, y) = (3.5, 2.5);
        let l1 = x / 8.0;
        let l2 = y / 8.0;
        let l0 = 1.0 - l1 - l2;
        let q = [l0 / 1.0, l1 / 2.0, l2 / 1.0];
        let s: f64 = q.iter().sum();
        let f = frags[2 * 10 + 3].unwrap();
        for k in 0..3 {
            assert!((f.barycentric[k] - q[k] / s).abs() < 1e-12);
        }
        assert!((f.depth - 1.0 / s).abs() < 1e-12);
        assert!((map.uv[23][0] as f64 - q[1] / s).abs() < 1e-6);
        assert!((map.uv[23][1] as f64 - q[2] / s).abs() < 1e-6);
    }

    #[test]
    fn nearer_triangle_wins() {
        let mut verts = right_triangle(1.0);
        verts.extend(right_triangle(2.0));
        let uvs = [
            [0.0f32, 0.0],
            [0.0, 0.0],
            [0.0, 0.0],
            [1.0, 1.0],
            [1.0, 1.0],
            [1.0, 1.0],
        ];
        for tris in [[[0u32, 1, 2], [3, 4, 5]], [[3, 4, 5], [0, 1, 2]]] {
            let frags = rasterize_fragments(&verts, &tris, &identity_pose(), 10, 10).unwrap();
            let map = rasterize(&verts, &tris, &uvs, &identity_pose(), 10, 10).unwrap();
            for (p, f) in frags.iter().enumerate() {
                if let Some(f) = f {
                    assert!((f.depth - 1.0).abs() < 1e-12);
                    assert_eq!(map.uv[p], [0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn triangle_behind_camera_is_skipped() {
        let verts = right_triangle(-1.0);
        let uvs = [[0.0f32, 0.0]; 3];
        let map = rasterize(&verts, &[[0, 1, 2]], &uvs, &identity_pose(), 10, 10).unwrap();
        assert_eq!(map.coverage_count(), 0);
    }

    #[test]
    fn uvmap_round_trip_and_corruption() {
        let verts = right_triangle(1.0);
        let uvs = [[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let map = rasterize(&verts, &[[0, 1, 2]], &uvs, &identity_pose(), 7, 5).unwrap();
        let bytes = map.to_bytes();
        assert_eq!(UVMap::from_bytes(&bytes).unwrap(), map);
        assert!(UVMap::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(UVMap::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn coverage_ignores_triangle_order(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut verts = Vec::new();
            let mut tris = Vec::new();
            for t in 0..5u32 {
                let z = 1.0 + t as f64 * 0.37;
                let (ox, oy) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
                verts.push([ox * z, oy * z, z]);
                verts.push([(ox + 0.6) * z, oy * z, z]);
                verts.push([ox * z, (oy + 0.6) * z, z]);
                tris.push([3 * t, 3 * t + 1, 3 * t + 2]);
            }
            let uvs: Vec<[f32; 2]> = (0..verts.len()).map(|i| [(i as f32) / 15.0, 0.5]).collect();
            let pose = CameraPose::new([[1.0,0.0,0.0],[0.0,1.0,0.0],[0.0,0.0,1.0]], [0.0;3], Intrinsics::centered(12, 10.0)).unwrap();
            let a = rasterize(&verts, &tris, &uvs, &pose, 12, 12).unwrap();
            let mut rev = tris.clone();
            rev.reverse();
            let b = rasterize(&verts, &rev, &uvs, &pose, 12, 12).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
