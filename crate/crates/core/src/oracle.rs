//! Synthetic ground-truth world: a toy face basis, a known logits-to-code
//! function, per-person blendshape maps and flat-shaded reference frames.
//!
//! Every stream is a deterministic function of the seeds in [`OracleSpec`].
//! The code function is affine followed by TanH, factored so that the
//! per-frame network can represent it exactly (see
//! [`CodeFunction::to_per_frame_net`]).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::a2e::{PerFrameNet, LEAKY_SLOPE};
use crate::audio_features::{
    windows_for_stream, AudioFeatureWindow, LogitFrame, LogitStream, LOGIT_RATE_HZ, LOGIT_WIDTH,
    WINDOW_LEN,
};
use crate::error::{Error, Result};
use crate::face_model::{
    map_audio_expression, reconstruct_vertices, AudioExpressionCode, ExpressionCoefficients,
    FaceBasis, FaceTopology, PersonMapping, ShapeCoefficients, CODE_DIM, EXPR_DIM, SHAPE_DIM,
};
use crate::nn::FeatureMap;
use crate::renderer::{rasterize_fragments, uvmap_from_fragments, CameraPose, Intrinsics, UVMap};
use crate::seed::stream_rng;

/// Video frame rate of every generated sequence.
pub const ORACLE_FPS: f64 = 25.0;
/// Width of the internal projection carried through the per-frame network.
pub const PROJECTION_DIM: usize = 8;
/// Standard deviation of code pre-activations on the calibration stream.
const PREACTIVATION_STD: f64 = 0.7;
const MAPPING_STD: f64 = 0.25;
const FACE_HALF_WIDTH: f64 = 70.0;
const FACE_HALF_HEIGHT: f64 = 90.0;
const MOUTH_CENTER: [f64; 2] = [0.0, 45.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub distance_mm: f64,
    pub yaw_amplitude: f64,
    pub pitch_amplitude: f64,
    pub period_frames: f64,
}

impl Default for CameraPath {
    fn default() -> Self {
        Self {
            distance_mm: 500.0,
            yaw_amplitude: 0.08,
            pitch_amplitude: 0.05,
            period_frames: 75.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSpec {
    /// Seeds the shared basis, code function and background.
    pub world_seed: u64,
    /// Selects the person-specific mapping, identity and camera phase.
    pub person: u64,
    /// Selects the logit stream within a person.
    pub sequence: u64,
    /// Mesh vertex count; rounded to a `cols x rows` grid with rows = 5/4 cols.
    pub vertex_count: usize,
    pub mouth_fraction: f64,
    pub texture_pattern: u32,
    pub camera: CameraPath,
    pub resolution: usize,
    /// Standard deviation of Gaussian noise added to the emitted expression coefficients.
    pub delta_noise_std: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            world_seed: 0,
            person: 0,
            sequence: 0,
            vertex_count: 500,
            mouth_fraction: 0.2,
            texture_pattern: 0,
            camera: CameraPath::default(),
            resolution: 64,
            delta_noise_std: 0.0,
        }
    }
}

impl OracleSpec {
    fn validate(&self) -> Result<()> {
        if self.vertex_count < 9 {
            return Err(Error::invalid("oracle mesh needs at least 9 vertices"));
        }
        if !(self.mouth_fraction > 0.0 && self.mouth_fraction <= 1.0) {
            return Err(Error::invalid("mouth fraction must lie in (0, 1]"));
        }
        if self.resolution < 8 {
            return Err(Error::invalid(
                "oracle resolution must be at least 8 pixels",
            ));
        }
        let c = &self.camera;
        if !(c.distance_mm > FACE_HALF_HEIGHT && c.period_frames > 0.0) {
            return Err(Error::invalid(
                "camera must stay in front of the face with a positive period",
            ));
        }
        if !(self.delta_noise_std >= 0.0 && self.delta_noise_std.is_finite()) {
            return Err(Error::invalid(
                "noise level must be finite and non-negative",
            ));
        }
        Ok(())
    }

    fn grid(&self) -> (usize, usize) {
        let cols = ((self.vertex_count as f64 * 0.8).sqrt().round() as usize).max(3);
        let rows = (self.vertex_count / cols).max(3);
        (cols, rows)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    (0..rows * cols).map(|_| n.sample(rng)).collect()
}

/// Row-major `rows x cols` times vector.
fn matvec(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `code = tanh(Q u + b)` with `u = sum_r A_r x_r`, where row `r` of the window
/// uses `A_r = T4[r3] T3[r2] T2[r1] T1[r0]` for the bits `r3 r2 r1 r0` of `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeFunction {
    /// `T1[bit]`: `PROJECTION_DIM x LOGIT_WIDTH`.
    first: [Vec<f64>; 2],
    /// `T2..T4[bit]`: `PROJECTION_DIM x PROJECTION_DIM`.
    mixes: [[Vec<f64>; 2]; 3],
    /// `CODE_DIM x PROJECTION_DIM`.
    output: Vec<f64>,
    bias: Vec<f64>,
}

impl CodeFunction {
    fn generate(rng: &mut ChaCha8Rng) -> Self {
        let p = PROJECTION_DIM;
        let first =
            [0, 1].map(|_| gaussian_matrix(rng, p, LOGIT_WIDTH, (1.0 / LOGIT_WIDTH as f64).sqrt()));
        let mixes =
            [0, 1, 2].map(|_| [0, 1].map(|_| gaussian_matrix(rng, p, p, (0.5 / p as f64).sqrt())));
        let output = gaussian_matrix(rng, CODE_DIM, p, 1.0);
        let bias = gaussian_matrix(rng, CODE_DIM, 1, 0.2);
        let mut f = Self {
            first,
            mixes,
            output,
            bias,
        };
        let calibration = logit_stream(rng, 500);
        let windows =
            windows_for_stream(&calibration, ORACLE_FPS).expect("non-empty calibration stream");
        let mut acc = 0.0;
        for w in &windows {
            let z = matvec(&f.output, p, &f.projection(w));
            acc += z.iter().map(|v| v * v).sum::<f64>();
        }
        let std = (acc / (windows.len() * CODE_DIM) as f64).sqrt();
        f.output
            .iter_mut()
            .for_each(|v| *v *= PREACTIVATION_STD / std);
        f
    }

    fn row_map(&self, r: usize) -> Vec<f64> {
        let p = PROJECTION_DIM;
        let mut a = self.first[r & 1].clone();
        for (level, pair) in self.mixes.iter().enumerate() {
            let t = &pair[(r >> (level + 1)) & 1];
            let mut next = vec![0.0; p * LOGIT_WIDTH];
            for i in 0..p {
                for k in 0..p {
                    let tik = t[i * p + k];
                    for j in 0..LOGIT_WIDTH {
                        next[i * LOGIT_WIDTH + j] += tik * a[k * LOGIT_WIDTH + j];
                    }
                }
            }
            a = next;
        }
        a
    }

    fn projection(&self, window: &AudioFeatureWindow) -> Vec<f64> {
        let mut u = vec![0.0; PROJECTION_DIM];
        for (r, row) in window.rows().iter().enumerate() {
            let x: Vec<f64> = row.0.iter().map(|&v| v as f64).collect();
            for (ui, v) in u.iter_mut().zip(matvec(&self.row_map(r), LOGIT_WIDTH, &x)) {
                *ui += v;
            }
        }
        u
    }

    pub fn evaluate(&self, window: &AudioFeatureWindow) -> AudioExpressionCode {
        let z = matvec(&self.output, PROJECTION_DIM, &self.projection(window));
        let mut code = [0.0; CODE_DIM];
        for k in 0..CODE_DIM {
            code[k] = (z[k] + self.bias[k]).tanh();
        }
        AudioExpressionCode(code)
    }

    /// The equivalent dense affine map: `(W, b)` with `W` row-major
    /// `CODE_DIM x (WINDOW_LEN * LOGIT_WIDTH)` acting on the row-major window.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let n = WINDOW_LEN * LOGIT_WIDTH;
        let mut w = vec![0.0; CODE_DIM * n];
        for r in 0..WINDOW_LEN {
            let a = self.row_map(r);
            for k in 0..CODE_DIM {
                for j in 0..LOGIT_WIDTH {
                    w[k * n + r * LOGIT_WIDTH + j] = (0..PROJECTION_DIM)
                        .map(|i| self.output[k * PROJECTION_DIM + i] * a[i * LOGIT_WIDTH + j])
                        .sum();
                }
            }
        }
        (w, self.bias.clone())
    }

    /// A per-frame network computing exactly this function.
    ///
    /// Each linear feature `h` is carried as the channel pair
    /// `(L(h), L(-h))` of a leaky ReLU `L`, since `L(h) - L(-h) = (1 + s) h`.
    pub fn to_per_frame_net(&self) -> PerFrameNet<f64> {
        let p = PROJECTION_DIM;
        let k = 1.0 / (1.0 + LEAKY_SLOPE);
        let mut net = PerFrameNet::<f64>::zeros();
        // conv weight index: ((out * in + in_ch) * 3 + tap), taps 1 and 2 read rows 2i and 2i+1
        let set_conv = |net: &mut PerFrameNet<f64>,
                        layer: usize,
                        out: usize,
                        inp: usize,
                        tap: usize,
                        v: f64| {
            let c = &mut net.convs[layer];
            let cin = c.spec.in_channels;
            c.weight[(out * cin + inp) * 3 + tap] = v;
        };
        for bit in 0..2 {
            let t = &self.first[bit];
            for i in 0..p {
                for j in 0..LOGIT_WIDTH {
                    set_conv(&mut net, 0, i, j, 1 + bit, t[i * LOGIT_WIDTH + j]);
                    set_conv(&mut net, 0, p + i, j, 1 + bit, -t[i * LOGIT_WIDTH + j]);
                }
            }
        }
        for (level, pair) in self.mixes.iter().enumerate() {
            for bit in 0..2 {
                let t = &pair[bit];
                for i in 0..p {
                    for m in 0..p {
                        let v = k * t[i * p + m];
                        set_conv(&mut net, level + 1, i, m, 1 + bit, v);
                        set_conv(&mut net, level + 1, i, p + m, 1 + bit, -v);
                        set_conv(&mut net, level + 1, p + i, m, 1 + bit, -v);
                        set_conv(&mut net, level + 1, p + i, p + m, 1 + bit, v);
                    }
                }
            }
        }
        // two pass-through affine layers, then the output map
        for layer in 0..2 {
            let fc = &mut net.fcs[layer];
            let cin = fc.in_features;
            for i in 0..p {
                fc.weight[i * cin + i] = k;
                fc.weight[i * cin + p + i] = -k;
                fc.weight[(p + i) * cin + i] = -k;
                fc.weight[(p + i) * cin + p + i] = k;
            }
        }
        let fc = &mut net.fcs[2];
        let cin = fc.in_features;
        for o in 0..CODE_DIM {
            for i in 0..p {
                let v = k * self.output[o * p + i];
                fc.weight[o * cin + i] = v;
                fc.weight[o * cin + p + i] = -v;
            }
            fc.bias[o] = self.bias[o];
        }
        net
    }
}

/// Smooth synthetic logits: per channel a sum of three slow sinusoids.
fn logit_stream(rng: &mut ChaCha8Rng, rows: usize) -> LogitStream {
    let comps: Vec<[(f64, f64, f64); 3]> = (0..LOGIT_WIDTH)
        .map(|_| {
            [0, 1, 2].map(|_| {
                (
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.15..0.6) * std::f64::consts::TAU,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
        })
        .collect();
    let offsets: Vec<f64> = (0..LOGIT_WIDTH).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let frames = (0..rows)
        .map(|i| {
            let t = i as f64 / LOGIT_RATE_HZ;
            let mut f = [0.0f32; LOGIT_WIDTH];
            for c in 0..LOGIT_WIDTH {
                let v: f64 = comps[c]
                    .iter()
                    .map(|&(a, w, ph)| a * (w * t + ph).sin())
                    .sum();
                f[c] = (v + offsets[c]) as f32;
            }
            LogitFrame(f)
        })
        .collect();
    LogitStream::new(frames).expect("finite synthetic logits")
}

/// Shared state of a synthetic world: basis, topology, code function and background.
#[derive(Debug, Clone)]
pub struct OracleWorld {
    pub spec: OracleSpec,
    pub basis: FaceBasis,
    pub topology: FaceTopology,
    pub code_function: CodeFunction,
    pub background: FeatureMap<f32>,
}

/// Per-person ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePerson {
    pub mapping: PersonMapping,
    pub shape: ShapeCoefficients,
    pub camera_phase: f64,
}

/// All streams of one generated sequence, indexed by video frame.
#[derive(Debug, Clone)]
pub struct OracleSequence {
    pub logits: LogitStream,
    pub windows: Vec<AudioFeatureWindow>,
    pub codes: Vec<AudioExpressionCode>,
    pub expressions: Vec<ExpressionCoefficients>,
    pub vertices: Vec<Vec<[f64; 3]>>,
    pub images: Vec<FeatureMap<f32>>,
    pub uvmaps: Vec<UVMap>,
    pub poses: Vec<CameraPose>,
    /// Face-interior masks (the rasterized coverage).
    pub masks: Vec<Vec<bool>>,
    pub person: OraclePerson,
}

impl OracleSequence {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

fn build_face(spec: &OracleSpec, rng: &mut ChaCha8Rng) -> Result<(FaceBasis, FaceTopology)> {
    let (cols, rows) = spec.grid();
    let v = cols * rows;
    let mut mean = Vec::with_capacity(3 * v);
    let mut uvs = Vec::with_capacity(v);
    let mut xy = Vec::with_capacity(v);
    for j in 0..rows {
        for i in 0..cols {
            let (s, t) = (i as f64 / (cols - 1) as f64, j as f64 / (rows - 1) as f64);
            let x = (2.0 * s - 1.0) * FACE_HALF_WIDTH;
            let y = (2.0 * t - 1.0) * FACE_HALF_HEIGHT;
            let bulge = 1.0
                - (x / (1.2 * FACE_HALF_WIDTH)).powi(2)
                - (y / (1.2 * FACE_HALF_HEIGHT)).powi(2);
            mean.extend_from_slice(&[x, y, -35.0 * bulge]);
            uvs.push([s as f32, t as f32]);
            xy.push([x, y]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * (cols - 1) * (rows - 1));
    for j in 0..rows - 1 {
        for i in 0..cols - 1 {
            let a = (j * cols + i) as u32;
            let b = a + 1;
            let c = a + cols as u32;
            let d = c + 1;
            triangles.push([a, b, c]);
            triangles.push([b, d, c]);
        }
    }
    let smooth_field = |rng: &mut ChaCha8Rng, amplitude: f64, localized: bool| -> Vec<f64> {
        let (kx, ky) = (rng.gen_range(0..3) as f64, rng.gen_range(0..3) as f64);
        let (px, py) = (
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        let dir: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let mut out = Vec::with_capacity(3 * v);
        for p in &xy {
            let base = (kx * p[0] / FACE_HALF_WIDTH + px).cos()
                * (ky * p[1] / FACE_HALF_HEIGHT + py).cos();
            let falloff = if localized {
                let d2 = (p[0] - MOUTH_CENTER[0]).powi(2) + (p[1] - MOUTH_CENTER[1]).powi(2);
                (-d2 / (2.0 * 30.0f64.powi(2))).exp()
            } else {
                1.0
            };
            for a in 0..3 {
                out.push(amplitude * falloff * base * dir[a]);
            }
        }
        out
    };
    let shape_cols: Vec<Vec<f64>> = (0..SHAPE_DIM)
        .map(|_| smooth_field(rng, 0.5, false))
        .collect();
    let expr_cols: Vec<Vec<f64>> = (0..EXPR_DIM)
        .map(|k| smooth_field(rng, 1.0, k % 4 != 0))
        .collect();
    let interleave = |cols_: &[Vec<f64>]| -> Vec<f64> {
        let n = cols_.len();
        let mut out = vec![0.0; 3 * v * n];
        for (c, col) in cols_.iter().enumerate() {
            for (r, &x) in col.iter().enumerate() {
                out[r * n + c] = x;
            }
        }
        out
    };
    let mut order: Vec<usize> = (0..v).collect();
    let dist = |p: &[f64; 2]| (p[0] - MOUTH_CENTER[0]).powi(2) + (p[1] - MOUTH_CENTER[1]).powi(2);
    order.sort_by(|&a, &b| dist(&xy[a]).total_cmp(&dist(&xy[b])).then(a.cmp(&b)));
    let mouth_count = ((spec.mouth_fraction * v as f64).round() as usize).clamp(1, v);
    let mut mouth = vec![false; v];
    for &i in &order[..mouth_count] {
        mouth[i] = true;
    }
    let basis = FaceBasis::new(mean, interleave(&shape_cols), interleave(&expr_cols), mouth)?;
    let topology = FaceTopology { triangles, uvs };
    topology.validate(v)?;
    Ok((basis, topology))
}

fn background(resolution: usize, rng: &mut ChaCha8Rng) -> FeatureMap<f32> {
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.6));
    let n = resolution as f64;
    let mut img = FeatureMap::zeros(3, resolution, resolution);
    for c in 0..3 {
        for y in 0..resolution {
            for x in 0..resolution {
                let (s, t) = (x as f64 / n, y as f64 / n);
                let v = tint[c]
                    + 0.25 * (s - 0.5) * (c as f64 - 1.0)
                    + 0.15 * (std::f64::consts::PI * t).sin();
                img.set(c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Albedo of the synthetic skin pattern at texture coordinate `(u, v)`.
fn albedo(pattern: u32, u: f64, v: f64) -> [f64; 3] {
    let hue = 0.05 * (pattern % 5) as f64;
    let mut c = [0.78 - hue, 0.58, 0.48 + hue];
    let ripple =
        0.08 * (std::f64::consts::TAU * 2.0 * u).sin() * (std::f64::consts::TAU * 1.5 * v).cos();
    for x in &mut c {
        *x += ripple;
    }
    // lips band and two darker eye regions in texture space
    let mouth_v = 0.5 + MOUTH_CENTER[1] / (2.0 * FACE_HALF_HEIGHT);
    if ((u - 0.5) / 0.18).powi(2) + ((v - mouth_v) / 0.05).powi(2) < 1.0 {
        c = [0.62, 0.22, 0.25];
    }
    for eye_u in [0.32, 0.68] {
        if ((u - eye_u) / 0.08).powi(2) + ((v - 0.33) / 0.04).powi(2) < 1.0 {
            c = [0.15, 0.12, 0.1];
        }
    }
    c.map(|x| x.clamp(0.0, 1.0))
}

const LIGHT_DIR: [f64; 3] = [-0.3, -0.4, -1.0];

impl OracleWorld {
    pub fn new(spec: &OracleSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(spec.world_seed, 1, 0, 0);
        let (basis, topology) = build_face(spec, &mut rng)?;
        let code_function = CodeFunction::generate(&mut rng);
        let background = background(spec.resolution, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            basis,
            topology,
            code_function,
            background,
        })
    }

    pub fn person(&self, person: u64) -> OraclePerson {
        let mut rng = stream_rng(self.spec.world_seed, 2, person, 0);
        let mapping =
            PersonMapping::new(gaussian_matrix(&mut rng, EXPR_DIM, CODE_DIM, MAPPING_STD))
                .expect("finite mapping");
        let shape = ShapeCoefficients(gaussian_matrix(&mut rng, SHAPE_DIM, 1, 1.0));
        OraclePerson {
            mapping,
            shape,
            camera_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    pub fn pose(&self, person: &OraclePerson, frame: usize) -> Result<CameraPose> {
        let c = &self.spec.camera;
        let phase = std::f64::consts::TAU * frame as f64 / c.period_frames + person.camera_phase;
        let res = self.spec.resolution;
        let focal = 0.36 * c.distance_mm / FACE_HALF_HEIGHT * res as f64;
        CameraPose::from_yaw_pitch(
            c.yaw_amplitude * phase.sin(),
            c.pitch_amplitude * (0.7 * phase).cos(),
            [0.0, 0.0, c.distance_mm],
            Intrinsics::centered(res, focal),
        )
    }

    /// Flat-shaded render of posed vertices over the world background, with
    /// the matching texture-coordinate map.
    pub fn render(
        &self,
        vertices: &[[f64; 3]],
        pose: &CameraPose,
    ) -> Result<(FeatureMap<f32>, UVMap)> {
        let res = self.spec.resolution;
        let tris = &self.topology.triangles;
        let frags = rasterize_fragments(vertices, tris, pose, res, res)?;
        let uvmap = uvmap_from_fragments(&frags, tris, &self.topology.uvs, res, res);
        let norm = LIGHT_DIR.iter().map(|x| x * x).sum::<f64>().sqrt();
        let light = LIGHT_DIR.map(|x| x / norm);
        let shade: Vec<f64> = tris
            .iter()
            .map(|t| {
                let p = t.map(|i| pose.to_camera(vertices[i as usize]));
                let e1: [f64; 3] = std::array::from_fn(|a| p[1][a] - p[0][a]);
                let e2: [f64; 3] = std::array::from_fn(|a| p[2][a] - p[0][a]);
                let mut n = [
                    e1[1] * e2[2] - e1[2] * e2[1],
                    e1[2] * e2[0] - e1[0] * e2[2],
                    e1[0] * e2[1] - e1[1] * e2[0],
                ];
                let len = n.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let flip = if n[2] > 0.0 { -1.0 } else { 1.0 };
                n.iter_mut().for_each(|x| *x *= flip / len);
                0.35 + 0.65 * (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0)
            })
            .collect();
        let mut img = self.background.clone();
        let plane = res * res;
        for (p, frag) in frags.iter().enumerate() {
            let Some(f) = frag else { continue };
            let [u, v] = uvmap.uv[p];
            let a = albedo(self.spec.texture_pattern, u as f64, v as f64);
            for c in 0..3 {
                img.data[c * plane + p] = (a[c] * shade[f.triangle]).clamp(0.0, 1.0) as f32;
            }
        }
        Ok((img, uvmap))
    }

    pub fn generate(&self, frame_count: usize) -> Result<OracleSequence> {
        if frame_count < 3 {
            return Err(Error::invalid("oracle sequences need at least 3 frames"));
        }
        let spec = &self.spec;
        let person = self.person(spec.person);
        let mut rng = stream_rng(spec.world_seed, 3, spec.person, spec.sequence);
        // one logit row per 20 ms; two rows per 25 fps frame
        let logits = logit_stream(&mut rng, 2 * frame_count);
        let mut windows = windows_for_stream(&logits, ORACLE_FPS)?;
        windows.truncate(frame_count);
        let noise = (spec.delta_noise_std > 0.0)
            .then(|| Normal::new(0.0, spec.delta_noise_std).expect("valid std"));
        let mut seq = OracleSequence {
            logits,
            windows: Vec::with_capacity(frame_count),
            codes: Vec::with_capacity(frame_count),
            expressions: Vec::with_capacity(frame_count),
            vertices: Vec::with_capacity(frame_count),
            images: Vec::with_capacity(frame_count),
            uvmaps: Vec::with_capacity(frame_count),
            poses: Vec::with_capacity(frame_count),
            masks: Vec::with_capacity(frame_count),
            person,
        };
        for (t, w) in windows.into_iter().enumerate() {
            let code = self.code_function.evaluate(&w);
            let mut delta = map_audio_expression(&code, &seq.person.mapping);
            if let Some(n) = &noise {
                delta.0.iter_mut().for_each(|d| *d += n.sample(&mut rng));
            }
            let verts = reconstruct_vertices(&self.basis, &seq.person.shape, &delta)?;
            let pose = self.pose(&seq.person, t)?;
            let (img, uvmap) = self.render(&verts, &pose)?;
            seq.masks.push(uvmap.covered.clone());
            seq.windows.push(w);
            seq.codes.push(code);
            seq.expressions.push(delta);
            seq.vertices.push(verts);
            seq.images.push(img);
            seq.uvmaps.push(uvmap);
            seq.poses.push(pose);
        }
        Ok(seq)
    }
}

/// Builds the world for `spec` and generates `frame_count` frames of its sequence.
pub fn generate_sequence(spec: &OracleSpec, frame_count: usize) -> Result<OracleSequence> {
    OracleWorld::new(spec)?.generate(frame_count)
}
