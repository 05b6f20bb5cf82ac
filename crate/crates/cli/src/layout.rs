//! On-disk dataset layout.
//!
//! ```text
//! <root>/basis.bin            face basis
//! <root>/topology.bin         triangles and per-vertex UVs
//! <root>/<sequence>/manifest.json
//!                  logits.bin         50 Hz logit stream
//!                  expressions.bin    tracked expression coefficients per frame
//!                  shape.bin          identity coefficients
//!                  poses.json         camera pose per frame
//!                  frames/NNNNNN.png  reference frames
//!                  uvmaps/NNNNNN.uvm  rasterized UV maps
//!                  masks/NNNNNN.png   face-interior masks
//! ```
//!
//! Every sequence manifest lists a SHA-256 checksum per file; loaders verify
//! each file they read against it.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use puppetry_core::audio_features::{windows_for_stream, AudioFeatureWindow, LogitStream};
use puppetry_core::face_model::{
    ExpressionCoefficients, FaceBasis, FaceTopology, ShapeCoefficients, EXPR_DIM,
};
use puppetry_core::nn::FeatureMap;
use puppetry_core::renderer::{CameraPose, UVMap};
use puppetry_core::training::TargetFrame;
use serde::{Deserialize, Serialize};

use crate::output::sha256_hex;
use crate::ValidationError;

pub const BASIS_FILE: &str = "basis.bin";
pub const TOPOLOGY_FILE: &str = "topology.bin";
pub const SEQUENCE_MANIFEST: &str = "manifest.json";
pub const LOGITS_FILE: &str = "logits.bin";
pub const EXPRESSIONS_FILE: &str = "expressions.bin";
pub const SHAPE_FILE: &str = "shape.bin";
pub const POSES_FILE: &str = "poses.json";
const LAYOUT_VERSION: u32 = 1;
const COEFF_MAGIC: &[u8; 4] = b"PCOF";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub format: u32,
    pub person: u64,
    pub frame_count: usize,
    pub fps: f64,
    pub resolution: usize,
    /// Basis and topology paths relative to the sequence directory.
    pub basis: String,
    pub topology: String,
    /// Relative path to SHA-256 for every file of the sequence.
    pub files: BTreeMap<String, String>,
}

pub fn frame_file(dir: &str, t: usize, ext: &str) -> String {
    format!("{dir}/{t:06}.{ext}")
}

/// Row-major `f64` table: magic, version, rows, cols, then values, little-endian.
pub fn coefficients_to_bytes(rows: &[Vec<f64>], cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + rows.len() * cols * 8);
    out.extend_from_slice(COEFF_MAGIC);
    out.extend_from_slice(&LAYOUT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for r in rows {
        assert_eq!(r.len(), cols, "ragged coefficient table");
        for v in r {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn coefficients_from_bytes(bytes: &[u8], cols: usize) -> anyhow::Result<Vec<Vec<f64>>> {
    let header = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if bytes.len() < 16 || &bytes[..4] != COEFF_MAGIC {
        bail!("not a coefficient table");
    }
    if header(4) != LAYOUT_VERSION as usize {
        bail!("unsupported coefficient table version {}", header(4));
    }
    let (rows, width) = (header(8), header(12));
    if width != cols {
        bail!("coefficient table has {width} columns, expected {cols}");
    }
    if bytes.len() != 16 + rows * cols * 8 {
        bail!("coefficient table size does not match its {rows}x{cols} header");
    }
    Ok(bytes[16..]
        .chunks_exact(cols * 8)
        .map(|r| {
            r.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        })
        .collect())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_png_bytes(img: &FeatureMap<f32>) -> anyhow::Result<Vec<u8>> {
    if img.channels != 3 {
        bail!("expected an RGB image, got {} channels", img.channels);
    }
    let (h, w) = (img.height, img.width);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        *px = image::Rgb(std::array::from_fn(|c| to_u8(img.get(c, y, x))));
    }
    encode(image::DynamicImage::ImageRgb8(buf))
}

pub fn mask_png_bytes(mask: &[bool], width: usize, height: usize) -> anyhow::Result<Vec<u8>> {
    let buf = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([if mask[y as usize * width + x as usize] {
            255
        } else {
            0
        }])
    });
    encode(image::DynamicImage::ImageLuma8(buf))
}

fn encode(img: image::DynamicImage) -> anyhow::Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn rgb_from_png(bytes: &[u8]) -> anyhow::Result<FeatureMap<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = FeatureMap::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
        }
    }
    Ok(out)
}

pub fn mask_from_png(bytes: &[u8]) -> anyhow::Result<(Vec<bool>, usize, usize)> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_luma8();
    Ok((
        img.pixels().map(|p| p.0[0] >= 128).collect(),
        img.width() as usize,
        img.height() as usize,
    ))
}

/// Streams written for one sequence.
pub struct SequenceContent<'a> {
    pub person: u64,
    pub fps: f64,
    pub logits: &'a LogitStream,
    pub expressions: &'a [ExpressionCoefficients],
    pub shape: &'a ShapeCoefficients,
    pub frames: &'a [FeatureMap<f32>],
    pub uvmaps: &'a [UVMap],
    pub poses: &'a [CameraPose],
    pub masks: &'a [Vec<bool>],
}

/// Writes one sequence directory; basis and topology live in its parent.
pub fn write_sequence(dir: &Path, c: &SequenceContent) -> anyhow::Result<()> {
    let n = c.expressions.len();
    if [c.frames.len(), c.uvmaps.len(), c.poses.len(), c.masks.len()]
        .iter()
        .any(|&l| l != n)
    {
        bail!("sequence streams disagree on the frame count");
    }
    let resolution = c.frames.first().map_or(0, |f| f.width);
    let mut files = BTreeMap::new();
    let mut put = |rel: String, bytes: Vec<u8>| -> anyhow::Result<()> {
        let path = dir.join(&rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        files.insert(rel, sha256_hex(&bytes));
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))
    };
    put(LOGITS_FILE.into(), c.logits.to_bytes())?;
    let rows: Vec<Vec<f64>> = c.expressions.iter().map(|e| e.0.clone()).collect();
    put(
        EXPRESSIONS_FILE.into(),
        coefficients_to_bytes(&rows, EXPR_DIM),
    )?;
    put(
        SHAPE_FILE.into(),
        coefficients_to_bytes(std::slice::from_ref(&c.shape.0), c.shape.0.len()),
    )?;
    put(POSES_FILE.into(), serde_json::to_vec_pretty(c.poses)?)?;
    for t in 0..n {
        put(frame_file("frames", t, "png"), rgb_png_bytes(&c.frames[t])?)?;
        put(frame_file("uvmaps", t, "uvm"), c.uvmaps[t].to_bytes())?;
        let (w, h) = (c.uvmaps[t].width, c.uvmaps[t].height);
        put(
            frame_file("masks", t, "png"),
            mask_png_bytes(&c.masks[t], w, h)?,
        )?;
    }
    let manifest = SequenceManifest {
        format: LAYOUT_VERSION,
        person: c.person,
        frame_count: n,
        fps: c.fps,
        resolution,
        basis: format!("../{BASIS_FILE}"),
        topology: format!("../{TOPOLOGY_FILE}"),
        files,
    };
    crate::output::write_json(&dir.join(SEQUENCE_MANIFEST), &manifest)
}

/// A sequence directory with its verified manifest.
#[derive(Debug, Clone)]
pub struct SequenceDir {
    pub name: String,
    pub dir: PathBuf,
    pub manifest: SequenceManifest,
}

/// Audio-side streams of one sequence.
#[derive(Debug, Clone)]
pub struct AudioSide {
    pub logits: LogitStream,
    pub windows: Vec<AudioFeatureWindow>,
    pub expressions: Vec<ExpressionCoefficients>,
    pub shape: ShapeCoefficients,
}

impl SequenceDir {
    pub fn open(root: &Path, name: &str) -> anyhow::Result<Self> {
        let dir = root.join(name);
        let path = dir.join(SEQUENCE_MANIFEST);
        let bytes = fs::read(&path).map_err(|e| {
            ValidationError(format!(
                "cannot read sequence manifest {}: {e}",
                path.display()
            ))
        })?;
        let manifest: SequenceManifest = serde_json::from_slice(&bytes)
            .map_err(|e| ValidationError(format!("invalid manifest {}: {e}", path.display())))?;
        if manifest.format != LAYOUT_VERSION {
            return Err(ValidationError(format!(
                "{}: unsupported layout version {}",
                path.display(),
                manifest.format
            ))
            .into());
        }
        Ok(Self {
            name: name.into(),
            dir,
            manifest,
        })
    }

    /// Reads a file of the sequence and checks it against the manifest.
    pub fn read(&self, rel: &str) -> anyhow::Result<Vec<u8>> {
        let path = self.dir.join(rel);
        let expected = self.manifest.files.get(rel).ok_or_else(|| {
            ValidationError(format!(
                "{} is not listed in the sequence manifest",
                path.display()
            ))
        })?;
        let bytes = fs::read(&path)
            .map_err(|e| ValidationError(format!("cannot read {}: {e}", path.display())))?;
        if &sha256_hex(&bytes) != expected {
            return Err(
                ValidationError(format!("checksum mismatch for {}", path.display())).into(),
            );
        }
        Ok(bytes)
    }

    fn shared(&self, rel: &str) -> anyhow::Result<Vec<u8>> {
        let path = self.dir.join(rel);
        fs::read(&path)
            .map_err(|e| ValidationError(format!("cannot read {}: {e}", path.display())).into())
    }

    pub fn basis(&self) -> anyhow::Result<FaceBasis> {
        FaceBasis::from_bytes(&self.shared(&self.manifest.basis)?).context("face basis")
    }

    pub fn topology(&self) -> anyhow::Result<FaceTopology> {
        FaceTopology::from_bytes(&self.shared(&self.manifest.topology)?).context("face topology")
    }

    pub fn audio(&self) -> anyhow::Result<AudioSide> {
        let m = &self.manifest;
        let logits = LogitStream::from_bytes(&self.read(LOGITS_FILE)?).context("logit stream")?;
        let windows = windows_for_stream(&logits, m.fps)?;
        let expressions = coefficients_from_bytes(&self.read(EXPRESSIONS_FILE)?, EXPR_DIM)
            .context("expression table")?
            .into_iter()
            .map(ExpressionCoefficients)
            .collect::<Vec<_>>();
        let shape_bytes = self.read(SHAPE_FILE)?;
        let cols = shape_bytes
            .get(12..16)
            .map_or(0, |b| u32::from_le_bytes(b.try_into().unwrap()) as usize);
        let shape = coefficients_from_bytes(&shape_bytes, cols)
            .context("shape coefficients")?
            .pop()
            .map(ShapeCoefficients)
            .ok_or_else(|| ValidationError(format!("{}: empty shape file", self.name)))?;
        if windows.len() != m.frame_count || expressions.len() != m.frame_count {
            return Err(ValidationError(format!(
                "sequence {}: manifest says {} frames but logits give {} and expressions {}",
                self.name,
                m.frame_count,
                windows.len(),
                expressions.len()
            ))
            .into());
        }
        Ok(AudioSide {
            logits,
            windows,
            expressions,
            shape,
        })
    }

    pub fn poses(&self) -> anyhow::Result<Vec<CameraPose>> {
        let raw: Vec<CameraPose> =
            serde_json::from_slice(&self.read(POSES_FILE)?).context("poses file")?;
        if raw.len() != self.manifest.frame_count {
            return Err(ValidationError(format!(
                "sequence {}: pose count differs from frame count",
                self.name
            ))
            .into());
        }
        // revalidate rotations that bypassed the constructor
        raw.into_iter()
            .map(|p| {
                Ok(CameraPose::new(
                    *p.rotation(),
                    p.translation(),
                    p.intrinsics,
                )?)
            })
            .collect()
    }

    /// Reference frames, UV maps, poses and masks for `range`.
    pub fn frames(&self, range: Range<usize>) -> anyhow::Result<Vec<TargetFrame>> {
        let poses = self.poses()?;
        let res = self.manifest.resolution;
        range
            .map(|t| {
                let reference = rgb_from_png(&self.read(&frame_file("frames", t, "png"))?)?;
                let uvmap = UVMap::from_bytes(&self.read(&frame_file("uvmaps", t, "uvm"))?)?;
                let (mask, w, h) = mask_from_png(&self.read(&frame_file("masks", t, "png"))?)?;
                if [
                    reference.width,
                    reference.height,
                    uvmap.width,
                    uvmap.height,
                    w,
                    h,
                ]
                .iter()
                .any(|&d| d != res)
                {
                    return Err(ValidationError(format!(
                        "sequence {} frame {t} does not match the manifest resolution {res}",
                        self.name
                    ))
                    .into());
                }
                Ok(TargetFrame {
                    reference,
                    uvmap,
                    pose: poses[t],
                    mask,
                })
            })
            .collect()
    }
}

/// Sequence directories under `root`, sorted by name.
pub fn list_sequences(root: &Path) -> anyhow::Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("cannot list {}", root.display()))? {
        let entry = entry?;
        if entry.path().join(SEQUENCE_MANIFEST).is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_table_round_trip_and_errors() {
        let rows = vec![vec![1.0, -2.5, 3.25], vec![0.0, f64::MIN_POSITIVE, 7.0]];
        let bytes = coefficients_to_bytes(&rows, 3);
        assert_eq!(coefficients_from_bytes(&bytes, 3).unwrap(), rows);
        assert!(coefficients_from_bytes(&bytes, 2).is_err());
        assert!(coefficients_from_bytes(&bytes[..bytes.len() - 1], 3).is_err());
        assert!(coefficients_from_bytes(b"PCOF", 3).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_for_8_bit_values() {
        let mut img = FeatureMap::zeros(3, 2, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 13 % 256) as f32 / 255.0;
        }
        let back = rgb_from_png(&rgb_png_bytes(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        let mask = vec![true, false, false, true, true, false];
        let (m, w, h) = mask_from_png(&mask_png_bytes(&mask, 3, 2).unwrap()).unwrap();
        assert_eq!((m, w, h), (mask, 3, 2));
    }
}
