//! Character-logit streams and the per-video-frame feature windows cut from them.
//!
//! A logit stream carries one 29-wide vector per 20 ms of audio. Every video
//! frame is described by the 16 logit rows centred on its timestamp.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Width of one logit vector (size of the recognizer alphabet).
pub const LOGIT_WIDTH: usize = 29;
/// Number of logit rows in one feature window.
pub const WINDOW_LEN: usize = 16;
/// Logit hop in milliseconds.
pub const HOP_MS: u32 = 20;
/// Logit rate implied by the hop.
pub const LOGIT_RATE_HZ: f64 = 1000.0 / HOP_MS as f64;

const MAGIC: &[u8; 4] = b"PLGT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Character logits for one 20 ms audio interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitFrame(pub [f32; LOGIT_WIDTH]);

impl LogitFrame {
    pub fn splat(v: f32) -> Self {
        Self([v; LOGIT_WIDTH])
    }

    pub fn from_slice(values: &[f32]) -> Result<Self> {
        let arr: [f32; LOGIT_WIDTH] = values.try_into().map_err(|_| {
            Error::invalid(format!(
                "logit frame needs {LOGIT_WIDTH} values, got {}",
                values.len()
            ))
        })?;
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logit frame contains a non-finite value"));
        }
        Ok(Self(arr))
    }
}

/// Time-ordered logit frames at a fixed 50 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitStream {
    frames: Vec<LogitFrame>,
}

impl LogitStream {
    pub fn new(frames: Vec<LogitFrame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("logit stream is empty"));
        }
        if let Some(i) = frames
            .iter()
            .position(|f| f.0.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::invalid(format!("logit frame {i} is not finite")));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[LogitFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        LOGIT_RATE_HZ
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames.len() as f64 / LOGIT_RATE_HZ
    }

    /// Number of video frames at `fps` whose centre logit lies inside the stream.
    pub fn video_frame_count(&self, fps: f64) -> usize {
        let mut n = 0;
        while center_logit_index(n, fps) < self.frames.len() {
            n += 1;
        }
        n
    }

    /// Serializes into the binary container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.frames.len() * LOGIT_WIDTH * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        out.extend_from_slice(&(LOGIT_WIDTH as u32).to_le_bytes());
        out.extend_from_slice(&HOP_MS.to_le_bytes());
        for f in &self.frames {
            for v in f.0 {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses either the binary container or the whitespace-separated text variant.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(MAGIC) {
            parse_binary(bytes)
        } else {
            let text = std::str::from_utf8(bytes)
                .map_err(|_| Error::format(None, "neither a binary logit container nor text"))?;
            parse_text(text)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn parse_binary(bytes: &[u8]) -> Result<LogitStream> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(None, "truncated logit header"));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::format(
            None,
            format!("unsupported logit version {version}"),
        ));
    }
    let rows = read_u32(bytes, 8) as usize;
    let width = read_u32(bytes, 12) as usize;
    let hop = read_u32(bytes, 16);
    if width != LOGIT_WIDTH {
        return Err(Error::format(
            None,
            format!("row width {width}, expected {LOGIT_WIDTH}"),
        ));
    }
    if hop != HOP_MS {
        return Err(Error::format(
            None,
            format!("hop {hop} ms, expected {HOP_MS} ms"),
        ));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != rows * width * 4 {
        let complete = body.len() / (width * 4);
        return Err(Error::format(
            Some(complete.min(rows)),
            format!(
                "payload holds {} bytes, header declares {rows} rows",
                body.len()
            ),
        ));
    }
    let mut frames = Vec::with_capacity(rows);
    for (i, chunk) in body.chunks_exact(width * 4).enumerate() {
        let mut arr = [0f32; LOGIT_WIDTH];
        for (dst, b) in arr.iter_mut().zip(chunk.chunks_exact(4)) {
            *dst = f32::from_le_bytes(b.try_into().unwrap());
        }
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(Some(i), "non-finite logit"));
        }
        frames.push(LogitFrame(arr));
    }
    LogitStream::new(frames).map_err(|e| Error::format(None, e.to_string()))
}

fn parse_text(text: &str) -> Result<LogitStream> {
    let mut frames = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let record = frames.len();
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(Some(record), format!("unparsable value: {e}")))?;
        if values.len() != LOGIT_WIDTH {
            return Err(Error::format(
                Some(record),
                format!("row has {} values, expected {LOGIT_WIDTH}", values.len()),
            ));
        }
        let frame = LogitFrame::from_slice(&values)
            .map_err(|e| Error::format(Some(record), e.to_string()))?;
        frames.push(frame);
    }
    LogitStream::new(frames).map_err(|e| Error::format(None, e.to_string()))
}

pub fn load_logit_stream(path: impl AsRef<Path>) -> Result<LogitStream> {
    let bytes = fs::read(path)?;
    LogitStream::from_bytes(&bytes)
}

/// 16 consecutive logit frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureWindow {
    rows: [LogitFrame; WINDOW_LEN],
}

impl AudioFeatureWindow {
    pub fn from_rows(rows: [LogitFrame; WINDOW_LEN]) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[LogitFrame; WINDOW_LEN] {
        &self.rows
    }

    /// Row-major `16 x 29` values.
    pub fn flatten(&self) -> Vec<f32> {
        self.rows.iter().flat_map(|r| r.0).collect()
    }

    pub fn from_flat(values: &[f32]) -> Result<Self> {
        if values.len() != WINDOW_LEN * LOGIT_WIDTH {
            return Err(Error::invalid(format!(
                "feature window needs {} values, got {}",
                WINDOW_LEN * LOGIT_WIDTH,
                values.len()
            )));
        }
        let mut rows = [LogitFrame::splat(0.0); WINDOW_LEN];
        for (r, chunk) in rows.iter_mut().zip(values.chunks_exact(LOGIT_WIDTH)) {
            *r = LogitFrame::from_slice(chunk)?;
        }
        Ok(Self { rows })
    }
}

/// Logit index at the centre of video frame `frame_index` (round half up).
pub fn center_logit_index(frame_index: usize, video_fps: f64) -> usize {
    (frame_index as f64 * LOGIT_RATE_HZ / video_fps + 0.5).floor() as usize
}

/// Cuts the window for one video frame: 8 rows before the centre logit, the
/// centre itself and 7 after. Rows outside the stream repeat the nearest edge.
pub fn window_for_frame(
    stream: &LogitStream,
    frame_index: usize,
    video_fps: f64,
) -> Result<AudioFeatureWindow> {
    if stream.is_empty() {
        return Err(Error::invalid("logit stream is empty"));
    }
    if !(video_fps.is_finite() && video_fps > 0.0) {
        return Err(Error::invalid(format!(
            "video fps must be positive, got {video_fps}"
        )));
    }
    let center = center_logit_index(frame_index, video_fps);
    if center >= stream.len() {
        return Err(Error::invalid(format!(
            "video frame {frame_index} lies beyond the {} logit rows",
            stream.len()
        )));
    }
    let last = stream.len() as isize - 1;
    let mut rows = [LogitFrame::splat(0.0); WINDOW_LEN];
    for (k, row) in rows.iter_mut().enumerate() {
        let idx = (center as isize - (WINDOW_LEN / 2) as isize + k as isize).clamp(0, last);
        *row = stream.frames[idx as usize];
    }
    Ok(AudioFeatureWindow { rows })
}

/// Windows for every video frame the stream covers.
pub fn windows_for_stream(stream: &LogitStream, video_fps: f64) -> Result<Vec<AudioFeatureWindow>> {
    (0..stream.video_frame_count(video_fps))
        .map(|t| window_for_frame(stream, t, video_fps))
        .collect()
}
