//! Time-series to image encoding.
//!
//! A trial is grouped into a 12 sensors x frames x 3 axes matrix. Each axis
//! becomes one colour plane. Within a plane the samples are laid out
//! time-major (`k = frame * 12 + sensor`, so one instant's 12 sensor readings
//! are contiguous) and line-wrapped into rows of `width` cells. Cells past
//! `12 * frames` are padding.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::signal::{TrialRecording, AXES, CHANNELS, SENSORS};

pub const SENSOR_NAMES: [&str; SENSORS] = [
    "side-accel",
    "side-gyro",
    "lwrist-accel",
    "lwrist-gyro",
    "rwrist-accel",
    "rwrist-gyro",
    "back-accel",
    "back-gyro",
    "arm-accel",
    "arm-gyro",
    "thigh-accel",
    "thigh-gyro",
];

pub const DEFAULT_WIDTH: usize = 95;
pub const PAD_VALUE: f64 = 0.0;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("expected {CHANNELS} channels, got {0}")]
    ChannelCount(usize),
    #[error("image width must be at least {SENSORS}, got {0}")]
    Width(usize),
    #[error("attribution is {got_h}x{got_w}, image is {h}x{w}")]
    ShapeMismatch { got_h: usize, got_w: usize, h: usize, w: usize },
    #[error("io error writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Trial regrouped as `[sensor][frame][axis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    frames: usize,
    values: Vec<f64>,
}

impl ChannelMatrix {
    pub fn zeros(frames: usize) -> Self {
        Self { frames, values: vec![0.0; SENSORS * frames * AXES] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> [usize; 3] {
        [SENSORS, self.frames, AXES]
    }

    fn offset(&self, sensor: usize, frame: usize, axis: usize) -> usize {
        (sensor * self.frames + frame) * AXES + axis
    }

    pub fn get(&self, sensor: usize, frame: usize, axis: usize) -> f64 {
        self.values[self.offset(sensor, frame, axis)]
    }

    pub fn set(&mut self, sensor: usize, frame: usize, axis: usize, v: f64) {
        let i = self.offset(sensor, frame, axis);
        self.values[i] = v;
    }

    /// Back to 36 channel sequences, channel `3s + k` for sensor `s`, axis `k`.
    pub fn to_channels(&self) -> Vec<Vec<f64>> {
        (0..CHANNELS).map(|c| (0..self.frames).map(|t| self.get(c / AXES, t, c % AXES)).collect()).collect()
    }
}

pub fn to_channel_matrix(t: &TrialRecording) -> Result<ChannelMatrix, ImagingError> {
    channels_to_matrix(&t.channels)
}

pub fn channels_to_matrix(channels: &[Vec<f64>]) -> Result<ChannelMatrix, ImagingError> {
    if channels.len() != CHANNELS {
        return Err(ImagingError::ChannelCount(channels.len()));
    }
    let frames = channels[0].len();
    let mut m = ChannelMatrix::zeros(frames);
    for (c, seq) in channels.iter().enumerate() {
        for (t, &v) in seq.iter().enumerate() {
            m.set(c / AXES, t, c % AXES, v);
        }
    }
    Ok(m)
}

/// Network input image, `[row][col][axis]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Flat index of the first padding cell in every plane.
    pub pad_start: usize,
    pub pixels: Vec<f64>,
}

impl EncodedImage {
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, AXES]
    }

    pub fn pixel(&self, row: usize, col: usize, axis: usize) -> f64 {
        self.pixels[(row * self.width + col) * AXES + axis]
    }

    pub fn pad_cells(&self) -> usize {
        self.height * self.width - self.pad_start
    }

    /// Image cell holding sample `(sensor, frame)`.
    pub fn cell_of(&self, sensor: usize, frame: usize) -> (usize, usize) {
        cell_of(sensor, frame, self.width)
    }

    /// Sample stored at a cell, `None` for padding.
    pub fn source_of(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        let k = row * self.width + col;
        (k < self.pad_start).then(|| (k % SENSORS, k / SENSORS))
    }

    /// Writes a binary PPM, each plane mapped from the image's global
    /// min/max onto 0..=255.
    pub fn write_ppm(&self, path: &Path) -> Result<(), ImagingError> {
        let bytes = quantize(&self.pixels);
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&bytes);
        write_file(path, &out)
    }
}

pub fn cell_of(sensor: usize, frame: usize, width: usize) -> (usize, usize) {
    let k = frame * SENSORS + sensor;
    (k / width, k % width)
}

pub fn image_height(frames: usize, width: usize) -> usize {
    (SENSORS * frames).div_ceil(width)
}

pub fn wrap_image(m: &ChannelMatrix, width: usize) -> Result<EncodedImage, ImagingError> {
    if width < SENSORS {
        return Err(ImagingError::Width(width));
    }
    let frames = m.frames();
    let height = image_height(frames, width);
    let mut pixels = vec![PAD_VALUE; height * width * AXES];
    for t in 0..frames {
        for s in 0..SENSORS {
            let k = t * SENSORS + s;
            for a in 0..AXES {
                pixels[k * AXES + a] = m.get(s, t, a);
            }
        }
    }
    Ok(EncodedImage { height, width, frames, pad_start: SENSORS * frames, pixels })
}

/// Routes a per-cell map back to `[sensor][frame]`, discarding padding.
pub fn unwrap_attribution(a: &[Vec<f64>], img: &EncodedImage) -> Result<Vec<Vec<f64>>, ImagingError> {
    let got_w = a.first().map_or(0, Vec::len);
    if a.len() != img.height || a.iter().any(|r| r.len() != img.width) {
        return Err(ImagingError::ShapeMismatch { got_h: a.len(), got_w, h: img.height, w: img.width });
    }
    let mut out = vec![vec![0.0; img.frames]; SENSORS];
    for t in 0..img.frames {
        for (s, row) in out.iter_mut().enumerate() {
            let (r, c) = img.cell_of(s, t);
            row[t] = a[r][c];
        }
    }
    Ok(out)
}

/// Extracts one axis plane as `[row][col]`.
pub fn plane(img: &EncodedImage, axis: usize) -> Vec<Vec<f64>> {
    (0..img.height).map(|r| (0..img.width).map(|c| img.pixel(r, c, axis)).collect()).collect()
}

/// Affine map of `values` from their min/max onto 0..=255; a zero range maps
/// everything to 128.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values.iter().map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 128 }).collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ImagingError> {
    let io = |source| ImagingError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}
