//! Gradient saliency of a class score with respect to the input image, and
//! its aggregation onto sensors.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::imaging::{quantize, unwrap_attribution, write_file, EncodedImage, ImagingError, SENSOR_NAMES};
use crate::nn::{Model, NnError, Pass, Tensor};
use crate::signal::{AXES, SENSORS};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("class {index} out of range for {classes} classes")]
    Class { index: usize, classes: usize },
    #[error("image shape {image:?} does not match model input {model:?}")]
    Shape { image: Vec<usize>, model: Vec<usize> },
    #[error("cannot average an empty set of saliency maps")]
    NoMaps,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Gradient of one class's pre-softmax score with respect to every input
/// pixel, plus its channel-wise max-abs magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub class_index: usize,
    /// `[row][col][axis]`
    pub w: Vec<f64>,
    /// `[row][col]`
    pub magnitude: Vec<f64>,
}

impl SaliencyMap {
    fn from_gradient(height: usize, width: usize, class_index: usize, w: Vec<f64>) -> Self {
        let magnitude = w.chunks(AXES).map(|px| px.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect();
        Self { height, width, class_index, w, magnitude }
    }

    pub fn magnitude_rows(&self) -> Vec<Vec<f64>> {
        self.magnitude.chunks(self.width).map(|r| r.to_vec()).collect()
    }

    /// Binary PGM of `magnitude`, affinely mapped onto 0..=255 (all 128 when
    /// the map is constant).
    pub fn write_pgm(&self, path: &Path) -> Result<(), SaliencyError> {
        Ok(write_pgm(&self.magnitude, self.height, self.width, path)?)
    }
}

pub fn pgm_bytes(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&quantize(values));
    out
}

pub fn write_pgm(values: &[f64], height: usize, width: usize, path: &Path) -> Result<(), ImagingError> {
    write_file(path, &pgm_bytes(values, height, width))
}

/// `∂S_c/∂I` at the given image, with S_c the logit of `class_index` and the
/// network in inference mode.
pub fn class_score_gradient(
    model: &Model,
    img: &EncodedImage,
    class_index: usize,
) -> Result<SaliencyMap, SaliencyError> {
    let shape = img.shape().to_vec();
    if model.input_shape() != shape.as_slice() {
        return Err(SaliencyError::Shape { image: shape, model: model.input_shape().to_vec() });
    }
    let w = input_gradient(model, &img.pixels, class_index)?;
    Ok(SaliencyMap::from_gradient(img.height, img.width, class_index, w))
}

/// Logit gradient for an arbitrary single input of the model's input shape.
pub fn input_gradient(model: &Model, input: &[f64], class_index: usize) -> Result<Vec<f64>, SaliencyError> {
    let classes = model.classes();
    if class_index >= classes {
        return Err(SaliencyError::Class { index: class_index, classes });
    }
    let x = Tensor::stack(&[input], model.input_shape())?;
    let trace = model.forward(&x, Pass::Infer)?;
    let mut seed = Tensor::zeros(&[1, classes]);
    seed.data_mut()[class_index] = 1.0;
    let g = model.backward(&trace, &seed, true)?;
    Ok(g.input.expect("input gradient requested").into_data())
}

/// Element-wise mean of maps of one class and shape.
pub fn mean_map(maps: &[SaliencyMap]) -> Result<SaliencyMap, SaliencyError> {
    let first = maps.first().ok_or(SaliencyError::NoMaps)?;
    let mut w = vec![0.0; first.w.len()];
    let mut magnitude = vec![0.0; first.magnitude.len()];
    for m in maps {
        if m.w.len() != w.len() {
            return Err(SaliencyError::Shape {
                image: vec![m.height, m.width],
                model: vec![first.height, first.width],
            });
        }
        w.iter_mut().zip(&m.w).for_each(|(a, b)| *a += b);
        magnitude.iter_mut().zip(&m.magnitude).for_each(|(a, b)| *a += b);
    }
    let n = maps.len() as f64;
    w.iter_mut().for_each(|v| *v /= n);
    magnitude.iter_mut().for_each(|v| *v /= n);
    Ok(SaliencyMap { height: first.height, width: first.width, class_index: first.class_index, w, magnitude })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorAttribution {
    /// Summed magnitude per sensor.
    pub totals: [f64; SENSORS],
    /// `[sensor][frame]`
    pub per_frame: Vec<Vec<f64>>,
    /// Sensor indices, largest total first (lower index first on ties).
    pub ranking: Vec<usize>,
}

impl SensorAttribution {
    pub fn rank_of(&self, sensor: usize) -> usize {
        self.ranking.iter().position(|&s| s == sensor).expect("every sensor is ranked")
    }

    /// `sensor,name,total,rank` rows, rank 1 being the most salient.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut s = String::new();
        for c in comments {
            let _ = writeln!(s, "# {c}");
        }
        s.push_str("sensor,name,total,rank\n");
        for (i, name) in SENSOR_NAMES.iter().enumerate() {
            let _ = writeln!(s, "{i},{name},{:e},{}", self.totals[i], self.rank_of(i) + 1);
        }
        s
    }
}

/// Routes the magnitude map back to (sensor, frame) and ranks sensors.
pub fn sensor_attribution(s: &SaliencyMap, img: &EncodedImage) -> Result<SensorAttribution, SaliencyError> {
    let per_frame = unwrap_attribution(&s.magnitude_rows(), img)?;
    let mut totals = [0.0; SENSORS];
    for (t, row) in totals.iter_mut().zip(&per_frame) {
        *t = row.iter().sum();
    }
    let mut ranking: Vec<usize> = (0..SENSORS).collect();
    ranking.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    Ok(SensorAttribution { totals, per_frame, ranking })
}
