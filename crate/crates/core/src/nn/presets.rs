use std::fmt;
use std::str::FromStr;

use super::spec::{Activation, LayerSpec};

/// Name-addressable model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    /// VGG-B derived stack with 2x2 average pooling.
    VggBAvg,
    /// Identical to `VggBAvg` except for max pooling.
    VggBMax,
    /// Two convolutions straight into the softmax output, no pooling or dense layer.
    SimpleCnn,
    /// Fully connected network on the flattened image.
    Mlp,
}

/// Width knobs shared by the presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchSize {
    pub conv_filters: [usize; 3],
    pub dense_units: usize,
}

impl ArchSize {
    /// 32/64/128 filters, 1024 dense units.
    pub const FULL: ArchSize = ArchSize { conv_filters: [32, 64, 128], dense_units: 1024 };
    /// Reduced widths for quick runs on small images.
    pub const DESK: ArchSize = ArchSize { conv_filters: [8, 16, 32], dense_units: 128 };
}

impl ModelPreset {
    pub const ALL: [ModelPreset; 4] = [Self::VggBAvg, Self::VggBMax, Self::SimpleCnn, Self::Mlp];

    pub fn name(self) -> &'static str {
        match self {
            Self::VggBAvg => "vgg_b_avg",
            Self::VggBMax => "vgg_b_max",
            Self::SimpleCnn => "simple_cnn",
            Self::Mlp => "mlp",
        }
    }

    pub fn layers(self, size: ArchSize, classes: usize, dropout: f64, l2_lambda: f64) -> Vec<LayerSpec> {
        let [f1, f2, f3] = size.conv_filters;
        let conv = |filters| LayerSpec::Conv2d { filters };
        let drop = LayerSpec::Dropout { rate: dropout };
        let out = LayerSpec::SoftmaxOutput { classes, l2_lambda };
        match self {
            Self::VggBAvg | Self::VggBMax => {
                let pool = if self == Self::VggBAvg { LayerSpec::AvgPool } else { LayerSpec::MaxPool };
                vec![
                    conv(f1),
                    pool.clone(),
                    drop.clone(),
                    conv(f2),
                    conv(f2),
                    pool.clone(),
                    drop.clone(),
                    conv(f3),
                    conv(f3),
                    pool,
                    drop.clone(),
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: size.dense_units, activation: Activation::Relu },
                    LayerSpec::batch_norm(),
                    drop,
                    out,
                ]
            }
            Self::SimpleCnn => vec![conv(f1), conv(f2), LayerSpec::Flatten, out],
            Self::Mlp => vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: size.dense_units, activation: Activation::Relu },
                drop.clone(),
                LayerSpec::Dense { units: (size.dense_units / 2).max(1), activation: Activation::Relu },
                drop,
                out,
            ],
        }
    }
}

impl fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelPreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown model preset `{s}` (expected vgg_b_avg, vgg_b_max, simple_cnn or mlp)"))
    }
}
