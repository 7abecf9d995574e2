use std::fmt;
use std::str::FromStr;

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// One entry of a model's layer stack.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// 3x3 kernel, stride 1, same padding, followed by ReLU.
    Conv2d {
        filters: usize,
    },
    /// 2x2 window, stride 2.
    AvgPool,
    /// 2x2 window, stride 2.
    MaxPool,
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
    BatchNorm {
        momentum: f64,
        epsilon: f64,
    },
    /// Final dense layer plus softmax. `l2_lambda` weights the L2 penalty on
    /// this layer's weight matrix, the only regularized parameters.
    SoftmaxOutput {
        classes: usize,
        l2_lambda: f64,
    },
}

impl LayerSpec {
    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm { momentum: 0.9, epsilon: 1e-5 }
    }

    /// Same layer with max pooling swapped for average pooling and vice versa.
    pub fn swap_pooling(&self) -> Self {
        match self {
            LayerSpec::AvgPool => LayerSpec::MaxPool,
            LayerSpec::MaxPool => LayerSpec::AvgPool,
            other => other.clone(),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d { filters } => write!(f, "conv2d {filters}"),
            LayerSpec::AvgPool => write!(f, "avgpool"),
            LayerSpec::MaxPool => write!(f, "maxpool"),
            LayerSpec::Dropout { rate } => write!(f, "dropout {rate}"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Dense { units, activation } => {
                let act = match activation {
                    Activation::Relu => "relu",
                    Activation::None => "none",
                };
                write!(f, "dense {units} {act}")
            }
            LayerSpec::BatchNorm { momentum, epsilon } => write!(f, "batchnorm {momentum} {epsilon}"),
            LayerSpec::SoftmaxOutput { classes, l2_lambda } => write!(f, "softmax {classes} {l2_lambda}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = NnError;

    fn from_str(line: &str) -> Result<Self, NnError> {
        let bad = || NnError::Spec(format!("unrecognized layer `{line}`"));
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<f64, NnError> { tokens.get(i).and_then(|t| t.parse().ok()).ok_or_else(bad) };
        let int = |i: usize| -> Result<usize, NnError> { tokens.get(i).and_then(|t| t.parse().ok()).ok_or_else(bad) };
        let spec = match tokens.first().copied() {
            Some("conv2d") if tokens.len() == 2 => LayerSpec::Conv2d { filters: int(1)? },
            Some("avgpool") if tokens.len() == 1 => LayerSpec::AvgPool,
            Some("maxpool") if tokens.len() == 1 => LayerSpec::MaxPool,
            Some("dropout") if tokens.len() == 2 => LayerSpec::Dropout { rate: num(1)? },
            Some("flatten") if tokens.len() == 1 => LayerSpec::Flatten,
            Some("dense") if tokens.len() == 3 => {
                let activation = match tokens[2] {
                    "relu" => Activation::Relu,
                    "none" => Activation::None,
                    _ => return Err(bad()),
                };
                LayerSpec::Dense { units: int(1)?, activation }
            }
            Some("batchnorm") if tokens.len() == 3 => LayerSpec::BatchNorm { momentum: num(1)?, epsilon: num(2)? },
            Some("softmax") if tokens.len() == 3 => LayerSpec::SoftmaxOutput { classes: int(1)?, l2_lambda: num(2)? },
            _ => return Err(bad()),
        };
        Ok(spec)
    }
}

/// Text form of a full stack: an `input H W C` line, then one layer per line.
pub fn format_stack(input_shape: &[usize], layers: &[LayerSpec]) -> String {
    let dims: Vec<String> = input_shape.iter().map(|d| d.to_string()).collect();
    let mut out = format!("input {}\n", dims.join(" "));
    for l in layers {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}

pub fn parse_stack(text: &str) -> Result<(Vec<usize>, Vec<LayerSpec>), NnError> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| NnError::Spec("empty layer stack".into()))?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some("input") {
        return Err(NnError::Spec(format!("expected `input ...` line, got `{header}`")));
    }
    let input = tokens
        .map(|t| t.parse::<usize>().map_err(|_| NnError::Spec(format!("bad input dimension `{t}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    let layers = lines.map(str::parse).collect::<Result<Vec<_>, _>>()?;
    Ok((input, layers))
}
