use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

pub const FEATURE_CHANNELS: usize = 4;
pub const SEQUENCE_LENGTH: usize = 40;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fcn,
    Resnet,
    Tcnn,
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Fcn, ModelKind::Resnet, ModelKind::Tcnn, ModelKind::Lstm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fcn => "fcn",
            ModelKind::Resnet => "resnet",
            ModelKind::Tcnn => "tcnn",
            ModelKind::Lstm => "lstm",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Fcn => "FCN",
            ModelKind::Resnet => "ResNet",
            ModelKind::Tcnn => "TCNN",
            ModelKind::Lstm => "LSTM",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fcn" => Ok(ModelKind::Fcn),
            "resnet" => Ok(ModelKind::Resnet),
            "tcnn" => Ok(ModelKind::Tcnn),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(format!("unknown model '{other}' (expected fcn, resnet, tcnn or lstm)")),
        }
    }
}

/// Architecture hyperparameters, one variant per model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Architecture {
    /// Three conv + batch-norm + ReLU blocks, global average pooling, dense.
    Fcn { filters: [usize; 3], kernels: [usize; 3] },
    /// Residual blocks of three conv + batch-norm stages each.
    Resnet { blocks: usize, filters: usize, kernels: [usize; 3] },
    /// Two sigmoid conv layers, local average pooling, dense.
    Tcnn {
        filters: [usize; 2],
        kernel: usize,
        pool: usize,
        pool_stride: usize,
    },
    /// Two [pool, dropout, conv] stages feeding stacked LSTM layers.
    Lstm {
        conv_filters: usize,
        conv_kernel: usize,
        pool: usize,
        pool_stride: usize,
        dropout: f64,
        units: usize,
        lstm_layers: usize,
    },
}

impl Architecture {
    pub fn kind(&self) -> ModelKind {
        match self {
            Architecture::Fcn { .. } => ModelKind::Fcn,
            Architecture::Resnet { .. } => ModelKind::Resnet,
            Architecture::Tcnn { .. } => ModelKind::Tcnn,
            Architecture::Lstm { .. } => ModelKind::Lstm,
        }
    }

    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Fcn => Architecture::Fcn {
                filters: [128, 256, 128],
                kernels: [8, 5, 3],
            },
            ModelKind::Resnet => Architecture::Resnet {
                blocks: 3,
                filters: 64,
                kernels: [8, 5, 3],
            },
            ModelKind::Tcnn => Architecture::Tcnn {
                filters: [6, 12],
                kernel: 7,
                pool: 3,
                pool_stride: 3,
            },
            ModelKind::Lstm => Architecture::Lstm {
                conv_filters: 64,
                conv_kernel: 3,
                pool: 3,
                pool_stride: 1,
                dropout: 0.2,
                units: 32,
                lstm_layers: 2,
            },
        }
    }
}

/// Declarative description of one classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub sequence_length: usize,
    pub num_classes: usize,
    pub architecture: Architecture,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            input_channels: FEATURE_CHANNELS,
            sequence_length: SEQUENCE_LENGTH,
            num_classes: NUM_CLASSES,
            architecture: Architecture::default_for(kind),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.architecture.kind()
    }

    /// Canonical single-line text form.
    pub fn to_canonical(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_canonical(text: &str) -> Result<Self, ModelError> {
        let spec: ModelSpec =
            serde_json::from_str(text).map_err(|e| ModelError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidSpec(msg.to_string()));
        if self.input_channels == 0 || self.sequence_length == 0 {
            return bad("input channels and sequence length must be positive");
        }
        if self.num_classes != NUM_CLASSES {
            return bad("only two-class (normal/broken) heads are supported");
        }
        match &self.architecture {
            Architecture::Fcn { filters, kernels } => {
                if filters.contains(&0) || kernels.contains(&0) {
                    return bad("fcn filters and kernels must be positive");
                }
            }
            Architecture::Resnet { blocks, filters, kernels } => {
                if *blocks == 0 || *filters == 0 || kernels.contains(&0) {
                    return bad("resnet blocks, filters and kernels must be positive");
                }
            }
            Architecture::Tcnn { filters, kernel, pool, pool_stride } => {
                if filters.contains(&0) || *kernel == 0 || *pool == 0 || *pool_stride == 0 {
                    return bad("tcnn filters, kernel and pooling must be positive");
                }
            }
            Architecture::Lstm { conv_filters, conv_kernel, pool, pool_stride, dropout, units, lstm_layers } => {
                if *conv_filters == 0 || *conv_kernel == 0 || *pool == 0 || *pool_stride == 0 || *units == 0 || *lstm_layers == 0 {
                    return bad("lstm sizes must be positive");
                }
                if !(0.0..1.0).contains(dropout) {
                    return bad("dropout rate must lie in [0, 1)");
                }
            }
        }
        let lengths = super::temporal_lengths(self);
        if lengths.iter().any(|(_, len)| *len == 0) {
            return bad("sequence too short for the architecture");
        }
        Ok(())
    }
}
