//! Small convolutional feature extractor and the 3×3 region slicing of its
//! final feature map.

use serde::{Deserialize, Serialize};

use crate::model::{BoundParams, ModelError};
use crate::real::Real;
use crate::tensor::{Tape, TensorError, Var};

/// One conv → ReLU → max-pool block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

impl Stage {
    pub fn new(out_channels: usize) -> Self {
        Stage {
            out_channels,
            kernel: 3,
            pool: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub stages: Vec<Stage>,
    pub global_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 1,
            input_size: 48,
            stages: vec![Stage::new(16), Stage::new(32), Stage::new(64)],
            global_dim: 128,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(ModelError::Config(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if self.stages.is_empty() {
            return Err(ModelError::Config("backbone needs at least one stage".into()));
        }
        if self.global_dim == 0 {
            return Err(ModelError::Config("global_dim must be positive".into()));
        }
        let mut size = self.input_size;
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.kernel % 2 == 0 || s.pool == 0 {
                return Err(ModelError::Config(format!(
                    "stage {i}: channels and pool must be positive and the kernel odd, got {s:?}"
                )));
            }
            if size < s.pool {
                return Err(ModelError::Config(format!(
                    "stage {i}: spatial size {size} smaller than pool window {}",
                    s.pool
                )));
            }
            size /= s.pool;
        }
        if size < 3 || size % 3 != 0 {
            return Err(ModelError::Config(format!(
                "final feature map is {size}×{size}; it must be at least 3 and divisible by 3"
            )));
        }
        Ok(())
    }

    /// Side length of the final feature map.
    pub fn feature_size(&self) -> usize {
        self.stages.iter().fold(self.input_size, |s, st| s / st.pool)
    }

    /// Channels of the final feature map, which is also the node vector length.
    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(self.input_channels, |s| s.out_channels)
    }

    pub fn flattened_len(&self) -> usize {
        let s = self.feature_size();
        self.feature_channels() * s * s
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_size, self.input_size]
    }
}

/// Nine region vectors plus the whole-image vector, all on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureGrid {
    /// `[9 × C]`, row-major regions: row 0 is the top-left cell.
    pub nodes: Var,
    /// `[global_dim]`.
    pub global: Var,
}

pub fn conv_weight_name(stage: usize) -> String {
    format!("backbone.conv{stage}.weight")
}

pub fn conv_bias_name(stage: usize) -> String {
    format!("backbone.conv{stage}.bias")
}

pub const GLOBAL_WEIGHT: &str = "backbone.global.weight";
pub const GLOBAL_BIAS: &str = "backbone.global.bias";

/// Runs the conv stages, returning the final `[C_f×H_f×W_f]` map and the
/// ReLU dense projection of its flattening.
pub fn forward_features<T: Real>(
    tape: &mut Tape<'_, T>,
    image: Var,
    params: &BoundParams,
    config: &BackboneConfig,
) -> Result<(Var, Var), ModelError> {
    let shape = tape.shape(image)?;
    if shape != config.input_shape() {
        return Err(ModelError::Config(format!(
            "image shape {shape:?} does not match configured input {:?}",
            config.input_shape()
        )));
    }
    let mut x = image;
    for (i, stage) in config.stages.iter().enumerate() {
        let w = params.get(&conv_weight_name(i))?;
        let b = params.get(&conv_bias_name(i))?;
        x = tape.conv2d(x, w, 1, stage.kernel / 2)?;
        x = tape.add_channel_bias(x, b)?;
        x = tape.relu(x)?;
        x = tape.max_pool2d(x, stage.pool, stage.pool)?;
    }
    let feature_map = x;
    let flat = tape.flatten(feature_map)?;
    let n = tape.value(flat)?.len();
    let column = tape.reshape(flat, &[n, 1])?;
    let projected = tape.matmul(params.get(GLOBAL_WEIGHT)?, column)?;
    let projected = tape.reshape(projected, &[config.global_dim])?;
    let projected = tape.add(projected, params.get(GLOBAL_BIAS)?)?;
    let global = tape.relu(projected)?;
    Ok((feature_map, global))
}

/// Mean of each cell of a uniform 3×3 partition of `feature_map[C×H×W]`,
/// returned as `[9 × C]` with rows in row-major cell order.
pub fn slice_feature_map<T: Real>(
    tape: &mut Tape<'_, T>,
    feature_map: Var,
) -> Result<Var, TensorError> {
    let s = tape.shape(feature_map)?.to_vec();
    if s.len() != 3 || s[1] % 3 != 0 || s[2] % 3 != 0 {
        return Err(TensorError::Shape {
            op: "slice_feature_map",
            lhs: s.clone(),
            rhs: vec![s.first().copied().unwrap_or(0), 3, 3],
        });
    }
    let (c, ch, cw) = (s[0], s[1] / 3, s[2] / 3);
    let cells = tape.avg_pool2d(feature_map, (ch, cw), (ch, cw))?;
    let cells = tape.reshape(cells, &[c, 9])?;
    tape.transpose(cells)
}

/// Feature map, slicing and global vector in one call.
pub fn extract_grid<T: Real>(
    tape: &mut Tape<'_, T>,
    image: Var,
    params: &BoundParams,
    config: &BackboneConfig,
) -> Result<FeatureGrid, ModelError> {
    let (feature_map, global) = forward_features(tape, image, params, config)?;
    let nodes = slice_feature_map(tape, feature_map)?;
    Ok(FeatureGrid { nodes, global })
}
