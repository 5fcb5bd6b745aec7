//! A small, seed-deterministic vision transformer whose internal components
//! (penultimate-block second linear, final layer normalization) are exposed
//! for distillation and explainability.

mod checkpoint;
mod layers;
mod model;
mod params;

pub use model::{ForwardCache, TinyViT};
pub use params::{Block, LayerNorm, Linear, Parameters};

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Input channels; images are RGB with channel-major layout.
pub const IMAGE_CHANNELS: usize = 3;

/// Architecture hyperparameters of the reference transformer.
///
/// Pre-norm encoder blocks (norm → attention → residual; norm → MLP with
/// GELU → residual), learned absolute position embeddings, a learned class
/// token and a classification head on the final-norm class token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Pixels per side (images are square).
    pub image_size: usize,
    /// Pixels per patch side.
    pub patch_size: usize,
    /// Hidden size H.
    pub hidden_size: usize,
    /// Intermediate size I of the encoder-block expansion.
    pub intermediate_size: usize,
    /// Number of encoder blocks L.
    pub num_layers: usize,
    /// Attention heads per block.
    pub num_heads: usize,
    /// Number of classes C.
    pub num_classes: usize,
    /// Seed for deterministic parameter initialization.
    pub seed: u64,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 {
            return Err(Error::Config("image_size and patch_size must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.intermediate_size < self.hidden_size {
            return Err(Error::Config(format!(
                "intermediate_size {} must be >= hidden_size {}",
                self.intermediate_size, self.hidden_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.num_layers < 2 {
            return Err(Error::Config(
                "num_layers must be >= 2 so a penultimate block exists".into(),
            ));
        }
        Ok(())
    }

    /// Patches per side of the token grid.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Total spatial patches, `(image_size / patch_size)^2`.
    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// Sequence length including the class token.
    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    /// Flattened input dimension of one patch.
    pub fn patch_dim(&self) -> usize {
        IMAGE_CHANNELS * self.patch_size * self.patch_size
    }

    /// 0-based index of the penultimate encoder block, whose second linear
    /// is exposed as (b_o, W_o).
    pub fn penultimate_block(&self) -> usize {
        self.num_layers - 2
    }
}

/// A batch of images with their class labels.
///
/// Pixels are `batch x channels x image_size x image_size` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageBatch<F: Scalar> {
    pub pixels: Array4<F>,
    pub labels: Vec<usize>,
}

impl<F: Scalar> ImageBatch<F> {
    pub fn new(pixels: Array4<F>, labels: Vec<usize>) -> Result<Self> {
        let (b, c, h, w) = pixels.dim();
        if b == 0 {
            return Err(Error::Input("batch must contain at least one image".into()));
        }
        if c != IMAGE_CHANNELS || h != w {
            return Err(Error::Input(format!(
                "expected {IMAGE_CHANNELS}-channel square images, got {c}x{h}x{w}"
            )));
        }
        if labels.len() != b {
            return Err(Error::Input(format!(
                "{} labels for a batch of {b} images",
                labels.len()
            )));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The four parameter groups consumed by distillation method 2:
/// final layer-norm bias/weight and the penultimate-block second linear
/// bias/weight.
#[derive(Debug, Clone)]
pub struct InternalParameters<F: Scalar> {
    /// Final layer-norm bias, length H.
    pub norm_bias: Array1<F>,
    /// Final layer-norm weight, length H.
    pub norm_weight: Array1<F>,
    /// Bias of the penultimate block's second linear, length H.
    pub linear_bias: Array1<F>,
    /// Weight of that linear, H x I (maps intermediate to hidden).
    pub linear_weight: Array2<F>,
}

impl<F: Scalar> InternalParameters<F> {
    pub fn validate(&self) -> Result<()> {
        let h = self.norm_bias.len();
        if self.norm_weight.len() != h
            || self.linear_bias.len() != h
            || self.linear_weight.nrows() != h
        {
            return Err(Error::Input(format!(
                "inconsistent internal parameter shapes: ({}, {}, {}, {}x{})",
                h,
                self.norm_weight.len(),
                self.linear_bias.len(),
                self.linear_weight.nrows(),
                self.linear_weight.ncols()
            )));
        }
        let finite = self.norm_bias.iter().all(|v| v.is_finite())
            && self.norm_weight.iter().all(|v| v.is_finite())
            && self.linear_bias.iter().all(|v| v.is_finite())
            && self.linear_weight.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Input("internal parameters contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn hidden_size(&self) -> usize {
        self.norm_bias.len()
    }
}

/// Activation capture points. These are exactly the two components that
/// distillation method 2 imitates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureSite {
    /// Output of the second linear of the penultimate encoder block,
    /// before the residual add.
    PenultimateLinear,
    /// Output of the final layer normalization.
    FinalNorm,
}

impl CaptureSite {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaptureSite::PenultimateLinear => "penultimate_linear",
            CaptureSite::FinalNorm => "final_norm",
        }
    }
}

impl std::str::FromStr for CaptureSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "penultimate_linear" => Ok(CaptureSite::PenultimateLinear),
            "final_norm" => Ok(CaptureSite::FinalNorm),
            other => Err(Error::Input(format!("unknown capture site '{other}'"))),
        }
    }
}

/// Activations captured at a named site. Token 0 is the class token; the
/// remaining tokens reshape to a square grid.
#[derive(Debug, Clone)]
pub struct TokenStates<F: Scalar> {
    pub site: CaptureSite,
    /// `batch x (1 + num_patches) x hidden_size`.
    pub states: Array3<F>,
}
