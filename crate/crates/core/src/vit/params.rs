//! Parameter containers for the reference transformer. The same struct
//! doubles as a gradient accumulator, so the optimizer can walk parameters
//! and gradients in lockstep through the flat views.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::ViTConfig;
use crate::scalar::Scalar;

/// Fully connected layer; `weight` is `(out, in)` so `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    /// Fan-in scaled uniform init, U(-1/sqrt(in), 1/sqrt(in)) for both
    /// weight and bias.
    fn init(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let mut layer = Self::zeros(out, inp);
        for v in layer.weight.iter_mut() {
            *v = F::cast(rng.gen_range(-bound..bound));
        }
        for v in layer.bias.iter_mut() {
            *v = F::cast(rng.gen_range(-bound..bound));
        }
        layer
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }
}

/// Per-token layer normalization over the hidden axis.
#[derive(Debug, Clone)]
pub struct LayerNorm<F: Scalar> {
    pub weight: Array1<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> LayerNorm<F> {
    /// Weights init to ones, biases to zeros.
    fn ones(h: usize) -> Self {
        Self {
            weight: Array1::ones(h),
            bias: Array1::zeros(h),
        }
    }

    fn zeros(h: usize) -> Self {
        Self {
            weight: Array1::zeros(h),
            bias: Array1::zeros(h),
        }
    }
}

/// One pre-norm encoder block.
#[derive(Debug, Clone)]
pub struct Block<F: Scalar> {
    pub norm1: LayerNorm<F>,
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub attn_out: Linear<F>,
    pub norm2: LayerNorm<F>,
    pub mlp_in: Linear<F>,
    /// Second linear of the MLP, `(H, I)`; block L-2 exposes this as
    /// (b_o, W_o).
    pub mlp_out: Linear<F>,
}

impl<F: Scalar> Block<F> {
    fn zeros(h: usize, i: usize) -> Self {
        Self {
            norm1: LayerNorm::zeros(h),
            query: Linear::zeros(h, h),
            key: Linear::zeros(h, h),
            value: Linear::zeros(h, h),
            attn_out: Linear::zeros(h, h),
            norm2: LayerNorm::zeros(h),
            mlp_in: Linear::zeros(i, h),
            mlp_out: Linear::zeros(h, i),
        }
    }

    fn init(h: usize, i: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: LayerNorm::ones(h),
            query: Linear::init(h, h, rng),
            key: Linear::init(h, h, rng),
            value: Linear::init(h, h, rng),
            attn_out: Linear::init(h, h, rng),
            norm2: LayerNorm::ones(h),
            mlp_in: Linear::init(i, h, rng),
            mlp_out: Linear::init(h, i, rng),
        }
    }
}

/// Every learnable tensor of the model, in a fixed traversal order.
#[derive(Debug, Clone)]
pub struct Parameters<F: Scalar> {
    pub patch: Linear<F>,
    pub cls_token: Array1<F>,
    pub pos_embed: Array2<F>,
    pub blocks: Vec<Block<F>>,
    pub final_norm: LayerNorm<F>,
    pub head: Linear<F>,
}

impl<F: Scalar> Parameters<F> {
    pub fn zeros(config: &ViTConfig) -> Self {
        let h = config.hidden_size;
        let i = config.intermediate_size;
        Self {
            patch: Linear::zeros(h, config.patch_dim()),
            cls_token: Array1::zeros(h),
            pos_embed: Array2::zeros((config.num_tokens(), h)),
            blocks: (0..config.num_layers).map(|_| Block::zeros(h, i)).collect(),
            final_norm: LayerNorm::zeros(h),
            head: Linear::zeros(config.num_classes, h),
        }
    }

    /// Deterministic initialization from the config seed. Draw order is
    /// fixed, so equal configs yield bit-identical parameters.
    pub fn init(config: &ViTConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = config.hidden_size;
        let i = config.intermediate_size;
        let patch = Linear::init(h, config.patch_dim(), rng);
        let mut cls_token = Array1::zeros(h);
        for v in cls_token.iter_mut() {
            *v = F::cast(rng.gen_range(-0.02..0.02));
        }
        let mut pos_embed = Array2::zeros((config.num_tokens(), h));
        for v in pos_embed.iter_mut() {
            *v = F::cast(rng.gen_range(-0.02..0.02));
        }
        let blocks = (0..config.num_layers).map(|_| Block::init(h, i, rng)).collect();
        Self {
            patch,
            cls_token,
            pos_embed,
            blocks,
            final_norm: LayerNorm::ones(h),
            head: Linear::init(config.num_classes, h, rng),
        }
    }

    /// Named tensors in traversal order: `(name, shape, values)`.
    pub fn named(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let push1 = |out: &mut Vec<_>, name: String, a: &Array1<F>| {
            out.push((name, vec![a.len()], a.iter().map(|v| v.as_f64()).collect()));
        };
        let push2 = |out: &mut Vec<_>, name: String, a: &Array2<F>| {
            out.push((
                name,
                vec![a.nrows(), a.ncols()],
                a.iter().map(|v| v.as_f64()).collect(),
            ));
        };
        push2(&mut out, "patch.weight".into(), &self.patch.weight);
        push1(&mut out, "patch.bias".into(), &self.patch.bias);
        push1(&mut out, "cls_token".into(), &self.cls_token);
        push2(&mut out, "pos_embed".into(), &self.pos_embed);
        for (b, block) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{b}");
            push1(&mut out, format!("{p}.norm1.weight"), &block.norm1.weight);
            push1(&mut out, format!("{p}.norm1.bias"), &block.norm1.bias);
            for (tag, lin) in [
                ("query", &block.query),
                ("key", &block.key),
                ("value", &block.value),
                ("attn_out", &block.attn_out),
            ] {
                push2(&mut out, format!("{p}.{tag}.weight"), &lin.weight);
                push1(&mut out, format!("{p}.{tag}.bias"), &lin.bias);
            }
            push1(&mut out, format!("{p}.norm2.weight"), &block.norm2.weight);
            push1(&mut out, format!("{p}.norm2.bias"), &block.norm2.bias);
            push2(&mut out, format!("{p}.mlp_in.weight"), &block.mlp_in.weight);
            push1(&mut out, format!("{p}.mlp_in.bias"), &block.mlp_in.bias);
            push2(&mut out, format!("{p}.mlp_out.weight"), &block.mlp_out.weight);
            push1(&mut out, format!("{p}.mlp_out.bias"), &block.mlp_out.bias);
        }
        push1(&mut out, "final_norm.weight".into(), &self.final_norm.weight);
        push1(&mut out, "final_norm.bias".into(), &self.final_norm.bias);
        push2(&mut out, "head.weight".into(), &self.head.weight);
        push1(&mut out, "head.bias".into(), &self.head.bias);
        out
    }

    /// Flat mutable slices over every tensor, in the same order as
    /// [`Parameters::named`]. Arrays are always stored contiguously.
    pub fn flat_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = Vec::new();
        out.push(self.patch.weight.as_slice_mut().expect("contiguous"));
        out.push(self.patch.bias.as_slice_mut().expect("contiguous"));
        out.push(self.cls_token.as_slice_mut().expect("contiguous"));
        out.push(self.pos_embed.as_slice_mut().expect("contiguous"));
        for block in &mut self.blocks {
            out.push(block.norm1.weight.as_slice_mut().expect("contiguous"));
            out.push(block.norm1.bias.as_slice_mut().expect("contiguous"));
            for lin in [
                &mut block.query,
                &mut block.key,
                &mut block.value,
                &mut block.attn_out,
            ] {
                out.push(lin.weight.as_slice_mut().expect("contiguous"));
                out.push(lin.bias.as_slice_mut().expect("contiguous"));
            }
            out.push(block.norm2.weight.as_slice_mut().expect("contiguous"));
            out.push(block.norm2.bias.as_slice_mut().expect("contiguous"));
            out.push(block.mlp_in.weight.as_slice_mut().expect("contiguous"));
            out.push(block.mlp_in.bias.as_slice_mut().expect("contiguous"));
            out.push(block.mlp_out.weight.as_slice_mut().expect("contiguous"));
            out.push(block.mlp_out.bias.as_slice_mut().expect("contiguous"));
        }
        out.push(self.final_norm.weight.as_slice_mut().expect("contiguous"));
        out.push(self.final_norm.bias.as_slice_mut().expect("contiguous"));
        out.push(self.head.weight.as_slice_mut().expect("contiguous"));
        out.push(self.head.bias.as_slice_mut().expect("contiguous"));
        out
    }

    /// Flat immutable slices, same order as [`Parameters::flat_mut`].
    pub fn flat(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = Vec::new();
        out.push(self.patch.weight.as_slice().expect("contiguous"));
        out.push(self.patch.bias.as_slice().expect("contiguous"));
        out.push(self.cls_token.as_slice().expect("contiguous"));
        out.push(self.pos_embed.as_slice().expect("contiguous"));
        for block in &self.blocks {
            out.push(block.norm1.weight.as_slice().expect("contiguous"));
            out.push(block.norm1.bias.as_slice().expect("contiguous"));
            for lin in [&block.query, &block.key, &block.value, &block.attn_out] {
                out.push(lin.weight.as_slice().expect("contiguous"));
                out.push(lin.bias.as_slice().expect("contiguous"));
            }
            out.push(block.norm2.weight.as_slice().expect("contiguous"));
            out.push(block.norm2.bias.as_slice().expect("contiguous"));
            out.push(block.mlp_in.weight.as_slice().expect("contiguous"));
            out.push(block.mlp_in.bias.as_slice().expect("contiguous"));
            out.push(block.mlp_out.weight.as_slice().expect("contiguous"));
            out.push(block.mlp_out.bias.as_slice().expect("contiguous"));
        }
        out.push(self.final_norm.weight.as_slice().expect("contiguous"));
        out.push(self.final_norm.bias.as_slice().expect("contiguous"));
        out.push(self.head.weight.as_slice().expect("contiguous"));
        out.push(self.head.bias.as_slice().expect("contiguous"));
        out
    }

    pub fn param_count(&self) -> usize {
        self.flat().iter().map(|s| s.len()).sum()
    }

    /// SHA-256 over the canonical little-endian f64 encoding of every
    /// tensor. Used to assert that frozen teachers stay frozen.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for slice in self.flat() {
            for v in slice.iter() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
