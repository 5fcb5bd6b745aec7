//! The reference transformer: deterministic init, cached forward pass and
//! a full manual backward pass over every parameter group.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    gelu, gelu_derivative, layer_norm_backward, layer_norm_forward, linear3_backward,
    linear3_forward, patchify, softmax_rows_inplace, LnCache,
};
use super::params::Parameters;
use super::{CaptureSite, ImageBatch, InternalParameters, TokenStates, ViTConfig, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub struct TinyViT<F: Scalar> {
    config: ViTConfig,
    params: Parameters<F>,
}

impl<F: Scalar> Clone for TinyViT<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }
}

struct BlockCache<F: Scalar> {
    ln1: LnCache<F>,
    n1: Array3<F>,
    q: Array3<F>,
    k: Array3<F>,
    v: Array3<F>,
    attn: Array4<F>,
    ctx: Array3<F>,
    ln2: LnCache<F>,
    n2: Array3<F>,
    m1: Array3<F>,
    act: Array3<F>,
    m2: Array3<F>,
}

/// Intermediates of one forward pass, reused by [`TinyViT::backward`].
pub struct ForwardCache<F: Scalar> {
    patches: Array3<F>,
    blocks: Vec<BlockCache<F>>,
    final_ln: LnCache<F>,
    final_out: Array3<F>,
}

impl<F: Scalar> TinyViT<F> {
    /// Initialize all parameters deterministically from `config.seed`.
    pub fn init(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Parameters::init(config, &mut rng);
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub(crate) fn from_parts(config: ViTConfig, params: Parameters<F>) -> Self {
        Self { config, params }
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters<F> {
        &self.params
    }

    /// Mutable parameter access for optimizers and diagnostics. Training is
    /// single-writer: exactly one thread of control mutates a model.
    pub fn params_mut(&mut self) -> &mut Parameters<F> {
        &mut self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Classification logits plus any requested activation captures.
    pub fn forward(
        &self,
        batch: &ImageBatch<F>,
        capture: &[CaptureSite],
    ) -> Result<(Array2<F>, Vec<TokenStates<F>>)> {
        let (logits, cache) = self.forward_cached(&batch.pixels)?;
        let captured = capture
            .iter()
            .map(|&site| TokenStates {
                site,
                states: match site {
                    CaptureSite::FinalNorm => cache.final_out.clone(),
                    CaptureSite::PenultimateLinear => {
                        cache.blocks[self.config.penultimate_block()].m2.clone()
                    }
                },
            })
            .collect();
        Ok((logits, captured))
    }

    /// Logits only; used for evaluation and teacher targets.
    pub fn logits(&self, pixels: &Array4<F>) -> Result<Array2<F>> {
        Ok(self.forward_cached(pixels)?.0)
    }

    /// Forward pass retaining everything the backward pass needs.
    pub fn forward_cached(&self, pixels: &Array4<F>) -> Result<(Array2<F>, ForwardCache<F>)> {
        let (b, c, s0, s1) = pixels.dim();
        let cfg = &self.config;
        if b == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if c != IMAGE_CHANNELS || s0 != cfg.image_size || s1 != cfg.image_size {
            return Err(Error::Input(format!(
                "batch shape {b}x{c}x{s0}x{s1} does not match config image size {}",
                cfg.image_size
            )));
        }
        let h = cfg.hidden_size;
        let t = cfg.num_tokens();
        let nh = cfg.num_heads;
        let dh = h / nh;
        let scale = F::cast(1.0 / (dh as f64).sqrt());

        let patches = patchify(pixels, cfg.patch_size);
        let embedded = linear3_forward(&self.params.patch, &patches);

        let mut z = Array3::<F>::zeros((b, t, h));
        for bi in 0..b {
            z.slice_mut(s![bi, 0, ..]).assign(&self.params.cls_token);
            z.slice_mut(s![bi, 1.., ..])
                .assign(&embedded.slice(s![bi, .., ..]));
            let mut tokens = z.slice_mut(s![bi, .., ..]);
            tokens += &self.params.pos_embed;
        }

        let mut block_caches = Vec::with_capacity(cfg.num_layers);
        for block in &self.params.blocks {
            let (n1, ln1) = layer_norm_forward(&block.norm1, &z);
            let q = linear3_forward(&block.query, &n1);
            let k = linear3_forward(&block.key, &n1);
            let v = linear3_forward(&block.value, &n1);

            let mut attn = Array4::<F>::zeros((b, nh, t, t));
            let mut ctx = Array3::<F>::zeros((b, t, h));
            for bi in 0..b {
                for hi in 0..nh {
                    let cols = hi * dh..(hi + 1) * dh;
                    let qs: ndarray::ArrayView2<'_, F> = q.slice(s![bi, .., cols.clone()]);
                    let ks: ndarray::ArrayView2<'_, F> = k.slice(s![bi, .., cols.clone()]);
                    let vs: ndarray::ArrayView2<'_, F> = v.slice(s![bi, .., cols.clone()]);
                    let mut scores = qs.dot(&ks.t());
                    scores.mapv_inplace(|x| x * scale);
                    softmax_rows_inplace(&mut scores);
                    let c = scores.dot(&vs);
                    attn.slice_mut(s![bi, hi, .., ..]).assign(&scores);
                    ctx.slice_mut(s![bi, .., cols]).assign(&c);
                }
            }
            let o = linear3_forward(&block.attn_out, &ctx);
            let z_mid = &z + &o;

            let (n2, ln2) = layer_norm_forward(&block.norm2, &z_mid);
            let m1 = linear3_forward(&block.mlp_in, &n2);
            let act = m1.mapv(gelu);
            let m2 = linear3_forward(&block.mlp_out, &act);
            let z_out = &z_mid + &m2;

            block_caches.push(BlockCache {
                ln1,
                n1,
                q,
                k,
                v,
                attn,
                ctx,
                ln2,
                n2,
                m1,
                act,
                m2,
            });
            z = z_out;
        }

        let (final_out, final_ln) = layer_norm_forward(&self.params.final_norm, &z);
        let cls: ndarray::ArrayView2<'_, F> = final_out.slice(s![.., 0, ..]);
        let mut logits: Array2<F> = cls.dot(&self.params.head.weight.t());
        logits += &self.params.head.bias;

        Ok((
            logits,
            ForwardCache {
                patches,
                blocks: block_caches,
                final_ln,
                final_out,
            },
        ))
    }

    /// Backpropagate `d_logits` through the cached forward pass.
    ///
    /// Returns parameter gradients plus, when requested, the gradient of the
    /// objective with respect to the activations at each capture site.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        d_logits: &Array2<F>,
        capture: &[CaptureSite],
    ) -> (Parameters<F>, Vec<TokenStates<F>>) {
        let cfg = &self.config;
        let (b, t, h) = cache.final_out.dim();
        let nh = cfg.num_heads;
        let dh = h / nh;
        let scale = F::cast(1.0 / (dh as f64).sqrt());
        let mut grads = Parameters::<F>::zeros(cfg);
        let mut captured: Vec<TokenStates<F>> = Vec::new();

        // head
        let cls: ndarray::ArrayView2<'_, F> = cache.final_out.slice(s![.., 0, ..]);
        grads.head.weight += &d_logits.t().dot(&cls);
        grads.head.bias += &d_logits.sum_axis(Axis(0));
        let d_cls = d_logits.dot(&self.params.head.weight);
        let mut d_final = Array3::<F>::zeros((b, t, h));
        d_final.slice_mut(s![.., 0, ..]).assign(&d_cls);

        if capture.contains(&CaptureSite::FinalNorm) {
            captured.push(TokenStates {
                site: CaptureSite::FinalNorm,
                states: d_final.clone(),
            });
        }

        let mut dz = layer_norm_backward(
            &self.params.final_norm,
            &cache.final_ln,
            &d_final,
            &mut grads.final_norm,
        );

        for (bi_idx, (block, bc)) in self
            .params
            .blocks
            .iter()
            .zip(cache.blocks.iter())
            .enumerate()
            .rev()
        {
            let gb = &mut grads.blocks[bi_idx];

            // MLP sub-layer: z_out = z_mid + mlp(norm2(z_mid))
            let d_m2 = &dz;
            if bi_idx == cfg.penultimate_block() && capture.contains(&CaptureSite::PenultimateLinear)
            {
                captured.push(TokenStates {
                    site: CaptureSite::PenultimateLinear,
                    states: d_m2.clone(),
                });
            }
            let d_act = linear3_backward(&block.mlp_out, &bc.act, d_m2, &mut gb.mlp_out);
            let mut d_m1 = d_act;
            ndarray::Zip::from(&mut d_m1)
                .and(&bc.m1)
                .for_each(|d, &x| *d *= gelu_derivative(x));
            let d_n2 = linear3_backward(&block.mlp_in, &bc.n2, &d_m1, &mut gb.mlp_in);
            let d_from_mlp = layer_norm_backward(&block.norm2, &bc.ln2, &d_n2, &mut gb.norm2);
            let d_z_mid = &dz + &d_from_mlp;

            // attention sub-layer: z_mid = z_in + proj(attend(norm1(z_in)))
            let d_ctx = linear3_backward(&block.attn_out, &bc.ctx, &d_z_mid, &mut gb.attn_out);
            let mut d_q = Array3::<F>::zeros((b, t, h));
            let mut d_k = Array3::<F>::zeros((b, t, h));
            let mut d_v = Array3::<F>::zeros((b, t, h));
            for bi in 0..b {
                for hi in 0..nh {
                    let cols = hi * dh..(hi + 1) * dh;
                    let a: ndarray::ArrayView2<'_, F> = bc.attn.slice(s![bi, hi, .., ..]);
                    let dc: ndarray::ArrayView2<'_, F> = d_ctx.slice(s![bi, .., cols.clone()]);
                    let qs: ndarray::ArrayView2<'_, F> = bc.q.slice(s![bi, .., cols.clone()]);
                    let ks: ndarray::ArrayView2<'_, F> = bc.k.slice(s![bi, .., cols.clone()]);
                    let vs: ndarray::ArrayView2<'_, F> = bc.v.slice(s![bi, .., cols.clone()]);

                    let mut d_a = dc.dot(&vs.t());
                    d_v.slice_mut(s![bi, .., cols.clone()])
                        .assign(&a.t().dot(&dc));

                    // softmax rows backward
                    for r in 0..t {
                        let mut dot = F::zero();
                        for j in 0..t {
                            dot += d_a[[r, j]] * a[[r, j]];
                        }
                        for j in 0..t {
                            d_a[[r, j]] = a[[r, j]] * (d_a[[r, j]] - dot) * scale;
                        }
                    }
                    d_q.slice_mut(s![bi, .., cols.clone()]).assign(&d_a.dot(&ks));
                    d_k.slice_mut(s![bi, .., cols]).assign(&d_a.t().dot(&qs));
                }
            }
            let mut d_n1 = linear3_backward(&block.query, &bc.n1, &d_q, &mut gb.query);
            d_n1 += &linear3_backward(&block.key, &bc.n1, &d_k, &mut gb.key);
            d_n1 += &linear3_backward(&block.value, &bc.n1, &d_v, &mut gb.value);
            let d_from_attn = layer_norm_backward(&block.norm1, &bc.ln1, &d_n1, &mut gb.norm1);
            dz = &d_z_mid + &d_from_attn;
        }

        // embeddings and patch projection
        grads.pos_embed += &dz.sum_axis(Axis(0));
        grads.cls_token += &dz.slice(s![.., 0, ..]).sum_axis(Axis(0));
        let d_embedded = dz.slice(s![.., 1.., ..]).to_owned();
        let _ = linear3_backward(&self.params.patch, &cache.patches, &d_embedded, &mut grads.patch);

        // keep capture order aligned with the request order
        captured.sort_by_key(|ts| capture.iter().position(|&c| c == ts.site));
        (grads, captured)
    }

    /// Views of (b_n, w_n, b_o, W_o) as owned copies.
    pub fn extract_internal_parameters(&self) -> InternalParameters<F> {
        let norm = &self.params.final_norm;
        let block = &self.params.blocks[self.config.penultimate_block()];
        InternalParameters {
            norm_bias: norm.bias.clone(),
            norm_weight: norm.weight.clone(),
            linear_bias: block.mlp_out.bias.clone(),
            linear_weight: block.mlp_out.weight.clone(),
        }
    }
}
