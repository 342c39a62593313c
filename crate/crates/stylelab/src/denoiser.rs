//! The ε-prediction network: a patch-token transformer whose cross-attention
//! layers carry decoupled text and image branches with per-layer image scales.

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraPair};
use crate::tensor::{patchify, Graph, NodeId, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Network hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub width_t: usize,
    pub width_i: usize,
    pub width_time: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            channels: 3,
            patch: 4,
            width: 48,
            heads: 4,
            layers: 8,
            width_t: 32,
            width_i: 32,
            width_time: 48,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::Parameter("zero-sized denoiser config".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Parameter(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.width_time % 2 != 0 {
            return Err(Error::Parameter(
                "timestep embedding width must be even".into(),
            ));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Plain multi-head self-attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention<S> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
}

/// Decoupled text/image cross-attention. The query is shared; the text
/// branch attends over c_t through (w_k, w_v) and the image branch over
/// c_i through (w_ik, w_iv). The branch sum Z_t + scale·Z_i passes through
/// one output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCrossAttention<S> {
    pub w_q: Tensor<S>,  // [width × width]
    pub w_k: Tensor<S>,  // [width_t × width]
    pub w_v: Tensor<S>,  // [width_t × width]
    pub w_ik: Tensor<S>, // [width_i × width]
    pub w_iv: Tensor<S>, // [width_i × width]
    pub w_o: Tensor<S>,  // [width × width]
    /// Per-layer image-branch scale in [0, 1] times any runtime multiplier.
    pub image_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<S> {
    pub norm1: Tensor<S>,
    pub self_attn: SelfAttention<S>,
    pub norm2: Tensor<S>,
    pub cross: DualCrossAttention<S>,
    pub norm3: Tensor<S>,
    pub mlp_w1: Tensor<S>,
    pub mlp_b1: Tensor<S>,
    pub mlp_w2: Tensor<S>,
    pub mlp_b2: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<S> {
    pub cfg: DenoiserConfig,
    pub patch_proj: Tensor<S>,
    pub patch_bias: Tensor<S>,
    pub pos_embed: Tensor<S>,
    pub time_w1: Tensor<S>,
    pub time_b1: Tensor<S>,
    pub time_w2: Tensor<S>,
    pub time_b2: Tensor<S>,
    pub blocks: Vec<Block<S>>,
    pub final_norm: Tensor<S>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
    /// Time-gated input skip: the prediction is `head(...) + g(t)·x_t`
    /// with `g(t) = te·skip_w + skip_b`. The noise estimate has a large
    /// linear-in-`x_t` component whose coefficient depends only on `t`;
    /// the final norm strips per-token amplitude, so without this skip
    /// the head has to reconstruct that component the hard way.
    pub skip_w: Tensor<S>,
    pub skip_b: Tensor<S>,
    /// Global prompt pathway: the mean prompt embedding, projected to
    /// model width, is added to every token alongside the time embedding.
    /// Cross-attention alone injects the prompt through a few small value
    /// vectors and is slow to pick up; this pooled path conditions the
    /// whole field directly.
    pub prompt_w: Tensor<S>,
}

/// Deterministic initialization from a seed. The image-branch projections
/// start as copies of the text-branch ones so both branches have the same
/// activation scale at step 0.
pub fn build_denoiser<S: Scalar>(cfg: DenoiserConfig, seed: u64) -> Result<Denoiser<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = cfg.width;
    let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let lin = |ins: usize, outs: usize, rng: &mut ChaCha8Rng| {
        Tensor::<S>::randn(&[ins, outs], std(ins), rng)
    };
    let mut blocks = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let w_k = lin(cfg.width_t, w, &mut rng);
        let w_v = lin(cfg.width_t, w, &mut rng);
        let (w_ik, w_iv) = if cfg.width_i == cfg.width_t {
            (w_k.clone(), w_v.clone())
        } else {
            (lin(cfg.width_i, w, &mut rng), lin(cfg.width_i, w, &mut rng))
        };
        blocks.push(Block {
            norm1: Tensor::full(&[w], S::one()),
            self_attn: SelfAttention {
                w_q: lin(w, w, &mut rng),
                w_k: lin(w, w, &mut rng),
                w_v: lin(w, w, &mut rng),
                w_o: lin(w, w, &mut rng),
            },
            norm2: Tensor::full(&[w], S::one()),
            cross: DualCrossAttention {
                w_q: lin(w, w, &mut rng),
                w_k,
                w_v,
                w_ik,
                w_iv,
                w_o: lin(w, w, &mut rng),
                image_scale: 1.0,
            },
            norm3: Tensor::full(&[w], S::one()),
            mlp_w1: lin(w, 2 * w, &mut rng),
            mlp_b1: Tensor::zeros(&[2 * w]),
            mlp_w2: lin(2 * w, w, &mut rng),
            mlp_b2: Tensor::zeros(&[w]),
        });
    }
    Ok(Denoiser {
        patch_proj: lin(cfg.patch_dim(), w, &mut rng),
        patch_bias: Tensor::zeros(&[w]),
        pos_embed: Tensor::randn(&[cfg.tokens(), w], 0.02, &mut rng),
        time_w1: lin(cfg.width_time, w, &mut rng),
        time_b1: Tensor::zeros(&[w]),
        time_w2: lin(w, w, &mut rng),
        time_b2: Tensor::zeros(&[w]),
        blocks,
        final_norm: Tensor::full(&[w], S::one()),
        head_w: lin(w, cfg.patch_dim(), &mut rng),
        head_b: Tensor::zeros(&[cfg.patch_dim()]),
        // gate starts at 1: at large t the optimal prediction is close
        // to x_t itself
        skip_w: Tensor::zeros(&[w, 1]),
        skip_b: Tensor::full(&[1], S::one()),
        prompt_w: lin(cfg.width_t, w, &mut rng),
        cfg,
    })
}

impl<S: Scalar> Denoiser<S> {
    /// All parameter tensors, in the fixed binding order shared with
    /// [`BoundDenoiser`]. Used by optimizers and hashing.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![
            &mut self.patch_proj,
            &mut self.patch_bias,
            &mut self.pos_embed,
            &mut self.time_w1,
            &mut self.time_b1,
            &mut self.time_w2,
            &mut self.time_b2,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.norm1);
            out.push(&mut b.self_attn.w_q);
            out.push(&mut b.self_attn.w_k);
            out.push(&mut b.self_attn.w_v);
            out.push(&mut b.self_attn.w_o);
            out.push(&mut b.norm2);
            out.push(&mut b.cross.w_q);
            out.push(&mut b.cross.w_k);
            out.push(&mut b.cross.w_v);
            out.push(&mut b.cross.w_ik);
            out.push(&mut b.cross.w_iv);
            out.push(&mut b.cross.w_o);
            out.push(&mut b.norm3);
            out.push(&mut b.mlp_w1);
            out.push(&mut b.mlp_b1);
            out.push(&mut b.mlp_w2);
            out.push(&mut b.mlp_b2);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out.push(&mut self.skip_w);
        out.push(&mut self.skip_b);
        out.push(&mut self.prompt_w);
        out
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out: Vec<&Tensor<S>> = vec![
            &self.patch_proj,
            &self.patch_bias,
            &self.pos_embed,
            &self.time_w1,
            &self.time_b1,
            &self.time_w2,
            &self.time_b2,
        ];
        for b in &self.blocks {
            out.push(&b.norm1);
            out.push(&b.self_attn.w_q);
            out.push(&b.self_attn.w_k);
            out.push(&b.self_attn.w_v);
            out.push(&b.self_attn.w_o);
            out.push(&b.norm2);
            out.push(&b.cross.w_q);
            out.push(&b.cross.w_k);
            out.push(&b.cross.w_v);
            out.push(&b.cross.w_ik);
            out.push(&b.cross.w_iv);
            out.push(&b.cross.w_o);
            out.push(&b.norm3);
            out.push(&b.mlp_w1);
            out.push(&b.mlp_b1);
            out.push(&b.mlp_w2);
            out.push(&b.mlp_b2);
        }
        out.push(&self.final_norm);
        out.push(&self.head_w);
        out.push(&self.head_b);
        out.push(&self.skip_w);
        out.push(&self.skip_b);
        out.push(&self.prompt_w);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// SHA-256 over every parameter's f32 little-endian bytes, in binding
    /// order. Identifies the frozen base during fine-tuning and in
    /// checkpoints.
    pub fn param_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.params() {
            for &v in t.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Install per-layer effective scales: `scales[d] × multiplier`.
    pub fn set_layer_scales(&mut self, scales: &[f64], multiplier: f64) -> Result<()> {
        if scales.len() != self.blocks.len() {
            return Err(Error::Parameter(format!(
                "{} scales for {} cross-attention layers",
                scales.len(),
                self.blocks.len()
            )));
        }
        if multiplier < 0.0 || !multiplier.is_finite() {
            return Err(Error::Parameter(format!(
                "scale multiplier {multiplier} must be finite and >= 0"
            )));
        }
        for (b, &s) in self.blocks.iter_mut().zip(scales) {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Parameter(format!(
                    "layer scale {s} outside [0, 1]"
                )));
            }
            b.cross.image_scale = s * multiplier;
        }
        Ok(())
    }

    pub fn layer_scales(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.cross.image_scale).collect()
    }
}

/// Sinusoidal timestep features of even width `dim`.
pub fn timestep_features<S: Scalar>(t: usize, dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let x = t as f64 * freq;
        data.push(S::from_f64(x.sin()));
        data.push(S::from_f64(x.cos()));
    }
    Tensor::new(&[1, dim], data).unwrap()
}

struct BoundAttn {
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    w_o: NodeId,
}

struct BoundCross {
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    w_ik: NodeId,
    w_iv: NodeId,
    w_o: NodeId,
    image_scale: f64,
}

struct BoundBlock {
    norm1: NodeId,
    self_attn: BoundAttn,
    norm2: NodeId,
    cross: BoundCross,
    norm3: NodeId,
    mlp_w1: NodeId,
    mlp_b1: NodeId,
    mlp_w2: NodeId,
    mlp_b2: NodeId,
}

/// The model's parameters materialized as graph leaves, optionally with
/// LoRA deltas folded into the cross-attention weights.
pub struct BoundDenoiser {
    patch_proj: NodeId,
    patch_bias: NodeId,
    pos_embed: NodeId,
    time_w1: NodeId,
    time_b1: NodeId,
    time_w2: NodeId,
    time_b2: NodeId,
    blocks: Vec<BoundBlock>,
    final_norm: NodeId,
    head_w: NodeId,
    head_b: NodeId,
    skip_w: NodeId,
    skip_b: NodeId,
    prompt_w: NodeId,
    /// Base-parameter leaves in [`Denoiser::params_mut`] order.
    pub base_params: Vec<NodeId>,
    /// LoRA leaves in [`LoraAdapter::params_mut`] order.
    pub lora_params: Vec<NodeId>,
}

/// One per-layer (Z, Z_t, Z_i) cross-attention triple, pre output
/// projection, recorded for probing.
#[derive(Debug, Clone)]
pub struct LayerTriple<S> {
    pub z: Tensor<S>,
    pub z_t: Tensor<S>,
    pub z_i: Tensor<S>,
}

pub struct ForwardOutput<S> {
    /// Predicted noise, same shape as the input image.
    pub eps: NodeId,
    /// One triple per layer when recording was requested, else empty.
    pub triples: Vec<LayerTriple<S>>,
}

impl<S: Scalar> Denoiser<S> {
    /// Create graph leaves for every parameter. `train_base` marks base
    /// weights trainable; when `lora` is given its deltas are added to the
    /// cross-attention projections in-graph (`train_lora` marks them
    /// trainable).
    pub fn bind(
        &self,
        g: &mut Graph<S>,
        train_base: bool,
        lora: Option<&LoraAdapter<S>>,
        train_lora: bool,
    ) -> Result<BoundDenoiser> {
        if let Some(l) = lora {
            if l.layers.len() != self.blocks.len() {
                return Err(Error::Parameter(format!(
                    "adapter covers {} layers, model has {}",
                    l.layers.len(),
                    self.blocks.len()
                )));
            }
        }
        let mut base = Vec::new();
        let mut lp = Vec::new();
        let leaf = |g: &mut Graph<S>, t: &Tensor<S>, base: &mut Vec<NodeId>| {
            let id = g.leaf(t.clone(), train_base);
            base.push(id);
            id
        };
        let patch_proj = leaf(g, &self.patch_proj, &mut base);
        let patch_bias = leaf(g, &self.patch_bias, &mut base);
        let pos_embed = leaf(g, &self.pos_embed, &mut base);
        let time_w1 = leaf(g, &self.time_w1, &mut base);
        let time_b1 = leaf(g, &self.time_b1, &mut base);
        let time_w2 = leaf(g, &self.time_w2, &mut base);
        let time_b2 = leaf(g, &self.time_b2, &mut base);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (ix, b) in self.blocks.iter().enumerate() {
            let norm1 = leaf(g, &b.norm1, &mut base);
            let self_attn = BoundAttn {
                w_q: leaf(g, &b.self_attn.w_q, &mut base),
                w_k: leaf(g, &b.self_attn.w_k, &mut base),
                w_v: leaf(g, &b.self_attn.w_v, &mut base),
                w_o: leaf(g, &b.self_attn.w_o, &mut base),
            };
            let norm2 = leaf(g, &b.norm2, &mut base);
            let ll = lora.map(|l| &l.layers[ix]);
            let eff = |g: &mut Graph<S>,
                           w: &Tensor<S>,
                           pair: Option<&LoraPair<S>>,
                           base: &mut Vec<NodeId>,
                           lp: &mut Vec<NodeId>|
             -> Result<NodeId> {
                let wid = leaf(g, w, base);
                match pair {
                    None => Ok(wid),
                    Some(p) => {
                        let a = g.leaf(p.a.clone(), train_lora);
                        let bm = g.leaf(p.b.clone(), train_lora);
                        lp.push(a);
                        lp.push(bm);
                        let ba = g.matmul(bm, a)?; // [out × in]
                        let delta = g.transpose(ba)?;
                        let delta = g.scale(delta, p.alpha / p.rank() as f64);
                        g.add(wid, delta)
                    }
                }
            };
            let cross = BoundCross {
                w_q: eff(g, &b.cross.w_q, ll.map(|l| &l.q), &mut base, &mut lp)?,
                w_k: eff(g, &b.cross.w_k, ll.map(|l| &l.k), &mut base, &mut lp)?,
                w_v: eff(g, &b.cross.w_v, ll.map(|l| &l.v), &mut base, &mut lp)?,
                w_ik: eff(g, &b.cross.w_ik, ll.map(|l| &l.ik), &mut base, &mut lp)?,
                w_iv: eff(g, &b.cross.w_iv, ll.map(|l| &l.iv), &mut base, &mut lp)?,
                w_o: eff(g, &b.cross.w_o, ll.map(|l| &l.o), &mut base, &mut lp)?,
                image_scale: b.cross.image_scale,
            };
            let norm3 = leaf(g, &b.norm3, &mut base);
            blocks.push(BoundBlock {
                norm1,
                self_attn,
                norm2,
                cross,
                norm3,
                mlp_w1: leaf(g, &b.mlp_w1, &mut base),
                mlp_b1: leaf(g, &b.mlp_b1, &mut base),
                mlp_w2: leaf(g, &b.mlp_w2, &mut base),
                mlp_b2: leaf(g, &b.mlp_b2, &mut base),
            });
        }
        Ok(BoundDenoiser {

            patch_proj,
            patch_bias,
            pos_embed,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            blocks,
            final_norm: leaf(g, &self.final_norm, &mut base),
            head_w: leaf(g, &self.head_w, &mut base),
            head_b: leaf(g, &self.head_b, &mut base),
            skip_w: leaf(g, &self.skip_w, &mut base),
            skip_b: leaf(g, &self.skip_b, &mut base),
            prompt_w: leaf(g, &self.prompt_w, &mut base),
            base_params: base,
            lora_params: lp,
        })
    }
}

fn multi_head<S: Scalar>(
    g: &mut Graph<S>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    head_dim: usize,
) -> Result<NodeId> {
    let mut parts = Vec::with_capacity(heads);
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, inv_sqrt);
        let attn = g.softmax_rows(logits)?;
        parts.push(g.matmul(attn, vh)?);
    }
    g.concat_cols(&parts)
}

/// Dual cross-attention body. Returns (output node, Z, Z_t, Z_i node ids),
/// where the Z tensors are the pre-output-projection branch sums.
fn dual_attention<S: Scalar>(
    g: &mut Graph<S>,
    bc: &BoundCross,
    x: NodeId,
    c_t: NodeId,
    c_i: Option<NodeId>,
    cfg: &DenoiserConfig,
) -> Result<(NodeId, NodeId, NodeId, Option<NodeId>)> {
    let q = g.matmul(x, bc.w_q)?;
    let kt = g.matmul(c_t, bc.w_k)?;
    let vt = g.matmul(c_t, bc.w_v)?;
    let z_t = multi_head(g, q, kt, vt, cfg.heads, cfg.head_dim())?;
    let (z, z_i) = match c_i {
        None => (z_t, None),
        Some(ci) => {
            let ki = g.matmul(ci, bc.w_ik)?;
            let vi = g.matmul(ci, bc.w_iv)?;
            let z_i = multi_head(g, q, ki, vi, cfg.heads, cfg.head_dim())?;
            let scaled = g.scale(z_i, bc.image_scale);
            (g.add(z_t, scaled)?, Some(z_i))
        }
    };
    let out = g.matmul(z, bc.w_o)?;
    Ok((out, z, z_t, z_i))
}

impl<S: Scalar> Denoiser<S> {
    /// One forward pass for a single noised image. `c_t` and `c_i` are
    /// in-graph condition sequences ([Lt × width_t], [Li × width_i]);
    /// `c_i = None` runs the structurally text-only path. `record` keeps
    /// the per-layer (Z, Z_t, Z_i) values for probing.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        bound: &BoundDenoiser,
        xt: &Tensor<S>,
        t: usize,
        c_t: NodeId,
        c_i: Option<NodeId>,
        record: bool,
    ) -> Result<ForwardOutput<S>> {
        let cfg = &self.cfg;
        let expect = [cfg.channels, cfg.image_size, cfg.image_size];
        if xt.shape() != expect {
            return Err(Error::dimension("denoiser input", &expect, xt.shape()));
        }
        let ct_shape = g.value(c_t).shape().to_vec();
        if ct_shape.len() != 2 || ct_shape[1] != cfg.width_t {
            return Err(Error::dimension(
                "text condition width",
                &[cfg.width_t],
                &ct_shape,
            ));
        }
        if let Some(ci) = c_i {
            let s = g.value(ci).shape().to_vec();
            if s.len() != 2 || s[1] != cfg.width_i {
                return Err(Error::dimension("image condition width", &[cfg.width_i], &s));
            }
        }

        let tokens = g.constant(patchify(xt, cfg.patch)?);
        let mut x = g.matmul(tokens, bound.patch_proj)?;
        x = g.add_row_bias(x, bound.patch_bias)?;
        x = g.add(x, bound.pos_embed)?;

        let tf = g.constant(timestep_features(t, cfg.width_time));
        let mut te = g.matmul(tf, bound.time_w1)?;
        te = g.add_row_bias(te, bound.time_b1)?;
        te = g.silu(te);
        te = g.matmul(te, bound.time_w2)?;
        te = g.add_row_bias(te, bound.time_b2)?;
        // te is [1 × width]; broadcast over tokens as a row bias
        x = g.add_row_bias(x, te)?;

        // pooled prompt pathway: mean prompt token, projected to width,
        // added to every patch token
        let lt = ct_shape[0];
        let pool = g.constant(Tensor::full(&[1, lt], S::from_f64(1.0 / lt as f64)));
        let pooled = g.matmul(pool, c_t)?;
        let pbias = g.matmul(pooled, bound.prompt_w)?;
        x = g.add_row_bias(x, pbias)?;

        let mut triples = Vec::new();
        for b in &bound.blocks {
            let n1 = g.rms_norm(x, b.norm1)?;
            let q = g.matmul(n1, b.self_attn.w_q)?;
            let k = g.matmul(n1, b.self_attn.w_k)?;
            let v = g.matmul(n1, b.self_attn.w_v)?;
            let sa = multi_head(g, q, k, v, cfg.heads, cfg.head_dim())?;
            let sa = g.matmul(sa, b.self_attn.w_o)?;
            x = g.add(x, sa)?;

            let n2 = g.rms_norm(x, b.norm2)?;
            let (ca, z, z_t, z_i) = dual_attention(g, &b.cross, n2, c_t, c_i, cfg)?;
            if record {
                let z_i_val = match z_i {
                    Some(id) => g.value(id).clone(),
                    None => Tensor::zeros(g.value(z_t).shape()),
                };
                triples.push(LayerTriple {
                    z: g.value(z).clone(),
                    z_t: g.value(z_t).clone(),
                    z_i: z_i_val,
                });
            }
            x = g.add(x, ca)?;

            let n3 = g.rms_norm(x, b.norm3)?;
            let mut m = g.matmul(n3, b.mlp_w1)?;
            m = g.add_row_bias(m, b.mlp_b1)?;
            m = g.silu(m);
            m = g.matmul(m, b.mlp_w2)?;
            m = g.add_row_bias(m, b.mlp_b2)?;
            x = g.add(x, m)?;
        }

        let xn = g.rms_norm(x, bound.final_norm)?;
        let mut out = g.matmul(xn, bound.head_w)?;
        out = g.add_row_bias(out, bound.head_b)?;
        // time-gated skip from the noised input
        let gate = g.matmul(te, bound.skip_w)?;
        let gate = g.add_row_bias(gate, bound.skip_b)?;
        let ones_col = g.constant(Tensor::full(&[cfg.tokens(), 1], S::one()));
        let ones_row = g.constant(Tensor::full(&[1, cfg.patch_dim()], S::one()));
        let tile = g.matmul(ones_col, gate)?;
        let broad = g.matmul(tile, ones_row)?;
        let skip = g.mul(broad, tokens)?;
        out = g.add(out, skip)?;
        let eps = g.unpatchify(out, cfg.channels, cfg.patch)?;
        Ok(ForwardOutput { eps, triples })
    }

    /// Eager ε̂ prediction (no gradients, no LoRA), used by samplers.
    pub fn predict_eps(
        &self,
        xt: &Tensor<S>,
        t: usize,
        c_t: &Tensor<S>,
        c_i: Option<&Tensor<S>>,
        lora: Option<&LoraAdapter<S>>,
        record: bool,
    ) -> Result<(Tensor<S>, Vec<LayerTriple<S>>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, lora, false)?;
        let ct = g.constant(c_t.clone());
        let ci = c_i.map(|v| g.constant(v.clone()));
        let out = self.forward(&mut g, &bound, xt, t, ct, ci, record)?;
        Ok((g.value(out.eps).clone(), out.triples))
    }
}
