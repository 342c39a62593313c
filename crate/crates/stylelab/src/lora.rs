//! Low-rank adapters over the cross-attention projections, the style
//! fine-tuning loop, and checkpoint persistence.

use crate::conditioning::{average_embeddings, EmbeddingSource, ImageEmbedding, TextCondition};
use crate::error::{Error, Result};
use crate::probe::HierarchicalScales;
use crate::schedule::{DiffusionBatch, NoiseSchedule};
use crate::tensor::{read_tensor, write_tensor, Graph, Scalar, Tensor};
use crate::train::{BaseModel, LogRow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// One low-rank pair for a base weight W[in × out]. The additive delta is
/// `(alpha / r) · (B·A)ᵀ`, with A [r × in] small Gaussian and B [out × r]
/// zero at init so the delta starts at exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
    pub alpha: f64,
}

impl<S: Scalar> LoraPair<S> {
    pub fn init(
        ins: usize,
        outs: usize,
        rank: usize,
        alpha: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if rank == 0 || rank > ins.min(outs) {
            return Err(Error::Parameter(format!(
                "rank {rank} invalid for a {ins}x{outs} projection"
            )));
        }
        Ok(LoraPair {
            a: Tensor::randn(&[rank, ins], 1.0 / (ins as f64).sqrt(), rng),
            b: Tensor::zeros(&[outs, rank]),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// Dense delta `(alpha/r)·(B·A)ᵀ`, shape [in × out].
    pub fn delta(&self) -> Result<Tensor<S>> {
        let ba = crate::tensor::matmul(&self.b, &self.a)?; // [out × in]
        let (outs, ins) = (ba.rows(), ba.cols());
        let mut t = Tensor::zeros(&[ins, outs]);
        let s = S::from_f64(self.alpha / self.rank() as f64);
        for i in 0..outs {
            for j in 0..ins {
                t.data_mut()[j * outs + i] = ba.data()[i * ins + j] * s;
            }
        }
        Ok(t)
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// Adapter pairs for the six projections of one dual cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLora<S> {
    pub q: LoraPair<S>,
    pub k: LoraPair<S>,
    pub v: LoraPair<S>,
    pub o: LoraPair<S>,
    pub ik: LoraPair<S>,
    pub iv: LoraPair<S>,
}

/// The trainable style adapter: one [`LayerLora`] per cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<S> {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LayerLora<S>>,
}

pub const DEFAULT_LORA_RANK: usize = 4;

/// Build a fresh adapter for `model`. B matrices start at zero, so the
/// model's outputs are unchanged until training moves them.
pub fn init_lora<S: Scalar>(
    model: &crate::denoiser::Denoiser<S>,
    rank: usize,
    seed: u64,
) -> Result<LoraAdapter<S>> {
    let cfg = &model.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = rank as f64;
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        layers.push(LayerLora {
            q: LoraPair::init(cfg.width, cfg.width, rank, alpha, &mut rng)?,
            k: LoraPair::init(cfg.width_t, cfg.width, rank, alpha, &mut rng)?,
            v: LoraPair::init(cfg.width_t, cfg.width, rank, alpha, &mut rng)?,
            o: LoraPair::init(cfg.width, cfg.width, rank, alpha, &mut rng)?,
            ik: LoraPair::init(cfg.width_i, cfg.width, rank, alpha, &mut rng)?,
            iv: LoraPair::init(cfg.width_i, cfg.width, rank, alpha, &mut rng)?,
        });
    }
    Ok(LoraAdapter {
        rank,
        alpha,
        layers,
    })
}

impl<S: Scalar> LoraAdapter<S> {
    /// Trainable tensors in the fixed binding order used by
    /// [`crate::denoiser::Denoiser::bind`] (per layer: q, k, v, ik, iv, o;
    /// A before B).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::with_capacity(self.layers.len() * 12);
        for l in &mut self.layers {
            for p in [&mut l.q, &mut l.k, &mut l.v, &mut l.ik, &mut l.iv, &mut l.o] {
                out.push(&mut p.a);
                out.push(&mut p.b);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::with_capacity(self.layers.len() * 12);
        for l in &self.layers {
            for p in [&l.q, &l.k, &l.v, &l.ik, &l.iv, &l.o] {
                out.push(&p.a);
                out.push(&p.b);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn zeroed(&self) -> Self {
        let mut c = self.clone();
        for l in &mut c.layers {
            for p in [&mut l.q, &mut l.k, &mut l.v, &mut l.ik, &mut l.iv, &mut l.o] {
                for v in p.b.data_mut() {
                    *v = S::zero();
                }
            }
        }
        c
    }
}

/// Fine-tuning budget and optimizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// The default budget scales with the number of references.
pub fn default_finetune_steps(n_refs: usize) -> usize {
    100 * n_refs
}

impl FinetuneConfig {
    pub fn for_refs(n_refs: usize, seed: u64) -> Self {
        FinetuneConfig {
            steps: default_finetune_steps(n_refs),
            batch: n_refs.clamp(1, 4),
            lr: 5e-3,
            seed,
        }
    }
}

/// Adapt a pretrained model to a style from a handful of reference
/// images. Only the adapter trains; the denoiser, text table, and image
/// encoder stay frozen. The per-layer `scales` are installed at
/// multiplier 1.0 for the duration of training and left in place.
/// `steps = 0` is a no-op that returns an empty log.
///
/// Returns the training log and the averaged reference embedding used as
/// the image condition.
pub fn finetune<S: Scalar>(
    base: &mut BaseModel<S>,
    adapter: &mut LoraAdapter<S>,
    refs: &[(Tensor<S>, TextCondition)],
    scales: &HierarchicalScales,
    cfg: &FinetuneConfig,
    sched: &NoiseSchedule,
    mut on_step: Option<&mut dyn FnMut(&LogRow)>,
) -> Result<(Vec<LogRow>, ImageEmbedding<S>)> {
    if refs.is_empty() {
        return Err(Error::Parameter("no reference images".into()));
    }
    if cfg.batch == 0 || !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::Parameter(format!(
            "bad finetune settings: batch {}, lr {}",
            cfg.batch, cfg.lr
        )));
    }
    let singles: Vec<ImageEmbedding<S>> = refs
        .iter()
        .map(|(img, _)| base.encoder.encode_image(img))
        .collect::<Result<_>>()?;
    let averaged = average_embeddings(&singles)?;
    base.model.set_layer_scales(&scales.scales, 1.0)?;
    if cfg.steps == 0 {
        return Ok((Vec::new(), averaged));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = crate::optim::Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let bound = base.model.bind(&mut g, false, Some(adapter), true)?;
        let mut x0 = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut eps = Vec::with_capacity(cfg.batch);
        let mut conds = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (img, cond) = &refs[rng.gen_range(0..refs.len())];
            let ct = g.constant(base.embedder.embed_value(cond)?);
            let ci = g.constant(averaged.data.clone());
            conds.push((ct, Some(ci)));
            ts.push(rng.gen_range(1..=sched.steps()));
            eps.push(Tensor::randn(img.shape(), 1.0, &mut rng));
            x0.push(img.clone());
        }
        let batch = DiffusionBatch::new(x0, ts, eps, sched)?;
        let loss =
            crate::diffusion::denoise_loss_nodes(&base.model, &mut g, &bound, &batch, &conds)?;
        g.backward(loss)?;
        let grads: Vec<Option<Tensor<S>>> = bound
            .lora_params
            .iter()
            .map(|&id| g.grad_tensor(id))
            .collect();
        let gn = crate::optim::grad_norm(&grads);
        let lv = g.value(loss).data()[0].as_f64();
        if !lv.is_finite() || !gn.is_finite() {
            return Err(Error::Numeric(format!(
                "fine-tuning diverged at step {step}: loss {lv}, grad norm {gn}, \
                 lr {}, batch {}",
                cfg.lr, cfg.batch
            )));
        }
        opt.step(&mut adapter.params_mut(), &grads)?;
        let row = LogRow {
            step,
            loss: lv,
            grad_norm: gn,
        };
        if let Some(cb) = on_step.as_deref_mut() {
            cb(&row);
        }
        log.push(row);
    }
    Ok((log, averaged))
}

pub const STYLE_MAGIC: &[u8; 8] = b"ADAPTR01";

/// Everything needed to reproduce a style at inference time against a
/// specific base model.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCheckpoint<S> {
    pub base_hash: String,
    pub scales: HierarchicalScales,
    pub adapter: LoraAdapter<S>,
    pub embedding: ImageEmbedding<S>,
    pub meta: StyleMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleMeta {
    pub style_id: String,
    pub steps: usize,
    pub lr: f64,
    pub n_refs: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct StyleFileMeta {
    version: u32,
    base_hash: String,
    scales: HierarchicalScales,
    rank: usize,
    alpha: f64,
    layers: usize,
    embedding_n: usize,
    meta: StyleMeta,
    tensor_count: u32,
}

/// Write the checkpoint: magic, length-prefixed JSON metadata, then the
/// adapter tensors in binding order followed by the averaged embedding.
pub fn save_style<S: Scalar>(path: &Path, ckpt: &StyleCheckpoint<S>) -> Result<()> {
    let n = match ckpt.embedding.source {
        EmbeddingSource::Averaged(n) => n,
        EmbeddingSource::Single => 1,
    };
    let tensors: Vec<&Tensor<S>> = ckpt
        .adapter
        .params()
        .into_iter()
        .chain(std::iter::once(&ckpt.embedding.data))
        .collect();
    let meta = StyleFileMeta {
        version: 1,
        base_hash: ckpt.base_hash.clone(),
        scales: ckpt.scales.clone(),
        rank: ckpt.adapter.rank,
        alpha: ckpt.adapter.alpha,
        layers: ckpt.adapter.layers.len(),
        embedding_n: n,
        meta: ckpt.meta.clone(),
        tensor_count: tensors.len() as u32,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    {
        let mut w = BufWriter::new(&mut buf);
        w.write_all(STYLE_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for t in tensors {
            write_tensor(&mut w, t)?;
        }
        w.flush()?;
    }
    crate::data::write_atomic(path, &buf)
}

/// Load a checkpoint and verify it matches `base` (frozen-weight hash).
pub fn load_style<S: Scalar>(path: &Path, base: &BaseModel<S>) -> Result<StyleCheckpoint<S>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let mut magic = [0u8; 8];
    read_exact_at(&mut r, &mut magic, &mut offset)?;
    if &magic != STYLE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad style checkpoint magic {magic:?}"),
        });
    }
    let mut len = [0u8; 4];
    read_exact_at(&mut r, &mut len, &mut offset)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact_at(&mut r, &mut json, &mut offset)?;
    let meta: StyleFileMeta = serde_json::from_slice(&json).map_err(|e| Error::Format {
        offset: 12,
        message: format!("style metadata: {e}"),
    })?;
    if meta.version != 1 {
        return Err(Error::Incompatible(format!(
            "style checkpoint version {}",
            meta.version
        )));
    }
    if meta.base_hash != base.param_hash_hex() {
        return Err(Error::Incompatible(format!(
            "style checkpoint was trained against base {} but the loaded base is {}",
            &meta.base_hash[..12.min(meta.base_hash.len())],
            &base.param_hash_hex()[..12]
        )));
    }
    if meta.tensor_count as usize != meta.layers * 12 + 1 {
        return Err(Error::Format {
            offset: 12,
            message: format!(
                "tensor count {} inconsistent with {} layers",
                meta.tensor_count, meta.layers
            ),
        });
    }
    let next = |offset: &mut u64, r: &mut BufReader<std::fs::File>| -> Result<Tensor<S>> {
        read_tensor::<S, _>(r, offset)
    };
    let mut layers = Vec::with_capacity(meta.layers);
    for _ in 0..meta.layers {
        let mut pairs = Vec::with_capacity(6);
        for _ in 0..6 {
            let a = next(&mut offset, &mut r)?;
            let b = next(&mut offset, &mut r)?;
            if a.shape()[0] != meta.rank || b.shape()[1] != meta.rank {
                return Err(Error::Format {
                    offset,
                    message: format!(
                        "adapter pair shapes {:?}/{:?} disagree with rank {}",
                        a.shape(),
                        b.shape(),
                        meta.rank
                    ),
                });
            }
            pairs.push(LoraPair {
                a,
                b,
                alpha: meta.alpha,
            });
        }
        let [q, k, v, ik, iv, o]: [LoraPair<S>; 6] = pairs.try_into().unwrap();
        layers.push(LayerLora { q, k, v, o, ik, iv });
    }
    let data = next(&mut offset, &mut r)?;
    Ok(StyleCheckpoint {
        base_hash: meta.base_hash,
        scales: meta.scales,
        adapter: LoraAdapter {
            rank: meta.rank,
            alpha: meta.alpha,
            layers,
        },
        embedding: ImageEmbedding {
            data,
            source: if meta.embedding_n == 1 {
                EmbeddingSource::Single
            } else {
                EmbeddingSource::Averaged(meta.embedding_n)
            },
        },
        meta: meta.meta,
    })
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        offset: *offset,
        message: format!("truncated read: {e}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{build_denoiser, DenoiserConfig};

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            channels: 3,
            patch: 4,
            width: 16,
            heads: 2,
            layers: 2,
            width_t: 8,
            width_i: 8,
            width_time: 8,
        }
    }

    #[test]
    fn zero_b_leaves_outputs_bit_identical() {
        let m = build_denoiser::<f32>(tiny_cfg(), 1).unwrap();
        let lora = init_lora(&m, 2, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = Tensor::randn(&[3, 8, 8], 1.0, &mut rng);
        let c_t = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let c_i = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let (plain, _) = m.predict_eps(&xt, 7, &c_t, Some(&c_i), None, false).unwrap();
        let (with_lora, _) = m
            .predict_eps(&xt, 7, &c_t, Some(&c_i), Some(&lora), false)
            .unwrap();
        assert_eq!(plain.data(), with_lora.data());
    }

    #[test]
    fn rank_validation_and_counting() {
        let m = build_denoiser::<f32>(tiny_cfg(), 1).unwrap();
        assert!(init_lora(&m, 0, 0).is_err());
        assert!(init_lora(&m, 9, 0).is_err()); // > width_t = 8
        let lora = init_lora(&m, 4, 0).unwrap();
        // rank 4 on a 64-wide square projection costs 4·64 + 64·4 = 512
        let p = LoraPair::<f32>::init(64, 64, 4, 4.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.param_count(), 512);
        // adapter covers 6 projections per layer
        let per_layer: usize = [(16, 16), (8, 16), (8, 16), (16, 16), (8, 16), (8, 16)]
            .iter()
            .map(|&(i, o)| 4 * i + o * 4)
            .sum();
        assert_eq!(lora.param_count(), 2 * per_layer);
    }

    #[test]
    fn same_seed_same_a_matrices() {
        let m = build_denoiser::<f32>(tiny_cfg(), 1).unwrap();
        let a = init_lora(&m, 2, 3).unwrap();
        let b = init_lora(&m, 2, 3).unwrap();
        assert_eq!(a, b);
    }

    fn uniform_scales(n: usize) -> HierarchicalScales {
        HierarchicalScales {
            scales: vec![1.0; n],
            degenerate: false,
            provenance: crate::probe::Provenance {
                prompt_set: "test".into(),
                reference_set: "test".into(),
                normalization: "minmax".into(),
            },
        }
    }

    fn tiny_base() -> BaseModel<f32> {
        BaseModel::new(tiny_cfg(), crate::conditioning::Vocab::default_vocab(), 3).unwrap()
    }

    fn tiny_refs(base: &BaseModel<f32>, n: usize) -> Vec<(Tensor<f32>, TextCondition)> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        (0..n)
            .map(|k| {
                let img = Tensor::<f32>::randn(&[3, 8, 8], 0.4, &mut rng)
                    .map(|v| v.clamp(-1.0, 1.0));
                let cond = crate::conditioning::encode_prompt(
                    &base.vocab,
                    crate::conditioning::SUBJECTS[k % 6],
                    &[],
                )
                .unwrap();
                (img, cond)
            })
            .collect()
    }

    #[test]
    fn finetune_moves_adapter_and_freezes_base() {
        let mut base = tiny_base();
        let refs = tiny_refs(&base, 3);
        let mut adapter = init_lora(&base.model, 2, 5).unwrap();
        let before_base = base.param_hash();
        let before_adapter = adapter.clone();
        let sched = NoiseSchedule::linear(30, 1e-4, 0.05).unwrap();
        let cfg = FinetuneConfig {
            steps: 80,
            batch: 2,
            lr: 1e-2,
            seed: 9,
        };
        let scales = uniform_scales(base.cfg.layers);
        let (log, emb) = finetune(
            &mut base,
            &mut adapter,
            &refs,
            &scales,
            &cfg,
            &sched,
            None,
        )
        .unwrap();
        assert_eq!(log.len(), 80);
        assert_eq!(base.param_hash(), before_base);
        assert_ne!(adapter, before_adapter);
        assert_eq!(emb.source, EmbeddingSource::Averaged(3));
        let head: f64 = log[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let tail: f64 = log[60..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(tail < head, "finetune loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn zero_step_finetune_is_a_no_op() {
        let mut base = tiny_base();
        let refs = tiny_refs(&base, 2);
        let mut adapter = init_lora(&base.model, 2, 5).unwrap();
        let before = adapter.clone();
        let sched = NoiseSchedule::linear(30, 1e-4, 0.05).unwrap();
        let cfg = FinetuneConfig {
            steps: 0,
            batch: 2,
            lr: 5e-3,
            seed: 9,
        };
        let scales = uniform_scales(base.cfg.layers);
        let (log, _) = finetune(
            &mut base,
            &mut adapter,
            &refs,
            &scales,
            &cfg,
            &sched,
            None,
        )
        .unwrap();
        assert!(log.is_empty());
        assert_eq!(adapter, before);
    }

    #[test]
    fn default_budget_scales_with_reference_count() {
        assert_eq!(default_finetune_steps(5), 500);
        assert_eq!(FinetuneConfig::for_refs(5, 0).steps, 500);
        assert_eq!(FinetuneConfig::for_refs(1, 0).steps, 100);
    }

    #[test]
    fn style_checkpoint_roundtrip_and_hash_guard() {
        let mut base = tiny_base();
        let refs = tiny_refs(&base, 2);
        let mut adapter = init_lora(&base.model, 2, 5).unwrap();
        let sched = NoiseSchedule::linear(30, 1e-4, 0.05).unwrap();
        let cfg = FinetuneConfig {
            steps: 10,
            batch: 2,
            lr: 5e-3,
            seed: 9,
        };
        let scales = uniform_scales(base.cfg.layers);
        let (_, emb) = finetune(
            &mut base,
            &mut adapter,
            &refs,
            &scales,
            &cfg,
            &sched,
            None,
        )
        .unwrap();
        let ckpt = StyleCheckpoint {
            base_hash: base.param_hash_hex(),
            scales,
            adapter,
            embedding: emb,
            meta: StyleMeta {
                style_id: "test-style".into(),
                steps: 10,
                lr: 5e-3,
                n_refs: 2,
                seed: 9,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("style.ckpt");
        save_style(&path, &ckpt).unwrap();
        let loaded = load_style::<f32>(&path, &base).unwrap();
        assert_eq!(loaded, ckpt);

        // sampling through the reloaded adapter is bit-identical
        let cond = crate::diffusion::ConditionPair {
            c_t: base
                .embedder
                .embed_value(&refs[0].1)
                .unwrap(),
            c_i: Some(ckpt.embedding.data.clone()),
        };
        let opts = crate::diffusion::SampleOptions::deterministic(4, 1);
        let a = crate::diffusion::sample(&base.model, &cond, &sched, opts, Some(&ckpt.adapter))
            .unwrap();
        let b = crate::diffusion::sample(&base.model, &cond, &sched, opts, Some(&loaded.adapter))
            .unwrap();
        assert_eq!(a.data(), b.data());

        // a different base model refuses the checkpoint
        let other = BaseModel::<f32>::new(
            tiny_cfg(),
            crate::conditioning::Vocab::default_vocab(),
            99,
        )
        .unwrap();
        assert!(matches!(
            load_style::<f32>(&path, &other),
            Err(Error::Incompatible(_))
        ));

        // truncation surfaces as a format error
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(
            load_style::<f32>(&cut, &base),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn delta_transpose_orientation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LoraPair::<f64>::init(3, 5, 2, 2.0, &mut rng).unwrap();
        for v in p.b.data_mut() {
            *v = 0.5;
        }
        let d = p.delta().unwrap();
        assert_eq!(d.shape(), &[3, 5]);
        // element (j, i) of delta equals (alpha/r)·Σ_r B[i,r]·A[r,j]
        let mut expect = 0.0;
        for r in 0..2 {
            expect += p.b.data()[0 * 2 + r] * p.a.data()[r * 3 + 1];
        }
        expect *= 2.0 / 2.0;
        assert!((d.data()[1 * 5 + 0] - expect).abs() < 1e-12);
    }
}
