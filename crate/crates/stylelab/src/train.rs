//! Joint pretraining of the denoiser, text table, and image encoder, plus
//! the base-model checkpoint format.

use crate::conditioning::{ImageEncoder, TextCondition, TextEmbedder, Vocab, PROMPT_LEN};
use crate::data::CorpusManifest;
use crate::denoiser::{build_denoiser, Denoiser, DenoiserConfig};
use crate::diffusion::denoise_loss_nodes;
use crate::error::{Error, Result};
use crate::schedule::{DiffusionBatch, NoiseSchedule};
use crate::tensor::{read_tensor, write_tensor, Graph, NodeId, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Denoiser plus its two condition encoders. Everything here trains
/// jointly during pretraining and is frozen afterwards.
#[derive(Debug, Clone)]
pub struct BaseModel<S> {
    pub cfg: DenoiserConfig,
    pub vocab: Vocab,
    pub model: Denoiser<S>,
    pub embedder: TextEmbedder<S>,
    pub encoder: ImageEncoder<S>,
}

impl<S: Scalar> BaseModel<S> {
    pub fn new(cfg: DenoiserConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let model = build_denoiser(cfg.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let embedder = TextEmbedder::new(vocab.len(), cfg.width_t, &mut rng);
        let encoder = ImageEncoder::new(
            cfg.image_size,
            cfg.channels,
            cfg.patch,
            cfg.width_i,
            &mut rng,
        )?;
        Ok(BaseModel {
            cfg,
            vocab,
            model,
            embedder,
            encoder,
        })
    }

    /// Hash over every trainable tensor (denoiser, table, encoder).
    pub fn param_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor<S>| {
            for &v in t.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        };
        for t in self.model.params() {
            feed(t);
        }
        feed(&self.embedder.table);
        feed(&self.encoder.patch_proj);
        feed(&self.encoder.patch_bias);
        feed(&self.encoder.norm_gain);
        feed(&self.encoder.queries);
        feed(&self.encoder.w_k);
        feed(&self.encoder.w_v);
        feed(&self.encoder.w_o);
        h.finalize().into()
    }

    pub fn param_hash_hex(&self) -> String {
        self.param_hash().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One pretraining item: a clean render and its prompt.
#[derive(Debug, Clone)]
pub struct TrainItem<S> {
    pub image: Tensor<S>,
    pub cond: TextCondition,
    pub style_id: String,
}

/// Load every pretrain-split image referenced by the manifest.
pub fn load_pretrain_set<S: Scalar>(
    root: &Path,
    manifest: &CorpusManifest,
    vocab: &Vocab,
) -> Result<Vec<TrainItem<S>>> {
    let mut out = Vec::new();
    for entry in manifest.entries_for(crate::data::Split::Pretrain) {
        let image = crate::data::read_ppm(&root.join(&entry.path))?;
        let cond = crate::conditioning::encode_prompt(vocab, &entry.subject, &[])?;
        out.push(TrainItem {
            image,
            cond,
            style_id: entry.style_id.clone(),
        });
    }
    if out.is_empty() {
        return Err(Error::Input("manifest has no pretrain entries".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Independent per-sample drop probability for each condition.
    pub cond_dropout: f64,
    /// Drop probability for the image condition alone; falls back to
    /// `cond_dropout` when unset. 1.0 trains a text-only model.
    pub image_dropout: Option<f64>,
    pub seed: u64,
    /// Linear warmup steps before the cosine decay takes over.
    pub warmup: usize,
    /// Cosine decay floor as a fraction of `lr`.
    pub min_lr_frac: f64,
    /// Weight EMA decay, swapped in when training ends. 0 disables.
    pub ema: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch: 8,
            lr: 2e-3,
            cond_dropout: 0.1,
            image_dropout: None,
            seed: 0,
            warmup: 200,
            min_lr_frac: 0.1,
            ema: 0.999,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Parameter("steps and batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Parameter(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::Parameter(format!(
                "condition dropout {} outside [0, 1)",
                self.cond_dropout
            )));
        }
        if let Some(d) = self.image_dropout {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Parameter(format!(
                    "image dropout {d} outside [0, 1]"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::Parameter(format!(
                "ema decay {} outside [0, 1)",
                self.ema
            )));
        }
        if !(0.0 < self.min_lr_frac && self.min_lr_frac <= 1.0) {
            return Err(Error::Parameter(format!(
                "min lr fraction {} outside (0, 1]",
                self.min_lr_frac
            )));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// "step,loss,grad_norm" CSV.
pub fn training_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,loss,grad_norm\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.grad_norm));
    }
    out
}

/// Run the joint pretraining loop. Deterministic for a given
/// (model seed, config seed, training set). `on_step` sees every log row
/// as it is produced.
pub fn pretrain<S: Scalar>(
    base: &mut BaseModel<S>,
    set: &[TrainItem<S>],
    cfg: &PretrainConfig,
    sched: &NoiseSchedule,
    mut on_step: Option<&mut dyn FnMut(&LogRow)>,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Parameter("empty training set".into()));
    }
    for item in set {
        let want = [base.cfg.channels, base.cfg.image_size, base.cfg.image_size];
        if item.image.shape() != want {
            return Err(Error::dimension(
                "pretrain item",
                &want,
                item.image.shape(),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = crate::optim::Adam::new(cfg.lr);
    // items grouped by style: the image condition is drawn from the same
    // style as the target but is usually a different render, so it carries
    // style without giving away the target's subject
    let mut by_style: std::collections::HashMap<&str, Vec<usize>> = Default::default();
    for (i, item) in set.iter().enumerate() {
        by_style.entry(item.style_id.as_str()).or_default().push(i);
    }
    let zero_ct = Tensor::<S>::zeros(&[PROMPT_LEN, base.cfg.width_t]);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut ema: Option<Vec<Vec<f64>>> = None;
    for step in 0..cfg.steps {
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        let decay = cfg.min_lr_frac + (1.0 - cfg.min_lr_frac) * cos;
        let warm = if cfg.warmup > 0 {
            ((step + 1) as f64 / cfg.warmup as f64).min(1.0)
        } else {
            1.0
        };
        opt.lr = cfg.lr * warm * decay;
        let mut g = Graph::new();
        let bound = base.model.bind(&mut g, true, None, false)?;
        let mut table_reg = Vec::new();
        let table = base.embedder.bind(&mut g, true, &mut table_reg);
        let mut enc_reg = Vec::new();
        let enc = base.encoder.bind(&mut g, true, &mut enc_reg);

        let mut x0 = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut eps = Vec::with_capacity(cfg.batch);
        let mut conds: Vec<(NodeId, Option<NodeId>)> = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let item = &set[rng.gen_range(0..set.len())];
            let drop_t = rng.gen::<f64>() < cfg.cond_dropout;
            let drop_i = rng.gen::<f64>() < cfg.image_dropout.unwrap_or(cfg.cond_dropout);
            let ct = if drop_t {
                g.constant(zero_ct.clone())
            } else {
                base.embedder.embed(&mut g, table, &item.cond)?
            };
            let ci = if drop_i {
                None
            } else {
                let peers = &by_style[item.style_id.as_str()];
                let reference = &set[peers[rng.gen_range(0..peers.len())]];
                Some(base.encoder.forward(&mut g, &enc, &reference.image)?)
            };
            conds.push((ct, ci));
            ts.push(rng.gen_range(1..=sched.steps()));
            eps.push(Tensor::randn(item.image.shape(), 1.0, &mut rng));
            x0.push(item.image.clone());
        }
        let batch = DiffusionBatch::new(x0, ts, eps, sched)?;
        let loss = denoise_loss_nodes(&base.model, &mut g, &bound, &batch, &conds)?;
        g.backward(loss)?;

        let mut ids = bound.base_params.clone();
        ids.push(table);
        ids.extend_from_slice(&enc_reg);
        let grads: Vec<Option<Tensor<S>>> = ids.iter().map(|&id| g.grad_tensor(id)).collect();
        let gn = crate::optim::grad_norm(&grads);
        let lv = g.value(loss).data()[0].as_f64();
        if !lv.is_finite() || !gn.is_finite() {
            return Err(Error::Numeric(format!(
                "pretraining diverged at step {step}: loss {lv}, grad norm {gn}"
            )));
        }
        let mut params = base.model.params_mut();
        params.extend(base.embedder.params_mut());
        params.extend(base.encoder.params_mut());
        opt.step(&mut params, &grads)?;
        if cfg.ema > 0.0 {
            let shadow = ema.get_or_insert_with(|| {
                params.iter().map(|p| p.to_f64_vec()).collect()
            });
            for (sh, p) in shadow.iter_mut().zip(&params) {
                for (s, v) in sh.iter_mut().zip(p.data()) {
                    *s = cfg.ema * *s + (1.0 - cfg.ema) * v.as_f64();
                }
            }
        }
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
    if let Some(shadow) = ema {
        let mut params = base.model.params_mut();
        params.extend(base.embedder.params_mut());
        params.extend(base.encoder.params_mut());
        for (p, sh) in params.iter_mut().zip(&shadow) {
            for (v, &s) in p.data_mut().iter_mut().zip(sh) {
                *v = S::from_f64(s);
            }
        }
    }
    Ok(log)
}

pub const BASE_MAGIC: &[u8; 8] = b"STLBASE1";

#[derive(Serialize, Deserialize)]
struct BaseMeta {
    version: u32,
    denoiser: DenoiserConfig,
    vocab: Vec<String>,
    tensor_count: u32,
}

fn base_tensors<S: Scalar>(base: &BaseModel<S>) -> Vec<&Tensor<S>> {
    let mut out = base.model.params();
    out.push(&base.embedder.table);
    out.push(&base.encoder.patch_proj);
    out.push(&base.encoder.patch_bias);
    out.push(&base.encoder.norm_gain);
    out.push(&base.encoder.queries);
    out.push(&base.encoder.w_k);
    out.push(&base.encoder.w_v);
    out.push(&base.encoder.w_o);
    out
}

/// Serialize the base model: magic, length-prefixed JSON metadata, then
/// every tensor in a fixed declared order.
pub fn save_base<S: Scalar>(path: &Path, base: &BaseModel<S>) -> Result<()> {
    let tensors = base_tensors(base);
    let meta = BaseMeta {
        version: 1,
        denoiser: base.cfg.clone(),
        vocab: base.vocab.tokens().to_vec(),
        tensor_count: tensors.len() as u32,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    {
        let mut w = BufWriter::new(&mut buf);
        w.write_all(BASE_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for t in tensors {
            write_tensor(&mut w, t)?;
        }
        w.flush()?;
    }
    crate::data::write_atomic(path, &buf)
}

pub fn load_base<S: Scalar>(path: &Path) -> Result<BaseModel<S>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let mut magic = [0u8; 8];
    read_exact_at(&mut r, &mut magic, &mut offset)?;
    if &magic != BASE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad base checkpoint magic {magic:?}"),
        });
    }
    let mut len = [0u8; 4];
    read_exact_at(&mut r, &mut len, &mut offset)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact_at(&mut r, &mut json, &mut offset)?;
    let meta: BaseMeta = serde_json::from_slice(&json).map_err(|e| Error::Format {
        offset: 12,
        message: format!("base metadata: {e}"),
    })?;
    if meta.version != 1 {
        return Err(Error::Incompatible(format!(
            "base checkpoint version {}",
            meta.version
        )));
    }
    let vocab = Vocab::from_reader(std::io::Cursor::new(meta.vocab.join("\n")))?;
    let mut base = BaseModel::<S>::new(meta.denoiser, vocab, 0)?;
    {
        let mut targets = base.model.params_mut();
        targets.extend(base.embedder.params_mut());
        targets.extend(base.encoder.params_mut());
        if targets.len() != meta.tensor_count as usize {
            return Err(Error::Incompatible(format!(
                "checkpoint declares {} tensors, model has {}",
                meta.tensor_count,
                targets.len()
            )));
        }
        for t in targets {
            let read = read_tensor::<S, _>(&mut r, &mut offset)?;
            if read.shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "checkpoint tensor shape {:?}, model expects {:?}",
                    read.shape(),
                    t.shape()
                )));
            }
            *t = read;
        }
    }
    Ok(base)
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format {
        offset: *offset,
        message: format!("truncated read: {e}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}
