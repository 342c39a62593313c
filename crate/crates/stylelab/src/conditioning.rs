//! Text and image conditioning: subject-token prompts, a small trainable
//! image encoder, and the style-extracting embedding average.

use crate::error::{Error, Result};
use crate::tensor::{patchify, Graph, NodeId, Scalar, Tensor};
use std::io::BufRead;

/// Number of learned query tokens in an image embedding.
pub const IMAGE_TOKENS: usize = 4;

/// Fixed (padded) prompt length.
pub const PROMPT_LEN: usize = 8;

pub const PAD_TOKEN: &str = "<pad>";

/// Subject tokens understood by the renderer and the prompt encoder.
pub const SUBJECTS: [&str; 6] = ["circle", "square", "triangle", "cross", "ring", "diamond"];

const MODIFIERS: [&str; 8] = [
    "small", "large", "thin", "thick", "pale", "bold", "plain", "fancy",
];

/// Token vocabulary; token ids are indices into the list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    /// The built-in vocabulary: pad, six subjects, eight modifiers.
    pub fn default_vocab() -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string()];
        tokens.extend(SUBJECTS.iter().map(|s| s.to_string()));
        tokens.extend(MODIFIERS.iter().map(|s| s.to_string()));
        Vocab { tokens }
    }

    /// Load from a newline-delimited token file.
    pub fn from_reader(r: impl BufRead) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in r.lines() {
            let line = line?;
            let tok = line.trim();
            if !tok.is_empty() {
                tokens.push(tok.to_string());
            }
        }
        if tokens.is_empty() {
            return Err(Error::Parameter("empty vocabulary file".into()));
        }
        Ok(Vocab { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| Error::Vocabulary {
                token: token.to_string(),
                known: self.tokens.clone(),
            })
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }
}

/// A tokenized prompt: subject plus modifiers, padded to [`PROMPT_LEN`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextCondition {
    pub ids: Vec<usize>,
}

/// Deterministic prompt tokenization. The subject comes first, then
/// modifiers, then padding.
pub fn encode_prompt(vocab: &Vocab, subject: &str, modifiers: &[&str]) -> Result<TextCondition> {
    if 1 + modifiers.len() > PROMPT_LEN {
        return Err(Error::Parameter(format!(
            "prompt too long: 1 subject + {} modifiers > {PROMPT_LEN}",
            modifiers.len()
        )));
    }
    let mut ids = vec![vocab.id(subject)?];
    for m in modifiers {
        ids.push(vocab.id(m)?);
    }
    let pad = vocab.id(PAD_TOKEN)?;
    ids.resize(PROMPT_LEN, pad);
    Ok(TextCondition { ids })
}

/// Learned token-embedding table standing in for a text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedder<S> {
    pub table: Tensor<S>, // [vocab × width_t]
}

impl<S: Scalar> TextEmbedder<S> {
    pub fn new(vocab_len: usize, width: usize, rng: &mut impl rand::Rng) -> Self {
        TextEmbedder {
            // unit-scale rows: the table feeds cross-attention keys/values
            // directly, with no norm in between, so a tiny init starves the
            // text branch next to O(1) image embeddings
            table: Tensor::randn(&[vocab_len, width], 0.5, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool, reg: &mut Vec<NodeId>) -> NodeId {
        let id = g.leaf(self.table.clone(), trainable);
        reg.push(id);
        id
    }

    /// Embed a prompt into c_t [PROMPT_LEN × width_t].
    pub fn embed(&self, g: &mut Graph<S>, table: NodeId, cond: &TextCondition) -> Result<NodeId> {
        g.gather_rows(table, &cond.ids)
    }

    /// Eager embedding (no gradients).
    pub fn embed_value(&self, cond: &TextCondition) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let table = self.bind(&mut g, false, &mut reg);
        let out = self.embed(&mut g, table, cond)?;
        Ok(g.value(out).clone())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![&mut self.table]
    }
}

/// Where an image embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Single,
    Averaged(usize),
}

/// c_i: a small sequence of query tokens summarizing one image (or the
/// average over several).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding<S> {
    pub data: Tensor<S>, // [IMAGE_TOKENS × width_i]
    pub source: EmbeddingSource,
}

/// Elementwise arithmetic mean of single-image embeddings (token
/// position j of the mean is the mean of token position j).
///
/// Summation order: inputs are summed sequentially in the lexicographic
/// order of their raw data bits, which makes the result bit-exact under
/// any permutation of the input list.
pub fn average_embeddings<S: Scalar>(embs: &[ImageEmbedding<S>]) -> Result<ImageEmbedding<S>> {
    if embs.is_empty() {
        return Err(Error::Parameter(
            "average_embeddings: empty embedding list".into(),
        ));
    }
    let shape = embs[0].data.shape().to_vec();
    for e in embs {
        if e.data.shape() != shape.as_slice() {
            return Err(Error::dimension(
                "average_embeddings",
                &shape,
                e.data.shape(),
            ));
        }
        if e.source != EmbeddingSource::Single {
            return Err(Error::Parameter(
                "average_embeddings: inputs must be single-image embeddings".into(),
            ));
        }
    }
    let mut order: Vec<usize> = (0..embs.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (embs[a].data.data(), embs[b].data.data());
        da.iter()
            .map(|v| v.as_f64().to_bits())
            .cmp(db.iter().map(|v| v.as_f64().to_bits()))
    });
    let mut sum = Tensor::<S>::zeros(&shape);
    for &ix in &order {
        sum = sum.add(&embs[ix].data)?;
    }
    let inv = S::from_f64(1.0 / embs.len() as f64);
    Ok(ImageEmbedding {
        data: sum.scale(inv),
        source: EmbeddingSource::Averaged(embs.len()),
    })
}

/// Bound (in-graph) image encoder parameters.
pub struct BoundImageEncoder {
    pub patch_proj: NodeId,
    pub patch_bias: NodeId,
    pub norm_gain: NodeId,
    pub queries: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
}

/// Small patch-attention image encoder producing [`IMAGE_TOKENS`] query
/// tokens. Trained jointly during pretraining, frozen afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder<S> {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub patch_proj: Tensor<S>, // [C·p² × width]
    pub patch_bias: Tensor<S>, // [width]
    pub norm_gain: Tensor<S>,  // [width]
    pub queries: Tensor<S>,    // [IMAGE_TOKENS × width]
    pub w_k: Tensor<S>,        // [width × width]
    pub w_v: Tensor<S>,        // [width × width]
    pub w_o: Tensor<S>,        // [width × width]
}

impl<S: Scalar> ImageEncoder<S> {
    pub fn new(
        image_size: usize,
        channels: usize,
        patch: usize,
        width: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if image_size % patch != 0 {
            return Err(Error::Parameter(format!(
                "image size {image_size} not divisible by patch {patch}"
            )));
        }
        let pd = channels * patch * patch;
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Ok(ImageEncoder {
            image_size,
            channels,
            patch,
            width,
            patch_proj: Tensor::randn(&[pd, width], std(pd), rng),
            patch_bias: Tensor::zeros(&[width]),
            norm_gain: Tensor::full(&[width], S::one()),
            queries: Tensor::randn(&[IMAGE_TOKENS, width], 0.1, rng),
            w_k: Tensor::randn(&[width, width], std(width), rng),
            w_v: Tensor::randn(&[width, width], std(width), rng),
            w_o: Tensor::randn(&[width, width], std(width), rng),
        })
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool, reg: &mut Vec<NodeId>) -> BoundImageEncoder {
        let mut leaf = |t: &Tensor<S>, reg: &mut Vec<NodeId>| {
            let id = g.leaf(t.clone(), trainable);
            reg.push(id);
            id
        };
        BoundImageEncoder {
            patch_proj: leaf(&self.patch_proj, reg),
            patch_bias: leaf(&self.patch_bias, reg),
            norm_gain: leaf(&self.norm_gain, reg),
            queries: leaf(&self.queries, reg),
            w_k: leaf(&self.w_k, reg),
            w_v: leaf(&self.w_v, reg),
            w_o: leaf(&self.w_o, reg),
        }
    }

    /// Must mirror the field order of [`Self::bind`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.patch_proj,
            &mut self.patch_bias,
            &mut self.norm_gain,
            &mut self.queries,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
        ]
    }

    /// In-graph forward from a validated image tensor.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        bound: &BoundImageEncoder,
        image: &Tensor<S>,
    ) -> Result<NodeId> {
        let tokens = patchify(image, self.patch)?;
        let tok = g.constant(tokens);
        let projected = g.matmul(tok, bound.patch_proj)?;
        let projected = g.add_row_bias(projected, bound.patch_bias)?;
        let normed = g.rms_norm(projected, bound.norm_gain)?;
        let k = g.matmul(normed, bound.w_k)?;
        let v = g.matmul(normed, bound.w_v)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(bound.queries, kt)?;
        let logits = g.scale(logits, 1.0 / (self.width as f64).sqrt());
        let attn = g.softmax_rows(logits)?;
        let h = g.matmul(attn, v)?;
        g.matmul(h, bound.w_o)
    }

    fn validate(&self, image: &Tensor<S>) -> Result<()> {
        let expect = [self.channels, self.image_size, self.image_size];
        if image.shape() != expect {
            return Err(Error::Input(format!(
                "image shape {:?}, expected {:?}",
                image.shape(),
                expect
            )));
        }
        for &v in image.data() {
            let v = v.as_f64();
            if !(-1.0 - 1e-6..=1.0 + 1e-6).contains(&v) || !v.is_finite() {
                return Err(Error::Input(format!(
                    "pixel value {v} outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Deterministic single-image embedding (no gradients recorded).
    pub fn encode_image(&self, image: &Tensor<S>) -> Result<ImageEmbedding<S>> {
        self.validate(image)?;
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let bound = self.bind(&mut g, false, &mut reg);
        let out = self.forward(&mut g, &bound, image)?;
        let data = g.value(out).clone();
        data.assert_finite("image embedding")?;
        Ok(ImageEmbedding {
            data,
            source: EmbeddingSource::Single,
        })
    }
}
