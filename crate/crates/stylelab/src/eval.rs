//! Desk-scale evaluation: a nearest-centroid style probe in encoder
//! embedding space, a silhouette-based subject classifier, and the
//! inference-time scale-multiplier sweep.

use crate::conditioning::{ImageEncoder, TextEmbedder, Vocab, SUBJECTS};
use crate::denoiser::Denoiser;
use crate::diffusion::{sample, ConditionPair, SampleOptions};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Graph, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Nearest-centroid style classifier over image-encoder embeddings.
#[derive(Debug, Clone)]
pub struct StyleProbe<S> {
    pub centroids: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> StyleProbe<S> {
    /// Centroid per style from example images (flattened embedding mean).
    pub fn build(
        encoder: &ImageEncoder<S>,
        images_by_style: &[(String, Vec<Tensor<S>>)],
    ) -> Result<Self> {
        if images_by_style.is_empty() {
            return Err(Error::Parameter("no styles for the style probe".into()));
        }
        let mut centroids = Vec::with_capacity(images_by_style.len());
        for (id, images) in images_by_style {
            if images.is_empty() {
                return Err(Error::Parameter(format!("style {id} has no images")));
            }
            let mut acc: Option<Tensor<S>> = None;
            for img in images {
                let e = encoder.encode_image(img)?.data;
                acc = Some(match acc {
                    None => e,
                    Some(a) => a.add(&e)?,
                });
            }
            let c = acc.unwrap().scale(S::from_f64(1.0 / images.len() as f64));
            centroids.push((id.clone(), c));
        }
        Ok(StyleProbe { centroids })
    }

    /// Id of the nearest centroid by Euclidean distance.
    pub fn classify(&self, encoder: &ImageEncoder<S>, image: &Tensor<S>) -> Result<&str> {
        if self.centroids.is_empty() {
            return Err(Error::State("style probe has no centroids".into()));
        }
        let e = encoder.encode_image(image)?.data;
        let mut best: Option<(&str, f64)> = None;
        for (id, c) in &self.centroids {
            let mut d = 0.0;
            for (&a, &b) in e.data().iter().zip(c.data()) {
                let diff = a.as_f64() - b.as_f64();
                d += diff * diff;
            }
            if best.map(|(_, bd)| d < bd).unwrap_or(true) {
                best = Some((id, d));
            }
        }
        Ok(best.unwrap().0)
    }
}

/// Fraction of images whose nearest centroid is `target_style`.
pub fn style_score<S: Scalar>(
    probe: &StyleProbe<S>,
    encoder: &ImageEncoder<S>,
    images: &[Tensor<S>],
    target_style: &str,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Parameter("no images to score".into()));
    }
    let mut hits = 0usize;
    for img in images {
        if probe.classify(encoder, img)? == target_style {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

/// Style-independent silhouette estimate: a pixel belongs to the subject
/// when its color is far from the median border color (the background
/// estimate). Returns a 0/1 image-plan vector of length H·W.
pub fn extract_silhouette<S: Scalar>(image: &Tensor<S>) -> Result<Vec<f32>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::dimension("extract_silhouette", &[3, 0, 0], shape));
    }
    let (h, w) = (shape[1], shape[2]);
    let px = |c: usize, y: usize, x: usize| image.data()[c * h * w + y * w + x].as_f64();
    let mut border: [Vec<f64>; 3] = Default::default();
    for y in 0..h {
        for x in 0..w {
            if y == 0 || y == h - 1 || x == 0 || x == w - 1 {
                for c in 0..3 {
                    border[c].push(px(c, y, x));
                }
            }
        }
    }
    let mut bg = [0.0; 3];
    for c in 0..3 {
        border[c].sort_by(|a, b| a.partial_cmp(b).unwrap());
        bg[c] = border[c][border[c].len() / 2];
    }
    let mut dist = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut d = 0.0;
            for c in 0..3 {
                let diff = px(c, y, x) - bg[c];
                d += diff * diff;
            }
            dist[y * w + x] = d.sqrt();
        }
    }
    // threshold halfway between the background mode and the strongest
    // foreground response, floored so pure-noise images mostly read empty
    let max = dist.iter().cloned().fold(0.0, f64::max);
    let thresh = (max * 0.5).max(0.55);
    Ok(dist.iter().map(|&d| if d > thresh { 1.0 } else { 0.0 }).collect())
}

/// Small silhouette classifier over the six subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentProbe<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

impl<S: Scalar> ContentProbe<S> {
    fn logits_graph(
        &self,
        g: &mut Graph<S>,
        mask: &[f32],
        params: &[crate::tensor::NodeId; 4],
    ) -> Result<crate::tensor::NodeId> {
        let x = g.constant(Tensor::from_f64_slice(
            &[1, mask.len()],
            &mask.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        )?);
        let h = g.matmul(x, params[0])?;
        let h = g.add_row_bias(h, params[1])?;
        let h = g.silu(h);
        let o = g.matmul(h, params[2])?;
        g.add_row_bias(o, params[3])
    }

    fn bind(&self, g: &mut Graph<S>, trainable: bool) -> [crate::tensor::NodeId; 4] {
        [
            g.leaf(self.w1.clone(), trainable),
            g.leaf(self.b1.clone(), trainable),
            g.leaf(self.w2.clone(), trainable),
            g.leaf(self.b2.clone(), trainable),
        ]
    }

    /// Predicted subject index for an image.
    pub fn classify(&self, image: &Tensor<S>) -> Result<usize> {
        let mask = extract_silhouette(image)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let logits = self.logits_graph(&mut g, &mask, &params)?;
        let v = g.value(logits).data();
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Train the content probe on clean renders across the given styles.
/// Reaches ≥95% on held-out clean renders with the default corpus styles.
pub fn train_content_probe<S: Scalar>(
    styles: &[crate::data::StyleSpec],
    steps: usize,
    seed: u64,
) -> Result<ContentProbe<S>> {
    if styles.is_empty() {
        return Err(Error::Parameter("no styles for probe training".into()));
    }
    let dim = crate::data::IMAGE_SIZE * crate::data::IMAGE_SIZE;
    let classes = SUBJECTS.len();
    let hidden = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe: ContentProbe<S> = ContentProbe {
        w1: Tensor::randn(&[dim, hidden], 1.0 / (dim as f64).sqrt(), &mut rng),
        b1: Tensor::zeros(&[hidden]),
        w2: Tensor::randn(&[hidden, classes], 1.0 / (hidden as f64).sqrt(), &mut rng),
        b2: Tensor::zeros(&[classes]),
    };
    let mut opt = crate::optim::Adam::new(3e-3);
    let batch = 16;
    for step in 0..steps {
        let mut g = Graph::new();
        let mut total: Option<crate::tensor::NodeId> = None;
        let params = probe.bind(&mut g, true);
        for _ in 0..batch {
            let style = &styles[rng.gen_range(0..styles.len())];
            let class = rng.gen_range(0..classes);
            let rseed = rng.gen::<u64>();
            let img = crate::data::render_sample::<S>(style, SUBJECTS[class], rseed)?;
            let mask = extract_silhouette(&img)?;
            let logits = probe.logits_graph(&mut g, &mask, &params)?;
            let probs = g.softmax_rows(logits)?;
            let lp = g.log(probs);
            let pick = g.slice_cols(lp, class, 1)?;
            let nll = g.scale(pick, -1.0 / batch as f64);
            let nll = g.mean_all(nll);
            total = Some(match total {
                None => nll,
                Some(t) => g.add(t, nll)?,
            });
        }
        let loss = total.unwrap();
        g.backward(loss)?;
        let grads: Vec<_> = params.iter().map(|&id| g.grad_tensor(id)).collect();
        let mut ps = [
            &mut probe.w1,
            &mut probe.b1,
            &mut probe.w2,
            &mut probe.b2,
        ];
        opt.step(&mut ps, &grads)?;
        let lv = g.value(loss).data()[0].as_f64();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!(
                "content probe loss became non-finite at step {step}"
            )));
        }
    }
    Ok(probe)
}

/// Fraction of images classified as their prompt subject.
pub fn content_score<S: Scalar>(
    probe: &ContentProbe<S>,
    images: &[Tensor<S>],
    subject_ids: &[usize],
) -> Result<f64> {
    if images.is_empty() || images.len() != subject_ids.len() {
        return Err(Error::Parameter(format!(
            "{} images vs {} labels",
            images.len(),
            subject_ids.len()
        )));
    }
    let mut hits = 0usize;
    for (img, &label) in images.iter().zip(subject_ids) {
        if probe.classify(img)? == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Parameter(format!(
            "spearman needs two equal-length series, got {} / {}",
            xs.len(),
            ys.len()
        )));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut ix: Vec<usize> = (0..v.len()).collect();
        ix.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < ix.len() {
            let mut j = i;
            while j + 1 < ix.len() && v[ix[j + 1]] == v[ix[i]] {
                j += 1;
            }
            let r = (i + j) as f64 / 2.0 + 1.0;
            for &k in &ix[i..=j] {
                ranks[k] = r;
            }
            i = j + 1;
        }
        ranks
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx == 0.0 || dy == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (dx * dy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub multiplier: f64,
    pub style_accuracy: f64,
    pub content_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_style: String,
    pub style_accuracy: f64,
    pub content_accuracy: f64,
    pub curve: Vec<SweepPoint>,
    pub samples_per_point: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("multiplier,style_accuracy,content_accuracy\n");
        for p in &self.curve {
            out.push_str(&format!(
                "{},{},{}\n",
                p.multiplier, p.style_accuracy, p.content_accuracy
            ));
        }
        out
    }

    /// gnuplot-compatible whitespace-separated data file.
    pub fn to_dat(&self) -> String {
        let mut out = String::from("# multiplier style_accuracy content_accuracy\n");
        for p in &self.curve {
            out.push_str(&format!(
                "{} {} {}\n",
                p.multiplier, p.style_accuracy, p.content_accuracy
            ));
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Render the curve into a simple PPM raster (style accuracy bright,
    /// content accuracy dark trace).
    pub fn plot_ppm(&self, width: usize, height: usize) -> Result<Tensor<f32>> {
        if self.curve.is_empty() {
            return Err(Error::State("empty curve".into()));
        }
        let mut img = Tensor::<f32>::full(&[3, height, width], 1.0);
        let put = |img: &mut Tensor<f32>, x: usize, y: usize, rgb: [f32; 3]| {
            for (c, &v) in rgb.iter().enumerate() {
                img.data_mut()[c * height * width + y * width + x] = v;
            }
        };
        let n = self.curve.len();
        for (i, p) in self.curve.iter().enumerate() {
            let x = if n == 1 { 0 } else { i * (width - 1) / (n - 1) };
            let ys = ((1.0 - p.style_accuracy) * (height - 1) as f64).round() as usize;
            let yc = ((1.0 - p.content_accuracy) * (height - 1) as f64).round() as usize;
            put(&mut img, x, ys.min(height - 1), [1.0, -0.8, -0.8]);
            put(&mut img, x, yc.min(height - 1), [-0.8, -0.8, 1.0]);
        }
        Ok(img)
    }
}

/// Everything the sweep needs besides the model.
pub struct EvalContext<'a, S> {
    pub embedder: &'a TextEmbedder<S>,
    pub vocab: &'a Vocab,
    pub encoder: &'a ImageEncoder<S>,
    pub style_probe: &'a StyleProbe<S>,
    pub content_probe: &'a ContentProbe<S>,
    pub sched: &'a NoiseSchedule,
    pub sample_steps: usize,
    /// Prompt guidance weight for sampling; 1.0 disables guidance.
    pub guidance: f64,
}

/// Generate `count` conditional samples (parallel over seeds) and return
/// them with their prompt subject indices. Subjects rotate through the
/// full vocabulary list.
pub fn generate_eval_samples<S: Scalar>(
    model: &Denoiser<S>,
    lora: Option<&LoraAdapter<S>>,
    ctx: &EvalContext<'_, S>,
    c_i: Option<&Tensor<S>>,
    count: usize,
    base_seed: u64,
) -> Result<(Vec<Tensor<S>>, Vec<usize>)> {
    let mut jobs = Vec::with_capacity(count);
    for k in 0..count {
        let class = k % SUBJECTS.len();
        let cond = crate::conditioning::encode_prompt(ctx.vocab, SUBJECTS[class], &[])?;
        let c_t = ctx.embedder.embed_value(&cond)?;
        jobs.push((
            ConditionPair {
                c_t,
                c_i: c_i.cloned(),
            },
            class,
            base_seed.wrapping_add(k as u64),
        ));
    }
    let workers = crate::data::worker_threads().min(jobs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<Tensor<S>>>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let (cond, _, seed) = &jobs[i];
                let r = sample(
                    model,
                    cond,
                    ctx.sched,
                    SampleOptions::guided(ctx.sample_steps, *seed, ctx.guidance),
                    lora,
                );
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for (slot, (_, class, _)) in slots.into_iter().zip(&jobs) {
        // samples can stray outside [-1, 1]; clamp for the probes
        let img = slot.into_inner().unwrap().expect("worker ran")?;
        images.push(img.map(|v| {
            let one = S::one();
            if v > one {
                one
            } else if v < -one {
                -one
            } else {
                v
            }
        }));
        labels.push(*class);
    }
    Ok((images, labels))
}

/// Score one operating point: sample, then style and content accuracy.
pub fn eval_point<S: Scalar>(
    model: &Denoiser<S>,
    lora: Option<&LoraAdapter<S>>,
    ctx: &EvalContext<'_, S>,
    c_i: Option<&Tensor<S>>,
    target_style: &str,
    count: usize,
    base_seed: u64,
) -> Result<(f64, f64)> {
    let (images, labels) = generate_eval_samples(model, lora, ctx, c_i, count, base_seed)?;
    let s = style_score(ctx.style_probe, ctx.encoder, &images, target_style)?;
    let c = content_score(ctx.content_probe, &images, &labels)?;
    Ok((s, c))
}

/// The §-style multiplier grid: 0.0 to 1.0 in steps of 0.05.
pub fn default_multiplier_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// Sweep the adapter scale multiplier over `grid`, scoring each point.
/// The model's layer scales are restored afterwards.
pub fn multiplier_sweep<S: Scalar>(
    model: &mut Denoiser<S>,
    lora: Option<&LoraAdapter<S>>,
    scales: &[f64],
    ctx: &EvalContext<'_, S>,
    c_i: &Tensor<S>,
    target_style: &str,
    grid: &[f64],
    samples_per_point: usize,
    base_seed: u64,
    config_hash: String,
) -> Result<EvalReport> {
    if grid.is_empty() || grid.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::Parameter("multiplier grid must lie in [0, 1]".into()));
    }
    let saved = model.layer_scales();
    let mut curve = Vec::with_capacity(grid.len());
    for (gi, &mult) in grid.iter().enumerate() {
        model.set_layer_scales(scales, mult)?;
        let (s, c) = eval_point(
            model,
            lora,
            ctx,
            Some(c_i),
            target_style,
            samples_per_point,
            base_seed.wrapping_add((gi as u64) << 24),
        )?;
        curve.push(SweepPoint {
            multiplier: mult,
            style_accuracy: s,
            content_accuracy: c,
        });
    }
    // restore whatever effective scales were installed before
    for (b, &s) in model.blocks.iter_mut().zip(&saved) {
        b.cross.image_scale = s;
    }
    let last = curve.last().unwrap();
    Ok(EvalReport {
        target_style: target_style.to_string(),
        style_accuracy: last.style_accuracy,
        content_accuracy: last.content_accuracy,
        curve,
        samples_per_point,
        config_hash,
    })
}
