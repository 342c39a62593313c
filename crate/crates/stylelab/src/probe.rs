//! Contribution probing: per-layer, per-timestep cosines between each
//! cross-attention branch and the combined layer output, and the
//! hierarchical per-layer scales derived from them.

use crate::conditioning::{ImageEmbedding, TextEmbedder, Vocab};
use crate::denoiser::Denoiser;
use crate::diffusion::{sample_with_recorder, ConditionPair, SampleOptions};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{cosine, Scalar};
use std::io::Read;
use std::path::Path;

/// Which reference conditioning produced a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefTag {
    /// Conditioned on the embedding of reference image `n`.
    Single(usize),
    /// Conditioned on the averaged reference embedding.
    Averaged,
}

/// A completed probe run: P_t[d][k] and P_i[d][k] over layers d and the
/// descending inference timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionTrace {
    pub layers: usize,
    pub timesteps: Vec<usize>,
    pub reference: RefTag,
    pub prompt_id: u32,
    /// Row-major [layers × timesteps].
    pub p_t: Vec<f64>,
    pub p_i: Vec<f64>,
}

impl ContributionTrace {
    pub fn t_inf(&self) -> usize {
        self.timesteps.len()
    }

    fn check_complete(&self) -> Result<()> {
        let n = self.layers * self.t_inf();
        if self.p_t.len() != n || self.p_i.len() != n || self.layers == 0 || n == 0 {
            return Err(Error::TraceIntegrity(format!(
                "trace holds {}x{} entries, found {} / {}",
                self.layers,
                self.t_inf(),
                self.p_t.len(),
                self.p_i.len()
            )));
        }
        for &v in self.p_t.iter().chain(&self.p_i) {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::TraceIntegrity(format!(
                    "contribution cosine {v} outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Run one probe inference and record the full trace. The model's layer
/// scales must all be 1 (scales are measured on the unscaled system); the
/// generated image is discarded.
pub fn record_contributions<S: Scalar>(
    model: &Denoiser<S>,
    cond: &ConditionPair<S>,
    sched: &NoiseSchedule,
    seed: u64,
    t_inf: usize,
    reference: RefTag,
    prompt_id: u32,
) -> Result<ContributionTrace> {
    if cond.c_i.is_none() {
        return Err(Error::Contract(
            "probing needs an image condition".into(),
        ));
    }
    if model.layer_scales().iter().any(|&s| s != 1.0) {
        return Err(Error::Contract(
            "probe requires all layer scales set to 1".into(),
        ));
    }
    let layers = model.cfg.layers;
    let mut timesteps = Vec::with_capacity(t_inf);
    let mut cols: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(t_inf);
    let mut err: Option<Error> = None;
    {
        let mut rec = |(t, triples): crate::diffusion::StepTriples<S>| {
            if err.is_some() {
                return;
            }
            if triples.len() != layers {
                err = Some(Error::TraceIntegrity(format!(
                    "step at t={t} recorded {} of {layers} layers",
                    triples.len()
                )));
                return;
            }
            let mut pt = Vec::with_capacity(layers);
            let mut pi = Vec::with_capacity(layers);
            for tr in &triples {
                match (cosine(&tr.z_t, &tr.z), cosine(&tr.z_i, &tr.z)) {
                    (Ok(a), Ok(b)) => {
                        pt.push(a);
                        pi.push(b);
                    }
                    (Err(e), _) | (_, Err(e)) => {
                        err = Some(e);
                        return;
                    }
                }
            }
            timesteps.push(t);
            cols.push((pt, pi));
        };
        sample_with_recorder(
            model,
            cond,
            sched,
            SampleOptions::deterministic(t_inf, seed),
            None,
            Some(&mut rec),
        )?;
    }
    if let Some(e) = err {
        return Err(e);
    }
    if cols.len() != t_inf {
        return Err(Error::TraceIntegrity(format!(
            "{} of {t_inf} probe steps recorded",
            cols.len()
        )));
    }
    let mut p_t = vec![0.0; layers * t_inf];
    let mut p_i = vec![0.0; layers * t_inf];
    for (k, (pt, pi)) in cols.iter().enumerate() {
        for d in 0..layers {
            p_t[d * t_inf + k] = pt[d];
            p_i[d * t_inf + k] = pi[d];
        }
    }
    let trace = ContributionTrace {
        layers,
        timesteps,
        reference,
        prompt_id,
        p_t,
        p_i,
    };
    trace.check_complete()?;
    Ok(trace)
}

/// Per-layer mean over timesteps of (P_i − P_t).
pub fn layer_difference(trace: &ContributionTrace) -> Result<Vec<f64>> {
    trace.check_complete()?;
    let t = trace.t_inf();
    Ok((0..trace.layers)
        .map(|d| {
            (0..t)
                .map(|k| trace.p_i[d * t + k] - trace.p_t[d * t + k])
                .sum::<f64>()
                / t as f64
        })
        .collect())
}

fn mean_difference(traces: &[ContributionTrace]) -> Result<Vec<f64>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Parameter("no traces to aggregate".into()))?;
    let mut acc = vec![0.0; first.layers];
    for tr in traces {
        if tr.layers != first.layers || tr.t_inf() != first.t_inf() {
            return Err(Error::dimension(
                "trace aggregation",
                &[first.layers, first.t_inf()],
                &[tr.layers, tr.t_inf()],
            ));
        }
        for (a, d) in acc.iter_mut().zip(layer_difference(tr)?) {
            *a += d;
        }
    }
    for a in acc.iter_mut() {
        *a /= traces.len() as f64;
    }
    Ok(acc)
}

/// Per-layer image-branch scales with their computation provenance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HierarchicalScales {
    pub scales: Vec<f64>,
    /// True when the layer differences were constant and the min-max
    /// normalization fell back to all-ones.
    pub degenerate: bool,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub prompt_set: String,
    pub reference_set: String,
    pub normalization: String,
}

/// Min-max normalization onto [0, 1]. Constant input (or a single layer)
/// has no ordering information; it maps to all ones with the degenerate
/// flag set, keeping full style injection.
pub fn minmax_normalize(diffs: &[f64]) -> (Vec<f64>, bool) {
    let min = diffs.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_normal() {
        return (vec![1.0; diffs.len()], true);
    }
    (diffs.iter().map(|d| (d - min) / (max - min)).collect(), false)
}

/// The scale rule: per-layer min-max of (averaged-reference difference
/// minus mean single-reference difference). Layers where the averaged
/// condition contributes relatively more carry style and keep scale near 1.
pub fn compute_hierarchical_scales(
    singles: &[ContributionTrace],
    multi: &[ContributionTrace],
) -> Result<HierarchicalScales> {
    if singles.is_empty() || multi.is_empty() {
        return Err(Error::Parameter(
            "need at least one single-reference and one averaged trace".into(),
        ));
    }
    for tr in singles {
        if tr.reference == RefTag::Averaged {
            return Err(Error::Parameter(
                "averaged trace in the single-reference list".into(),
            ));
        }
    }
    for tr in multi {
        if tr.reference != RefTag::Averaged {
            return Err(Error::Parameter(
                "single-reference trace in the averaged list".into(),
            ));
        }
    }
    let d_s = mean_difference(singles)?;
    let d_m = mean_difference(multi)?;
    if d_s.len() != d_m.len() {
        return Err(Error::dimension("scale layers", &[d_s.len()], &[d_m.len()]));
    }
    let diffs: Vec<f64> = d_m.iter().zip(&d_s).map(|(m, s)| m - s).collect();
    let (scales, degenerate) = minmax_normalize(&diffs);
    let mut prompt_ids: Vec<u32> = singles
        .iter()
        .chain(multi)
        .map(|t| t.prompt_id)
        .collect();
    prompt_ids.sort_unstable();
    prompt_ids.dedup();
    let mut refs: Vec<usize> = singles
        .iter()
        .filter_map(|t| match t.reference {
            RefTag::Single(n) => Some(n),
            RefTag::Averaged => None,
        })
        .collect();
    refs.sort_unstable();
    refs.dedup();
    Ok(HierarchicalScales {
        scales,
        degenerate,
        provenance: Provenance {
            prompt_set: format!("{prompt_ids:?}"),
            reference_set: format!("singles {refs:?} + averaged"),
            normalization: "minmax".to_string(),
        },
    })
}

/// Default probe prompts: eight prompts over the one subject held out of
/// the reference set, varied by modifier.
pub fn default_probe_prompts() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        ("diamond", vec![]),
        ("diamond", vec!["small"]),
        ("diamond", vec!["large"]),
        ("diamond", vec!["thin"]),
        ("diamond", vec!["thick"]),
        ("diamond", vec!["pale"]),
        ("diamond", vec!["bold"]),
        ("diamond", vec!["plain"]),
    ]
}

/// Full scale-measurement pipeline: probe every (prompt, single reference)
/// pair and every (prompt, averaged reference) pair, then reduce. Runs are
/// parallel over pairs; the model is read-only throughout.
pub fn probe_style<S: Scalar>(
    model: &Denoiser<S>,
    embedder: &TextEmbedder<S>,
    vocab: &Vocab,
    singles: &[ImageEmbedding<S>],
    averaged: &ImageEmbedding<S>,
    sched: &NoiseSchedule,
    t_inf: usize,
    seed: u64,
) -> Result<(HierarchicalScales, Vec<ContributionTrace>)> {
    if singles.is_empty() {
        return Err(Error::Parameter("no reference embeddings".into()));
    }
    let prompts = default_probe_prompts();
    let mut jobs: Vec<(ConditionPair<S>, RefTag, u32, u64)> = Vec::new();
    for (pid, (subject, mods)) in prompts.iter().enumerate() {
        let cond = crate::conditioning::encode_prompt(vocab, subject, mods)?;
        let c_t = embedder.embed_value(&cond)?;
        for (n, e) in singles.iter().enumerate() {
            jobs.push((
                ConditionPair {
                    c_t: c_t.clone(),
                    c_i: Some(e.data.clone()),
                },
                RefTag::Single(n),
                pid as u32,
                seed ^ ((pid as u64) << 32) ^ n as u64,
            ));
        }
        jobs.push((
            ConditionPair {
                c_t,
                c_i: Some(averaged.data.clone()),
            },
            RefTag::Averaged,
            pid as u32,
            seed ^ ((pid as u64) << 32) ^ 0xffff,
        ));
    }
    let workers = crate::data::worker_threads().min(jobs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<ContributionTrace>>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let (cond, tag, pid, jseed) = &jobs[i];
                let r = record_contributions(model, cond, sched, *jseed, t_inf, *tag, *pid);
                *results[i].lock().unwrap() = Some(r);
            });
        }
    });
    let mut single_traces = Vec::new();
    let mut multi_traces = Vec::new();
    for cell in results {
        let tr = cell.into_inner().unwrap().expect("worker ran")?;
        match tr.reference {
            RefTag::Averaged => multi_traces.push(tr),
            RefTag::Single(_) => single_traces.push(tr),
        }
    }
    let scales = compute_hierarchical_scales(&single_traces, &multi_traces)?;
    single_traces.extend(multi_traces);
    Ok((scales, single_traces))
}

pub const TRACE_MAGIC: &[u8; 8] = b"STLTRCE1";

/// Versioned binary trace container.
pub fn write_trace(path: &Path, trace: &ContributionTrace) -> Result<()> {
    trace.check_complete()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(TRACE_MAGIC);
    buf.extend_from_slice(&(trace.layers as u32).to_le_bytes());
    buf.extend_from_slice(&(trace.t_inf() as u32).to_le_bytes());
    let (kind, ix) = match trace.reference {
        RefTag::Single(n) => (0u8, n as u32),
        RefTag::Averaged => (1u8, 0),
    };
    buf.push(kind);
    buf.extend_from_slice(&ix.to_le_bytes());
    buf.extend_from_slice(&trace.prompt_id.to_le_bytes());
    for &t in &trace.timesteps {
        buf.extend_from_slice(&(t as u32).to_le_bytes());
    }
    for v in trace.p_t.iter().chain(&trace.p_i) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    crate::data::write_atomic(path, &buf)
}

pub fn read_trace(path: &Path) -> Result<ContributionTrace> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let fmt = |off: usize, m: &str| Error::Format {
        offset: off as u64,
        message: m.to_string(),
    };
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(fmt(bytes.len(), "truncated trace file"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 8)? != TRACE_MAGIC {
        return Err(fmt(0, "bad trace magic"));
    }
    let u32at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let layers = u32at(take(&mut off, 4)?) as usize;
    let t_inf = u32at(take(&mut off, 4)?) as usize;
    let kind = take(&mut off, 1)?[0];
    let ix = u32at(take(&mut off, 4)?) as usize;
    let prompt_id = u32at(take(&mut off, 4)?);
    let reference = match kind {
        0 => RefTag::Single(ix),
        1 => RefTag::Averaged,
        _ => return Err(fmt(off - 9, "unknown reference tag")),
    };
    let mut timesteps = Vec::with_capacity(t_inf);
    for _ in 0..t_inf {
        timesteps.push(u32at(take(&mut off, 4)?) as usize);
    }
    let read_mat = |off: &mut usize| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(layers * t_inf);
        for _ in 0..layers * t_inf {
            let b = take(off, 4)?;
            v.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
        }
        Ok(v)
    };
    let p_t = read_mat(&mut off)?;
    let p_i = read_mat(&mut off)?;
    let tr = ContributionTrace {
        layers,
        timesteps,
        reference,
        prompt_id,
        p_t,
        p_i,
    };
    tr.check_complete()
        .map_err(|e| fmt(off, &format!("inconsistent trace: {e}")))?;
    Ok(tr)
}

/// CSV export with one row per (layer, timestep) cell.
pub fn trace_to_csv(trace: &ContributionTrace) -> String {
    let mut out = String::from("layer,timestep,p_t,p_i\n");
    let t = trace.t_inf();
    for d in 0..trace.layers {
        for (k, &ts) in trace.timesteps.iter().enumerate() {
            out.push_str(&format!(
                "{d},{ts},{},{}\n",
                trace.p_t[d * t + k],
                trace.p_i[d * t + k]
            ));
        }
    }
    out
}
