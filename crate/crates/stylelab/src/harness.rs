//! Batch command surface: the run configuration document, artifact
//! directory locking, and one function per pipeline command. The
//! `stylelab` binary is a thin argument parser over these.

use crate::conditioning::{ImageEncoder, TextCondition, Vocab, SUBJECTS};
use crate::data::{
    default_heldout_styles, default_pretrain_styles, generate_corpus, read_ppm, write_atomic,
    write_ppm, CorpusManifest,
};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{sample, ConditionPair, SampleOptions};
use crate::error::{Error, Result};
use crate::eval::{multiplier_sweep, train_content_probe, EvalContext, StyleProbe};
use crate::lora::{
    finetune, init_lora, load_style, save_style, FinetuneConfig, StyleCheckpoint, StyleMeta,
    DEFAULT_LORA_RANK,
};
use crate::probe::{probe_style, trace_to_csv, write_trace, RefTag};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Scalar, Tensor};
use crate::train::{
    load_base, load_pretrain_set, pretrain, save_base, training_log_csv, BaseModel, PretrainConfig,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: String,
    pub checkpoints: String,
    pub reports: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: "artifacts/corpus".into(),
            checkpoints: "artifacts/checkpoints".into(),
            reports: "artifacts/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Renders per (style, subject) cell of the pretraining grid.
    pub per_cell: usize,
    pub seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            per_cell: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Reverse-process steps used while recording contributions.
    pub t_inf: usize,
    pub seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection { t_inf: 25, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub rank: usize,
    pub lr: f64,
    pub steps_per_image: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            rank: DEFAULT_LORA_RANK,
            lr: 5e-3,
            steps_per_image: 100,
            batch: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { steps: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub grid_step: f64,
    pub samples_per_point: usize,
    pub sample_steps: usize,
    /// Training steps for the silhouette content probe.
    pub probe_train_steps: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            grid_step: 0.05,
            samples_per_point: 50,
            sample_steps: 30,
            probe_train_steps: 150,
            seed: 0,
        }
    }
}

/// The whole run configuration, one TOML document. Unknown keys are
/// rejected everywhere.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub corpus: CorpusSection,
    pub pretrain: PretrainConfig,
    pub probe: ProbeSection,
    pub finetune: FinetuneSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn sha256_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every command drops its resolved configuration next to its outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("resolved-config.toml"), self.to_toml().as_bytes())
    }
}

/// Exclusive lock on an artifact directory, released on drop. A stale
/// lock (crashed process) must be removed by hand; the error names it.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::State(format!(
                "artifact directory {} is locked by another writer (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Map an error to the process exit code contract:
/// 2 usage, 3 missing prerequisite artifact, 4 numeric failure, 5 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Artifact(_) => 3,
        Error::Numeric(_) => 4,
        Error::Io(_) => 5,
        Error::Format { .. } => 5,
        _ => 2,
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Artifact(format!("{what} not found at {}", path.display())))
    }
}

fn base_ckpt_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.paths.checkpoints).join("base.ckpt")
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.paths.corpus).join("manifest.json")
}

fn load_base_required(cfg: &RunConfig) -> Result<BaseModel<f32>> {
    let path = base_ckpt_path(cfg);
    require(&path, "pretrained base checkpoint")?;
    load_base(&path)
}

/// Prompt subject inferred from a reference filename (`circle_3.ppm`,
/// `ring.ppm`, ...).
pub fn subject_of(path: &Path) -> Result<String> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Input(format!("unreadable file name {}", path.display())))?;
    let head = stem.split('_').next().unwrap_or(stem);
    if SUBJECTS.contains(&head) {
        Ok(head.to_string())
    } else {
        Err(Error::Input(format!(
            "cannot infer a subject from {}; expected a name like subject_k.ppm \
             with subject one of {SUBJECTS:?}",
            path.display()
        )))
    }
}

fn load_refs(
    paths: &[PathBuf],
    vocab: &Vocab,
) -> Result<Vec<(Tensor<f32>, TextCondition)>> {
    if paths.is_empty() {
        return Err(Error::Parameter("no reference images given".into()));
    }
    paths
        .iter()
        .map(|p| {
            require(p, "reference image")?;
            let img = read_ppm(p)?;
            let cond =
                crate::conditioning::encode_prompt(vocab, &subject_of(p)?, &[])?;
            Ok((img, cond))
        })
        .collect()
}

/// Generate the procedural corpus into the configured corpus directory.
pub fn cmd_gen_corpus(cfg: &RunConfig) -> Result<()> {
    let root = PathBuf::from(&cfg.paths.corpus);
    let _lock = DirLock::acquire(&root)?;
    let subjects: Vec<&str> = SUBJECTS.to_vec();
    let manifest = generate_corpus(
        &root,
        &default_pretrain_styles(),
        &default_heldout_styles(),
        &subjects,
        cfg.corpus.per_cell,
        cfg.corpus.seed,
    )?;
    cfg.write_resolved(&root)?;
    println!(
        "corpus: {} images, {} styles, manifest {}",
        manifest.entries.len(),
        manifest.styles.len(),
        manifest.sha256_hex()
    );
    Ok(())
}

/// Pretrain the base model on the corpus and write `base.ckpt`.
pub fn cmd_pretrain(cfg: &RunConfig, seed: Option<u64>) -> Result<()> {
    let mpath = manifest_path(cfg);
    require(&mpath, "corpus manifest")?;
    let manifest = CorpusManifest::load(&mpath)?;
    let out = PathBuf::from(&cfg.paths.checkpoints);
    let _lock = DirLock::acquire(&out)?;
    let sched = cfg.schedule.build()?;
    let vocab = Vocab::default_vocab();
    let mut pc = cfg.pretrain.clone();
    if let Some(s) = seed {
        pc.seed = s;
    }
    let mut base = BaseModel::<f32>::new(cfg.model, vocab.clone(), pc.seed)?;
    let set = load_pretrain_set(Path::new(&cfg.paths.corpus), &manifest, &vocab)?;
    let mut progress = |row: &crate::train::LogRow| {
        if row.step % 100 == 0 {
            eprintln!("step {} loss {:.4} grad {:.4}", row.step, row.loss, row.grad_norm);
        }
    };
    let log = pretrain(&mut base, &set, &pc, &sched, Some(&mut progress))?;
    save_base(&out.join("base.ckpt"), &base)?;
    write_atomic(&out.join("pretrain-log.csv"), training_log_csv(&log).as_bytes())?;
    cfg.write_resolved(&out)?;
    println!(
        "pretrained {} steps, final loss {:.4}, base hash {}",
        log.len(),
        log.last().map(|r| r.loss).unwrap_or(f64::NAN),
        base.param_hash_hex()
    );
    Ok(())
}

/// Record contribution traces for a reference set and compute the
/// hierarchical scales. Emits one trace per reference, one averaged
/// trace, and `scales.json`.
pub fn cmd_probe(
    cfg: &RunConfig,
    refs: &[PathBuf],
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let base = load_base_required(cfg)?;
    let refs = load_refs(refs, &base.vocab)?;
    let out = out.unwrap_or_else(|| {
        Path::new(&cfg.paths.reports).join(format!("probe-{}", &cfg.sha256_hex()[..8]))
    });
    let _lock = DirLock::acquire(&out)?;
    let sched = cfg.schedule.build()?;
    let seed = seed.unwrap_or(cfg.probe.seed);
    let singles: Vec<_> = refs
        .iter()
        .map(|(img, _)| base.encoder.encode_image(img))
        .collect::<Result<_>>()?;
    let averaged = crate::conditioning::average_embeddings(&singles)?;
    let (scales, traces) = probe_style(
        &base.model,
        &base.embedder,
        &base.vocab,
        &singles,
        &averaged,
        &sched,
        cfg.probe.t_inf,
        seed,
    )?;
    for trace in &traces {
        let name = match trace.reference {
            RefTag::Single(n) => format!("trace-single-{n}-p{}", trace.prompt_id),
            RefTag::Averaged => format!("trace-averaged-p{}", trace.prompt_id),
        };
        write_trace(&out.join(format!("{name}.trace")), trace)?;
        write_atomic(&out.join(format!("{name}.csv")), trace_to_csv(trace).as_bytes())?;
    }
    write_atomic(
        &out.join("scales.json"),
        serde_json::to_string_pretty(&scales)?.as_bytes(),
    )?;
    cfg.write_resolved(&out)?;
    println!(
        "probe: {} traces, scales {:?}{}",
        traces.len(),
        scales.scales,
        if scales.degenerate { " (degenerate)" } else { "" }
    );
    Ok(())
}

/// Sample one image. With a style checkpoint the adapter, scales, and
/// averaged embedding are used; with raw references only their averaged
/// embedding (uniform scales); with neither, the text-only path.
#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    cfg: &RunConfig,
    subject: &str,
    checkpoint: Option<PathBuf>,
    refs: &[PathBuf],
    multiplier: f64,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut base = load_base_required(cfg)?;
    let sched = cfg.schedule.build()?;
    let seed = seed.unwrap_or(0);
    let cond_t = crate::conditioning::encode_prompt(&base.vocab, subject, &[])?;
    let c_t = base.embedder.embed_value(&cond_t)?;
    let (c_i, adapter) = if let Some(ckpt_path) = checkpoint {
        require(&ckpt_path, "style checkpoint")?;
        let ckpt = load_style::<f32>(&ckpt_path, &base)?;
        base.model.set_layer_scales(&ckpt.scales.scales, multiplier)?;
        (Some(ckpt.embedding.data), Some(ckpt.adapter))
    } else if !refs.is_empty() {
        let refs = load_refs(refs, &base.vocab)?;
        let singles: Vec<_> = refs
            .iter()
            .map(|(img, _)| base.encoder.encode_image(img))
            .collect::<Result<_>>()?;
        let averaged = crate::conditioning::average_embeddings(&singles)?;
        let ones = vec![1.0; base.cfg.layers];
        base.model.set_layer_scales(&ones, multiplier)?;
        (Some(averaged.data), None)
    } else {
        (None, None)
    };
    let cond = ConditionPair { c_t, c_i };
    let image = sample(
        &base.model,
        &cond,
        &sched,
        SampleOptions::deterministic(cfg.sample.steps, seed),
        adapter.as_ref(),
    )?;
    let image = image.map(|v| v.clamp(-1.0, 1.0));
    let out = out.unwrap_or_else(|| {
        Path::new(&cfg.paths.reports).join(format!("sample-{subject}-{seed}.ppm"))
    });
    write_ppm(&out, &image)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Probe, then fine-tune a LoRA adapter on the references and write a
/// style checkpoint.
pub fn cmd_finetune(
    cfg: &RunConfig,
    refs: &[PathBuf],
    steps: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut base = load_base_required(cfg)?;
    let ref_items = load_refs(refs, &base.vocab)?;
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.checkpoints));
    let _lock = DirLock::acquire(&out)?;
    let sched = cfg.schedule.build()?;
    let seed = seed.unwrap_or(cfg.finetune.seed);

    let singles: Vec<_> = ref_items
        .iter()
        .map(|(img, _)| base.encoder.encode_image(img))
        .collect::<Result<_>>()?;
    let averaged = crate::conditioning::average_embeddings(&singles)?;
    let (scales, _) = probe_style(
        &base.model,
        &base.embedder,
        &base.vocab,
        &singles,
        &averaged,
        &sched,
        cfg.probe.t_inf,
        seed,
    )?;

    let mut adapter = init_lora(&base.model, cfg.finetune.rank, seed)?;
    let fc = FinetuneConfig {
        steps: steps.unwrap_or(cfg.finetune.steps_per_image * ref_items.len()),
        batch: cfg.finetune.batch.min(ref_items.len().max(1)),
        lr: cfg.finetune.lr,
        seed,
    };
    let (log, embedding) = finetune(
        &mut base,
        &mut adapter,
        &ref_items,
        &scales,
        &fc,
        &sched,
        None,
    )?;
    let ckpt = StyleCheckpoint {
        base_hash: base.param_hash_hex(),
        scales,
        adapter,
        embedding,
        meta: StyleMeta {
            style_id: "custom".into(),
            steps: fc.steps,
            lr: fc.lr,
            n_refs: ref_items.len(),
            seed,
        },
    };
    save_style(&out.join("style.ckpt"), &ckpt)?;
    write_atomic(&out.join("finetune-log.csv"), training_log_csv(&log).as_bytes())?;
    cfg.write_resolved(&out)?;
    println!(
        "fine-tuned {} steps on {} references, final loss {:.4}",
        log.len(),
        ref_items.len(),
        log.last().map(|r| r.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Multiplier sweep of a style checkpoint against the corpus probes.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let mut base = load_base_required(cfg)?;
    require(checkpoint, "style checkpoint")?;
    let ckpt = load_style::<f32>(checkpoint, &base)?;
    let mpath = manifest_path(cfg);
    require(&mpath, "corpus manifest")?;
    let manifest = CorpusManifest::load(&mpath)?;
    let out = out.unwrap_or_else(|| {
        Path::new(&cfg.paths.reports).join(format!("eval-{}", &cfg.sha256_hex()[..8]))
    });
    let _lock = DirLock::acquire(&out)?;
    let sched = cfg.schedule.build()?;
    let seed = seed.unwrap_or(cfg.eval.seed);

    let style_probe = build_style_probe_from_styles(&base.encoder, &manifest.styles)?;
    let content_probe =
        train_content_probe::<f32>(&manifest.styles, cfg.eval.probe_train_steps, seed)?;
    let ctx = EvalContext {
        embedder: &base.embedder,
        vocab: &base.vocab,
        encoder: &base.encoder.clone(),
        style_probe: &style_probe,
        content_probe: &content_probe,
        sched: &sched,
        sample_steps: cfg.eval.sample_steps,
        guidance: 1.0,
    };
    let grid = grid_from_step(cfg.eval.grid_step)?;
    let scales = ckpt.scales.scales.clone();
    let c_i = ckpt.embedding.data.clone();
    let hash = cfg.sha256_hex();
    let report = multiplier_sweep(
        &mut base.model,
        Some(&ckpt.adapter),
        &scales,
        &ctx,
        &c_i,
        &ckpt.meta.style_id,
        &grid,
        cfg.eval.samples_per_point,
        seed,
        hash,
    )?;
    report.save_json(&out.join("report.json"))?;
    write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
    write_atomic(&out.join("report.dat"), report.to_dat().as_bytes())?;
    write_ppm(&out.join("curve.ppm"), &report.plot_ppm(210, 100)?)?;
    cfg.write_resolved(&out)?;
    println!(
        "eval: {} points, style acc {:.2}, content acc {:.2} at multiplier 1.0",
        report.curve.len(),
        report.style_accuracy,
        report.content_accuracy
    );
    Ok(())
}

/// Style centroids from fresh renders of every style in the manifest.
pub fn build_style_probe_from_styles<S: Scalar>(
    encoder: &ImageEncoder<S>,
    styles: &[crate::data::StyleSpec],
) -> Result<StyleProbe<S>> {
    let sets: Vec<(String, Vec<Tensor<S>>)> = styles
        .iter()
        .map(|s| {
            let imgs = (0..8)
                .map(|k| {
                    crate::data::render_sample::<S>(s, SUBJECTS[k % SUBJECTS.len()], 7000 + k as u64)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((s.id.clone(), imgs))
        })
        .collect::<Result<_>>()?;
    StyleProbe::build(encoder, &sets)
}

fn grid_from_step(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Parameter(format!("bad grid step {step}")));
    }
    let n = (1.0 / step).round() as usize;
    Ok((0..=n).map(|i| (i as f64 * step).min(1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(toml::from_str::<RunConfig>("[paths]\nbogus = \"x\"\n").is_err());
        assert!(toml::from_str::<RunConfig>("[nonsense]\n").is_err());
        // a partial document fills in defaults
        let partial: RunConfig = toml::from_str("[model]\nlayers = 4\n").unwrap();
        assert_eq!(partial.model.layers, 4);
        assert_eq!(partial.schedule.steps, 1000);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.sha256_hex(), b.sha256_hex());
        b.eval.seed = 1;
        assert_ne!(a.sha256_hex(), b.sha256_hex());
    }

    #[test]
    fn exit_codes_match_contract() {
        assert_eq!(exit_code(&Error::Parameter("x".into())), 2);
        assert_eq!(exit_code(&Error::Artifact("x".into())), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
        assert_eq!(
            exit_code(&Error::Io(std::io::Error::new(
                std::io::ErrorKind::Other,
                "x"
            ))),
            5
        );
        assert_eq!(
            exit_code(&Error::Format {
                offset: 0,
                message: "x".into()
            }),
            5
        );
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
    }

    #[test]
    fn dir_lock_excludes_second_writer() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            DirLock::acquire(dir.path()),
            Err(Error::State(_))
        ));
        drop(lock);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn subject_inference_from_filenames() {
        assert_eq!(subject_of(Path::new("a/b/circle_3.ppm")).unwrap(), "circle");
        assert_eq!(subject_of(Path::new("ring.ppm")).unwrap(), "ring");
        assert!(subject_of(Path::new("landscape_1.ppm")).is_err());
    }

    #[test]
    fn missing_artifacts_give_artifact_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.corpus = dir.path().join("c").to_string_lossy().into_owned();
        cfg.paths.checkpoints = dir.path().join("k").to_string_lossy().into_owned();
        cfg.paths.reports = dir.path().join("r").to_string_lossy().into_owned();
        assert!(matches!(
            cmd_pretrain(&cfg, None),
            Err(Error::Artifact(_))
        ));
        assert!(matches!(
            cmd_sample(&cfg, "circle", None, &[], 1.0, None, None),
            Err(Error::Artifact(_))
        ));
    }

    #[test]
    fn gen_corpus_writes_manifest_and_resolved_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.corpus = dir.path().join("corpus").to_string_lossy().into_owned();
        cfg.corpus.per_cell = 1;
        cmd_gen_corpus(&cfg).unwrap();
        let root = Path::new(&cfg.paths.corpus);
        let manifest = CorpusManifest::load(&root.join("manifest.json")).unwrap();
        // 8 pretrain styles × 6 subjects × 1 + 2 held-out styles × 5 refs
        assert_eq!(manifest.entries.len(), 8 * 6 + 2 * 5);
        assert!(root.join("resolved-config.toml").exists());
        assert!(!root.join(".lock").exists());
        for e in &manifest.entries {
            assert!(root.join(&e.path).exists(), "missing {}", e.path);
        }
    }

    #[test]
    fn grid_step_builds_inclusive_grid() {
        let g = grid_from_step(0.05).unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], 0.0);
        assert!((g[20] - 1.0).abs() < 1e-12);
        assert!(grid_from_step(0.0).is_err());
    }
}
