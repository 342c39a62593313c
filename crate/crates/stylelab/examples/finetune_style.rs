//! Fine-tune a LoRA adapter on a handful of style references, save the
//! style checkpoint, and reload it.

use std::path::Path;
use stylelab::conditioning::{encode_prompt, Vocab};
use stylelab::data::{default_heldout_styles, render_sample};
use stylelab::denoiser::DenoiserConfig;
use stylelab::lora::{
    finetune, init_lora, load_style, save_style, FinetuneConfig, StyleCheckpoint, StyleMeta,
};
use stylelab::probe::{HierarchicalScales, Provenance};
use stylelab::schedule::NoiseSchedule;
use stylelab::train::BaseModel;

fn main() {
    let cfg = DenoiserConfig {
        width: 32,
        layers: 4,
        heads: 4,
        width_t: 16,
        width_i: 16,
        width_time: 32,
        ..DenoiserConfig::default()
    };
    let vocab = Vocab::default_vocab();
    let mut base = BaseModel::<f32>::new(cfg, vocab.clone(), 0).unwrap();
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();

    let style = &default_heldout_styles()[1];
    let refs: Vec<_> = ["circle", "square", "triangle"]
        .iter()
        .enumerate()
        .map(|(k, s)| {
            (
                render_sample::<f32>(style, s, 500 + k as u64).unwrap(),
                encode_prompt(&vocab, s, &[]).unwrap(),
            )
        })
        .collect();

    let scales = HierarchicalScales {
        scales: vec![1.0; base.cfg.layers],
        degenerate: false,
        provenance: Provenance {
            prompt_set: "uniform".into(),
            reference_set: style.id.clone(),
            normalization: "none".into(),
        },
    };
    let mut adapter = init_lora(&base.model, 4, 0).unwrap();
    let fc = FinetuneConfig {
        steps: 60,
        batch: 3,
        lr: 5e-3,
        seed: 0,
    };
    let (log, embedding) = finetune(&mut base, &mut adapter, &refs, &scales, &fc, &sched, None).unwrap();
    println!(
        "loss {:.4} -> {:.4} over {} steps ({} adapter params)",
        log[0].loss,
        log.last().unwrap().loss,
        log.len(),
        adapter.param_count()
    );

    let ckpt = StyleCheckpoint {
        base_hash: base.param_hash_hex(),
        scales,
        adapter,
        embedding,
        meta: StyleMeta {
            style_id: style.id.clone(),
            steps: fc.steps,
            lr: fc.lr,
            n_refs: refs.len(),
            seed: fc.seed,
        },
    };
    let path = Path::new("target/example-artifacts/style-example.ckpt");
    save_style(path, &ckpt).unwrap();
    let loaded = load_style::<f32>(path, &base).unwrap();
    assert_eq!(loaded, ckpt);
    println!("checkpoint at {} roundtrips losslessly", path.display());
}
