//! Scratch diagnostics for a saved base checkpoint: loss by timestep
//! bucket and sampler trajectory norms.

use std::path::Path;
use stylelab::conditioning::encode_prompt;
use stylelab::data::{read_ppm, CorpusManifest, Split};
use stylelab::diffusion::{denoise_loss_value, ConditionPair, SampleMode, SampleOptions};
use stylelab::schedule::{DiffusionBatch, NoiseSchedule};
use stylelab::tensor::Tensor;
use stylelab::train::load_base;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let root = Path::new("target/exp-artifacts");
    let base = load_base::<f32>(&root.join("base.ckpt")).unwrap();
    let manifest = CorpusManifest::load(&root.join("corpus/manifest.json")).unwrap();
    let sched = NoiseSchedule::default_pretrain();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // collect a few training images with conditions
    let items: Vec<_> = manifest
        .entries_for(Split::Pretrain)
        .step_by(37)
        .take(16)
        .map(|e| {
            let img = read_ppm::<f32>(&root.join("corpus").join(&e.path)).unwrap();
            let cond = encode_prompt(&base.vocab, &e.subject, &[]).unwrap();
            (img, cond)
        })
        .collect();

    println!("loss by timestep:");
    for &t in &[1usize, 50, 150, 300, 500, 700, 900, 1000] {
        let mut x0 = Vec::new();
        let mut ts = Vec::new();
        let mut eps = Vec::new();
        let mut conds = Vec::new();
        for (img, cond) in &items {
            x0.push(img.clone());
            ts.push(t);
            eps.push(Tensor::randn(img.shape(), 1.0, &mut rng));
            conds.push(ConditionPair {
                c_t: base.embedder.embed_value(cond).unwrap(),
                c_i: Some(base.encoder.encode_image(img).unwrap().data),
            });
        }
        let batch = DiffusionBatch::new(x0, ts, eps, &sched).unwrap();
        let l = denoise_loss_value(&base.model, &batch, &conds, None).unwrap();
        println!("  t={t:>4}: loss {l:.4}");
    }

    // sample trajectories at different step counts and modes
    let cond = ConditionPair {
        c_t: base
            .embedder
            .embed_value(&encode_prompt(&base.vocab, "circle", &[]).unwrap())
            .unwrap(),
        c_i: Some(base.encoder.encode_image(&items[0].0).unwrap().data),
    };
    for (name, opts) in [
        ("ddim-30", SampleOptions::deterministic(30, 5)),
        ("ddim-100", SampleOptions::deterministic(100, 5)),
        (
            "ancestral-1000",
            SampleOptions {
                steps: 1000,
                mode: SampleMode::Ancestral,
                seed: 5,
                guidance: 1.0,
            },
        ),
    ] {
        let img = stylelab::diffusion::sample(&base.model, &cond, &sched, opts, None).unwrap();
        let mx = img.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mn = img.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let clipped = img
            .data()
            .iter()
            .filter(|v| v.abs() > 1.0)
            .count() as f64
            / img.numel() as f64;
        println!("{name}: min {mn:.2} max {mx:.2} clipped {:.1}%", clipped * 100.0);
        stylelab::data::write_ppm(
            &root.join(format!("diag-{name}.ppm")),
            &img.map(|v| v.clamp(-1.0, 1.0)),
        )
        .unwrap();
    }
}
