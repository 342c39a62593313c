//! Scratch: can the denoiser overfit a handful of images, and how does
//! the loss trajectory depend on lr?

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use stylelab::conditioning::{encode_prompt, Vocab};
use stylelab::data::read_ppm;
use stylelab::denoiser::DenoiserConfig;
use stylelab::diffusion::{denoise_loss_value, ConditionPair, SampleOptions};
use stylelab::schedule::{DiffusionBatch, NoiseSchedule};
use stylelab::tensor::Tensor;
use stylelab::train::{pretrain, BaseModel, PretrainConfig, TrainItem};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let n_imgs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);

    let root = Path::new("target/exp-artifacts/corpus");
    let vocab = Vocab::default_vocab();
    let mut base = BaseModel::<f32>::new(DenoiserConfig::default(), vocab.clone(), 0).unwrap();
    let sched = NoiseSchedule::default_pretrain();

    let imgs = [
        ("crimson-flat", "circle"),
        ("ocean-stripe", "square"),
        ("forest-grain", "triangle"),
        ("mono-ink", "cross"),
    ];
    let set: Vec<TrainItem<f32>> = imgs[..n_imgs]
        .iter()
        .enumerate()
        .map(|(_i, (style, subj))| TrainItem {
            image: read_ppm(&root.join(format!("images/pretrain/{style}/{subj}_0.ppm"))).unwrap(),
            cond: encode_prompt(&vocab, subj, &[]).unwrap(),
            style_id: style.to_string(),
        })
        .collect();

    let chunk = 200;
    let mut done = 0;
    while done < steps {
        let pc = PretrainConfig {
            steps: chunk.min(steps - done),
            batch: 4,
            lr,
            cond_dropout: 0.0,
            seed: 42 + done as u64,
            ..Default::default()
        };
        let log = pretrain(&mut base, &set, &pc, &sched, None).unwrap();
        done += pc.steps;
        let tail: f64 =
            log[log.len().saturating_sub(50)..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        // loss at fixed mid timesteps for a stable readout
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut fixed = 0.0;
        for &t in &[100usize, 300, 600] {
            let item = &set[0];
            let eps: Vec<Tensor<f32>> = (0..4)
                .map(|_| Tensor::randn(item.image.shape(), 1.0, &mut rng))
                .collect();
            let batch =
                DiffusionBatch::new(vec![item.image.clone(); 4], vec![t; 4], eps, &sched).unwrap();
            let conds: Vec<ConditionPair<f32>> = (0..4)
                .map(|_| ConditionPair {
                    c_t: base.embedder.embed_value(&item.cond).unwrap(),
                    c_i: Some(base.encoder.encode_image(&item.image).unwrap().data),
                })
                .collect();
            fixed += denoise_loss_value(&base.model, &batch, &conds, None).unwrap() / 3.0;
        }
        println!("steps {done}: train loss {tail:.4}, fixed-t loss {fixed:.4}");
    }

    // sample with the training condition
    let item = &set[0];
    let cond = ConditionPair {
        c_t: base.embedder.embed_value(&item.cond).unwrap(),
        c_i: Some(base.encoder.encode_image(&item.image).unwrap().data),
    };
    for s in 0..3u64 {
        let img = stylelab::diffusion::sample(
            &base.model,
            &cond,
            &sched,
            SampleOptions::deterministic(50, s),
            None,
        )
        .unwrap();
        let err = img.max_abs_diff(&item.image);
        let mean_err: f32 = img
            .data()
            .iter()
            .zip(item.image.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / img.numel() as f32;
        println!("sample {s}: max err {err:.3}, mean err {mean_err:.3}");
        stylelab::data::write_ppm(
            Path::new(&format!("target/exp-artifacts/overfit-{s}.ppm")),
            &img.map(|v| v.clamp(-1.0, 1.0)),
        )
        .unwrap();
    }
}
