//! Scratch experiment for tuning the acceptance pretraining config.

use std::path::Path;
use std::time::Instant;
use stylelab::conditioning::{average_embeddings, Vocab, SUBJECTS};
use stylelab::data::{
    default_heldout_styles, default_pretrain_styles, generate_corpus, read_ppm, Split,
};
use stylelab::denoiser::DenoiserConfig;
use stylelab::eval::{eval_point, train_content_probe, EvalContext};
use stylelab::harness::build_style_probe_from_styles;
use stylelab::schedule::NoiseSchedule;
use stylelab::train::{load_pretrain_set, pretrain, save_base, BaseModel, PretrainConfig};
use stylelab::tensor::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let total_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let chunk: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);

    let root = Path::new("target/exp-artifacts/corpus");
    let manifest = generate_corpus(
        root,
        &default_pretrain_styles(),
        &default_heldout_styles(),
        &SUBJECTS.to_vec(),
        12,
        0,
    )
    .unwrap();
    let vocab = Vocab::default_vocab();
    let cfg = DenoiserConfig::default();
    let mut base = BaseModel::<f32>::new(cfg, vocab.clone(), 0).unwrap();
    let set = load_pretrain_set(root, &manifest, &vocab).unwrap();
    let sched = NoiseSchedule::default_pretrain();
    println!("set {} images, model hash {}", set.len(), base.param_hash_hex());

    let styles = default_pretrain_styles();
    let content_probe = train_content_probe::<f32>(&styles, 150, 0).unwrap();

    let mut done = 0;
    while done < total_steps {
        let n = chunk.min(total_steps - done);
        let pc = PretrainConfig {
            steps: n,
            batch: 8,
            lr,
            cond_dropout: 0.1,
            seed: 1000 + done as u64,
            ..Default::default()
        };
        let t0 = Instant::now();
        let log = pretrain(&mut base, &set, &pc, &sched, None).unwrap();
        done += n;
        let tail: f64 = log[log.len().saturating_sub(50)..]
            .iter()
            .map(|r| r.loss)
            .sum::<f64>()
            / 50f64.min(log.len() as f64);
        println!(
            "steps {done}: loss {tail:.4} ({:.1}s, {:.0} ms/step)",
            t0.elapsed().as_secs_f64(),
            t0.elapsed().as_secs_f64() * 1000.0 / n as f64
        );

        // rebuild encoder-dependent probes: the encoder trains jointly
        let style_probe = build_style_probe_from_styles(&base.encoder, &styles).unwrap();
        let style_embs: Vec<(String, Tensor<f32>)> = styles
            .iter()
            .map(|s| {
                let singles: Vec<_> = manifest
                    .entries_for(Split::Pretrain)
                    .filter(|e| e.style_id == s.id)
                    .take(5)
                    .map(|e| {
                        let img = read_ppm(&root.join(&e.path)).unwrap();
                        base.encoder.encode_image(&img).unwrap()
                    })
                    .collect();
                (s.id.clone(), average_embeddings(&singles).unwrap().data)
            })
            .collect();

        // eval: per-style accuracy with that style's averaged embedding
        let ones = vec![1.0; base.cfg.layers];
        base.model.set_layer_scales(&ones, 1.0).unwrap();
        let ctx = EvalContext {
            embedder: &base.embedder,
            vocab: &base.vocab,
            encoder: &base.encoder,
            style_probe: &style_probe,
            content_probe: &content_probe,
            sched: &sched,
            sample_steps: 30,
            guidance: 1.0,
        };
        let t1 = Instant::now();
        let mut s_acc = 0.0;
        let mut c_acc = 0.0;
        let per = 8usize; // samples per style, 64 total
        for (gi, (id, emb)) in style_embs.iter().enumerate() {
            let (s, c) = eval_point(
                &base.model,
                None,
                &ctx,
                Some(emb),
                id,
                per,
                9000 ^ ((gi as u64) << 16),
            )
            .unwrap();
            s_acc += s / style_embs.len() as f64;
            c_acc += c / style_embs.len() as f64;
        }
        println!(
            "  eval: style acc {s_acc:.3}, content acc {c_acc:.3} ({:.1}s)",
            t1.elapsed().as_secs_f64()
        );

        // dump a few conditional samples for inspection
        let (imgs, _) = stylelab::eval::generate_eval_samples(
            &base.model,
            None,
            &ctx,
            Some(&style_embs[0].1),
            4,
            12345,
        )
        .unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let mn = img.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let mx = img.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mean: f32 = img.data().iter().sum::<f32>() / img.numel() as f32;
            let pred_style = style_probe.classify(&base.encoder, img).unwrap();
            let pred_content = content_probe.classify(img).unwrap();
            println!(
                "  sample {i}: min {mn:.2} max {mx:.2} mean {mean:.2} -> style {pred_style}, subject {pred_content}"
            );
            stylelab::data::write_ppm(
                Path::new(&format!("target/exp-artifacts/sample-{done}-{i}.ppm")),
                img,
            )
            .unwrap();
        }
        save_base(Path::new("target/exp-artifacts/base.ckpt"), &base).unwrap();
    }
}
