//! Scratch: eval a saved base checkpoint with same-subject vs
//! distinct-subject averaged reference embeddings.

use std::path::Path;
use stylelab::conditioning::average_embeddings;
use stylelab::data::{read_ppm, CorpusManifest, Split};
use stylelab::eval::{eval_point, train_content_probe, EvalContext};
use stylelab::harness::build_style_probe_from_styles;
use stylelab::schedule::NoiseSchedule;
use stylelab::tensor::Tensor;
use stylelab::train::load_base;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let per: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);

    let root = Path::new("target/exp-artifacts");
    let mut base = load_base::<f32>(&root.join("base.ckpt")).unwrap();
    let manifest = CorpusManifest::load(&root.join("corpus/manifest.json")).unwrap();
    let sched = NoiseSchedule::default_pretrain();
    let styles = stylelab::data::default_pretrain_styles();
    let style_probe = build_style_probe_from_styles(&base.encoder, &styles).unwrap();
    let content_probe = train_content_probe::<f32>(&styles, 150, 0).unwrap();
    let ones = vec![1.0; base.cfg.layers];
    base.model.set_layer_scales(&ones, 1.0).unwrap();
    for guidance in [1.0f64, 2.0, 3.0, 5.0] {
    let ctx = EvalContext {
        embedder: &base.embedder,
        vocab: &base.vocab,
        encoder: &base.encoder,
        style_probe: &style_probe,
        content_probe: &content_probe,
        sched: &sched,
        sample_steps: 30,
        guidance,
    };

    for (mode, stride) in [("same-subject", 1usize), ("distinct-subject", 12)] {
        let mut s_acc = 0.0;
        let mut c_acc = 0.0;
        for (gi, st) in styles.iter().enumerate() {
            let singles: Vec<_> = manifest
                .entries_for(Split::Pretrain)
                .filter(|e| e.style_id == st.id)
                .step_by(stride)
                .take(5)
                .map(|e| {
                    let img = read_ppm(&root.join("corpus").join(&e.path)).unwrap();
                    base.encoder.encode_image(&img).unwrap()
                })
                .collect();
            let emb: Tensor<f32> = average_embeddings(&singles).unwrap().data;
            let (s, c) = eval_point(
                &base.model,
                None,
                &ctx,
                Some(&emb),
                &st.id,
                per,
                0xE000 ^ ((gi as u64) << 16),
            )
            .unwrap();
            s_acc += s / styles.len() as f64;
            c_acc += c / styles.len() as f64;
        }
        println!("guidance {guidance}: {mode}: style acc {s_acc:.3}, content acc {c_acc:.3}");
    }
    }
}
