//! Score an (untrained) model over a coarse scale-multiplier grid with
//! the style and content probes, and write the report artifacts.

use std::path::Path;
use stylelab::conditioning::{average_embeddings, Vocab};
use stylelab::data::{default_pretrain_styles, render_sample, write_ppm};
use stylelab::denoiser::DenoiserConfig;
use stylelab::eval::{multiplier_sweep, train_content_probe, EvalContext};
use stylelab::harness::build_style_probe_from_styles;
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
    let mut base = BaseModel::<f32>::new(cfg, Vocab::default_vocab(), 0).unwrap();
    let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let styles = default_pretrain_styles();

    println!("building style centroids and training the content probe...");
    let style_probe = build_style_probe_from_styles(&base.encoder, &styles).unwrap();
    let content_probe = train_content_probe::<f32>(&styles, 150, 0).unwrap();

    let target = &styles[0];
    let refs: Vec<_> = (0..3)
        .map(|k| render_sample::<f32>(target, "circle", 800 + k).unwrap())
        .collect();
    let singles: Vec<_> = refs
        .iter()
        .map(|img| base.encoder.encode_image(img).unwrap())
        .collect();
    let c_i = average_embeddings(&singles).unwrap().data;

    let ctx = EvalContext {
        embedder: &base.embedder.clone(),
        vocab: &base.vocab.clone(),
        encoder: &base.encoder.clone(),
        style_probe: &style_probe,
        content_probe: &content_probe,
        sched: &sched,
        sample_steps: 10,
        guidance: 1.0,
    };
    let scales = vec![1.0; base.cfg.layers];
    println!("sweeping 3 multipliers x 12 samples (untrained model, scores near chance)...");
    let report = multiplier_sweep(
        &mut base.model,
        None,
        &scales,
        &ctx,
        &c_i,
        &target.id,
        &[0.0, 0.5, 1.0],
        12,
        0,
        "example".into(),
    )
    .unwrap();

    for p in &report.curve {
        println!(
            "multiplier {:.2}  style acc {:.2}  content acc {:.2}",
            p.multiplier, p.style_accuracy, p.content_accuracy
        );
    }
    let out = Path::new("target/example-artifacts");
    report.save_json(&out.join("sweep-report.json")).unwrap();
    write_ppm(&out.join("sweep-curve.ppm"), &report.plot_ppm(210, 100).unwrap()).unwrap();
    println!("wrote {}/sweep-report.json and sweep-curve.ppm", out.display());
}
