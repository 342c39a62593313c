//! Probe per-layer image-branch contributions for a small reference set
//! and derive hierarchical scales from the single-vs-averaged gap.

use stylelab::conditioning::{average_embeddings, Vocab};
use stylelab::data::{default_heldout_styles, render_sample};
use stylelab::denoiser::DenoiserConfig;
use stylelab::probe::{layer_difference, probe_style};
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
    let base = BaseModel::<f32>::new(cfg, Vocab::default_vocab(), 0).unwrap();

    // three references of one held-out style, different subjects
    let style = &default_heldout_styles()[0];
    let subjects = ["circle", "square", "triangle"];
    let singles: Vec<_> = subjects
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let img = render_sample::<f32>(style, s, 100 + k as u64).unwrap();
            base.encoder.encode_image(&img).unwrap()
        })
        .collect();
    let averaged = average_embeddings(&singles).unwrap();

    let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let (scales, traces) = probe_style(
        &base.model,
        &base.embedder,
        &base.vocab,
        &singles,
        &averaged,
        &sched,
        10,
        0,
    )
    .unwrap();

    println!("{} traces recorded over {} prompts", traces.len(), traces.len() / 4);
    let first = &traces[0];
    println!(
        "trace grid: {} layers x {} reverse steps, p_t/p_i in [-1, 1]",
        first.layers,
        first.t_inf()
    );
    println!(
        "per-layer mean (p_i - p_t) of the first trace: {:?}",
        layer_difference(first).unwrap()
    );
    println!("hierarchical scales: {:?}", scales.scales);
    println!("degenerate fallback: {}", scales.degenerate);
}
