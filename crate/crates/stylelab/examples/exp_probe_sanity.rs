//! Scratch: content-probe accuracy on clean renders, and text-only
//! sample quality from a saved checkpoint.

use std::path::Path;
use stylelab::conditioning::{encode_prompt, SUBJECTS};
use stylelab::data::{default_pretrain_styles, render_sample};
use stylelab::diffusion::{ConditionPair, SampleOptions};
use stylelab::eval::train_content_probe;
use stylelab::schedule::NoiseSchedule;
use stylelab::train::load_base;

fn main() {
    let styles = default_pretrain_styles();
    let probe = train_content_probe::<f32>(&styles, 150, 0).unwrap();

    let mut correct = 0;
    let mut total = 0;
    for (si, style) in styles.iter().enumerate() {
        for (ci, subj) in SUBJECTS.iter().enumerate() {
            for k in 0..3u64 {
                let img = render_sample::<f32>(style, subj, 5000 + k * 31 + si as u64 * 7).unwrap();
                if probe.classify(&img).unwrap() == ci {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    println!("content probe on clean renders: {correct}/{total}");

    let root = Path::new("target/exp-artifacts");
    let mut base = load_base::<f32>(&root.join("base.ckpt")).unwrap();
    let ones = vec![1.0; base.cfg.layers];
    base.model.set_layer_scales(&ones, 1.0).unwrap();
    let sched = NoiseSchedule::default_pretrain();
    for (gi, g) in [1.0, 3.0].iter().enumerate() {
        let mut ok = 0;
        for (ci, subj) in SUBJECTS.iter().enumerate() {
            for k in 0..4u64 {
                let cond = ConditionPair {
                    c_t: base
                        .embedder
                        .embed_value(&encode_prompt(&base.vocab, subj, &[]).unwrap())
                        .unwrap(),
                    c_i: None,
                };
                let img = stylelab::diffusion::sample(
                    &base.model,
                    &cond,
                    &sched,
                    SampleOptions::guided(30, 0xBEE5 + k + ci as u64 * 64, *g),
                    None,
                )
                .unwrap()
                .map(|v| v.clamp(-1.0, 1.0));
                if probe.classify(&img).unwrap() == ci {
                    ok += 1;
                }
                if k == 0 && gi == 1 {
                    stylelab::data::write_ppm(
                        Path::new(&format!("target/exp-artifacts/textonly-{subj}.ppm")),
                        &img,
                    )
                    .unwrap();
                }
            }
        }
        println!("text-only content acc at guidance {g}: {ok}/24");
    }
}
