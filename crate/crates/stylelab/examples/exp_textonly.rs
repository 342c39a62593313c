//! Scratch: can a text-only model (image condition always dropped) learn
//! prompt-controlled shapes on a single style?

use std::path::Path;
use stylelab::conditioning::{encode_prompt, Vocab, SUBJECTS};
use stylelab::data::{read_ppm, CorpusManifest, Split};
use stylelab::denoiser::DenoiserConfig;
use stylelab::diffusion::{ConditionPair, SampleOptions};
use stylelab::eval::train_content_probe;
use stylelab::schedule::NoiseSchedule;
use stylelab::train::{pretrain, BaseModel, PretrainConfig, TrainItem};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let style = args.get(3).map(|s| s.as_str()).unwrap_or("crimson-flat");

    let root = Path::new("target/exp-artifacts");
    let manifest = CorpusManifest::load(&root.join("corpus/manifest.json")).unwrap();
    let vocab = Vocab::default_vocab();
    let mut base = BaseModel::<f32>::new(DenoiserConfig::default(), vocab.clone(), 0).unwrap();
    let sched = NoiseSchedule::default_pretrain();

    let set: Vec<TrainItem<f32>> = manifest
        .entries_for(Split::Pretrain)
        .filter(|e| e.style_id == style)
        .map(|e| TrainItem {
            image: read_ppm(&root.join("corpus").join(&e.path)).unwrap(),
            cond: encode_prompt(&vocab, &e.subject, &[]).unwrap(),
            style_id: e.style_id.clone(),
        })
        .collect();
    println!("set: {} images of {style}", set.len());

    let pc = PretrainConfig {
        steps,
        batch: 8,
        lr,
        cond_dropout: 0.1,
        image_dropout: Some(1.0),
        seed: 0,
        ..Default::default()
    };
    let mut progress = |row: &stylelab::train::LogRow| {
        if row.step % 500 == 0 {
            println!("  step {} loss {:.4}", row.step, row.loss);
        }
    };
    pretrain(&mut base, &set, &pc, &sched, Some(&mut progress)).unwrap();

    let styles = stylelab::data::default_pretrain_styles();
    let probe = train_content_probe::<f32>(&styles, 150, 0).unwrap();
    for g in [1.0, 3.0] {
        let mut ok = 0;
        for (ci, subj) in SUBJECTS.iter().enumerate() {
            for k in 0..4u64 {
                let cond = ConditionPair {
                    c_t: base
                        .embedder
                        .embed_value(&encode_prompt(&vocab, subj, &[]).unwrap())
                        .unwrap(),
                    c_i: None,
                };
                let img = stylelab::diffusion::sample(
                    &base.model,
                    &cond,
                    &sched,
                    SampleOptions::guided(30, 0xCAFE + k + ci as u64 * 64, g),
                    None,
                )
                .unwrap()
                .map(|v| v.clamp(-1.0, 1.0));
                if probe.classify(&img).unwrap() == ci {
                    ok += 1;
                }
                if k == 0 && g == 1.0 {
                    stylelab::data::write_ppm(
                        Path::new(&format!("target/exp-artifacts/textonly-train-{subj}.ppm")),
                        &img,
                    )
                    .unwrap();
                }
            }
        }
        println!("text-only model content acc at guidance {g}: {ok}/24");
    }
}
