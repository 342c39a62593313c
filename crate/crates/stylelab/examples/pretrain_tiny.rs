//! Pretrain a deliberately small base model for a few hundred steps on a
//! fresh corpus and watch the loss fall. Takes a couple of minutes.

use std::path::Path;
use stylelab::conditioning::{Vocab, SUBJECTS};
use stylelab::data::{default_heldout_styles, default_pretrain_styles, generate_corpus};
use stylelab::denoiser::DenoiserConfig;
use stylelab::schedule::NoiseSchedule;
use stylelab::train::{load_pretrain_set, pretrain, save_base, BaseModel, PretrainConfig};

fn main() {
    let root = Path::new("target/example-artifacts/corpus-tiny");
    let manifest = generate_corpus(
        root,
        &default_pretrain_styles(),
        &default_heldout_styles(),
        &SUBJECTS.to_vec(),
        2,
        0,
    )
    .unwrap();

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
    let set = load_pretrain_set(root, &manifest, &vocab).unwrap();
    let sched = NoiseSchedule::default_pretrain();
    let pc = PretrainConfig {
        steps: 300,
        batch: 8,
        lr: 2e-3,
        cond_dropout: 0.1,
        seed: 0,
        ..Default::default()
    };
    let mut progress = |row: &stylelab::train::LogRow| {
        if row.step % 50 == 0 {
            println!("step {:>4}  loss {:.4}  grad {:.3}", row.step, row.loss, row.grad_norm);
        }
    };
    let log = pretrain(&mut base, &set, &pc, &sched, Some(&mut progress)).unwrap();
    let head: f64 = log[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
    let tail: f64 = log[log.len() - 20..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
    println!("mean loss first 20 steps {head:.4}, last 20 steps {tail:.4}");

    let out = Path::new("target/example-artifacts/base-tiny.ckpt");
    save_base(out, &base).unwrap();
    println!("saved {} ({})", out.display(), base.param_hash_hex());
}
