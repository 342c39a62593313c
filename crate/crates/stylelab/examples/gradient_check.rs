//! Check the autodiff engine against central finite differences on the
//! full denoiser loss, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylelab::denoiser::{build_denoiser, DenoiserConfig};
use stylelab::diffusion::{denoise_loss, ConditionPair};
use stylelab::schedule::{DiffusionBatch, NoiseSchedule};
use stylelab::tensor::{Graph, Tensor};

fn main() {
    let cfg = DenoiserConfig {
        image_size: 8,
        channels: 3,
        patch: 4,
        width: 16,
        heads: 2,
        layers: 2,
        width_t: 8,
        width_i: 8,
        width_time: 8,
    };
    let mut model = build_denoiser::<f64>(cfg, 1).unwrap();
    let sched = NoiseSchedule::linear(50, 1e-4, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = Tensor::randn(&[3, 8, 8], 0.5, &mut rng);
    let eps = Tensor::randn(&[3, 8, 8], 1.0, &mut rng);
    let batch = DiffusionBatch::new(vec![x0], vec![17], vec![eps], &sched).unwrap();
    let conds = vec![ConditionPair {
        c_t: Tensor::randn(&[4, 8], 0.5, &mut rng),
        c_i: Some(Tensor::randn(&[4, 8], 0.5, &mut rng)),
    }];

    let analytic = {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true, None, false).unwrap();
        let loss = denoise_loss(&model, &mut g, &bound, &batch, &conds).unwrap();
        g.backward(loss).unwrap();
        bound
            .base_params
            .iter()
            .map(|&id| g.grad_tensor(id).unwrap())
            .collect::<Vec<_>>()
    };

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let n_params = model.params().len();
    for p_ix in 0..n_params {
        for _ in 0..2 {
            let numel = model.params()[p_ix].numel();
            let e_ix = rng.gen_range(0..numel);
            let loss_at = |model: &stylelab::denoiser::Denoiser<f64>| {
                stylelab::diffusion::denoise_loss_value(model, &batch, &conds, None).unwrap()
            };
            let orig = model.params()[p_ix].data()[e_ix];
            model.params_mut()[p_ix].data_mut()[e_ix] = orig + h;
            let up = loss_at(&model);
            model.params_mut()[p_ix].data_mut()[e_ix] = orig - h;
            let down = loss_at(&model);
            model.params_mut()[p_ix].data_mut()[e_ix] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[p_ix].data()[e_ix];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    println!("checked {checked} parameter entries, worst relative error {worst:.2e}");
    assert!(worst < 1e-4, "gradient check failed");
    println!("gradient check passed");
}
