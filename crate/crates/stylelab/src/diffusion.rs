//! Training loss and reverse samplers on top of the noise schedule.

use crate::denoiser::{Denoiser, LayerTriple};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::schedule::{DiffusionBatch, NoiseSchedule};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The embedded conditions for one sample. `c_i = None` runs the
/// structurally text-only path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPair<S> {
    pub c_t: Tensor<S>,
    pub c_i: Option<Tensor<S>>,
}

/// Mean-squared error between the noise draws and the model's predictions,
/// averaged over the batch. Returns the scalar loss node; the caller owns
/// the graph and drives backward.
pub fn denoise_loss<S: Scalar>(
    model: &Denoiser<S>,
    g: &mut Graph<S>,
    bound: &crate::denoiser::BoundDenoiser,
    batch: &DiffusionBatch<S>,
    conds: &[ConditionPair<S>],
) -> Result<NodeId> {
    if conds.len() != batch.len() {
        return Err(Error::Parameter(format!(
            "{} conditions for a batch of {}",
            conds.len(),
            batch.len()
        )));
    }
    let nodes: Vec<(NodeId, Option<NodeId>)> = conds
        .iter()
        .map(|c| {
            (
                g.constant(c.c_t.clone()),
                c.c_i.as_ref().map(|v| g.constant(v.clone())),
            )
        })
        .collect();
    denoise_loss_nodes(model, g, bound, batch, &nodes)
}

/// As [`denoise_loss`], but with the conditions already in the graph so
/// gradients can flow into the text table and image encoder.
pub fn denoise_loss_nodes<S: Scalar>(
    model: &Denoiser<S>,
    g: &mut Graph<S>,
    bound: &crate::denoiser::BoundDenoiser,
    batch: &DiffusionBatch<S>,
    conds: &[(NodeId, Option<NodeId>)],
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty diffusion batch".into()));
    }
    if conds.len() != batch.len() {
        return Err(Error::Parameter(format!(
            "{} conditions for a batch of {}",
            conds.len(),
            batch.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for i in 0..batch.len() {
        let (ct, ci) = conds[i];
        let out = model.forward(g, bound, &batch.xt[i], batch.t[i], ct, ci, false)?;
        let eps = g.constant(batch.eps[i].clone());
        let diff = g.sub(eps, out.eps)?;
        let sq = g.mul(diff, diff)?;
        let mse = g.mean_all(sq);
        total = Some(match total {
            None => mse,
            Some(t) => g.add(t, mse)?,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / batch.len() as f64))
}

/// Convenience eager loss (no gradients).
pub fn denoise_loss_value<S: Scalar>(
    model: &Denoiser<S>,
    batch: &DiffusionBatch<S>,
    conds: &[ConditionPair<S>],
    lora: Option<&LoraAdapter<S>>,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false, lora, false)?;
    let loss = denoise_loss(model, &mut g, &bound, batch, conds)?;
    Ok(g.value(loss).data()[0].as_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// DDIM-style deterministic reverse steps (η = 0).
    Deterministic,
    /// DDPM ancestral sampling with fresh noise each step.
    Ancestral,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub steps: usize,
    pub mode: SampleMode,
    pub seed: u64,
    /// Prompt guidance weight. 1.0 is plain conditional sampling; above
    /// that, each step extrapolates away from the empty-prompt prediction,
    /// sharpening prompt adherence at some cost in diversity.
    pub guidance: f64,
}

impl SampleOptions {
    pub fn deterministic(steps: usize, seed: u64) -> Self {
        SampleOptions {
            steps,
            mode: SampleMode::Deterministic,
            seed,
            guidance: 1.0,
        }
    }

    pub fn guided(steps: usize, seed: u64, guidance: f64) -> Self {
        SampleOptions {
            guidance,
            ..SampleOptions::deterministic(steps, seed)
        }
    }
}

/// Evenly spaced descending timestep subsequence ending at 1.
fn timestep_path(t_max: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .rev()
        .map(|i| (i * t_max).div_ceil(steps))
        .collect()
}

/// The per-step observation passed to a probe recorder: timestep and the
/// per-layer (Z, Z_t, Z_i) cross-attention triples.
pub type StepTriples<S> = (usize, Vec<LayerTriple<S>>);

/// Reverse sampling from pure noise. Deterministic given (options, model,
/// conditions). When `recorder` is given, every denoiser evaluation's layer
/// triples are passed to it and the generated image is still returned.
pub fn sample_with_recorder<S: Scalar>(
    model: &Denoiser<S>,
    cond: &ConditionPair<S>,
    sched: &NoiseSchedule,
    opts: SampleOptions,
    lora: Option<&LoraAdapter<S>>,
    mut recorder: Option<&mut dyn FnMut(StepTriples<S>)>,
) -> Result<Tensor<S>> {
    if opts.steps == 0 || opts.steps > sched.steps() {
        return Err(Error::Parameter(format!(
            "{} sampling steps for a schedule of length {}",
            opts.steps,
            sched.steps()
        )));
    }
    let cfg = &model.cfg;
    let shape = [cfg.channels, cfg.image_size, cfg.image_size];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x = Tensor::<S>::randn(&shape, 1.0, &mut rng);
    let path = timestep_path(sched.steps(), opts.steps);
    for (k, &t) in path.iter().enumerate() {
        let t_prev = if k + 1 < path.len() { path[k + 1] } else { 0 };
        let (eps_hat, triples) = model.predict_eps(
            &x,
            t,
            &cond.c_t,
            cond.c_i.as_ref(),
            lora,
            recorder.is_some(),
        )?;
        if let Some(rec) = recorder.as_deref_mut() {
            rec((t, triples));
        }
        let eps_hat = if (opts.guidance - 1.0).abs() > 1e-12 {
            // empty-prompt branch, matching the zeroed text condition the
            // model sees under condition dropout in training
            let null_ct = Tensor::<S>::zeros(cond.c_t.shape());
            let (eps_null, _) =
                model.predict_eps(&x, t, &null_ct, cond.c_i.as_ref(), lora, false)?;
            let mut out = eps_hat;
            for (v, &n) in out.data_mut().iter_mut().zip(eps_null.data()) {
                let vv = v.as_f64();
                *v = S::from_f64(n.as_f64() + opts.guidance * (vv - n.as_f64()));
            }
            out
        } else {
            eps_hat
        };
        let ab_t = sched.alpha_bar(t);
        let ab_p = sched.alpha_bar(t_prev);
        // predicted clean image, clamped to the data range: at large t
        // 1/sqrt(abar) is enormous and unclamped prediction errors
        // compound across steps into divergence
        let mut x0 = x.clone();
        let inv = 1.0 / ab_t.sqrt();
        let c = (1.0 - ab_t).sqrt();
        for (xv, &ev) in x0.data_mut().iter_mut().zip(eps_hat.data()) {
            let v = (xv.as_f64() - c * ev.as_f64()) * inv;
            *xv = S::from_f64(v.clamp(-1.0, 1.0));
        }
        // noise direction consistent with the clamped prediction
        let mut eps_hat = eps_hat;
        for (ev, (&xv, &x0v)) in eps_hat
            .data_mut()
            .iter_mut()
            .zip(x.data().iter().zip(x0.data()))
        {
            *ev = S::from_f64((xv.as_f64() - ab_t.sqrt() * x0v.as_f64()) / c.max(1e-12));
        }
        let sigma = match opts.mode {
            SampleMode::Deterministic => 0.0,
            SampleMode::Ancestral => {
                ((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)).max(0.0).sqrt()
            }
        };
        let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
        let noise = if sigma > 0.0 {
            Some(Tensor::<S>::randn(&shape, 1.0, &mut rng))
        } else {
            None
        };
        let a = ab_p.sqrt();
        for (i, xv) in x.data_mut().iter_mut().enumerate() {
            let mut v = a * x0.data()[i].as_f64() + dir * eps_hat.data()[i].as_f64();
            if let Some(n) = &noise {
                v += sigma * n.data()[i].as_f64();
            }
            *xv = S::from_f64(v);
        }
        x.assert_finite("sampler state")?;
    }
    Ok(x)
}

/// Reverse sampling without probing.
pub fn sample<S: Scalar>(
    model: &Denoiser<S>,
    cond: &ConditionPair<S>,
    sched: &NoiseSchedule,
    opts: SampleOptions,
    lora: Option<&LoraAdapter<S>>,
) -> Result<Tensor<S>> {
    sample_with_recorder(model, cond, sched, opts, lora, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{build_denoiser, DenoiserConfig};
    use crate::schedule::forward_diffuse;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            channels: 3,
            patch: 4,
            width: 16,
            heads: 2,
            layers: 2,
            width_t: 8,
            width_i: 8,
            width_time: 8,
        }
    }

    fn tiny_setup() -> (Denoiser<f32>, NoiseSchedule, ConditionPair<f32>) {
        let m = build_denoiser::<f32>(tiny_cfg(), 1).unwrap();
        let sched = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cond = ConditionPair {
            c_t: Tensor::randn(&[4, 8], 1.0, &mut rng),
            c_i: Some(Tensor::randn(&[4, 8], 1.0, &mut rng)),
        };
        (m, sched, cond)
    }

    fn batch_of(
        sched: &NoiseSchedule,
        n: usize,
        seed: u64,
    ) -> (DiffusionBatch<f32>, Vec<ConditionPair<f32>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0: Vec<_> = (0..n)
            .map(|_| Tensor::<f32>::randn(&[3, 8, 8], 1.0, &mut rng))
            .collect();
        let eps: Vec<_> = (0..n)
            .map(|_| Tensor::<f32>::randn(&[3, 8, 8], 1.0, &mut rng))
            .collect();
        let t: Vec<_> = (0..n).map(|i| 10 + i * 30).collect();
        let conds: Vec<_> = (0..n)
            .map(|_| ConditionPair {
                c_t: Tensor::randn(&[4, 8], 1.0, &mut rng),
                c_i: Some(Tensor::randn(&[4, 8], 1.0, &mut rng)),
            })
            .collect();
        (DiffusionBatch::new(x0, t, eps, sched).unwrap(), conds)
    }

    #[test]
    fn loss_is_near_one_for_untrained_model_scale() {
        // untrained predictions are small relative to unit-variance eps,
        // so the MSE sits near E[eps²] = 1
        let (m, sched, _) = tiny_setup();
        let (batch, conds) = batch_of(&sched, 4, 3);
        let loss = denoise_loss_value(&m, &batch, &conds, None).unwrap();
        assert!(loss > 0.2 && loss < 5.0, "loss {loss}");
    }

    #[test]
    fn loss_zero_direct() {
        // drive the graph directly: loss of (eps - pred) with eps := pred is 0
        let (m, sched, cond) = tiny_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xt = Tensor::<f32>::randn(&[3, 8, 8], 1.0, &mut rng);
        let (pred, _) = m
            .predict_eps(&xt, 30, &cond.c_t, cond.c_i.as_ref(), None, false)
            .unwrap();
        // construct a batch whose stored xt equals our xt and eps equals pred
        let ab = sched.alpha_bar(30);
        let mut x0 = xt.clone();
        for (v, &e) in x0.data_mut().iter_mut().zip(pred.data()) {
            *v = (*v - (1.0 - ab).sqrt() as f32 * e) / (ab.sqrt() as f32);
        }
        let batch = DiffusionBatch::new(vec![x0], vec![30], vec![pred], &sched).unwrap();
        assert!(batch.xt[0].max_abs_diff(&xt) < 1e-5);
        let loss = denoise_loss_value(&m, &batch, &[cond], None).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn one_adam_step_decreases_loss() {
        let (mut m, sched, _) = tiny_setup();
        let (batch, conds) = batch_of(&sched, 2, 5);
        let before = denoise_loss_value(&m, &batch, &conds, None).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, true, None, false).unwrap();
        let loss = denoise_loss(&m, &mut g, &bound, &batch, &conds).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<_> = bound
            .base_params
            .iter()
            .map(|&id| g.grad_tensor(id))
            .collect();
        let mut opt = crate::optim::Adam::new(1e-3);
        let mut params = m.params_mut();
        opt.step(&mut params, &grads).unwrap();
        let after = denoise_loss_value(&m, &batch, &conds, None).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (m, sched, cond) = tiny_setup();
        let opts = SampleOptions::deterministic(10, 7);
        let a = sample(&m, &cond, &sched, opts, None).unwrap();
        let b = sample(&m, &cond, &sched, opts, None).unwrap();
        assert_eq!(a.data(), b.data());
        let c = sample(
            &m,
            &cond,
            &sched,
            SampleOptions::deterministic(10, 8),
            None,
        )
        .unwrap();
        assert!(a.max_abs_diff(&c) > 1e-6);
        let anc = sample(
            &m,
            &cond,
            &sched,
            SampleOptions {
                steps: 10,
                mode: SampleMode::Ancestral,
                seed: 7,
                guidance: 1.0,
            },
            None,
        )
        .unwrap();
        let anc2 = sample(
            &m,
            &cond,
            &sched,
            SampleOptions {
                steps: 10,
                mode: SampleMode::Ancestral,
                seed: 7,
                guidance: 1.0,
            },
            None,
        )
        .unwrap();
        assert_eq!(anc.data(), anc2.data());
        assert!(anc.max_abs_diff(&a) > 1e-6);
    }

    #[test]
    fn zero_multiplier_matches_text_only_pipeline() {
        let (mut m, sched, cond) = tiny_setup();
        m.set_layer_scales(&[1.0, 1.0], 0.0).unwrap();
        let opts = SampleOptions::deterministic(10, 3);
        let dual = sample(&m, &cond, &sched, opts, None).unwrap();
        let text_only = sample(
            &m,
            &ConditionPair {
                c_t: cond.c_t.clone(),
                c_i: None,
            },
            &sched,
            opts,
            None,
        )
        .unwrap();
        assert!(dual.max_abs_diff(&text_only) <= 1e-6);
    }

    #[test]
    fn step_path_covers_range() {
        assert_eq!(timestep_path(10, 10), (1..=10).rev().collect::<Vec<_>>());
        let p = timestep_path(1000, 50);
        assert_eq!(p.len(), 50);
        assert_eq!(p[0], 1000);
        assert_eq!(*p.last().unwrap(), 20);
        assert!(p.windows(2).all(|w| w[0] > w[1]));
        assert!(sample_err_steps());
    }

    fn sample_err_steps() -> bool {
        let (m, sched, cond) = tiny_setup();
        sample(
            &m,
            &cond,
            &sched,
            SampleOptions::deterministic(101, 0),
            None,
        )
        .is_err()
    }

    #[test]
    fn recorder_sees_every_step_and_layer() {
        let (m, sched, cond) = tiny_setup();
        let mut seen = Vec::new();
        let mut rec = |st: StepTriples<f32>| seen.push((st.0, st.1.len()));
        let opts = SampleOptions::deterministic(5, 1);
        let with = sample_with_recorder(&m, &cond, &sched, opts, None, Some(&mut rec)).unwrap();
        assert_eq!(seen.len(), 5);
        assert!(seen.iter().all(|&(_, l)| l == 2));
        let without = sample(&m, &cond, &sched, opts, None).unwrap();
        assert_eq!(with.data(), without.data());
    }

    #[test]
    fn forward_noising_statistics() {
        // empirical mean/variance of x_t over many elements match
        // √ᾱ·μ and ᾱ·σ² + (1 − ᾱ)
        let sched = NoiseSchedule::default_pretrain();
        let t = 400;
        let ab = sched.alpha_bar(t);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000usize;
        let x0 = Tensor::<f64>::randn(&[n], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[n], 1.0, &mut rng);
        let xt = forward_diffuse(&x0, t, &eps, &sched).unwrap();
        let mean: f64 = xt.data().iter().sum::<f64>() / n as f64;
        let var: f64 = xt.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let se = (2.0 / n as f64).sqrt() * 3.0; // ~3 standard errors
        assert!(mean.abs() < 3.0 / (n as f64).sqrt() * 1.5, "mean {mean}");
        let expect_var = ab * 1.0 + (1.0 - ab);
        assert!((var - expect_var).abs() < se + 0.02, "var {var}");
    }
}
