//! Adam optimizer over flat parameter lists.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam with bias correction. Moment buffers are keyed by parameter index,
/// so the caller must present parameters in the same order every step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. `grads[i]` may be `None` for parameters that did not
    /// participate in the backward pass (their moments still decay).
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut [&mut Tensor<S>],
        grads: &[Option<Tensor<S>>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Parameter(format!(
                "{} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} params, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, gopt)) in params.iter_mut().zip(grads).enumerate() {
            let zero;
            let g = match gopt {
                Some(g) => {
                    if g.shape() != p.shape() {
                        return Err(Error::dimension("adam grad", p.shape(), g.shape()));
                    }
                    g
                }
                None => {
                    zero = Tensor::zeros(p.shape());
                    &zero
                }
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gf = gv.as_f64();
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gf;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gf * gf;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                let upd = self.lr * mhat / (vhat.sqrt() + self.eps);
                *pv = *pv - S::from_f64(upd);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over a list of gradient tensors, for logging.
pub fn grad_norm<S: Scalar>(grads: &[Option<Tensor<S>>]) -> f64 {
    let mut s = 0.0;
    for g in grads.iter().flatten() {
        for &v in g.data() {
            let v = v.as_f64();
            s += v * v;
        }
    }
    s.sqrt()
}
