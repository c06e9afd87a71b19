//! SGD with heavy-ball momentum, shared by model training and pixel updates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(
                "sgd_momentum",
                format!("lr {lr} must be >= 0 and momentum {momentum} in [0, 1)"),
            ));
        }
        Ok(SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// `v <- momentum * v + g; p <- p - lr * v`, applied tensor by tensor.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "sgd_momentum",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        if self.velocity.len() != grads.len() {
            return Err(Error::invalid("sgd_momentum", "optimizer state does not match parameter count"));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::shape("sgd_momentum", p.shape(), g.shape()));
            }
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// `g <- g + decay * p` for every gradient/parameter pair.
pub fn add_weight_decay<'a>(grads: &mut [Tensor], params: impl IntoIterator<Item = &'a Tensor>, decay: f64) {
    for (g, p) in grads.iter_mut().zip(params) {
        g.data_mut().iter_mut().zip(p.data()).for_each(|(gv, pv)| *gv += decay * pv);
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before rescaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p0: f64, g: f64, lr: f64, momentum: f64, steps: usize) -> f64 {
        let mut opt = SgdMomentum::new(lr, momentum).unwrap();
        let mut p = Tensor::scalar(p0);
        for _ in 0..steps {
            opt.step([&mut p], &[Tensor::scalar(g)]).unwrap();
        }
        p.item()
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        assert_eq!(run(1.7, 0.0, 0.1, 0.9, 5), 1.7);
    }

    #[test]
    fn plain_step() {
        assert_eq!(run(1.0, 0.25, 1.0, 0.0, 1), 0.75);
    }

    #[test]
    fn momentum_unrolled_two_steps() {
        // v1 = 1, p1 = -0.1; v2 = 1.9, p2 = -0.29
        assert!((run(0.0, 1.0, 0.1, 0.9, 2) + 0.29).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        let mut p = Tensor::zeros(&[2]);
        assert!(opt.step([&mut p], &[Tensor::zeros(&[3])]).is_err());
        assert!(SgdMomentum::new(0.1, 1.0).is_err());
    }

    #[test]
    fn weight_decay_adds_scaled_params() {
        let params = [Tensor::from_vec(vec![2.0, -4.0])];
        let mut grads = [Tensor::from_vec(vec![1.0, 1.0])];
        add_weight_decay(&mut grads, &params, 0.5);
        assert_eq!(grads[0].data(), &[2.0, -1.0]);
    }

    #[test]
    fn global_norm_clipping() {
        let mut grads = [Tensor::from_vec(vec![3.0]), Tensor::from_vec(vec![4.0])];
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((grads[0].data()[0] - 0.6).abs() < 1e-15 && (grads[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = [Tensor::from_vec(vec![0.3, 0.4])];
        assert_eq!(clip_global_norm(&mut small, 1.0), 0.5);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
        let mut zero = [Tensor::zeros(&[2])];
        assert_eq!(clip_global_norm(&mut zero, 0.0), 0.0);
    }
}
