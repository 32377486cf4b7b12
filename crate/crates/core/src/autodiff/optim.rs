use super::params::ParamStore;
use super::tensor::{Result, TensorError};

/// One momentum step on flat buffers: `v ← momentum·v − lr·g`, `p ← p + v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "sgd_momentum_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), velocity.len()],
        });
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TensorError::invalid(
            "sgd_momentum_step",
            format!("lr must be positive, got {lr}"),
        ));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(TensorError::invalid(
            "sgd_momentum_step",
            format!("momentum must lie in [0, 1), got {momentum}"),
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Momentum SGD over every tensor of a [`ParamStore`], reading their grad slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        let velocity = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Sgd { momentum, velocity }
    }

    /// Applies one update with learning rate `lr`; tensors without a grad slot are skipped.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(TensorError::invalid(
                "sgd",
                "optimizer was built for a different store",
            ));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            sgd_momentum_step(
                t.values_mut(),
                &g,
                &mut self.velocity[id.index()],
                lr,
                self.momentum,
            )?;
        }
        Ok(())
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let (mut p, mut v) = (vec![0.0], vec![0.0]);
        sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.0).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        // v1 = -0.1, p1 = -0.1; v2 = 0.9·(-0.1) - 0.1 = -0.19, p2 = -0.29
        let (mut p, mut v) = (vec![0.0], vec![0.0]);
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        }
        assert!((p[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let (mut p, mut v) = (vec![1.5, -2.0], vec![0.0, 0.0]);
        sgd_momentum_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let (mut p, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        assert!(sgd_momentum_step(&mut p, &[1.0], &mut v, 0.1, 0.9).is_err());
        assert!(sgd_momentum_step(&mut p, &[1.0, 1.0], &mut v, 0.0, 0.9).is_err());
        assert!(sgd_momentum_step(&mut p, &[1.0, 1.0], &mut v, 0.1, 1.0).is_err());
    }
}
