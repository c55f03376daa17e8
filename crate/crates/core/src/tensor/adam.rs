use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. `decay[i]` selects which tensors receive
/// weight decay.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    decay: &[bool],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != decay.len() || params.len() != state.m.len() {
        return Err(Error::Invalid(format!(
            "adam_step: {} params, {} grads, {} decay flags, {} moment slots",
            params.len(),
            grads.len(),
            decay.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data.iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps) + wd * *w;
            *w -= cfg.lr * update;
        }
        if p.data.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!("adam_step (param {i})")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_bit_identical() {
        let p0 = vec![Tensor::from_fn(&[3, 2], |i| (i as f64).sin() * 1e3)];
        let mut p = p0.clone();
        let g = vec![Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5)];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        for _ in 0..10 {
            adam_step(&mut p, &g, &[true], &mut st, &cfg).unwrap();
        }
        assert_eq!(p, p0);
        for (a, b) in p[0].data().iter().zip(p0[0].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![Tensor::full(&[2], 1.0)];
        let g = vec![Tensor::new(vec![2], vec![0.3, -2.0]).unwrap()];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut p, &g, &[false], &mut st, &cfg).unwrap();
        assert!((p[0].data()[0] - 0.99).abs() < 1e-6);
        assert!((p[0].data()[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn decay_applies_only_where_flagged() {
        let mut p = vec![Tensor::full(&[1], 2.0), Tensor::full(&[1], 2.0)];
        let g = vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adam_step(&mut p, &g, &[true, false], &mut st, &cfg).unwrap();
        assert!((p[0].item() - 1.9).abs() < 1e-12);
        assert_eq!(p[1].item(), 2.0);
    }
}
