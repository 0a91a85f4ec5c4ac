use serde::{Deserialize, Serialize};

use super::{Gradients, Network};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Learning rate, moment accumulators and step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real> {
    pub learning_rate: f64,
    pub kind: OptimizerKind,
    pub step: u64,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::arg(format!("learning rate {learning_rate} must be positive")));
        }
        Ok(OptimizerState {
            learning_rate,
            kind,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }
}

/// Applies one update to every trainable, unfrozen parameter.
pub fn optimizer_step<T: Real>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let count = net.params().len();
    if grads.params.len() != count {
        return Err(Error::Usage(format!(
            "{} gradients for {count} parameters",
            grads.params.len()
        )));
    }
    for (p, g) in net.params().iter().zip(&grads.params) {
        if !p.is_updated() {
            continue;
        }
        let g = g.as_ref().ok_or_else(|| Error::Training {
            param: p.name.clone(),
            detail: "missing gradient".into(),
        })?;
        if g.shape() != p.value.shape() {
            return Err(Error::Training {
                param: p.name.clone(),
                detail: format!("gradient shape {:?} vs {:?}", g.shape(), p.value.shape()),
            });
        }
        if !g.all_finite() {
            return Err(Error::Training {
                param: p.name.clone(),
                detail: "non-finite gradient".into(),
            });
        }
    }
    state.first.resize(count, None);
    state.second.resize(count, None);
    state.step += 1;
    let lr = T::lit(state.learning_rate);
    match state.kind {
        OptimizerKind::Sgd => {
            for (p, g) in net.params_mut().iter_mut().zip(&grads.params) {
                if let (true, Some(g)) = (p.is_updated(), g) {
                    for (w, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
        }
        OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            let t = state.step as i32;
            let c1 = T::lit(1.0 - beta1.powi(t));
            let c2 = T::lit(1.0 - beta2.powi(t));
            let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(epsilon));
            for (i, (p, g)) in net.params_mut().iter_mut().zip(&grads.params).enumerate() {
                let (true, Some(g)) = (p.is_updated(), g) else {
                    continue;
                };
                let m = state.first[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                let v = state.second[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                for (((w, &d), mi), vi) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *mi = b1 * *mi + (T::one() - b1) * d;
                    *vi = b2 * *vi + (T::one() - b2) * d * d;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Halves the learning rate after `patience` epochs without a new best
/// validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    #[serde(default = "unset_best")]
    pub best: f64,
    #[serde(default)]
    pub wait: usize,
    #[serde(default)]
    pub history: Vec<f64>,
}

fn unset_best() -> f64 {
    f64::MAX
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        PlateauSchedule {
            patience: 3,
            factor: 0.5,
            min_lr: 1e-7,
            best: f64::MAX,
            wait: 0,
            history: Vec::new(),
        }
    }
}

impl PlateauSchedule {
    /// Records one epoch's validation loss and returns the (possibly
    /// reduced) learning rate.
    pub fn update(&mut self, lr: f64, epoch_val_loss: f64) -> f64 {
        self.history.push(epoch_val_loss);
        if epoch_val_loss < self.best {
            self.best = epoch_val_loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }

    /// Clears monitoring state; used when a new training phase starts.
    pub fn reset(&mut self) {
        self.best = f64::MAX;
        self.wait = 0;
        self.history.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GraphBuilder, LayerSpec, Mode};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_net() -> Network<f64> {
        let mut b = GraphBuilder::new(&[3]);
        b.then("fc", LayerSpec::Dense { inputs: 3, outputs: 2 }, 0).unwrap();
        Network::new(b.finish(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn grads_for(net: &mut Network<f64>, scale: f64) -> Gradients<f64> {
        let x = Tensor::from_f64(&[1, 3], &[1.0, 2.0, -1.0]);
        let (y, mut tape) = net.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        tape.backward(net, &Tensor::full(y.shape(), scale)).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = dense_net();
        let before: Vec<f64> = net.params()[0].value.data().to_vec();
        let g = grads_for(&mut net, 0.0);
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut st = OptimizerState::new(kind, 0.1).unwrap();
            optimizer_step(&mut net, &g, &mut st).unwrap();
        }
        assert_eq!(net.params()[0].value.data(), before.as_slice());
    }

    #[test]
    fn sgd_is_plain_descent() {
        let mut net = dense_net();
        let before: Vec<f64> = net.params()[0].value.data().to_vec();
        let g = grads_for(&mut net, 1.0);
        let mut st = OptimizerState::new(OptimizerKind::Sgd, 0.1).unwrap();
        optimizer_step(&mut net, &g, &mut st).unwrap();
        let gw = g.params[0].as_ref().unwrap();
        for ((&a, &b), &d) in net.params()[0].value.data().iter().zip(&before).zip(gw.data()) {
            assert_eq!(a, b - 0.1 * d);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        for scale in [1e-3, 1.0, 1e3] {
            let mut net = dense_net();
            let before: Vec<f64> = net.params()[0].value.data().to_vec();
            let g = grads_for(&mut net, scale);
            let mut st = OptimizerState::new(OptimizerKind::adam(), 0.01).unwrap();
            optimizer_step(&mut net, &g, &mut st).unwrap();
            for (&a, &b) in net.params()[0].value.data().iter().zip(&before) {
                assert!(((a - b).abs() - 0.01).abs() < 1e-5 * 0.01 / scale.min(1.0));
            }
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut net = dense_net();
        let mut g = grads_for(&mut net, 1.0);
        g.params[1].as_mut().unwrap().data_mut()[0] = f64::NAN;
        let mut st = OptimizerState::new(OptimizerKind::Sgd, 0.1).unwrap();
        match optimizer_step(&mut net, &g, &mut st) {
            Err(Error::Training { param, .. }) => assert_eq!(param, "fc.bias"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_positive_learning_rate_rejected() {
        assert!(OptimizerState::<f64>::new(OptimizerKind::Sgd, 0.0).is_err());
    }

    #[test]
    fn plateau_examples() {
        let mut s = PlateauSchedule::default();
        let mut lr = 1.0;
        for l in [1.0, 0.9, 0.8] {
            lr = s.update(lr, l);
        }
        assert_eq!(lr, 1.0);

        let mut s = PlateauSchedule::default();
        let mut lr = 1.0;
        let mut seen = Vec::new();
        for _ in 0..4 {
            lr = s.update(lr, 1.0);
            seen.push(lr);
        }
        assert_eq!(seen, vec![1.0, 1.0, 1.0, 0.5]);

        let mut s = PlateauSchedule::default();
        let mut lr = 1.0;
        lr = s.update(lr, 1.0);
        for _ in 0..6 {
            lr = s.update(lr, 2.0);
        }
        assert_eq!(lr, 0.25);
    }

    #[test]
    fn plateau_respects_floor() {
        let mut s = PlateauSchedule {
            min_lr: 0.3,
            ..Default::default()
        };
        let mut lr = 1.0;
        for _ in 0..20 {
            let next = s.update(lr, 5.0);
            assert!(next <= lr);
            lr = next;
        }
        assert_eq!(lr, 0.3);
    }
}
