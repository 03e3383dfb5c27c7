use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::net::{ParamId, Parameters};
use crate::tensor::Tensor;

/// Update rule of an optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    Adam { beta1: f32, beta2: f32, eps: f32 },
    Sgd { momentum: f32 },
}

impl OptimKind {
    pub const ADAM: OptimKind = OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    pub const SGD_MOMENTUM: OptimKind = OptimKind::Sgd { momentum: 0.9 };
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    /// First moment (Adam) or velocity (SGD).
    m: Vec<f32>,
    /// Second moment; empty for SGD.
    v: Vec<f32>,
    step: u32,
}

/// An optimizer with per-parameter state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimKind,
    lr: f32,
    moments: BTreeMap<ParamId, Moments>,
}

impl OptimizerState {
    pub fn new(kind: OptimKind, lr: f32) -> Result<Self> {
        let mut s = OptimizerState { kind, lr: 0.0, moments: BTreeMap::new() };
        s.set_lr(lr)?;
        Ok(s)
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    /// Applies one update to `param` given its gradient.
    pub fn update(&mut self, id: ParamId, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::dim(format!(
                "{id:?}: gradient shape {:?} does not match parameter {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let n = param.numel();
        let adam = matches!(self.kind, OptimKind::Adam { .. });
        let st = self.moments.entry(id).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: if adam { vec![0.0; n] } else { Vec::new() },
            step: 0,
        });
        if st.m.len() != n {
            return Err(Error::dim(format!("{id:?}: parameter changed size from {} to {n}", st.m.len())));
        }
        st.step += 1;
        let lr = self.lr;
        let p = param.data_mut();
        let g = grad.data();
        match self.kind {
            OptimKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(st.step as i32);
                let c2 = 1.0 - beta2.powi(st.step as i32);
                for j in 0..n {
                    st.m[j] = beta1 * st.m[j] + (1.0 - beta1) * g[j];
                    st.v[j] = beta2 * st.v[j] + (1.0 - beta2) * g[j] * g[j];
                    let m_hat = st.m[j] / c1;
                    let v_hat = st.v[j] / c2;
                    p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            OptimKind::Sgd { momentum } => {
                for j in 0..n {
                    st.m[j] = momentum * st.m[j] + g[j];
                    p[j] -= lr * st.m[j];
                }
            }
        }
        Ok(())
    }

    /// Updates every listed parameter of `model`. Aborts before touching any
    /// parameter if a gradient is non-finite.
    pub fn step<P: Parameters + ?Sized>(&mut self, model: &mut P, grads: &[(ParamId, Tensor)], step: usize) -> Result<()> {
        check_finite(grads, step)?;
        for (id, g) in grads {
            let p = model
                .param_mut(*id)
                .ok_or_else(|| Error::Config(format!("{id:?} is not a trainable parameter of this model")))?;
            self.update(*id, p, g)?;
        }
        Ok(())
    }
}

pub(crate) fn check_finite(grads: &[(ParamId, Tensor)], step: usize) -> Result<()> {
    for (id, g) in grads {
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {id:?} (element {j} = {})", g.data()[j]),
                step,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const ID: ParamId = ParamId::HeadBias;

    fn scalar_steps(kind: OptimKind, lr: f32, grads: &[f32]) -> Vec<f32> {
        let mut opt = OptimizerState::new(kind, lr).unwrap();
        let mut p = Tensor::from_slice(&[0.0]);
        grads
            .iter()
            .map(|&g| {
                opt.update(ID, &mut p, &Tensor::from_slice(&[g])).unwrap();
                p.data()[0]
            })
            .collect()
    }

    #[test]
    fn sgd_without_momentum() {
        assert_eq!(scalar_steps(OptimKind::Sgd { momentum: 0.0 }, 0.1, &[1.0]), vec![-0.1]);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let p = scalar_steps(OptimKind::Sgd { momentum: 0.9 }, 0.1, &[1.0, 1.0]);
        assert!((p[0] + 0.1).abs() < 1e-7);
        assert!((p[1] + 0.29).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn adam_first_step_is_lr_for_any_scale() {
        for g in [1e-6f32, 1e-2, 1.0, 1e4, -3.0] {
            let p = scalar_steps(OptimKind::ADAM, 1e-3, &[g]);
            // Closed form: m̂ = g, v̂ = g², step = lr·g/(|g| + eps).
            let expected = -1e-3 * g as f64 / (g.abs() as f64 + 1e-8);
            assert!((p[0] as f64 - expected).abs() < 1e-6, "g={g}: {}", p[0]);
        }
    }

    #[test]
    fn rejects_bad_lr_and_nan() {
        assert!(OptimizerState::new(OptimKind::ADAM, 0.0).is_err());
        assert!(OptimizerState::new(OptimKind::ADAM, f32::NAN).is_err());
        let err = check_finite(&[(ID, Tensor::from_slice(&[1.0, f32::NAN]))], 7).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 7, .. }));
    }

    #[test]
    fn shape_mismatch() {
        let mut opt = OptimizerState::new(OptimKind::ADAM, 1e-3).unwrap();
        let mut p = Tensor::zeros(&[2]);
        assert!(opt.update(ID, &mut p, &Tensor::zeros(&[3])).is_err());
    }
}
