use super::OptimSpec;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::ParamStore;

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub spec: OptimSpec,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(spec: OptimSpec, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Adam {
            spec,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from `grads` (in store order) and reapplies the
    /// parameter masks.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::DimMismatch {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        self.step += 1;
        let OptimSpec {
            lr,
            beta1,
            beta2,
            eps,
        } = self.spec;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {} has the wrong shape",
                    p.name
                )));
            }
            let (pd, gd) = (p.value.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..gd.len() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gd[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gd[i] * gd[i];
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        params.apply_masks();
        Ok(())
    }
}

/// Scales `grads` so their joint Euclidean norm is at most `max_norm` and
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
