//! Parameterized building blocks shared by all cells.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names such as
//! `enc.mean.w`. A forward pass binds the whole store to a fresh
//! [`Tape`] with [`ParamStore::bind`] and the networks look their weights up
//! by name, so two models that use the same names share parameters.
//!
//! All graph values are row-batched: shape `[B, features]`.

mod blocks;
mod control;
mod mlp;

pub use blocks::{BandedTransition, BlockVars, TransitionNoise};
pub use control::{ControlKind, ControlModel, TaskInput, TaskTransform, TransformKind};
pub use mlp::{Decoder, Dense, Encoder, Mlp, MlpSpec, OutputActivation};

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gaussian::{CovTriple, FactorizedBelief};

/// One named parameter tensor, optionally restricted by a 0/1 mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub mask: Option<Vec<f64>>,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert_with_mask(name, value, None)
    }

    /// Inserts a parameter whose entries outside `mask` are held at zero.
    pub fn insert_masked(&mut self, name: &str, value: Tensor, mask: Vec<f64>) -> Result<()> {
        self.insert_with_mask(name, value, Some(mask))
    }

    fn insert_with_mask(
        &mut self,
        name: &str,
        mut value: Tensor,
        mask: Option<Vec<f64>>,
    ) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        if let Some(m) = &mask {
            if m.len() != value.len() {
                return Err(Error::DimMismatch {
                    expected: value.len(),
                    got: m.len(),
                });
            }
            for (v, k) in value.data_mut().iter_mut().zip(m) {
                *v *= k;
            }
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            mask,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    /// Replaces a value of the same shape; the mask is reapplied.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[i];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        if let Some(m) = &p.mask {
            for (v, k) in p.value.data_mut().iter_mut().zip(m) {
                *v *= k;
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zeroes masked-out entries of every parameter.
    pub fn apply_masks(&mut self) {
        for p in &mut self.params {
            if let Some(m) = &p.mask {
                for (v, k) in p.value.data_mut().iter_mut().zip(m) {
                    *v *= k;
                }
            }
        }
    }

    /// Zeroes gradient entries outside each parameter's mask.
    pub fn mask_gradients(&self, grads: &mut [Tensor]) {
        for (p, g) in self.params.iter().zip(grads) {
            if let Some(m) = &p.mask {
                for (v, k) in g.data_mut().iter_mut().zip(m) {
                    *v *= k;
                }
            }
        }
    }

    /// All values concatenated in store order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::DimMismatch {
                expected: self.num_scalars(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value
                .data_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect();
        Bound {
            tape,
            vars,
            index: self.index.clone(),
        }
    }
}

/// A [`ParamStore`] registered on a tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// The variable for `name`; panics when the model was built without it.
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter `{name}` is not in the store"),
        }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Constant `[rows, cols]` filled with `value`.
    pub fn fill(&self, rows: usize, cols: usize, value: f64) -> Var<'t> {
        self.tape.constant(Tensor::full(&[rows, cols], value))
    }
}

/// A batch of factorized beliefs on a tape; every field is `[B, d]`.
#[derive(Clone, Copy, Debug)]
pub struct BeliefVars<'t> {
    pub mean_u: Var<'t>,
    pub mean_l: Var<'t>,
    pub var_u: Var<'t>,
    pub var_l: Var<'t>,
    pub cov_s: Var<'t>,
}

impl<'t> BeliefVars<'t> {
    /// One-row constant belief.
    pub fn constant(tape: &'t Tape, b: &FactorizedBelief) -> Self {
        BeliefVars::constant_batch(tape, std::slice::from_ref(b))
    }

    /// Constant belief with one row per element of `beliefs`.
    pub fn constant_batch(tape: &'t Tape, beliefs: &[FactorizedBelief]) -> Self {
        let stack = |f: &dyn Fn(&FactorizedBelief) -> &Vec<f64>| {
            let rows: Vec<&Vec<f64>> = beliefs.iter().map(f).collect();
            tape.constant(Tensor::from_rows(&rows).expect("belief rows"))
        };
        BeliefVars {
            mean_u: stack(&|b| &b.mean_u),
            mean_l: stack(&|b| &b.mean_l),
            var_u: stack(&|b| &b.cov.var_u),
            var_l: stack(&|b| &b.cov.var_l),
            cov_s: stack(&|b| &b.cov.cov_s),
        }
    }

    /// Zero mean, `var_u = var_l = var`, no side covariance.
    pub fn isotropic(tape: &'t Tape, rows: usize, d: usize, var: f64) -> Self {
        let zeros = tape.constant(Tensor::zeros(&[rows, d]));
        let v = tape.constant(Tensor::full(&[rows, d], var));
        BeliefVars {
            mean_u: zeros,
            mean_l: zeros,
            var_u: v,
            var_l: v,
            cov_s: zeros,
        }
    }

    pub fn rows(&self) -> usize {
        self.mean_u.rows()
    }

    pub fn dim(&self) -> usize {
        self.mean_u.cols()
    }

    /// `[mean_u, mean_l]` as one `[B, 2d]` variable.
    pub fn mean(&self) -> Var<'t> {
        self.mean_u.tape().concat(&[self.mean_u, self.mean_l])
    }

    /// Row `r` from `self` where `mask[r]`, otherwise from `other`.
    pub fn select(&self, mask: &[bool], other: &BeliefVars<'t>) -> Self {
        BeliefVars {
            mean_u: self.mean_u.select(mask, other.mean_u),
            mean_l: self.mean_l.select(mask, other.mean_l),
            var_u: self.var_u.select(mask, other.var_u),
            var_l: self.var_l.select(mask, other.var_l),
            cov_s: self.cov_s.select(mask, other.cov_s),
        }
    }

    pub fn stop_gradient(&self) -> Self {
        BeliefVars {
            mean_u: self.mean_u.stop_gradient(),
            mean_l: self.mean_l.stop_gradient(),
            var_u: self.var_u.stop_gradient(),
            var_l: self.var_l.stop_gradient(),
            cov_s: self.cov_s.stop_gradient(),
        }
    }

    /// Current values, one belief per row. No validation is applied.
    pub fn to_beliefs(&self) -> Vec<FactorizedBelief> {
        let (mu, ml) = (self.mean_u.value(), self.mean_l.value());
        let (vu, vl, s) = (self.var_u.value(), self.var_l.value(), self.cov_s.value());
        (0..self.rows())
            .map(|r| FactorizedBelief {
                mean_u: mu.row_slice(r).to_vec(),
                mean_l: ml.row_slice(r).to_vec(),
                cov: CovTriple {
                    var_u: vu.row_slice(r).to_vec(),
                    var_l: vl.row_slice(r).to_vec(),
                    cov_s: s.row_slice(r).to_vec(),
                },
            })
            .collect()
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Relative position of a step inside a window of length `window`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeEncoding {
    pub window: usize,
}

impl TimeEncoding {
    pub const FEATURES: usize = 3;

    pub fn new(window: usize) -> Self {
        TimeEncoding {
            window: window.max(1),
        }
    }

    /// `[t/H, sin(2πt/H), cos(2πt/H)]` for the 1-based step `t`.
    pub fn features(&self, t: usize) -> [f64; 3] {
        let phase = t as f64 / self.window as f64;
        [phase, (2.0 * PI * phase).sin(), (2.0 * PI * phase).cos()]
    }
}
