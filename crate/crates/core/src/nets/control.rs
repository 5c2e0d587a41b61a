use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{
    uniform_init, BeliefVars, BlockVars, Bound, Dense, Mlp, MlpSpec, OutputActivation, ParamStore,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How a known input enters the prior mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlKind {
    /// `B a`
    Linear,
    /// `B(z) a` with `B(z)` a softmax mixture of `K` matrices.
    LocallyLinear,
    /// `f(a)` with a relu network.
    Nonlinear,
}

/// How a latent task belief enters the prediction.
pub type TransformKind = ControlKind;

impl FromStr for ControlKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ControlKind::Linear),
            "locally_linear" => Ok(ControlKind::LocallyLinear),
            "nonlinear" => Ok(ControlKind::Nonlinear),
            other => Err(Error::Config(format!(
                "unknown kind `{other}` (expected linear, locally_linear or nonlinear)"
            ))),
        }
    }
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControlKind::Linear => "linear",
            ControlKind::LocallyLinear => "locally_linear",
            ControlKind::Nonlinear => "nonlinear",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Inner {
    Linear { matrix: String },
    Local { basis: String, coeff: Dense },
    Nonlinear { net: Mlp },
}

/// Deterministic contribution `b(a)` of an action to the `2d` prior mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlModel {
    pub kind: ControlKind,
    pub action_dim: usize,
    pub latent: usize,
    inner: Inner,
}

impl ControlModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        kind: ControlKind,
        action_dim: usize,
        latent: usize,
        num_basis: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        let out = 2 * latent;
        let inner = match kind {
            ControlKind::Linear => {
                let matrix = format!("{prefix}.matrix");
                store.insert(&matrix, uniform_init(rng, action_dim, &[action_dim, out]))?;
                Inner::Linear { matrix }
            }
            ControlKind::LocallyLinear => {
                let k = num_basis.max(1);
                let basis = format!("{prefix}.basis");
                store.insert(
                    &basis,
                    uniform_init(rng, action_dim, &[k, out * action_dim]),
                )?;
                let coeff = Dense::new(store, rng, &format!("{prefix}.coeff"), out, k)?;
                Inner::Local { basis, coeff }
            }
            ControlKind::Nonlinear => {
                let spec = MlpSpec::with_hidden(action_dim, hidden, out, OutputActivation::Linear)?;
                Inner::Nonlinear {
                    net: Mlp::new(store, rng, prefix, spec)?,
                }
            }
        };
        Ok(ControlModel {
            kind,
            action_dim,
            latent,
            inner,
        })
    }

    /// `[B, 2d]` for actions `a: [B, Da]`. The locally linear kind needs the
    /// posterior mean `z_mean: [B, 2d]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        a: Var<'t>,
        z_mean: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        if a.cols() != self.action_dim {
            return Err(Error::ShapeMismatch(format!(
                "control expects {} action dims, got {}",
                self.action_dim,
                a.cols()
            )));
        }
        Ok(match &self.inner {
            Inner::Linear { matrix } => a.matmul(p.get(matrix)),
            Inner::Local { basis, coeff } => {
                let z = z_mean.ok_or_else(|| {
                    Error::ShapeMismatch("locally linear control needs the posterior mean".into())
                })?;
                let c = coeff.forward(p, z).softmax();
                c.matmul(p.get(basis)).bmv(a, 2 * self.latent)
            }
            Inner::Nonlinear { net } => net.forward(p, a),
        })
    }

    /// Control term for one action outside of any training graph.
    pub fn control_mean(
        &self,
        store: &ParamStore,
        a: &[f64],
        z_mean: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let z = z_mean.map(|z| tape.constant(Tensor::row(z)));
        Ok(self
            .forward(&p, tape.constant(Tensor::row(a)), z)?
            .to_tensor()
            .into_data())
    }
}

/// Latent task moments fed to a [`TaskTransform`].
#[derive(Clone, Copy, Debug)]
pub enum TaskInput<'t> {
    /// Diagonal Gaussian, mean and variance `[B, m]`.
    Diag { mean: Var<'t>, var: Var<'t> },
    /// Split belief with factorized covariance, each half `[B, m]`.
    Split(BeliefVars<'t>),
}

impl<'t> TaskInput<'t> {
    fn mean(&self) -> Var<'t> {
        match self {
            TaskInput::Diag { mean, .. } => *mean,
            TaskInput::Split(b) => b.mean(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum TaskInner {
    Linear { matrix: String },
    Local { basis: String, coeff: Dense },
    Nonlinear { mean: Mlp, var: Mlp },
}

/// Maps a latent task belief to an additive prior-mean term and an additive
/// covariance triple on the `2d` state.
///
/// For the linear kinds the covariance term is the block diagonal of
/// `C Σ Cᵀ`. The nonlinear kind uses one network for the mean and one on the
/// variances with a `max(elu(x), 0)` output, adding nothing to the side
/// covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTransform {
    pub kind: TransformKind,
    pub task_dim: usize,
    pub latent: usize,
    pub split_input: bool,
    inner: TaskInner,
}

impl TaskTransform {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        kind: TransformKind,
        task_dim: usize,
        latent: usize,
        split_input: bool,
        num_basis: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        let blocks = if split_input { 4 } else { 2 };
        let packed = blocks * latent * task_dim;
        let mean_in = if split_input { 2 * task_dim } else { task_dim };
        let var_in = if split_input { 3 * task_dim } else { task_dim };
        let inner = match kind {
            ControlKind::Linear => {
                let matrix = format!("{prefix}.matrix");
                store.insert(&matrix, uniform_init(rng, mean_in, &[1, packed]))?;
                TaskInner::Linear { matrix }
            }
            ControlKind::LocallyLinear => {
                let k = num_basis.max(1);
                let basis = format!("{prefix}.basis");
                store.insert(&basis, uniform_init(rng, mean_in, &[k, packed]))?;
                let coeff = Dense::new(store, rng, &format!("{prefix}.coeff"), mean_in, k)?;
                TaskInner::Local { basis, coeff }
            }
            ControlKind::Nonlinear => TaskInner::Nonlinear {
                mean: Mlp::new(
                    store,
                    rng,
                    &format!("{prefix}.mean"),
                    MlpSpec::with_hidden(mean_in, hidden, 2 * latent, OutputActivation::Linear)?,
                )?,
                var: Mlp::new(
                    store,
                    rng,
                    &format!("{prefix}.var"),
                    MlpSpec::with_hidden(var_in, hidden, 2 * latent, OutputActivation::Linear)?,
                )?,
            },
        };
        Ok(TaskTransform {
            kind,
            task_dim,
            latent,
            split_input,
            inner,
        })
    }

    /// The linear map for each row, for the linear kinds.
    pub fn blocks<'t>(&self, p: &Bound<'t>, task: &TaskInput<'t>) -> Option<BlockVars<'t>> {
        let packed = match &self.inner {
            TaskInner::Linear { matrix } => p.get(matrix),
            TaskInner::Local { basis, coeff } => {
                coeff.forward(p, task.mean()).softmax().matmul(p.get(basis))
            }
            TaskInner::Nonlinear { .. } => return None,
        };
        Some(BlockVars::from_packed(
            packed,
            self.latent,
            self.task_dim,
            self.split_input,
        ))
    }

    /// Mean contribution in `mean_u`/`mean_l` and covariance contribution in
    /// `var_u`/`var_l`/`cov_s`, all `[B, d]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, task: &TaskInput<'t>) -> Result<BeliefVars<'t>> {
        let (split, mean_cols) = match task {
            TaskInput::Diag { mean, var } => {
                if mean.cols() != var.cols() {
                    return Err(Error::ShapeMismatch(
                        "task mean/variance widths differ".into(),
                    ));
                }
                (false, mean.cols())
            }
            TaskInput::Split(b) => (true, b.dim()),
        };
        if split != self.split_input || mean_cols != self.task_dim {
            return Err(Error::ShapeMismatch(format!(
                "task transform built for {} task dims (split = {}), got {} (split = {})",
                self.task_dim, self.split_input, mean_cols, split
            )));
        }
        if let Some(m) = self.blocks(p, task) {
            let out = match task {
                TaskInput::Diag { mean, var } => {
                    let (mu, ml) = m.apply(*mean, None);
                    let (vu, vl, s) = m.propagate(*var, None, None);
                    (mu, ml, vu, vl, s)
                }
                TaskInput::Split(b) => {
                    let (mu, ml) = m.apply(b.mean_u, Some(b.mean_l));
                    let (vu, vl, s) = m.propagate(b.var_u, Some(b.var_l), Some(b.cov_s));
                    (mu, ml, vu, vl, s)
                }
            };
            return Ok(BeliefVars {
                mean_u: out.0,
                mean_l: out.1,
                var_u: out.2,
                var_l: out.3,
                cov_s: out.4,
            });
        }
        let TaskInner::Nonlinear { mean, var } = &self.inner else {
            unreachable!("linear kinds return above")
        };
        let tape = p.tape();
        let var_in = match task {
            TaskInput::Diag { var, .. } => *var,
            TaskInput::Split(b) => tape.concat(&[b.var_u, b.var_l, b.cov_s]),
        };
        let m = mean.forward(p, task.mean());
        let v = var.forward(p, var_in);
        let zero = p.fill(v.rows(), self.latent, 0.0);
        let v = v.elu().maximum(tape.concat(&[zero, zero]));
        let d = self.latent;
        Ok(BeliefVars {
            mean_u: m.slice(0, d),
            mean_l: m.slice(d, d),
            var_u: v.slice(0, d),
            var_l: v.slice(d, d),
            cov_s: zero,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::BlockMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_nonlinear_control_is_zero() {
        let mut s = ParamStore::new();
        let c = ControlModel::new(
            &mut s,
            &mut rng(),
            "control",
            ControlKind::Nonlinear,
            2,
            3,
            1,
            &[8],
        )
        .unwrap();
        let n = s.num_scalars();
        s.set_flat(&vec![0.0; n]).unwrap();
        assert_eq!(
            c.control_mean(&s, &[0.5, -1.0], None).unwrap(),
            vec![0.0; 6]
        );
    }

    #[test]
    fn linear_control_with_identity() {
        let mut s = ParamStore::new();
        let c = ControlModel::new(
            &mut s,
            &mut rng(),
            "control",
            ControlKind::Linear,
            2,
            1,
            1,
            &[],
        )
        .unwrap();
        s.set(
            "control.matrix",
            Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(
            c.control_mean(&s, &[1.0, 2.0], None).unwrap(),
            vec![1.0, 2.0]
        );
        assert!(c.control_mean(&s, &[1.0], None).is_err());
    }

    #[test]
    fn locally_linear_control_is_a_weighted_sum() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let (da, d) = (2, 2);
        let c = ControlModel::new(
            &mut s,
            &mut r,
            "control",
            ControlKind::LocallyLinear,
            da,
            d,
            2,
            &[],
        )
        .unwrap();
        let a = [0.7, -0.4];
        let z = [0.1, 0.5, -0.3, 0.2];
        assert!(c.control_mean(&s, &a, None).is_err());
        assert!(c.control_mean(&s, &z, Some(&z)).is_err());
        let got = c.control_mean(&s, &a, Some(&z)).unwrap();

        let w = s.get("control.coeff.w").unwrap();
        let b = s.get("control.coeff.b").unwrap();
        let logits: Vec<f64> = (0..2)
            .map(|k| b.data()[k] + (0..4).map(|i| z[i] * w.get(i, k)).sum::<f64>())
            .collect();
        let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let tot: f64 = e.iter().sum();
        let basis = s.get("control.basis").unwrap();
        for i in 0..2 * d {
            let mut expect = 0.0;
            for k in 0..2 {
                let bk = basis.row_slice(k);
                expect += e[k] / tot * (0..da).map(|j| bk[i * da + j] * a[j]).sum::<f64>();
            }
            assert!((got[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_task_transform_adds_mapped_variance() {
        let mut s = ParamStore::new();
        let t = TaskTransform::new(
            &mut s,
            &mut rng(),
            "task",
            ControlKind::Linear,
            2,
            2,
            false,
            1,
            &[],
        )
        .unwrap();
        // C_u = I, C_l = 0
        s.set(
            "task.matrix",
            Tensor::row(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
        )
        .unwrap();
        let tape = Tape::new();
        let p = s.bind(&tape);
        let task = TaskInput::Diag {
            mean: tape.constant(Tensor::row(&[0.3, -0.7])),
            var: tape.constant(Tensor::row(&[0.25, 4.0])),
        };
        let out = t.forward(&p, &task).unwrap();
        assert_eq!(out.mean_u.value().data(), &[0.3, -0.7]);
        assert_eq!(out.mean_l.value().data(), &[0.0, 0.0]);
        assert_eq!(out.var_u.value().data(), &[0.25, 4.0]);
        assert_eq!(out.var_l.value().data(), &[0.0, 0.0]);
        assert_eq!(out.cov_s.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn split_task_transform_matches_block_propagation() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let (dl, d) = (3, 2);
        let t = TaskTransform::new(
            &mut s,
            &mut r,
            "task",
            ControlKind::Linear,
            dl,
            d,
            true,
            1,
            &[],
        )
        .unwrap();
        let packed = s.get("task.matrix").unwrap().data().to_vec();
        let n = d * dl;
        let m = BlockMatrix::new(
            d,
            dl,
            packed[..n].to_vec(),
            packed[n..2 * n].to_vec(),
            packed[2 * n..3 * n].to_vec(),
            packed[3 * n..].to_vec(),
        )
        .unwrap();
        let mu = [0.1, 0.2, 0.3];
        let ml = [-0.4, 0.5, 0.0];
        let (vu, vl, cs) = ([0.5, 0.6, 0.7], [0.9, 1.0, 1.1], [0.1, -0.2, 0.3]);
        let tape = Tape::new();
        let p = s.bind(&tape);
        let c = |x: &[f64]| tape.constant(Tensor::row(x));
        let task = TaskInput::Split(BeliefVars {
            mean_u: c(&mu),
            mean_l: c(&ml),
            var_u: c(&vu),
            var_l: c(&vl),
            cov_s: c(&cs),
        });
        let out = t.forward(&p, &task).unwrap();
        let (eu, el) = m.apply(&mu, &ml);
        let cov = m.propagate(&vu, &vl, &cs);
        for i in 0..d {
            assert!((out.mean_u.value().data()[i] - eu[i]).abs() < 1e-14);
            assert!((out.mean_l.value().data()[i] - el[i]).abs() < 1e-14);
            assert!((out.var_u.value().data()[i] - cov.var_u[i]).abs() < 1e-14);
            assert!((out.var_l.value().data()[i] - cov.var_l[i]).abs() < 1e-14);
            assert!((out.cov_s.value().data()[i] - cov.cov_s[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn nonlinear_task_variance_is_nonnegative() {
        let mut r = rng();
        let mut s = ParamStore::new();
        let t = TaskTransform::new(
            &mut s,
            &mut r,
            "task",
            ControlKind::Nonlinear,
            2,
            3,
            false,
            1,
            &[4],
        )
        .unwrap();
        let tape = Tape::new();
        let p = s.bind(&tape);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..2).map(|_| r.gen_range(-5.0..5.0)).collect())
            .collect();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let out = t
            .forward(
                &p,
                &TaskInput::Diag {
                    mean: x,
                    var: x.square(),
                },
            )
            .unwrap();
        assert!(out.var_u.value().data().iter().all(|&v| v >= 0.0));
        assert!(out.var_l.value().data().iter().all(|&v| v >= 0.0));
        assert!(out.cov_s.value().data().iter().all(|&v| v == 0.0));

        let wrong = TaskInput::Diag {
            mean: tape.constant(Tensor::row(&[1.0])),
            var: tape.constant(Tensor::row(&[1.0])),
        };
        assert!(t.forward(&p, &wrong).is_err());
    }
}
