//! Dense reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rssm::autodiff::Tensor;
use rssm::cells::{Model, SequenceBatch};
use rssm::gaussian::{CovTriple, FactorizedBelief};

/// Raw arrays behind a [`SequenceBatch`].
pub struct RawBatch {
    pub obs: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<Vec<f64>>>,
    pub observed: Vec<Vec<bool>>,
}

impl RawBatch {
    pub fn random(
        rng: &mut ChaCha8Rng,
        rows: usize,
        len: usize,
        obs_dim: usize,
        action_dim: usize,
        missing: f64,
    ) -> Self {
        let obs = (0..rows)
            .map(|_| {
                (0..len)
                    .map(|_| (0..obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let actions = (0..rows)
            .map(|_| {
                (0..len)
                    .map(|_| (0..action_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let observed = (0..rows)
            .map(|_| (0..len).map(|_| !rng.gen_bool(missing)).collect())
            .collect();
        RawBatch {
            obs,
            actions,
            observed,
        }
    }

    pub fn batch(&self) -> SequenceBatch {
        SequenceBatch::new(&self.obs, &self.actions, &self.observed).unwrap()
    }
}

/// `[[b0, b1], [b2, b3]]` (four blocks) or `[b0; b1]` (two blocks) from a
/// packed row of consecutive row-major `out x inp` blocks.
pub fn blocks_to_dense(packed: &[f64], out: usize, inp: usize, four: bool) -> DMatrix<f64> {
    let n = out * inp;
    let block = |k: usize| DMatrix::from_row_slice(out, inp, &packed[k * n..(k + 1) * n]);
    if four {
        let mut m = DMatrix::zeros(2 * out, 2 * inp);
        m.view_mut((0, 0), (out, inp)).copy_from(&block(0));
        m.view_mut((0, inp), (out, inp)).copy_from(&block(1));
        m.view_mut((out, 0), (out, inp)).copy_from(&block(2));
        m.view_mut((out, inp), (out, inp)).copy_from(&block(3));
        m
    } else {
        let mut m = DMatrix::zeros(2 * out, inp);
        m.view_mut((0, 0), (out, inp)).copy_from(&block(0));
        m.view_mut((out, 0), (out, inp)).copy_from(&block(1));
        m
    }
}

pub fn param(model: &Model, name: &str) -> Tensor {
    model
        .params
        .get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .clone()
}

/// Diagonal noise covariance `elu(raw) + 1` stored under `{prefix}.upper/lower`.
pub fn noise_cov(model: &Model, prefix: &str) -> DMatrix<f64> {
    let act = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
    let mut v: Vec<f64> = param(model, &format!("{prefix}.upper"))
        .data()
        .iter()
        .map(|&x| act(x))
        .collect();
    v.extend(
        param(model, &format!("{prefix}.lower"))
            .data()
            .iter()
            .map(|&x| act(x)),
    );
    DMatrix::from_diagonal(&DVector::from_vec(v))
}

/// Keeps only the diagonals of the four `d x d` blocks.
pub fn truncate(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d = cov.nrows() / 2;
    let mut out = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        out[(i, i)] = cov[(i, i)];
        out[(d + i, d + i)] = cov[(d + i, d + i)];
        out[(i, d + i)] = cov[(i, d + i)];
        out[(d + i, i)] = cov[(d + i, i)];
    }
    out
}

/// Exact Kalman update with observation matrix `[I 0]`.
pub fn dense_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    w: &[f64],
    r: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let d = w.len();
    let mut h = DMatrix::zeros(d, 2 * d);
    for i in 0..d {
        h[(i, i)] = 1.0;
    }
    let s = &h * cov * h.transpose() + DMatrix::from_diagonal(&DVector::from_row_slice(r));
    let k = cov * h.transpose() * s.try_inverse().unwrap();
    let innov = DVector::from_row_slice(w) - &h * mean;
    (mean + &k * innov, cov - &k * &h * cov)
}

/// Exact update of a Gaussian over `[u; l]` with several noisy looks at `u`,
/// in information form.
pub fn dense_set_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    obs: &[(Vec<f64>, Vec<f64>)],
) -> (DVector<f64>, DMatrix<f64>) {
    let n = mean.len();
    let d = n / 2;
    let mut prec = cov.clone().try_inverse().unwrap();
    let mut eta = &prec * mean;
    for (w, r) in obs {
        for i in 0..d {
            prec[(i, i)] += 1.0 / r[i];
            eta[i] += w[i] / r[i];
        }
    }
    let cov = prec.try_inverse().unwrap();
    let mean = &cov * eta;
    (mean, cov)
}

pub fn assert_dense(
    b: &FactorizedBelief,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    tol: f64,
    what: &str,
) {
    let dm = (b.dense_mean() - mean).amax();
    let dc = (b.dense_covariance() - truncate(cov)).amax();
    assert!(
        dm <= tol && dc <= tol,
        "{what}: mean err {dm:e}, cov err {dc:e}"
    );
}

pub fn row_of(t: &Tensor, r: usize) -> Vec<f64> {
    t.row_slice(r).to_vec()
}

pub fn triple_dense(c: &CovTriple) -> DMatrix<f64> {
    c.to_dense()
}

/// Largest absolute difference between two equally shaped tensors.
pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Decoded predictions `(mean, var)` per step, with the fast prior at every
/// window start pinned to `starts[k]` when given. Pinning reproduces the
/// function whose gradient the window-boundary cut computes.
pub fn pinned_predictions(
    model: &Model,
    batch: &SequenceBatch,
    starts: Option<&[Vec<FactorizedBelief>]>,
) -> Vec<(Tensor, Tensor)> {
    use rssm::autodiff::Tape;
    use rssm::cells::{CarryState, TaskCarry};
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let Some(starts) = starts else {
        let out = model.forward(&p, batch, None).unwrap();
        return (0..batch.len())
            .map(|t| (out.pred_mean[t].to_tensor(), out.pred_var[t].to_tensor()))
            .collect();
    };
    let h = model.spec.window;
    let mut task = TaskCarry::Mts3(vec![
        FactorizedBelief::isotropic(model.spec.task_dim, 1.0);
        batch.rows()
    ]);
    let mut preds = Vec::new();
    for (k, start) in starts.iter().enumerate() {
        let part = batch.slice(k * h, ((k + 1) * h).min(batch.len()));
        let carry = CarryState {
            prior: start.clone(),
            task,
        };
        let out = model.forward(&p, &part, Some(&carry)).unwrap();
        preds.extend(
            (0..part.len()).map(|t| (out.pred_mean[t].to_tensor(), out.pred_var[t].to_tensor())),
        );
        task = out.carry().task;
    }
    preds
}

/// Mean Gaussian negative log-likelihood of every step after the first.
pub fn nll_value(preds: &[(Tensor, Tensor)], batch: &SequenceBatch) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, (m, v)) in preds.iter().enumerate().skip(1) {
        let o = batch.obs_at(t);
        for i in 0..o.len() {
            let (mu, var) = (m.data()[i], v.data()[i]);
            total += 0.5 * (var.ln() + (o.data()[i] - mu).powi(2) / var);
        }
        count += o.len();
    }
    total / count as f64
}
