//! Differentiable versions of the closed-form Gaussian operations.
//!
//! These mirror [`crate::gaussian`] formula for formula, but act on batched
//! tape variables so the cells can be trained by backpropagation.

use crate::autodiff::Var;
use crate::gaussian::{MAX_CORRELATION, MIN_VARIANCE};
use crate::nets::{BeliefVars, BlockVars};

/// Element-wise sum over a fixed left-to-right pairwise tree.
pub fn pairwise_sum<'t>(terms: &[Var<'t>]) -> Option<Var<'t>> {
    match terms.len() {
        0 => None,
        1 => Some(terms[0]),
        n => {
            let (a, b) = terms.split_at(n / 2);
            Some(pairwise_sum(a)? + pairwise_sum(b)?)
        }
    }
}

/// Clamps variances from below and shrinks the side covariance.
pub fn enforce_positivity<'t>(b: BeliefVars<'t>) -> BeliefVars<'t> {
    let tape = b.var_u.tape();
    let floor = tape.constant(crate::autodiff::Tensor::full(&[1, b.dim()], MIN_VARIANCE));
    let var_u = b.var_u.maximum(floor);
    let var_l = b.var_l.maximum(floor);
    let bound = (var_u * var_l).sqrt().scale(MAX_CORRELATION);
    let cov_s = b.cov_s.maximum(-bound).minimum(bound);
    BeliefVars {
        var_u,
        var_l,
        cov_s,
        ..b
    }
}

/// Extra additive terms for a prediction step.
#[derive(Clone, Copy, Debug, Default)]
pub struct PredictTerms<'t> {
    /// `[B, 2d]` added to the mean.
    pub control: Option<Var<'t>>,
    /// Mean and covariance contributions of a latent task.
    pub task: Option<BeliefVars<'t>>,
    /// Diagonal transition noise `(upper, lower)`.
    pub noise: Option<(Var<'t>, Var<'t>)>,
}

/// `N(M μ + terms, M Σ Mᵀ + terms)`, truncated to the factorized form and
/// passed through the positivity guard.
pub fn predict<'t>(
    post: &BeliefVars<'t>,
    m: &BlockVars<'t>,
    terms: PredictTerms<'t>,
) -> BeliefVars<'t> {
    let d = m.rows;
    let (mut mean_u, mut mean_l) = m.apply(post.mean_u, Some(post.mean_l));
    let (mut var_u, mut var_l, mut cov_s) =
        m.propagate(post.var_u, Some(post.var_l), Some(post.cov_s));
    if let Some(c) = terms.control {
        mean_u = mean_u + c.slice(0, d);
        mean_l = mean_l + c.slice(d, d);
    }
    if let Some(t) = terms.task {
        mean_u = mean_u + t.mean_u;
        mean_l = mean_l + t.mean_l;
        var_u = var_u + t.var_u;
        var_l = var_l + t.var_l;
        cov_s = cov_s + t.cov_s;
    }
    if let Some((nu, nl)) = terms.noise {
        var_u = var_u + nu;
        var_l = var_l + nl;
    }
    enforce_positivity(BeliefVars {
        mean_u,
        mean_l,
        var_u,
        var_l,
        cov_s,
    })
}

/// Factorized Kalman update with observation `w` of the upper half.
pub fn kalman_update<'t>(prior: &BeliefVars<'t>, w: Var<'t>, obs_var: Var<'t>) -> BeliefVars<'t> {
    let denom = prior.var_u + obs_var;
    let gain_u = prior.var_u / denom;
    let gain_l = prior.cov_s / denom;
    let innov = w - prior.mean_u;
    BeliefVars {
        mean_u: prior.mean_u + gain_u * innov,
        mean_l: prior.mean_l + gain_l * innov,
        var_u: prior.var_u * obs_var / denom,
        var_l: prior.var_l - prior.cov_s.square() / denom,
        cov_s: prior.cov_s * obs_var / denom,
    }
}

/// Kalman update for rows where `observed` is set; other rows keep the prior.
pub fn observe<'t>(
    prior: &BeliefVars<'t>,
    w: Var<'t>,
    obs_var: Var<'t>,
    observed: &[bool],
) -> BeliefVars<'t> {
    if observed.iter().all(|&o| !o) {
        return *prior;
    }
    let post = kalman_update(prior, w, obs_var);
    if observed.iter().all(|&o| o) {
        post
    } else {
        post.select(observed, prior)
    }
}

fn invert<'t>(a: Var<'t>, b: Var<'t>, s: Var<'t>) -> (Var<'t>, Var<'t>, Var<'t>) {
    let det = a * b - s.square();
    (b / det, a / det, -s / det)
}

/// One element of an observation set: value, variance and a 0/1 weight
/// (`[B, d]` each) that switches the element off for masked rows.
#[derive(Clone, Copy, Debug)]
pub struct SetElement<'t> {
    pub value: Var<'t>,
    pub var: Var<'t>,
    pub weight: Option<Var<'t>>,
}

/// Conditions a factorized belief on a set of upper-half observations in
/// precision form.
pub fn condition_set<'t>(prior: &BeliefVars<'t>, obs: &[SetElement<'t>]) -> BeliefVars<'t> {
    if obs.is_empty() {
        return *prior;
    }
    let precisions: Vec<Var<'t>> = obs
        .iter()
        .map(|o| match o.weight {
            Some(w) => w / o.var,
            None => o.var.recip(),
        })
        .collect();
    let residuals: Vec<Var<'t>> = obs
        .iter()
        .zip(&precisions)
        .map(|(o, p)| (o.value - prior.mean_u) * *p)
        .collect();
    let (lam_u, lam_l, lam_s) = invert(prior.var_u, prior.var_l, prior.cov_s);
    let lam_u = lam_u + pairwise_sum(&precisions).expect("non-empty");
    let (var_u, var_l, cov_s) = invert(lam_u, lam_l, lam_s);
    let resid = pairwise_sum(&residuals).expect("non-empty");
    BeliefVars {
        mean_u: prior.mean_u + var_u * resid,
        mean_l: prior.mean_l + cov_s * resid,
        var_u,
        var_l,
        cov_s,
    }
}

/// Bayesian aggregation of a set into a diagonal Gaussian prior.
/// Returns `(mean, var)`.
pub fn aggregate<'t>(
    prior_mean: Var<'t>,
    prior_var: Var<'t>,
    obs: &[SetElement<'t>],
) -> (Var<'t>, Var<'t>) {
    if obs.is_empty() {
        return (prior_mean, prior_var);
    }
    let precisions: Vec<Var<'t>> = obs
        .iter()
        .map(|o| match o.weight {
            Some(w) => w / o.var,
            None => o.var.recip(),
        })
        .collect();
    let residuals: Vec<Var<'t>> = obs
        .iter()
        .zip(&precisions)
        .map(|(o, p)| (o.value - prior_mean) * *p)
        .collect();
    let var = (prior_var.recip() + pairwise_sum(&precisions).expect("non-empty")).recip();
    let mean = prior_mean + var * pairwise_sum(&residuals).expect("non-empty");
    (mean, var)
}
