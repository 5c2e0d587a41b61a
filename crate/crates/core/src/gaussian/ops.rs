use nalgebra::{DMatrix, DVector};

use super::{
    check_len, check_positive, BlockMatrix, CovTriple, DiagGaussian, FactorizedBelief,
    FactorizedPrecision, KalmanStepTrace, LatentObservation,
};
use crate::error::{Error, Result};

/// Variance floor applied after every prediction.
pub const MIN_VARIANCE: f64 = 1e-8;
/// Largest allowed |cov_s| as a fraction of `sqrt(var_u * var_l)`.
pub const MAX_CORRELATION: f64 = 0.99;

/// Element-wise sum of equally long vectors using a fixed pairwise tree:
/// the list is split at `len / 2` recursively and the halves are added.
/// The result depends only on the order of `terms`.
pub fn pairwise_sum(terms: &[Vec<f64>], dim: usize) -> Vec<f64> {
    match terms.len() {
        0 => vec![0.0; dim],
        1 => terms[0].clone(),
        n => {
            let (a, b) = terms.split_at(n / 2);
            let left = pairwise_sum(a, dim);
            let right = pairwise_sum(b, dim);
            left.iter().zip(&right).map(|(x, y)| x + y).collect()
        }
    }
}

/// Inverts every 2x2 block `[[a, s], [s, b]]`. The map is its own inverse.
pub(super) fn invert_blocks(
    a: &[f64],
    b: &[f64],
    s: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = a.len();
    check_len(d, b.len())?;
    check_len(d, s.len())?;
    let (mut ia, mut ib, mut is) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for i in 0..d {
        let det = a[i] * b[i] - s[i] * s[i];
        if !(det > 0.0) || !(a[i] > 0.0) {
            return Err(Error::NonPositiveDefinite { index: i, det });
        }
        ia[i] = b[i] / det;
        ib[i] = a[i] / det;
        is[i] = -s[i] / det;
    }
    Ok((ia, ib, is))
}

/// Covariance triple to precision triple using only scalar operations.
pub fn factorized_invert(cov: &CovTriple) -> Result<FactorizedPrecision> {
    let (lam_u, lam_l, lam_s) = invert_blocks(&cov.var_u, &cov.var_l, &cov.cov_s)?;
    Ok(FactorizedPrecision {
        lam_u,
        lam_l,
        lam_s,
    })
}

/// Posterior of a diagonal Gaussian after a set of direct, independent
/// observations of it.
///
/// `var = (prior.var^-1 + Σ obs.var^-1)^-1` and
/// `mean = prior.mean + var ⊙ Σ (r - prior.mean) / obs.var`.
pub fn bayesian_aggregate(prior: &DiagGaussian, obs: &[LatentObservation]) -> Result<DiagGaussian> {
    let d = prior.dim();
    for o in obs {
        check_len(d, o.dim())?;
        check_positive(&o.var)?;
    }
    let precisions: Vec<Vec<f64>> = obs
        .iter()
        .map(|o| o.var.iter().map(|v| 1.0 / v).collect())
        .collect();
    let residuals: Vec<Vec<f64>> = obs
        .iter()
        .map(|o| {
            (0..d)
                .map(|i| (o.value[i] - prior.mean[i]) / o.var[i])
                .collect()
        })
        .collect();
    let prec_sum = pairwise_sum(&precisions, d);
    let resid_sum = pairwise_sum(&residuals, d);
    let var: Vec<f64> = (0..d)
        .map(|i| 1.0 / (1.0 / prior.var[i] + prec_sum[i]))
        .collect();
    let mean = (0..d)
        .map(|i| prior.mean[i] + var[i] * resid_sum[i])
        .collect();
    Ok(DiagGaussian { mean, var })
}

/// Conditions a factorized belief on a set of observations of its upper
/// half (`H = [I, 0]`), all at once and independent of their order.
///
/// Only the upper precision changes: `lam_u += Σ 1 / ν`. The mean moves by
/// the posterior `[var_u; cov_s]` times the summed precision-weighted
/// residuals.
pub fn gaussian_condition_set(
    prior: &FactorizedBelief,
    obs: &[LatentObservation],
) -> Result<FactorizedBelief> {
    let d = prior.dim();
    for o in obs {
        check_len(d, o.dim())?;
        check_positive(&o.var)?;
    }
    if obs.is_empty() {
        return Ok(prior.clone());
    }
    let mut prec = factorized_invert(&prior.cov)?;
    let precisions: Vec<Vec<f64>> = obs
        .iter()
        .map(|o| o.var.iter().map(|v| 1.0 / v).collect())
        .collect();
    let residuals: Vec<Vec<f64>> = obs
        .iter()
        .map(|o| {
            (0..d)
                .map(|i| (o.value[i] - prior.mean_u[i]) / o.var[i])
                .collect()
        })
        .collect();
    let prec_sum = pairwise_sum(&precisions, d);
    let resid_sum = pairwise_sum(&residuals, d);
    for (lam, p) in prec.lam_u.iter_mut().zip(&prec_sum) {
        *lam += p;
    }
    let cov = prec.to_covariance()?;
    let mean_u = (0..d)
        .map(|i| prior.mean_u[i] + cov.var_u[i] * resid_sum[i])
        .collect();
    let mean_l = (0..d)
        .map(|i| prior.mean_l[i] + cov.cov_s[i] * resid_sum[i])
        .collect();
    Ok(FactorizedBelief {
        mean_u,
        mean_l,
        cov,
    })
}

/// Kalman observation update for `H = [I, 0]` with factorized covariance.
pub fn factorized_kalman_update(
    prior: &FactorizedBelief,
    obs: &LatentObservation,
) -> Result<(FactorizedBelief, KalmanStepTrace)> {
    let d = prior.dim();
    check_len(d, obs.dim())?;
    check_positive(&obs.var)?;
    let c = &prior.cov;
    let mut post = prior.clone();
    let mut trace = KalmanStepTrace {
        gain_u: vec![0.0; d],
        gain_l: vec![0.0; d],
        innovation: vec![0.0; d],
    };
    for i in 0..d {
        let denom = c.var_u[i] + obs.var[i];
        let q_u = c.var_u[i] / denom;
        let q_l = c.cov_s[i] / denom;
        let innov = obs.value[i] - prior.mean_u[i];
        post.mean_u[i] = prior.mean_u[i] + q_u * innov;
        post.mean_l[i] = prior.mean_l[i] + q_l * innov;
        post.cov.var_u[i] = c.var_u[i] * obs.var[i] / denom;
        post.cov.cov_s[i] = c.cov_s[i] * obs.var[i] / denom;
        post.cov.var_l[i] = c.var_l[i] - c.cov_s[i] * c.cov_s[i] / denom;
        trace.gain_u[i] = q_u;
        trace.gain_l[i] = q_l;
        trace.innovation[i] = innov;
    }
    Ok((post, trace))
}

/// Clamps variances to at least [`MIN_VARIANCE`] and shrinks the side
/// covariance to at most [`MAX_CORRELATION`] of its Cauchy-Schwarz bound.
/// Fails only when the triple holds non-finite values.
pub fn enforce_positivity(cov: &CovTriple) -> Result<CovTriple> {
    let mut out = cov.clone();
    for i in 0..out.dim() {
        if !(out.var_u[i].is_finite() && out.var_l[i].is_finite() && out.cov_s[i].is_finite()) {
            return Err(Error::NonPositiveDefinite {
                index: i,
                det: f64::NAN,
            });
        }
        out.var_u[i] = out.var_u[i].max(MIN_VARIANCE);
        out.var_l[i] = out.var_l[i].max(MIN_VARIANCE);
        let bound = MAX_CORRELATION * (out.var_u[i] * out.var_l[i]).sqrt();
        out.cov_s[i] = out.cov_s[i].clamp(-bound, bound);
    }
    for i in 0..out.dim() {
        let det = out.det(i);
        if !det.is_finite() || det <= 0.0 || !out.cov_s[i].is_finite() {
            return Err(Error::NonPositiveDefinite { index: i, det });
        }
    }
    Ok(out)
}

/// Prediction step: `mean = M mean + control`, covariance `M Σ Mᵀ` truncated
/// to its block diagonals, plus every extra term and the transition noise.
///
/// `control_mean` may be empty (no control); otherwise it has length `2d`
/// laid out as `[upper; lower]`.
pub fn factorized_predict(
    post: &FactorizedBelief,
    transition: &BlockMatrix,
    control_mean: &[f64],
    extra_cov: &[CovTriple],
    noise: &CovTriple,
) -> Result<FactorizedBelief> {
    let d = post.dim();
    check_len(d, transition.rows())?;
    check_len(d, transition.cols())?;
    check_len(d, noise.dim())?;
    if !control_mean.is_empty() {
        check_len(2 * d, control_mean.len())?;
    }
    let (mut mean_u, mut mean_l) = transition.apply(&post.mean_u, &post.mean_l);
    if !control_mean.is_empty() {
        for i in 0..d {
            mean_u[i] += control_mean[i];
            mean_l[i] += control_mean[d + i];
        }
    }
    let c = &post.cov;
    let mut cov = transition.propagate(&c.var_u, &c.var_l, &c.cov_s);
    for term in extra_cov {
        cov = cov.plus(term)?;
    }
    cov = cov.plus(noise)?;
    let cov = enforce_positivity(&cov)?;
    Ok(FactorizedBelief {
        mean_u,
        mean_l,
        cov,
    })
}

/// Full-covariance Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// One summand `A u` of a linear-Gaussian common-effect model.
#[derive(Clone, Debug)]
pub struct LinearTerm {
    pub matrix: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LinearTerm {
    pub fn new(matrix: DMatrix<f64>, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        LinearTerm { matrix, mean, cov }
    }

    pub fn diagonal(matrix: DMatrix<f64>, u: &DiagGaussian) -> Self {
        LinearTerm {
            matrix,
            mean: DVector::from_column_slice(&u.mean),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(&u.var)),
        }
    }
}

/// Marginal of `y = Σ A_i u_i + ε` for independent Gaussian `u_i` and
/// `ε ~ N(0, noise_cov)`: mean `Σ A_i μ_i`, covariance
/// `noise_cov + Σ A_i Σ_i A_iᵀ`.
pub fn gaussian_marginalize_linear(
    terms: &[LinearTerm],
    noise_cov: &DMatrix<f64>,
) -> Result<DenseGaussian> {
    let n = noise_cov.nrows();
    check_len(n, noise_cov.ncols())?;
    let mut mean = DVector::zeros(n);
    let mut cov = noise_cov.clone();
    for t in terms {
        check_len(n, t.matrix.nrows())?;
        check_len(t.matrix.ncols(), t.mean.len())?;
        check_len(t.mean.len(), t.cov.nrows())?;
        check_len(t.mean.len(), t.cov.ncols())?;
        mean += &t.matrix * &t.mean;
        cov += &t.matrix * &t.cov * t.matrix.transpose();
    }
    Ok(DenseGaussian { mean, cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::BlockMatrix;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_triple(rng: &mut ChaCha8Rng, d: usize) -> CovTriple {
        let var_u: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..3.0)).collect();
        let var_l: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..3.0)).collect();
        let cov_s = (0..d)
            .map(|i| rng.gen_range(-0.95..0.95) * (var_u[i] * var_l[i]).sqrt())
            .collect();
        CovTriple::new(var_u, var_l, cov_s).unwrap()
    }

    fn random_belief(rng: &mut ChaCha8Rng, d: usize) -> FactorizedBelief {
        let mean_u = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mean_l = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        FactorizedBelief::new(mean_u, mean_l, random_triple(rng, d)).unwrap()
    }

    fn random_obs(rng: &mut ChaCha8Rng, d: usize) -> LatentObservation {
        LatentObservation::new(
            (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            (0..d).map(|_| rng.gen_range(0.05..2.0)).collect(),
        )
        .unwrap()
    }

    /// Dense Gaussian conditioning on `w_n = H z + noise_n`, `H = [I, 0]`,
    /// via the information form.
    fn dense_condition(
        prior: &FactorizedBelief,
        obs: &[LatentObservation],
    ) -> (DVector<f64>, DMatrix<f64>) {
        let d = prior.dim();
        let sigma = prior.dense_covariance();
        let mu = prior.dense_mean();
        let mut lam = sigma.clone().try_inverse().unwrap();
        let mut eta = &lam * &mu;
        for o in obs {
            for i in 0..d {
                lam[(i, i)] += 1.0 / o.var[i];
                eta[i] += o.value[i] / o.var[i];
            }
        }
        let cov = lam.try_inverse().unwrap();
        let mean = &cov * eta;
        (mean, cov)
    }

    fn assert_belief_matches(
        b: &FactorizedBelief,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        tol: f64,
    ) {
        let d = b.dim();
        for i in 0..2 * d {
            assert!((b.mean()[i] - mean[i]).abs() < tol, "mean {i}");
        }
        let t = CovTriple::truncate_dense(cov);
        for i in 0..d {
            assert!((b.cov.var_u[i] - t.var_u[i]).abs() < tol);
            assert!((b.cov.var_l[i] - t.var_l[i]).abs() < tol);
            assert!((b.cov.cov_s[i] - t.cov_s[i]).abs() < tol);
        }
    }

    #[test]
    fn invert_examples() {
        let p =
            factorized_invert(&CovTriple::new(vec![2.0], vec![2.0], vec![0.0]).unwrap()).unwrap();
        assert_eq!((p.lam_u[0], p.lam_l[0], p.lam_s[0]), (0.5, 0.5, 0.0));

        // dense inverse of [[2, 1], [1, 1]] is [[1, -1], [-1, 2]]
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0])
            .try_inverse()
            .unwrap();
        let p =
            factorized_invert(&CovTriple::new(vec![2.0], vec![1.0], vec![1.0]).unwrap()).unwrap();
        assert!((p.lam_u[0] - m[(0, 0)]).abs() < 1e-15);
        assert!((p.lam_s[0] - m[(0, 1)]).abs() < 1e-15);
        assert!((p.lam_l[0] - m[(1, 1)]).abs() < 1e-15);
        assert_eq!((p.lam_u[0], p.lam_s[0], p.lam_l[0]), (1.0, -1.0, 2.0));

        let p = factorized_invert(&CovTriple::isotropic(1, 1.0)).unwrap();
        assert_eq!((p.lam_u[0], p.lam_l[0], p.lam_s[0]), (1.0, 1.0, 0.0));
    }

    #[test]
    fn invert_rejects_indefinite_block() {
        let bad = CovTriple {
            var_u: vec![1.0, 1.0],
            var_l: vec![1.0, 1.0],
            cov_s: vec![0.0, 1.5],
        };
        assert!(matches!(
            factorized_invert(&bad),
            Err(Error::NonPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn invert_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let t = random_triple(&mut rng, 5);
            let back = factorized_invert(&t).unwrap().to_covariance().unwrap();
            for (a, b) in t
                .var_u
                .iter()
                .zip(&back.var_u)
                .chain(t.var_l.iter().zip(&back.var_l))
                .chain(t.cov_s.iter().zip(&back.cov_s))
            {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn aggregate_examples() {
        let prior = DiagGaussian::standard(1);
        assert_eq!(bayesian_aggregate(&prior, &[]).unwrap(), prior);

        let one = LatentObservation::new(vec![1.0], vec![1.0]).unwrap();
        let post = bayesian_aggregate(&prior, std::slice::from_ref(&one)).unwrap();
        assert_eq!((post.mean[0], post.var[0]), (0.5, 0.5));

        let three = LatentObservation::new(vec![3.0], vec![1.0]).unwrap();
        let batch = bayesian_aggregate(&prior, &[one.clone(), three.clone()]).unwrap();
        let seq =
            bayesian_aggregate(&bayesian_aggregate(&prior, &[one]).unwrap(), &[three]).unwrap();
        assert!((batch.mean[0] - seq.mean[0]).abs() < 1e-15);
        assert!((batch.var[0] - seq.var[0]).abs() < 1e-15);
    }

    #[test]
    fn aggregate_rejects_dim_mismatch() {
        let prior = DiagGaussian::standard(2);
        let o = LatentObservation::new(vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(
            bayesian_aggregate(&prior, &[o]),
            Err(Error::DimMismatch {
                expected: 2,
                got: 1
            })
        ));
    }

    #[test]
    fn kalman_update_examples() {
        let prior = FactorizedBelief::isotropic(1, 1.0);
        let obs = LatentObservation::new(vec![1.0], vec![1.0]).unwrap();
        let (post, trace) = factorized_kalman_update(&prior, &obs).unwrap();
        assert_eq!(post.mean_u[0], 0.5);
        assert_eq!(post.mean_l[0], 0.0);
        assert_eq!(post.cov.var_u[0], 0.5);
        assert_eq!(post.cov.cov_s[0], 0.0);
        assert_eq!(post.cov.var_l[0], 1.0);
        assert_eq!(trace.gain_u[0], 0.5);
        assert_eq!(trace.innovation[0], 1.0);

        let exact = LatentObservation::new(vec![1.0], vec![1e-12]).unwrap();
        let (post, _) = factorized_kalman_update(&prior, &exact).unwrap();
        assert!((post.mean_u[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kalman_update_rejects_nonpositive_obs_variance() {
        let prior = FactorizedBelief::isotropic(2, 1.0);
        let obs = LatentObservation {
            value: vec![0.0, 0.0],
            var: vec![1.0, 0.0],
        };
        assert!(matches!(
            factorized_kalman_update(&prior, &obs),
            Err(Error::NonPositiveVariance { index: 1, .. })
        ));
    }

    #[test]
    fn kalman_update_matches_dense_kalman() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let prior = random_belief(&mut rng, 3);
            let obs = random_obs(&mut rng, 3);
            let (post, _) = factorized_kalman_update(&prior, &obs).unwrap();
            // textbook form: K = Σ Hᵀ (H Σ Hᵀ + R)^-1
            let d = 3;
            let sigma = prior.dense_covariance();
            let mut h = DMatrix::zeros(d, 2 * d);
            for i in 0..d {
                h[(i, i)] = 1.0;
            }
            let r = DMatrix::from_diagonal(&DVector::from_vec(obs.var.clone()));
            let s = &h * &sigma * h.transpose() + r;
            let k = &sigma * h.transpose() * s.try_inverse().unwrap();
            let innov = DVector::from_vec(obs.value.clone()) - &h * prior.dense_mean();
            let mean = prior.dense_mean() + &k * innov;
            let cov = (DMatrix::identity(2 * d, 2 * d) - &k * &h) * &sigma;
            assert_belief_matches(&post, &mean, &cov, 1e-10);
            // the dense posterior keeps the factorized structure exactly
            let t = CovTriple::truncate_dense(&cov);
            assert!((t.to_dense() - &cov).abs().max() < 1e-10);
        }
    }

    #[test]
    fn condition_set_single_obs_equals_kalman_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let prior = random_belief(&mut rng, 4);
            let obs = random_obs(&mut rng, 4);
            let a = gaussian_condition_set(&prior, std::slice::from_ref(&obs)).unwrap();
            let (b, _) = factorized_kalman_update(&prior, &obs).unwrap();
            for (x, y) in a.mean().iter().zip(b.mean()) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in [
                (&a.cov.var_u, &b.cov.var_u),
                (&a.cov.var_l, &b.cov.var_l),
                (&a.cov.cov_s, &b.cov.cov_s),
            ] {
                for (p, q) in x.iter().zip(y) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn condition_set_uninformative_and_incremental() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prior = random_belief(&mut rng, 3);
        let vague = LatentObservation::new(vec![5.0; 3], vec![1e12; 3]).unwrap();
        let post = gaussian_condition_set(&prior, &[vague]).unwrap();
        for (a, b) in post.mean().iter().zip(prior.mean()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((post.cov.var_u[0] - prior.cov.var_u[0]).abs() < 1e-9);

        let obs: Vec<_> = (0..5).map(|_| random_obs(&mut rng, 3)).collect();
        let batch = gaussian_condition_set(&prior, &obs).unwrap();
        let mut inc = prior.clone();
        for o in &obs {
            inc = factorized_kalman_update(&inc, o).unwrap().0;
        }
        for (a, b) in batch.mean().iter().zip(inc.mean()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in batch.cov.var_l.iter().zip(&inc.cov.var_l) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn condition_set_matches_dense_bayes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let d = rng.gen_range(1..=8);
            let prior = random_belief(&mut rng, d);
            let n = rng.gen_range(0..6);
            let obs: Vec<_> = (0..n).map(|_| random_obs(&mut rng, d)).collect();
            let post = gaussian_condition_set(&prior, &obs).unwrap();
            let (mean, cov) = dense_condition(&prior, &obs);
            assert_belief_matches(&post, &mean, &cov, 1e-9);
            for i in 0..d {
                assert!(post.cov.var_u[i] <= prior.cov.var_u[i] + 1e-15);
            }
        }
    }

    #[test]
    fn set_updates_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prior = random_belief(&mut rng, 4);
        let mut obs: Vec<_> = (0..7).map(|_| random_obs(&mut rng, 4)).collect();
        let a = gaussian_condition_set(&prior, &obs).unwrap();
        let a2 = gaussian_condition_set(&prior, &obs).unwrap();
        assert_eq!(a, a2);
        obs.reverse();
        obs.swap(1, 4);
        let b = gaussian_condition_set(&prior, &obs).unwrap();
        for (x, y) in a.mean().iter().zip(b.mean()) {
            assert!((x - y).abs() < 1e-9);
        }

        let dp = DiagGaussian::standard(4);
        let a = bayesian_aggregate(&dp, &obs).unwrap();
        obs.rotate_left(3);
        let b = bayesian_aggregate(&dp, &obs).unwrap();
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn marginalize_examples() {
        let u = DiagGaussian::new(vec![0.3, -1.0], vec![1.0, 1.0]).unwrap();
        let noise = DMatrix::from_diagonal_element(2, 2, 0.5);
        let out = gaussian_marginalize_linear(
            &[LinearTerm::diagonal(DMatrix::identity(2, 2), &u)],
            &noise,
        )
        .unwrap();
        assert_eq!(out.mean.as_slice(), &[0.3, -1.0]);
        assert_eq!(out.cov, DMatrix::from_diagonal_element(2, 2, 1.5));

        let u = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        let out = gaussian_marginalize_linear(
            &[LinearTerm::diagonal(DMatrix::from_element(1, 1, 2.0), &u)],
            &DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap();
        assert_eq!(out.mean[0], 2.0);
        assert_eq!(out.cov[(0, 0)], 4.5);

        let bad = LinearTerm::diagonal(DMatrix::identity(3, 2), &DiagGaussian::standard(2));
        assert!(gaussian_marginalize_linear(&[bad], &noise).is_err());
    }

    #[test]
    fn marginalize_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 3;
        let mut rand_mat =
            |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let a1 = rand_mat(n, 2);
        let a2 = rand_mat(n, 3);
        let l2 = rand_mat(3, 3);
        let cov2 = &l2 * l2.transpose() + DMatrix::identity(3, 3) * 0.1;
        let ln = rand_mat(n, n);
        let noise = &ln * ln.transpose() + DMatrix::identity(n, n) * 0.05;
        let u1 = DiagGaussian::new(vec![0.5, -0.2], vec![0.7, 1.3]).unwrap();
        let mu2 = DVector::from_vec(vec![1.0, 0.0, -0.5]);
        let terms = [
            LinearTerm::diagonal(a1.clone(), &u1),
            LinearTerm::new(a2.clone(), mu2.clone(), cov2.clone()),
        ];
        let out = gaussian_marginalize_linear(&terms, &noise).unwrap();

        let chol2 = cov2.clone().cholesky().unwrap().l();
        let choln = noise.clone().cholesky().unwrap().l();
        let samples = 100_000;
        let mut draws = Vec::with_capacity(samples);
        let mut std = |k: usize| DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        for _ in 0..samples {
            let e1 = std(2);
            let x1 = DVector::from_fn(2, |i, _| u1.mean[i] + u1.var[i].sqrt() * e1[i]);
            let x2 = &mu2 + &chol2 * std(3);
            let y = &a1 * x1 + &a2 * x2 + &choln * std(n);
            draws.push(y);
        }
        let mean = draws.iter().fold(DVector::zeros(n), |acc, y| acc + y) / samples as f64;
        for i in 0..n {
            let se = (out.cov[(i, i)] / samples as f64).sqrt();
            assert!((mean[i] - out.mean[i]).abs() < 3.0 * se, "mean {i}");
        }
        let mut emp = DMatrix::zeros(n, n);
        for y in &draws {
            let c = y - &mean;
            emp += &c * c.transpose();
        }
        emp /= (samples - 1) as f64;
        for i in 0..n {
            for j in 0..n {
                // standard error of a Gaussian sample covariance entry
                let var = out.cov[(i, j)].powi(2) + out.cov[(i, i)] * out.cov[(j, j)];
                let se = (var / samples as f64).sqrt();
                assert!(
                    (emp[(i, j)] - out.cov[(i, j)]).abs() < 3.0 * se,
                    "cov {i},{j}"
                );
            }
        }
    }

    #[test]
    fn predict_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let post = random_belief(&mut rng, 3);
        let same = factorized_predict(
            &post,
            &BlockMatrix::identity(3),
            &[],
            &[],
            &CovTriple::zeros(3),
        )
        .unwrap();
        assert_eq!(same, post);

        let noise = CovTriple::isotropic(3, 0.1);
        let out = factorized_predict(&post, &BlockMatrix::identity(3), &[], &[], &noise).unwrap();
        for i in 0..3 {
            assert!((out.cov.var_u[i] - post.cov.var_u[i] - 0.1).abs() < 1e-15);
            assert!((out.cov.var_l[i] - post.cov.var_l[i] - 0.1).abs() < 1e-15);
            assert_eq!(out.cov.cov_s[i], post.cov.cov_s[i]);
        }
    }

    #[test]
    fn predict_matches_dense_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 4;
        for _ in 0..200 {
            let post = random_belief(&mut rng, d);
            let dense_a = DMatrix::from_fn(2 * d, 2 * d, |_, _| rng.gen_range(-0.6..0.6));
            let mut a = BlockMatrix::from_dense(&dense_a).unwrap();
            a.band_limit(1);
            let control: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let noise = CovTriple {
                var_u: (0..d).map(|_| rng.gen_range(0.01..0.5)).collect(),
                var_l: (0..d).map(|_| rng.gen_range(0.01..0.5)).collect(),
                cov_s: vec![0.0; d],
            };
            let out = factorized_predict(&post, &a, &control, &[], &noise).unwrap();

            let am = a.to_dense();
            let mean = &am * post.dense_mean() + DVector::from_vec(control.clone());
            let cov = &am * post.dense_covariance() * am.transpose() + noise.to_dense();
            let t = CovTriple::truncate_dense(&cov);
            for i in 0..2 * d {
                assert!((out.mean()[i] - mean[i]).abs() < 1e-10);
            }
            for i in 0..d {
                assert!((out.cov.var_u[i] - t.var_u[i]).abs() < 1e-10);
                assert!((out.cov.var_l[i] - t.var_l[i]).abs() < 1e-10);
                assert!((out.cov.cov_s[i] - t.cov_s[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn positivity_guard_clamps_degenerate_triples() {
        let cov = CovTriple {
            var_u: vec![-1.0, 1.0],
            var_l: vec![1.0, 1.0],
            cov_s: vec![0.0, 2.0],
        };
        let fixed = enforce_positivity(&cov).unwrap();
        assert_eq!(fixed.var_u[0], MIN_VARIANCE);
        assert!((fixed.cov_s[1] - 0.99).abs() < 1e-15);
        fixed.check_positive_definite().unwrap();

        let nan = CovTriple {
            var_u: vec![f64::NAN],
            var_l: vec![1.0],
            cov_s: vec![0.0],
        };
        assert!(enforce_positivity(&nan).is_err());
    }

    #[test]
    fn pairwise_sum_is_deterministic() {
        let terms: Vec<Vec<f64>> = (0..9)
            .map(|i| vec![0.1 * i as f64, 1.0 / (i + 1) as f64])
            .collect();
        let a = pairwise_sum(&terms, 2);
        let b = pairwise_sum(&terms, 2);
        assert_eq!(a, b);
        assert!((a[0] - 3.6).abs() < 1e-12);
        assert_eq!(pairwise_sum(&[], 3), vec![0.0; 3]);
    }
}
