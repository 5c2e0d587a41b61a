use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Bound, Dense, ParamStore};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::gaussian::{BlockMatrix, CovTriple};

/// A block linear map on the tape, `[u'; l'] = [[uu, ul], [lu, ll]] [u; l]`.
///
/// Each block is `[B, rows * cols]` (one row-major matrix per batch row) or
/// `[1, rows * cols]` shared across the batch. `ul` and `ll` are absent when
/// the input has no lower half.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars<'t> {
    pub uu: Var<'t>,
    pub ul: Option<Var<'t>>,
    pub lu: Var<'t>,
    pub ll: Option<Var<'t>>,
    pub rows: usize,
    pub cols: usize,
}

impl<'t> BlockVars<'t> {
    /// Splits `[B, n * rows * cols]` into consecutive blocks, in the order
    /// `uu, ul, lu, ll` (four blocks) or `uu, lu` (two blocks).
    pub fn from_packed(packed: Var<'t>, rows: usize, cols: usize, split_input: bool) -> Self {
        let n = rows * cols;
        if split_input {
            BlockVars {
                uu: packed.slice(0, n),
                ul: Some(packed.slice(n, n)),
                lu: packed.slice(2 * n, n),
                ll: Some(packed.slice(3 * n, n)),
                rows,
                cols,
            }
        } else {
            BlockVars {
                uu: packed.slice(0, n),
                ul: None,
                lu: packed.slice(n, n),
                ll: None,
                rows,
                cols,
            }
        }
    }

    /// `M [u; l]`, returned as the two output halves.
    pub fn apply(&self, u: Var<'t>, l: Option<Var<'t>>) -> (Var<'t>, Var<'t>) {
        let mut up = self.uu.bmv(u, self.rows);
        let mut lo = self.lu.bmv(u, self.rows);
        if let Some(l) = l {
            if let Some(ul) = self.ul {
                up = up + ul.bmv(l, self.rows);
            }
            if let Some(ll) = self.ll {
                lo = lo + ll.bmv(l, self.rows);
            }
        }
        (up, lo)
    }

    /// Block diagonals of `M Σ Mᵀ` for a factorized `Σ`. Missing lower
    /// variance or side covariance count as zero.
    pub fn propagate(
        &self,
        var_u: Var<'t>,
        var_l: Option<Var<'t>>,
        cov_s: Option<Var<'t>>,
    ) -> (Var<'t>, Var<'t>, Var<'t>) {
        let r = self.rows;
        let (a, e) = (self.uu, self.lu);
        let mut up = a.square().bmv(var_u, r);
        let mut lo = e.square().bmv(var_u, r);
        let mut side = (a * e).bmv(var_u, r);
        if let (Some(b), Some(f)) = (self.ul, self.ll) {
            if let Some(s) = cov_s {
                up = up + (a * b).scale(2.0).bmv(s, r);
                lo = lo + (e * f).scale(2.0).bmv(s, r);
                side = side + (a * f + b * e).bmv(s, r);
            }
            if let Some(vl) = var_l {
                up = up + b.square().bmv(vl, r);
                lo = lo + f.square().bmv(vl, r);
                side = side + (b * f).bmv(vl, r);
            }
        }
        (up, lo, side)
    }

    /// The matrix for batch row `row` as plain values.
    pub fn to_block_matrix(&self, row: usize) -> BlockMatrix {
        let n = self.rows * self.cols;
        let pick = |v: Option<Var<'t>>| -> Vec<f64> {
            match v {
                Some(v) => {
                    let t = v.value();
                    let r = if t.rows() == 1 { 0 } else { row };
                    t.row_slice(r).to_vec()
                }
                None => vec![0.0; n],
            }
        };
        BlockMatrix::new(
            self.rows,
            self.cols,
            pick(Some(self.uu)),
            pick(self.ul),
            pick(Some(self.lu)),
            pick(self.ll),
        )
        .expect("block sizes")
    }
}

/// Band mask for four stacked `d x d` blocks.
fn band_mask(d: usize, bandwidth: usize) -> Vec<f64> {
    let mut block = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            if i.abs_diff(j) <= bandwidth {
                block[i * d + j] = 1.0;
            }
        }
    }
    block.repeat(4)
}

/// State-dependent transition `A(z) = Σ_k c_k(z) A_k`, with `c(z)` a softmax
/// over a linear map of the posterior mean and each `A_k` made of four
/// banded `d x d` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BandedTransition {
    pub latent: usize,
    pub num_basis: usize,
    pub bandwidth: usize,
    basis: String,
    coeff: Option<Dense>,
}

impl BandedTransition {
    /// Every basis matrix starts at the identity plus `N(0, 0.05²)` noise
    /// inside the band.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        latent: usize,
        num_basis: usize,
        bandwidth: usize,
    ) -> Result<Self> {
        let d = latent;
        let k = num_basis.max(1);
        let mask = band_mask(d, bandwidth);
        let noise = Normal::new(0.0, 0.05).expect("valid normal");
        let mut data = Vec::with_capacity(k * 4 * d * d);
        for _ in 0..k {
            for blk in 0..4 {
                for i in 0..d {
                    for j in 0..d {
                        let eye = if (blk == 0 || blk == 3) && i == j {
                            1.0
                        } else {
                            0.0
                        };
                        data.push(eye + noise.sample(rng));
                    }
                }
            }
        }
        let basis = format!("{prefix}.basis");
        store.insert_masked(
            &basis,
            Tensor::new(vec![k, 4 * d * d], data)?,
            mask.repeat(k),
        )?;
        let coeff = if k > 1 {
            Some(Dense::new(
                store,
                rng,
                &format!("{prefix}.coeff"),
                2 * d,
                k,
            )?)
        } else {
            None
        };
        Ok(BandedTransition {
            latent: d,
            num_basis: k,
            bandwidth,
            basis,
            coeff,
        })
    }

    /// Mixture weights `[B, K]`; a single basis gets weight one.
    pub fn coefficients<'t>(&self, p: &Bound<'t>, z_mean: Var<'t>) -> Var<'t> {
        match &self.coeff {
            Some(c) => c.forward(p, z_mean).softmax(),
            None => p.fill(z_mean.rows(), 1, 1.0),
        }
    }

    /// `A(z)` for every row of the posterior mean `z_mean: [B, 2d]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, z_mean: Var<'t>) -> BlockVars<'t> {
        let basis = p.get(&self.basis);
        let packed = match &self.coeff {
            Some(_) => self.coefficients(p, z_mean).matmul(basis),
            None => basis,
        };
        BlockVars::from_packed(packed, self.latent, self.latent, true)
    }

    /// `A(z)` for a single posterior mean.
    pub fn transition_matrix(&self, store: &ParamStore, z_mean: &[f64]) -> BlockMatrix {
        let tape = Tape::new();
        let p = store.bind(&tape);
        self.forward(&p, tape.constant(Tensor::row(z_mean)))
            .to_block_matrix(0)
    }
}

/// Learned diagonal transition noise for both halves, `elu(raw) + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionNoise {
    pub latent: usize,
    upper: String,
    lower: String,
}

impl TransitionNoise {
    /// Starts every variance at `init` (must be in `(0, 1]`).
    pub fn new(store: &mut ParamStore, prefix: &str, latent: usize, init: f64) -> Result<Self> {
        let raw = init.ln();
        let upper = format!("{prefix}.upper");
        let lower = format!("{prefix}.lower");
        store.insert(&upper, Tensor::full(&[1, latent], raw))?;
        store.insert(&lower, Tensor::full(&[1, latent], raw))?;
        Ok(TransitionNoise {
            latent,
            upper,
            lower,
        })
    }

    /// `(var_u, var_l)`, each `[1, d]`.
    pub fn forward<'t>(&self, p: &Bound<'t>) -> (Var<'t>, Var<'t>) {
        (
            p.get(&self.upper).elu_plus_one(),
            p.get(&self.lower).elu_plus_one(),
        )
    }

    pub fn triple(&self, store: &ParamStore) -> CovTriple {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (u, l) = self.forward(&p);
        CovTriple {
            var_u: u.to_tensor().into_data(),
            var_l: l.to_tensor().into_data(),
            cov_s: vec![0.0; self.latent],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_basis_ignores_the_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let bt = BandedTransition::new(&mut s, &mut rng, "trans", 3, 1, 1).unwrap();
        let a = bt.transition_matrix(&s, &[0.0; 6]);
        let b = bt.transition_matrix(&s, &[5.0, -1.0, 2.0, 0.3, 0.0, 9.0]);
        assert_eq!(a, b);
        let basis = s.get("trans.basis").unwrap().data();
        assert_eq!(a.uu, basis[..9].to_vec());
        // near identity at init
        assert!((a.uu[0] - 1.0).abs() < 0.3 && a.uu[2] == 0.0);
    }

    #[test]
    fn saturated_coefficients_pick_one_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let bt = BandedTransition::new(&mut s, &mut rng, "trans", 2, 3, 1).unwrap();
        s.set("trans.coeff.w", Tensor::zeros(&[4, 3])).unwrap();
        s.set("trans.coeff.b", Tensor::row(&[800.0, 0.0, 0.0]))
            .unwrap();
        let a = bt.transition_matrix(&s, &[0.1, 0.2, 0.3, 0.4]);
        let first = s.get("trans.basis").unwrap().row_slice(0).to_vec();
        assert_eq!([a.uu, a.ul, a.lu, a.ll].concat(), first);
    }

    #[test]
    fn mixture_matches_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        let bt = BandedTransition::new(&mut s, &mut rng, "trans", 4, 3, 2).unwrap();
        let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = bt.transition_matrix(&s, &z);

        // softmax(z W + b) computed by hand
        let w = s.get("trans.coeff.w").unwrap();
        let b = s.get("trans.coeff.b").unwrap();
        let logits: Vec<f64> = (0..3)
            .map(|k| b.data()[k] + (0..8).map(|i| z[i] * w.get(i, k)).sum::<f64>())
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let total: f64 = e.iter().sum();
        let basis = s.get("trans.basis").unwrap();
        let packed = [a.uu, a.ul, a.lu, a.ll].concat();
        for (j, v) in packed.iter().enumerate() {
            let expect: f64 = (0..3).map(|k| e[k] / total * basis.get(k, j)).sum();
            assert!((v - expect).abs() < 1e-12);
        }
        // banded: entries with |i - j| > 2 are zero in every block
        assert_eq!(packed[3], 0.0);
        assert_eq!(packed[16 + 12], 0.0);
    }

    #[test]
    fn coefficients_form_a_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let bt = BandedTransition::new(&mut s, &mut rng, "trans", 3, 5, 1).unwrap();
        let tape = Tape::new();
        let p = s.bind(&tape);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| rng.gen_range(-10.0..10.0)).collect())
            .collect();
        let c = bt.coefficients(&p, tape.constant(Tensor::from_rows(&rows).unwrap()));
        let c = c.value();
        for r in 0..50 {
            let row = c.row_slice(r);
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_propagation_matches_block_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 3;
        let dense = nalgebra::DMatrix::from_fn(2 * d, 2 * d, |_, _| rng.gen_range(-1.0..1.0));
        let m = BlockMatrix::from_dense(&dense).unwrap();
        let vu: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..1.0)).collect();
        let vl: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..1.0)).collect();
        let cs: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let expect = m.propagate(&vu, &vl, &cs);

        let tape = Tape::new();
        let packed = tape.constant(Tensor::row(
            &[m.uu.clone(), m.ul.clone(), m.lu.clone(), m.ll.clone()].concat(),
        ));
        let bv = BlockVars::from_packed(packed, d, d, true);
        let (u, l, s) = bv.propagate(
            tape.constant(Tensor::row(&vu)),
            Some(tape.constant(Tensor::row(&vl))),
            Some(tape.constant(Tensor::row(&cs))),
        );
        for i in 0..d {
            assert!((u.value().data()[i] - expect.var_u[i]).abs() < 1e-14);
            assert!((l.value().data()[i] - expect.var_l[i]).abs() < 1e-14);
            assert!((s.value().data()[i] - expect.cov_s[i]).abs() < 1e-14);
        }
        assert_eq!(bv.to_block_matrix(0), m);
    }

    #[test]
    fn noise_starts_at_requested_variance() {
        let mut s = ParamStore::new();
        let n = TransitionNoise::new(&mut s, "noise", 2, 0.1).unwrap();
        let t = n.triple(&s);
        assert!((t.var_u[0] - 0.1).abs() < 1e-15);
        assert_eq!(t.cov_s, vec![0.0, 0.0]);
    }
}
