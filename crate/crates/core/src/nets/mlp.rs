use rand::Rng;

use super::{uniform_init, BeliefVars, Bound, ParamStore};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gaussian::{FactorizedBelief, LatentObservation, MIN_VARIANCE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Linear,
    /// `elu(x) + 1`, used for variance heads.
    EluPlusOne,
    Softmax,
}

impl OutputActivation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            OutputActivation::Linear => x,
            OutputActivation::EluPlusOne => x.elu_plus_one(),
            OutputActivation::Softmax => x.softmax(),
        }
    }
}

/// Widths from input to output; hidden layers use relu.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, output: OutputActivation) -> Result<Self> {
        if layer_widths.len() < 2 || layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "mlp needs at least input and output widths, all >= 1, got {layer_widths:?}"
            )));
        }
        Ok(MlpSpec {
            layer_widths,
            output,
        })
    }

    /// `input -> hidden... -> output`.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        act: OutputActivation,
    ) -> Result<Self> {
        let mut w = vec![input];
        w.extend_from_slice(hidden);
        w.push(output);
        MlpSpec::new(w, act)
    }
}

/// Affine layer `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: String,
    pub bias: String,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let weight = format!("{prefix}.w");
        let bias = format!("{prefix}.b");
        store.insert(&weight, uniform_init(rng, input, &[input, output]))?;
        store.insert(&bias, uniform_init(rng, input, &[1, output]))?;
        Ok(Dense {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(p.get(&self.weight)) + p.get(&self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        spec: MlpSpec,
    ) -> Result<Self> {
        let layers = spec
            .layer_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, rng, &format!("{prefix}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { spec, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.spec.layer_widths.last().expect("validated widths")
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h);
            if i < last {
                h = h.relu();
            }
        }
        self.spec.output.apply(h)
    }
}

/// Observation encoder: a relu trunk with a mean head and an `elu + 1`
/// variance head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    trunk: Vec<Dense>,
    mean: Dense,
    var: Dense,
    input: usize,
    output: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
    ) -> Result<Self> {
        let mut trunk = Vec::new();
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            trunk.push(Dense::new(store, rng, &format!("{prefix}.h{i}"), width, h)?);
            width = h;
        }
        let mean = Dense::new(store, rng, &format!("{prefix}.mean"), width, output)?;
        let var = Dense::new(store, rng, &format!("{prefix}.var"), width, output)?;
        Ok(Encoder {
            trunk,
            mean,
            var,
            input,
            output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    /// `(value, variance)`, both `[B, output]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let mut h = x;
        for layer in &self.trunk {
            h = layer.forward(p, h).relu();
        }
        (
            self.mean.forward(p, h),
            floor_variance(self.var.forward(p, h).elu_plus_one()),
        )
    }

    /// Encodes a single observation outside of any training graph.
    pub fn encode(&self, store: &ParamStore, o: &[f64]) -> Result<LatentObservation> {
        if o.len() != self.input {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {} inputs, got {}",
                self.input,
                o.len()
            )));
        }
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (value, var) = self.forward(&p, tape.constant(Tensor::row(o)));
        LatentObservation::new(value.to_tensor().into_data(), var.to_tensor().into_data())
    }
}

/// `elu + 1` underflows to zero for very negative inputs.
fn floor_variance(v: Var<'_>) -> Var<'_> {
    let floor = v
        .tape()
        .constant(Tensor::full(&[1, v.cols()], MIN_VARIANCE));
    v.maximum(floor)
}

/// Maps a belief to an observation-space Gaussian: the mean from
/// `[mean_u, mean_l]`, the variance from `[var_u, var_l, cov_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    mean: Mlp,
    var: Mlp,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        latent: usize,
        hidden: &[usize],
        output: usize,
    ) -> Result<Self> {
        let mean = Mlp::new(
            store,
            rng,
            &format!("{prefix}.mean"),
            MlpSpec::with_hidden(2 * latent, hidden, output, OutputActivation::Linear)?,
        )?;
        let var = Mlp::new(
            store,
            rng,
            &format!("{prefix}.var"),
            MlpSpec::with_hidden(3 * latent, hidden, output, OutputActivation::EluPlusOne)?,
        )?;
        Ok(Decoder { mean, var })
    }

    pub fn output_dim(&self) -> usize {
        self.mean.output_dim()
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, b: &BeliefVars<'t>) -> (Var<'t>, Var<'t>) {
        let tape = p.tape();
        let mean = self.mean.forward(p, tape.concat(&[b.mean_u, b.mean_l]));
        let var = self
            .var
            .forward(p, tape.concat(&[b.var_u, b.var_l, b.cov_s]));
        (mean, floor_variance(var))
    }

    /// Decodes a single belief outside of any training graph.
    pub fn decode(&self, store: &ParamStore, b: &FactorizedBelief) -> (Vec<f64>, Vec<f64>) {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let bv = BeliefVars::constant(&tape, b);
        let (m, v) = self.forward(&p, &bv);
        (m.to_tensor().into_data(), v.to_tensor().into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::numeric_gradient;
    use crate::gaussian::CovTriple;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_all(store: &mut ParamStore) {
        let n = store.num_scalars();
        store.set_flat(&vec![0.0; n]).unwrap();
    }

    #[test]
    fn zero_encoder_gives_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let enc = Encoder::new(&mut s, &mut rng, "enc", 3, &[8], 2).unwrap();
        zero_all(&mut s);
        let w = enc.encode(&s, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(w.value, vec![0.0, 0.0]);
        assert_eq!(w.var, vec![1.0, 1.0]);
        assert!(enc.encode(&s, &[1.0]).is_err());
    }

    #[test]
    fn variance_head_at_negative_preactivation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let enc = Encoder::new(&mut s, &mut rng, "enc", 1, &[], 1).unwrap();
        zero_all(&mut s);
        s.set("enc.var.b", Tensor::new(vec![1, 1], vec![-5.0]).unwrap())
            .unwrap();
        let w = enc.encode(&s, &[0.0]).unwrap();
        assert!((w.var[0] - (-5.0f64).exp()).abs() < 1e-15);
        assert!((w.var[0] - 0.006_737_946_999).abs() < 1e-9);
    }

    #[test]
    fn batched_encoding_matches_single_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let enc = Encoder::new(&mut s, &mut rng, "enc", 3, &[5, 4], 2).unwrap();
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let tape = Tape::new();
        let p = s.bind(&tape);
        let (m, v) = enc.forward(&p, tape.constant(Tensor::from_rows(&rows).unwrap()));
        for (i, r) in rows.iter().enumerate() {
            let single = enc.encode(&s, r).unwrap();
            assert_eq!(m.value().row_slice(i), single.value.as_slice());
            assert_eq!(v.value().row_slice(i), single.var.as_slice());
        }
    }

    #[test]
    fn variance_heads_stay_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let x: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let out = tape.constant(Tensor::row(&x)).elu_plus_one();
        assert!(out.value().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_decoder_and_scaling_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let dec = Decoder::new(&mut s, &mut rng, "dec", 2, &[6], 3).unwrap();
        let b = FactorizedBelief::new(
            vec![0.4, -0.2],
            vec![1.0, 0.5],
            CovTriple::new(vec![0.5, 0.7], vec![0.9, 1.1], vec![0.1, -0.2]).unwrap(),
        )
        .unwrap();
        let (_, v1) = dec.decode(&s, &b);
        let mut b4 = b.clone();
        for x in b4
            .cov
            .var_u
            .iter_mut()
            .chain(&mut b4.cov.var_l)
            .chain(&mut b4.cov.cov_s)
        {
            *x *= 4.0;
        }
        let (_, v4) = dec.decode(&s, &b4);
        assert!(v1.iter().all(|&v| v > 0.0) && v4.iter().all(|&v| v > 0.0));
        assert_ne!(v1, v4);

        zero_all(&mut s);
        let (m, v) = dec.decode(&s, &b);
        assert_eq!(m, vec![0.0; 3]);
        assert_eq!(v, vec![1.0; 3]);
    }

    #[test]
    fn decoder_nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        let dec = Decoder::new(&mut s, &mut rng, "dec", 2, &[5], 2).unwrap();
        let beliefs: Vec<FactorizedBelief> = (0..4)
            .map(|_| {
                FactorizedBelief::new(
                    (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    CovTriple::new(vec![0.5, 0.8], vec![0.6, 0.4], vec![0.1, 0.0]).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let targets: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.gen_range(-1.0..1.0); 2]).collect();

        let nll = |store: &ParamStore| -> (f64, Vec<f64>) {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let mut total = tape.constant(Tensor::scalar(0.0));
            for (b, t) in beliefs.iter().zip(&targets) {
                let (m, v) = dec.forward(&p, &BeliefVars::constant(&tape, b));
                let r = m - tape.constant(Tensor::row(t));
                let term = (v.ln() + r.square() / v).sum().scale(0.5);
                total = total + term;
            }
            let g = tape.backward(total).unwrap();
            let flat: Vec<f64> = p
                .gradients(&g)
                .into_iter()
                .flat_map(|t| t.into_data())
                .collect();
            (total.item(), flat)
        };
        let (_, analytic) = nll(&s);
        let x = Tensor::row(&s.to_flat());
        let numeric = numeric_gradient(
            |v| {
                let mut probe = s.clone();
                probe.set_flat(v.data()).unwrap();
                nll(&probe).0
            },
            &x,
            1e-5,
        );
        for (a, n) in analytic.iter().zip(numeric.data()) {
            assert!(
                (a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-2),
                "{a} vs {n}"
            );
        }
    }
}
