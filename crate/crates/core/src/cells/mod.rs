//! Recurrent inference cells: RKN, ac-RKN, HiP-RSSM and the two-level MTS3.
//!
//! Every cell alternates a prediction step (transition, optional control
//! and task terms, noise) with a factorized Kalman update on the encoded
//! observation. The prior belief of each step is decoded as the prediction
//! for that step's observation, before the observation is used.
//!
//! * RKN: state-dependent banded transition, no inputs.
//! * ac-RKN: adds a control term `b(a)` to the prior mean.
//! * HiP-RSSM: per window, a latent task is aggregated from the previous
//!   window's transitions and enters the prediction through a task
//!   transform.
//! * MTS3: a slow task state is predicted once per window from an abstract
//!   action and updated from the window's abstract observations; the fast
//!   cell uses the task prior of the current window.
//!
//! Models with the same parameter names share parameters, which is what the
//! reductions between cells rely on.

pub mod layers;
mod sequence;

pub use sequence::{CarryState, Forward, SequenceBatch, TaskCarry, WindowTask};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nets::{
    BandedTransition, BeliefVars, BlockVars, Bound, ControlKind, ControlModel, Decoder, Encoder,
    ParamStore, TaskInput, TaskTransform, TimeEncoding, TransformKind, TransitionNoise,
};
use layers::{PredictTerms, SetElement};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Rkn,
    AcRkn,
    HipRssm,
    Mts3,
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rkn" => Ok(ModelKind::Rkn),
            "acrkn" => Ok(ModelKind::AcRkn),
            "hiprssm" => Ok(ModelKind::HipRssm),
            "mts3" => Ok(ModelKind::Mts3),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected rkn, acrkn, hiprssm or mts3)"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Rkn => "rkn",
            ModelKind::AcRkn => "acrkn",
            ModelKind::HipRssm => "hiprssm",
            ModelKind::Mts3 => "mts3",
        })
    }
}

/// Architecture and size of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Size `d` of each half of the latent state.
    pub latent_dim: usize,
    /// Size of the latent task (HiP-RSSM) or of each half of the slow state
    /// (MTS3).
    pub task_dim: usize,
    /// Hidden widths of every encoder, decoder and nonlinear model.
    pub hidden: Vec<usize>,
    /// Basis matrices of the transition (MTS3 always uses one).
    pub num_basis: usize,
    pub bandwidth: usize,
    pub control: ControlKind,
    pub task_transform: TransformKind,
    /// Window length: context/target length for HiP-RSSM, `H` for MTS3.
    pub window: usize,
    /// Variance of the initial belief.
    pub initial_var: f64,
    /// Initial transition noise variance, in `(0, 1]`.
    pub noise_init: f64,
    /// The decoder predicts `o_t - o_{t-1}` instead of `o_t`.
    pub predict_differences: bool,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, obs_dim: usize, action_dim: usize) -> Self {
        ModelSpec {
            kind,
            obs_dim,
            action_dim,
            latent_dim: 8,
            task_dim: 4,
            hidden: vec![32],
            num_basis: 4,
            bandwidth: 3,
            control: ControlKind::Nonlinear,
            task_transform: TransformKind::Linear,
            window: 10,
            initial_var: 10.0,
            noise_init: 0.1,
            predict_differences: false,
        }
    }

    /// `key=value` pairs covering every field, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        vec![
            ("model", self.kind.to_string()),
            ("obs_dim", self.obs_dim.to_string()),
            ("action_dim", self.action_dim.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("task_dim", self.task_dim.to_string()),
            ("hidden", hidden.join(",")),
            ("num_basis", self.num_basis.to_string()),
            ("bandwidth", self.bandwidth.to_string()),
            ("control", self.control.to_string()),
            ("task_transform", self.task_transform.to_string()),
            ("window", self.window.to_string()),
            ("initial_var", format!("{:?}", self.initial_var)),
            ("noise_init", format!("{:?}", self.noise_init)),
            ("predict_differences", self.predict_differences.to_string()),
        ]
    }

    /// Inverse of [`ModelSpec::to_pairs`]; every key is required.
    pub fn from_pairs(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let req = |k: &str| get(k).ok_or_else(|| Error::Config(format!("missing key `{k}`")));
        fn num<T: FromStr>(k: &str, v: String) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{k}` has an invalid value `{v}`")))
        }
        let hidden_raw = req("hidden")?;
        let hidden = if hidden_raw.trim().is_empty() {
            Vec::new()
        } else {
            hidden_raw
                .split(',')
                .map(|h| num("hidden", h.to_string()))
                .collect::<Result<Vec<usize>>>()?
        };
        let spec = ModelSpec {
            kind: req("model")?.trim().parse()?,
            obs_dim: num("obs_dim", req("obs_dim")?)?,
            action_dim: num("action_dim", req("action_dim")?)?,
            latent_dim: num("latent_dim", req("latent_dim")?)?,
            task_dim: num("task_dim", req("task_dim")?)?,
            hidden,
            num_basis: num("num_basis", req("num_basis")?)?,
            bandwidth: num("bandwidth", req("bandwidth")?)?,
            control: req("control")?.trim().parse()?,
            task_transform: req("task_transform")?.trim().parse()?,
            window: num("window", req("window")?)?,
            initial_var: num("initial_var", req("initial_var")?)?,
            noise_init: num("noise_init", req("noise_init")?)?,
            predict_differences: num("predict_differences", req("predict_differences")?)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.obs_dim == 0 || self.latent_dim == 0 {
            return bad("obs_dim and latent_dim must be positive");
        }
        if self.kind != ModelKind::Rkn && self.action_dim == 0 {
            return bad("action-conditioned models need action_dim >= 1");
        }
        if matches!(self.kind, ModelKind::HipRssm | ModelKind::Mts3)
            && (self.window == 0 || self.task_dim == 0)
        {
            return bad("window and task_dim must be positive for hiprssm and mts3");
        }
        if self.num_basis == 0 {
            return bad("num_basis must be positive");
        }
        if !(self.initial_var > 0.0) {
            return bad("initial_var must be positive");
        }
        if !(self.noise_init > 0.0 && self.noise_init <= 1.0) {
            return bad("noise_init must lie in (0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    /// Basis count actually used by the fast transition.
    pub fn transition_basis(&self) -> usize {
        if self.kind == ModelKind::Mts3 {
            1
        } else {
            self.num_basis
        }
    }

    /// Window length that sequences are segmented into, if any.
    pub fn segment(&self) -> Option<usize> {
        match self.kind {
            ModelKind::HipRssm | ModelKind::Mts3 => Some(self.window),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct HipNets {
    context: Encoder,
    task: TaskTransform,
}

#[derive(Clone, Debug, PartialEq)]
struct SlowNets {
    obs: Encoder,
    action: Encoder,
    transition: BandedTransition,
    control: TaskTransform,
    noise: TransitionNoise,
    task: TaskTransform,
}

#[derive(Clone, Debug, PartialEq)]
struct Nets {
    enc: Encoder,
    dec: Decoder,
    trans: BandedTransition,
    noise: TransitionNoise,
    control: Option<ControlModel>,
    hip: Option<HipNets>,
    slow: Option<SlowNets>,
}

/// A model: its spec, named parameters and the networks that use them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    nets: Nets,
}

impl Model {
    /// Builds and initializes a model; the initialization depends only on
    /// `spec` and `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let (d, h) = (spec.latent_dim, spec.hidden.as_slice());
        let enc = Encoder::new(&mut s, rng, "enc", spec.obs_dim, h, d)?;
        let trans = BandedTransition::new(
            &mut s,
            rng,
            "trans",
            d,
            spec.transition_basis(),
            spec.bandwidth,
        )?;
        let noise = TransitionNoise::new(&mut s, "noise", d, spec.noise_init)?;
        let control = match spec.kind {
            ModelKind::Rkn => None,
            _ => Some(ControlModel::new(
                &mut s,
                rng,
                "control",
                spec.control,
                spec.action_dim,
                d,
                spec.num_basis,
                h,
            )?),
        };
        let dec = Decoder::new(&mut s, rng, "dec", d, h, spec.obs_dim)?;
        let hip = match spec.kind {
            ModelKind::HipRssm => Some(HipNets {
                context: Encoder::new(
                    &mut s,
                    rng,
                    "context",
                    2 * spec.obs_dim + spec.action_dim,
                    h,
                    spec.task_dim,
                )?,
                task: TaskTransform::new(
                    &mut s,
                    rng,
                    "task",
                    spec.task_transform,
                    spec.task_dim,
                    d,
                    false,
                    spec.num_basis,
                    h,
                )?,
            }),
            _ => None,
        };
        let slow = match spec.kind {
            ModelKind::Mts3 => {
                let m = spec.task_dim;
                let te = TimeEncoding::FEATURES;
                Some(SlowNets {
                    obs: Encoder::new(&mut s, rng, "abs_obs", spec.obs_dim + te, h, m)?,
                    action: Encoder::new(&mut s, rng, "abs_act", spec.action_dim + te, h, m)?,
                    transition: BandedTransition::new(&mut s, rng, "slow_trans", m, 1, m)?,
                    control: TaskTransform::new(
                        &mut s,
                        rng,
                        "slow_control",
                        TransformKind::Linear,
                        m,
                        m,
                        false,
                        1,
                        h,
                    )?,
                    noise: TransitionNoise::new(&mut s, "slow_noise", m, spec.noise_init)?,
                    task: TaskTransform::new(
                        &mut s,
                        rng,
                        "task",
                        spec.task_transform,
                        m,
                        d,
                        true,
                        spec.num_basis,
                        h,
                    )?,
                })
            }
            _ => None,
        };
        Ok(Model {
            spec,
            params: s,
            nets: Nets {
                enc,
                dec,
                trans,
                noise,
                control,
                hip,
                slow,
            },
        })
    }

    /// Builds the architecture for `spec` and installs `params`, which must
    /// match it name by name and shape by shape.
    pub fn with_params(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(spec, 0)?;
        let expected: Vec<(&str, &[usize])> = model
            .params
            .iter()
            .map(|p| (p.name.as_str(), p.value.shape()))
            .collect();
        let got: Vec<(&str, &[usize])> = params
            .iter()
            .map(|p| (p.name.as_str(), p.value.shape()))
            .collect();
        if expected != got {
            let first = expected
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| {
                    format!(
                        "expected {} parameters, found {}",
                        expected.len(),
                        got.len()
                    )
                });
            return Err(Error::CheckpointMismatch(first));
        }
        for p in params.iter() {
            model.params.set(&p.name, p.value.clone())?;
        }
        Ok(model)
    }

    /// Copies every parameter whose name also exists in `other`.
    pub fn copy_shared_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        let names: Vec<String> = self.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            if let Some(v) = other.get(&name) {
                self.params.set(&name, v.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    /// Latent observation and its variance for `obs: [B, Do]`.
    pub fn encode<'t>(&self, p: &Bound<'t>, obs: Var<'t>) -> (Var<'t>, Var<'t>) {
        self.nets.enc.forward(p, obs)
    }

    /// Observation-space mean and variance decoded from a belief.
    pub fn decode<'t>(&self, p: &Bound<'t>, b: &BeliefVars<'t>) -> (Var<'t>, Var<'t>) {
        self.nets.dec.forward(p, b)
    }

    /// The fast transition matrices for a batch of posterior means.
    pub fn transition<'t>(&self, p: &Bound<'t>, post: &BeliefVars<'t>) -> BlockVars<'t> {
        self.nets.trans.forward(p, post.mean())
    }

    /// Prior for the next step: transition, control for `action` (ignored by
    /// RKN), an optional task term and the transition noise.
    pub fn predict<'t>(
        &self,
        p: &Bound<'t>,
        post: &BeliefVars<'t>,
        action: Option<Var<'t>>,
        task: Option<&BeliefVars<'t>>,
    ) -> Result<BeliefVars<'t>> {
        let blocks = self.transition(p, post);
        let control = match (&self.nets.control, action) {
            (Some(c), Some(a)) => Some(c.forward(p, a, Some(post.mean()))?),
            _ => None,
        };
        let terms = PredictTerms {
            control,
            task: task.copied(),
            noise: Some(self.nets.noise.forward(p)),
        };
        Ok(layers::predict(post, &blocks, terms))
    }

    /// Posterior after the observation `obs: [B, Do]` for rows marked in
    /// `observed`. Unobserved rows are never read.
    pub fn update<'t>(
        &self,
        p: &Bound<'t>,
        prior: &BeliefVars<'t>,
        obs: Var<'t>,
        observed: &[bool],
    ) -> BeliefVars<'t> {
        if observed.iter().all(|&o| !o) {
            return *prior;
        }
        let (w, v) = self.encode(p, obs);
        layers::observe(prior, w, v, observed)
    }

    /// Task posterior from a context set of transitions, each `[B, 2Do + Da]`
    /// laid out as `[o_t, a_t, o_{t+1}]`, with per-row validity.
    pub fn infer_task<'t>(
        &self,
        p: &Bound<'t>,
        context: &[(Var<'t>, Vec<bool>)],
        rows: usize,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let hip = self
            .nets
            .hip
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no task encoder", self.kind())))?;
        let m = self.spec.task_dim;
        let elems: Vec<SetElement<'t>> = context
            .iter()
            .map(|(x, valid)| {
                let (r, s) = hip.context.forward(p, *x);
                SetElement {
                    value: r,
                    var: s,
                    weight: weight_of(p, valid, m),
                }
            })
            .collect();
        Ok(layers::aggregate(
            p.fill(rows, m, 0.0),
            p.fill(rows, m, 1.0),
            &elems,
        ))
    }

    /// Additive prediction terms of a HiP-RSSM task belief.
    pub fn hip_task_term<'t>(
        &self,
        p: &Bound<'t>,
        mean: Var<'t>,
        var: Var<'t>,
    ) -> Result<BeliefVars<'t>> {
        let hip = self
            .nets
            .hip
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no task transform", self.kind())))?;
        hip.task.forward(p, &TaskInput::Diag { mean, var })
    }

    fn slow(&self) -> Result<&SlowNets> {
        self.nets
            .slow
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no slow time scale", self.kind())))
    }

    /// Abstract action of a window from its actions `[B, Da]` in order.
    pub fn abstract_action<'t>(
        &self,
        p: &Bound<'t>,
        actions: &[Var<'t>],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let indexed: Vec<(Var<'t>, usize)> = actions
            .iter()
            .enumerate()
            .map(|(j, a)| (*a, j + 1))
            .collect();
        self.abstract_action_indexed(p, &indexed)
    }

    /// Abstract action from `(action, position in window)` pairs, with
    /// positions starting at one. The pair order does not matter.
    pub fn abstract_action_indexed<'t>(
        &self,
        p: &Bound<'t>,
        actions: &[(Var<'t>, usize)],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let slow = self.slow()?;
        let rows = actions.first().map_or(1, |a| a.0.rows());
        let te = TimeEncoding::new(self.spec.window);
        let elems: Vec<SetElement<'t>> = actions
            .iter()
            .map(|&(a, j)| {
                let x = p.tape().concat(&[a, time_features(p, &te, j, rows)]);
                let (r, s) = slow.action.forward(p, x);
                SetElement {
                    value: r,
                    var: s,
                    weight: None,
                }
            })
            .collect();
        let m = self.spec.task_dim;
        Ok(layers::aggregate(
            p.fill(rows, m, 0.0),
            p.fill(rows, m, 1.0),
            &elems,
        ))
    }

    /// Abstract observation and its variance for `obs: [B, Do]` at position
    /// `j` (from one) of its window.
    pub fn abstract_observation<'t>(
        &self,
        p: &Bound<'t>,
        obs: Var<'t>,
        j: usize,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let slow = self.slow()?;
        let te = TimeEncoding::new(self.spec.window);
        let x = p
            .tape()
            .concat(&[obs, time_features(p, &te, j, obs.rows())]);
        Ok(slow.obs.forward(p, x))
    }

    /// Prior of the slow state for the next window.
    pub fn task_predict<'t>(
        &self,
        p: &Bound<'t>,
        task_post: &BeliefVars<'t>,
        action_mean: Var<'t>,
        action_var: Var<'t>,
    ) -> Result<BeliefVars<'t>> {
        let slow = self.slow()?;
        let blocks = slow.transition.forward(p, task_post.mean());
        let term = slow.control.forward(
            p,
            &TaskInput::Diag {
                mean: action_mean,
                var: action_var,
            },
        )?;
        let terms = PredictTerms {
            control: None,
            task: Some(term),
            noise: Some(slow.noise.forward(p)),
        };
        Ok(layers::predict(task_post, &blocks, terms))
    }

    /// Slow-state posterior from the window's observations `[B, Do]` (in
    /// window order) with per-row validity.
    pub fn task_update<'t>(
        &self,
        p: &Bound<'t>,
        task_prior: &BeliefVars<'t>,
        obs: &[(Var<'t>, Vec<bool>)],
    ) -> Result<BeliefVars<'t>> {
        let indexed: Vec<(Var<'t>, Vec<bool>, usize)> = obs
            .iter()
            .enumerate()
            .map(|(j, (o, v))| (*o, v.clone(), j + 1))
            .collect();
        self.task_update_indexed(p, task_prior, &indexed)
    }

    /// Slow-state posterior from `(observation, validity, position)` triples
    /// in any order. Positions start at one.
    pub fn task_update_indexed<'t>(
        &self,
        p: &Bound<'t>,
        task_prior: &BeliefVars<'t>,
        obs: &[(Var<'t>, Vec<bool>, usize)],
    ) -> Result<BeliefVars<'t>> {
        let m = self.spec.task_dim;
        let mut elems = Vec::with_capacity(obs.len());
        for (o, valid, j) in obs {
            if valid.iter().all(|&v| !v) {
                continue;
            }
            let (r, s) = self.abstract_observation(p, *o, *j)?;
            elems.push(SetElement {
                value: r,
                var: s,
                weight: weight_of(p, valid, m),
            });
        }
        Ok(layers::condition_set(task_prior, &elems))
    }

    /// Additive prediction terms of the slow state on the fast state.
    pub fn mts3_task_term<'t>(
        &self,
        p: &Bound<'t>,
        task_prior: &BeliefVars<'t>,
    ) -> Result<BeliefVars<'t>> {
        self.slow()?.task.forward(p, &TaskInput::Split(*task_prior))
    }
}

/// 0/1 weights `[B, width]` for rows of `valid`, or `None` when all are set.
fn weight_of<'t>(p: &Bound<'t>, valid: &[bool], width: usize) -> Option<Var<'t>> {
    if valid.iter().all(|&v| v) {
        return None;
    }
    let data: Vec<f64> = valid
        .iter()
        .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, width))
        .collect();
    Some(p.constant(
        crate::autodiff::Tensor::new(vec![valid.len(), width], data).expect("weight shape"),
    ))
}

fn time_features<'t>(p: &Bound<'t>, te: &TimeEncoding, t: usize, rows: usize) -> Var<'t> {
    let f = te.features(t);
    let data: Vec<f64> = (0..rows).flat_map(|_| f).collect();
    p.constant(crate::autodiff::Tensor::new(vec![rows, f.len()], data).expect("time shape"))
}
