use super::{Model, ModelKind};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gaussian::FactorizedBelief;
use crate::nets::{BeliefVars, Bound};

/// A batch of equally long sequences, stored time-major.
///
/// Observations of unobserved steps are replaced by zeros on construction,
/// so whatever they held (including NaN) never reaches a cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    obs: Vec<Tensor>,
    actions: Vec<Tensor>,
    observed: Vec<Vec<bool>>,
    rows: usize,
}

impl SequenceBatch {
    /// `obs[b][t]`, `actions[b][t]` and `observed[b][t]` for row `b` and
    /// step `t`. `actions[b][t]` is applied between steps `t` and `t + 1`.
    pub fn new(
        obs: &[Vec<Vec<f64>>],
        actions: &[Vec<Vec<f64>>],
        observed: &[Vec<bool>],
    ) -> Result<Self> {
        let rows = obs.len();
        if rows == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        if actions.len() != rows || observed.len() != rows {
            return Err(Error::ShapeMismatch(
                "obs, actions and mask disagree on batch size".into(),
            ));
        }
        let len = obs[0].len();
        let do_ = obs[0].first().map_or(0, |o| o.len());
        let da = actions[0].first().map_or(0, |a| a.len());
        for b in 0..rows {
            if obs[b].len() != len || actions[b].len() != len || observed[b].len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "row {b} has a different length"
                )));
            }
            if obs[b].iter().any(|o| o.len() != do_) || actions[b].iter().any(|a| a.len() != da) {
                return Err(Error::ShapeMismatch(format!(
                    "row {b} has inconsistent widths"
                )));
            }
        }
        let mut o_t = Vec::with_capacity(len);
        let mut a_t = Vec::with_capacity(len);
        let mut m_t = Vec::with_capacity(len);
        for t in 0..len {
            let mut od = Vec::with_capacity(rows * do_);
            let mut ad = Vec::with_capacity(rows * da);
            let mut mask = Vec::with_capacity(rows);
            for b in 0..rows {
                let seen = observed[b][t];
                if seen {
                    od.extend_from_slice(&obs[b][t]);
                } else {
                    od.extend(std::iter::repeat_n(0.0, do_));
                }
                ad.extend_from_slice(&actions[b][t]);
                mask.push(seen);
            }
            o_t.push(Tensor::new(vec![rows, do_], od)?);
            a_t.push(Tensor::new(vec![rows, da], ad)?);
            m_t.push(mask);
        }
        Ok(SequenceBatch {
            obs: o_t,
            actions: a_t,
            observed: m_t,
            rows,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.first().map_or(0, |o| o.cols())
    }

    pub fn action_dim(&self) -> usize {
        self.actions.first().map_or(0, |a| a.cols())
    }

    pub fn obs_at(&self, t: usize) -> &Tensor {
        &self.obs[t]
    }

    pub fn action_at(&self, t: usize) -> &Tensor {
        &self.actions[t]
    }

    pub fn observed_at(&self, t: usize) -> &[bool] {
        &self.observed[t]
    }

    /// Steps `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> SequenceBatch {
        SequenceBatch {
            obs: self.obs[start..end].to_vec(),
            actions: self.actions[start..end].to_vec(),
            observed: self.observed[start..end].to_vec(),
            rows: self.rows,
        }
    }
}

/// Slow-scale state handed from one chunk of a sequence to the next.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskCarry {
    None,
    /// HiP-RSSM task belief for the next window, per row.
    Hip {
        mean: Vec<Vec<f64>>,
        var: Vec<Vec<f64>>,
    },
    /// MTS3 slow-state posterior of the last window, per row.
    Mts3(Vec<FactorizedBelief>),
}

/// Detached state at the end of a chunk: the prior for the next step and
/// the slow-scale state. Chunks must end on window boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct CarryState {
    pub prior: Vec<FactorizedBelief>,
    pub task: TaskCarry,
}

/// Slow-scale quantities of one window.
#[derive(Clone, Copy, Debug)]
pub enum WindowTask<'t> {
    Hip {
        mean: Var<'t>,
        var: Var<'t>,
    },
    Mts3 {
        action_mean: Var<'t>,
        action_var: Var<'t>,
        prior: BeliefVars<'t>,
        post: BeliefVars<'t>,
    },
}

/// Everything a forward pass produces, all on the tape.
pub struct Forward<'t> {
    /// Decoded prior of every step, `[B, Do]`.
    pub pred_mean: Vec<Var<'t>>,
    pub pred_var: Vec<Var<'t>>,
    pub priors: Vec<BeliefVars<'t>>,
    pub posts: Vec<BeliefVars<'t>>,
    pub windows: Vec<WindowTask<'t>>,
    /// Prior for the step after the last one.
    pub next_prior: BeliefVars<'t>,
    next_task: TaskState<'t>,
}

#[derive(Clone, Copy)]
enum TaskState<'t> {
    None,
    Hip(Var<'t>, Var<'t>),
    Mts3(BeliefVars<'t>),
}

impl Forward<'_> {
    /// Detached state for continuing after the last step.
    pub fn carry(&self) -> CarryState {
        let rows_of = |v: Var<'_>| -> Vec<Vec<f64>> {
            let t = v.value();
            (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
        };
        CarryState {
            prior: self.next_prior.to_beliefs(),
            task: match self.next_task {
                TaskState::None => TaskCarry::None,
                TaskState::Hip(m, v) => TaskCarry::Hip {
                    mean: rows_of(m),
                    var: rows_of(v),
                },
                TaskState::Mts3(b) => TaskCarry::Mts3(b.to_beliefs()),
            },
        }
    }
}

impl Model {
    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        if batch.obs_dim() != self.spec.obs_dim {
            return Err(Error::DimMismatch {
                expected: self.spec.obs_dim,
                got: batch.obs_dim(),
            });
        }
        if self.kind() != ModelKind::Rkn && batch.action_dim() != self.spec.action_dim {
            return Err(Error::DimMismatch {
                expected: self.spec.action_dim,
                got: batch.action_dim(),
            });
        }
        Ok(())
    }

    /// Runs the cell over every step of `batch`, starting from `carry` or
    /// from the initial belief.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        batch: &SequenceBatch,
        carry: Option<&CarryState>,
    ) -> Result<Forward<'t>> {
        self.check_batch(batch)?;
        let tape: &'t Tape = p.tape();
        let rows = batch.rows();
        let d = self.spec.latent_dim;
        let m = self.spec.task_dim;
        let kind = self.kind();
        let window = self.spec.segment();

        let mut prior = match carry {
            Some(c) => {
                if c.prior.len() != rows {
                    return Err(Error::DimMismatch {
                        expected: rows,
                        got: c.prior.len(),
                    });
                }
                BeliefVars::constant_batch(tape, &c.prior)
            }
            None => BeliefVars::isotropic(tape, rows, d, self.spec.initial_var),
        };
        let mut task = match (kind, carry.map(|c| &c.task)) {
            (ModelKind::HipRssm, Some(TaskCarry::Hip { mean, var })) => TaskState::Hip(
                tape.constant(Tensor::from_rows(mean)?),
                tape.constant(Tensor::from_rows(var)?),
            ),
            (ModelKind::HipRssm, _) => TaskState::Hip(p.fill(rows, m, 0.0), p.fill(rows, m, 1.0)),
            (ModelKind::Mts3, Some(TaskCarry::Mts3(b))) => {
                TaskState::Mts3(BeliefVars::constant_batch(tape, b))
            }
            (ModelKind::Mts3, _) => TaskState::Mts3(BeliefVars::isotropic(tape, rows, m, 1.0)),
            _ => TaskState::None,
        };

        let len = batch.len();
        let mut out = Forward {
            pred_mean: Vec::with_capacity(len),
            pred_var: Vec::with_capacity(len),
            priors: Vec::with_capacity(len),
            posts: Vec::with_capacity(len),
            windows: Vec::new(),
            next_prior: prior,
            next_task: task,
        };
        let mut task_term: Option<BeliefVars<'t>> = None;
        let mut task_prior: Option<BeliefVars<'t>> = None;
        let mut window_start = 0;

        for t in 0..len {
            if let Some(w) = window {
                if t % w == 0 {
                    window_start = t;
                    let end = (t + w).min(len);
                    match task {
                        TaskState::Hip(mean, var) => {
                            task_term = Some(self.hip_task_term(p, mean, var)?);
                            out.windows.push(super::WindowTask::Hip { mean, var });
                        }
                        TaskState::Mts3(post) => {
                            let actions: Vec<Var<'t>> = (t..end)
                                .map(|s| tape.constant(batch.action_at(s).clone()))
                                .collect();
                            let (am, av) = self.abstract_action(p, &actions)?;
                            let pr = self.task_predict(p, &post, am, av)?;
                            task_term = Some(self.mts3_task_term(p, &pr)?);
                            task_prior = Some(pr);
                            out.windows.push(super::WindowTask::Mts3 {
                                action_mean: am,
                                action_var: av,
                                prior: pr,
                                post: pr,
                            });
                        }
                        TaskState::None => {}
                    }
                }
            }

            let (mean, var) = self.decode(p, &prior);
            out.pred_mean.push(mean);
            out.pred_var.push(var);
            out.priors.push(prior);
            let obs = tape.constant(batch.obs_at(t).clone());
            let post = self.update(p, &prior, obs, batch.observed_at(t));
            out.posts.push(post);

            let window_end = window.is_some_and(|w| (t + 1) % w == 0) || t + 1 == len;
            if window.is_some() && window_end {
                match task {
                    TaskState::Hip(..) => {
                        let context: Vec<(Var<'t>, Vec<bool>)> = (window_start..t)
                            .map(|s| {
                                let x = tape.concat(&[
                                    tape.constant(batch.obs_at(s).clone()),
                                    tape.constant(batch.action_at(s).clone()),
                                    tape.constant(batch.obs_at(s + 1).clone()),
                                ]);
                                let valid = batch
                                    .observed_at(s)
                                    .iter()
                                    .zip(batch.observed_at(s + 1))
                                    .map(|(a, b)| *a && *b)
                                    .collect();
                                (x, valid)
                            })
                            .collect();
                        let (mean, var) = self.infer_task(p, &context, rows)?;
                        task = TaskState::Hip(mean, var);
                        // the next window's task already shapes the step into it
                        task_term = Some(self.hip_task_term(p, mean, var)?);
                    }
                    TaskState::Mts3(_) => {
                        let pr = task_prior.expect("set at window start");
                        let obs: Vec<(Var<'t>, Vec<bool>)> = (window_start..=t)
                            .map(|s| {
                                (
                                    tape.constant(batch.obs_at(s).clone()),
                                    batch.observed_at(s).to_vec(),
                                )
                            })
                            .collect();
                        let post = self.task_update(p, &pr, &obs)?;
                        if let Some(super::WindowTask::Mts3 { post: slot, .. }) =
                            out.windows.last_mut()
                        {
                            *slot = post;
                        }
                        task = TaskState::Mts3(post);
                    }
                    TaskState::None => {}
                }
            }

            let action = match kind {
                ModelKind::Rkn => None,
                _ => Some(tape.constant(batch.action_at(t).clone())),
            };
            let mut next = self.predict(p, &post, action, task_term.as_ref())?;
            if kind == ModelKind::Mts3 && window_end {
                next = next.stop_gradient();
            }
            prior = next;
        }
        out.next_prior = prior;
        out.next_task = task;
        Ok(out)
    }
}
