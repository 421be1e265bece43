use ndarray::s;

use super::gradients::{eag_gradient, policy_gradient, reward_gradient, sag_gradient, GuideGradient};
use super::{GuidanceConfig, GuideKind};
use crate::agent::{AgentError, Policy, StateActionFn};
use crate::numerics::Tensor;
use crate::worldmodel::{
    standard_normal_row, ReverseHook, Sampler, SegmentRng, StepContext, TrajectorySegment, WorldModelError,
};

/// The networks a guide may query. Only the one the configured kind needs
/// has to be present.
#[derive(Clone, Copy, Default)]
pub struct GuideNets<'a> {
    pub advantage: Option<&'a dyn StateActionFn>,
    pub reward: Option<&'a dyn StateActionFn>,
    pub policy: Option<&'a Policy>,
}

/// Where the action coordinates come from.
#[derive(Clone)]
pub enum ActionSource<'a> {
    /// Coupled to the policy during denoising and resampled at the end.
    Policy(&'a Policy),
    /// Held fixed at these raw `count × H·d_a` values.
    Fixed(Tensor),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GuideDiagnostics {
    /// Mean guided quantity at the posterior means, over steps and segments.
    pub mean_value: f64,
    pub mean_weight: f64,
    pub mean_grad_norm: f64,
    /// Mean `A_ω` over the final segments, when an advantage net is given.
    pub final_advantage: Option<f64>,
    pub zeroed_steps: usize,
    pub resampled_actions: usize,
}

#[derive(Debug, Clone)]
pub struct GuidedBatch {
    pub segments: Vec<TrajectorySegment>,
    pub diagnostics: GuideDiagnostics,
}

fn guide_err(e: AgentError) -> WorldModelError {
    WorldModelError::Guidance(e.to_string())
}

/// One coupling update of raw actions given raw states.
///
/// For `step > 1` every action ascends the policy log-density by
/// `strength · β_step · ∇_a log π(a|s)`. At `step == 1` the actions are
/// replaced by the reparameterized policy sample `μ(s) + σ ξ`. Rows whose
/// score is non-finite are also resampled. Returns the new actions and the
/// number of rows resampled for that reason.
pub fn couple_actions(
    policy: &Policy,
    states: &Tensor,
    actions: &Tensor,
    step: usize,
    beta: f64,
    strength: f64,
    noise: &Tensor,
) -> Result<(Tensor, usize), AgentError> {
    let fresh = policy.sample_with_noise(states, noise)?;
    if step <= 1 {
        return Ok((fresh, 0));
    }
    let score = policy.action_score(states, actions)?;
    let mut out = actions + &(score * (strength * beta));
    let mut resampled = 0;
    for r in 0..out.nrows() {
        if !out.row(r).iter().all(|v| v.is_finite()) {
            out.row_mut(r).assign(&fresh.row(r));
            resampled += 1;
        }
    }
    if resampled > 0 {
        log::warn!("{resampled} coupled actions were non-finite and got resampled");
    }
    Ok((out, resampled))
}

struct GuidedHook<'a> {
    sampler: Sampler<'a>,
    cfg: &'a GuidanceConfig,
    nets: GuideNets<'a>,
    coupling: Option<&'a Policy>,
    /// Normalized start state per segment.
    starts: Tensor,
    /// Persistent action noise per segment, `count × H·d_a`.
    xi: Tensor,
    pending_actions: Option<Tensor>,
    value_sum: f64,
    weight_sum: f64,
    norm_sum: f64,
    evaluations: usize,
    zeroed: usize,
    resampled: usize,
}

impl GuidedHook<'_> {
    fn inpaint(&self, rows: &[usize], x: &mut Tensor) {
        let cols = self.sampler.layout.state_cols(0);
        for (r, &seg) in rows.iter().enumerate() {
            x.slice_mut(s![r, cols.clone()]).assign(&self.starts.row(seg));
        }
    }

    /// Raw acting states (`n·H × d_s`) and actions (`n·H × d_a`), row-major
    /// in (segment, t).
    fn raw_steps(&self, x: &Tensor, cond: &Tensor) -> (Tensor, Tensor) {
        let l = self.sampler.layout;
        let (n, h) = (x.nrows(), l.horizon);
        let mut st = Tensor::zeros((n * h, l.state_dim));
        let mut ac = Tensor::zeros((n * h, l.action_dim));
        for r in 0..n {
            for t in 0..h {
                st.row_mut(r * h + t).assign(&x.slice(s![r, l.state_cols(t)]));
                ac.row_mut(r * h + t).assign(&cond.slice(s![r, l.action_cols(t)]));
            }
        }
        let norm = self.sampler.normalizer;
        (norm.denormalize_states(&st), norm.denormalize_actions(&ac))
    }

    fn write_actions(&self, raw: &Tensor, cond: &mut Tensor) {
        let l = self.sampler.layout;
        let h = l.horizon;
        let normed = self.sampler.normalizer.normalize_actions(raw);
        for r in 0..cond.nrows() {
            for t in 0..h {
                cond.slice_mut(s![r, l.action_cols(t)]).assign(&normed.row(r * h + t));
            }
        }
    }

    fn noise_for(&self, rows: &[usize]) -> Tensor {
        let l = self.sampler.layout;
        let (h, da) = (l.horizon, l.action_dim);
        let mut out = Tensor::zeros((rows.len() * h, da));
        for (r, &seg) in rows.iter().enumerate() {
            for t in 0..h {
                out.row_mut(r * h + t).assign(&self.xi.slice(s![seg, t * da..(t + 1) * da]));
            }
        }
        out
    }

    fn gradient(&self, states: &Tensor, actions: &Tensor) -> Result<GuideGradient, WorldModelError> {
        let missing = |what: &str| WorldModelError::Guidance(format!("guide `{}` needs {what}", self.cfg.kind));
        let clip = self.cfg.clip;
        let g = match self.cfg.kind {
            GuideKind::Sag => sag_gradient(self.nets.advantage.ok_or_else(|| missing("an advantage net"))?, states, actions, clip),
            GuideKind::Eag => eag_gradient(self.nets.advantage.ok_or_else(|| missing("an advantage net"))?, states, actions, clip),
            GuideKind::Reward => reward_gradient(self.nets.reward.ok_or_else(|| missing("a reward model"))?, states, actions, clip),
            GuideKind::PolicyOnly => policy_gradient(self.nets.policy.ok_or_else(|| missing("a policy"))?, states, actions, clip),
            GuideKind::None => unreachable!("inert guides never evaluate"),
        };
        g.map_err(guide_err)
    }
}

impl ReverseHook for GuidedHook<'_> {
    fn init(
        &mut self,
        ctx: &StepContext<'_>,
        x: &mut Tensor,
        cond: &mut Tensor,
        rngs: &mut [SegmentRng],
    ) -> Result<(), WorldModelError> {
        self.inpaint(ctx.rows, x);
        if let Some(policy) = self.coupling {
            let width = self.xi.ncols();
            for (r, &seg) in ctx.rows.iter().enumerate() {
                let z = standard_normal_row(&mut rngs[r].action, width);
                self.xi.row_mut(seg).assign(&ndarray::ArrayView1::from(&z));
            }
            let (states, _) = self.raw_steps(x, cond);
            let acts = policy.sample_with_noise(&states, &self.noise_for(ctx.rows)).map_err(guide_err)?;
            self.write_actions(&acts, cond);
        }
        Ok(())
    }

    fn shift(
        &mut self,
        ctx: &StepContext<'_>,
        mean: &Tensor,
        cond: &Tensor,
    ) -> Result<Option<Tensor>, WorldModelError> {
        if self.cfg.is_inert() {
            return Ok(None);
        }
        let (states, actions) = self.raw_steps(mean, cond);
        let g = self.gradient(&states, &actions)?;
        let l = self.sampler.layout;
        let h = l.horizon;
        let scale = self.cfg.alpha * ctx.posterior_variance;
        let s_std = self.sampler.normalizer.state.std();
        let a_std = self.sampler.normalizer.action.std();
        let mut delta = Tensor::zeros(mean.dim());
        let mut act_delta = Tensor::zeros(cond.dim());
        for r in 0..mean.nrows() {
            for t in 0..h {
                let row = r * h + t;
                for (k, c) in l.state_cols(t).enumerate() {
                    delta[[r, c]] = scale * g.states[[row, k]] * s_std[k];
                }
                for (k, c) in l.action_cols(t).enumerate() {
                    act_delta[[r, c]] = scale * g.actions[[row, k]] * a_std[k];
                }
                self.norm_sum += g.step_norm(row);
            }
        }
        self.value_sum += g.values.iter().sum::<f64>();
        self.weight_sum += g.weights.iter().sum::<f64>();
        self.evaluations += g.values.len();
        self.zeroed += g.zeroed;
        self.pending_actions = self.cfg.apply_to_actions.then_some(act_delta);
        Ok(Some(delta))
    }

    fn after_step(
        &mut self,
        ctx: &StepContext<'_>,
        x: &mut Tensor,
        cond: &mut Tensor,
        _rngs: &mut [SegmentRng],
    ) -> Result<(), WorldModelError> {
        self.inpaint(ctx.rows, x);
        if let Some(delta) = self.pending_actions.take() {
            *cond += &delta;
        }
        if let Some(policy) = self.coupling {
            let (states, actions) = self.raw_steps(x, cond);
            let (acts, resampled) = couple_actions(
                policy,
                &states,
                &actions,
                ctx.step,
                ctx.beta,
                self.cfg.couple_strength,
                &self.noise_for(ctx.rows),
            )
            .map_err(guide_err)?;
            self.resampled += resampled;
            self.write_actions(&acts, cond);
        }
        Ok(())
    }
}

/// Guided reverse sampling of `starts.nrows()` segments, each starting
/// exactly at its raw start state and driven by its own noise streams
/// derived from `seed`.
pub fn guided_sample(
    sampler: Sampler<'_>,
    cfg: &GuidanceConfig,
    nets: GuideNets<'_>,
    actions: ActionSource<'_>,
    starts: &Tensor,
    seed: u64,
) -> Result<GuidedBatch, WorldModelError> {
    cfg.validate().map_err(WorldModelError::Guidance)?;
    let l = sampler.layout;
    let count = starts.nrows();
    if starts.ncols() != l.state_dim {
        return Err(WorldModelError::Segment(format!(
            "start states have width {}, model expects {}",
            starts.ncols(),
            l.state_dim
        )));
    }
    let (cond, coupling) = match actions {
        ActionSource::Policy(p) => {
            if !p.is_gaussian() || p.state_dim() != l.state_dim || p.action_dim() != l.action_dim {
                return Err(WorldModelError::Guidance(
                    "action coupling needs a Gaussian policy matching the model dimensions".into(),
                ));
            }
            (Tensor::zeros((count, l.cond_dim())), Some(p))
        }
        ActionSource::Fixed(a) => {
            if a.dim() != (count, l.cond_dim()) {
                return Err(WorldModelError::Segment(format!(
                    "fixed actions are {:?}, expected {:?}",
                    a.dim(),
                    (count, l.cond_dim())
                )));
            }
            (sampler.normalize_flat_actions(&a), None)
        }
    };
    let mut hook = GuidedHook {
        sampler,
        cfg,
        nets,
        coupling,
        starts: sampler.normalizer.normalize_states(starts),
        xi: Tensor::zeros((count, l.cond_dim())),
        pending_actions: None,
        value_sum: 0.0,
        weight_sum: 0.0,
        norm_sum: 0.0,
        evaluations: 0,
        zeroed: 0,
        resampled: 0,
    };
    let mut rngs = SegmentRng::batch(seed, count);
    let (x, c) = sampler.sample_with_hook(&cond, &mut hook, &mut rngs)?;
    let segments = l.decode(&x, &c, sampler.normalizer, Some(starts))?;
    let evals = hook.evaluations.max(1) as f64;
    let final_advantage = match nets.advantage {
        Some(f) if count > 0 => {
            let states = stack(segments.iter().map(|s| s.acting_states()));
            let acts = stack(segments.iter().map(|s| s.actions.clone()));
            let v = f.values(&states, &acts).map_err(guide_err)?;
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
        _ => None,
    };
    Ok(GuidedBatch {
        segments,
        diagnostics: GuideDiagnostics {
            mean_value: hook.value_sum / evals,
            mean_weight: hook.weight_sum / evals,
            mean_grad_norm: hook.norm_sum / evals,
            final_advantage,
            zeroed_steps: hook.zeroed,
            resampled_actions: hook.resampled,
        },
    })
}

fn stack(parts: impl Iterator<Item = Tensor>) -> Tensor {
    let parts: Vec<Tensor> = parts.collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("same widths")
}

#[cfg(test)]
mod tests;
