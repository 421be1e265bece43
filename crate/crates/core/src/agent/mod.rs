//! Actor-critic agent: policy, value critic, advantage network, reward model
//! and the update that improves them on a batch of segments.

mod gae;
mod nets;
mod policy;

pub use gae::{gae_advantages, gae_from_values};
pub use nets::{
    advantage_and_input_grad, center_advantage, AdvantageNet, CenteredAdvantage, LinearFn, RewardModel,
    StateActionFn, StateActionNet, TabularFn, ValueCritic,
};
pub use policy::{CategoricalPolicy, GaussianPolicy, Policy, PolicyVars, LOG_STD_RANGE};

use rand::Rng;

use crate::envs::ActionSpace;
use crate::numerics::{
    clip_global_norm, Adam, AdamConfig, Checkpoint, Graph, NumericsError, Parameterized, StepOutcome, Tensor,
};
use crate::worldmodel::TrajectorySegment;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing bootstrap state: {0}")]
    MissingBootstrap(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_coef: f64,
    pub critic_coef: f64,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub advantage_lr: f64,
    pub reward_lr: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub max_grad_norm: f64,
    /// Standardize advantages inside the policy loss.
    pub normalize_advantages: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            entropy_coef: 0.01,
            critic_coef: 0.5,
            policy_lr: 3e-4,
            critic_lr: 1e-3,
            advantage_lr: 1e-3,
            reward_lr: 1e-3,
            hidden: vec![64, 64],
            init_log_std: -0.5,
            max_grad_norm: 1.0,
            normalize_advantages: false,
        }
    }
}

/// Losses and diagnostics of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub entropy: f64,
    pub critic_loss: f64,
    pub advantage_loss: f64,
    pub mean_advantage: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub policy: Policy,
    pub critic: ValueCritic,
    pub advantage: AdvantageNet,
    pub reward_model: RewardModel,
    policy_opt: Adam,
    critic_opt: Adam,
    advantage_opt: Adam,
    reward_opt: Adam,
}

fn adam_for(module: &impl Parameterized, lr: f64) -> Adam {
    Adam::new(AdamConfig::with_lr(lr), &module.parameters())
}

fn stack_rows(parts: impl Iterator<Item = Tensor>) -> Tensor {
    let parts: Vec<Tensor> = parts.collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("same widths")
}

impl Agent {
    pub fn new(state_dim: usize, space: &ActionSpace, config: AgentConfig, rng: &mut impl Rng) -> Self {
        let policy = Policy::for_space(state_dim, space, &config.hidden, config.init_log_std, rng);
        let critic = ValueCritic::new(state_dim, &config.hidden, rng);
        let advantage = AdvantageNet(StateActionNet::for_policy(&policy, &config.hidden, rng));
        let reward_model = RewardModel(StateActionNet::for_policy(&policy, &config.hidden, rng));
        Self::from_parts(config, policy, critic, advantage, reward_model)
    }

    pub fn from_parts(
        config: AgentConfig,
        policy: Policy,
        critic: ValueCritic,
        advantage: AdvantageNet,
        reward_model: RewardModel,
    ) -> Self {
        Self {
            policy_opt: adam_for(&policy, config.policy_lr),
            critic_opt: adam_for(&critic, config.critic_lr),
            advantage_opt: adam_for(&advantage, config.advantage_lr),
            reward_opt: adam_for(&reward_model, config.reward_lr),
            config,
            policy,
            critic,
            advantage,
            reward_model,
        }
    }

    /// One policy-gradient step: loss `-mean(Â log π) - c_ent · mean(entropy)`.
    /// Returns `(loss, mean entropy, outcome)`.
    pub fn update_policy(
        &mut self,
        states: &Tensor,
        actions: &Tensor,
        advantages: &[f64],
    ) -> Result<(f64, f64, StepOutcome), AgentError> {
        let n = advantages.len();
        if n == 0 {
            return Err(AgentError::EmptyBatch);
        }
        let mut adv = advantages.to_vec();
        if self.config.normalize_advantages && n > 1 {
            let mean = adv.iter().sum::<f64>() / n as f64;
            let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
        }
        let mut g = Graph::new();
        let vars = self.policy.bind(&mut g);
        let s = g.constant(states.clone());
        let (logp, entropy) = self.policy.log_prob_and_entropy(&mut g, &vars, s, actions)?;
        let w = g.constant(Tensor::from_shape_vec((n, 1), adv).expect("column"));
        let weighted = g.mul(logp, w)?;
        let pg = g.mean_all(weighted);
        let pg = g.scale(pg, -1.0);
        let ent = g.mean_all(entropy);
        let bonus = g.scale(ent, -self.config.entropy_coef);
        let loss = g.add(pg, bonus)?;
        let (loss_value, ent_value) = (g.scalar(loss), g.scalar(ent));
        if !loss_value.is_finite() || g.nonfinite().is_some() {
            log::warn!("policy loss is not finite; step skipped");
            return Ok((loss_value, ent_value, StepOutcome::Skipped));
        }
        let grads = g.backward(loss)?;
        let mut grads = self.policy.collect_grads(&grads, &vars);
        clip_global_norm(&mut grads, self.config.max_grad_norm);
        let outcome = self.policy_opt.step(self.policy.parameters_mut(), &grads)?;
        self.policy.clamp_log_std();
        Ok((loss_value, ent_value, outcome))
    }

    pub fn update_critic(&mut self, states: &Tensor, targets: &[f64]) -> Result<(f64, StepOutcome), AgentError> {
        let (coef, clip) = (self.config.critic_coef, self.config.max_grad_norm);
        self.critic.regress(&mut self.critic_opt, states, targets, coef, clip)
    }

    pub fn update_advantage(
        &mut self,
        states: &Tensor,
        actions: &Tensor,
        targets: &[f64],
    ) -> Result<(f64, StepOutcome), AgentError> {
        let clip = self.config.max_grad_norm;
        self.advantage.0.regress(&mut self.advantage_opt, states, actions, targets, clip)
    }

    /// Fits the reward model; callers pass real transitions only.
    pub fn update_reward_model(
        &mut self,
        states: &Tensor,
        actions: &Tensor,
        rewards: &[f64],
    ) -> Result<(f64, StepOutcome), AgentError> {
        let clip = self.config.max_grad_norm;
        self.reward_model.0.regress(&mut self.reward_opt, states, actions, rewards, clip)
    }

    /// GAE under the current critic, then one optimizer step each for the
    /// policy, the critic and the advantage network.
    pub fn a2c_update(&mut self, segments: &[TrajectorySegment]) -> Result<UpdateStats, AgentError> {
        if segments.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let mut advantages = Vec::new();
        let mut targets = Vec::new();
        for seg in segments {
            let (adv, tgt) = gae_advantages(seg, &self.critic, self.config.gamma, self.config.lambda)?;
            advantages.extend(adv);
            targets.extend(tgt);
        }
        let states = stack_rows(segments.iter().map(|s| s.acting_states()));
        let actions = stack_rows(segments.iter().map(|s| s.actions.clone()));
        let (policy_loss, entropy, p) = self.update_policy(&states, &actions, &advantages)?;
        let (critic_loss, c) = self.update_critic(&states, &targets)?;
        let (advantage_loss, a) = self.update_advantage(&states, &actions, &advantages)?;
        let skipped = [p, c, a].iter().filter(|o| **o == StepOutcome::Skipped).count();
        Ok(UpdateStats {
            policy_loss,
            entropy,
            critic_loss,
            advantage_loss,
            mean_advantage: advantages.iter().sum::<f64>() / advantages.len() as f64,
            skipped,
        })
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        ck.put_module("policy", &self.policy);
        ck.put_module("critic", &self.critic);
        ck.put_module("advantage", &self.advantage);
        ck.put_module("reward", &self.reward_model);
    }

    /// Loads network weights; optimizer moments restart from zero.
    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<(), AgentError> {
        ck.load_module("policy", &mut self.policy)?;
        ck.load_module("critic", &mut self.critic)?;
        ck.load_module("advantage", &mut self.advantage)?;
        ck.load_module("reward", &mut self.reward_model)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
