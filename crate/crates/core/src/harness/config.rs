//! Run configuration read from flat dotted keys.
//!
//! ```toml
//! env.name = "pendulum-like"
//! run.seed = 3
//! guide.kind = "sag"
//! guide.alpha = 0.5
//! ```
//!
//! Every key has a default, unknown keys are rejected by name, and
//! `guide.alpha` falls back to the default scale of the chosen guide kind.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::agent::AgentConfig;
use crate::guidance::{GuidanceConfig, GuideKind};
use crate::worldmodel::WorldModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env_name: String,
    pub seed: u64,
    /// Real environment steps over the whole run.
    pub total_steps: usize,
    pub steps_per_iter: usize,
    pub buffer_capacity: usize,
    pub horizon: usize,
    pub diffusion_steps: usize,
    pub beta_bounds: Option<(f64, f64)>,
    pub diffusion_epochs: usize,
    pub diffusion_batch: usize,
    pub diffusion_hidden: Vec<usize>,
    pub diffusion_lr: f64,
    pub diffusion_max_grad_norm: f64,
    /// Clamp on the implied clean sample while denoising; 0 turns it off.
    pub x0_clip: f64,
    pub embed_dim: usize,
    pub guide: GuidanceConfig,
    pub agent: AgentConfig,
    /// Reward-model regression steps per outer iteration.
    pub reward_updates: usize,
    /// Critic and `A_ω` refits on real segments per outer iteration.
    pub advantage_updates: usize,
    pub synthetic_batch: usize,
    /// Sample-then-update rounds on synthetic segments per outer iteration.
    pub synthetic_rounds: usize,
    pub eval_episodes: usize,
    /// Evaluate every this many outer iterations (the last one always).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env_name: "point-mass".into(),
            seed: 0,
            total_steps: 50_000,
            steps_per_iter: 2_000,
            buffer_capacity: 100_000,
            horizon: 10,
            diffusion_steps: 100,
            beta_bounds: None,
            diffusion_epochs: 5,
            diffusion_batch: 64,
            diffusion_hidden: vec![128, 128],
            diffusion_lr: 1e-3,
            diffusion_max_grad_norm: 1.0,
            x0_clip: 5.0,
            embed_dim: 16,
            guide: GuidanceConfig::default(),
            // standardized advantages and a looser clip keep the critic from
            // lagging behind returns in the hundreds
            agent: AgentConfig {
                normalize_advantages: true,
                max_grad_norm: 10.0,
                ..AgentConfig::default()
            },
            reward_updates: 20,
            advantage_updates: 20,
            synthetic_batch: 64,
            synthetic_rounds: 10,
            eval_episodes: 10,
            eval_every: 1,
        }
    }
}

/// Every accepted key, in the order they are printed.
pub const KEYS: &[&str] = &[
    "env.name",
    "run.seed",
    "run.total_steps",
    "run.steps_per_iter",
    "run.buffer_capacity",
    "segment.horizon",
    "diffusion.steps",
    "diffusion.beta_start",
    "diffusion.beta_end",
    "diffusion.epochs",
    "diffusion.batch",
    "diffusion.hidden",
    "diffusion.lr",
    "diffusion.max_grad_norm",
    "diffusion.x0_clip",
    "diffusion.embed_dim",
    "guide.kind",
    "guide.alpha",
    "guide.clip",
    "guide.couple_strength",
    "guide.apply_to_actions",
    "agent.gamma",
    "agent.lambda",
    "agent.entropy_coef",
    "agent.critic_coef",
    "agent.policy_lr",
    "agent.critic_lr",
    "agent.advantage_lr",
    "agent.reward_lr",
    "agent.hidden",
    "agent.init_log_std",
    "agent.max_grad_norm",
    "agent.normalize_advantages",
    "agent.reward_updates",
    "agent.advantage_updates",
    "synthetic.batch",
    "synthetic.rounds",
    "eval.episodes",
    "eval.every",
];

fn parse_raw(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn bad(key: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{key}: {msg}"))
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64, HarnessError> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "expected a number")),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize, HarnessError> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(bad(key, "expected a non-negative integer")),
    }
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool, HarnessError> {
    v.as_bool().ok_or_else(|| bad(key, "expected true or false"))
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str, HarnessError> {
    v.as_str().ok_or_else(|| bad(key, "expected a string"))
}

fn as_sizes(key: &str, v: &toml::Value) -> Result<Vec<usize>, HarnessError> {
    let arr = v.as_array().ok_or_else(|| bad(key, "expected an array of layer widths"))?;
    arr.iter().map(|x| as_usize(key, x)).collect()
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let table: toml::Table = text.parse().map_err(|e| HarnessError::Config(format!("{e}")))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        let mut cfg = Self::default();
        cfg.apply(&flat)?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Applies flat key/value pairs. `guide.kind` is applied first so a
    /// missing `guide.alpha` picks that kind's default scale.
    pub fn apply(&mut self, flat: &BTreeMap<String, toml::Value>) -> Result<(), HarnessError> {
        if let Some(v) = flat.get("guide.kind") {
            self.set("guide.kind", v)?;
        }
        for (k, v) in flat.iter().filter(|(k, _)| k.as_str() != "guide.kind") {
            self.set(k, v)?;
        }
        self.validate()
    }

    /// Sets one key; the value uses TOML syntax (`eag` is also accepted
    /// unquoted for string keys).
    pub fn set_str(&mut self, key: &str, raw: &str) -> Result<(), HarnessError> {
        self.set(key, &parse_raw(raw))?;
        self.validate()
    }

    /// Sets several keys and validates once at the end, so paired keys such
    /// as the two beta bounds can be given one at a time. Later pairs win.
    pub fn set_many<K: AsRef<str>, V: AsRef<str>>(&mut self, pairs: &[(K, V)]) -> Result<(), HarnessError> {
        let flat: BTreeMap<String, toml::Value> = pairs
            .iter()
            .map(|(k, v)| (k.as_ref().to_string(), parse_raw(v.as_ref())))
            .collect();
        self.apply(&flat)
    }

    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<(), HarnessError> {
        let a = &mut self.agent;
        match key {
            "env.name" => self.env_name = as_str(key, v)?.to_string(),
            "run.seed" => self.seed = as_usize(key, v)? as u64,
            "run.total_steps" => self.total_steps = as_usize(key, v)?,
            "run.steps_per_iter" => self.steps_per_iter = as_usize(key, v)?,
            "run.buffer_capacity" => self.buffer_capacity = as_usize(key, v)?,
            "segment.horizon" => self.horizon = as_usize(key, v)?,
            "diffusion.steps" => self.diffusion_steps = as_usize(key, v)?,
            "diffusion.beta_start" => {
                let hi = self.beta_bounds.map_or(f64::NAN, |b| b.1);
                self.beta_bounds = Some((as_f64(key, v)?, hi));
            }
            "diffusion.beta_end" => {
                let lo = self.beta_bounds.map_or(f64::NAN, |b| b.0);
                self.beta_bounds = Some((lo, as_f64(key, v)?));
            }
            "diffusion.epochs" => self.diffusion_epochs = as_usize(key, v)?,
            "diffusion.batch" => self.diffusion_batch = as_usize(key, v)?,
            "diffusion.hidden" => self.diffusion_hidden = as_sizes(key, v)?,
            "diffusion.lr" => self.diffusion_lr = as_f64(key, v)?,
            "diffusion.max_grad_norm" => self.diffusion_max_grad_norm = as_f64(key, v)?,
            "diffusion.x0_clip" => self.x0_clip = as_f64(key, v)?,
            "diffusion.embed_dim" => self.embed_dim = as_usize(key, v)?,
            "guide.kind" => {
                let kind: GuideKind = as_str(key, v)?.parse().map_err(|e| bad(key, e))?;
                let keep = self.guide.clone();
                self.guide = GuidanceConfig {
                    clip: keep.clip,
                    couple_strength: keep.couple_strength,
                    apply_to_actions: keep.apply_to_actions,
                    ..GuidanceConfig::for_kind(kind)
                };
            }
            "guide.alpha" => self.guide.alpha = as_f64(key, v)?,
            "guide.clip" => self.guide.clip = as_f64(key, v)?,
            "guide.couple_strength" => self.guide.couple_strength = as_f64(key, v)?,
            "guide.apply_to_actions" => self.guide.apply_to_actions = as_bool(key, v)?,
            "agent.gamma" => a.gamma = as_f64(key, v)?,
            "agent.lambda" => a.lambda = as_f64(key, v)?,
            "agent.entropy_coef" => a.entropy_coef = as_f64(key, v)?,
            "agent.critic_coef" => a.critic_coef = as_f64(key, v)?,
            "agent.policy_lr" => a.policy_lr = as_f64(key, v)?,
            "agent.critic_lr" => a.critic_lr = as_f64(key, v)?,
            "agent.advantage_lr" => a.advantage_lr = as_f64(key, v)?,
            "agent.reward_lr" => a.reward_lr = as_f64(key, v)?,
            "agent.hidden" => a.hidden = as_sizes(key, v)?,
            "agent.init_log_std" => a.init_log_std = as_f64(key, v)?,
            "agent.max_grad_norm" => a.max_grad_norm = as_f64(key, v)?,
            "agent.normalize_advantages" => a.normalize_advantages = as_bool(key, v)?,
            "agent.reward_updates" => self.reward_updates = as_usize(key, v)?,
            "agent.advantage_updates" => self.advantage_updates = as_usize(key, v)?,
            "synthetic.batch" => self.synthetic_batch = as_usize(key, v)?,
            "synthetic.rounds" => self.synthetic_rounds = as_usize(key, v)?,
            "eval.episodes" => self.eval_episodes = as_usize(key, v)?,
            "eval.every" => self.eval_every = as_usize(key, v)?,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown key `{other}`; accepted keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let positive = [
            ("run.steps_per_iter", self.steps_per_iter),
            ("run.buffer_capacity", self.buffer_capacity),
            ("segment.horizon", self.horizon),
            ("diffusion.steps", self.diffusion_steps),
            ("diffusion.batch", self.diffusion_batch),
            ("diffusion.embed_dim", self.embed_dim),
            ("synthetic.batch", self.synthetic_batch),
            ("eval.episodes", self.eval_episodes),
            ("eval.every", self.eval_every),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(bad(key, "must be positive"));
            }
        }
        if !(self.x0_clip.is_finite() && self.x0_clip >= 0.0) {
            return Err(bad("diffusion.x0_clip", "must be finite and non-negative"));
        }
        if let Some((lo, hi)) = self.beta_bounds {
            if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                return Err(bad("diffusion.beta_start", "need 0 < beta_start <= beta_end < 1 with both set"));
            }
        }
        let a = &self.agent;
        for (key, v) in [
            ("agent.gamma", a.gamma),
            ("agent.lambda", a.lambda),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(key, "must lie in [0, 1]"));
            }
        }
        for (key, v) in [
            ("diffusion.lr", self.diffusion_lr),
            ("diffusion.max_grad_norm", self.diffusion_max_grad_norm),
            ("agent.policy_lr", a.policy_lr),
            ("agent.critic_lr", a.critic_lr),
            ("agent.advantage_lr", a.advantage_lr),
            ("agent.reward_lr", a.reward_lr),
            ("agent.max_grad_norm", a.max_grad_norm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(bad(key, "must be positive"));
            }
        }
        self.guide.validate().map_err(HarnessError::Config)?;
        crate::envs::make_continuous_env(&self.env_name).map_err(|e| bad("env.name", e))?;
        Ok(())
    }

    pub fn world_model_config(&self) -> WorldModelConfig {
        WorldModelConfig {
            horizon: self.horizon,
            diffusion_steps: self.diffusion_steps,
            beta_bounds: self.beta_bounds,
            hidden: self.diffusion_hidden.clone(),
            embed_dim: self.embed_dim,
            lr: self.diffusion_lr,
            max_grad_norm: self.diffusion_max_grad_norm,
            x0_clip: (self.x0_clip > 0.0).then_some(self.x0_clip),
        }
    }

    /// Canonical `key = value` listing of every setting.
    pub fn to_flat_string(&self) -> String {
        let a = &self.agent;
        let sizes = |v: &[usize]| format!("[{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "));
        // unset bounds stay unset so the listing parses back to the same config
        let (lo, hi) = self.beta_bounds.map_or((String::new(), String::new()), |(lo, hi)| {
            (format!("{lo:?}"), format!("{hi:?}"))
        });
        let values: Vec<String> = vec![
            format!("{:?}", self.env_name),
            self.seed.to_string(),
            self.total_steps.to_string(),
            self.steps_per_iter.to_string(),
            self.buffer_capacity.to_string(),
            self.horizon.to_string(),
            self.diffusion_steps.to_string(),
            lo,
            hi,
            self.diffusion_epochs.to_string(),
            self.diffusion_batch.to_string(),
            sizes(&self.diffusion_hidden),
            format!("{:?}", self.diffusion_lr),
            format!("{:?}", self.diffusion_max_grad_norm),
            format!("{:?}", self.x0_clip),
            self.embed_dim.to_string(),
            format!("{:?}", self.guide.kind.name()),
            format!("{:?}", self.guide.alpha),
            format!("{:?}", self.guide.clip),
            format!("{:?}", self.guide.couple_strength),
            self.guide.apply_to_actions.to_string(),
            format!("{:?}", a.gamma),
            format!("{:?}", a.lambda),
            format!("{:?}", a.entropy_coef),
            format!("{:?}", a.critic_coef),
            format!("{:?}", a.policy_lr),
            format!("{:?}", a.critic_lr),
            format!("{:?}", a.advantage_lr),
            format!("{:?}", a.reward_lr),
            sizes(&a.hidden),
            format!("{:?}", a.init_log_std),
            format!("{:?}", a.max_grad_norm),
            a.normalize_advantages.to_string(),
            self.reward_updates.to_string(),
            self.advantage_updates.to_string(),
            self.synthetic_batch.to_string(),
            self.synthetic_rounds.to_string(),
            self.eval_episodes.to_string(),
            self.eval_every.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values).filter(|(_, v)| !v.is_empty()) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the canonical listing, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_flat_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// File stem for this run's outputs.
    pub fn run_name(&self) -> String {
        format!("{}_{}_seed{}", self.env_name, self.guide.kind.name(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn dotted_keys_and_tables_both_parse() {
        let a = RunConfig::from_toml_str("guide.kind = \"sag\"\nrun.seed = 4\n").unwrap();
        let b = RunConfig::from_toml_str("[guide]\nkind = \"sag\"\n[run]\nseed = 4\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.guide.kind, GuideKind::Sag);
        assert_eq!(a.guide.alpha, 0.5);
        assert_eq!(a.seed, 4);
    }

    #[test]
    fn explicit_alpha_wins_over_kind_default() {
        let c = RunConfig::from_toml_str("guide.alpha = 0.3\nguide.kind = \"eag\"\n").unwrap();
        assert_eq!(c.guide.alpha, 0.3);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml_str("guide.scale = 2.0").unwrap_err().to_string();
        assert!(err.contains("guide.scale"), "{err}");
    }

    #[test]
    fn bad_values_name_their_key() {
        for (text, key) in [
            ("guide.kind = \"diffuser\"", "guide.kind"),
            ("segment.horizon = 0", "segment.horizon"),
            ("agent.gamma = 1.5", "agent.gamma"),
            ("env.name = \"cartpole\"", "env.name"),
            ("diffusion.hidden = 3", "diffusion.hidden"),
        ] {
            let err = RunConfig::from_toml_str(text).unwrap_err().to_string();
            assert!(err.contains(key), "{text}: {err}");
        }
        let err = RunConfig::from_toml_str("guide.kind = \"diffuser\"").unwrap_err().to_string();
        assert!(err.contains("none, sag, eag, reward, policy-only"));
    }

    #[test]
    fn overrides_accept_bare_words() {
        let mut c = RunConfig::default();
        c.set_str("guide.kind", "eag").unwrap();
        c.set_str("run.seed", "9").unwrap();
        assert_eq!((c.guide.kind, c.seed), (GuideKind::Eag, 9));
        assert!(c.set_str("run.seed", "-1").is_err());
    }

    #[test]
    fn hash_tracks_every_setting() {
        let base = RunConfig::default();
        let mut other = base.clone();
        other.agent.lambda = 0.9;
        assert_ne!(base.hash(), other.hash());
        assert_eq!(base.hash(), RunConfig::default().hash());
        assert_eq!(base.to_flat_string().lines().count(), KEYS.len() - 2);
        other.beta_bounds = Some((1e-3, 0.1));
        assert_eq!(RunConfig::from_toml_str(&other.to_flat_string()).unwrap(), other);
        // the listing is itself a valid config file
        assert_eq!(RunConfig::from_toml_str(&base.to_flat_string()).unwrap().hash(), base.hash());
    }

    #[test]
    fn paired_overrides_validate_once() {
        let mut c = RunConfig::default();
        assert!(c.clone().set_str("diffusion.beta_start", "1e-3").is_err());
        c.set_many(&[("diffusion.beta_start", "1e-3"), ("diffusion.beta_end", "0.05")]).unwrap();
        assert_eq!(c.beta_bounds, Some((1e-3, 0.05)));
        c.set_many(&[("guide.alpha", "0.02"), ("guide.kind", "eag")]).unwrap();
        assert_eq!((c.guide.kind, c.guide.alpha), (GuideKind::Eag, 0.02));
    }
}
