//! Classifier guides for the reverse chain and the guided segment sampler.

mod gradients;
mod sampler;

pub use gradients::{eag_gradient, policy_gradient, reward_gradient, sag_gradient, GuideGradient};
pub use sampler::{couple_actions, guided_sample, ActionSource, GuideDiagnostics, GuideNets, GuidedBatch};

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuideKind {
    None,
    /// Sigmoid advantage guide.
    Sag,
    /// Exponential advantage guide.
    Eag,
    /// Reward-sum guide.
    Reward,
    /// State gradient of the policy log-likelihood.
    PolicyOnly,
}

impl GuideKind {
    pub const ALL: [GuideKind; 5] = [
        GuideKind::None,
        GuideKind::Sag,
        GuideKind::Eag,
        GuideKind::Reward,
        GuideKind::PolicyOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GuideKind::None => "none",
            GuideKind::Sag => "sag",
            GuideKind::Eag => "eag",
            GuideKind::Reward => "reward",
            GuideKind::PolicyOnly => "policy-only",
        }
    }

    pub fn default_alpha(self) -> f64 {
        match self {
            GuideKind::None => 0.0,
            GuideKind::Sag => 0.5,
            GuideKind::Eag | GuideKind::Reward | GuideKind::PolicyOnly => 0.1,
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for GuideKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GuideKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown guide kind `{s}`; valid kinds: {}", Self::valid_names()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub kind: GuideKind,
    /// Guide scale α.
    pub alpha: f64,
    /// Also shift the action coordinates by the guide's action gradient.
    pub apply_to_actions: bool,
    /// Per-step L2 bound on the guide gradient.
    pub clip: f64,
    /// Scale of the policy score ascent on actions during denoising.
    pub couple_strength: f64,
}

pub const DEFAULT_CLIP: f64 = 10.0;
pub const DEFAULT_COUPLE_STRENGTH: f64 = 0.02;

impl GuidanceConfig {
    pub fn for_kind(kind: GuideKind) -> Self {
        Self {
            kind,
            alpha: kind.default_alpha(),
            apply_to_actions: false,
            clip: DEFAULT_CLIP,
            couple_strength: DEFAULT_COUPLE_STRENGTH,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(format!("guide.alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(format!("guide.clip must be positive, got {}", self.clip));
        }
        if !(self.couple_strength.is_finite() && self.couple_strength >= 0.0) {
            return Err(format!(
                "guide.couple_strength must be finite and non-negative, got {}",
                self.couple_strength
            ));
        }
        Ok(())
    }

    /// True when the mean shift is identically zero.
    pub fn is_inert(&self) -> bool {
        self.kind == GuideKind::None || self.alpha == 0.0
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::for_kind(GuideKind::None)
    }
}
