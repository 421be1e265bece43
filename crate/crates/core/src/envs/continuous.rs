use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, RngCore};

use super::{ActionSpace, EnvError, Environment, EpisodeClock, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContinuousKind {
    /// 2-D point mass pushed toward the origin.
    PointMass,
    /// Torque-limited pendulum swing-up.
    Pendulum,
}

impl ContinuousKind {
    pub const NAMES: [&'static str; 2] = ["point-mass", "pendulum-like"];

    pub fn name(self) -> &'static str {
        match self {
            Self::PointMass => "point-mass",
            Self::Pendulum => "pendulum-like",
        }
    }
}

impl FromStr for ContinuousKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point-mass" => Ok(Self::PointMass),
            "pendulum-like" => Ok(Self::Pendulum),
            other => Err(EnvError::UnknownEnv(format!(
                "`{other}` (expected one of: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

const POINT_MASS_DT: f64 = 0.05;
const POINT_MASS_HORIZON: usize = 100;
const POINT_MASS_FORCE: f64 = 1.0;
const POINT_MASS_ACTION_COST: f64 = 0.01;

const PENDULUM_DT: f64 = 0.05;
const PENDULUM_HORIZON: usize = 200;
const PENDULUM_TORQUE: f64 = 2.0;
const PENDULUM_MAX_SPEED: f64 = 8.0;
const GRAVITY: f64 = 10.0;

/// Continuous-control task integrated with explicit Euler steps.
///
/// Point mass: state `(x, y, vx, vy)`, action is a force in `[-1, 1]²`, unit
/// mass, reward `-‖p - goal‖² - 0.01‖a‖²` evaluated before the step.
///
/// Pendulum: observation `(cos θ, sin θ, θ̇)` with `θ = 0` upright, torque in
/// `[-2, 2]`, reward `-(θ² + 0.1 θ̇² + 0.001 u²)` with `θ` wrapped to `[-π, π)`.
#[derive(Debug, Clone)]
pub struct ContinuousEnv {
    pub kind: ContinuousKind,
    pub goal: [f64; 2],
    state: Vec<f64>,
    clock: EpisodeClock,
}

pub fn make_continuous_env(name: &str) -> Result<ContinuousEnv, EnvError> {
    Ok(ContinuousEnv::new(name.parse()?))
}

fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl ContinuousEnv {
    pub fn new(kind: ContinuousKind) -> Self {
        let dim = match kind {
            ContinuousKind::PointMass => 4,
            ContinuousKind::Pendulum => 2,
        };
        Self {
            kind,
            goal: [0.0, 0.0],
            state: vec![0.0; dim],
            clock: EpisodeClock::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn action_bound(&self) -> f64 {
        match self.kind {
            ContinuousKind::PointMass => POINT_MASS_FORCE,
            ContinuousKind::Pendulum => PENDULUM_TORQUE,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            ContinuousKind::PointMass => 2,
            ContinuousKind::Pendulum => 1,
        }
    }

    pub fn dt(&self) -> f64 {
        match self.kind {
            ContinuousKind::PointMass => POINT_MASS_DT,
            ContinuousKind::Pendulum => PENDULUM_DT,
        }
    }

    pub fn observe(&self) -> Vec<f64> {
        match self.kind {
            ContinuousKind::PointMass => self.state.clone(),
            ContinuousKind::Pendulum => {
                let (theta, omega) = (self.state[0], self.state[1]);
                vec![theta.cos(), theta.sin(), omega]
            }
        }
    }

    /// Starts a new episode from a given observation.
    pub fn reset_to(&mut self, observation: &[f64]) -> Result<Vec<f64>, EnvError> {
        if observation.len() != self.observation_dim() || observation.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::InvalidState(format!(
                "{} expects {} finite coordinates, got {observation:?}",
                self.name(),
                self.observation_dim()
            )));
        }
        self.state = match self.kind {
            ContinuousKind::PointMass => observation.to_vec(),
            ContinuousKind::Pendulum => vec![observation[1].atan2(observation[0]), observation[2]],
        };
        self.clock.start_episode();
        Ok(self.observe())
    }

    fn clip(&self, action: &[f64]) -> Vec<f64> {
        let b = self.action_bound();
        action.iter().map(|a| a.clamp(-b, b)).collect()
    }

    fn reward(&self, u: &[f64]) -> f64 {
        match self.kind {
            ContinuousKind::PointMass => {
                let dx = self.state[0] - self.goal[0];
                let dy = self.state[1] - self.goal[1];
                -(dx * dx + dy * dy) - POINT_MASS_ACTION_COST * (u[0] * u[0] + u[1] * u[1])
            }
            ContinuousKind::Pendulum => {
                let theta = wrap_angle(self.state[0]);
                let omega = self.state[1];
                -(theta * theta + 0.1 * omega * omega + 0.001 * u[0] * u[0])
            }
        }
    }

    fn integrate(&mut self, u: &[f64]) {
        match self.kind {
            ContinuousKind::PointMass => {
                let dt = POINT_MASS_DT;
                let (x, y, vx, vy) = (self.state[0], self.state[1], self.state[2], self.state[3]);
                self.state = vec![x + dt * vx, y + dt * vy, vx + dt * u[0], vy + dt * u[1]];
            }
            ContinuousKind::Pendulum => {
                let dt = PENDULUM_DT;
                let (theta, omega) = (self.state[0], self.state[1]);
                let accel = 1.5 * GRAVITY * theta.sin() + 3.0 * u[0];
                let omega_next = (omega + dt * accel).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                self.state = vec![wrap_angle(theta + dt * omega), omega_next];
            }
        }
    }
}

impl Environment for ContinuousEnv {
    fn observation_dim(&self) -> usize {
        match self.kind {
            ContinuousKind::PointMass => 4,
            ContinuousKind::Pendulum => 3,
        }
    }

    fn action_space(&self) -> ActionSpace {
        let b = self.action_bound();
        ActionSpace::Box {
            low: vec![-b; self.action_dim()],
            high: vec![b; self.action_dim()],
        }
    }

    fn max_episode_steps(&self) -> usize {
        match self.kind {
            ContinuousKind::PointMass => POINT_MASS_HORIZON,
            ContinuousKind::Pendulum => PENDULUM_HORIZON,
        }
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = match self.kind {
            ContinuousKind::PointMass => vec![
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-1.0..=1.0),
                0.0,
                0.0,
            ],
            ContinuousKind::Pendulum => vec![rng.gen_range(-PI..PI), rng.gen_range(-1.0..=1.0)],
        };
        self.clock.start_episode();
        self.observe()
    }

    fn step(&mut self, action: &[f64], _rng: &mut dyn RngCore) -> Result<Transition, EnvError> {
        if action.len() != self.action_dim() || action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::InvalidAction(format!(
                "{} expects {} finite action coordinates, got {action:?}",
                self.name(),
                self.action_dim()
            )));
        }
        let u = self.clip(action);
        let state = self.observe();
        let reward = self.reward(&u);
        self.integrate(&u);
        let t = self.clock.tick();
        Ok(Transition {
            state,
            action: u,
            reward,
            next_state: self.observe(),
            done: t + 1 >= self.max_episode_steps(),
            episode: self.clock.episode,
            t,
        })
    }
}
