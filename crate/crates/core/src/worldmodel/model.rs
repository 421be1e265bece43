use ndarray::{concatenate, s, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DiffusionSchedule, Normalizer, TrajectorySegment, WorldModelError};
use crate::numerics::{
    clip_global_norm, Activation, Adam, AdamConfig, Checkpoint, Graph, Mlp, MlpSpec, Parameterized, StepEmbedding,
    StepOutcome, Tensor,
};

/// How many times a sample that came out non-finite is redrawn.
pub const MAX_RESAMPLES: usize = 5;

/// Flat coordinates of a segment. The diffused block holds the `H + 1`
/// states followed by the `H` rewards; actions ride along as conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLayout {
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl SegmentLayout {
    pub fn diffused_dim(&self) -> usize {
        (self.horizon + 1) * self.state_dim + self.horizon
    }

    pub fn cond_dim(&self) -> usize {
        self.horizon * self.action_dim
    }

    /// Column range of state `t` (0-based, `t <= H`).
    pub fn state_cols(&self, t: usize) -> std::ops::Range<usize> {
        t * self.state_dim..(t + 1) * self.state_dim
    }

    pub fn reward_col(&self, t: usize) -> usize {
        (self.horizon + 1) * self.state_dim + t
    }

    pub fn action_cols(&self, t: usize) -> std::ops::Range<usize> {
        t * self.action_dim..(t + 1) * self.action_dim
    }

    fn check(&self, seg: &TrajectorySegment) -> Result<(), WorldModelError> {
        if seg.horizon() != self.horizon || seg.state_dim() != self.state_dim || seg.action_dim() != self.action_dim {
            return Err(WorldModelError::Segment(format!(
                "segment is H={} ds={} da={}, model expects H={} ds={} da={}",
                seg.horizon(),
                seg.state_dim(),
                seg.action_dim(),
                self.horizon,
                self.state_dim,
                self.action_dim
            )));
        }
        Ok(())
    }

    /// Normalized `(diffused, conditioning)` rows for a batch of segments.
    pub fn encode(&self, segs: &[TrajectorySegment], norm: &Normalizer) -> Result<(Tensor, Tensor), WorldModelError> {
        let mut x = Tensor::zeros((segs.len(), self.diffused_dim()));
        let mut c = Tensor::zeros((segs.len(), self.cond_dim()));
        for (r, seg) in segs.iter().enumerate() {
            self.check(seg)?;
            let states = norm.normalize_states(&seg.states);
            for t in 0..=self.horizon {
                x.slice_mut(s![r, self.state_cols(t)]).assign(&states.row(t));
            }
            for t in 0..self.horizon {
                x[[r, self.reward_col(t)]] = norm.normalize_reward(seg.rewards[t]);
            }
            let actions = norm.normalize_actions(&seg.actions);
            for t in 0..self.horizon {
                c.slice_mut(s![r, self.action_cols(t)]).assign(&actions.row(t));
            }
        }
        Ok((x, c))
    }

    /// Normalized state `t` of every row.
    pub fn states_at(&self, x: &Tensor, t: usize) -> Tensor {
        x.slice(s![.., self.state_cols(t)]).to_owned()
    }

    pub fn actions_at(&self, c: &Tensor, t: usize) -> Tensor {
        c.slice(s![.., self.action_cols(t)]).to_owned()
    }

    /// Raw-unit segments from normalized rows. When `starts` is given its
    /// rows replace the first state exactly.
    pub fn decode(
        &self,
        x: &Tensor,
        c: &Tensor,
        norm: &Normalizer,
        starts: Option<&Tensor>,
    ) -> Result<Vec<TrajectorySegment>, WorldModelError> {
        (0..x.nrows())
            .map(|r| {
                let mut states = Tensor::zeros((self.horizon + 1, self.state_dim));
                for t in 0..=self.horizon {
                    states.row_mut(t).assign(&x.slice(s![r, self.state_cols(t)]));
                }
                let mut states = norm.denormalize_states(&states);
                if let Some(st) = starts {
                    states.row_mut(0).assign(&st.row(r));
                }
                let mut actions = Tensor::zeros((self.horizon, self.action_dim));
                for t in 0..self.horizon {
                    actions.row_mut(t).assign(&c.slice(s![r, self.action_cols(t)]));
                }
                let actions = norm.denormalize_actions(&actions);
                let rewards = (0..self.horizon)
                    .map(|t| norm.denormalize_reward(x[[r, self.reward_col(t)]]))
                    .collect();
                TrajectorySegment::new(states, actions, rewards, false)
            })
            .collect()
    }
}

/// ε-network: SiLU MLP over `[noisy coordinates, actions, step embedding]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictor {
    pub embed: StepEmbedding,
    pub net: Mlp,
}

impl NoisePredictor {
    pub fn new(layout: &SegmentLayout, hidden: &[usize], embed_dim: usize, rng: &mut impl Rng) -> Self {
        let d = layout.diffused_dim();
        let input = d + layout.cond_dim() + embed_dim;
        Self {
            embed: StepEmbedding::new(embed_dim, rng),
            net: Mlp::new(&MlpSpec::new(input, hidden, d, Activation::Silu).zero_final(), rng),
        }
    }

    pub fn predict(&self, x: &Tensor, cond: &Tensor, steps: &[usize]) -> Result<Tensor, WorldModelError> {
        let emb = self.embed.predict(steps);
        let input = concatenate(Axis(1), &[x.view(), cond.view(), emb.view()])
            .map_err(|e| WorldModelError::Segment(e.to_string()))?;
        Ok(self.net.predict(&input)?)
    }
}

impl Parameterized for NoisePredictor {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.embed.parameters();
        p.extend(self.net.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.embed.parameters_mut();
        p.extend(self.net.parameters_mut());
        p
    }
}

/// Independent noise streams of one sampled segment. State noise and action
/// noise never share a stream, so steering the actions leaves the state
/// noise sequence untouched.
#[derive(Debug, Clone)]
pub struct SegmentRng {
    pub state: ChaCha8Rng,
    pub action: ChaCha8Rng,
}

impl SegmentRng {
    pub fn new(seed: u64, index: u64) -> Self {
        let mut state = ChaCha8Rng::seed_from_u64(seed);
        state.set_stream(2 * index);
        let mut action = ChaCha8Rng::seed_from_u64(seed);
        action.set_stream(2 * index + 1);
        Self { state, action }
    }

    pub fn batch(seed: u64, count: usize) -> Vec<Self> {
        (0..count as u64).map(|k| Self::new(seed, k)).collect()
    }
}

pub(crate) fn standard_normal_row(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// The closed-form posterior mean given a noise prediction.
pub fn reverse_mean_from_eps(schedule: &DiffusionSchedule, x: &Tensor, eps: &Tensor, i: usize) -> Tensor {
    let coef = schedule.beta(i) / (1.0 - schedule.alpha_bar(i)).sqrt();
    let scale = 1.0 / schedule.alpha(i).sqrt();
    (x - &(eps * coef)) * scale
}

/// The same posterior mean written through the implied clean sample
/// `x̂₀ = (x_i - √(1-ᾱ_i) ε) / √ᾱ_i`, with `x̂₀` clamped to `[-bound, bound]`
/// first. With an inactive clamp this equals [`reverse_mean_from_eps`].
pub fn reverse_mean_clamped(schedule: &DiffusionSchedule, x: &Tensor, eps: &Tensor, i: usize, bound: f64) -> Tensor {
    let (ab, ab_prev) = (schedule.alpha_bar(i), schedule.alpha_bar(i - 1));
    let mut x0 = (x - &(eps * (1.0 - ab).sqrt())) / ab.sqrt();
    x0.mapv_inplace(|v| v.clamp(-bound, bound));
    let c0 = ab_prev.sqrt() * schedule.beta(i) / (1.0 - ab);
    let ct = schedule.alpha(i).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    x0 * c0 + &(x * ct)
}

/// Where one reverse step stands.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    /// 1-based step about to be denoised, or just finished in `after_step`.
    pub step: usize,
    pub beta: f64,
    pub posterior_variance: f64,
    /// Segment index of every row in the current batch.
    pub rows: &'a [usize],
}

/// Extension points of the reverse chain. Every method defaults to a no-op,
/// which gives plain ancestral sampling.
pub trait ReverseHook {
    /// Called once on the initial noise before step `N`.
    fn init(
        &mut self,
        _ctx: &StepContext<'_>,
        _x: &mut Tensor,
        _cond: &mut Tensor,
        _rngs: &mut [SegmentRng],
    ) -> Result<(), WorldModelError> {
        Ok(())
    }

    /// Additive shift of the posterior mean; `None` leaves it untouched.
    fn shift(
        &mut self,
        _ctx: &StepContext<'_>,
        _mean: &Tensor,
        _cond: &Tensor,
    ) -> Result<Option<Tensor>, WorldModelError> {
        Ok(None)
    }

    /// Called on `x_{i-1}` right after step `i`.
    fn after_step(
        &mut self,
        _ctx: &StepContext<'_>,
        _x: &mut Tensor,
        _cond: &mut Tensor,
        _rngs: &mut [SegmentRng],
    ) -> Result<(), WorldModelError> {
        Ok(())
    }
}

/// Clamps the first state to fixed normalized values.
#[derive(Debug, Clone)]
pub struct Inpaint {
    pub layout: SegmentLayout,
    /// Normalized start state per segment index.
    pub starts: Tensor,
}

impl Inpaint {
    pub fn apply(&self, rows: &[usize], x: &mut Tensor) {
        let cols = self.layout.state_cols(0);
        for (r, &seg) in rows.iter().enumerate() {
            x.slice_mut(s![r, cols.clone()]).assign(&self.starts.row(seg));
        }
    }
}

impl ReverseHook for Inpaint {
    fn init(
        &mut self,
        ctx: &StepContext<'_>,
        x: &mut Tensor,
        _: &mut Tensor,
        _: &mut [SegmentRng],
    ) -> Result<(), WorldModelError> {
        self.apply(ctx.rows, x);
        Ok(())
    }

    fn after_step(
        &mut self,
        ctx: &StepContext<'_>,
        x: &mut Tensor,
        _: &mut Tensor,
        _: &mut [SegmentRng],
    ) -> Result<(), WorldModelError> {
        self.apply(ctx.rows, x);
        Ok(())
    }
}

impl ReverseHook for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModelConfig {
    pub horizon: usize,
    pub diffusion_steps: usize,
    /// Linear schedule endpoints; `None` picks the step-scaled defaults.
    pub beta_bounds: Option<(f64, f64)>,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// See [`Sampler::x0_clip`].
    pub x0_clip: Option<f64>,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            diffusion_steps: 100,
            beta_bounds: None,
            hidden: vec![128, 128],
            embed_dim: 16,
            lr: 1e-3,
            max_grad_norm: 1.0,
            x0_clip: None,
        }
    }
}

/// Conditional denoising diffusion model over trajectory segments.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub layout: SegmentLayout,
    pub schedule: DiffusionSchedule,
    pub predictor: NoisePredictor,
    pub normalizer: Normalizer,
    opt: Adam,
}

impl WorldModel {
    pub fn new(
        config: WorldModelConfig,
        state_dim: usize,
        action_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, WorldModelError> {
        if config.horizon == 0 {
            return Err(WorldModelError::Segment("horizon must be at least 1".into()));
        }
        let schedule = match config.beta_bounds {
            Some((lo, hi)) => DiffusionSchedule::linear(config.diffusion_steps, lo, hi)?,
            None => DiffusionSchedule::with_default_bounds(config.diffusion_steps)?,
        };
        let layout = SegmentLayout {
            horizon: config.horizon,
            state_dim,
            action_dim,
        };
        let predictor = NoisePredictor::new(&layout, &config.hidden, config.embed_dim, rng);
        let opt = Adam::new(AdamConfig::with_lr(config.lr), &predictor.parameters());
        Ok(Self {
            normalizer: Normalizer::new(state_dim, action_dim),
            config,
            layout,
            schedule,
            predictor,
            opt,
        })
    }

    /// Feeds the acting transitions of a real segment to the normalizer.
    pub fn observe_segment(&mut self, seg: &TrajectorySegment) {
        for t in 0..seg.horizon() {
            let s = seg.states.row(t).to_vec();
            let a = seg.actions.row(t).to_vec();
            self.normalizer.observe(&s, &a, seg.rewards[t]);
        }
    }

    /// `√ᾱ_i x₀ + √(1-ᾱ_i) ε`, row by row. Step 0 is the clean sample.
    pub fn forward_noise(&self, x0: &Tensor, steps: &[usize], eps: &Tensor) -> Result<Tensor, WorldModelError> {
        if eps.dim() != x0.dim() || steps.len() != x0.nrows() {
            return Err(WorldModelError::Segment("noise and step draws must match the batch".into()));
        }
        let mut out = x0.clone();
        for (r, &i) in steps.iter().enumerate() {
            if i > 0 {
                self.schedule.check_step(i)?;
            }
            let ab = self.schedule.alpha_bar(i);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            out.row_mut(r).zip_mut_with(&eps.row(r), |x, e| *x = a * *x + b * e);
        }
        Ok(out)
    }

    fn check_draws(&self, x0: &Tensor, cond: &Tensor, steps: &[usize], eps: &Tensor) -> Result<(), WorldModelError> {
        if x0.nrows() == 0 {
            return Err(WorldModelError::Segment("empty batch".into()));
        }
        if x0.ncols() != self.layout.diffused_dim()
            || cond.ncols() != self.layout.cond_dim()
            || cond.nrows() != x0.nrows()
            || eps.dim() != x0.dim()
            || steps.len() != x0.nrows()
        {
            return Err(WorldModelError::Segment("batch shapes disagree with the model layout".into()));
        }
        steps.iter().try_for_each(|&i| self.schedule.check_step(i))
    }

    /// Squared ε-prediction error summed over coordinates and averaged over
    /// rows, for fixed per-row draws.
    pub fn loss_with_draws(
        &self,
        x0: &Tensor,
        cond: &Tensor,
        steps: &[usize],
        eps: &Tensor,
    ) -> Result<f64, WorldModelError> {
        self.check_draws(x0, cond, steps, eps)?;
        let noisy = self.forward_noise(x0, steps, eps)?;
        let pred = self.predictor.predict(&noisy, cond, steps)?;
        Ok((pred - eps).mapv(|v| v * v).sum() / x0.nrows() as f64)
    }

    /// The same loss with its gradient for every predictor parameter, in
    /// [`Parameterized::parameters`] order.
    pub fn loss_and_grads_with_draws(
        &self,
        x0: &Tensor,
        cond: &Tensor,
        steps: &[usize],
        eps: &Tensor,
    ) -> Result<(f64, Vec<Tensor>), WorldModelError> {
        self.check_draws(x0, cond, steps, eps)?;
        let noisy = self.forward_noise(x0, steps, eps)?;
        let mut g = Graph::new();
        let emb_vars = self.predictor.embed.bind(&mut g);
        let net_vars = self.predictor.net.bind(&mut g);
        let emb = self.predictor.embed.forward(&mut g, &emb_vars, steps)?;
        let xn = g.constant(noisy);
        let c = g.constant(cond.clone());
        let input = g.concat_cols(&[xn, c, emb])?;
        let pred = self.predictor.net.forward(&mut g, &net_vars, input)?;
        let target = g.constant(eps.clone());
        let diff = g.sub(pred, target)?;
        let sq = g.square(diff);
        let total = g.sum_all(sq);
        let loss = g.scale(total, 1.0 / x0.nrows() as f64);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let all = emb_vars
            .vars
            .iter()
            .chain(&net_vars.vars)
            .zip(self.predictor.parameters())
            .map(|(v, p)| grads.get_or_zeros(*v, p.dim()))
            .collect();
        Ok((value, all))
    }

    pub fn train_step_with_draws(
        &mut self,
        x0: &Tensor,
        cond: &Tensor,
        steps: &[usize],
        eps: &Tensor,
    ) -> Result<(f64, StepOutcome), WorldModelError> {
        let (value, mut all) = self.loss_and_grads_with_draws(x0, cond, steps, eps)?;
        if !value.is_finite() {
            log::warn!("diffusion loss is not finite; step skipped");
            return Ok((value, StepOutcome::Skipped));
        }
        clip_global_norm(&mut all, self.config.max_grad_norm);
        let outcome = self.opt.step(self.predictor.parameters_mut(), &all)?;
        Ok((value, outcome))
    }

    /// Draws `(i, ε)` per row from `rng` and takes one optimizer step.
    pub fn train_step(
        &mut self,
        x0: &Tensor,
        cond: &Tensor,
        rng: &mut impl Rng,
    ) -> Result<(f64, StepOutcome), WorldModelError> {
        let n = self.schedule.steps();
        let steps: Vec<usize> = (0..x0.nrows()).map(|_| rng.gen_range(1..=n)).collect();
        let eps = Tensor::from_shape_simple_fn(x0.dim(), || rng.sample(StandardNormal));
        self.train_step_with_draws(x0, cond, &steps, &eps)
    }

    /// `updates` minibatch steps over `segments`, sampled with replacement.
    /// Returns the mean loss.
    pub fn fit(
        &mut self,
        segments: &[TrajectorySegment],
        updates: usize,
        batch: usize,
        rng: &mut impl Rng,
    ) -> Result<f64, WorldModelError> {
        if segments.is_empty() || updates == 0 {
            return Ok(0.0);
        }
        let (x, c) = self.layout.encode(segments, &self.normalizer)?;
        let mut total = 0.0;
        for _ in 0..updates {
            let idx: Vec<usize> = (0..batch.max(1)).map(|_| rng.gen_range(0..segments.len())).collect();
            let xb = x.select(Axis(0), &idx);
            let cb = c.select(Axis(0), &idx);
            total += self.train_step(&xb, &cb, rng)?.0;
        }
        Ok(total / updates as f64)
    }

    /// Posterior mean `(x_i - β_i/√(1-ᾱ_i) ε_θ) / √α_i` at step `i`.
    pub fn reverse_mean(&self, x: &Tensor, cond: &Tensor, i: usize) -> Result<Tensor, WorldModelError> {
        self.sampler().reverse_mean(x, cond, i)
    }

    /// Read-only view used by every sampling path.
    pub fn sampler(&self) -> Sampler<'_> {
        Sampler {
            noise: &self.predictor,
            schedule: &self.schedule,
            layout: self.layout,
            normalizer: &self.normalizer,
            x0_clip: self.config.x0_clip,
        }
    }

    /// See [`Sampler::ancestral_sample`].
    pub fn ancestral_sample(
        &self,
        actions: &Tensor,
        starts: Option<&Tensor>,
        seed: u64,
    ) -> Result<Vec<TrajectorySegment>, WorldModelError> {
        self.sampler().ancestral_sample(actions, starts, seed)
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        let l = &self.layout;
        let cfg = &self.config;
        ck.set_meta("wm.horizon", l.horizon.to_string());
        ck.set_meta("wm.state_dim", l.state_dim.to_string());
        ck.set_meta("wm.action_dim", l.action_dim.to_string());
        ck.set_meta("wm.embed_dim", cfg.embed_dim.to_string());
        ck.set_meta(
            "wm.hidden",
            cfg.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        );
        ck.set_meta("wm.lr", format!("{:?}", cfg.lr));
        ck.set_meta("wm.max_grad_norm", format!("{:?}", cfg.max_grad_norm));
        if let Some(bound) = cfg.x0_clip {
            ck.set_meta("wm.x0_clip", format!("{bound:?}"));
        }
        ck.set_meta("norm.count", self.normalizer.state.count.to_string());
        let betas = &self.schedule.betas;
        ck.put(
            "wm.betas",
            Tensor::from_shape_vec((1, betas.len()), betas.clone()).expect("row"),
        );
        for (name, t) in self.normalizer.to_tensors() {
            ck.put(name, t);
        }
        ck.put_module("wm.eps", &self.predictor);
    }

    /// Rebuilds a model saved with [`WorldModel::save_into`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, WorldModelError> {
        let num = |key: &str| -> Result<usize, WorldModelError> {
            ck.meta(key)?
                .parse()
                .map_err(|_| WorldModelError::Segment(format!("bad checkpoint field {key}")))
        };
        let real = |key: &str| -> Result<f64, WorldModelError> {
            ck.meta(key)?
                .parse()
                .map_err(|_| WorldModelError::Segment(format!("bad checkpoint field {key}")))
        };
        let hidden = ck
            .meta("wm.hidden")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|h| h.parse().map_err(|_| WorldModelError::Segment("bad hidden sizes".into())))
            .collect::<Result<Vec<usize>, _>>()?;
        let schedule = DiffusionSchedule::from_betas(ck.get("wm.betas")?.iter().copied().collect())?;
        let config = WorldModelConfig {
            horizon: num("wm.horizon")?,
            diffusion_steps: schedule.steps(),
            beta_bounds: Some((schedule.betas[0], *schedule.betas.last().unwrap())),
            hidden,
            embed_dim: num("wm.embed_dim")?,
            lr: real("wm.lr")?,
            max_grad_norm: real("wm.max_grad_norm")?,
            x0_clip: match ck.meta.contains_key("wm.x0_clip") {
                true => Some(real("wm.x0_clip")?),
                false => None,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(config, num("wm.state_dim")?, num("wm.action_dim")?, &mut rng)?;
        model.schedule = schedule;
        ck.load_module("wm.eps", &mut model.predictor)?;
        let count = num("norm.count")? as u64;
        let row = |name: &str| -> Result<Vec<f64>, WorldModelError> { Ok(ck.get(name)?.iter().copied().collect()) };
        let n = &mut model.normalizer;
        for (stats, key) in [(&mut n.state, "state"), (&mut n.action, "action"), (&mut n.reward, "reward")] {
            stats.count = count;
            stats.mean = row(&format!("norm.{key}.mean"))?;
            stats.m2 = row(&format!("norm.{key}.m2"))?;
        }
        model.opt = Adam::new(AdamConfig::with_lr(model.config.lr), &model.predictor.parameters());
        Ok(model)
    }
}

/// Predicts the noise in `x` at the given steps.
pub trait NoiseModel {
    fn predict_noise(&self, x: &Tensor, cond: &Tensor, steps: &[usize]) -> Result<Tensor, WorldModelError>;
}

impl NoiseModel for NoisePredictor {
    fn predict_noise(&self, x: &Tensor, cond: &Tensor, steps: &[usize]) -> Result<Tensor, WorldModelError> {
        self.predict(x, cond, steps)
    }
}

/// Everything the reverse chain reads: a noise model, its schedule, the
/// segment layout and the feature scaling.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    pub noise: &'a dyn NoiseModel,
    pub schedule: &'a DiffusionSchedule,
    pub layout: SegmentLayout,
    pub normalizer: &'a Normalizer,
    /// Clamp on the implied clean sample, in normalized units.
    pub x0_clip: Option<f64>,
}

impl Sampler<'_> {
    pub fn reverse_mean(&self, x: &Tensor, cond: &Tensor, i: usize) -> Result<Tensor, WorldModelError> {
        self.schedule.check_step(i)?;
        let eps = self.noise.predict_noise(x, cond, &vec![i; x.nrows()])?;
        Ok(match self.x0_clip {
            Some(bound) => reverse_mean_clamped(self.schedule, x, &eps, i, bound),
            None => reverse_mean_from_eps(self.schedule, x, &eps, i),
        })
    }

    /// One full reverse chain for the given rows.
    fn chain(
        &self,
        rows: &[usize],
        cond: &mut Tensor,
        hook: &mut dyn ReverseHook,
        rngs: &mut [SegmentRng],
    ) -> Result<Tensor, WorldModelError> {
        let d = self.layout.diffused_dim();
        let n = self.schedule.steps();
        let mut x = Tensor::zeros((rows.len(), d));
        for (r, rng) in rngs.iter_mut().enumerate() {
            let z = standard_normal_row(&mut rng.state, d);
            x.row_mut(r).assign(&ndarray::ArrayView1::from(&z));
        }
        let ctx = |i: usize| StepContext {
            step: i,
            beta: self.schedule.beta(i),
            posterior_variance: self.schedule.posterior_variance(i),
            rows,
        };
        hook.init(&ctx(n), &mut x, cond, rngs)?;
        for i in (1..=n).rev() {
            let c = ctx(i);
            let mut mean = self.reverse_mean(&x, cond, i)?;
            if let Some(delta) = hook.shift(&c, &mean, cond)? {
                mean += &delta;
            }
            let sd = c.posterior_variance.sqrt();
            if sd > 0.0 {
                for (r, rng) in rngs.iter_mut().enumerate() {
                    let z = standard_normal_row(&mut rng.state, d);
                    mean.row_mut(r).zip_mut_with(&ndarray::ArrayView1::from(&z), |m, z| *m += sd * z);
                }
            }
            x = mean;
            hook.after_step(&c, &mut x, cond, rngs)?;
        }
        Ok(x)
    }

    /// Reverse chain for every row of `cond` with per-segment noise streams.
    /// Rows that come out non-finite are redrawn from their own streams up to
    /// [`MAX_RESAMPLES`] times. Returns normalized `(x₀, conditioning)`.
    pub fn sample_with_hook(
        &self,
        cond: &Tensor,
        hook: &mut dyn ReverseHook,
        rngs: &mut [SegmentRng],
    ) -> Result<(Tensor, Tensor), WorldModelError> {
        if cond.ncols() != self.layout.cond_dim() || rngs.len() != cond.nrows() {
            return Err(WorldModelError::Segment(format!(
                "conditioning is {}x{}, expected {}x{}",
                cond.nrows(),
                cond.ncols(),
                rngs.len(),
                self.layout.cond_dim()
            )));
        }
        let all: Vec<usize> = (0..cond.nrows()).collect();
        let mut c = cond.clone();
        let mut x = self.chain(&all, &mut c, hook, rngs)?;
        let bad_rows = |x: &Tensor, c: &Tensor| -> Vec<usize> {
            (0..x.nrows())
                .filter(|&r| !x.row(r).iter().chain(c.row(r).iter()).all(|v| v.is_finite()))
                .collect()
        };
        let mut bad = bad_rows(&x, &c);
        let mut attempt = 0;
        while !bad.is_empty() {
            if attempt == MAX_RESAMPLES {
                return Err(WorldModelError::NonFinite(format!(
                    "{} segments still non-finite after {MAX_RESAMPLES} redraws",
                    bad.len()
                )));
            }
            attempt += 1;
            log::warn!("redrawing {} non-finite segments (attempt {attempt})", bad.len());
            let mut sub_rngs: Vec<SegmentRng> = bad.iter().map(|&r| rngs[r].clone()).collect();
            let mut sub_c = cond.select(Axis(0), &bad);
            let sub_x = self.chain(&bad, &mut sub_c, hook, &mut sub_rngs)?;
            for (k, &r) in bad.iter().enumerate() {
                x.row_mut(r).assign(&sub_x.row(k));
                c.row_mut(r).assign(&sub_c.row(k));
                rngs[r] = sub_rngs[k].clone();
            }
            bad = bad_rows(&x, &c);
        }
        Ok((x, c))
    }

    /// Unguided samples conditioned on raw actions (`count × H·d_a`), with
    /// the first state optionally pinned to raw `starts`.
    pub fn ancestral_sample(
        &self,
        actions: &Tensor,
        starts: Option<&Tensor>,
        seed: u64,
    ) -> Result<Vec<TrajectorySegment>, WorldModelError> {
        let count = actions.nrows();
        let cond = self.normalize_flat_actions(actions);
        let mut rngs = SegmentRng::batch(seed, count);
        let (x, c) = match starts {
            Some(st) => {
                let mut hook = Inpaint {
                    layout: self.layout,
                    starts: self.normalizer.normalize_states(st),
                };
                self.sample_with_hook(&cond, &mut hook, &mut rngs)?
            }
            None => self.sample_with_hook(&cond, &mut (), &mut rngs)?,
        };
        self.layout.decode(&x, &c, self.normalizer, starts)
    }

    /// Raw `count × H·d_a` actions to normalized conditioning rows.
    pub fn normalize_flat_actions(&self, actions: &Tensor) -> Tensor {
        let (h, da) = (self.layout.horizon, self.layout.action_dim);
        let mut out = actions.clone();
        for t in 0..h {
            let block = actions.slice(s![.., t * da..(t + 1) * da]).to_owned();
            out.slice_mut(s![.., t * da..(t + 1) * da])
                .assign(&self.normalizer.normalize_actions(&block));
        }
        out
    }

    /// Normalized conditioning rows back to raw `count × H·d_a` actions.
    pub fn denormalize_flat_actions(&self, cond: &Tensor) -> Tensor {
        let (h, da) = (self.layout.horizon, self.layout.action_dim);
        let mut out = cond.clone();
        for t in 0..h {
            let block = cond.slice(s![.., t * da..(t + 1) * da]).to_owned();
            out.slice_mut(s![.., t * da..(t + 1) * da])
                .assign(&self.normalizer.denormalize_actions(&block));
        }
        out
    }
}
