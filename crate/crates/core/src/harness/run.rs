use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{evaluate_policy, Collector, EvalStats, HarnessError, ReplayBuffer, RunConfig};
use crate::agent::{gae_advantages, Agent, StateActionFn, UpdateStats};
use crate::envs::{make_continuous_env, ContinuousEnv, Environment};
use crate::guidance::{guided_sample, ActionSource, GuideDiagnostics, GuideNets};
use crate::numerics::{Checkpoint, Tensor};
use crate::worldmodel::{TrajectorySegment, WorldModel};

/// One row per outer iteration. Wall-clock lives in a separate timing file
/// so this one is a pure function of (config, seed).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub real_steps: usize,
    pub episodes: usize,
    pub diffusion_loss: f64,
    pub reward_loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    pub critic_loss: f64,
    pub advantage_loss: f64,
    /// Mean per-step reward of the synthetic segments.
    pub synthetic_reward: f64,
    /// Mean guided quantity at the posterior means.
    pub guide_value: f64,
    pub guide_weight: f64,
    pub guide_grad_norm: f64,
    /// Mean `A_ω` over the final synthetic segments.
    pub synthetic_advantage: f64,
    pub zeroed_steps: usize,
    pub resampled_actions: usize,
    pub skipped_updates: usize,
    /// Empty when this iteration was not evaluated.
    pub eval_return: Option<f64>,
    pub eval_stderr: Option<f64>,
}

pub const METRICS_HEADER: &[&str] = &[
    "iteration",
    "real_steps",
    "episodes",
    "diffusion_loss",
    "reward_loss",
    "policy_loss",
    "entropy",
    "critic_loss",
    "advantage_loss",
    "synthetic_reward",
    "guide_value",
    "guide_weight",
    "guide_grad_norm",
    "synthetic_advantage",
    "zeroed_steps",
    "resampled_actions",
    "skipped_updates",
    "eval_return",
    "eval_stderr",
];

/// Written by every run, whatever the budget.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub timing_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub real_steps: usize,
}

impl RunSummary {
    /// Evaluated returns in iteration order.
    pub fn eval_curve(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| Some((r.eval_return?, r.eval_stderr?)))
            .collect()
    }

    pub fn final_eval(&self) -> Option<(f64, f64)> {
        self.eval_curve().last().copied()
    }
}

// independent random streams under one seed
const STREAM_INIT: u64 = 0;
const STREAM_ENV: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn stack(parts: &[Tensor]) -> Tensor {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("same widths")
}

/// Upper bound on the start states kept in a checkpoint.
const CHECKPOINT_STARTS: usize = 256;

/// The state a run resumes from or is inspected through.
pub struct LoadedRun {
    pub config: RunConfig,
    pub agent: Agent,
    pub world_model: WorldModel,
    /// Real start states for sampling, raw units.
    pub starts: Tensor,
    pub iteration: usize,
    pub real_steps: usize,
}

fn build_agent(cfg: &RunConfig, env: &ContinuousEnv, rng: &mut impl Rng) -> Agent {
    Agent::new(env.observation_dim(), &env.action_space(), cfg.agent.clone(), rng)
}

fn save_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    agent: &Agent,
    wm: &WorldModel,
    starts: &Tensor,
    iteration: usize,
    real_steps: usize,
) -> Result<(), HarnessError> {
    let mut ck = Checkpoint::new();
    ck.set_meta("run.config", cfg.to_flat_string());
    ck.set_meta("run.config_hash", cfg.hash());
    ck.set_meta("run.iteration", iteration.to_string());
    ck.set_meta("run.real_steps", real_steps.to_string());
    agent.save_into(&mut ck);
    wm.save_into(&mut ck);
    ck.put("run.starts", starts.clone());
    // write then rename so a crash never leaves a torn file behind
    let tmp = path.with_extension("ckpt.tmp");
    ck.save(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint written by [`run_agd_mbrl`].
pub fn load_run(path: &Path) -> Result<LoadedRun, HarnessError> {
    let ck = Checkpoint::load(path)?;
    let text = ck.meta("run.config")?;
    let config = RunConfig::from_toml_str(text)?;
    if config.hash() != ck.meta("run.config_hash")? {
        return Err(HarnessError::Config(format!(
            "{}: stored config hash does not match its config text",
            path.display()
        )));
    }
    let env = make_continuous_env(&config.env_name)?;
    let mut agent = build_agent(&config, &env, &mut stream(config.seed, STREAM_INIT));
    agent.load_from(&ck)?;
    let world_model = WorldModel::from_checkpoint(&ck)?;
    let num = |key: &str| -> Result<usize, HarnessError> {
        ck.meta(key)?
            .parse()
            .map_err(|_| HarnessError::Config(format!("checkpoint field {key} is not a count")))
    };
    Ok(LoadedRun {
        starts: ck.get("run.starts")?.clone(),
        iteration: num("run.iteration")?,
        real_steps: num("run.real_steps")?,
        config,
        agent,
        world_model,
    })
}

fn checkpoint_starts(buffer: &ReplayBuffer, env: &mut ContinuousEnv, rng: &mut impl RngCore) -> Tensor {
    let ds = env.observation_dim();
    if buffer.is_empty() {
        let rows: Vec<f64> = (0..16).flat_map(|_| env.reset(rng)).collect();
        return Tensor::from_shape_vec((16, ds), rows).expect("rows");
    }
    let n = buffer.len().min(CHECKPOINT_STARTS);
    let stride = buffer.len() / n;
    let mut out = Tensor::zeros((n, ds));
    for r in 0..n {
        let tr = buffer.get(r * stride).expect("in range");
        out.row_mut(r).iter_mut().zip(&tr.state).for_each(|(o, v)| *o = *v);
    }
    out
}

/// Critic and `A_ω` regression on GAE targets from fresh real segments.
fn refit_advantage(
    agent: &mut Agent,
    buffer: &ReplayBuffer,
    cfg: &RunConfig,
    rng: &mut impl Rng,
) -> Result<(f64, f64), HarnessError> {
    let (mut critic_loss, mut adv_loss) = (0.0, 0.0);
    for _ in 0..cfg.advantage_updates {
        let segs = buffer.sample_segments(cfg.synthetic_batch, cfg.horizon, rng)?;
        let mut advs = Vec::new();
        let mut targets = Vec::new();
        for seg in &segs {
            let (a, t) = gae_advantages(seg, &agent.critic, cfg.agent.gamma, cfg.agent.lambda)?;
            advs.extend(a);
            targets.extend(t);
        }
        let states = stack(&segs.iter().map(|s| s.acting_states()).collect::<Vec<_>>());
        let actions = stack(&segs.iter().map(|s| s.actions.clone()).collect::<Vec<_>>());
        critic_loss = agent.update_critic(&states, &targets)?.0;
        adv_loss = agent.update_advantage(&states, &actions, &advs)?.0;
    }
    Ok((critic_loss, adv_loss))
}

fn mean_reward(segs: &[TrajectorySegment]) -> f64 {
    let n: usize = segs.iter().map(|s| s.horizon()).sum();
    segs.iter().flat_map(|s| s.rewards.iter()).sum::<f64>() / n.max(1) as f64
}

/// Averages the per-round values of a field.
fn average<T>(items: &[T], f: impl Fn(&T) -> f64) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    items.iter().map(f).sum::<f64>() / items.len() as f64
}

/// The Dyna loop: collect real data, fit the world model, sample guided
/// synthetic segments and improve the agent on them, evaluate.
///
/// Writes `<run>.metrics.csv`, `<run>.timing.csv` and `<run>.ckpt` under
/// `out_dir`. The checkpoint is refreshed after every completed iteration, so
/// when an iteration fails the file on disk is the last good state.
pub fn run_agd_mbrl(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let name = cfg.run_name();
    let metrics_path = out_dir.join(format!("{name}.metrics.csv"));
    let timing_path = out_dir.join(format!("{name}.timing.csv"));
    let checkpoint_path = out_dir.join(format!("{name}.ckpt"));

    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    let mut env_rng = stream(cfg.seed, STREAM_ENV);
    let mut train_rng = stream(cfg.seed, STREAM_TRAIN);
    let mut eval_rng = stream(cfg.seed, STREAM_EVAL);

    let env = make_continuous_env(&cfg.env_name)?;
    let (ds, da) = (env.observation_dim(), env.action_space().dim());
    let mut agent = build_agent(cfg, &env, &mut init_rng);
    let mut wm = WorldModel::new(cfg.world_model_config(), ds, da, &mut init_rng)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, ds, da);
    let mut collector = Collector::new(env);
    let mut eval_env = make_continuous_env(&cfg.env_name)?;

    let mut metrics = csv::WriterBuilder::new().has_headers(false).from_path(&metrics_path)?;
    metrics.write_record(METRICS_HEADER)?;
    metrics.flush()?;
    let mut timing = csv::Writer::from_path(&timing_path)?;
    timing.write_record(["iteration", "seconds"])?;

    let starts = checkpoint_starts(&buffer, &mut collector.env, &mut init_rng);
    save_checkpoint(&checkpoint_path, cfg, &agent, &wm, &starts, 0, 0)?;

    let iterations = cfg.total_steps.div_ceil(cfg.steps_per_iter);
    let mut rows = Vec::with_capacity(iterations);
    let mut real_steps = 0;
    for it in 1..=iterations {
        let clock = Instant::now();
        let n = cfg.steps_per_iter.min(cfg.total_steps - real_steps);
        {
            let policy = &agent.policy;
            collector.collect(n, &mut buffer, &mut env_rng, |s, rng| {
                let mut r = ChaCha8Rng::seed_from_u64(rng.next_u64());
                Ok(policy.sample(s, &mut r)?)
            })?;
        }
        real_steps += n;
        let mut row = MetricsRow {
            iteration: it,
            real_steps,
            episodes: collector.episodes_finished(),
            ..MetricsRow::default()
        };

        let has_windows = !buffer.window_starts(cfg.horizon).is_empty();
        if has_windows {
            // the world model sees real statistics only
            wm.normalizer = buffer.normalizer().clone();
            let updates = cfg.diffusion_epochs * n.div_ceil(cfg.diffusion_batch);
            let segs = buffer.sample_segments(updates * cfg.diffusion_batch, cfg.horizon, &mut train_rng)?;
            row.diffusion_loss = wm.fit(&segs, updates, cfg.diffusion_batch, &mut train_rng)?;

            for _ in 0..cfg.reward_updates {
                let (s, a, r) = buffer.sample_transitions(cfg.diffusion_batch, &mut train_rng);
                row.reward_loss = agent.update_reward_model(&s, &a, &r)?.0;
            }
            let (cl, al) = refit_advantage(&mut agent, &buffer, cfg, &mut train_rng)?;
            row.critic_loss = cl;
            row.advantage_loss = al;

            let mut diags: Vec<GuideDiagnostics> = Vec::new();
            let mut stats: Vec<UpdateStats> = Vec::new();
            let mut synth_reward = Vec::new();
            for _ in 0..cfg.synthetic_rounds {
                let starts = buffer.sample_starts(cfg.synthetic_batch, &mut train_rng);
                let seed = train_rng.next_u64();
                let batch = {
                    let nets = GuideNets {
                        advantage: Some(&agent.advantage as &dyn StateActionFn),
                        reward: Some(&agent.reward_model as &dyn StateActionFn),
                        policy: Some(&agent.policy),
                    };
                    guided_sample(
                        wm.sampler(),
                        &cfg.guide,
                        nets,
                        ActionSource::Policy(&agent.policy),
                        &starts,
                        seed,
                    )?
                };
                synth_reward.push(mean_reward(&batch.segments));
                stats.push(agent.a2c_update(&batch.segments)?);
                diags.push(batch.diagnostics);
            }
            row.synthetic_reward = average(&synth_reward, |v| *v);
            row.policy_loss = average(&stats, |s| s.policy_loss);
            row.entropy = average(&stats, |s| s.entropy);
            row.skipped_updates = stats.iter().map(|s| s.skipped).sum();
            row.guide_value = average(&diags, |d| d.mean_value);
            row.guide_weight = average(&diags, |d| d.mean_weight);
            row.guide_grad_norm = average(&diags, |d| d.mean_grad_norm);
            row.synthetic_advantage = average(&diags, |d| d.final_advantage.unwrap_or(0.0));
            row.zeroed_steps = diags.iter().map(|d| d.zeroed_steps).sum();
            row.resampled_actions = diags.iter().map(|d| d.resampled_actions).sum();
        } else {
            log::info!("iteration {it}: no {}-step window yet, only collecting", cfg.horizon);
        }

        if it % cfg.eval_every == 0 || it == iterations {
            let policy = &agent.policy;
            let EvalStats { mean, std_err, .. } =
                evaluate_policy(&mut eval_env, cfg.eval_episodes, &mut eval_rng, |s, _| Ok(policy.mode(s)?))?;
            row.eval_return = Some(mean);
            row.eval_stderr = Some(std_err);
            log::info!("iteration {it}: {real_steps} real steps, eval return {mean:.3} ± {std_err:.3}");
        }

        metrics.serialize(&row)?;
        metrics.flush()?;
        timing.write_record([it.to_string(), format!("{:.6}", clock.elapsed().as_secs_f64())])?;
        timing.flush()?;
        let starts = checkpoint_starts(&buffer, &mut collector.env, &mut init_rng);
        save_checkpoint(&checkpoint_path, cfg, &agent, &wm, &starts, it, real_steps)?;
        rows.push(row);
    }
    metrics.flush()?;
    timing.flush()?;
    Ok(RunSummary {
        rows,
        metrics_path,
        timing_path,
        checkpoint_path,
        real_steps,
    })
}

/// Unguided segments from a saved run, one per stored start state in turn.
pub fn sample_from_checkpoint(run: &LoadedRun, count: usize, seed: u64) -> Result<Vec<TrajectorySegment>, HarnessError> {
    let n = run.starts.nrows();
    if n == 0 {
        return Err(HarnessError::Config("checkpoint holds no start states".into()));
    }
    let idx: Vec<usize> = (0..count).map(|k| k % n).collect();
    let starts = run.starts.select(ndarray::Axis(0), &idx);
    let batch = guided_sample(
        run.world_model.sampler(),
        &run.config.guide,
        GuideNets {
            advantage: Some(&run.agent.advantage),
            reward: Some(&run.agent.reward_model),
            policy: Some(&run.agent.policy),
        },
        ActionSource::Policy(&run.agent.policy),
        &starts,
        seed,
    )?;
    Ok(batch.segments)
}

/// Mode-action evaluation of a saved policy.
pub fn evaluate_checkpoint(run: &LoadedRun, episodes: usize, seed: u64) -> Result<EvalStats, HarnessError> {
    let mut env = make_continuous_env(&run.config.env_name)?;
    let mut rng = stream(seed, STREAM_EVAL);
    let policy = &run.agent.policy;
    evaluate_policy(&mut env, episodes, &mut rng, |s, _| Ok(policy.mode(s)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64, total: usize) -> RunConfig {
        let mut c = RunConfig::from_toml_str(
            r#"
            env.name = "point-mass"
            run.steps_per_iter = 120
            segment.horizon = 4
            diffusion.steps = 8
            diffusion.epochs = 1
            diffusion.batch = 16
            diffusion.hidden = [16]
            agent.hidden = [8]
            agent.reward_updates = 2
            agent.advantage_updates = 2
            synthetic.batch = 8
            synthetic.rounds = 2
            eval.episodes = 2
            guide.kind = "sag"
            "#,
        )
        .unwrap();
        c.seed = seed;
        c.total_steps = total;
        c
    }

    #[test]
    fn header_matches_row_fields() {
        let mut w = csv::Writer::from_writer(vec![]);
        w.serialize(MetricsRow::default()).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER.join(","));
    }

    #[test]
    fn zero_budget_writes_header_and_init_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_agd_mbrl(&tiny(0, 0), dir.path()).unwrap();
        assert!(s.rows.is_empty());
        let text = std::fs::read_to_string(&s.metrics_path).unwrap();
        assert_eq!(text, format!("{}\n", METRICS_HEADER.join(",")));
        let run = load_run(&s.checkpoint_path).unwrap();
        assert_eq!((run.iteration, run.real_steps), (0, 0));
        assert_eq!(run.config, tiny(0, 0));
    }

    #[test]
    fn budget_is_spent_exactly_and_runs_repeat() {
        let dir = tempfile::tempdir().unwrap();
        let a = run_agd_mbrl(&tiny(3, 250), &dir.path().join("a")).unwrap();
        let b = run_agd_mbrl(&tiny(3, 250), &dir.path().join("b")).unwrap();
        assert_eq!(a.real_steps, 250);
        assert_eq!(a.rows.len(), 3);
        assert_eq!(a.rows.last().unwrap().real_steps, 250);
        assert!(a.rows.iter().all(|r| r.eval_return.is_some()));
        let read = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(read(&a.metrics_path), read(&b.metrics_path));
        let c = run_agd_mbrl(&tiny(4, 250), &dir.path().join("c")).unwrap();
        assert_ne!(read(&a.metrics_path), read(&c.metrics_path));
    }

    #[test]
    fn checkpoint_reloads_the_trained_agent() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_agd_mbrl(&tiny(5, 120), dir.path()).unwrap();
        let run = load_run(&s.checkpoint_path).unwrap();
        assert_eq!(run.real_steps, 120);
        let segs = sample_from_checkpoint(&run, 5, 1).unwrap();
        assert_eq!(segs.len(), 5);
        for (k, seg) in segs.iter().enumerate() {
            assert_eq!(seg.states.row(0), run.starts.row(k % run.starts.nrows()));
        }
        let e1 = evaluate_checkpoint(&run, 2, 9).unwrap();
        let e2 = evaluate_checkpoint(&run, 2, 9).unwrap();
        assert_eq!(e1, e2);
    }
}
