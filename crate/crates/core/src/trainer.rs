//! Q-learning on the labeling task, and the supervised baseline.
//!
//! Each batch rolls out fresh episodes with ε-greedy exploration, builds
//! one-step TD targets from the same network's recorded q-vectors (no target
//! network, targets held constant), and takes one Adam step on the mean squared
//! Bellman error.
//!
//! Randomness is split per episode: a batch generator forks one child generator
//! per episode, which drives both sampling and exploration. Episode results are
//! reduced in episode order, so a run is bit-identical for a given seed and
//! worker count.

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetView;
use crate::env::{sample_episode, Action, Env, Episode, EpisodeSpec, RewardScheme};
use crate::error::{Error, Result};
use crate::eval::{instance_metrics, MetricsRecord, MetricsSink, Split};
use crate::model::{backward_episode_into, forward_episode, Blocks, EpisodeRunner, ForwardTrace, QNetGrads, QNetParams, DEFAULT_INIT_SCALE};
use crate::optim::{adam_step, clip_global_norm, AdamState};
use crate::tensor::{axpy_slice, Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub episode: EpisodeSpec,
    pub gamma: f64,
    pub epsilon: f64,
    pub hidden: usize,
    pub total_batches: usize,
    pub eval_batches: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip: Option<f64>,
    pub init_scale: f64,
    /// Rollout threads. Results depend on this only through the order
    /// gradient partial sums are added.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            episode: EpisodeSpec::default(),
            gamma: 0.5,
            epsilon: 0.05,
            hidden: 200,
            total_batches: 100_000,
            eval_batches: 10_000,
            seed: 0,
            clip: None,
            init_scale: DEFAULT_INIT_SCALE,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must be in [0, 1], got {}", self.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip must be positive, got {c}")));
            }
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub action: Action,
    pub reward: f64,
    /// Q-vector the action was chosen from.
    pub q: Vec<f64>,
    pub was_request: bool,
    pub was_correct: Option<bool>,
    /// 1-based occurrence number of this step's class.
    pub instance: usize,
    pub true_slot: usize,
    pub explored: bool,
}

/// One rolled-out episode. Observations live in the matching [`ForwardTrace`].
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    pub terminal: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy with structured exploration: when exploring, pick the correct
/// slot, a random incorrect slot, or the request action with equal odds.
pub fn select_action(q: &[f64], rng: &mut Rng, epsilon: f64, true_slot: usize) -> Action {
    select_action_traced(q, rng, epsilon, true_slot).0
}

fn select_action_traced(q: &[f64], rng: &mut Rng, epsilon: f64, true_slot: usize) -> (Action, bool) {
    let classes = q.len() - 1;
    if rng.unit() >= epsilon {
        return (Action(argmax(q)), false);
    }
    // With a single class there is no incorrect slot to offer.
    let arms = if classes >= 2 { 3 } else { 2 };
    let arm = rng.choice(arms).expect("arms > 0");
    let action = match (arm, arms) {
        (0, _) => Action(true_slot),
        (1, 3) => {
            let k = rng.choice(classes - 1).expect("classes >= 2");
            Action(if k >= true_slot { k + 1 } else { k })
        }
        _ => Action::request(classes),
    };
    (action, true)
}

pub enum Policy<'r> {
    Greedy,
    EpsilonGreedy { epsilon: f64, rng: &'r mut Rng },
}

/// Runs an environment to its end, choosing actions from the network's q-values.
pub fn rollout_env(params: &QNetParams, env: Env, policy: &mut Policy<'_>) -> Result<(Trajectory, ForwardTrace)> {
    let mut env = env;
    let classes = env.classes();
    if params.action_count() != classes + 1 {
        return Err(Error::dim(
            "rollout",
            format!("{} actions", params.action_count()),
            format!("{classes} classes + request"),
        ));
    }
    env.reset();
    let instances = env.episode().instance_index();
    let mut runner = EpisodeRunner::new(params, &env.episode().images)?;
    let mut steps = Vec::with_capacity(runner.steps());
    while !env.is_terminal() {
        let t = env.position();
        let truth = env.true_slot().expect("non-terminal");
        let q = runner.step(&env.label_channel())?;
        let (action, explored) = match policy {
            Policy::Greedy => (Action(argmax(q)), false),
            Policy::EpsilonGreedy { epsilon, rng } => select_action_traced(q, rng, *epsilon, truth),
        };
        let q = q.to_vec();
        let result = env.step(action)?;
        steps.push(Transition {
            action,
            reward: result.reward,
            q,
            was_request: result.was_request,
            was_correct: result.was_correct,
            instance: instances[t],
            true_slot: truth,
            explored,
        });
    }
    Ok((
        Trajectory {
            steps,
            terminal: true,
        },
        runner.finish()?,
    ))
}

pub fn rollout_episode(
    params: &QNetParams,
    episode: Episode,
    rewards: RewardScheme,
    policy: &mut Policy<'_>,
) -> Result<(Trajectory, ForwardTrace)> {
    rollout_env(params, Env::new(episode, rewards), policy)
}

/// Runs `items` through `f` on up to `workers` threads, keeping input order.
fn map_ordered<T: Send, R: Send>(
    items: Vec<T>,
    workers: usize,
    f: impl Fn(T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let mut chunks: Vec<Vec<T>> = Vec::new();
    let mut it = items.into_iter().peekable();
    while it.peek().is_some() {
        chunks.push(it.by_ref().take(chunk).collect());
    }
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|c| s.spawn(move || c.into_iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::new();
        for h in handles {
            out.extend(h.join().expect("rollout worker panicked")?);
        }
        Ok(out)
    })
}

/// Rolls every environment out under ε-greedy, one forked generator per
/// environment.
pub fn rollout_batch(
    params: &QNetParams,
    envs: Vec<Env>,
    rng: &mut Rng,
    epsilon: f64,
    workers: usize,
) -> Result<Vec<(Trajectory, ForwardTrace)>> {
    let jobs: Vec<(Env, Rng)> = envs.into_iter().map(|e| (e, rng.fork())).collect();
    map_ordered(jobs, workers, |(env, mut r)| {
        rollout_env(params, env, &mut Policy::EpsilonGreedy { epsilon, rng: &mut r })
    })
}

/// `r_t + γ · max_a q_{t+1}[a]`, with no bootstrap after the final step.
pub fn td_targets(trajectory: &Trajectory, gamma: f64) -> Vec<f64> {
    let steps = &trajectory.steps;
    (0..steps.len())
        .map(|t| {
            let bootstrap = match steps.get(t + 1) {
                Some(next) => gamma * next.q.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                None if trajectory.terminal => 0.0,
                None => 0.0,
            };
            steps[t].reward + bootstrap
        })
        .collect()
}

/// Squared Bellman error terms for one episode, each divided by `n`, and the
/// matching upstream gradient on the q-vectors.
fn bellman_upstream(trajectory: &Trajectory, trace: &ForwardTrace, gamma: f64, n: f64) -> Result<(f64, Matrix)> {
    if trajectory.len() != trace.len() {
        return Err(Error::dim(
            "bellman",
            format!("trajectory of {}", trajectory.len()),
            format!("trace of {}", trace.len()),
        ));
    }
    let targets = td_targets(trajectory, gamma);
    let mut dq = Matrix::zeros(trace.len(), trace.q.cols());
    let mut loss = 0.0;
    for (t, (step, y)) in trajectory.steps.iter().zip(&targets).enumerate() {
        let a = step.action.0;
        let diff = trace.q(t)[a] - y;
        loss += diff * diff / n;
        dq.set(t, a, 2.0 * diff / n);
    }
    Ok((loss, dq))
}

/// Mean squared Bellman error over every (episode, step) with actions and
/// targets held fixed, and its gradient.
pub fn bellman_loss_and_grads(
    params: &QNetParams,
    batch: &[(Trajectory, ForwardTrace)],
    gamma: f64,
) -> Result<(f64, QNetGrads)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let n = batch.iter().map(|(t, _)| t.len()).sum::<usize>() as f64;
    let mut grads = params.zero_grads();
    let mut loss = 0.0;
    for (traj, trace) in batch {
        let (l, dq) = bellman_upstream(traj, trace, gamma, n)?;
        loss += l;
        backward_episode_into(params, trace, &dq, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Bellman loss re-evaluated from the recorded observations under `params`,
/// with actions and targets taken from the trajectories.
pub fn bellman_loss(params: &QNetParams, batch: &[(Trajectory, ForwardTrace)], gamma: f64) -> Result<f64> {
    let n = batch.iter().map(|(t, _)| t.len()).sum::<usize>() as f64;
    let mut loss = 0.0;
    for (traj, trace) in batch {
        let obs: Vec<Vec<f64>> = (0..trace.len()).map(|t| trace.observations.row(t).to_vec()).collect();
        let fresh = forward_episode(params, &obs)?;
        loss += bellman_upstream(traj, &fresh, gamma, n)?.0;
    }
    Ok(loss)
}

/// Largest relative gap between [`bellman_loss_and_grads`] and central
/// differences of [`bellman_loss`], on a random network fed random
/// observations, actions and rewards. Relative error is
/// `|n - a| / max(|n|, |a|, 1e-3)`.
pub fn bellman_gradcheck(
    rng: &mut Rng,
    hidden: usize,
    input: usize,
    actions: usize,
    steps: usize,
    gamma: f64,
) -> Result<f64> {
    const EPS: f64 = 1e-5;
    let mut params = QNetParams::init(rng, hidden, input, actions, 0.5)?;
    let obs: Vec<Vec<f64>> = (0..steps)
        .map(|_| (0..input).map(|_| rng.normal(0.0, 1.0)).collect())
        .collect();
    let trace = forward_episode(&params, &obs)?;
    let mut steps_out = Vec::with_capacity(steps);
    for t in 0..steps {
        steps_out.push(Transition {
            action: Action(rng.choice(actions)?),
            reward: rng.uniform(-1.0, 1.0)?,
            q: trace.q(t).to_vec(),
            was_request: false,
            was_correct: None,
            instance: 1,
            true_slot: 0,
            explored: true,
        });
    }
    let batch = [(
        Trajectory {
            steps: steps_out,
            terminal: true,
        },
        trace,
    )];
    let (_, grads) = bellman_loss_and_grads(&params, &batch, gamma)?;
    let mut worst: f64 = 0.0;
    for b in 0..grads.blocks().len() {
        for i in 0..grads.blocks()[b].len() {
            let orig = params.blocks()[b].data()[i];
            params.blocks_mut()[b].data_mut()[i] = orig + EPS;
            let up = bellman_loss(&params, &batch, gamma)?;
            params.blocks_mut()[b].data_mut()[i] = orig - EPS;
            let down = bellman_loss(&params, &batch, gamma)?;
            params.blocks_mut()[b].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let exact = grads.blocks()[b].data()[i];
            worst = worst.max((numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-3));
        }
    }
    Ok(worst)
}

fn add_grads(into: &mut QNetGrads, other: &QNetGrads) {
    for (a, b) in into.blocks_mut().into_iter().zip(other.blocks()) {
        axpy_slice(1.0, b.data(), a.data_mut());
    }
}

/// What one worker returns for its share of a training batch.
struct ChunkResult {
    trajectories: Vec<Trajectory>,
    loss: f64,
    grads: QNetGrads,
}

/// Samples, rolls out and backpropagates a batch; partial sums are reduced in
/// chunk order.
fn q_learning_batch(
    params: &QNetParams,
    config: &TrainConfig,
    view: &DatasetView<'_>,
    rng: &mut Rng,
) -> Result<(Vec<Trajectory>, f64, QNetGrads)> {
    let seeds: Vec<Rng> = (0..config.batch_size).map(|_| rng.fork()).collect();
    let n = (config.batch_size * config.episode.steps) as f64;
    let workers = config.workers.min(config.batch_size).max(1);
    let chunk = config.batch_size.div_ceil(workers);
    let chunks: Vec<Vec<Rng>> = seeds.chunks(chunk).map(<[Rng]>::to_vec).collect();
    let results = map_ordered(chunks, workers, |rngs| {
        let mut out = ChunkResult {
            trajectories: Vec::with_capacity(rngs.len()),
            loss: 0.0,
            grads: params.zero_grads(),
        };
        for mut r in rngs {
            let episode = sample_episode(&mut r, &config.episode, view)?;
            let (traj, trace) = rollout_episode(
                params,
                episode,
                config.episode.rewards,
                &mut Policy::EpsilonGreedy {
                    epsilon: config.epsilon,
                    rng: &mut r,
                },
            )?;
            let (loss, dq) = bellman_upstream(&traj, &trace, config.gamma, n)?;
            out.loss += loss;
            backward_episode_into(params, &trace, &dq, &mut out.grads)?;
            out.trajectories.push(traj);
        }
        Ok(out)
    })?;
    let mut iter = results.into_iter();
    let first = iter.next().expect("batch_size >= 1");
    let (mut trajectories, mut loss, mut grads) = (first.trajectories, first.loss, first.grads);
    for r in iter {
        trajectories.extend(r.trajectories);
        loss += r.loss;
        add_grads(&mut grads, &r.grads);
    }
    Ok((trajectories, loss, grads))
}

/// Greedy rollouts with frozen parameters. Emits one record per batch,
/// numbered from `first_batch`, and returns them pooled.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &QNetParams,
    spec: &EpisodeSpec,
    view: &DatasetView<'_>,
    batches: usize,
    batch_size: usize,
    rng: &mut Rng,
    workers: usize,
    first_batch: usize,
    sink: &mut dyn MetricsSink,
) -> Result<Option<MetricsRecord>> {
    let mut pooled: Option<MetricsRecord> = None;
    for b in 0..batches {
        let seeds: Vec<Rng> = (0..batch_size).map(|_| rng.fork()).collect();
        let trajectories = map_ordered(seeds, workers, |mut r| {
            let episode = sample_episode(&mut r, spec, view)?;
            rollout_episode(params, episode, spec.rewards, &mut Policy::Greedy).map(|(t, _)| t)
        })?;
        let rec = instance_metrics(&trajectories, first_batch + b, Split::Test);
        sink.record(&rec)?;
        match pooled.as_mut() {
            Some(p) => {
                p.absorb(&rec);
                p.batch = rec.batch;
            }
            None => pooled = Some(rec),
        }
    }
    Ok(pooled)
}

pub struct TrainOutcome {
    pub params: QNetParams,
    pub optimizer: AdamState,
    /// Pooled greedy evaluation on the test view, if any eval batches ran.
    pub eval: Option<MetricsRecord>,
}

/// Independent generators for initialization, training and evaluation.
fn seed_streams(seed: u64) -> (Rng, Rng, Rng) {
    let mut root = Rng::new(seed);
    (root.fork(), root.fork(), root.fork())
}

fn check_views(config: &TrainConfig, train_view: &DatasetView<'_>, test_view: &DatasetView<'_>) -> Result<()> {
    for (name, v) in [("train", train_view), ("test", test_view)] {
        if v.image_dim() != config.episode.image_dim {
            return Err(Error::Config(format!(
                "{name} images have {} pixels, config expects {}",
                v.image_dim(),
                config.episode.image_dim
            )));
        }
        if v.len() < config.episode.classes {
            return Err(Error::Sampling(format!(
                "{name} split has {} classes, episodes need {}",
                v.len(),
                config.episode.classes
            )));
        }
    }
    Ok(())
}

/// Q-learning state between batches, for callers that need to look at the
/// network mid-run. [`train`] drives one of these to completion.
pub struct QTrainer {
    config: TrainConfig,
    params: QNetParams,
    adam: AdamState,
    train_rng: Rng,
    eval_rng: Rng,
    batch: usize,
}

impl QTrainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (mut init_rng, train_rng, eval_rng) = seed_streams(config.seed);
        let params = QNetParams::init(
            &mut init_rng,
            config.hidden,
            config.episode.observation_dim(),
            config.episode.action_count(),
            config.init_scale,
        )?;
        let adam = AdamState::new(&params);
        Ok(QTrainer {
            config: config.clone(),
            params,
            adam,
            train_rng,
            eval_rng,
            batch: 0,
        })
    }

    pub fn params(&self) -> &QNetParams {
        &self.params
    }

    /// Batches completed so far.
    pub fn batches_done(&self) -> usize {
        self.batch
    }

    /// One training batch and one Adam step. The record carries the loss.
    pub fn step(&mut self, view: &DatasetView<'_>, sink: &mut dyn MetricsSink) -> Result<MetricsRecord> {
        let b = self.batch;
        let mut batch_rng = self.train_rng.fork();
        let (trajectories, loss, mut grads) = q_learning_batch(&self.params, &self.config, view, &mut batch_rng)?;
        if !loss.is_finite() || !grads.all_finite() {
            sink.snapshot(&self.params, b)?;
            return Err(Error::NonFinite {
                batch: b,
                what: format!("loss {loss}, gradient norm {}", grads.global_norm()),
            });
        }
        if let Some(max) = self.config.clip {
            clip_global_norm(&mut grads, max);
        }
        adam_step(&mut self.params, &grads, &mut self.adam)?;
        let mut rec = instance_metrics(&trajectories, b, Split::Train);
        rec.loss = Some(loss);
        sink.record(&rec)?;
        self.batch += 1;
        Ok(rec)
    }

    /// Greedy evaluation with `config.eval_batches` batches, numbered after
    /// the training batches done so far.
    pub fn evaluate(&mut self, view: &DatasetView<'_>, sink: &mut dyn MetricsSink) -> Result<Option<MetricsRecord>> {
        evaluate(
            &self.params,
            &self.config.episode,
            view,
            self.config.eval_batches,
            self.config.batch_size,
            &mut self.eval_rng,
            self.config.workers,
            self.batch,
            sink,
        )
    }

    pub fn finish(self, eval: Option<MetricsRecord>) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            optimizer: self.adam,
            eval,
        }
    }
}

/// Full Q-learning run: `total_batches` training batches, then
/// `eval_batches` greedy batches on the test view with frozen parameters.
pub fn train(
    config: &TrainConfig,
    train_view: &DatasetView<'_>,
    test_view: &DatasetView<'_>,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_views(config, train_view, test_view)?;
    let mut trainer = QTrainer::new(config)?;
    for _ in 0..config.total_batches {
        trainer.step(train_view, sink)?;
    }
    let eval = trainer.evaluate(test_view, sink)?;
    Ok(trainer.finish(eval))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Forward pass for the supervised task: the label channel at step `t` always
/// carries `y_{t-1}`. Returns the trace and per-step class probabilities.
pub fn supervised_forward(params: &QNetParams, episode: &Episode) -> Result<(ForwardTrace, Matrix)> {
    let c = episode.slots;
    if params.action_count() != c {
        return Err(Error::dim(
            "supervised_forward",
            format!("{} outputs", params.action_count()),
            format!("{c} classes"),
        ));
    }
    let mut runner = EpisodeRunner::new(params, &episode.images)?;
    let mut probs = Matrix::zeros(episode.len(), c);
    let mut tail = vec![0.0; c];
    for t in 0..episode.len() {
        let logits = runner.step(&tail)?;
        probs.row_mut(t).copy_from_slice(&softmax(logits));
        tail.fill(0.0);
        tail[episode.label_slots[t]] = 1.0;
    }
    Ok((runner.finish()?, probs))
}

/// Cross-entropy terms divided by `n`, the upstream logit gradient, and the
/// per-step predictions as a trajectory.
fn supervised_upstream(params: &QNetParams, episode: &Episode, rewards: &RewardScheme, n: f64) -> Result<(f64, ForwardTrace, Matrix, Trajectory)> {
    let (trace, probs) = supervised_forward(params, episode)?;
    let instances = episode.instance_index();
    let mut dq = probs.clone();
    let mut loss = 0.0;
    let mut steps = Vec::with_capacity(episode.len());
    for t in 0..episode.len() {
        let y = episode.label_slots[t];
        loss -= probs.get(t, y).max(f64::MIN_POSITIVE).ln() / n;
        for (j, g) in dq.row_mut(t).iter_mut().enumerate() {
            *g = (*g - if j == y { 1.0 } else { 0.0 }) / n;
        }
        let pred = argmax(probs.row(t));
        let ok = pred == y;
        steps.push(Transition {
            action: Action(pred),
            reward: if ok { rewards.r_cor } else { rewards.r_inc },
            q: trace.q(t).to_vec(),
            was_request: false,
            was_correct: Some(ok),
            instance: instances[t],
            true_slot: y,
            explored: false,
        });
    }
    Ok((
        loss,
        trace,
        dq,
        Trajectory {
            steps,
            terminal: true,
        },
    ))
}

pub struct SupervisedOutcome {
    pub params: QNetParams,
    pub optimizer: AdamState,
    /// Pooled test-split record; every step is a prediction.
    pub eval: Option<MetricsRecord>,
    /// Test accuracy over steps showing the second or later instance of a class.
    pub later_accuracy: Option<f64>,
    /// Fraction of steps whose label is revealed afterwards (always 1).
    pub label_rate: f64,
}

/// Supervised baseline: same LSTM, `c` softmax outputs, cross-entropy loss,
/// and the true label always shown on the following step.
pub fn train_supervised(
    config: &TrainConfig,
    train_view: &DatasetView<'_>,
    test_view: &DatasetView<'_>,
    sink: &mut dyn MetricsSink,
) -> Result<SupervisedOutcome> {
    config.validate()?;
    check_views(config, train_view, test_view)?;
    let (mut init_rng, mut train_rng, mut eval_rng) = seed_streams(config.seed);
    let c = config.episode.classes;
    let mut params = QNetParams::init(
        &mut init_rng,
        config.hidden,
        config.episode.observation_dim(),
        c,
        config.init_scale,
    )?;
    let mut adam = AdamState::new(&params);
    let n = (config.batch_size * config.episode.steps) as f64;
    let workers = config.workers.min(config.batch_size).max(1);
    for b in 0..config.total_batches {
        let mut batch_rng = train_rng.fork();
        let seeds: Vec<Rng> = (0..config.batch_size).map(|_| batch_rng.fork()).collect();
        let chunk = config.batch_size.div_ceil(workers);
        let chunks: Vec<Vec<Rng>> = seeds.chunks(chunk).map(<[Rng]>::to_vec).collect();
        let results = map_ordered(chunks, workers, |rngs| {
            let mut out = ChunkResult {
                trajectories: Vec::new(),
                loss: 0.0,
                grads: params.zero_grads(),
            };
            for mut r in rngs {
                let episode = sample_episode(&mut r, &config.episode, train_view)?;
                let (loss, trace, dq, traj) = supervised_upstream(&params, &episode, &config.episode.rewards, n)?;
                backward_episode_into(&params, &trace, &dq, &mut out.grads)?;
                out.loss += loss;
                out.trajectories.push(traj);
            }
            Ok(out)
        })?;
        let mut iter = results.into_iter();
        let first = iter.next().expect("batch_size >= 1");
        let (mut trajectories, mut loss, mut grads) = (first.trajectories, first.loss, first.grads);
        for r in iter {
            trajectories.extend(r.trajectories);
            loss += r.loss;
            add_grads(&mut grads, &r.grads);
        }
        if !loss.is_finite() || !grads.all_finite() {
            sink.snapshot(&params, b)?;
            return Err(Error::NonFinite {
                batch: b,
                what: format!("cross-entropy {loss}"),
            });
        }
        if let Some(max) = config.clip {
            clip_global_norm(&mut grads, max);
        }
        adam_step(&mut params, &grads, &mut adam)?;
        let mut rec = instance_metrics(&trajectories, b, Split::Train);
        rec.loss = Some(loss);
        sink.record(&rec)?;
    }

    let mut pooled: Option<MetricsRecord> = None;
    let (mut later_ok, mut later_total) = (0usize, 0usize);
    for b in 0..config.eval_batches {
        let seeds: Vec<Rng> = (0..config.batch_size).map(|_| eval_rng.fork()).collect();
        let trajectories = map_ordered(seeds, workers, |mut r| {
            let episode = sample_episode(&mut r, &config.episode, test_view)?;
            supervised_upstream(&params, &episode, &config.episode.rewards, 1.0).map(|x| x.3)
        })?;
        for s in trajectories.iter().flat_map(|t| &t.steps).filter(|s| s.instance >= 2) {
            later_total += 1;
            later_ok += usize::from(s.was_correct == Some(true));
        }
        let rec = instance_metrics(&trajectories, config.total_batches + b, Split::Test);
        sink.record(&rec)?;
        match pooled.as_mut() {
            Some(p) => {
                p.absorb(&rec);
                p.batch = rec.batch;
            }
            None => pooled = Some(rec),
        }
    }
    Ok(SupervisedOutcome {
        params,
        optimizer: adam,
        eval: pooled,
        later_accuracy: (later_total > 0).then(|| later_ok as f64 / later_total as f64),
        label_rate: 1.0,
    })
}
