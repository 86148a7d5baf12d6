//! The stream-labeling environment.
//!
//! Each step shows an image; the agent either predicts one of `c` label slots or
//! requests the label (action index `c`). A requested label arrives one-hot in
//! the next observation's label channel; after a prediction that channel is zero.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetView, IMAGE_DIM};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardScheme {
    pub r_req: f64,
    pub r_cor: f64,
    pub r_inc: f64,
}

impl Default for RewardScheme {
    fn default() -> Self {
        RewardScheme {
            r_req: -0.05,
            r_cor: 1.0,
            r_inc: -1.0,
        }
    }
}

impl RewardScheme {
    /// Whether `r_cor > r_req > r_inc`; other orderings are allowed but odd.
    pub fn is_ordered(&self) -> bool {
        self.r_cor > self.r_req && self.r_req > self.r_inc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub steps: usize,
    pub classes: usize,
    pub rewards: RewardScheme,
    pub image_dim: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            steps: 30,
            classes: 3,
            rewards: RewardScheme::default(),
            image_dim: IMAGE_DIM,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("episode needs at least one step".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("episode needs at least one class".into()));
        }
        if self.image_dim == 0 {
            return Err(Error::Config("image_dim must be positive".into()));
        }
        let r = &self.rewards;
        if ![r.r_req, r.r_cor, r.r_inc].iter().all(|x| x.is_finite()) {
            return Err(Error::Config("rewards must be finite".into()));
        }
        Ok(())
    }

    /// Image plus label channel.
    pub fn observation_dim(&self) -> usize {
        self.image_dim + self.classes
    }

    /// `c` prediction slots plus the request action.
    pub fn action_count(&self) -> usize {
        self.classes + 1
    }
}

/// A class drawn into an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeClass {
    pub id: u32,
    pub slot: usize,
    /// Quarter turns applied to every sample of the class.
    pub rotation: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `steps × image_dim`, row `t` is `x_t`.
    pub images: Matrix,
    pub label_slots: Vec<usize>,
    pub class_ids: Vec<u32>,
    /// Example index within its class, per step.
    pub examples: Vec<usize>,
    pub classes: Vec<EpisodeClass>,
    /// Width of the label channel (`c`).
    pub slots: usize,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.label_slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_slots.is_empty()
    }

    /// 1-based occurrence number of each step's class so far.
    pub fn instance_index(&self) -> Vec<usize> {
        instance_index(&self.class_ids)
    }
}

/// For each position, how many times that item has appeared up to and including it.
pub fn instance_index<T: Copy + Eq + std::hash::Hash>(classes: &[T]) -> Vec<usize> {
    let mut seen: HashMap<T, usize> = HashMap::new();
    classes
        .iter()
        .map(|&c| {
            let n = seen.entry(c).or_insert(0);
            *n += 1;
            *n
        })
        .collect()
}

fn build_episode(
    view: &DatasetView<'_>,
    picks: &[(usize, usize)],
    drawn: &[usize],
    slot_count: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    // Rotation per class, then a random injective class -> slot map.
    let rotations: Vec<u8> = drawn
        .iter()
        .map(|_| rng.choice(4).map(|k| k as u8))
        .collect::<Result<_>>()?;
    let slots = rng.sample_distinct(slot_count, drawn.len())?;
    let classes: Vec<EpisodeClass> = drawn
        .iter()
        .zip(&rotations)
        .zip(&slots)
        .map(|((&c, &rotation), &slot)| EpisodeClass {
            id: view.class_id(c),
            slot,
            rotation,
        })
        .collect();
    let dim = view.image_dim();
    let mut images = Matrix::zeros(picks.len(), dim);
    let mut label_slots = Vec::with_capacity(picks.len());
    let mut class_ids = Vec::with_capacity(picks.len());
    let mut examples = Vec::with_capacity(picks.len());
    for (t, &(local, example)) in picks.iter().enumerate() {
        let class = classes[local];
        images
            .row_mut(t)
            .copy_from_slice(&view.image(drawn[local], example, class.rotation));
        label_slots.push(class.slot);
        class_ids.push(class.id);
        examples.push(example);
    }
    Ok(Episode {
        images,
        label_slots,
        class_ids,
        examples,
        classes,
        slots: slot_count,
    })
}

/// Draws `spec.classes` distinct classes, then `spec.steps` examples uniformly
/// from their pooled examples without replacement.
pub fn sample_episode(rng: &mut Rng, spec: &EpisodeSpec, view: &DatasetView<'_>) -> Result<Episode> {
    spec.validate()?;
    if view.image_dim() != spec.image_dim {
        return Err(Error::dim(
            "sample_episode",
            format!("image_dim {}", spec.image_dim),
            format!("dataset images of {}", view.image_dim()),
        ));
    }
    let c = spec.classes;
    if view.len() < c {
        return Err(Error::Sampling(format!(
            "need {c} classes, dataset view has {}",
            view.len()
        )));
    }
    let drawn = rng.sample_distinct(view.len(), c)?;
    let pool: Vec<(usize, usize)> = drawn
        .iter()
        .enumerate()
        .flat_map(|(local, &cls)| (0..view.example_count(cls)).map(move |e| (local, e)))
        .collect();
    if pool.len() < spec.steps {
        return Err(Error::Sampling(format!(
            "{} steps requested but the sampled classes hold only {} examples",
            spec.steps,
            pool.len()
        )));
    }
    let picks: Vec<(usize, usize)> = rng
        .sample_distinct(pool.len(), spec.steps)?
        .into_iter()
        .map(|i| pool[i])
        .collect();
    build_episode(view, &picks, &drawn, c, rng)
}

/// `prefix_len` examples of one class followed by one example of another.
pub fn make_probe_episode(
    rng: &mut Rng,
    view: &DatasetView<'_>,
    prefix_len: usize,
    slot_count: usize,
) -> Result<Episode> {
    if view.len() < 2 {
        return Err(Error::Sampling("probe needs at least two classes".into()));
    }
    if slot_count < 2 {
        return Err(Error::Sampling("probe needs at least two label slots".into()));
    }
    let drawn = rng.sample_distinct(view.len(), 2)?;
    let available = view.example_count(drawn[0]);
    if available < prefix_len {
        return Err(Error::Sampling(format!(
            "class {} has {available} examples, probe prefix needs {prefix_len}",
            view.class_id(drawn[0])
        )));
    }
    let mut picks: Vec<(usize, usize)> = rng
        .sample_distinct(available, prefix_len)?
        .into_iter()
        .map(|e| (0, e))
        .collect();
    picks.push((1, rng.choice(view.example_count(drawn[1]))?));
    build_episode(view, &picks, &drawn, slot_count, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Action(pub usize);

impl Action {
    pub fn request(classes: usize) -> Self {
        Action(classes)
    }

    pub fn is_request(self, classes: usize) -> bool {
        self.0 == classes
    }

    pub fn one_hot(self, classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; classes + 1];
        v[self.0] = 1.0;
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub image: Vec<f64>,
    /// One-hot previous label if it was requested, otherwise all zeros.
    pub label_channel: Vec<f64>,
}

impl Observation {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.image.len() + self.label_channel.len());
        v.extend_from_slice(&self.image);
        v.extend_from_slice(&self.label_channel);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    /// `None` after the final step.
    pub next: Option<Observation>,
    /// Present only for predictions.
    pub was_correct: Option<bool>,
    pub was_request: bool,
}

/// Single-owner cursor over one episode.
#[derive(Clone, Debug)]
pub struct Env {
    episode: Episode,
    rewards: RewardScheme,
    t: usize,
    revealed: Option<usize>,
}

impl Env {
    pub fn new(episode: Episode, rewards: RewardScheme) -> Self {
        Env {
            episode,
            rewards,
            t: 0,
            revealed: None,
        }
    }

    pub fn episode(&self) -> &Episode {
        &self.episode
    }

    pub fn into_episode(self) -> Episode {
        self.episode
    }

    pub fn classes(&self) -> usize {
        self.episode.slots
    }

    /// Zero-based index of the step the next action applies to.
    pub fn position(&self) -> usize {
        self.t
    }

    pub fn is_terminal(&self) -> bool {
        self.t >= self.episode.len()
    }

    /// The correct slot for the current step. Training-time exploration only.
    pub fn true_slot(&self) -> Option<usize> {
        self.episode.label_slots.get(self.t).copied()
    }

    pub fn reset(&mut self) -> Observation {
        self.t = 0;
        self.revealed = None;
        self.observation()
    }

    fn observation(&self) -> Observation {
        let mut label_channel = vec![0.0; self.classes()];
        if let Some(slot) = self.revealed {
            label_channel[slot] = 1.0;
        }
        Observation {
            image: self.episode.images.row(self.t).to_vec(),
            label_channel,
        }
    }

    /// Label channel the observation at the current position carries.
    pub fn label_channel(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.classes()];
        if let Some(slot) = self.revealed {
            v[slot] = 1.0;
        }
        v
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.is_terminal() {
            return Err(Error::Protocol(format!(
                "action after terminal step {}",
                self.episode.len()
            )));
        }
        let c = self.classes();
        if action.0 > c {
            return Err(Error::Protocol(format!(
                "action {} outside 0..={c}",
                action.0
            )));
        }
        let truth = self.episode.label_slots[self.t];
        let (reward, was_correct) = if action.is_request(c) {
            self.revealed = Some(truth);
            (self.rewards.r_req, None)
        } else {
            self.revealed = None;
            let ok = action.0 == truth;
            (if ok { self.rewards.r_cor } else { self.rewards.r_inc }, Some(ok))
        };
        self.t += 1;
        // A label requested on the last step has no observation to ride on.
        let next = (!self.is_terminal()).then(|| self.observation());
        Ok(StepResult {
            reward,
            next,
            was_correct,
            was_request: action.is_request(c),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_glyphs;

    fn dataset() -> crate::dataset::DatasetCache {
        synth_glyphs(&mut Rng::new(10), 8, 12).unwrap()
    }

    #[test]
    fn default_episode_has_thirty_steps_three_classes() {
        let cache = dataset();
        let ep = sample_episode(&mut Rng::new(1), &EpisodeSpec::default(), &cache.full_view()).unwrap();
        assert_eq!(ep.len(), 30);
        assert_eq!(ep.images.rows(), 30);
        let mut ids = ep.class_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 3);
        let mut pairs: Vec<_> = ep.class_ids.iter().zip(&ep.examples).collect();
        pairs.sort_unstable();
        pairs.dedup();
        assert_eq!(pairs.len(), 30);
        for c in &ep.classes {
            for t in 0..30 {
                if ep.class_ids[t] == c.id {
                    assert_eq!(ep.label_slots[t], c.slot);
                }
            }
        }
    }

    #[test]
    fn single_class_episode_uses_slot_zero() {
        let cache = dataset();
        let spec = EpisodeSpec {
            steps: 5,
            classes: 1,
            ..EpisodeSpec::default()
        };
        let ep = sample_episode(&mut Rng::new(2), &spec, &cache.full_view()).unwrap();
        assert!(ep.label_slots.iter().all(|&s| s == 0));
    }

    #[test]
    fn sampling_errors() {
        let cache = synth_glyphs(&mut Rng::new(1), 2, 3).unwrap();
        let view = cache.full_view();
        assert!(matches!(
            sample_episode(&mut Rng::new(1), &EpisodeSpec::default(), &view),
            Err(Error::Sampling(_))
        ));
        let spec = EpisodeSpec {
            classes: 2,
            ..EpisodeSpec::default()
        };
        assert!(matches!(sample_episode(&mut Rng::new(1), &spec, &view), Err(Error::Sampling(_))));
        assert!(make_probe_episode(&mut Rng::new(1), &view, 5, 3).is_err());
    }

    #[test]
    fn slot_permutations_are_uniform() {
        let cache = dataset();
        let view = cache.full_view();
        let spec = EpisodeSpec {
            steps: 3,
            classes: 3,
            ..EpisodeSpec::default()
        };
        let mut rng = Rng::new(5);
        let n = 10_000;
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..n {
            let ep = sample_episode(&mut rng, &spec, &view).unwrap();
            // Slots listed in order of ascending class id.
            let mut cls = ep.classes.clone();
            cls.sort_by_key(|c| c.id);
            *counts.entry(cls.iter().map(|c| c.slot).collect()).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (&_, &c) in &counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn reset_gives_first_image_and_empty_channel() {
        let cache = dataset();
        let ep = sample_episode(&mut Rng::new(3), &EpisodeSpec::default(), &cache.full_view()).unwrap();
        let mut env = Env::new(ep.clone(), RewardScheme::default());
        let first = env.reset();
        assert_eq!(first.image, ep.images.row(0));
        assert!(first.label_channel.iter().all(|&x| x == 0.0));
        env.step(Action(3)).unwrap();
        assert_eq!(env.reset(), first);
        assert_eq!(env.reset(), first);
    }

    #[test]
    fn step_rewards_and_label_channel() {
        let cache = dataset();
        let ep = sample_episode(&mut Rng::new(4), &EpisodeSpec::default(), &cache.full_view()).unwrap();
        let mut env = Env::new(ep.clone(), RewardScheme::default());
        env.reset();
        let r = env.step(Action::request(3)).unwrap();
        assert_eq!(r.reward, -0.05);
        assert!(r.was_request && r.was_correct.is_none());
        let mut onehot = vec![0.0; 3];
        onehot[ep.label_slots[0]] = 1.0;
        assert_eq!(r.next.as_ref().unwrap().label_channel, onehot);

        let r = env.step(Action(ep.label_slots[1])).unwrap();
        assert_eq!(r.reward, 1.0);
        assert_eq!(r.was_correct, Some(true));
        assert_eq!(r.next.unwrap().label_channel, vec![0.0; 3]);

        let wrong = (ep.label_slots[2] + 1) % 3;
        let r = env.step(Action(wrong)).unwrap();
        assert_eq!(r.reward, -1.0);
        assert_eq!(r.was_correct, Some(false));

        assert!(env.step(Action(4)).is_err());
    }

    #[test]
    fn terminal_and_protocol_errors() {
        let cache = dataset();
        let spec = EpisodeSpec {
            steps: 2,
            ..EpisodeSpec::default()
        };
        let ep = sample_episode(&mut Rng::new(6), &spec, &cache.full_view()).unwrap();
        let mut env = Env::new(ep, RewardScheme::default());
        env.reset();
        assert!(env.step(Action(0)).unwrap().next.is_some());
        assert!(env.step(Action(3)).unwrap().next.is_none());
        assert!(env.is_terminal());
        assert!(matches!(env.step(Action(0)), Err(Error::Protocol(_))));
    }

    #[test]
    fn instance_indices() {
        assert_eq!(instance_index(&['A', 'A', 'B', 'A']), vec![1, 2, 1, 3]);
        assert_eq!(instance_index(&[7; 5]), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn probe_episode_shape() {
        let cache = dataset();
        let view = cache.full_view();
        for prefix in [5, 10] {
            let ep = make_probe_episode(&mut Rng::new(prefix as u64), &view, prefix, 3).unwrap();
            assert_eq!(ep.len(), prefix + 1);
            assert!(ep.class_ids[..prefix].iter().all(|&c| c == ep.class_ids[0]));
            assert_ne!(ep.class_ids[prefix], ep.class_ids[0]);
            assert_ne!(ep.label_slots[prefix], ep.label_slots[0]);
            assert!(ep.label_slots.iter().all(|&s| s < 3));
        }
    }

    #[test]
    fn fixed_policy_returns() {
        let cache = dataset();
        let view = cache.full_view();
        let spec = EpisodeSpec::default();
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let ep = sample_episode(&mut rng, &spec, &view).unwrap();
            let idx = ep.instance_index();
            let mut env = Env::new(ep.clone(), spec.rewards);
            env.reset();
            let mut always = 0.0;
            for _ in 0..30 {
                always += env.step(Action::request(3)).unwrap().reward;
            }
            assert!((always - -1.5).abs() < 1e-12);

            env.reset();
            let mut oracle = 0.0;
            for t in 0..30 {
                let a = if idx[t] == 1 { Action::request(3) } else { Action(ep.label_slots[t]) };
                oracle += env.step(a).unwrap().reward;
            }
            assert!((oracle - (3.0 * -0.05 + 27.0)).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::tensor::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn indices_per_class_are_one_to_count(items in proptest::collection::vec(0u8..4, 0..40)) {
                let idx = instance_index(&items);
                for class in 0..4u8 {
                    let mut got: Vec<usize> = items.iter().zip(&idx).filter(|(c, _)| **c == class).map(|(_, &i)| i).collect();
                    got.sort_unstable();
                    prop_assert_eq!(got.clone(), (1..=got.len()).collect::<Vec<_>>());
                }
            }

            #[test]
            fn label_channel_tracks_requests(seed in any::<u64>()) {
                let cache = synth_glyphs(&mut Rng::new(1), 4, 10).unwrap();
                let spec = EpisodeSpec { steps: 12, ..EpisodeSpec::default() };
                let mut rng = Rng::new(seed);
                let ep = sample_episode(&mut rng, &spec, &cache.full_view()).unwrap();
                let mut env = Env::new(ep.clone(), spec.rewards);
                let mut obs = env.reset();
                let mut prev: Option<usize> = None;
                for t in 0..12 {
                    match prev {
                        Some(slot) => {
                            prop_assert_eq!(obs.label_channel.iter().sum::<f64>(), 1.0);
                            prop_assert_eq!(obs.label_channel[slot], 1.0);
                        }
                        None => prop_assert!(obs.label_channel.iter().all(|&x| x == 0.0)),
                    }
                    let a = Action(rng.choice(4).unwrap());
                    let r = env.step(a).unwrap();
                    prev = r.was_request.then_some(ep.label_slots[t]);
                    match r.next {
                        Some(o) => obs = o,
                        None => prop_assert_eq!(t, 11),
                    }
                }
            }
        }
    }
}
