//! Evaluation harnesses: per-instance request/accuracy metrics, the
//! class-switch probe, and the incorrect-reward sweep, plus their CSV forms.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetView;
use crate::env::{make_probe_episode, RewardScheme};
use crate::error::{Error, Result};
use crate::model::QNetParams;
use crate::tensor::Rng;
use crate::trainer::{rollout_episode, train, Policy, TrainConfig, Trajectory};

/// Instance indices tracked in every record.
pub const INSTANCE_KS: [usize; 4] = [1, 2, 5, 10];

pub const METRICS_CSV_HEADER: &str = "batch,split,k,request_rate,accuracy,mean_reward,mean_requests";
pub const PROBE_CSV_HEADER: &str = "prefix_len,step,request_pct,n";
pub const SWEEP_CSV_HEADER: &str = "r_inc,batch_size,seed,accuracy_pct,prediction_accuracy_pct,requests_pct,error";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Counts at the steps holding the `k`-th instance of their class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InstanceStats {
    pub k: usize,
    pub steps: usize,
    pub requests: usize,
    pub correct: usize,
}

impl InstanceStats {
    /// `None` when no step had this instance index.
    pub fn request_rate(&self) -> Option<f64> {
        (self.steps > 0).then(|| self.requests as f64 / self.steps as f64)
    }

    /// Correct predictions over all steps; requests count as incorrect.
    pub fn accuracy(&self) -> Option<f64> {
        (self.steps > 0).then(|| self.correct as f64 / self.steps as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub batch: usize,
    pub split: Split,
    pub instances: [InstanceStats; 4],
    pub episodes: usize,
    pub steps: usize,
    pub requests: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub total_reward: f64,
    /// Training loss for the batch, when one was computed.
    pub loss: Option<f64>,
}

impl MetricsRecord {
    pub fn empty(batch: usize, split: Split) -> Self {
        MetricsRecord {
            batch,
            split,
            instances: INSTANCE_KS.map(|k| InstanceStats {
                k,
                ..InstanceStats::default()
            }),
            episodes: 0,
            steps: 0,
            requests: 0,
            correct: 0,
            incorrect: 0,
            total_reward: 0.0,
            loss: None,
        }
    }

    pub fn instance(&self, k: usize) -> Option<&InstanceStats> {
        self.instances.iter().find(|s| s.k == k)
    }

    pub fn request_rate(&self, k: usize) -> Option<f64> {
        self.instance(k).and_then(InstanceStats::request_rate)
    }

    pub fn accuracy(&self, k: usize) -> Option<f64> {
        self.instance(k).and_then(InstanceStats::accuracy)
    }

    pub fn mean_reward(&self) -> f64 {
        self.total_reward / self.episodes.max(1) as f64
    }

    pub fn mean_requests(&self) -> f64 {
        self.requests as f64 / self.episodes.max(1) as f64
    }

    /// Correct over all steps (requests count as incorrect).
    pub fn overall_accuracy(&self) -> f64 {
        self.correct as f64 / self.steps.max(1) as f64
    }

    /// Correct over steps where a prediction was made.
    pub fn prediction_accuracy(&self) -> Option<f64> {
        let made = self.correct + self.incorrect;
        (made > 0).then(|| self.correct as f64 / made as f64)
    }

    pub fn request_fraction(&self) -> f64 {
        self.requests as f64 / self.steps.max(1) as f64
    }

    /// Adds another record's counts into this one.
    pub fn absorb(&mut self, other: &MetricsRecord) {
        for (a, b) in self.instances.iter_mut().zip(&other.instances) {
            a.steps += b.steps;
            a.requests += b.requests;
            a.correct += b.correct;
        }
        self.episodes += other.episodes;
        self.steps += other.steps;
        self.requests += other.requests;
        self.correct += other.correct;
        self.incorrect += other.incorrect;
        self.total_reward += other.total_reward;
    }

    /// Pools counts across records; the result takes the last record's batch index.
    pub fn pooled<'a>(records: impl IntoIterator<Item = &'a MetricsRecord>) -> Option<MetricsRecord> {
        let mut iter = records.into_iter();
        let first = iter.next()?;
        let mut acc = first.clone();
        acc.loss = None;
        for r in iter {
            acc.absorb(r);
            acc.batch = r.batch;
        }
        Some(acc)
    }

    /// Rows in the metrics CSV layout, one per tracked instance index.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for s in &self.instances {
            let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.batch,
                self.split,
                s.k,
                fmt_opt(s.request_rate()),
                fmt_opt(s.accuracy()),
                self.mean_reward(),
                self.mean_requests()
            );
        }
        out
    }
}

/// Counts requests and correct predictions per instance index over a batch.
pub fn instance_metrics(batch: &[Trajectory], batch_index: usize, split: Split) -> MetricsRecord {
    let mut rec = MetricsRecord::empty(batch_index, split);
    for traj in batch {
        rec.episodes += 1;
        for step in &traj.steps {
            rec.steps += 1;
            rec.total_reward += step.reward;
            match step.was_correct {
                None => rec.requests += 1,
                Some(true) => rec.correct += 1,
                Some(false) => rec.incorrect += 1,
            }
            if let Some(s) = rec.instances.iter_mut().find(|s| s.k == step.instance) {
                s.steps += 1;
                s.requests += usize::from(step.was_request);
                s.correct += usize::from(step.was_correct == Some(true));
            }
        }
    }
    rec
}

/// Receives one record per training or evaluation batch.
pub trait MetricsSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()>;

    /// Called with the last finite parameters before a numerical abort.
    fn snapshot(&mut self, _params: &QNetParams, _batch: usize) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}

/// Streams records as metrics CSV, and optionally losses as `batch,loss`.
pub struct CsvSink<W: Write, L: Write> {
    metrics: W,
    losses: Option<L>,
}

impl<W: Write, L: Write> CsvSink<W, L> {
    pub fn new(mut metrics: W, mut losses: Option<L>) -> Result<Self> {
        writeln!(metrics, "{METRICS_CSV_HEADER}")?;
        if let Some(l) = losses.as_mut() {
            writeln!(l, "batch,loss")?;
        }
        Ok(CsvSink { metrics, losses })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        if let Some(l) = self.losses.as_mut() {
            l.flush()?;
        }
        Ok(())
    }
}

impl<W: Write, L: Write> MetricsSink for CsvSink<W, L> {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.metrics.write_all(record.csv_rows().as_bytes())?;
        if let (Some(l), Some(loss)) = (self.losses.as_mut(), record.loss) {
            writeln!(l, "{},{}", record.batch, loss)?;
        }
        Ok(())
    }
}

/// A metrics CSV row read back for charting.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub batch: usize,
    pub split: Split,
    pub k: usize,
    pub request_rate: Option<f64>,
    pub accuracy: Option<f64>,
    pub mean_reward: f64,
    pub mean_requests: f64,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "metrics csv: unexpected header {other:?}"
            )))
        }
    }
    let bad = |n: usize, why: &str| Error::Format(format!("metrics csv line {}: {why}", n + 2));
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(n, "expected 7 fields"));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(n, "bad number"))
            }
        };
        rows.push(MetricsRow {
            batch: f[0].parse().map_err(|_| bad(n, "bad batch"))?,
            split: match f[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad(n, "bad split")),
            },
            k: f[2].parse().map_err(|_| bad(n, "bad k"))?,
            request_rate: opt(f[3])?,
            accuracy: opt(f[4])?,
            mean_reward: f[5].parse().map_err(|_| bad(n, "bad reward"))?,
            mean_requests: f[6].parse().map_err(|_| bad(n, "bad requests"))?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub prefix_len: usize,
    /// Percentage of episodes with a request at each step.
    pub request_pct: Vec<f64>,
    pub n: usize,
}

impl ProbeResult {
    /// 1-based step at which the second class appears.
    pub fn switch_step(&self) -> usize {
        self.prefix_len + 1
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{PROBE_CSV_HEADER}\n");
        for (t, pct) in self.request_pct.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", self.prefix_len, t + 1, pct, self.n);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(PROBE_CSV_HEADER) {
            return Err(Error::Format("probe csv: unexpected header".into()));
        }
        let mut result = ProbeResult {
            prefix_len: 0,
            request_pct: Vec::new(),
            n: 0,
        };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("probe csv: bad field {s:?}")));
            if f.len() != 4 {
                return Err(Error::Format("probe csv: expected 4 fields".into()));
            }
            result.prefix_len = parse(f[0])? as usize;
            result.request_pct.push(parse(f[2])?);
            result.n = parse(f[3])? as usize;
        }
        Ok(result)
    }
}

/// Greedy runs over class-switch streams: `prefix_len` images of one class,
/// then one image of another.
pub fn run_probe(
    params: &QNetParams,
    view: &DatasetView<'_>,
    prefix_len: usize,
    n_episodes: usize,
    rng: &mut Rng,
) -> Result<ProbeResult> {
    let classes = params.action_count().checked_sub(1).filter(|&c| c >= 2).ok_or_else(|| {
        Error::Config(format!(
            "probe needs a network with at least 3 actions, got {}",
            params.action_count()
        ))
    })?;
    let mut requests = vec![0usize; prefix_len + 1];
    for _ in 0..n_episodes {
        let ep = make_probe_episode(rng, view, prefix_len, classes)?;
        let (traj, _) = rollout_episode(params, ep, RewardScheme::default(), &mut Policy::Greedy)?;
        for (count, step) in requests.iter_mut().zip(&traj.steps) {
            *count += usize::from(step.was_request);
        }
    }
    Ok(ProbeResult {
        prefix_len,
        request_pct: requests
            .iter()
            .map(|&r| 100.0 * r as f64 / n_episodes.max(1) as f64)
            .collect(),
        n: n_episodes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r_inc: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Percent correct over all test steps, requests counted incorrect.
    pub accuracy_pct: f64,
    /// Percent correct over test steps where a prediction was made; NaN if none were.
    pub prediction_accuracy_pct: f64,
    pub requests_pct: f64,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn from_eval(r_inc: f64, batch_size: usize, seed: u64, eval: &MetricsRecord) -> Self {
        SweepRow {
            r_inc,
            batch_size,
            seed,
            accuracy_pct: 100.0 * eval.overall_accuracy(),
            prediction_accuracy_pct: 100.0 * eval.prediction_accuracy().unwrap_or(f64::NAN),
            requests_pct: 100.0 * eval.request_fraction(),
            error: None,
        }
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.r_inc,
            r.batch_size,
            r.seed,
            r.accuracy_pct,
            r.prediction_accuracy_pct,
            r.requests_pct,
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        );
    }
    out
}

/// Seed for the sweep run at `r_inc`, independent across reward values.
pub fn sweep_seed(base: u64, r_inc: f64) -> u64 {
    Rng::new(base ^ r_inc.to_bits()).next_u64()
}

/// Config for one sweep row: the base config with `r_inc` replaced, a derived
/// seed, and the batch doubled for `r_inc ≤ -10`.
pub fn sweep_config(base: &TrainConfig, r_inc: f64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.episode.rewards.r_inc = r_inc;
    cfg.seed = sweep_seed(base.seed, r_inc);
    if r_inc <= -10.0 {
        cfg.batch_size = base.batch_size * 2;
    }
    cfg
}

/// Trains and evaluates one model per `r_inc`. A failed run yields a row with
/// `error` set; the sweep continues.
pub fn run_sweep(
    base: &TrainConfig,
    r_inc_values: &[f64],
    train_view: &DatasetView<'_>,
    test_view: &DatasetView<'_>,
    mut on_row: impl FnMut(&SweepRow),
) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(r_inc_values.len());
    for &r_inc in r_inc_values {
        let cfg = sweep_config(base, r_inc);
        let row = match train(&cfg, train_view, test_view, &mut NullSink) {
            Ok(outcome) => match outcome.eval {
                Some(eval) => SweepRow::from_eval(r_inc, cfg.batch_size, cfg.seed, &eval),
                None => SweepRow {
                    error: Some("no evaluation batches configured".into()),
                    ..SweepRow::from_eval(r_inc, cfg.batch_size, cfg.seed, &MetricsRecord::empty(0, Split::Test))
                },
            },
            Err(e) => SweepRow {
                r_inc,
                batch_size: cfg.batch_size,
                seed: cfg.seed,
                accuracy_pct: f64::NAN,
                prediction_accuracy_pct: f64::NAN,
                requests_pct: f64::NAN,
                error: Some(e.to_string()),
            },
        };
        on_row(&row);
        rows.push(row);
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Action;
    use crate::trainer::Transition;

    fn step(instance: usize, action: Action, classes: usize, truth: usize) -> Transition {
        let was_request = action.is_request(classes);
        let was_correct = (!was_request).then_some(action.0 == truth);
        Transition {
            action,
            reward: match was_correct {
                None => -0.05,
                Some(true) => 1.0,
                Some(false) => -1.0,
            },
            q: vec![0.0; classes + 1],
            was_request,
            was_correct,
            instance,
            true_slot: truth,
            explored: false,
        }
    }

    fn traj(steps: Vec<Transition>) -> Trajectory {
        Trajectory {
            steps,
            terminal: true,
        }
    }

    #[test]
    fn always_request_policy() {
        let classes = [0, 1, 0, 2, 0, 0, 0, 1, 0, 0, 0, 0, 0];
        let inst = crate::env::instance_index(&classes);
        let t = traj(
            inst.iter()
                .zip(&classes)
                .map(|(&i, &c)| step(i, Action(3), 3, c))
                .collect(),
        );
        let rec = instance_metrics(&[t], 0, Split::Train);
        for k in INSTANCE_KS {
            assert_eq!(rec.request_rate(k), Some(1.0));
            assert_eq!(rec.accuracy(k), Some(0.0));
        }
        assert_eq!(rec.prediction_accuracy(), None);
    }

    #[test]
    fn oracle_policy() {
        let classes = [0, 1, 0, 2, 0, 0, 0, 1, 0, 0, 0, 0, 0];
        let inst = crate::env::instance_index(&classes);
        let t = traj(
            inst.iter()
                .zip(&classes)
                .map(|(&i, &c)| step(i, if i == 1 { Action(3) } else { Action(c) }, 3, c))
                .collect(),
        );
        let rec = instance_metrics(&[t], 0, Split::Train);
        assert_eq!(rec.request_rate(1), Some(1.0));
        assert_eq!(rec.accuracy(1), Some(0.0));
        for k in [2, 5, 10] {
            assert_eq!(rec.request_rate(k), Some(0.0));
            assert_eq!(rec.accuracy(k), Some(1.0));
        }
    }

    #[test]
    fn hand_counted_two_episode_batch() {
        // Episode A: classes 0,0,1,0,1; actions req, pred ok, req, pred wrong, pred ok.
        let a = traj(vec![
            step(1, Action(3), 3, 0),
            step(2, Action(0), 3, 0),
            step(1, Action(3), 3, 1),
            step(3, Action(2), 3, 0),
            step(2, Action(1), 3, 1),
        ]);
        // Episode B: classes 2,2,2,2,2; req, req, pred wrong, pred ok, pred ok.
        let b = traj(vec![
            step(1, Action(3), 3, 2),
            step(2, Action(3), 3, 2),
            step(3, Action(0), 3, 2),
            step(4, Action(2), 3, 2),
            step(5, Action(2), 3, 2),
        ]);
        let rec = instance_metrics(&[a, b], 7, Split::Test);
        // k=1: three steps, all requests.
        assert_eq!(rec.request_rate(1), Some(1.0));
        assert_eq!(rec.accuracy(1), Some(0.0));
        // k=2: A step 2 (ok), A step 5 (ok), B step 2 (req).
        assert_eq!(rec.request_rate(2), Some(1.0 / 3.0));
        assert_eq!(rec.accuracy(2), Some(2.0 / 3.0));
        // k=5: only B step 5 (ok).
        assert_eq!(rec.request_rate(5), Some(0.0));
        assert_eq!(rec.accuracy(5), Some(1.0));
        // k=10: absent.
        assert_eq!(rec.request_rate(10), None);
        assert_eq!(rec.accuracy(10), None);
        assert_eq!((rec.requests, rec.correct, rec.incorrect), (4, 4, 2));
        assert_eq!(rec.requests + rec.correct + rec.incorrect, rec.steps);
        assert!((rec.mean_reward() - (-0.2 + 4.0 - 2.0) / 2.0).abs() < 1e-12);
        assert_eq!(rec.mean_requests(), 2.0);
        assert_eq!(rec.prediction_accuracy(), Some(4.0 / 6.0));
        assert!(rec.prediction_accuracy().unwrap() >= rec.overall_accuracy());
        let csv = rec.csv_rows();
        let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
        assert_eq!(&last[..5], &["7", "test", "10", "", ""]);
        assert!((last[5].parse::<f64>().unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(last[6], "2");
    }

    #[test]
    fn csv_parses_back() {
        let a = traj(vec![step(1, Action(3), 3, 0), step(2, Action(0), 3, 0)]);
        let rec = instance_metrics(&[a], 3, Split::Train);
        let text = format!("{METRICS_CSV_HEADER}\n{}", rec.csv_rows());
        let rows = parse_metrics_csv(&text).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].request_rate, Some(1.0));
        assert_eq!(rows[1].accuracy, Some(1.0));
        assert_eq!(rows[3].request_rate, None);
        assert!(parse_metrics_csv("nope\n").is_err());
    }

    #[test]
    fn pooled_sums_counts() {
        let a = traj(vec![step(1, Action(3), 3, 0)]);
        let b = traj(vec![step(1, Action(0), 3, 0)]);
        let ra = instance_metrics(&[a], 0, Split::Train);
        let rb = instance_metrics(&[b], 1, Split::Train);
        let p = MetricsRecord::pooled([&ra, &rb]).unwrap();
        assert_eq!(p.batch, 1);
        assert_eq!(p.request_rate(1), Some(0.5));
        assert_eq!(p.accuracy(1), Some(0.5));
        assert!(MetricsRecord::pooled(std::iter::empty()).is_none());
    }

    #[test]
    fn probe_csv_round_trip() {
        let p = ProbeResult {
            prefix_len: 5,
            request_pct: vec![100.0, 10.0, 5.0, 4.0, 4.5, 80.0],
            n: 1000,
        };
        let text = p.to_csv();
        assert_eq!(text.lines().count(), 7);
        assert_eq!(ProbeResult::from_csv(&text).unwrap(), p);
    }

    #[test]
    fn sweep_config_rules() {
        let base = TrainConfig::default();
        let a = sweep_config(&base, -1.0);
        let b = sweep_config(&base, -10.0);
        assert_eq!(a.batch_size, 50);
        assert_eq!(b.batch_size, 100);
        assert_eq!(b.episode.rewards.r_inc, -10.0);
        assert_ne!(a.seed, b.seed);
        assert_eq!(a.seed, sweep_config(&base, -1.0).seed);
    }
}
