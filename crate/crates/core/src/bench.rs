//! Grid experiments, evaluation metrics, ratio-CDF curves and reports.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boosting::{boosted_adassp_fit, predict, BoostConfig};
use crate::data::{
    load_csv, one_hot_encode, preprocess, train_test_split, LabelHandling, Schema, Task,
};
use crate::error::{Error, Result};
use crate::mechanisms::NoiseDraw;
use crate::privacy::{PrivacyBudget, SplitRatio};
use crate::regression::{adassp_fit, AdasspConfig, EncodedDataset, LambdaRule};

/// Column order of the results CSV.
pub const RESULTS_HEADER: [&str; 10] = [
    "dataset",
    "algorithm",
    "epsilon",
    "delta",
    "tau",
    "rounds",
    "seed",
    "metric_name",
    "metric_value",
    "wall_ms",
];

/// Column order of the curve CSV.
pub const CURVE_HEADER: [&str; 5] = [
    "candidate",
    "baseline",
    "metric",
    "ratio",
    "cumulative_count",
];

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSONL: &str = "results.jsonl";
pub const CURVES_CSV: &str = "curves.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{a} labels for {b} predictions")));
    }
    if a == 0 {
        return Err(Error::invalid("y_true", "must be nonempty"));
    }
    Ok(())
}

fn check_labels(y: &[f64]) -> Result<()> {
    match y.iter().find(|&&v| v != 1.0 && v != -1.0) {
        Some(v) => Err(Error::invalid(
            "y_true",
            format!("labels must be -1 or +1, found {v}"),
        )),
        None => Ok(()),
    }
}

/// Mean squared error.
pub fn mse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true.len(), y_pred.len())?;
    Ok(y_true
        .iter()
        .zip(y_pred)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / y_true.len() as f64)
}

/// F1 of the predictions `sign(score)`, with a score of exactly 0 predicted
/// positive. Zero when there are no positives and no positive predictions.
pub fn f1_at_zero(y_true: &[f64], scores: &[f64]) -> Result<f64> {
    check_pair(y_true.len(), scores.len())?;
    check_labels(y_true)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&y, &s) in y_true.iter().zip(scores) {
        match (y > 0.0, s >= 0.0) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Indices sorted by descending score, then grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Result<Vec<Vec<usize>>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores", "NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    Ok(groups)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(y_true: &[f64], scores: &[f64]) -> Result<f64> {
    check_pair(y_true.len(), scores.len())?;
    check_labels(y_true)?;
    let n_pos = y_true.iter().filter(|&&y| y > 0.0).count();
    let n_neg = y_true.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("y_true", "both classes must be present"));
    }
    // Walk groups from the lowest score up, counting negatives already passed.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    for group in tie_groups(scores)?.iter().rev() {
        let pos = group.iter().filter(|&&i| y_true[i] > 0.0).count();
        let neg = group.len() - pos;
        wins += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall step curve. Tied scores are admitted as
/// a block, so a constant score yields the positive rate.
pub fn auprc(y_true: &[f64], scores: &[f64]) -> Result<f64> {
    check_pair(y_true.len(), scores.len())?;
    check_labels(y_true)?;
    let n_pos = y_true.iter().filter(|&&y| y > 0.0).count();
    if n_pos == 0 {
        return Err(Error::invalid("y_true", "no positive labels"));
    }
    let (mut tp, mut seen, mut area) = (0usize, 0usize, 0.0);
    for group in tie_groups(scores)? {
        let pos = group.iter().filter(|&&i| y_true[i] > 0.0).count();
        tp += pos;
        seen += group.len();
        area += pos as f64 * (tp as f64 / seen as f64);
    }
    Ok((area / n_pos as f64).min(1.0))
}

/// Whether `value` is admissible for the metric `name`.
pub fn metric_in_range(name: &str, value: f64) -> bool {
    match name {
        "mse" => value.is_finite() && value >= 0.0,
        "f1" | "auroc" | "auprc" => (0.0..=1.0).contains(&value),
        _ => false,
    }
}

/// Whether a smaller value of the metric is better.
pub fn lower_is_better(metric: &str) -> bool {
    metric == "mse"
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Adassp,
    BoostedAdassp,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Adassp => "adassp",
            Algorithm::BoostedAdassp => "boosted_adassp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub path: PathBuf,
    pub schema: Schema,
    /// Append a constant-1 feature before row clipping.
    #[serde(default)]
    pub intercept: bool,
}

fn default_delta() -> f64 {
    1e-6
}

fn default_split() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_x_clip() -> f64 {
    1.0
}

fn default_test_fraction() -> f64 {
    crate::data::DEFAULT_TEST_FRACTION
}

/// A grid of runs: every dataset, algorithm, epsilon, tau, rounds and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetSpec>,
    pub epsilons: Vec<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub taus: Vec<f64>,
    pub rounds_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    /// Budget weights `[gram, cross, lambda]`.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_x_clip")]
    pub x_clip: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Seed of the train/test shuffle, shared by every run on a dataset.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub strict_lambda_mode: bool,
    /// Record wall-clock time per run. Off by default so that reports are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("datasets", self.datasets.is_empty()),
            ("epsilons", self.epsilons.is_empty()),
            ("taus", self.taus.is_empty()),
            ("rounds_grid", self.rounds_grid.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("algorithms", self.algorithms.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("{name} must be nonempty")));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(Error::Config(format!("epsilon must be positive, got {e}")));
        }
        if let Some(t) = self.taus.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::Config(format!("tau must be positive, got {t}")));
        }
        if self.rounds_grid.contains(&0) {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(self.x_clip.is_finite() && self.x_clip > 0.0) {
            return Err(Error::Config(format!(
                "x_clip must be positive, got {}",
                self.x_clip
            )));
        }
        self.split_ratio()?;
        for d in &self.datasets {
            d.schema.validate()?;
        }
        Ok(())
    }

    pub fn split_ratio(&self) -> Result<SplitRatio> {
        let [a, b, c] = self.split;
        SplitRatio::new(a, b, c)
    }

    /// Resolves relative dataset paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for d in &mut self.datasets {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
        }
    }

    fn lambda_rule(&self) -> LambdaRule {
        if self.strict_lambda_mode {
            LambdaRule::Strict
        } else {
            LambdaRule::Adaptive
        }
    }
}

/// Identity of one run. Ordered by dataset, algorithm, epsilon, tau, rounds,
/// seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub dataset: String,
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub tau: f64,
    pub rounds: usize,
    pub seed: u64,
}

impl RunKey {
    /// Noise stream label, distinct for every key.
    fn stream_label(&self) -> String {
        format!(
            "run/{}/{}/{:e}/{:e}/{}",
            self.dataset.len(),
            self.dataset,
            self.epsilon,
            self.tau,
            self.rounds
        ) + "/"
            + &self.algorithm.to_string()
    }
}

impl Eq for RunKey {}

impl Ord for RunKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dataset
            .cmp(&other.dataset)
            .then(self.algorithm.cmp(&other.algorithm))
            .then(self.epsilon.total_cmp(&other.epsilon))
            .then(self.tau.total_cmp(&other.tau))
            .then(self.rounds.cmp(&other.rounds))
            .then(self.seed.cmp(&other.seed))
    }
}

impl PartialOrd for RunKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub key: RunKey,
    pub delta: f64,
    pub metrics: BTreeMap<String, f64>,
    pub wall_ms: u64,
    /// Set when the run failed; `metrics` is then empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Abort on the first failed run instead of recording it.
    pub fail_fast: bool,
    /// Worker count; `None` uses rayon's default.
    pub threads: Option<usize>,
}

struct PreparedDataset {
    name: String,
    task: Task,
    train: EncodedDataset,
    test: EncodedDataset,
}

fn prepare(spec: &DatasetSpec, config: &ExperimentConfig) -> Result<PreparedDataset> {
    let table = load_csv(&spec.path, &spec.schema)?;
    let encoded = one_hot_encode(&table, &spec.schema, spec.intercept)?;
    let (train, test) = train_test_split(&encoded, config.test_fraction, config.split_seed)?;
    // Test rows get the same norm clipping as training rows; labels stay raw.
    let test = preprocess(&test, config.x_clip, 1.0, LabelHandling::Keep)?;
    Ok(PreparedDataset {
        name: spec.name.clone(),
        task: spec.schema.task,
        train,
        test,
    })
}

fn evaluate(task: Task, y: &[f64], scores: &[f64]) -> Result<BTreeMap<String, f64>> {
    let mut m: BTreeMap<String, f64> = BTreeMap::new();
    match task {
        Task::Regression => {
            m.insert("mse".into(), mse(y, scores)?);
        }
        Task::Classification => {
            m.insert("f1".into(), f1_at_zero(y, scores)?);
            m.insert("auroc".into(), auroc(y, scores)?);
            m.insert("auprc".into(), auprc(y, scores)?);
        }
    }
    if let Some((name, v)) = m.iter().find(|(k, v)| !metric_in_range(k, **v)) {
        return Err(Error::Numerical(format!("{name} = {v} out of range")));
    }
    Ok(m)
}

fn run_one(data: &PreparedDataset, key: &RunKey, config: &ExperimentConfig) -> Result<FitSummary> {
    let budget = PrivacyBudget::from_epsilon_delta(key.epsilon, config.delta)?;
    let noise = NoiseDraw::new(key.seed, key.stream_label());
    let split = config.split_ratio()?;
    let lambda_rule = config.lambda_rule();
    let theta = match key.algorithm {
        Algorithm::Adassp => {
            let train = preprocess(&data.train, config.x_clip, key.tau, LabelHandling::Clip)?;
            adassp_fit(
                &train,
                &budget,
                &AdasspConfig { split, lambda_rule },
                &noise,
            )?
            .model
            .theta
        }
        Algorithm::BoostedAdassp => {
            let train = preprocess(&data.train, config.x_clip, key.tau, LabelHandling::Keep)?;
            let boost = BoostConfig {
                rounds: key.rounds,
                tau: key.tau,
                x_clip: config.x_clip,
                split,
                lambda_rule,
            };
            boosted_adassp_fit(&train, &budget, &boost, &noise)?
                .model()
                .theta
                .clone()
        }
    };
    let scores = predict(data.test.x(), &theta)?;
    let metrics = evaluate(data.task, data.test.y().as_slice(), scores.as_slice())?;
    Ok(FitSummary {
        feature_names: data.train.feature_names().to_vec(),
        theta: theta.iter().copied().collect(),
        metrics,
    })
}

/// A single fitted model and its held-out metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub feature_names: Vec<String>,
    pub theta: Vec<f64>,
    pub metrics: BTreeMap<String, f64>,
}

/// Fits one configuration on the training split of the named dataset, with
/// the same noise stream the grid run for `key` would use.
pub fn fit_one(config: &ExperimentConfig, key: &RunKey) -> Result<FitSummary> {
    config.validate()?;
    let spec = config
        .datasets
        .iter()
        .find(|d| d.name == key.dataset)
        .ok_or_else(|| Error::Config(format!("no dataset named {:?}", key.dataset)))?;
    run_one(&prepare(spec, config)?, key, config)
}

/// Runs the whole grid. Failed runs are kept as error records unless
/// `options.fail_fast` is set. Results come back sorted by key.
///
/// AdaSSP ignores the number of rounds but still runs once per entry of
/// `rounds_grid`, so every boosted run has a baseline with the same key.
pub fn run_experiment(config: &ExperimentConfig, options: RunOptions) -> Result<Vec<RunResult>> {
    config.validate()?;
    let datasets = config
        .datasets
        .iter()
        .map(|d| prepare(d, config))
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for (di, data) in datasets.iter().enumerate() {
        for &algorithm in &config.algorithms {
            for &epsilon in &config.epsilons {
                for &tau in &config.taus {
                    for &rounds in &config.rounds_grid {
                        for &seed in &config.seeds {
                            jobs.push((
                                di,
                                RunKey {
                                    dataset: data.name.clone(),
                                    algorithm,
                                    epsilon,
                                    tau,
                                    rounds,
                                    seed,
                                },
                            ));
                        }
                    }
                }
            }
        }
    }
    jobs.sort_by(|a, b| a.1.cmp(&b.1));
    if jobs.windows(2).any(|w| w[0].1 == w[1].1) {
        return Err(Error::Config("grid contains duplicate run keys".into()));
    }

    let work = || {
        jobs.par_iter()
            .map(|(di, key)| {
                let start = Instant::now();
                let outcome = run_one(&datasets[*di], key, config);
                let wall_ms = if config.record_wall_time {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                };
                (key.clone(), outcome, wall_ms)
            })
            .collect::<Vec<_>>()
    };
    let outcomes = match options.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut results = Vec::with_capacity(outcomes.len());
    for (key, outcome, wall_ms) in outcomes {
        match outcome {
            Ok(fit) => results.push(RunResult {
                key,
                delta: config.delta,
                metrics: fit.metrics,
                wall_ms,
                error: None,
            }),
            Err(e) if options.fail_fast => {
                return Err(Error::Data {
                    path: format!("{key:?}"),
                    message: e.to_string(),
                });
            }
            Err(e) => results.push(RunResult {
                key,
                delta: config.delta,
                metrics: BTreeMap::new(),
                wall_ms,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(results)
}

/// How runs are reduced to one value per compared task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Median over seeds for each (dataset, epsilon, tau, rounds).
    #[default]
    PerConfiguration,
    /// Median over seeds, then the best configuration over (tau, rounds) per
    /// (dataset, epsilon), chosen separately for each algorithm. This looks
    /// at test metrics and is not a private procedure.
    BestOfGrid,
}

/// Empirical CDF of candidate/baseline metric ratios over tasks. Ratios
/// below 1 mean the candidate did better, whatever the metric.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioCdfCurve {
    pub candidate: String,
    pub baseline: String,
    pub metric: String,
    /// Distinct ratios ascending, each with the number of tasks at or below it.
    pub points: Vec<(f64, usize)>,
}

impl RatioCdfCurve {
    pub fn task_count(&self) -> usize {
        self.points.last().map_or(0, |p| p.1)
    }

    /// Number of tasks with ratio at most `x`.
    pub fn count_at(&self, x: f64) -> usize {
        self.points
            .iter()
            .take_while(|p| p.0 <= x)
            .last()
            .map_or(0, |p| p.1)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

type TaskKey = (String, u64, u64, usize);

fn task_medians(
    results: &[RunResult],
    metric: &str,
    aggregation: Aggregation,
) -> Result<(String, BTreeMap<TaskKey, f64>)> {
    let algorithm = match results.first() {
        Some(r) => r.key.algorithm,
        None => return Err(Error::invalid("results", "empty result list")),
    };
    if results.iter().any(|r| r.key.algorithm != algorithm) {
        return Err(Error::invalid("results", "mixes algorithms"));
    }
    let mut groups: BTreeMap<TaskKey, Vec<f64>> = BTreeMap::new();
    for r in results {
        let k = (
            r.key.dataset.clone(),
            r.key.epsilon.to_bits(),
            r.key.tau.to_bits(),
            r.key.rounds,
        );
        let entry = groups.entry(k).or_default();
        if let Some(&v) = r.metrics.get(metric) {
            entry.push(v);
        }
    }
    let mut medians = BTreeMap::new();
    for (k, values) in groups {
        if values.is_empty() {
            return Err(Error::invalid(
                "results",
                format!("no {metric} values for {} ({algorithm})", k.0),
            ));
        }
        medians.insert(k, median(values));
    }
    if aggregation == Aggregation::BestOfGrid {
        let mut best: BTreeMap<TaskKey, f64> = BTreeMap::new();
        for ((dataset, eps, _, _), v) in medians {
            let slot = best.entry((dataset, eps, 0, 0)).or_insert(v);
            let better = if lower_is_better(metric) {
                v < *slot
            } else {
                v > *slot
            };
            if better {
                *slot = v;
            }
        }
        medians = best;
    }
    Ok((algorithm.to_string(), medians))
}

/// Ratio of two aggregated metrics oriented so that below 1 favors the
/// candidate. A zero denominator gives `+inf`, or 1 when both are zero.
pub fn oriented_ratio(metric: &str, candidate: f64, baseline: f64) -> f64 {
    let (num, den) = if lower_is_better(metric) {
        (candidate, baseline)
    } else {
        (baseline, candidate)
    };
    if den == 0.0 {
        if num == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Builds the ratio CDF of `candidate` against `baseline` runs matched on
/// (dataset, epsilon, tau, rounds).
pub fn ratio_cdf(
    candidate: &[RunResult],
    baseline: &[RunResult],
    metric: &str,
    aggregation: Aggregation,
) -> Result<RatioCdfCurve> {
    let (cand_name, cand) = task_medians(candidate, metric, aggregation)?;
    let (base_name, base) = task_medians(baseline, metric, aggregation)?;
    if cand.len() != base.len() || cand.keys().any(|k| !base.contains_key(k)) {
        return Err(Error::invalid(
            "results",
            "candidate and baseline cover different tasks",
        ));
    }
    let mut ratios: Vec<f64> = cand
        .iter()
        .map(|(k, &c)| oriented_ratio(metric, c, base[k]))
        .collect();
    ratios.sort_by(f64::total_cmp);
    let mut points: Vec<(f64, usize)> = Vec::new();
    for (i, r) in ratios.into_iter().enumerate() {
        match points.last_mut() {
            Some(last) if last.0 == r => last.1 = i + 1,
            _ => points.push((r, i + 1)),
        }
    }
    Ok(RatioCdfCurve {
        candidate: cand_name,
        baseline: base_name,
        metric: metric.into(),
        points,
    })
}

/// Curves of boosted against single-shot AdaSSP for every metric present,
/// each over the datasets that report that metric.
pub fn default_curves(
    results: &[RunResult],
    aggregation: Aggregation,
) -> Result<Vec<RatioCdfCurve>> {
    let metrics: BTreeSet<&String> = results.iter().flat_map(|r| r.metrics.keys()).collect();
    let mut curves = Vec::new();
    for metric in metrics {
        let datasets: BTreeSet<&str> = results
            .iter()
            .filter(|r| r.metrics.contains_key(metric))
            .map(|r| r.key.dataset.as_str())
            .collect();
        let of = |a: Algorithm| {
            results
                .iter()
                .filter(|r| r.key.algorithm == a && datasets.contains(r.key.dataset.as_str()))
                .cloned()
                .collect::<Vec<_>>()
        };
        let (cand, base) = (of(Algorithm::BoostedAdassp), of(Algorithm::Adassp));
        if !cand.is_empty() && !base.is_empty() {
            curves.push(ratio_cdf(&cand, &base, metric, aggregation)?);
        }
    }
    Ok(curves)
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<std::fs::File>>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?))
}

/// Writes `results.csv` (one row per run and metric), `results.jsonl` (one
/// record per run, failures included), `curves.csv` and `manifest.json`
/// (config echo plus crate version) into `dir`.
pub fn emit_report(
    results: &[RunResult],
    curves: &[RatioCdfCurve],
    config: &serde_json::Value,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join(RESULTS_CSV);
    let mut w = csv_writer(&path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in results {
        let k = &r.key;
        for (name, value) in &r.metrics {
            w.write_record([
                k.dataset.clone(),
                k.algorithm.to_string(),
                k.epsilon.to_string(),
                r.delta.to_string(),
                k.tau.to_string(),
                k.rounds.to_string(),
                k.seed.to_string(),
                name.clone(),
                value.to_string(),
                r.wall_ms.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(RESULTS_JSONL);
    let mut w = create(&path)?;
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_curves(curves, &dir.join(CURVES_CSV))?;

    let path = dir.join(MANIFEST_JSON);
    let manifest = serde_json::json!({
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "runs": results.len(),
        "failed_runs": results.iter().filter(|r| r.error.is_some()).count(),
    });
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn write_curves(curves: &[RatioCdfCurve], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(CURVE_HEADER)?;
    for c in curves {
        for (ratio, count) in &c.points {
            w.write_record([
                c.candidate.clone(),
                c.baseline.clone(),
                c.metric.clone(),
                ratio.to_string(),
                count.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads records written to `results.jsonl`.
pub fn read_results_jsonl(path: &Path) -> Result<Vec<RunResult>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mse(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(mse(&[0.0], &[1.0, 1.0]).is_err());
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_at_zero(&[1.0, -1.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert_eq!(f1_at_zero(&[1.0, -1.0], &[-0.3, 2.0]).unwrap(), 0.0);
        // TP, FP, FN one each.
        assert_eq!(
            f1_at_zero(&[1.0, -1.0, 1.0], &[1.0, 1.0, -1.0]).unwrap(),
            0.5
        );
        // A zero score counts as positive.
        assert_eq!(f1_at_zero(&[1.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(f1_at_zero(&[-1.0], &[-1.0]).unwrap(), 0.0);
        assert!(f1_at_zero(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[1.0, -1.0], &[0.9, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, -1.0], &[0.1, 0.9]).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0, -1.0, 1.0, -1.0], &[0.5; 4]).unwrap(), 0.5);
        assert!(auroc(&[1.0, 1.0], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[1.0, 1.0, -1.0], &[3.0, 2.0, 1.0]).unwrap(), 1.0);
        // Single positive ranked last of four: precision 1/4 at full recall.
        assert_eq!(
            auprc(&[-1.0, -1.0, -1.0, 1.0], &[4.0, 3.0, 2.0, 1.0]).unwrap(),
            0.25
        );
        let y = [1.0, -1.0, -1.0, 1.0, -1.0];
        assert!((auprc(&y, &[0.0; 5]).unwrap() - 0.4).abs() < 1e-15);
        assert!(auprc(&[-1.0, -1.0], &[0.0, 1.0]).is_err());
    }

    /// Without ties the grouped sweep reduces to average precision.
    #[test]
    fn auprc_matches_naive_sweep_without_ties() {
        let y = [1.0, -1.0, 1.0, -1.0, -1.0, 1.0];
        let s = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let mut tp = 0.0;
        let mut ap = 0.0;
        for (k, &label) in y.iter().enumerate() {
            if label > 0.0 {
                tp += 1.0;
                ap += tp / (k as f64 + 1.0);
            }
        }
        assert!((auprc(&y, &s).unwrap() - ap / 3.0).abs() < 1e-15);
    }

    fn fake(algorithm: Algorithm, dataset: &str, tau: f64, seed: u64, mse_value: f64) -> RunResult {
        RunResult {
            key: RunKey {
                dataset: dataset.into(),
                algorithm,
                epsilon: 1.0,
                tau,
                rounds: 1,
                seed,
            },
            delta: 1e-6,
            metrics: BTreeMap::from([("mse".to_string(), mse_value)]),
            wall_ms: 0,
            error: None,
        }
    }

    #[test]
    fn ratio_examples() {
        let base: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|d| fake(Algorithm::Adassp, d, 1.0, 0, 2.0))
            .collect();
        let same: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|d| fake(Algorithm::BoostedAdassp, d, 1.0, 0, 2.0))
            .collect();
        let curve = ratio_cdf(&same, &base, "mse", Aggregation::PerConfiguration).unwrap();
        assert_eq!(curve.points, vec![(1.0, 3)]);

        let cand: Vec<_> = [("a", 1.0), ("b", 2.0), ("c", 4.0)]
            .iter()
            .map(|(d, v)| fake(Algorithm::BoostedAdassp, d, 1.0, 0, *v))
            .collect();
        let curve = ratio_cdf(&cand, &base, "mse", Aggregation::PerConfiguration).unwrap();
        assert_eq!(curve.points, vec![(0.5, 1), (1.0, 2), (2.0, 3)]);
        assert_eq!(curve.count_at(1.0), 2);
        assert_eq!(curve.count_at(0.1), 0);

        let zero = vec![fake(Algorithm::Adassp, "a", 1.0, 0, 0.0)];
        let one = vec![fake(Algorithm::BoostedAdassp, "a", 1.0, 0, 1.0)];
        assert_eq!(
            ratio_cdf(&one, &zero, "mse", Aggregation::PerConfiguration)
                .unwrap()
                .points,
            vec![(f64::INFINITY, 1)]
        );

        assert!(ratio_cdf(&cand[..2], &base, "mse", Aggregation::PerConfiguration).is_err());
    }

    #[test]
    fn ratio_aggregation() {
        // Median over seeds {1, 3, 100} is 3.
        let cand: Vec<_> = [1.0, 3.0, 100.0]
            .iter()
            .enumerate()
            .map(|(s, v)| fake(Algorithm::BoostedAdassp, "a", 1.0, s as u64, *v))
            .collect();
        let base: Vec<_> = (0..3)
            .map(|s| fake(Algorithm::Adassp, "a", 1.0, s, 6.0))
            .collect();
        assert_eq!(
            ratio_cdf(&cand, &base, "mse", Aggregation::PerConfiguration)
                .unwrap()
                .points,
            vec![(0.5, 1)]
        );

        let cand = vec![
            fake(Algorithm::BoostedAdassp, "a", 1.0, 0, 4.0),
            fake(Algorithm::BoostedAdassp, "a", 2.0, 0, 1.0),
        ];
        let base = vec![
            fake(Algorithm::Adassp, "a", 1.0, 0, 2.0),
            fake(Algorithm::Adassp, "a", 2.0, 0, 8.0),
        ];
        let best = ratio_cdf(&cand, &base, "mse", Aggregation::BestOfGrid).unwrap();
        assert_eq!(best.points, vec![(0.5, 1)]);
    }

    #[test]
    fn score_metrics_invert_orientation() {
        assert_eq!(oriented_ratio("auroc", 0.8, 0.4), 0.5);
        assert_eq!(oriented_ratio("mse", 0.8, 0.4), 2.0);
        assert_eq!(oriented_ratio("mse", 0.0, 0.0), 1.0);
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&[], &[], &serde_json::json!({}), dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(RESULTS_CSV)).unwrap();
        assert_eq!(csv, RESULTS_HEADER.join(",") + "\n");
        assert_eq!(
            std::fs::read_to_string(dir.path().join(RESULTS_JSONL)).unwrap(),
            ""
        );
        let curves = std::fs::read_to_string(dir.path().join(CURVES_CSV)).unwrap();
        assert_eq!(curves, CURVE_HEADER.join(",") + "\n");
    }

    #[test]
    fn report_rows_and_round_trip() {
        let results: Vec<_> = (0..4)
            .map(|s| fake(Algorithm::Adassp, "a", 1.0, s, 0.5 + s as f64))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&results, &[], &serde_json::json!({"k": 1}), dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(RESULTS_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(
            read_results_jsonl(&dir.path().join(RESULTS_JSONL)).unwrap(),
            results
        );
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_maps(
            pairs in prop::collection::vec((any::<bool>(), -5.0f64..5.0), 2..40),
            a in 0.1f64..3.0,
            b in -2.0f64..2.0,
        ) {
            let y: Vec<f64> = pairs.iter().map(|p| if p.0 { 1.0 } else { -1.0 }).collect();
            prop_assume!(y.contains(&1.0) && y.contains(&-1.0));
            let s: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mapped: Vec<f64> = s.iter().map(|v| (a * v + b).exp() + v.powi(3)).collect();
            let base = auroc(&y, &s).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            prop_assert!((auroc(&y, &mapped).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn metrics_in_range(pairs in prop::collection::vec((any::<bool>(), -5.0f64..5.0), 2..40)) {
            let y: Vec<f64> = pairs.iter().map(|p| if p.0 { 1.0 } else { -1.0 }).collect();
            let s: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assert!(metric_in_range("f1", f1_at_zero(&y, &s).unwrap()));
            prop_assert!(metric_in_range("mse", mse(&y, &s).unwrap()));
            if y.contains(&1.0) {
                prop_assert!(metric_in_range("auprc", auprc(&y, &s).unwrap()));
            }
        }

        #[test]
        fn ratio_cdf_is_a_step_cdf(values in prop::collection::vec((0.01f64..10.0, 0.01f64..10.0), 1..30)) {
            let cand: Vec<_> = values.iter().enumerate()
                .map(|(i, v)| fake(Algorithm::BoostedAdassp, &format!("d{i}"), 1.0, 0, v.0)).collect();
            let base: Vec<_> = values.iter().enumerate()
                .map(|(i, v)| fake(Algorithm::Adassp, &format!("d{i}"), 1.0, 0, v.1)).collect();
            let c = ratio_cdf(&cand, &base, "mse", Aggregation::PerConfiguration).unwrap();
            prop_assert!(c.points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
            prop_assert_eq!(c.task_count(), values.len());
        }
    }
}
