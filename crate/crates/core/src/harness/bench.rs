use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::Method;
use super::probe::{linear_probe, stratified_subset, Features, LinearProbe, ProbeConfig};
use super::train::{train, Trained};
use crate::encoders::Modality;
use crate::preprocess::NeuralInput;
use crate::error::{config_err, Error, Result};
use crate::synthdata::{Dataset, PairedSample, Split, SplitPolicy, WindowSpec};
use crate::tensor::Tensor;
use crate::{par, rng};

const EXTRACT_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Single,
    Across,
    Identity,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Single, Task::Across, Task::Identity];

    pub fn name(self) -> &'static str {
        match self {
            Task::Single => "single",
            Task::Across => "across",
            Task::Identity => "identity",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| config_err(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: usize,
    pub accuracy: f64,
    pub train_windows: usize,
    pub test_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub task: Task,
    pub fraction: f64,
    /// Mean over `per_domain` (identity: overall test accuracy).
    pub mean: f64,
    pub per_domain: Vec<DomainScore>,
    pub chance: f64,
    pub split: String,
    pub shuffled_labels: bool,
    /// Across-subject only: training-label reads from each fold's held-out domain.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_label_reads: Vec<u64>,
}

/// Counts training labels read by the probes, per domain.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelAudit {
    reads: Vec<u64>,
}

impl LabelAudit {
    pub fn new(domains: usize) -> Self {
        Self { reads: vec![0; domains] }
    }

    pub fn read(&mut self, domain: usize, label: usize) -> usize {
        self.reads[domain] += 1;
        label
    }

    pub fn reads(&self) -> &[u64] {
        &self.reads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub probe: ProbeConfig,
    pub fraction: f64,
    /// Permute all labels before probing; every task should then sit at chance.
    pub shuffle_labels: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { probe: ProbeConfig::default(), fraction: 1.0, shuffle_labels: false }
    }
}

/// Train and test features of one model over a fixed split.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub train: Features,
    pub test: Features,
    pub train_samples: Vec<PairedSample>,
    pub test_samples: Vec<PairedSample>,
    pub policy: SplitPolicy,
    pub source: String,
}

/// Eval-mode neural embeddings `h_n` of `samples`; the encoder is not modified.
/// `ds` is the recorded dataset; the model's own input conversion is applied here.
pub fn extract_features(model: &Trained, ds: &Dataset, samples: &[PairedSample]) -> Result<Features> {
    extract_prepared(model, &*model.config.neural_input.prepare(ds)?, samples)
}

fn extract_prepared(model: &Trained, ds: &Dataset, samples: &[PairedSample]) -> Result<Features> {
    let frames = model.config.window.neural_frames;
    let chunks = samples.len().div_ceil(EXTRACT_CHUNK);
    let parts = par::try_map_range(chunks, |c| {
        let ids = &samples[c * EXTRACT_CHUNK..((c + 1) * EXTRACT_CHUNK).min(samples.len())];
        let wins: Vec<Tensor<f32>> = ids.iter().map(|s| ds.neural_window(s, frames)).collect();
        let mut x = Tensor::stack(&wins)?;
        model.norm.neural(&mut x);
        model.bundle.embed(&x, Modality::Neural)
    })?;
    let dim = model.bundle.config.embedding_dim;
    Features::new(dim, parts.into_iter().flat_map(Tensor::into_data).collect())
}

/// Un-encoded baseline: the time-averaged image of each neural window, flattened.
pub fn raw_features(ds: &Dataset, samples: &[PairedSample], frames: usize) -> Result<Features> {
    let hw = ds.config.height * ds.config.width;
    let rows = par::map_slice(samples, |s| {
        let w = ds.neural_window(s, frames);
        let mut m = vec![0.0f32; hw];
        for t in 0..frames {
            for (a, &v) in m.iter_mut().zip(&w.data()[t * hw..(t + 1) * hw]) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= frames as f32);
        m
    });
    Features::new(hw, rows.concat())
}

fn split_description(ds: &Dataset, policy: SplitPolicy) -> String {
    format!(
        "per domain: first {} trials train, last {} test; {} domains",
        ds.config.trials_per_domain.saturating_sub(policy.test_trials),
        policy.test_trials,
        ds.domains()
    )
}

/// Encodes the model's own train/test split.
pub fn encode_split(model: &Trained, ds: &Dataset) -> Result<Encoded> {
    let prepared = model.config.neural_input.prepare(ds)?;
    let ds: &Dataset = &prepared;
    let split = Split::new(ds, model.config.window, model.config.split)?;
    Ok(Encoded {
        train: extract_prepared(model, ds, &split.train)?,
        test: extract_prepared(model, ds, &split.test)?,
        train_samples: split.train,
        test_samples: split.test,
        policy: model.config.split,
        source: format!("{} encoder h_n", model.config.method),
    })
}

pub fn raw_split(ds: &Dataset, window: WindowSpec, policy: SplitPolicy, input: NeuralInput) -> Result<Encoded> {
    let prepared = input.prepare(ds)?;
    let ds: &Dataset = &prepared;
    let split = Split::new(ds, window, policy)?;
    Ok(Encoded {
        train: raw_features(ds, &split.train, window.neural_frames)?,
        test: raw_features(ds, &split.test, window.neural_frames)?,
        train_samples: split.train,
        test_samples: split.test,
        policy,
        source: "raw time-mean frames".into(),
    })
}

/// Action and domain labels of an encoding, optionally shuffled.
struct Labels {
    train_action: Vec<usize>,
    test_action: Vec<usize>,
    train_domain: Vec<usize>,
    test_domain: Vec<usize>,
}

impl Labels {
    fn of(enc: &Encoded, opts: &EvalOptions) -> Self {
        let all = |f: fn(&PairedSample) -> usize| -> (Vec<usize>, Vec<usize>) {
            let mut v: Vec<usize> = enc.train_samples.iter().chain(&enc.test_samples).map(f).collect();
            if opts.shuffle_labels {
                let n = v.len() as u64;
                v.shuffle(&mut rng::stream(opts.probe.seed, &[0x5c, n]));
            }
            let test = v.split_off(enc.train_samples.len());
            (v, test)
        };
        let (train_action, test_action) = all(|s| s.label);
        let (train_domain, test_domain) = all(|s| s.domain);
        Self { train_action, test_action, train_domain, test_domain }
    }
}

fn mean(scores: &[DomainScore]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| s.accuracy).sum::<f64>() / scores.len() as f64
}

fn distinct(labels: impl Iterator<Item = usize>) -> usize {
    let mut v: Vec<usize> = labels.collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// One probe per domain, trained and tested on that domain alone.
pub fn benchmark_single(enc: &Encoded, ds: &Dataset, opts: &EvalOptions) -> Result<BenchmarkReport> {
    let labels = Labels::of(enc, opts);
    let k = ds.config.n_actions;
    let mut per_domain = Vec::new();
    for d in 0..ds.domains() {
        let tr: Vec<usize> = (0..enc.train_samples.len()).filter(|&i| enc.train_samples[i].domain == d).collect();
        let te: Vec<usize> = (0..enc.test_samples.len()).filter(|&i| enc.test_samples[i].domain == d).collect();
        let ytr: Vec<usize> = tr.iter().map(|&i| labels.train_action[i]).collect();
        if distinct(ytr.iter().copied()) < 2 || te.is_empty() {
            warn!("single-subject: domain {d} lacks 2 labelled actions, skipped");
            continue;
        }
        let yte: Vec<usize> = te.iter().map(|&i| labels.test_action[i]).collect();
        let acc = linear_probe(&enc.train.select(&tr), &ytr, &enc.test.select(&te), &yte, k, opts.fraction, &opts.probe)?;
        per_domain.push(DomainScore { domain: d, accuracy: acc, train_windows: tr.len(), test_windows: te.len() });
    }
    if per_domain.is_empty() {
        return Err(config_err("single-subject benchmark: no domain has 2 labelled actions"));
    }
    Ok(BenchmarkReport {
        task: Task::Single,
        fraction: opts.fraction,
        mean: mean(&per_domain),
        per_domain,
        chance: 1.0 / k as f64,
        split: format!("{}; {}; probe per domain", split_description(ds, enc.policy), enc.source),
        shuffled_labels: opts.shuffle_labels,
        target_label_reads: Vec::new(),
    })
}

/// Leave-one-domain-out with the same features for every fold.
pub fn benchmark_across(enc: &Encoded, ds: &Dataset, opts: &EvalOptions) -> Result<BenchmarkReport> {
    benchmark_across_with(ds, opts, |_| Ok((Cow::Borrowed(enc), 0)))
}

/// Leave-one-domain-out where `fold(target)` supplies the features for that
/// fold, plus how many target labels were read while producing them.
pub fn benchmark_across_with<'a, F>(ds: &Dataset, opts: &EvalOptions, fold: F) -> Result<BenchmarkReport>
where
    F: Fn(usize) -> Result<(Cow<'a, Encoded>, u64)>,
{
    if ds.domains() < 2 {
        return Err(config_err("across-subject benchmark needs at least 2 domains"));
    }
    let k = ds.config.n_actions;
    let mut per_domain = Vec::new();
    let mut target_reads = Vec::new();
    let mut source = String::new();
    for target in 0..ds.domains() {
        let (enc, upstream_reads) = fold(target)?;
        source.clone_from(&enc.source);
        let labels = Labels::of(&enc, opts);
        let mut audit = LabelAudit::new(ds.domains());
        let tr: Vec<usize> = (0..enc.train_samples.len()).filter(|&i| enc.train_samples[i].domain != target).collect();
        let ytr: Vec<usize> = tr.iter().map(|&i| audit.read(enc.train_samples[i].domain, labels.train_action[i])).collect();
        let te: Vec<usize> = (0..enc.test_samples.len()).filter(|&i| enc.test_samples[i].domain == target).collect();
        let yte: Vec<usize> = te.iter().map(|&i| labels.test_action[i]).collect();
        let reads = audit.reads()[target] + upstream_reads;
        if reads != 0 {
            return Err(Error::Contract(format!("across-subject fold {target} read {reads} target-domain training labels")));
        }
        let acc = linear_probe(&enc.train.select(&tr), &ytr, &enc.test.select(&te), &yte, k, opts.fraction, &opts.probe)?;
        per_domain.push(DomainScore { domain: target, accuracy: acc, train_windows: tr.len(), test_windows: te.len() });
        target_reads.push(reads);
    }
    Ok(BenchmarkReport {
        task: Task::Across,
        fraction: opts.fraction,
        mean: mean(&per_domain),
        per_domain,
        chance: 1.0 / k as f64,
        split: format!("leave-one-domain-out: probe on other domains' train windows, tested on the held-out domain's test windows; {source}"),
        shuffled_labels: opts.shuffle_labels,
        target_label_reads: target_reads,
    })
}

/// Probe predicting the domain of each window; lower means more domain-invariant.
pub fn benchmark_identity(enc: &Encoded, ds: &Dataset, opts: &EvalOptions) -> Result<BenchmarkReport> {
    let n_dom = ds.domains();
    if n_dom < 2 {
        return Err(config_err("identity benchmark needs at least 2 domains"));
    }
    let labels = Labels::of(enc, opts);
    let ids = stratified_subset(&labels.train_domain, opts.fraction, opts.probe.seed)?;
    let y: Vec<usize> = ids.iter().map(|&i| labels.train_domain[i]).collect();
    let probe = LinearProbe::fit(&enc.train.select(&ids), &y, n_dom, &opts.probe)?;
    let pred = probe.predict(&enc.test);
    let hits = pred.iter().zip(&labels.test_domain).filter(|(a, b)| a == b).count();
    let per_domain = (0..n_dom)
        .map(|d| {
            let te: Vec<usize> = (0..pred.len()).filter(|&i| enc.test_samples[i].domain == d).collect();
            let hits = te.iter().filter(|&&i| pred[i] == labels.test_domain[i]).count();
            DomainScore {
                domain: d,
                accuracy: if te.is_empty() { 0.0 } else { hits as f64 / te.len() as f64 },
                train_windows: enc.train_samples.iter().filter(|s| s.domain == d).count(),
                test_windows: te.len(),
            }
        })
        .collect();
    Ok(BenchmarkReport {
        task: Task::Identity,
        fraction: opts.fraction,
        mean: hits as f64 / pred.len().max(1) as f64,
        per_domain,
        chance: 1.0 / n_dom as f64,
        split: format!("{}; {}; domain-id labels", split_description(ds, enc.policy), enc.source),
        shuffled_labels: opts.shuffle_labels,
        target_label_reads: Vec::new(),
    })
}

/// Runs `tasks` on a trained model.
///
/// A supervised model has seen every domain's action labels, so its
/// across-subject score comes from one model per fold, each trained without
/// the held-out domain.
pub fn evaluate(model: &Trained, ds: &Dataset, tasks: &[Task], opts: &EvalOptions) -> Result<Vec<BenchmarkReport>> {
    let enc = encode_split(model, ds)?;
    let mut out = Vec::new();
    for &task in tasks {
        let r = match task {
            Task::Single => benchmark_single(&enc, ds, opts)?,
            Task::Identity => benchmark_identity(&enc, ds, opts)?,
            Task::Across if model.config.method == Method::Supervised => {
                let folds = supervised_folds(ds, model)?;
                benchmark_across_with(ds, opts, |t| Ok((Cow::Borrowed(&folds[t].0), folds[t].1)))?
            }
            Task::Across => benchmark_across(&enc, ds, opts)?,
        };
        info!("{task}: {:.3} (chance {:.3})", r.mean, r.chance);
        out.push(r);
    }
    Ok(out)
}

/// One supervised model per held-out domain, with its target-label read count.
fn supervised_folds(ds: &Dataset, model: &Trained) -> Result<Vec<(Encoded, u64)>> {
    par::try_map_range(ds.domains(), |target| {
        let mut cfg = model.config.clone();
        cfg.train_domains = Some((0..ds.domains()).filter(|&d| d != target).collect());
        let fold = train(ds, &cfg)?;
        let reads = fold.labels_read[target];
        Ok((encode_split(&fold, ds)?, reads))
    })
}

/// Benchmarks on raw time-mean frames (no encoder).
pub fn evaluate_raw(
    ds: &Dataset,
    window: WindowSpec,
    policy: SplitPolicy,
    input: NeuralInput,
    tasks: &[Task],
    opts: &EvalOptions,
) -> Result<Vec<BenchmarkReport>> {
    let enc = raw_split(ds, window, policy, input)?;
    tasks
        .iter()
        .map(|&t| match t {
            Task::Single => benchmark_single(&enc, ds, opts),
            Task::Across => benchmark_across(&enc, ds, opts),
            Task::Identity => benchmark_identity(&enc, ds, opts),
        })
        .collect()
}

/// Writes reports as CSV rows (task, fraction, domain, accuracy, chance, shuffled).
pub fn write_reports_csv<W: std::io::Write>(w: W, reports: &[BenchmarkReport]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["task", "fraction", "domain", "accuracy", "chance", "shuffled_labels"])?;
    for r in reports {
        for s in &r.per_domain {
            c.write_record([r.task.name(), &r.fraction.to_string(), &s.domain.to_string(), &s.accuracy.to_string(), &r.chance.to_string(), &r.shuffled_labels.to_string()])?;
        }
        c.write_record([r.task.name(), &r.fraction.to_string(), "mean", &r.mean.to_string(), &r.chance.to_string(), &r.shuffled_labels.to_string()])?;
    }
    c.flush()?;
    Ok(())
}
