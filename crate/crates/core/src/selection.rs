//! Cross-validated predictive scoring and paired model comparison.
//!
//! A held-out sequence is scored by the average, over posterior draws and
//! over changepoint vectors simulated from each draw's duration prior, of
//! its log likelihood. A fold's score divides the summed log probabilities
//! of its test sequences by their total length.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CategoricalSequence, FoldPlan, SequenceDataset, MISSING};
use crate::distributions::{DurationFamily, DurationTable};
use crate::error::{Error, Result};
use crate::likelihood::{marginal_log_likelihood, ChangepointVector, Emission, EmissionCache, TransitionMatrixSet};
use crate::output::round_sig;
use crate::sampler::{run_chain, McmcConfig, PosteriorSamples};
use crate::summary::FiveNumber;

/// One model in the comparison matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub label: String,
    pub emission: Emission,
    pub duration: DurationFamily,
    pub k: usize,
    pub tying: Option<Vec<usize>>,
    /// Fit every sequence on its own instead of pooling parameters.
    pub per_sequence: bool,
}

impl ModelConfig {
    fn make(label: &str, emission: Emission, duration: DurationFamily, k: usize) -> Self {
        Self { label: label.into(), emission, duration, k, tying: None, per_sequence: false }
    }

    /// Markov emissions with negative-binomial durations.
    pub fn proposed(k: usize) -> Self {
        Self::make("proposed", Emission::Markov, DurationFamily::TruncNegBin, k)
    }

    /// Segmental independence: IID emissions, negative-binomial durations.
    pub fn si(k: usize) -> Self {
        Self::make("si", Emission::Iid, DurationFamily::TruncNegBin, k)
    }

    /// Left-to-right HMM: IID emissions, geometric durations.
    pub fn hmm(k: usize) -> Self {
        Self::make("hmm", Emission::Iid, DurationFamily::TruncGeometric, k)
    }

    /// Double Markov chain: Markov emissions, geometric durations.
    pub fn dhmm(k: usize) -> Self {
        Self::make("dhmm", Emission::Markov, DurationFamily::TruncGeometric, k)
    }

    /// Markov emissions, uniform changepoint positions, one fit per sequence.
    pub fn per_sequence_uniform(k: usize) -> Self {
        Self { per_sequence: true, ..Self::make("uniform", Emission::Markov, DurationFamily::UniformPos, k) }
    }

    pub const LABELS: [&'static str; 5] = ["proposed", "si", "hmm", "dhmm", "uniform"];

    pub fn by_label(label: &str, k: usize) -> Result<Self> {
        match label {
            "proposed" => Ok(Self::proposed(k)),
            "si" => Ok(Self::si(k)),
            "hmm" => Ok(Self::hmm(k)),
            "dhmm" => Ok(Self::dhmm(k)),
            "uniform" => Ok(Self::per_sequence_uniform(k)),
            other => Err(Error::InvalidParameter(format!(
                "unknown model {other:?}; expected one of {}",
                Self::LABELS.join(", ")
            ))),
        }
    }

    /// `base` with this model's structural choices substituted.
    pub fn apply(&self, base: &McmcConfig) -> McmcConfig {
        McmcConfig {
            k: self.k,
            emission: self.emission,
            duration: self.duration,
            tying: self.tying.clone(),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Changepoint vectors simulated per posterior draw.
    pub m: usize,
    /// Use at most this many posterior draws, evenly spaced.
    pub n_target: Option<usize>,
    /// Report `ln` of the averaged probability instead of the averaged log.
    /// This is the textbook predictive density, not the estimator used for
    /// the published comparisons.
    pub log_mean_exp: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self { m: 1000, n_target: None, log_mean_exp: false }
    }
}

/// Indices of `n_target` draws evenly spread over `n`.
pub fn subsample_indices(n: usize, n_target: Option<usize>) -> Vec<usize> {
    match n_target {
        Some(target) if target < n => (0..target).map(|i| i * n / target).collect(),
        _ => (0..n).collect(),
    }
}

fn check_alphabet(seq: &CategoricalSequence, n: usize) -> Result<()> {
    let max = std::iter::once(seq.y0()).chain(seq.values().iter().copied().filter(|&v| v != MISSING)).max();
    match max {
        Some(m) if usize::from(m) >= n => Err(Error::DimensionMismatch(format!(
            "sequence {} uses category {} but the model has n = {n}",
            seq.id(),
            m + 1
        ))),
        _ => Ok(()),
    }
}

/// Average of `ln p(y | τ, Q)` over explicit draws: `draws[i]` holds the
/// parameters of posterior draw `i` and the changepoint vectors paired with it.
pub fn average_log_likelihood(
    seq: &CategoricalSequence,
    draws: &[(TransitionMatrixSet, Vec<ChangepointVector>)],
) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut outer = 0.0;
    for (params, taus) in draws {
        check_alphabet(seq, params.n())?;
        let cache = EmissionCache::new(params);
        let mut inner = 0.0;
        for tau in taus {
            tau.check_horizon(seq.len())?;
            inner += marginal_log_likelihood(seq.y0(), seq.values(), tau.positions(), &cache);
        }
        outer += inner / taus.len() as f64;
    }
    Ok(outer / draws.len() as f64)
}

fn log_mean_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (values.iter().map(|v| (v - m).exp()).sum::<f64>() / values.len() as f64).ln()
}

/// Monte Carlo predictive log probability of a held-out sequence.
///
/// For each posterior draw, `m` changepoint vectors are simulated from the
/// draw's duration prior at the test sequence's own length, and the log
/// likelihood (missing values summed out) is averaged. With `K = 0` there is
/// nothing to simulate and one evaluation per draw is used.
pub fn predictive_log_score_sequence<R: Rng + ?Sized>(
    seq: &CategoricalSequence,
    samples: &PosteriorSamples,
    opts: &ScoreOptions,
    rng: &mut R,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if opts.m == 0 {
        return Err(Error::InvalidParameter("M must be at least 1".into()));
    }
    check_alphabet(seq, samples.n)?;
    let t = seq.len();
    let k = samples.config.k;
    let m = if k == 0 { 1 } else { opts.m };
    let mut per_draw = Vec::new();
    let mut all = Vec::new();
    let mut tau = vec![0usize; k];
    for idx in subsample_indices(samples.len(), opts.n_target) {
        let draw = &samples.draws[idx];
        let cache = EmissionCache::new(&draw.params);
        let tables: Vec<DurationTable> = draw.theta.priors().iter().map(|p| DurationTable::new(p, t)).collect();
        let mut sum = 0.0;
        for _ in 0..m {
            let mut prev = 0;
            for (slot, table) in tau.iter_mut().zip(&tables) {
                prev = table.sample(rng, prev);
                *slot = prev;
            }
            let ll = marginal_log_likelihood(seq.y0(), seq.values(), &tau, &cache);
            sum += ll;
            if opts.log_mean_exp {
                all.push(ll);
            }
        }
        per_draw.push(sum / m as f64);
    }
    Ok(if opts.log_mean_exp { log_mean_exp(&all) } else { per_draw.iter().sum::<f64>() / per_draw.len() as f64 })
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hash of a sequence id.
pub fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub test_ids: Vec<String>,
    /// `ln p(y | Y_D)` per test sequence, in `test_ids` order.
    pub log_probs: Vec<f64>,
    pub total_length: usize,
    /// Summed log probability divided by `total_length`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub model: String,
    pub reference: String,
    /// Per-fold `S_model − S_reference`.
    pub differences: Vec<f64>,
    pub stats: FiveNumber,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub model: ModelConfig,
    pub folds: Vec<FoldScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<PairedComparison>,
}

impl CvReport {
    pub fn scores(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.score).collect()
    }

    pub fn median_score(&self) -> f64 {
        FiveNumber::from_values(&self.scores()).median
    }

    /// Copy with every float rounded for output.
    pub fn rounded(&self) -> Self {
        let mut out = self.clone();
        for f in &mut out.folds {
            f.score = round_sig(f.score);
            f.log_probs.iter_mut().for_each(|v| *v = round_sig(*v));
        }
        if let Some(c) = &mut out.comparison {
            c.differences.iter_mut().for_each(|v| *v = round_sig(*v));
            c.stats = FiveNumber::from_values(&c.differences);
        }
        out
    }
}

/// Scores every test sequence of one fold against a chain fit on its training set.
fn score_fold(
    dataset: &SequenceDataset,
    train: &[String],
    test: &[String],
    config: &McmcConfig,
    opts: &ScoreOptions,
    fold: usize,
) -> Result<FoldScore> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet(fold));
    }
    let train_set = dataset.subset(train)?;
    let samples = run_chain(&train_set, config)?;
    let mut log_probs = Vec::with_capacity(test.len());
    let mut total_length = 0;
    for id in test {
        let seq = dataset.get(id).ok_or_else(|| Error::UnknownSequence(id.clone()))?;
        // seeded by id so the fold score does not depend on test order
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, id_hash(id)));
        log_probs.push(predictive_log_score_sequence(seq, &samples, opts, &mut rng)?);
        total_length += seq.len();
    }
    // summed in id order so that S does not depend on how the test set is listed
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.sort_by(|&a, &b| test[a].cmp(&test[b]));
    let score = order.iter().map(|&i| log_probs[i]).sum::<f64>() / total_length as f64;
    Ok(FoldScore { fold, test_ids: test.to_vec(), log_probs, total_length, score })
}

/// Fits `model` on each fold's training sequences (folds in parallel) and
/// scores the held-out ones. Fold `f` runs with seed `mix_seed(mcmc.seed, f)`.
pub fn cv_score(
    dataset: &SequenceDataset,
    plan: &FoldPlan,
    model: &ModelConfig,
    mcmc: &McmcConfig,
    opts: &ScoreOptions,
) -> Result<CvReport> {
    if model.per_sequence {
        return Err(Error::Unsupported(format!(
            "model {:?} fits each sequence on its own data and cannot score held-out sequences",
            model.label
        )));
    }
    if let Some(f) = plan.folds.iter().position(|f| f.test.is_empty()) {
        return Err(Error::EmptyTestSet(f));
    }
    plan.validate(dataset)?;
    let base = model.apply(mcmc);
    base.validate()?;
    let folds = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(f, fold)| {
            let config = McmcConfig { seed: mix_seed(mcmc.seed, f as u64), ..base.clone() };
            score_fold(dataset, &fold.train, &fold.test, &config, opts, f)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(bad) = folds.iter().find(|f| !f.score.is_finite()) {
        return Err(Error::InvalidParameter(format!("fold {} produced a non-finite score", bad.fold)));
    }
    Ok(CvReport { model: model.clone(), folds, comparison: None })
}

/// Per-fold `S_a − S_b` with its five-number summary.
pub fn compare_models(a: &CvReport, b: &CvReport) -> Result<PairedComparison> {
    let same_plan = a.folds.len() == b.folds.len()
        && a.folds.iter().zip(&b.folds).all(|(x, y)| {
            let mut xs = x.test_ids.clone();
            let mut ys = y.test_ids.clone();
            xs.sort();
            ys.sort();
            xs == ys
        });
    if !same_plan || a.folds.is_empty() {
        return Err(Error::MismatchedPlans);
    }
    let differences: Vec<f64> = a.folds.iter().zip(&b.folds).map(|(x, y)| x.score - y.score).collect();
    Ok(PairedComparison {
        model: a.model.label.clone(),
        reference: b.model.label.clone(),
        stats: FiveNumber::from_values(&differences),
        differences,
    })
}

/// Scores several models on one plan, then attaches to each report its
/// paired differences against the model with the best median score.
pub fn cv_compare(
    dataset: &SequenceDataset,
    plan: &FoldPlan,
    models: &[ModelConfig],
    mcmc: &McmcConfig,
    opts: &ScoreOptions,
) -> Result<Vec<CvReport>> {
    let mut reports = models.par_iter().map(|m| cv_score(dataset, plan, m, mcmc, opts)).collect::<Result<Vec<_>>>()?;
    let best = reports
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.median_score().total_cmp(&b.median_score()))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidParameter("no models to compare".into()))?;
    let reference = reports[best].clone();
    for r in &mut reports {
        r.comparison = Some(compare_models(r, &reference)?);
    }
    Ok(reports)
}

/// One CSV row per model and fold: `model,k,fold,n_test,total_length,score,reference,difference`.
pub fn write_cv_csv<W: Write>(reports: &[CvReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "k", "fold", "n_test", "total_length", "score", "reference", "difference"])?;
    for r in reports {
        for (i, f) in r.folds.iter().enumerate() {
            let (reference, diff) = match &r.comparison {
                Some(c) => (c.reference.clone(), round_sig(c.differences[i]).to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                r.model.label.clone(),
                r.model.k.to_string(),
                f.fold.to_string(),
                f.test_ids.len().to_string(),
                f.total_length.to_string(),
                round_sig(f.score).to_string(),
                reference,
                diff,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Fits every sequence separately (in parallel). Each chain is seeded from
/// `config.seed` and the sequence id alone, so a sequence's fit does not
/// depend on which other sequences are present.
pub fn fit_per_sequence(dataset: &SequenceDataset, config: &McmcConfig) -> Result<Vec<PosteriorSamples>> {
    config.validate()?;
    dataset
        .sequences()
        .par_iter()
        .map(|s| {
            let single = dataset.subset(&[s.id().to_string()])?;
            run_chain(&single, &McmcConfig { seed: mix_seed(config.seed, id_hash(s.id())), ..config.clone() })
        })
        .collect()
}
