//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{load_dataset, make_folds, write_jsonl, DataFormat, FoldStrategy, LoadOptions, SequenceDataset};
use crate::distributions::DurationFamily;
use crate::likelihood::{Emission, TransitionMatrixSet};
use crate::output::{round_sig, write_atomic};
use crate::sampler::{read_posterior, run_chain, write_posterior, McmcConfig, PosteriorSamples};
use crate::selection::{
    cv_compare, fit_per_sequence, id_hash, mix_seed, predictive_log_score_sequence, write_cv_csv, ModelConfig,
    ScoreOptions,
};
use crate::simulate::{simulate_dataset, Preset, SimulationSpec};
use crate::summary::{
    changepoint_marginals, param_summary, segment_marginals, symmetric_probability_interval, write_marginal_csv,
};

#[derive(Debug, Parser)]
#[command(name = "segmark", version, about = "Changepoint detection for sets of categorical sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset and its true changepoints.
    Simulate {
        /// Built-in scenario (scenario1 … scenario5).
        #[arg(long, conflicts_with = "spec")]
        preset: Option<String>,
        /// Simulation spec as JSON.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Run the sampler and write the posterior with its summaries.
    Fit {
        data: PathBuf,
        /// Fit every sequence on its own (per-sequence variant).
        #[arg(long)]
        per_sequence: bool,
    },
    /// Cross-validated comparison over changepoint counts and models.
    Cv {
        data: PathBuf,
        /// Comma-separated model labels: proposed, si, hmm, dhmm.
        #[arg(long, default_value = "proposed", value_delimiter = ',')]
        models: Vec<String>,
    },
    /// Score held-out sequences against a saved posterior.
    Score { posterior: PathBuf, data: PathBuf },
    /// Recompute every summary table from a saved posterior.
    Report { posterior: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmissionArg {
    Markov,
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DurationArg {
    Negbin,
    Geometric,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FoldStrategyArg {
    HoldOneOut,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Jsonl,
    Csv,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Number of categories (otherwise taken from the data header).
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Changepoint count; `cv` accepts a comma-separated list.
    #[arg(long = "K", global = true, value_delimiter = ',', default_value = "1")]
    pub k: Vec<usize>,
    #[arg(long, global = true, default_value_t = 100_000)]
    pub iterations: usize,
    #[arg(long, global = true, default_value_t = 10_000)]
    pub burn_in: usize,
    #[arg(long, global = true, default_value_t = 100)]
    pub thin: usize,
    /// Sweeps over all changepoints per iteration.
    #[arg(long = "V", global = true, default_value_t = 5)]
    pub sweeps: usize,
    #[arg(long, global = true, default_value_t = 1000.0)]
    pub a_r: f64,
    #[arg(long, global = true, default_value_t = 100.0)]
    pub a_b: f64,
    #[arg(long, global = true, default_value_t = 1000.0)]
    pub a_q: f64,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "markov")]
    pub emission: EmissionArg,
    #[arg(long, global = true, value_enum, default_value = "negbin")]
    pub duration: DurationArg,
    /// Share parameters between the first and last segments (needs K ≠ 1).
    #[arg(long, global = true)]
    pub tie_ends: bool,
    /// Number of folds; defaults to one per sequence.
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub fold_strategy: Option<FoldStrategyArg>,
    /// Changepoint vectors simulated per posterior draw when scoring.
    #[arg(long = "M", global = true, default_value_t = 1000)]
    pub m: usize,
    /// Use at most this many posterior draws when scoring.
    #[arg(long, global = true)]
    pub n_target: Option<usize>,
    /// Score with the log of the averaged probability instead of the averaged log.
    #[arg(long, global = true)]
    pub log_mean_exp: bool,
    #[arg(long, global = true, default_value = "NA")]
    pub missing_token: String,
    /// Input data format; inferred from the extension when omitted.
    #[arg(long, global = true, value_enum)]
    pub format: Option<FormatArg>,
    /// Credible and probability interval level.
    #[arg(long, global = true, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

impl GlobalArgs {
    fn single_k(&self) -> anyhow::Result<usize> {
        match self.k.as_slice() {
            [k] => Ok(*k),
            _ => bail!("--K takes a single value here, got {:?}", self.k),
        }
    }

    fn tying(&self, k: usize) -> anyhow::Result<Option<Vec<usize>>> {
        Ok(if self.tie_ends { Some(TransitionMatrixSet::tie_ends(k)?) } else { None })
    }

    fn mcmc(&self, k: usize) -> anyhow::Result<McmcConfig> {
        let config = McmcConfig {
            k,
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            sweeps: self.sweeps,
            a_r: self.a_r,
            a_b: self.a_b,
            a_q: self.a_q,
            seed: self.seed.unwrap_or(0),
            duration: match self.duration {
                DurationArg::Negbin => DurationFamily::TruncNegBin,
                DurationArg::Geometric => DurationFamily::TruncGeometric,
                DurationArg::Uniform => DurationFamily::UniformPos,
            },
            emission: match self.emission {
                EmissionArg::Markov => Emission::Markov,
                EmissionArg::Iid => Emission::Iid,
            },
            tying: self.tying(k)?,
            ..McmcConfig::default()
        };
        config.validate()?;
        Ok(config)
    }

    fn score_options(&self) -> ScoreOptions {
        ScoreOptions { m: self.m, n_target: self.n_target, log_mean_exp: self.log_mean_exp }
    }

    fn load(&self, path: &Path) -> anyhow::Result<SequenceDataset> {
        let format = match self.format {
            Some(FormatArg::Csv) => DataFormat::Csv,
            Some(FormatArg::Jsonl) => DataFormat::Jsonl,
            None if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => DataFormat::Csv,
            None => DataFormat::Jsonl,
        };
        let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
        let opts = LoadOptions { format, n: self.n, missing_token: self.missing_token.clone() };
        let (dataset, report) = load_dataset(std::io::BufReader::new(file), &opts)
            .with_context(|| format!("reading {}", path.display()))?;
        if !report.defaulted_y0.is_empty() {
            eprintln!(
                "note: no position-0 row for {} sequence(s); y0 set to the first observed value: {}",
                report.defaulted_y0.len(),
                report.defaulted_y0.join(", ")
            );
        }
        Ok(dataset)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

#[derive(Serialize)]
struct Truth {
    sequence_ids: Vec<String>,
    tau: Vec<crate::likelihood::ChangepointVector>,
}

#[derive(Serialize)]
struct IntervalRow {
    sequence_id: String,
    changepoint: usize,
    mean: f64,
    lower: usize,
    upper: usize,
    mass: f64,
}

/// Writes summary JSON, both marginal CSVs and the probability intervals for
/// one posterior, with file names prefixed by `prefix`.
fn write_reports(samples: &PosteriorSamples, level: f64, out_dir: &Path, prefix: &str) -> anyhow::Result<Vec<PathBuf>> {
    let summary = param_summary(samples, level)?;
    let summary_path = out_dir.join(format!("{prefix}summary.json"));
    write_json(&summary_path, &summary.rounded())?;

    let mut membership = Vec::new();
    let mut changepoints = Vec::new();
    let mut intervals = csv::Writer::from_writer(Vec::new());
    for id in &samples.sequence_ids {
        membership.push(segment_marginals(samples, id)?);
        let cp = changepoint_marginals(samples, id)?;
        for (i, row) in cp.rows().iter().enumerate() {
            let pi = symmetric_probability_interval(row, level)?;
            intervals.serialize(IntervalRow {
                sequence_id: id.clone(),
                changepoint: i + 1,
                mean: round_sig(pi.mean),
                lower: pi.lower,
                upper: pi.upper,
                mass: round_sig(pi.mass),
            })?;
        }
        changepoints.push(cp);
    }
    let mut paths = vec![summary_path];
    for (name, tables) in [("segment_marginals.csv", &membership), ("changepoint_marginals.csv", &changepoints)] {
        let mut buf = Vec::new();
        write_marginal_csv(tables, &mut buf)?;
        let path = out_dir.join(format!("{prefix}{name}"));
        write_atomic(&path, &buf)?;
        paths.push(path);
    }
    let path = out_dir.join(format!("{prefix}intervals.csv"));
    write_atomic(&path, &intervals.into_inner()?)?;
    paths.push(path);
    Ok(paths)
}

/// Writes the posterior and returns it as read back, so that summaries are
/// computed from exactly the rounded values on disk and `report` reproduces them.
fn write_posterior_file(samples: &PosteriorSamples, path: &Path) -> anyhow::Result<PosteriorSamples> {
    let mut buf = Vec::new();
    write_posterior(samples, &mut buf)?;
    write_atomic(path, &buf)?;
    Ok(read_posterior(buf.as_slice())?)
}

fn read_posterior_file(path: &Path) -> anyhow::Result<PosteriorSamples> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_posterior(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn announce(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    let g = &cli.global;
    if !(g.level > 0.0 && g.level < 1.0) {
        bail!("--level must lie in (0, 1)");
    }
    match &cli.command {
        Command::Simulate { preset, spec } => {
            let mut spec: SimulationSpec = match (preset, spec) {
                (Some(name), None) => name.parse::<Preset>()?.spec(),
                (None, Some(path)) => serde_json::from_str(
                    &fs::read_to_string(path).with_context(|| format!("cannot open {}", path.display()))?,
                )
                .with_context(|| format!("parsing {}", path.display()))?,
                _ => bail!("simulate needs exactly one of --preset or --spec"),
            };
            if let Some(seed) = g.seed {
                spec.seed = Some(seed);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(0));
            let (dataset, truth) = simulate_dataset(&spec, &mut rng)?;
            let data_path = g.out_dir.join("data.jsonl");
            let mut buf = Vec::new();
            write_jsonl(&dataset, &mut buf)?;
            write_atomic(&data_path, &buf)?;
            let truth_path = g.out_dir.join("truth.json");
            write_json(&truth_path, &Truth { sequence_ids: dataset.ids(), tau: truth })?;
            announce(&[data_path, truth_path]);
        }
        Command::Fit { data, per_sequence } => {
            let dataset = g.load(data)?;
            let config = g.mcmc(g.single_k()?)?;
            if *per_sequence {
                let mut paths = Vec::new();
                for samples in fit_per_sequence(&dataset, &config)? {
                    let prefix = format!("{}.", samples.sequence_ids[0]);
                    let path = g.out_dir.join(format!("{prefix}posterior.jsonl"));
                    let saved = write_posterior_file(&samples, &path)?;
                    paths.push(path);
                    paths.extend(write_reports(&saved, g.level, &g.out_dir, &prefix)?);
                }
                announce(&paths);
            } else {
                let samples = run_chain(&dataset, &config)?;
                let path = g.out_dir.join("posterior.jsonl");
                let saved = write_posterior_file(&samples, &path)?;
                let mut paths = vec![path];
                paths.extend(write_reports(&saved, g.level, &g.out_dir, "")?);
                announce(&paths);
                println!("{} draws", samples.len());
            }
        }
        Command::Cv { data, models } => {
            let dataset = g.load(data)?;
            let folds = g.folds.unwrap_or(dataset.len());
            let strategy = match g.fold_strategy {
                Some(FoldStrategyArg::HoldOneOut) => FoldStrategy::HoldOneOut,
                Some(FoldStrategyArg::Random) => FoldStrategy::RandomPartition,
                None if folds == dataset.len() => FoldStrategy::HoldOneOut,
                None => FoldStrategy::RandomPartition,
            };
            let seed = g.seed.unwrap_or(0);
            let plan = make_folds(&dataset, folds, strategy, seed)?;
            let base = g.mcmc(0)?;
            let mut configs = Vec::new();
            for &k in &g.k {
                for label in models {
                    let mut model = ModelConfig::by_label(label.trim(), k)?;
                    model.tying = g.tying(k)?;
                    if g.tie_ends {
                        model.label = format!("{}+tied", model.label);
                    }
                    configs.push(model);
                }
            }
            let reports = cv_compare(&dataset, &plan, &configs, &base, &g.score_options())?;
            let json_path = g.out_dir.join("cv_report.json");
            write_json(&json_path, &reports.iter().map(|r| r.rounded()).collect::<Vec<_>>())?;
            let csv_path = g.out_dir.join("cv_report.csv");
            let mut buf = Vec::new();
            write_cv_csv(&reports, &mut buf)?;
            write_atomic(&csv_path, &buf)?;
            for r in &reports {
                let c = r.comparison.as_ref().expect("comparison attached");
                println!(
                    "{:>10} K={} median S={} median diff vs {}={}",
                    r.model.label,
                    r.model.k,
                    round_sig(r.median_score()),
                    c.reference,
                    round_sig(c.stats.median)
                );
            }
            announce(&[json_path, csv_path]);
        }
        Command::Score { posterior, data } => {
            let samples = read_posterior_file(posterior)?;
            let dataset = g.load(data)?;
            let opts = g.score_options();
            let seed = g.seed.unwrap_or(samples.config.seed);
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["sequence_id", "length", "log_prob"])?;
            let (mut total, mut length) = (0.0, 0usize);
            for seq in dataset.sequences() {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, id_hash(seq.id())));
                let lp = predictive_log_score_sequence(seq, &samples, &opts, &mut rng)?;
                total += lp;
                length += seq.len();
                w.write_record([seq.id().to_string(), seq.len().to_string(), round_sig(lp).to_string()])?;
            }
            let path = g.out_dir.join("scores.csv");
            write_atomic(&path, &w.into_inner()?)?;
            println!("S = {}", round_sig(total / length as f64));
            announce(&[path]);
        }
        Command::Report { posterior } => {
            let samples = read_posterior_file(posterior)?;
            announce(&write_reports(&samples, g.level, &g.out_dir, "")?);
        }
    }
    Ok(())
}

/// Runs the CLI and maps the outcome to an exit status, printing failures as one line.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run(argv) {
        Ok(()) => 0,
        Err(e) => match e.downcast_ref::<clap::Error>() {
            Some(ce) => {
                let _ = ce.print();
                ce.exit_code()
            }
            None => {
                eprintln!("error: {e:#}");
                1
            }
        },
    }
}
