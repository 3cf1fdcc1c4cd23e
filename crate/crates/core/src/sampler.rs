//! Metropolis-Hastings sampler over changepoints, duration-prior parameters
//! and emission rows.
//!
//! One iteration performs, in this order:
//!
//! 1. for one changepoint index `i` drawn uniformly, a Beta-walk update of
//!    `r_i` then `b_i` (negative binomial) or of `p_i` (geometric); the
//!    uniform-position family has no parameters and draws nothing;
//! 2. one Dirichlet-walk update of a row drawn uniformly among all
//!    (parameter group, row) pairs;
//! 3. `V` sweeps of ±1 moves over every changepoint of every sequence.
//!
//! Draws come from a single generator in exactly that order, so a chain is
//! reproducible from its seed. A ±1 move that would break the ordering
//! `τ_{i−1} ≤ τ_i ≤ τ_{i+1}` is rejected without drawing the acceptance
//! uniform.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SequenceDataset, MISSING};
use crate::distributions::{
    clamp_open_unit, dirichlet_log_density_unchecked, sample_dirichlet, ChangepointPriorParams, DurationFamily,
    DurationPrior, DurationTable, PARAM_EPS,
};
use crate::error::{Error, Result};
use crate::likelihood::{marginal_log_likelihood, ChangepointVector, Emission, EmissionCache, TransitionMatrixSet};
use crate::output::round_sig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    /// Number of changepoints `K`.
    pub k: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Sweeps `V` over all changepoints per iteration.
    pub sweeps: usize,
    pub a_r: f64,
    pub a_b: f64,
    pub a_q: f64,
    pub seed: u64,
    pub duration: DurationFamily,
    pub emission: Emission,
    /// Parameter group per segment; `None` leaves every segment separate.
    pub tying: Option<Vec<usize>>,
    /// Concentration of the symmetric Dirichlet prior on every emission row.
    pub alpha: f64,
    pub update_changepoints: bool,
    pub update_theta: bool,
    pub update_emission: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            k: 1,
            iterations: 100_000,
            burn_in: 10_000,
            thin: 100,
            sweeps: 5,
            a_r: 1000.0,
            a_b: 100.0,
            a_q: 1000.0,
            seed: 0,
            duration: DurationFamily::TruncNegBin,
            emission: Emission::Markov,
            tying: None,
            alpha: 1.0,
            update_changepoints: true,
            update_theta: true,
            update_emission: true,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.burn_in >= self.iterations {
            return bad(format!("burn-in {} must be below iterations {}", self.burn_in, self.iterations));
        }
        if self.thin == 0 || self.sweeps == 0 {
            return bad("thin and sweeps must be at least 1".into());
        }
        for (name, v) in [("a_r", self.a_r), ("a_b", self.a_b), ("a_q", self.a_q), ("alpha", self.alpha)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let tying = self.tying_map();
        if tying.len() != self.k + 1 {
            return Err(Error::DimensionMismatch(format!(
                "tying map covers {} segments, K = {} needs {}",
                tying.len(),
                self.k,
                self.k + 1
            )));
        }
        Ok(())
    }

    pub fn tying_map(&self) -> Vec<usize> {
        self.tying.clone().unwrap_or_else(|| TransitionMatrixSet::untied(self.k))
    }

    /// Snapshots kept: `⌊(iterations − burn_in) / thin⌋`.
    pub fn draw_count(&self) -> usize {
        self.iterations.saturating_sub(self.burn_in) / self.thin.max(1)
    }
}

/// Joint latent state: changepoints of every sequence, emission parameters
/// and duration-prior parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcState {
    pub tau: Vec<ChangepointVector>,
    pub params: TransitionMatrixSet,
    pub theta: ChangepointPriorParams,
}

impl McmcState {
    /// Checks ordering and horizon of every changepoint vector against `lengths`
    /// and that all blocks agree on `K`.
    pub fn validate(&self, lengths: &[usize]) -> Result<()> {
        if self.tau.len() != lengths.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} changepoint vectors for {} sequences",
                self.tau.len(),
                lengths.len()
            )));
        }
        let k = self.theta.k();
        if self.params.k() != k {
            return Err(Error::DimensionMismatch(format!("{} prior sets but {} segments", k, self.params.k() + 1)));
        }
        for (tau, &t) in self.tau.iter().zip(lengths) {
            if tau.k() != k {
                return Err(Error::DimensionMismatch(format!("{} changepoints, expected {k}", tau.k())));
            }
            tau.check_horizon(t)?;
        }
        Ok(())
    }
}

/// Deterministic starting point: evenly spaced changepoints, `r_i = i/(K+1)`,
/// `b_i = 0.5`, `p_i = 0.5`, uniform emission rows.
pub fn init_state(dataset: &SequenceDataset, config: &McmcConfig) -> Result<McmcState> {
    config.validate()?;
    let k = config.k;
    let tau = dataset.sequences().iter().map(|s| ChangepointVector::evenly_spaced(k, s.len())).collect();
    let priors = (1..=k)
        .map(|i| match config.duration {
            DurationFamily::TruncNegBin => DurationPrior::NegBin { r: i as f64 / (k + 1) as f64, b: 0.5 },
            DurationFamily::TruncGeometric => DurationPrior::Geometric { p: 0.5 },
            DurationFamily::UniformPos => DurationPrior::Uniform,
        })
        .collect();
    Ok(McmcState {
        tau,
        params: TransitionMatrixSet::uniform(config.emission, dataset.n(), config.tying_map())?,
        theta: ChangepointPriorParams::new(config.duration, priors)?,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub proposed: u64,
    pub accepted: u64,
}

impl Counter {
    fn record(&mut self, accepted: bool) -> bool {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
        accepted
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Proposal and acceptance counts per update type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceTally {
    pub changepoint: Counter,
    pub r: Counter,
    pub b: Counter,
    pub p: Counter,
    pub emission: Counter,
}

impl AcceptanceTally {
    pub fn rates(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("changepoint", self.changepoint.rate()),
            ("r", self.r.rate()),
            ("b", self.b.rate()),
            ("p", self.p.rate()),
            ("emission", self.emission.rate()),
        ]
    }
}

/// Thinned post-burn-in snapshots with the metadata needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub config: McmcConfig,
    pub n: usize,
    pub sequence_ids: Vec<String>,
    pub lengths: Vec<usize>,
    pub draws: Vec<McmcState>,
    pub acceptance: AcceptanceTally,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn sequence_index(&self, id: &str) -> Result<usize> {
        self.sequence_ids.iter().position(|s| s == id).ok_or_else(|| Error::UnknownSequence(id.to_string()))
    }
}

/// Beta walk: `(x̃, 1 − x̃) ~ Dir(a·(x, 1 − x))`, clamped inside `(0, 1)`.
fn propose_unit<R: Rng + ?Sized>(rng: &mut R, x: f64, a: f64) -> f64 {
    let alpha = [(a * x).max(PARAM_EPS), (a * (1.0 - x)).max(PARAM_EPS)];
    clamp_open_unit(sample_dirichlet(rng, &alpha)[0])
}

/// `log q(x | x̃) − log q(x̃ | x)` for the Beta walk.
pub fn beta_walk_log_ratio(x: f64, proposed: f64, a: f64) -> f64 {
    let density = |at: f64, from: f64| {
        let alpha = [(a * from).max(PARAM_EPS), (a * (1.0 - from)).max(PARAM_EPS)];
        dirichlet_log_density_unchecked(&[at, 1.0 - at], &alpha)
    };
    density(x, proposed) - density(proposed, x)
}

fn metropolis_accept<R: Rng + ?Sized>(rng: &mut R, log_ratio: f64) -> bool {
    let u: f64 = rng.random();
    !log_ratio.is_nan() && u.ln() < log_ratio
}

/// A running chain: state, generator and the caches that make local moves cheap.
pub struct Chain<'a, R: Rng> {
    data: &'a SequenceDataset,
    config: McmcConfig,
    state: McmcState,
    rng: R,
    cache: EmissionCache,
    loglik: Vec<f64>,
    length_class: Vec<usize>,
    class_lengths: Vec<usize>,
    /// `tables[i][c]`: duration table of changepoint `i` for length class `c`.
    tables: Vec<Vec<DurationTable>>,
    tally: AcceptanceTally,
    iteration: usize,
}

impl<'a> Chain<'a, ChaCha8Rng> {
    /// Starts from [`init_state`] with a generator seeded from `config.seed`.
    pub fn from_config(data: &'a SequenceDataset, config: &McmcConfig) -> Result<Self> {
        let state = init_state(data, config)?;
        Self::with_state(data, config, state, ChaCha8Rng::seed_from_u64(config.seed))
    }
}

impl<'a, R: Rng> Chain<'a, R> {
    pub fn new(data: &'a SequenceDataset, config: &McmcConfig, rng: R) -> Result<Self> {
        let state = init_state(data, config)?;
        Self::with_state(data, config, state, rng)
    }

    /// Starts from an explicit state, e.g. with frozen parameters for exactness checks.
    pub fn with_state(data: &'a SequenceDataset, config: &McmcConfig, state: McmcState, rng: R) -> Result<Self> {
        config.validate()?;
        let lengths: Vec<usize> = data.sequences().iter().map(|s| s.len()).collect();
        state.validate(&lengths)?;
        if state.theta.k() != config.k || state.theta.family() != config.duration {
            return Err(Error::DimensionMismatch("state does not match the configured K or duration family".into()));
        }
        if state.params.n() != data.n() || state.params.emission() != config.emission {
            return Err(Error::DimensionMismatch("state emission parameters do not match the dataset".into()));
        }
        let class_lengths: Vec<usize> = lengths.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let length_class = lengths.iter().map(|t| class_lengths.binary_search(t).expect("length present")).collect();
        let tables = state
            .theta
            .priors()
            .iter()
            .map(|p| class_lengths.iter().map(|&t| DurationTable::new(p, t)).collect())
            .collect();
        let cache = EmissionCache::new(&state.params);
        let loglik = data
            .sequences()
            .iter()
            .zip(&state.tau)
            .map(|(s, tau)| marginal_log_likelihood(s.y0(), s.values(), tau.positions(), &cache))
            .collect();
        Ok(Self {
            data,
            config: config.clone(),
            state,
            rng,
            cache,
            loglik,
            length_class,
            class_lengths,
            tables,
            tally: AcceptanceTally::default(),
            iteration: 0,
        })
    }

    pub fn state(&self) -> &McmcState {
        &self.state
    }

    pub fn tally(&self) -> &AcceptanceTally {
        &self.tally
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Cached marginal log likelihood of sequence `l` under the current state.
    pub fn log_likelihood(&self, l: usize) -> f64 {
        self.loglik[l]
    }

    fn full_log_likelihood(&self, l: usize, tau: &[usize], cache: &EmissionCache) -> f64 {
        let s = &self.data.sequences()[l];
        marginal_log_likelihood(s.y0(), s.values(), tau, cache)
    }

    /// Log acceptance ratio of moving `τ_i` of sequence `l` to `proposed`,
    /// which must lie in `[τ_{i−1}, τ_{i+1}]` and differ from the current
    /// value by one. Only the position that changes segment is re-scored
    /// unless a neighbouring value is missing.
    pub fn changepoint_move_log_ratio(&self, l: usize, i: usize, proposed: usize) -> f64 {
        let tau = self.state.tau[l].positions();
        let cur = tau[i];
        debug_assert!(proposed.abs_diff(cur) == 1);
        let k = tau.len();
        let class = self.length_class[l];
        let lo = if i == 0 { 0 } else { tau[i - 1] };

        let mut delta = self.tables[i][class].log_pmf(proposed, lo) - self.tables[i][class].log_pmf(cur, lo);
        if i + 1 < k {
            let next = &self.tables[i + 1][class];
            delta += next.log_pmf(tau[i + 1], proposed) - next.log_pmf(tau[i + 1], cur);
        }

        // the single position switching between segment i and the first later segment that owns it
        let j = cur.max(proposed);
        let later = i + 1 + tau[i + 1..].partition_point(|&t| t < j);
        let (old_seg, new_seg) = if proposed > cur { (later, i) } else { (i, later) };
        let seq = &self.data.sequences()[l];
        let y = seq.values()[j - 1];
        let prev = if j == 1 { seq.y0() } else { seq.values()[j - 2] };
        if y != MISSING && prev != MISSING {
            delta += self.cache.log_p(new_seg, prev, y) - self.cache.log_p(old_seg, prev, y);
        } else {
            let mut moved = tau.to_vec();
            moved[i] = proposed;
            delta += self.full_log_likelihood(l, &moved, &self.cache) - self.loglik[l];
        }
        delta
    }

    /// Proposes `τ_i ± 1` for sequence `l`.
    pub fn update_changepoint(&mut self, l: usize, i: usize) -> bool {
        let tau = self.state.tau[l].positions();
        let t = self.class_lengths[self.length_class[l]];
        let cur = tau[i];
        let lo = if i == 0 { 0 } else { tau[i - 1] };
        let hi = if i + 1 < tau.len() { tau[i + 1] } else { t };
        let up: bool = self.rng.random();
        let proposed = if up { cur + 1 } else { cur.wrapping_sub(1) };
        if (up && proposed > hi) || (!up && (cur == 0 || proposed < lo)) {
            return self.tally.changepoint.record(false);
        }
        let log_ratio = self.changepoint_move_log_ratio(l, i, proposed);
        let accepted = metropolis_accept(&mut self.rng, log_ratio);
        if accepted {
            let s = &self.data.sequences()[l];
            self.state.tau[l].positions_mut()[i] = proposed;
            let j = cur.max(proposed);
            let neighbours_observed = s.values()[j - 1] != MISSING && (j == 1 || s.values()[j - 2] != MISSING);
            self.loglik[l] = if neighbours_observed {
                let lik_delta = log_ratio - self.prior_move_delta(l, i, cur, proposed);
                self.loglik[l] + lik_delta
            } else {
                self.full_log_likelihood(l, self.state.tau[l].positions(), &self.cache)
            };
        }
        self.tally.changepoint.record(accepted)
    }

    /// Prior part of a move already applied to the state (`cur → proposed`).
    fn prior_move_delta(&self, l: usize, i: usize, cur: usize, proposed: usize) -> f64 {
        let tau = self.state.tau[l].positions();
        let class = self.length_class[l];
        let lo = if i == 0 { 0 } else { tau[i - 1] };
        let mut delta = self.tables[i][class].log_pmf(proposed, lo) - self.tables[i][class].log_pmf(cur, lo);
        if i + 1 < tau.len() {
            let next = &self.tables[i + 1][class];
            delta += next.log_pmf(tau[i + 1], proposed) - next.log_pmf(tau[i + 1], cur);
        }
        delta
    }

    /// Sum over sequences of `log p(τ_i | τ_{i−1})` under `tables`.
    fn theta_log_target(&self, i: usize, tables: &[DurationTable]) -> f64 {
        self.state
            .tau
            .iter()
            .zip(&self.length_class)
            .map(|(tau, &c)| {
                let p = tau.positions();
                tables[c].log_pmf(p[i], if i == 0 { 0 } else { p[i - 1] })
            })
            .sum()
    }

    fn try_theta(&mut self, i: usize, proposal: DurationPrior, proposal_log_ratio: f64) -> bool {
        let new_tables: Vec<DurationTable> =
            self.class_lengths.iter().map(|&t| DurationTable::new(&proposal, t)).collect();
        let log_ratio =
            self.theta_log_target(i, &new_tables) - self.theta_log_target(i, &self.tables[i]) + proposal_log_ratio;
        let accepted = metropolis_accept(&mut self.rng, log_ratio);
        if accepted {
            self.state.theta.set(i, proposal);
            self.tables[i] = new_tables;
        }
        accepted
    }

    /// Beta-walk update of `r_i` (negative binomial family only).
    pub fn update_r(&mut self, i: usize) -> bool {
        let DurationPrior::NegBin { r, b } = *self.state.theta.get(i) else {
            return false;
        };
        let r_new = propose_unit(&mut self.rng, r, self.config.a_r);
        let ratio = beta_walk_log_ratio(r, r_new, self.config.a_r);
        let accepted = self.try_theta(i, DurationPrior::NegBin { r: r_new, b }, ratio);
        self.tally.r.record(accepted)
    }

    /// Beta-walk update of `b_i` (negative binomial family only).
    pub fn update_b(&mut self, i: usize) -> bool {
        let DurationPrior::NegBin { r, b } = *self.state.theta.get(i) else {
            return false;
        };
        let b_new = propose_unit(&mut self.rng, b, self.config.a_b);
        let ratio = beta_walk_log_ratio(b, b_new, self.config.a_b);
        let accepted = self.try_theta(i, DurationPrior::NegBin { r, b: b_new }, ratio);
        self.tally.b.record(accepted)
    }

    /// Beta-walk update of the geometric hazard `p_i`, tuned by `a_b`.
    pub fn update_p(&mut self, i: usize) -> bool {
        let DurationPrior::Geometric { p } = *self.state.theta.get(i) else {
            return false;
        };
        let p_new = propose_unit(&mut self.rng, p, self.config.a_b);
        let ratio = beta_walk_log_ratio(p, p_new, self.config.a_b);
        let accepted = self.try_theta(i, DurationPrior::Geometric { p: p_new }, ratio);
        self.tally.p.record(accepted)
    }

    /// Dirichlet-walk update of row `row` of parameter group `group`, scored
    /// against every sequence.
    pub fn update_q_row(&mut self, group: usize, row: usize) -> bool {
        let n = self.data.n();
        if n == 1 {
            return self.tally.emission.record(true);
        }
        let a_q = self.config.a_q;
        let current = self.state.params.row(group, row).to_vec();
        let forward: Vec<f64> = current.iter().map(|&q| (a_q * q).max(PARAM_EPS)).collect();
        let mut proposed = sample_dirichlet(&mut self.rng, &forward);
        if proposed.iter().any(|&v| v < PARAM_EPS) {
            proposed.iter_mut().for_each(|v| *v = v.max(PARAM_EPS));
            let s: f64 = proposed.iter().sum();
            proposed.iter_mut().for_each(|v| *v /= s);
        }
        let backward: Vec<f64> = proposed.iter().map(|&q| (a_q * q).max(PARAM_EPS)).collect();
        let proposal_ratio =
            dirichlet_log_density_unchecked(&current, &backward) - dirichlet_log_density_unchecked(&proposed, &forward);
        let prior_ratio: f64 =
            (self.config.alpha - 1.0) * proposed.iter().zip(&current).map(|(p, c)| p.ln() - c.ln()).sum::<f64>();

        let mut cache = self.cache.clone();
        cache.set_row(group, row, &proposed);
        let new_loglik: Vec<f64> =
            (0..self.data.len()).map(|l| self.full_log_likelihood(l, self.state.tau[l].positions(), &cache)).collect();
        let lik_ratio: f64 = new_loglik.iter().zip(&self.loglik).map(|(a, b)| a - b).sum();

        let accepted = metropolis_accept(&mut self.rng, lik_ratio + prior_ratio + proposal_ratio);
        if accepted {
            self.state.params.set_row(group, row, &proposed);
            self.cache = cache;
            self.loglik = new_loglik;
        }
        self.tally.emission.record(accepted)
    }

    /// One full iteration of the schedule described in the module docs.
    pub fn step(&mut self) {
        let k = self.config.k;
        if self.config.update_theta && k > 0 {
            match self.config.duration {
                DurationFamily::TruncNegBin => {
                    let i = self.rng.random_range(0..k);
                    self.update_r(i);
                    self.update_b(i);
                }
                DurationFamily::TruncGeometric => {
                    let i = self.rng.random_range(0..k);
                    self.update_p(i);
                }
                DurationFamily::UniformPos => {}
            }
        }
        if self.config.update_emission {
            let group = self.rng.random_range(0..self.state.params.n_groups());
            let row = self.rng.random_range(0..self.state.params.rows_per_block());
            self.update_q_row(group, row);
        }
        if self.config.update_changepoints && k > 0 {
            for _ in 0..self.config.sweeps {
                for l in 0..self.data.len() {
                    for i in 0..k {
                        self.update_changepoint(l, i);
                    }
                }
            }
        }
        self.iteration += 1;
    }

    /// Runs the configured schedule and keeps every `thin`-th post-burn-in state.
    pub fn run(mut self) -> PosteriorSamples {
        let mut draws = Vec::with_capacity(self.config.draw_count());
        for it in 0..self.config.iterations {
            self.step();
            if it >= self.config.burn_in && (it - self.config.burn_in + 1).is_multiple_of(self.config.thin) {
                draws.push(self.state.clone());
            }
        }
        PosteriorSamples {
            n: self.data.n(),
            sequence_ids: self.data.ids(),
            lengths: self.class_lengths_per_sequence(),
            config: self.config,
            draws,
            acceptance: self.tally,
        }
    }

    fn class_lengths_per_sequence(&self) -> Vec<usize> {
        self.length_class.iter().map(|&c| self.class_lengths[c]).collect()
    }
}

/// Runs one chain seeded from `config.seed`.
pub fn run_chain(dataset: &SequenceDataset, config: &McmcConfig) -> Result<PosteriorSamples> {
    Ok(Chain::from_config(dataset, config)?.run())
}

const POSTERIOR_FORMAT: &str = "segmark-posterior";

#[derive(Serialize, Deserialize)]
struct PosteriorHeader {
    format: String,
    version: u32,
    n: usize,
    sequence_ids: Vec<String>,
    lengths: Vec<usize>,
    draws: usize,
    config: McmcConfig,
    acceptance: AcceptanceTally,
}

#[derive(Serialize, Deserialize)]
struct PosteriorLine {
    tau: Vec<ChangepointVector>,
    theta: Vec<DurationPrior>,
    /// Row-major parameter block per group.
    blocks: Vec<Vec<f64>>,
}

fn rounded_prior(p: &DurationPrior) -> DurationPrior {
    match *p {
        DurationPrior::NegBin { r, b } => DurationPrior::NegBin { r: round_sig(r), b: round_sig(b) },
        DurationPrior::Geometric { p } => DurationPrior::Geometric { p: round_sig(p) },
        DurationPrior::Uniform => DurationPrior::Uniform,
    }
}

/// Writes the posterior as JSON Lines: a header echoing the configuration
/// (including the seed), then one snapshot per line.
pub fn write_posterior<W: Write>(samples: &PosteriorSamples, mut out: W) -> Result<()> {
    let header = PosteriorHeader {
        format: POSTERIOR_FORMAT.into(),
        version: 1,
        n: samples.n,
        sequence_ids: samples.sequence_ids.clone(),
        lengths: samples.lengths.clone(),
        draws: samples.draws.len(),
        config: samples.config.clone(),
        acceptance: samples.acceptance,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for draw in &samples.draws {
        let line = PosteriorLine {
            tau: draw.tau.clone(),
            theta: draw.theta.priors().iter().map(rounded_prior).collect(),
            blocks: draw.params.blocks().iter().map(|b| b.iter().map(|&v| round_sig(v)).collect()).collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

/// Reads a file produced by [`write_posterior`].
pub fn read_posterior<R: BufRead>(input: R) -> Result<PosteriorSamples> {
    let mut lines = input.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
    let (_, first) = lines.next().ok_or(Error::Malformed { line: 1, reason: "empty posterior file".into() })?;
    let header: PosteriorHeader =
        serde_json::from_str(&first?).map_err(|e| Error::Malformed { line: 1, reason: e.to_string() })?;
    if header.format != POSTERIOR_FORMAT {
        return Err(Error::Malformed { line: 1, reason: format!("unexpected format {:?}", header.format) });
    }
    let config = header.config;
    let tying = config.tying_map();
    let mut draws = Vec::with_capacity(header.draws);
    for (idx, line) in lines {
        let line: PosteriorLine =
            serde_json::from_str(&line?).map_err(|e| Error::Malformed { line: idx + 1, reason: e.to_string() })?;
        let state = McmcState {
            tau: line.tau,
            params: TransitionMatrixSet::new(config.emission, header.n, tying.clone(), line.blocks)?,
            theta: ChangepointPriorParams::new(config.duration, line.theta)?,
        };
        state.validate(&header.lengths)?;
        draws.push(state);
    }
    if draws.len() != header.draws {
        return Err(Error::Malformed {
            line: 0,
            reason: format!("header announces {} draws, found {}", header.draws, draws.len()),
        });
    }
    Ok(PosteriorSamples {
        config,
        n: header.n,
        sequence_ids: header.sequence_ids,
        lengths: header.lengths,
        draws,
        acceptance: header.acceptance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CategoricalSequence;
    use crate::distributions::changepoint_prior_log;
    use crate::likelihood::log_likelihood_marginal_missing;
    use crate::simulate::{simulate_dataset, Preset};

    fn small_dataset() -> SequenceDataset {
        let seqs = vec![
            CategoricalSequence::new("a", 0, vec![0, 0, 1, 1, 0, 1], 2).unwrap(),
            CategoricalSequence::new("b", 1, vec![1, 1, 1, 0, 0, 0, 1, 0], 2).unwrap(),
        ];
        SequenceDataset::new(2, seqs).unwrap()
    }

    fn frozen_state(k: usize, lengths: &[usize]) -> McmcState {
        McmcState {
            tau: lengths.iter().map(|&t| ChangepointVector::evenly_spaced(k, t)).collect(),
            params: TransitionMatrixSet::new(
                Emission::Markov,
                2,
                TransitionMatrixSet::untied(k),
                (0..=k)
                    .map(|s| if s % 2 == 0 { vec![0.85, 0.15, 0.25, 0.75] } else { vec![0.3, 0.7, 0.6, 0.4] })
                    .collect(),
            )
            .unwrap(),
            theta: ChangepointPriorParams::new(
                DurationFamily::TruncNegBin,
                (1..=k).map(|i| DurationPrior::NegBin { r: i as f64 / (k + 1) as f64, b: 0.4 }).collect(),
            )
            .unwrap(),
        }
    }

    #[test]
    fn init_follows_formula() {
        let d = small_dataset();
        let cfg = McmcConfig { k: 1, ..Default::default() };
        let s = init_state(&d, &cfg).unwrap();
        assert_eq!(s.tau[0].positions(), &[3]);
        assert_eq!(s.tau[1].positions(), &[4]);
        assert_eq!(s.theta.priors(), &[DurationPrior::NegBin { r: 0.5, b: 0.5 }]);

        let seqs = vec![CategoricalSequence::new("x", 0, vec![0; 200], 2).unwrap()];
        let d200 = SequenceDataset::new(2, seqs).unwrap();
        assert_eq!(init_state(&d200, &cfg).unwrap().tau[0].positions(), &[100]);

        let cfg0 = McmcConfig { k: 0, ..Default::default() };
        let s0 = init_state(&d, &cfg0).unwrap();
        assert!(s0.tau.iter().all(|t| t.k() == 0));
        assert_eq!(s0.params.n_groups(), 1);
        assert!(s0.params.block(0).iter().all(|&v| v == 0.5));

        let seqs = vec![CategoricalSequence::new("x", 0, vec![0; 40], 2).unwrap()];
        let d40 = SequenceDataset::new(2, seqs).unwrap();
        let s3 = init_state(&d40, &McmcConfig { k: 3, duration: DurationFamily::TruncGeometric, ..Default::default() })
            .unwrap();
        assert_eq!(s3.tau[0].positions(), &[10, 20, 30]);
        assert!(s3.theta.priors().iter().all(|p| *p == DurationPrior::Geometric { p: 0.5 }));
    }

    #[test]
    fn config_validation() {
        assert!(McmcConfig { burn_in: 10, iterations: 10, ..Default::default() }.validate().is_err());
        assert!(McmcConfig { thin: 0, ..Default::default() }.validate().is_err());
        assert!(McmcConfig { a_q: 0.0, ..Default::default() }.validate().is_err());
        assert!(McmcConfig { k: 2, tying: Some(vec![0, 1]), ..Default::default() }.validate().is_err());
        assert_eq!(McmcConfig::default().draw_count(), 900);
    }

    fn full_log_target(data: &SequenceDataset, state: &McmcState, l: usize) -> f64 {
        let s = &data.sequences()[l];
        log_likelihood_marginal_missing(s, &state.tau[l], &state.params).unwrap()
            + changepoint_prior_log(&state.tau[l], s.len(), &state.theta).unwrap()
    }

    #[test]
    fn move_ratio_equals_full_reevaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut d, _) = simulate_dataset(&Preset::Scenario2.spec(), &mut rng).unwrap();
        // punch holes so both the local and the recompute paths are exercised
        let seqs = d
            .sequences()
            .iter()
            .map(|s| {
                let mut v = s.values().to_vec();
                for _ in 0..15 {
                    let at = rng.random_range(0..v.len());
                    v[at] = MISSING;
                }
                CategoricalSequence::new(s.id(), s.y0(), v, 2).unwrap()
            })
            .collect();
        d = SequenceDataset::new(2, seqs).unwrap();
        let cfg = McmcConfig { k: 3, iterations: 2, burn_in: 0, thin: 1, ..Default::default() };
        let mut chain = Chain::new(&d, &cfg, ChaCha8Rng::seed_from_u64(1)).unwrap();
        for _ in 0..300 {
            chain.step();
        }
        for l in 0..d.len() {
            for i in 0..3 {
                let tau = chain.state().tau[l].positions().to_vec();
                let lo = if i == 0 { 0 } else { tau[i - 1] };
                let hi = if i + 1 < 3 { tau[i + 1] } else { 200 };
                for proposed in [tau[i].wrapping_sub(1), tau[i] + 1] {
                    if tau[i] == 0 && proposed == usize::MAX || proposed < lo || proposed > hi {
                        continue;
                    }
                    let before = full_log_target(&d, chain.state(), l);
                    let mut moved = chain.state().clone();
                    moved.tau[l].positions_mut()[i] = proposed;
                    let after = full_log_target(&d, &moved, l);
                    let got = chain.changepoint_move_log_ratio(l, i, proposed);
                    assert!((got - (after - before)).abs() < 1e-10, "l={l} i={i}: {got} vs {}", after - before);
                }
            }
            let cached = chain.log_likelihood(l);
            let full = log_likelihood_marginal_missing(&d.sequences()[l], &chain.state().tau[l], &chain.state().params)
                .unwrap();
            assert!((cached - full).abs() < 1e-8);
        }
    }

    #[test]
    fn flat_target_accepts_every_valid_move() {
        let seqs = vec![CategoricalSequence::new("u", 0, vec![0, 1, 0, 1, 1], 2).unwrap()];
        let d = SequenceDataset::new(2, seqs).unwrap();
        let cfg = McmcConfig {
            k: 1,
            duration: DurationFamily::UniformPos,
            update_theta: false,
            update_emission: false,
            ..Default::default()
        };
        let mut chain = Chain::new(&d, &cfg, ChaCha8Rng::seed_from_u64(5)).unwrap();
        for _ in 0..2000 {
            let cur = chain.state().tau[0].positions()[0];
            let accepted = chain.update_changepoint(0, 0);
            let new = chain.state().tau[0].positions()[0];
            if accepted {
                assert_eq!(new.abs_diff(cur), 1);
            } else {
                // with a flat target only boundary proposals are refused
                assert!(cur == 0 || cur == 5, "rejected interior move at {cur}");
            }
        }
    }

    #[test]
    fn invalid_down_move_rejected_at_zero_length() {
        let d = small_dataset();
        let cfg = McmcConfig { k: 2, update_theta: false, update_emission: false, ..Default::default() };
        let mut refused = 0;
        for seed in 0..40 {
            let mut state = frozen_state(2, &[6, 8]);
            state.tau[0] = ChangepointVector::new(vec![2, 2], 6).unwrap();
            let mut chain = Chain::with_state(&d, &cfg, state, ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let accepted = chain.update_changepoint(0, 1);
            let after = chain.state().tau[0].positions();
            assert!(after[0] <= after[1]);
            if !accepted {
                assert_eq!(after, &[2, 2]);
                refused += 1;
            }
        }
        assert!(refused > 0);
    }

    /// Exact posterior of `τ` for one sequence with everything else fixed.
    fn enumerate_tau_posterior(data: &SequenceDataset, state: &McmcState, l: usize) -> Vec<f64> {
        let t = data.sequences()[l].len();
        let logs: Vec<f64> = (0..=t)
            .map(|tau| {
                let mut s = state.clone();
                s.tau[l] = ChangepointVector::new(vec![tau], t).unwrap();
                full_log_target(data, &s, l)
            })
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|v| (v - m).exp()).sum();
        logs.iter().map(|v| (v - m).exp() / z).collect()
    }

    #[test]
    fn changepoint_chain_matches_enumerated_posterior() {
        let d = small_dataset();
        let state = frozen_state(1, &[6, 8]);
        let exact = enumerate_tau_posterior(&d, &state, 0);
        let cfg = McmcConfig { k: 1, update_theta: false, update_emission: false, sweeps: 1, ..Default::default() };
        let mut chain = Chain::with_state(&d, &cfg, state, ChaCha8Rng::seed_from_u64(13)).unwrap();
        let mut counts = [0usize; 7];
        let total = 1_000_000;
        for _ in 0..total {
            chain.update_changepoint(0, 0);
            counts[chain.state().tau[0].positions()[0]] += 1;
        }
        let tv: f64 = counts.iter().zip(&exact).map(|(&c, &p)| (c as f64 / total as f64 - p).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.02, "tv {tv}");
    }

    #[test]
    fn vanishing_step_is_almost_always_accepted() {
        let (d, _) = simulate_dataset(&Preset::Scenario1.spec(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let cfg = McmcConfig { k: 1, a_r: 1e8, a_b: 1e8, ..Default::default() };
        let mut chain = Chain::new(&d, &cfg, ChaCha8Rng::seed_from_u64(8)).unwrap();
        for _ in 0..10_000 {
            chain.update_r(0);
        }
        assert!(chain.tally().r.rate() >= 0.999, "{}", chain.tally().r.rate());
    }

    #[test]
    fn beta_walk_ratio_is_symmetric_at_the_centre() {
        for a in [1.0, 100.0, 1000.0] {
            assert!(beta_walk_log_ratio(0.5, 0.5, a).abs() < 1e-12);
        }
        assert!(beta_walk_log_ratio(0.3, 0.35, 1000.0).abs() > 1e-3);
    }

    #[test]
    fn r_posterior_matches_grid() {
        // τ, Q and b fixed; only r moves. The target is Σ_l log p(τ_l | r, b) under a flat prior.
        let taus = [92usize, 104, 99, 111, 87, 101, 96, 108, 100, 94];
        let seqs = taus
            .iter()
            .enumerate()
            .map(|(i, _)| CategoricalSequence::new(format!("s{i}"), 0, vec![0; 200], 2).unwrap())
            .collect();
        let d = SequenceDataset::new(2, seqs).unwrap();
        let b = 0.3;
        let state = McmcState {
            tau: taus.iter().map(|&t| ChangepointVector::new(vec![t], 200).unwrap()).collect(),
            params: TransitionMatrixSet::uniform(Emission::Markov, 2, vec![0, 1]).unwrap(),
            theta: ChangepointPriorParams::new(DurationFamily::TruncNegBin, vec![DurationPrior::NegBin { r: 0.5, b }])
                .unwrap(),
        };
        let cfg =
            McmcConfig { k: 1, update_emission: false, update_changepoints: false, a_r: 200.0, ..Default::default() };
        let mut chain = Chain::with_state(&d, &cfg, state, ChaCha8Rng::seed_from_u64(31)).unwrap();

        let grid: Vec<f64> = (0..1000).map(|g| (g as f64 + 0.5) / 1000.0).collect();
        let logs: Vec<f64> = grid
            .iter()
            .map(|&r| {
                let p = DurationPrior::NegBin { r, b };
                taus.iter().map(|&t| crate::distributions::duration_log_pmf(t, 0, 200, &p).unwrap()).sum()
            })
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = w.iter().sum();

        let bins = 50;
        let mut exact = vec![0.0; bins];
        for (g, wi) in w.iter().enumerate() {
            exact[g * bins / 1000] += wi / z;
        }
        let mut hist = vec![0.0; bins];
        let draws = 200_000;
        for _ in 0..20_000 {
            chain.update_r(0);
        }
        for _ in 0..draws {
            chain.update_r(0);
            let DurationPrior::NegBin { r, .. } = *chain.state().theta.get(0) else { unreachable!() };
            hist[((r * bins as f64) as usize).min(bins - 1)] += 1.0 / draws as f64;
        }
        let tv: f64 = hist.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.05, "tv {tv}");
    }

    #[test]
    fn single_category_row_update_is_a_noop() {
        let seqs = vec![CategoricalSequence::new("one", 0, vec![0; 10], 1).unwrap()];
        let d = SequenceDataset::new(1, seqs).unwrap();
        let cfg = McmcConfig { k: 1, iterations: 20, burn_in: 0, thin: 1, ..Default::default() };
        let samples = run_chain(&d, &cfg).unwrap();
        assert!(samples.draws.iter().all(|s| s.params.blocks().iter().all(|b| b == &vec![1.0])));
        assert_eq!(samples.acceptance.emission.rate(), 1.0);
    }

    #[test]
    fn tied_row_update_scores_both_end_segments() {
        let seqs = vec![
            CategoricalSequence::new("a", 0, vec![0, 0, 0, 1, 0, 1, 0, 0, 0, 0], 2).unwrap(),
            CategoricalSequence::new("b", 1, vec![1, 0, 1, 0, 0, 0, 0, 1, 1, 1], 2).unwrap(),
        ];
        let d = SequenceDataset::new(2, seqs).unwrap();
        let tying = TransitionMatrixSet::tie_ends(2).unwrap();
        let cfg = McmcConfig {
            k: 2,
            tying: Some(tying.clone()),
            update_theta: false,
            update_changepoints: false,
            ..Default::default()
        };
        let state = McmcState {
            tau: vec![ChangepointVector::new(vec![3, 6], 10).unwrap(), ChangepointVector::new(vec![2, 7], 10).unwrap()],
            params: TransitionMatrixSet::new(
                Emission::Markov,
                2,
                tying,
                vec![vec![0.7, 0.3, 0.4, 0.6], vec![0.2, 0.8, 0.5, 0.5]],
            )
            .unwrap(),
            theta: ChangepointPriorParams::new(
                DurationFamily::TruncNegBin,
                vec![DurationPrior::NegBin { r: 0.3, b: 0.5 }, DurationPrior::NegBin { r: 0.7, b: 0.5 }],
            )
            .unwrap(),
        };
        let mut chain = Chain::with_state(&d, &cfg, state.clone(), ChaCha8Rng::seed_from_u64(3)).unwrap();
        // drive until a proposal for group 0, row 0 is accepted, then check the likelihood change
        for _ in 0..200 {
            let before = chain.state().clone();
            if chain.update_q_row(0, 0) {
                let after = chain.state();
                // manual oracle: untied evaluation where segments 1 and 3 each carry the tied block
                let untied = |s: &McmcState| -> f64 {
                    let blocks =
                        vec![s.params.block(0).to_vec(), s.params.block(1).to_vec(), s.params.block(0).to_vec()];
                    let p = TransitionMatrixSet::new(Emission::Markov, 2, vec![0, 1, 2], blocks).unwrap();
                    (0..2).map(|l| crate::likelihood::log_likelihood(&d.sequences()[l], &s.tau[l], &p).unwrap()).sum()
                };
                let cached: f64 = (0..2).map(|l| chain.log_likelihood(l)).sum();
                assert!((cached - untied(after)).abs() < 1e-10);
                // the tied row enters both end segments: first-segment-only accounting would differ
                let first_only = |s: &McmcState| -> f64 {
                    let blocks =
                        vec![s.params.block(0).to_vec(), s.params.block(1).to_vec(), before.params.block(0).to_vec()];
                    let p = TransitionMatrixSet::new(Emission::Markov, 2, vec![0, 1, 2], blocks).unwrap();
                    (0..2).map(|l| crate::likelihood::log_likelihood(&d.sequences()[l], &s.tau[l], &p).unwrap()).sum()
                };
                assert!((untied(after) - first_only(after)).abs() > 1e-9);
                return;
            }
        }
        panic!("no accepted row update");
    }

    #[test]
    fn draw_counts_follow_schedule() {
        let d = small_dataset();
        let cfg = McmcConfig { k: 1, iterations: 10, burn_in: 0, thin: 1, ..Default::default() };
        assert_eq!(run_chain(&d, &cfg).unwrap().len(), 10);
        let cfg = McmcConfig { k: 1, iterations: 1000, burn_in: 100, thin: 7, ..Default::default() };
        assert_eq!(run_chain(&d, &cfg).unwrap().len(), 900 / 7);
    }

    #[test]
    fn snapshots_satisfy_invariants_and_are_deterministic() {
        let (d, _) = simulate_dataset(&Preset::Scenario1.spec(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let cfg = McmcConfig { k: 2, iterations: 400, burn_in: 100, thin: 10, seed: 77, ..Default::default() };
        let a = run_chain(&d, &cfg).unwrap();
        let b = run_chain(&d, &cfg).unwrap();
        assert_eq!(a, b);
        let lengths: Vec<usize> = d.sequences().iter().map(|s| s.len()).collect();
        for draw in &a.draws {
            draw.validate(&lengths).unwrap();
            for g in 0..draw.params.n_groups() {
                for row in draw.params.block(g).chunks(2) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(row.iter().all(|&v| v > 0.0));
                }
            }
            for p in draw.theta.priors() {
                p.validate().unwrap();
            }
        }
        let rates = a.acceptance.rates();
        assert!(rates.iter().all(|(_, r)| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn geometric_and_iid_configurations_run() {
        let (d, _) = simulate_dataset(&Preset::Scenario1.spec(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        for (duration, emission) in [
            (DurationFamily::TruncGeometric, Emission::Iid),
            (DurationFamily::TruncGeometric, Emission::Markov),
            (DurationFamily::TruncNegBin, Emission::Iid),
            (DurationFamily::UniformPos, Emission::Markov),
        ] {
            let cfg =
                McmcConfig { k: 1, iterations: 300, burn_in: 100, thin: 10, duration, emission, ..Default::default() };
            let s = run_chain(&d, &cfg).unwrap();
            assert_eq!(s.len(), 20);
            assert_eq!(s.draws[0].params.rows_per_block(), if emission == Emission::Iid { 1 } else { 2 });
        }
    }

    #[test]
    fn posterior_file_round_trip() {
        let (d, _) = simulate_dataset(&Preset::Scenario1.spec(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let cfg = McmcConfig { k: 1, iterations: 300, burn_in: 100, thin: 20, seed: 3, ..Default::default() };
        let samples = run_chain(&d, &cfg).unwrap();
        let mut buf = Vec::new();
        write_posterior(&samples, &mut buf).unwrap();
        let back = read_posterior(buf.as_slice()).unwrap();
        assert_eq!(back.len(), samples.len());
        assert_eq!(back.config, samples.config);
        assert_eq!(back.sequence_ids, samples.sequence_ids);
        for (a, b) in back.draws.iter().zip(&samples.draws) {
            assert_eq!(a.tau, b.tau);
            for (x, y) in a.params.blocks().iter().flatten().zip(b.params.blocks().iter().flatten()) {
                assert!((x - y).abs() < 1e-11);
            }
        }
        let mut again = Vec::new();
        write_posterior(&back, &mut again).unwrap();
        assert_eq!(again, buf);
        assert!(read_posterior(&b"{\"format\":\"other\"}\n"[..]).is_err());
    }
}
