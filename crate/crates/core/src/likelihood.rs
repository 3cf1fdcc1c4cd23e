//! Segmentation semantics and the piecewise-homogeneous likelihood.
//!
//! `K` changepoints `0 ≤ τ_1 ≤ … ≤ τ_K ≤ T` cut positions `1..=T` into
//! `K + 1` segments `s_i = {τ_{i−1}+1, …, τ_i}` (with `τ_0 = 0`,
//! `τ_{K+1} = T`); equal neighbours give an empty segment. Position `j`
//! transitions from `y_{j−1}` under the parameters of the segment that owns
//! `j`, so the first point of a segment conditions on the last point of the
//! previous one through the new segment's matrix.
//!
//! Segment indices are zero-based (`0..=K`) throughout the API.

use serde::{Deserialize, Serialize};

use crate::data::{CategoricalSequence, Category, MISSING};
use crate::error::{Error, Result};

/// Ordered changepoint positions for one sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChangepointVector(Vec<usize>);

impl ChangepointVector {
    /// Validates `0 ≤ τ_1 ≤ … ≤ τ_K ≤ t`.
    pub fn new(tau: Vec<usize>, t: usize) -> Result<Self> {
        let v = Self(tau);
        v.check_horizon(t)?;
        Ok(v)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// `τ_i = round(i·T/(K+1))`.
    pub fn evenly_spaced(k: usize, t: usize) -> Self {
        Self((1..=k).map(|i| (i as f64 * t as f64 / (k + 1) as f64).round() as usize).collect())
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.0
    }

    pub(crate) fn positions_mut(&mut self) -> &mut [usize] {
        &mut self.0
    }

    pub fn check_horizon(&self, t: usize) -> Result<()> {
        if self.0.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidChangepoints(format!("{:?} is not non-decreasing", self.0)));
        }
        if let Some(&last) = self.0.last() {
            if last > t {
                return Err(Error::InvalidChangepoints(format!("{last} exceeds sequence length {t}")));
            }
        }
        Ok(())
    }

    /// Segment lengths `τ_i − τ_{i−1}` for `i = 1..=K+1`; they sum to `t`.
    pub fn segment_lengths(&self, t: usize) -> Vec<usize> {
        let mut prev = 0;
        let mut out: Vec<usize> = self
            .0
            .iter()
            .map(|&cur| {
                let len = cur - prev;
                prev = cur;
                len
            })
            .collect();
        out.push(t - prev);
        out
    }
}

/// Zero-based index of the segment owning position `j` (`1 ≤ j ≤ T`): the
/// smallest `i` with `j ≤ τ_{i+1}`, or `K` when `j` lies past every changepoint.
pub fn segment_index(j: usize, tau: &ChangepointVector) -> usize {
    tau.0.partition_point(|&t| t < j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emission {
    /// First-order Markov transitions, one `n × n` matrix per parameter group.
    Markov,
    /// Independent draws, one length-`n` probability vector per parameter group.
    Iid,
}

/// Emission parameters for the `K + 1` segments, possibly tied into groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrixSet {
    emission: Emission,
    n: usize,
    /// Parameter group of each segment.
    tying: Vec<usize>,
    /// Row-major block per group: `n × n` for Markov, `1 × n` for IID.
    blocks: Vec<Vec<f64>>,
}

/// Tolerance when accepting externally supplied rows before renormalizing.
const ROW_SUM_TOL: f64 = 1e-9;

impl TransitionMatrixSet {
    /// Builds and validates a parameter set. Rows within `1e-9` of the simplex
    /// are renormalized exactly.
    pub fn new(emission: Emission, n: usize, tying: Vec<usize>, mut blocks: Vec<Vec<f64>>) -> Result<Self> {
        validate_tying(&tying)?;
        let groups = tying.iter().max().map_or(0, |&g| g + 1);
        if blocks.len() != groups {
            return Err(Error::DimensionMismatch(format!("{groups} parameter groups but {} blocks", blocks.len())));
        }
        let rows = rows_for(emission, n);
        for (g, block) in blocks.iter_mut().enumerate() {
            if block.len() != rows * n {
                return Err(Error::DimensionMismatch(format!(
                    "block {g} has {} entries, expected {}",
                    block.len(),
                    rows * n
                )));
            }
            for row in block.chunks_mut(n) {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidParameter(format!("block {g} has a row off the simplex: {row:?}")));
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
        Ok(Self { emission, n, tying, blocks })
    }

    /// Every row uniform, `1/n`.
    pub fn uniform(emission: Emission, n: usize, tying: Vec<usize>) -> Result<Self> {
        validate_tying(&tying)?;
        let groups = tying.iter().max().map_or(0, |&g| g + 1);
        let block = vec![1.0 / n as f64; rows_for(emission, n) * n];
        Self::new(emission, n, tying, vec![block; groups])
    }

    /// One parameter group per segment.
    pub fn untied(k: usize) -> Vec<usize> {
        (0..=k).collect()
    }

    /// First and last segments share a group; the rest are separate.
    /// A single changepoint would make the chain homogeneous, so `k = 1` is rejected.
    pub fn tie_ends(k: usize) -> Result<Vec<usize>> {
        match k {
            0 => Ok(vec![0]),
            1 => Err(Error::InvalidParameter("tying the end segments rules out K = 1".into())),
            _ => Ok((0..k).chain(std::iter::once(0)).collect()),
        }
    }

    pub fn emission(&self) -> Emission {
        self.emission
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of changepoints `K` the set is dimensioned for.
    pub fn k(&self) -> usize {
        self.tying.len() - 1
    }

    pub fn tying(&self) -> &[usize] {
        &self.tying
    }

    pub fn n_groups(&self) -> usize {
        self.blocks.len()
    }

    /// Rows per block: `n` for Markov, 1 for IID.
    pub fn rows_per_block(&self) -> usize {
        rows_for(self.emission, self.n)
    }

    pub fn group_of(&self, segment: usize) -> usize {
        self.tying[segment]
    }

    pub fn block(&self, group: usize) -> &[f64] {
        &self.blocks[group]
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn row(&self, group: usize, row: usize) -> &[f64] {
        &self.blocks[group][row * self.n..(row + 1) * self.n]
    }

    pub(crate) fn set_row(&mut self, group: usize, row: usize, values: &[f64]) {
        let n = self.n;
        self.blocks[group][row * n..(row + 1) * n].copy_from_slice(values);
    }

    /// `P(y_j = to | y_{j−1} = from)` inside `segment`.
    pub fn prob(&self, segment: usize, from: Category, to: Category) -> f64 {
        let row = match self.emission {
            Emission::Markov => usize::from(from),
            Emission::Iid => 0,
        };
        self.blocks[self.tying[segment]][row * self.n + usize::from(to)]
    }
}

fn rows_for(emission: Emission, n: usize) -> usize {
    match emission {
        Emission::Markov => n,
        Emission::Iid => 1,
    }
}

fn validate_tying(tying: &[usize]) -> Result<()> {
    if tying.is_empty() {
        return Err(Error::DimensionMismatch("tying map must cover K + 1 ≥ 1 segments".into()));
    }
    let groups = tying.iter().max().map_or(0, |&g| g + 1);
    if (0..groups).any(|g| !tying.contains(&g)) {
        return Err(Error::InvalidParameter(format!("tying map {tying:?} skips a group id")));
    }
    Ok(())
}

/// Probabilities and their logs, laid out for fast lookup inside the sampler.
#[derive(Debug, Clone)]
pub(crate) struct EmissionCache {
    markov: bool,
    n: usize,
    tying: Vec<usize>,
    probs: Vec<Vec<f64>>,
    logs: Vec<Vec<f64>>,
}

impl EmissionCache {
    pub(crate) fn new(params: &TransitionMatrixSet) -> Self {
        Self {
            markov: params.emission == Emission::Markov,
            n: params.n,
            tying: params.tying.clone(),
            probs: params.blocks.clone(),
            logs: params.blocks.iter().map(|b| b.iter().map(|v| v.ln()).collect()).collect(),
        }
    }

    #[inline]
    fn offset(&self, from: Category, to: Category) -> usize {
        let row = if self.markov { usize::from(from) } else { 0 };
        row * self.n + usize::from(to)
    }

    #[inline]
    pub(crate) fn log_p(&self, segment: usize, from: Category, to: Category) -> f64 {
        self.logs[self.tying[segment]][self.offset(from, to)]
    }

    #[inline]
    fn p(&self, segment: usize, from: Category, to: Category) -> f64 {
        self.probs[self.tying[segment]][self.offset(from, to)]
    }

    pub(crate) fn set_row(&mut self, group: usize, row: usize, values: &[f64]) {
        let range = row * self.n..(row + 1) * self.n;
        self.probs[group][range.clone()].copy_from_slice(values);
        for (dst, &v) in self.logs[group][range].iter_mut().zip(values) {
            *dst = v.ln();
        }
    }
}

/// Forward recursion over positions, summing out missing values.
///
/// The state is either a known previous value (its probability already folded
/// into the log accumulator) or a normalized distribution over the previous
/// value. With nothing missing this reduces to the plain sum of log
/// transition probabilities, in the same order.
pub(crate) fn marginal_log_likelihood(y0: Category, values: &[Category], tau: &[usize], cache: &EmissionCache) -> f64 {
    let n = cache.n;
    let mut acc = 0.0;
    let mut known = Some(y0);
    let mut dist = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut seg = 0;
    for (idx, &y) in values.iter().enumerate() {
        let j = idx + 1;
        while seg < tau.len() && j > tau[seg] {
            seg += 1;
        }
        match (known, y == MISSING) {
            (Some(prev), false) => {
                acc += cache.log_p(seg, prev, y);
                known = Some(y);
            }
            (Some(prev), true) => {
                for (to, d) in dist.iter_mut().enumerate() {
                    *d = cache.p(seg, prev, to as Category);
                }
                known = None;
            }
            (None, false) => {
                let s: f64 = (0..n).map(|from| dist[from] * cache.p(seg, from as Category, y)).sum();
                acc += s.ln();
                known = Some(y);
            }
            (None, true) => {
                for (to, slot) in next.iter_mut().enumerate() {
                    *slot = (0..n).map(|from| dist[from] * cache.p(seg, from as Category, to as Category)).sum();
                }
                let s: f64 = next.iter().sum();
                acc += s.ln();
                for (d, &v) in dist.iter_mut().zip(&next) {
                    *d = v / s;
                }
            }
        }
    }
    if known.is_none() {
        acc += dist.iter().sum::<f64>().ln();
    }
    acc
}

fn check_inputs(seq: &CategoricalSequence, tau: &ChangepointVector, params: &TransitionMatrixSet) -> Result<()> {
    tau.check_horizon(seq.len())?;
    if tau.k() != params.k() {
        return Err(Error::DimensionMismatch(format!(
            "{} changepoints but parameters for {} segments",
            tau.k(),
            params.k() + 1
        )));
    }
    let max_code = std::iter::once(seq.y0()).chain(seq.values().iter().copied().filter(|&v| v != MISSING)).max();
    if max_code.is_some_and(|m| usize::from(m) >= params.n()) {
        return Err(Error::DimensionMismatch(format!(
            "sequence {} uses categories beyond n = {}",
            seq.id(),
            params.n()
        )));
    }
    Ok(())
}

/// `Σ_j log Q^{(seg(j))}_{y_{j−1}, y_j}` for a fully observed sequence.
///
/// A zero-probability transition gives `f64::NEG_INFINITY` rather than an error.
pub fn log_likelihood(seq: &CategoricalSequence, tau: &ChangepointVector, params: &TransitionMatrixSet) -> Result<f64> {
    check_inputs(seq, tau, params)?;
    if seq.has_missing() {
        return Err(Error::HasMissing(seq.id().to_string()));
    }
    Ok(marginal_log_likelihood(seq.y0(), seq.values(), tau.positions(), &EmissionCache::new(params)))
}

/// Log probability of the observed values with every missing value summed out.
pub fn log_likelihood_marginal_missing(
    seq: &CategoricalSequence,
    tau: &ChangepointVector,
    params: &TransitionMatrixSet,
) -> Result<f64> {
    check_inputs(seq, tau, params)?;
    Ok(marginal_log_likelihood(seq.y0(), seq.values(), tau.positions(), &EmissionCache::new(params)))
}

/// Per-segment `n × n` counts of observed transitions `y_{j−1} → y_j`;
/// transitions touching a missing value are skipped.
pub fn transition_counts(seq: &CategoricalSequence, tau: &ChangepointVector, n: usize) -> Result<Vec<Vec<Vec<u64>>>> {
    tau.check_horizon(seq.len())?;
    let mut counts = vec![vec![vec![0u64; n]; n]; tau.k() + 1];
    let mut prev = seq.y0();
    for (idx, &y) in seq.values().iter().enumerate() {
        if prev != MISSING && y != MISSING {
            if usize::from(prev) >= n || usize::from(y) >= n {
                return Err(Error::DimensionMismatch(format!("category beyond n = {n}")));
            }
            counts[segment_index(idx + 1, tau)][usize::from(prev)][usize::from(y)] += 1;
        }
        prev = y;
    }
    Ok(counts)
}
