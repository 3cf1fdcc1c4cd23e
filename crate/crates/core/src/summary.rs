//! Posterior summaries: membership and changepoint marginals, percentile
//! credible intervals, symmetric probability intervals and segment lengths.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::distributions::DurationPrior;
use crate::error::{Error, Result};
use crate::likelihood::{segment_index, Emission};
use crate::output::round_sig;
use crate::sampler::{AcceptanceTally, PosteriorSamples};

/// Empirical percentile of sorted data with linear interpolation between
/// order statistics (`h = (N − 1)·p`).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn from_values(values: &[f64]) -> Self {
        let s = sorted(values);
        Self {
            min: s[0],
            q1: percentile(&s, 0.25),
            median: percentile(&s, 0.5),
            q3: percentile(&s, 0.75),
            max: s[s.len() - 1],
        }
    }

    fn rounded(self) -> Self {
        Self {
            min: round_sig(self.min),
            q1: round_sig(self.q1),
            median: round_sig(self.median),
            q3: round_sig(self.q3),
            max: round_sig(self.max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalKind {
    SegmentMembership,
    ChangepointPosition,
}

/// Exact draw frequencies for one sequence.
///
/// Membership tables have `T` rows (positions `1..=T`) and `K + 1` columns;
/// changepoint tables have `K` rows and `T + 1` columns (positions `0..=T`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTable {
    pub sequence_id: String,
    pub kind: MarginalKind,
    pub draws: usize,
    pub counts: Vec<Vec<u64>>,
}

impl MarginalTable {
    pub fn probability(&self, row: usize, col: usize) -> f64 {
        self.counts[row][col] as f64 / self.draws as f64
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.counts.iter().map(|r| r.iter().map(|&c| c as f64 / self.draws as f64).collect()).collect()
    }
}

fn sequence_draws(samples: &PosteriorSamples, id: &str) -> Result<(usize, usize)> {
    let l = samples.sequence_index(id)?;
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    Ok((l, samples.lengths[l]))
}

/// Fraction of draws placing each position in each segment.
pub fn segment_marginals(samples: &PosteriorSamples, id: &str) -> Result<MarginalTable> {
    let (l, t) = sequence_draws(samples, id)?;
    let k = samples.config.k;
    let mut counts = vec![vec![0u64; k + 1]; t];
    for draw in &samples.draws {
        for (j, row) in counts.iter_mut().enumerate() {
            row[segment_index(j + 1, &draw.tau[l])] += 1;
        }
    }
    Ok(MarginalTable { sequence_id: id.into(), kind: MarginalKind::SegmentMembership, draws: samples.len(), counts })
}

/// Fraction of draws with `τ_i = t`, for `t` in `0..=T`.
pub fn changepoint_marginals(samples: &PosteriorSamples, id: &str) -> Result<MarginalTable> {
    let (l, t) = sequence_draws(samples, id)?;
    let mut counts = vec![vec![0u64; t + 1]; samples.config.k];
    for draw in &samples.draws {
        for (i, &tau) in draw.tau[l].positions().iter().enumerate() {
            counts[i][tau] += 1;
        }
    }
    Ok(MarginalTable { sequence_id: id.into(), kind: MarginalKind::ChangepointPosition, draws: samples.len(), counts })
}

/// Writes `sequence_id,position,segment_or_index,probability`; segments and
/// changepoint indices are numbered from 1.
pub fn write_marginal_csv<W: Write>(tables: &[MarginalTable], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sequence_id", "position", "segment_or_index", "probability"])?;
    for table in tables {
        for (r, row) in table.counts.iter().enumerate() {
            for (c, _) in row.iter().enumerate() {
                let (position, index) = match table.kind {
                    MarginalKind::SegmentMembership => (r + 1, c + 1),
                    MarginalKind::ChangepointPosition => (c, r + 1),
                };
                w.write_record([
                    table.sequence_id.clone(),
                    position.to_string(),
                    index.to_string(),
                    round_sig(table.probability(r, c)).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLengthSummary {
    pub sequence_id: String,
    pub segments: Vec<FiveNumber>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub level: f64,
    pub draws: usize,
    pub params: Vec<ParamSummary>,
    pub acceptance: AcceptanceTally,
    pub segment_lengths: Vec<SegmentLengthSummary>,
}

impl SummaryTable {
    pub fn get(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Copy with every float rounded for output.
    pub fn rounded(&self) -> Self {
        Self {
            level: self.level,
            draws: self.draws,
            params: self
                .params
                .iter()
                .map(|p| ParamSummary {
                    name: p.name.clone(),
                    mean: round_sig(p.mean),
                    lower: round_sig(p.lower),
                    upper: round_sig(p.upper),
                })
                .collect(),
            acceptance: self.acceptance,
            segment_lengths: self
                .segment_lengths
                .iter()
                .map(|s| SegmentLengthSummary {
                    sequence_id: s.sequence_id.clone(),
                    segments: s.segments.iter().map(|f| f.rounded()).collect(),
                })
                .collect(),
        }
    }
}

/// Mean and equal-tailed percentile interval of one scalar series.
pub fn credible_interval(values: &[f64], level: f64) -> (f64, f64, f64) {
    let s = sorted(values);
    let tail = (1.0 - level) / 2.0;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (mean, percentile(&s, tail), percentile(&s, 1.0 - tail))
}

/// Posterior mean and credible interval for every duration parameter and
/// emission entry, plus acceptance rates and segment-length quartiles.
///
/// Parameters are named `r_i`, `b_i`, `p_i` (changepoints from 1) and
/// `Q{g}[from,to]` or `q{g}[to]` for Markov and IID groups (all from 1).
pub fn param_summary(samples: &PosteriorSamples, level: f64) -> Result<SummaryTable> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level {level} outside (0, 1)")));
    }
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    let first = &samples.draws[0];
    for (i, prior) in first.theta.priors().iter().enumerate() {
        let names: &[&str] = match prior {
            DurationPrior::NegBin { .. } => &["r", "b"],
            DurationPrior::Geometric { .. } => &["p"],
            DurationPrior::Uniform => &[],
        };
        for (slot, name) in names.iter().enumerate() {
            let values = samples.draws.iter().map(|d| d.theta.get(i).values()[slot]).collect();
            series.push((format!("{name}_{}", i + 1), values));
        }
    }
    let n = samples.n;
    let markov = first.params.emission() == Emission::Markov;
    for g in 0..first.params.n_groups() {
        for e in 0..first.params.block(g).len() {
            let name = if markov {
                format!("Q{}[{},{}]", g + 1, e / n + 1, e % n + 1)
            } else {
                format!("q{}[{}]", g + 1, e + 1)
            };
            series.push((name, samples.draws.iter().map(|d| d.params.block(g)[e]).collect()));
        }
    }
    let params = series
        .into_iter()
        .map(|(name, values)| {
            let (mean, lower, upper) = credible_interval(&values, level);
            ParamSummary { name, mean, lower, upper }
        })
        .collect();
    let segment_lengths = samples
        .sequence_ids
        .iter()
        .map(|id| {
            Ok(SegmentLengthSummary { sequence_id: id.clone(), segments: segment_length_posterior(samples, id)? })
        })
        .collect::<Result<_>>()?;
    Ok(SummaryTable { level, draws: samples.len(), params, acceptance: samples.acceptance, segment_lengths })
}

/// Quartiles of each segment's length `τ_i − τ_{i−1}` (with `τ_{K+1} = T`) across draws.
pub fn segment_length_posterior(samples: &PosteriorSamples, id: &str) -> Result<Vec<FiveNumber>> {
    let (l, t) = sequence_draws(samples, id)?;
    let lengths: Vec<Vec<usize>> = samples.draws.iter().map(|d| d.tau[l].segment_lengths(t)).collect();
    Ok((0..=samples.config.k)
        .map(|i| FiveNumber::from_values(&lengths.iter().map(|v| v[i] as f64).collect::<Vec<_>>()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityInterval {
    pub lower: usize,
    pub upper: usize,
    /// Mean position under the marginal.
    pub mean: f64,
    /// Mass actually covered by `[lower, upper]`.
    pub mass: f64,
}

/// Grows an interval one position per side per step from the rounded mean
/// until it holds at least `level` of the mass.
pub fn symmetric_probability_interval(row: &[f64], level: f64) -> Result<ProbabilityInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level {level} outside (0, 1)")));
    }
    let total: f64 = row.iter().sum();
    if row.is_empty() || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("marginal row sums to {total}, expected 1")));
    }
    let mean: f64 = row.iter().enumerate().map(|(t, p)| t as f64 * p).sum();
    let centre = (mean.round() as usize).min(row.len() - 1);
    let (mut lower, mut upper, mut mass) = (centre, centre, row[centre]);
    while mass < level - 1e-12 {
        let mut grew = false;
        if lower > 0 {
            lower -= 1;
            mass += row[lower];
            grew = true;
        }
        if upper + 1 < row.len() {
            upper += 1;
            mass += row[upper];
            grew = true;
        }
        if !grew {
            break;
        }
    }
    Ok(ProbabilityInterval { lower, upper, mean, mass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{ChangepointPriorParams, DurationFamily};
    use crate::likelihood::{ChangepointVector, TransitionMatrixSet};
    use crate::sampler::{McmcConfig, McmcState};
    use proptest::prelude::*;

    fn samples_from(taus: &[Vec<usize>], t: usize) -> PosteriorSamples {
        let k = taus[0].len();
        let draws = taus
            .iter()
            .enumerate()
            .map(|(d, tau)| McmcState {
                tau: vec![ChangepointVector::new(tau.clone(), t).unwrap()],
                params: TransitionMatrixSet::new(
                    Emission::Markov,
                    2,
                    TransitionMatrixSet::untied(k),
                    vec![vec![0.5 + 0.01 * d as f64, 0.5 - 0.01 * d as f64, 0.3, 0.7]; k + 1],
                )
                .unwrap(),
                theta: ChangepointPriorParams::new(
                    DurationFamily::TruncNegBin,
                    (0..k).map(|_| DurationPrior::NegBin { r: 0.05 * (d + 1) as f64, b: 0.5 }).collect(),
                )
                .unwrap(),
            })
            .collect();
        PosteriorSamples {
            config: McmcConfig { k, ..Default::default() },
            n: 2,
            sequence_ids: vec!["s".into()],
            lengths: vec![t],
            draws,
            acceptance: AcceptanceTally::default(),
        }
    }

    #[test]
    fn percentile_linear_interpolation() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let (_, lo, hi) = credible_interval(&v, 0.95);
        assert!((lo - 3.475).abs() < 1e-12);
        assert!((hi - 97.525).abs() < 1e-12);
        assert_eq!(percentile(&[4.0], 0.3), 4.0);
        let (mean, lo, hi) = credible_interval(&[0.7; 10], 0.95);
        assert_eq!((lo, hi), (0.7, 0.7));
        assert!((mean - 0.7).abs() < 1e-15);
    }

    #[test]
    fn single_draw_gives_indicators() {
        let s = samples_from(&[vec![100]], 200);
        let seg = segment_marginals(&s, "s").unwrap();
        assert_eq!(seg.counts.len(), 200);
        assert_eq!(seg.counts[99], vec![1, 0]);
        assert_eq!(seg.counts[100], vec![0, 1]);
        let cp = changepoint_marginals(&s, "s").unwrap();
        assert_eq!(cp.counts[0].len(), 201);
        assert_eq!(cp.probability(0, 100), 1.0);
        assert_eq!(cp.counts[0].iter().sum::<u64>(), 1);

        let repeated = samples_from(&vec![vec![100]; 5], 200);
        assert_eq!(segment_marginals(&repeated, "s").unwrap().rows(), seg.rows());
    }

    #[test]
    fn hand_counted_marginals() {
        // T=5, K=1, τ = 1, 2, 2, 4
        let s = samples_from(&[vec![1], vec![2], vec![2], vec![4]], 5);
        let seg = segment_marginals(&s, "s").unwrap().rows();
        let want = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.25, 0.75], [0.0, 1.0]];
        for (row, w) in seg.iter().zip(want) {
            assert_eq!(row.as_slice(), &w);
        }
        let cp = changepoint_marginals(&s, "s").unwrap().rows();
        assert_eq!(cp[0], vec![0.0, 0.25, 0.5, 0.0, 0.25, 0.0]);
        assert!(matches!(segment_marginals(&s, "nope"), Err(Error::UnknownSequence(_))));
    }

    #[test]
    fn hand_computed_length_quartiles() {
        let s = samples_from(&[vec![1], vec![2], vec![2], vec![4]], 5);
        let q = segment_length_posterior(&s, "s").unwrap();
        // first segment lengths 1, 2, 2, 4
        assert_eq!(q[0], FiveNumber { min: 1.0, q1: 1.75, median: 2.0, q3: 2.5, max: 4.0 });
        // second segment lengths 4, 3, 3, 1
        assert_eq!(q[1], FiveNumber { min: 1.0, q1: 2.5, median: 3.0, q3: 3.25, max: 4.0 });
        let single = segment_length_posterior(&samples_from(&[vec![3]], 5), "s").unwrap();
        assert_eq!(single[0].min, 3.0);
        assert_eq!(single[0].max, 3.0);
        assert_eq!(single[1].median, 2.0);
    }

    #[test]
    fn summary_names_and_intervals() {
        let s = samples_from(&[vec![1], vec![2], vec![2], vec![4]], 5);
        let t = param_summary(&s, 0.95).unwrap();
        let r = t.get("r_1").unwrap();
        assert!((r.mean - 0.125).abs() < 1e-12);
        assert!(r.lower <= r.upper);
        assert!(t.get("b_1").is_some());
        assert_eq!(t.get("Q2[2,2]").unwrap().mean, 0.7);
        assert_eq!(t.params.len(), 2 + 2 * 4);
        assert_eq!(t.segment_lengths[0].segments.len(), 2);
        assert!(param_summary(&s, 1.0).is_err());
    }

    #[test]
    fn probability_interval_examples() {
        let mut point = vec![0.0; 201];
        point[100] = 1.0;
        let pi = symmetric_probability_interval(&point, 0.95).unwrap();
        assert_eq!((pi.lower, pi.upper), (100, 100));

        // uniform over 0..=99: mean 49.5 rounds to 50, each step adds 0.02
        let uniform = vec![0.01; 100];
        let pi = symmetric_probability_interval(&uniform, 0.95).unwrap();
        let mut lo = 50usize;
        let mut hi = 50usize;
        let mut mass = 0.01;
        while mass < 0.95 - 1e-12 {
            lo -= 1;
            hi += 1;
            mass += 0.02;
        }
        assert_eq!((pi.lower, pi.upper), (lo, hi));
        assert_eq!((pi.lower, pi.upper), (3, 97));

        let tri: Vec<f64> = (0..21).map(|t| 11.0 - (t as f64 - 10.0).abs()).collect();
        let z: f64 = tri.iter().sum();
        let tri: Vec<f64> = tri.iter().map(|v| v / z).collect();
        let pi = symmetric_probability_interval(&tri, 0.9).unwrap();
        assert_eq!(10 - pi.lower, pi.upper - 10);

        assert!(symmetric_probability_interval(&uniform, 0.0).is_err());
        assert!(symmetric_probability_interval(&[0.5, 0.4], 0.9).is_err());
    }

    #[test]
    fn interval_near_the_edge_grows_one_sided() {
        let row = [0.6, 0.3, 0.1, 0.0];
        let pi = symmetric_probability_interval(&row, 0.95).unwrap();
        assert_eq!(pi.lower, 0);
        assert!(pi.mass >= 0.95);
    }

    #[test]
    fn marginal_csv_layout() {
        let s = samples_from(&[vec![1], vec![2]], 3);
        let tables = [segment_marginals(&s, "s").unwrap(), changepoint_marginals(&s, "s").unwrap()];
        let mut buf = Vec::new();
        write_marginal_csv(&tables, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sequence_id,position,segment_or_index,probability");
        assert_eq!(lines[1], "s,1,1,1");
        assert_eq!(lines[3], "s,2,1,0.5");
        assert_eq!(lines.len(), 1 + 3 * 2 + 4);
        assert_eq!(*lines.last().unwrap(), "s,3,1,0");
    }

    fn arb_draws() -> impl Strategy<Value = (Vec<Vec<usize>>, usize)> {
        (1usize..30, 1usize..4, 1usize..12).prop_flat_map(|(t, k, d)| {
            (
                prop::collection::vec(
                    prop::collection::vec(0..=t, k).prop_map(|mut v| {
                        v.sort_unstable();
                        v
                    }),
                    d,
                ),
                Just(t),
            )
        })
    }

    proptest! {
        #[test]
        fn marginals_are_consistent_counts((taus, t) in arb_draws()) {
            let s = samples_from(&taus, t);
            let seg = segment_marginals(&s, "s").unwrap();
            let cp = changepoint_marginals(&s, "s").unwrap();
            for row in &seg.counts {
                prop_assert_eq!(row.iter().sum::<u64>(), taus.len() as u64);
            }
            for row in cp.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            // P(position j in a segment beyond i) = P(τ_i < j)
            for i in 0..taus[0].len() {
                for j in 1..=t {
                    let beyond: u64 = seg.counts[j - 1][i + 1..].iter().sum();
                    let before: u64 = cp.counts[i][..j].iter().sum();
                    prop_assert_eq!(beyond, before);
                }
            }
            let lengths = segment_length_posterior(&s, "s").unwrap();
            prop_assert_eq!(lengths.len(), taus[0].len() + 1);
            for draw in &s.draws {
                prop_assert_eq!(draw.tau[0].segment_lengths(t).iter().sum::<usize>(), t);
            }
        }

        #[test]
        fn credible_bounds_are_ordered(values in prop::collection::vec(-1e3f64..1e3, 1..60), level in 0.01f64..0.99) {
            let (_, lo, hi) = credible_interval(&values, level);
            prop_assert!(lo <= hi);
            let five = FiveNumber::from_values(&values);
            prop_assert!(five.min <= five.q1 && five.q1 <= five.median && five.median <= five.q3 && five.q3 <= five.max);
        }
    }
}
