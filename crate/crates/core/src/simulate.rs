//! Synthetic data from the generative model, plus the benchmark scenarios.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CategoricalSequence, Category, SequenceDataset};
use crate::distributions::{DurationPrior, DurationTable};
use crate::error::{Error, Result};
use crate::likelihood::{segment_index, ChangepointVector};

/// Sequences sharing one changepoint count, prior and set of matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationGroup {
    /// One entry per sequence.
    pub lengths: Vec<usize>,
    /// Duration prior of each changepoint; its length is this group's `K`.
    pub priors: Vec<DurationPrior>,
    /// `K + 1` row-stochastic `n × n` matrices, one per segment.
    pub matrices: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub n: usize,
    pub groups: Vec<SimulationGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be positive".into()));
        }
        if self.groups.iter().all(|g| g.lengths.is_empty()) {
            return Err(Error::InvalidParameter("simulation produces no sequences".into()));
        }
        for (gi, g) in self.groups.iter().enumerate() {
            if g.lengths.contains(&0) {
                return Err(Error::InvalidParameter(format!("group {gi}: sequence length must be ≥ 1")));
            }
            for p in &g.priors {
                p.validate()?;
            }
            if g.matrices.len() != g.priors.len() + 1 {
                return Err(Error::DimensionMismatch(format!(
                    "group {gi}: {} changepoints need {} matrices, found {}",
                    g.priors.len(),
                    g.priors.len() + 1,
                    g.matrices.len()
                )));
            }
            for (mi, m) in g.matrices.iter().enumerate() {
                if m.len() != self.n || m.iter().any(|row| row.len() != self.n) {
                    return Err(Error::DimensionMismatch(format!("group {gi} matrix {mi} is not {0}×{0}", self.n)));
                }
                for row in m {
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidParameter(format!(
                            "group {gi} matrix {mi}: row {row:?} not stochastic"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn total_sequences(&self) -> usize {
        self.groups.iter().map(|g| g.lengths.len()).sum()
    }
}

fn draw_category<R: Rng + ?Sized>(rng: &mut R, row: &[f64]) -> Category {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return c as Category;
        }
    }
    // rounding slack: last category with positive mass
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0) as Category
}

/// Simulates every group in order, naming sequences `s1..sL`.
///
/// Per sequence the generator consumes, in order: one uniform per changepoint
/// (sequential truncated-prior draws), one uniform for `y0` (uniform over the
/// alphabet), and one uniform per position. Scenarios that differ only in
/// their matrices therefore share changepoints under a common seed.
pub fn simulate_dataset<R: Rng + ?Sized>(
    spec: &SimulationSpec,
    rng: &mut R,
) -> Result<(SequenceDataset, Vec<ChangepointVector>)> {
    spec.validate()?;
    let n = spec.n;
    let mut sequences = Vec::with_capacity(spec.total_sequences());
    let mut truth = Vec::with_capacity(spec.total_sequences());
    for group in &spec.groups {
        for &t in &group.lengths {
            let mut prev = 0;
            let mut taus = Vec::with_capacity(group.priors.len());
            for prior in &group.priors {
                prev = DurationTable::new(prior, t).sample(rng, prev);
                taus.push(prev);
            }
            let tau = ChangepointVector::new(taus, t)?;
            let y0 = ((rng.random::<f64>() * n as f64) as usize).min(n - 1) as Category;
            let mut values = Vec::with_capacity(t);
            let mut last = y0;
            for j in 1..=t {
                let row = &group.matrices[segment_index(j, &tau)][usize::from(last)];
                last = draw_category(rng, row);
                values.push(last);
            }
            sequences.push(CategoricalSequence::new(format!("s{}", sequences.len() + 1), y0, values, n)?);
            truth.push(tau);
        }
    }
    Ok((SequenceDataset::new(n, sequences)?, truth))
}

/// Named benchmark configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Ten binary sequences of length 200, one changepoint.
    Scenario1,
    /// Twenty sequences with two changepoints followed by ten with one.
    Scenario2,
    /// Ten sequences with two changepoints followed by twenty with one.
    Scenario3,
    /// Scenario 1 changepoints with three categories.
    Scenario4,
    /// Scenario 1 changepoints with four categories.
    Scenario5,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scenario1" => Ok(Self::Scenario1),
            "scenario2" => Ok(Self::Scenario2),
            "scenario3" => Ok(Self::Scenario3),
            "scenario4" => Ok(Self::Scenario4),
            "scenario5" => Ok(Self::Scenario5),
            other => Err(Error::InvalidParameter(format!("unknown preset {other:?}"))),
        }
    }
}

fn binary_diag(q1: f64, q2: f64) -> Vec<Vec<f64>> {
    vec![vec![q1, 1.0 - q1], vec![1.0 - q2, q2]]
}

/// Rows rescaled to sum to one; the published tables are rounded to three decimals.
fn normalized(rows: &[&[f64]]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect()
        })
        .collect()
}

const FIRST: DurationPrior = DurationPrior::NegBin { r: 0.5, b: 0.8 };
const MIDDLE_END: DurationPrior = DurationPrior::NegBin { r: 0.75, b: 0.8 };

impl Preset {
    pub fn spec(self) -> SimulationSpec {
        let one_cp = |count: usize, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>| SimulationGroup {
            lengths: vec![200; count],
            priors: vec![FIRST],
            matrices: vec![first, second],
        };
        let two_cp = |count: usize| SimulationGroup {
            lengths: vec![200; count],
            priors: vec![FIRST, MIDDLE_END],
            matrices: vec![binary_diag(0.8, 0.8), binary_diag(0.2, 0.2), binary_diag(0.5, 0.4)],
        };
        let (n, groups) = match self {
            Self::Scenario1 => (2, vec![one_cp(10, binary_diag(0.8, 0.8), binary_diag(0.5, 0.4))]),
            Self::Scenario2 => (2, vec![two_cp(20), one_cp(10, binary_diag(0.8, 0.8), binary_diag(0.5, 0.4))]),
            Self::Scenario3 => (2, vec![two_cp(10), one_cp(20, binary_diag(0.8, 0.8), binary_diag(0.5, 0.4))]),
            Self::Scenario4 => (
                3,
                vec![one_cp(
                    10,
                    normalized(&[&[0.8, 0.1, 0.1], &[0.1, 0.8, 0.1], &[0.1, 0.1, 0.8]]),
                    normalized(&[&[0.333, 0.333, 0.333], &[0.350, 0.300, 0.350], &[0.375, 0.375, 0.250]]),
                )],
            ),
            Self::Scenario5 => (
                4,
                vec![one_cp(
                    10,
                    normalized(&[
                        &[0.800, 0.033, 0.033, 0.033],
                        &[0.033, 0.800, 0.033, 0.033],
                        &[0.033, 0.033, 0.800, 0.033],
                        &[0.033, 0.033, 0.033, 0.800],
                    ]),
                    normalized(&[
                        &[0.250, 0.250, 0.250, 0.250],
                        &[0.267, 0.200, 0.267, 0.267],
                        &[0.283, 0.283, 0.150, 0.283],
                        &[0.300, 0.300, 0.300, 0.100],
                    ]),
                )],
            ),
        };
        SimulationSpec { n, groups, seed: None }
    }
}
