//! Block-count configurations of multi-branch networks and their partial
//! order.
//!
//! `stages[n][i]` is the number of residual blocks on branch `i` of stage
//! `n + 1`; stage `n + 1` has exactly `n + 1` branches and the last branch
//! has the lowest resolution. `A' ≤ A` when every count of `A'` is at most
//! the matching count of `A`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::archspec::MultiBranchConfig;
use crate::costmodel::{multibranch_cost, CostReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShrinkConfig {
    pub stages: Vec<Vec<u32>>,
}

/// Remove `amount` blocks from branch `branch` of stage `stage` (both 0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edit {
    pub stage: usize,
    pub branch: usize,
    pub amount: u32,
}

impl ShrinkConfig {
    pub fn new(stages: Vec<Vec<u32>>) -> Result<Self> {
        let c = Self { stages };
        c.check()?;
        Ok(c)
    }

    pub fn check(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::InvalidShrink(format!("expected 4 stages, got {}", self.stages.len())));
        }
        for (n, s) in self.stages.iter().enumerate() {
            if s.len() != n + 1 {
                return Err(Error::InvalidShrink(format!(
                    "stage {} needs {} branch counts, got {}",
                    n + 1,
                    n + 1,
                    s.len()
                )));
            }
        }
        Ok(())
    }

    /// Baseline: four blocks everywhere.
    pub fn c1() -> Self {
        Self { stages: vec![vec![4], vec![4, 4], vec![4, 4, 4], vec![4, 4, 4, 4]] }
    }

    pub fn c2() -> Self {
        Self { stages: vec![vec![4], vec![3, 4], vec![2, 3, 4], vec![1, 2, 3, 4]] }
    }

    pub fn c3() -> Self {
        Self { stages: vec![vec![4], vec![1, 4], vec![1, 1, 4], vec![1, 1, 1, 4]] }
    }

    /// Only the lowest-resolution branch of each stage keeps blocks.
    pub fn c4() -> Self {
        Self { stages: vec![vec![4], vec![0, 4], vec![0, 0, 4], vec![0, 0, 0, 4]] }
    }

    pub fn counts(&self) -> impl Iterator<Item = u32> + '_ {
        self.stages.iter().flatten().copied()
    }

    pub fn total_blocks(&self) -> u32 {
        self.counts().sum()
    }

    /// Apply one edit, checking it removes at least one block and stays non-negative.
    pub fn apply(&self, e: Edit) -> Result<Self> {
        let cur = self
            .stages
            .get(e.stage)
            .and_then(|s| s.get(e.branch))
            .copied()
            .ok_or_else(|| Error::InvalidShrink(format!("no branch {} in stage {}", e.branch, e.stage)))?;
        if e.amount == 0 {
            return Err(Error::InvalidShrink("an edit must remove at least one block".into()));
        }
        if e.amount > cur {
            return Err(Error::InvalidShrink(format!(
                "removing {} blocks from stage {} branch {} which has {cur}",
                e.amount, e.stage, e.branch
            )));
        }
        let mut next = self.clone();
        next.stages[e.stage][e.branch] -= e.amount;
        Ok(next)
    }
}

impl PartialOrd for ShrinkConfig {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (is_shrunk_from(self, other), is_shrunk_from(other, self)) {
            (true, true) => Some(Ordering::Equal),
            (true, false) => Some(Ordering::Less),
            (false, true) => Some(Ordering::Greater),
            (false, false) => None,
        }
    }
}

impl fmt::Display for ShrinkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("[{}]", s.iter().map(u32::to_string).collect::<Vec<_>>().join(",")))
            .collect();
        write!(f, "{{{}}}", stages.join(","))
    }
}

/// `a' ≤ a`: every block count of `a_prime` is at most the matching count in `a`.
pub fn is_shrunk_from(a_prime: &ShrinkConfig, a: &ShrinkConfig) -> bool {
    a_prime.stages.len() == a.stages.len()
        && a_prime.stages.iter().zip(&a.stages).all(|(sp, s)| {
            sp.len() == s.len() && sp.iter().zip(s).all(|(x, y)| x <= y)
        })
}

/// Whether every consecutive pair is a shrink step.
pub fn is_chain(seq: &[ShrinkConfig]) -> bool {
    seq.windows(2).all(|w| is_shrunk_from(&w[1], &w[0]))
}

/// `start` followed by the result of each edit in turn.
pub fn shrink_sequence(start: &ShrinkConfig, steps: &[Edit]) -> Result<Vec<ShrinkConfig>> {
    start.check()?;
    let mut out = vec![start.clone()];
    for &e in steps {
        let next = out[out.len() - 1].apply(e)?;
        out.push(next);
    }
    Ok(out)
}

pub fn shrink_cost(c: &ShrinkConfig, base_channel: u32, resolution: u32) -> Result<CostReport> {
    let name = format!("shrink{c}-ch{base_channel}");
    multibranch_cost(&MultiBranchConfig::new(name, c.clone(), base_channel, resolution))
}

/// The four-step shrinking ladder with its base channels.
pub fn standard_sequence() -> Vec<(&'static str, ShrinkConfig, u32)> {
    vec![
        ("C1", ShrinkConfig::c1(), 16),
        ("C2", ShrinkConfig::c2(), 16),
        ("C3", ShrinkConfig::c3(), 18),
        ("C4", ShrinkConfig::c4(), 18),
    ]
}
