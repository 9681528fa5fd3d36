//! Coarse-to-fine search for the branch whose removal collapses accuracy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code::{CodeImage, Kernel, SLOTS_PER_PAGE};
use crate::oracle::{AccuracyOracle, RunResult, TamperSet};

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("run budget of {budget} exhausted in stage {stage}")]
    BudgetExhausted { budget: usize, stage: &'static str },
    #[error("no {stage} candidate collapses accuracy")]
    NotFound { stage: &'static str },
    #[error("branch at slot {slot} collapses accuracy but gives itself away: {result:?}")]
    Conspicuous { slot: usize, result: RunResult },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageLog {
    pub pages: usize,
    pub surviving_pages: Vec<usize>,
    pub kernel_candidates: usize,
    pub kernel: usize,
    pub branch_candidates: usize,
    pub runs_per_stage: [usize; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    pub critical_branch: usize,
    pub kernel: usize,
    pub runs_used: usize,
    pub result: RunResult,
    pub log: StageLog,
}

fn ceil_log2(n: usize) -> usize {
    n.max(1).next_power_of_two().trailing_zeros() as usize
}

/// Runs needed in the worst case for the given candidate counts.
pub fn run_bound(pages: usize, kernels: usize, branches: usize) -> usize {
    pages + 2 * ceil_log2(kernels) + 2 * ceil_log2(branches)
}

struct Runner<'a> {
    oracle: &'a AccuracyOracle,
    budget: usize,
    used: usize,
}

impl Runner<'_> {
    fn run(&mut self, t: &TamperSet, stage: &'static str) -> Result<RunResult, SearchError> {
        if self.used >= self.budget {
            return Err(SearchError::BudgetExhausted {
                budget: self.budget,
                stage,
            });
        }
        self.used += 1;
        Ok(self.oracle.run(t))
    }

    /// Halves `items` until one remains, keeping the half whose tamper
    /// collapses accuracy; the first half is always tried first.
    fn bisect(
        &mut self,
        mut items: Vec<usize>,
        tamper: impl Fn(&[usize]) -> TamperSet,
        stage: &'static str,
    ) -> Result<(usize, RunResult), SearchError> {
        let mut last: Option<RunResult> = None;
        while items.len() > 1 || last.is_none() {
            if items.is_empty() {
                return Err(SearchError::NotFound { stage });
            }
            let mid = items.len().div_ceil(2);
            let (a, b) = items.split_at(mid);
            let ra = self.run(&tamper(a), stage)?;
            if ra.collapsed() {
                last = Some(ra);
                items = a.to_vec();
                continue;
            }
            if b.is_empty() {
                return Err(SearchError::NotFound { stage });
            }
            let rb = self.run(&tamper(b), stage)?;
            if rb.collapsed() {
                last = Some(rb);
                items = b.to_vec();
                continue;
            }
            return Err(SearchError::NotFound { stage });
        }
        Ok((items[0], last.expect("tested")))
    }
}

/// Page EXIT-filter, kernel halving by EXIT, branch halving by NOP.
pub fn filter_pipeline(image: &CodeImage, oracle: &AccuracyOracle, budget: usize) -> Result<SearchResult, SearchError> {
    let mut r = Runner { oracle, budget, used: 0 };
    let baseline = oracle.baseline();
    let kernels: Vec<Kernel> = image.kernels();
    let branches = image.branches(&kernels);

    let mut surviving = Vec::new();
    for p in 0..image.pages() {
        let t = TamperSet {
            exit_pages: [p].into(),
            ..Default::default()
        };
        if r.run(&t, "page")? != baseline {
            surviving.push(p);
        }
    }
    let after_pages = r.used;

    let candidates: Vec<usize> = kernels
        .iter()
        .filter(|k| {
            let (a, b) = (k.start / SLOTS_PER_PAGE, (k.end - 1) / SLOTS_PER_PAGE);
            surviving.iter().any(|p| (a..=b).contains(p))
        })
        .map(|k| k.index)
        .collect();
    let kernel_candidates = candidates.len();
    let (kernel, _) = r.bisect(
        candidates,
        |ks| TamperSet {
            exit_kernels: ks.iter().copied().collect(),
            ..Default::default()
        },
        "kernel",
    )?;
    let after_kernels = r.used;

    let slots: Vec<usize> = branches.iter().filter(|b| b.kernel == kernel).map(|b| b.slot).collect();
    let branch_candidates = slots.len();
    let (slot, result) = r.bisect(
        slots,
        |bs| TamperSet {
            nop_branches: bs.iter().copied().collect(),
            ..Default::default()
        },
        "branch",
    )?;
    if !result.stealthy_collapse() {
        return Err(SearchError::Conspicuous { slot, result });
    }
    Ok(SearchResult {
        critical_branch: slot,
        kernel,
        runs_used: r.used,
        result,
        log: StageLog {
            pages: image.pages(),
            surviving_pages: surviving,
            kernel_candidates,
            kernel,
            branch_candidates,
            runs_per_stage: [after_pages, after_kernels - after_pages, r.used - after_kernels],
        },
    })
}
