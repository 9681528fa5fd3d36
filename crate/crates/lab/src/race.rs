//! Key-residency race: the attacker cycles through candidate pages, dumping
//! one at a time, while the victim's secret page lives for a short window.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RaceError {
    #[error("race parameter {0} must be positive")]
    NonPositive(&'static str),
    #[error("prefill byte 0 cannot be told apart from zeroed pages")]
    ZeroPrefill,
    #[error("page size must be positive")]
    PageSize,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceParams {
    pub candidates: u32,
    /// Milliseconds to dump one page.
    pub dump_time_per_page: f64,
    /// Milliseconds the secret stays resident.
    pub residency: f64,
    pub trials: u64,
}

impl Default for RaceParams {
    fn default() -> Self {
        RaceParams {
            candidates: 100,
            dump_time_per_page: 0.2,
            residency: 0.6,
            trials: 100_000,
        }
    }
}

impl RaceParams {
    pub fn validate(&self) -> Result<(), RaceError> {
        if self.candidates == 0 {
            return Err(RaceError::NonPositive("candidates"));
        }
        if !(self.dump_time_per_page > 0.0) {
            return Err(RaceError::NonPositive("dump_time_per_page"));
        }
        if !(self.residency > 0.0) {
            return Err(RaceError::NonPositive("residency"));
        }
        if self.trials == 0 {
            return Err(RaceError::NonPositive("trials"));
        }
        Ok(())
    }

    /// Length of one pass over all candidates.
    pub fn cycle(&self) -> f64 {
        self.candidates as f64 * self.dump_time_per_page
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceProbability {
    pub p: f64,
    /// The attacker sweeps every candidate within one residency window.
    pub saturated: bool,
}

pub fn race_probability(p: &RaceParams) -> Result<RaceProbability, RaceError> {
    p.validate()?;
    let cycle = p.cycle();
    if cycle <= p.residency {
        return Ok(RaceProbability { p: 1.0, saturated: true });
    }
    let v = (p.residency + p.dump_time_per_page) / cycle;
    Ok(RaceProbability {
        p: v.min(1.0),
        saturated: v >= 1.0,
    })
}

const CHUNK: u64 = 8192;

/// Successes in one chunk of trials; each chunk has its own stream so the
/// total does not depend on how chunks are scheduled.
fn chunk_hits(p: &RaceParams, seed: u64, chunk: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    let n = CHUNK.min(p.trials - chunk * CHUNK);
    let cycle = p.cycle();
    let d = p.dump_time_per_page;
    let mut hits = 0;
    for _ in 0..n {
        let phase = rng.gen_range(0.0..cycle);
        let page = rng.gen_range(0..p.candidates) as f64;
        // Offset from the secret's arrival to the next start of its dump.
        let r = (page * d - phase).rem_euclid(cycle);
        if r < p.residency || r > cycle - d {
            hits += 1;
        }
    }
    hits
}

/// Fraction of uniformly phased victim runs in which the secret page is
/// dumped while still resident.
pub fn run_key_race(p: &RaceParams, seed: u64) -> Result<f64, RaceError> {
    p.validate()?;
    let chunks = p.trials.div_ceil(CHUNK);
    #[cfg(feature = "parallel")]
    let hits: u64 = {
        use rayon::prelude::*;
        (0..chunks).into_par_iter().map(|c| chunk_hits(p, seed, c)).sum()
    };
    #[cfg(not(feature = "parallel"))]
    let hits: u64 = run_key_race_hits_sequential(p, seed, chunks);
    Ok(hits as f64 / p.trials as f64)
}

fn run_key_race_hits_sequential(p: &RaceParams, seed: u64, chunks: u64) -> u64 {
    (0..chunks).map(|c| chunk_hits(p, seed, c)).sum()
}

/// Single-threaded variant of [`run_key_race`]; always gives the same result.
pub fn run_key_race_sequential(p: &RaceParams, seed: u64) -> Result<f64, RaceError> {
    p.validate()?;
    let hits = run_key_race_hits_sequential(p, seed, p.trials.div_ceil(CHUNK));
    Ok(hits as f64 / p.trials as f64)
}

/// Pages of `snapshot` that are entirely zero. The pool was prefilled with
/// `prefill`, so only pages the victim freed (and the runtime zeroed) match.
pub fn find_candidates(snapshot: &[u8], page_size: usize, prefill: u8) -> Result<Vec<usize>, RaceError> {
    if prefill == 0 {
        return Err(RaceError::ZeroPrefill);
    }
    if page_size == 0 {
        return Err(RaceError::PageSize);
    }
    Ok(snapshot
        .chunks(page_size)
        .enumerate()
        .filter(|(_, p)| p.len() == page_size && p.iter().all(|&b| b == 0))
        .map(|(i, _)| i)
        .collect())
}

/// A pool of `pages` pages prefilled with `prefill`; pages in `freed` were
/// used and zeroed, pages in `busy` hold victim data and pages in `partial`
/// are zeroed only in their first half.
pub struct SnapshotSpec<'a> {
    pub pages: usize,
    pub page_size: usize,
    pub prefill: u8,
    pub freed: &'a [usize],
    pub busy: &'a [usize],
    pub partial: &'a [usize],
    pub seed: u64,
}

pub fn synth_snapshot(s: &SnapshotSpec) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut out = vec![s.prefill; s.pages * s.page_size];
    let page = |i: usize| i * s.page_size..(i + 1) * s.page_size;
    for &i in s.busy {
        // Nonzero so a busy page never looks freed.
        out[page(i)].iter_mut().for_each(|b| *b = rng.gen_range(1..=255));
    }
    for &i in s.freed {
        out[page(i)].fill(0);
    }
    for &i in s.partial {
        let r = page(i);
        let half = r.start + s.page_size / 2;
        out[r.start..half].fill(0);
    }
    out
}
