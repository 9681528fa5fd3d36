//! A stand-in for running the victim model on a tampered code image.
//!
//! The oracle hides which kernels the model actually launches and which
//! branch guards its output; the search only sees run results.

use std::cell::Cell;
use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::code::{CodeImage, Kernel, SLOTS_PER_PAGE};

/// Accuracy at or below this counts as collapsed.
pub const COLLAPSED_ACCURACY: f64 = 0.002;
/// Largest relative latency change a tamper may cause and stay unnoticed.
pub const LATENCY_TOLERANCE: f64 = 0.10;

/// Pages overwritten with EXIT, kernels cut at their first slot and branches
/// replaced by NOP.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperSet {
    pub exit_pages: BTreeSet<usize>,
    pub exit_kernels: BTreeSet<usize>,
    pub nop_branches: BTreeSet<usize>,
}

impl TamperSet {
    pub fn is_empty(&self) -> bool {
        self.exit_pages.is_empty() && self.exit_kernels.is_empty() && self.nop_branches.is_empty()
    }

    /// Writes the tamper into a copy of `image`.
    pub fn apply(&self, image: &CodeImage) -> CodeImage {
        use crate::code::Instr;
        let mut out = image.clone();
        for &p in &self.exit_pages {
            for s in image.page_slots(p) {
                out.set(s, Instr::Exit);
            }
        }
        let kernels = image.kernels();
        for &k in &self.exit_kernels {
            out.set(kernels[k].start, Instr::Exit);
        }
        for &b in &self.nop_branches {
            out.set(b, Instr::Nop);
        }
        out
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub accuracy: f64,
    /// Latency relative to the untampered run.
    pub latency: f64,
    pub crashed: bool,
    pub valid_output: bool,
}

impl RunResult {
    pub fn collapsed(&self) -> bool {
        !self.crashed && self.valid_output && self.accuracy <= COLLAPSED_ACCURACY
    }

    /// Collapsed accuracy with nothing else that would give the tamper away.
    pub fn stealthy_collapse(&self) -> bool {
        self.collapsed() && (self.latency - 1.0).abs() <= LATENCY_TOLERANCE
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelRole {
    /// Never launched by the model.
    Dead,
    /// Launched; cutting it costs this fraction of accuracy.
    Aux { accuracy_loss: f64 },
    /// Computes the output; holds the critical branch if there is one.
    Core,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BranchEffect {
    latency: f64,
    crash: bool,
}

pub struct AccuracyOracle {
    baseline_accuracy: f64,
    collapsed_accuracy: f64,
    roles: Vec<KernelRole>,
    kernel_pages: Vec<(usize, usize)>,
    kernel_of_slot: HashMap<usize, usize>,
    effects: HashMap<usize, BranchEffect>,
    critical: Option<usize>,
    critical_latency: f64,
    runs: Cell<usize>,
}

/// How many pages hold launched kernels.
pub const DEFAULT_USED_PAGES: usize = 4;

impl AccuracyOracle {
    /// A model whose output hinges on the branch at `critical` (a slot
    /// index), or on nothing when `None`. Kernels lying wholly inside
    /// `used_pages` randomly chosen pages (one of them the critical
    /// branch's) are launched; everything else is dead code.
    pub fn plant(image: &CodeImage, critical: Option<usize>, used_pages: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = image.kernels();
        let branches = image.branches(&kernels);
        let kernel_pages: Vec<(usize, usize)> = kernels.iter().map(page_span).collect();
        let core = critical.map(|slot| {
            branches
                .iter()
                .find(|b| b.slot == slot)
                .expect("critical slot is a candidate branch")
                .kernel
        });
        let mut pages: Vec<usize> = (0..image.pages()).collect();
        pages.shuffle(&mut rng);
        let mut used: BTreeSet<usize> = BTreeSet::new();
        if let Some(k) = core {
            let (a, b) = kernel_pages[k];
            used.extend(a..=b);
        }
        for p in pages {
            if used.len() >= used_pages.max(1) {
                break;
            }
            used.insert(p);
        }
        let roles = kernels
            .iter()
            .map(|k| {
                let (a, b) = kernel_pages[k.index];
                if Some(k.index) == core {
                    KernelRole::Core
                } else if (a..=b).all(|p| used.contains(&p)) {
                    KernelRole::Aux {
                        accuracy_loss: rng.gen_range(0.005..0.05),
                    }
                } else {
                    KernelRole::Dead
                }
            })
            .collect::<Vec<_>>();
        let mut effects = HashMap::new();
        let mut kernel_of_slot = HashMap::new();
        for b in &branches {
            kernel_of_slot.insert(b.slot, b.kernel);
            let e = match roles[b.kernel] {
                KernelRole::Dead => continue,
                KernelRole::Core => BranchEffect {
                    latency: rng.gen_range(-0.03..0.03),
                    crash: false,
                },
                KernelRole::Aux { .. } => BranchEffect {
                    latency: rng.gen_range(-0.03..0.03),
                    crash: rng.gen_bool(0.05),
                },
            };
            effects.insert(b.slot, e);
        }
        AccuracyOracle {
            baseline_accuracy: rng.gen_range(0.5668..0.8028),
            collapsed_accuracy: rng.gen_range(0.0010..0.0012),
            roles,
            kernel_pages,
            kernel_of_slot,
            effects,
            critical,
            critical_latency: rng.gen_range(-0.05..0.05),
            runs: Cell::new(0),
        }
    }

    /// Result of the untampered model; known without a tampered run.
    pub fn baseline(&self) -> RunResult {
        RunResult {
            accuracy: self.baseline_accuracy,
            latency: 1.0,
            crashed: false,
            valid_output: true,
        }
    }

    pub fn runs(&self) -> usize {
        self.runs.get()
    }

    pub fn critical_branch(&self) -> Option<usize> {
        self.critical
    }

    pub fn role(&self, kernel: usize) -> KernelRole {
        self.roles[kernel]
    }

    /// Evaluates one tampered run.
    pub fn run(&self, t: &TamperSet) -> RunResult {
        self.runs.set(self.runs.get() + 1);
        let killed = |k: usize| {
            let (a, b) = self.kernel_pages[k];
            t.exit_kernels.contains(&k) || (a..=b).any(|p| t.exit_pages.contains(&p))
        };
        let mut accuracy = self.baseline_accuracy;
        let mut latency = 1.0;
        let mut collapsed = false;
        for (k, role) in self.roles.iter().enumerate() {
            if !killed(k) {
                continue;
            }
            match *role {
                KernelRole::Dead => {}
                KernelRole::Aux { accuracy_loss } => {
                    accuracy *= 1.0 - accuracy_loss;
                    latency -= 0.01;
                }
                KernelRole::Core => {
                    collapsed = true;
                    latency -= 0.4;
                }
            }
        }
        let mut crashed = false;
        for &slot in &t.nop_branches {
            let Some(&k) = self.kernel_of_slot.get(&slot) else { continue };
            if killed(k) {
                continue;
            }
            if Some(slot) == self.critical {
                collapsed = true;
                latency += self.critical_latency;
            } else if let Some(e) = self.effects.get(&slot) {
                latency += e.latency;
                crashed |= e.crash;
            }
        }
        if collapsed {
            accuracy = self.collapsed_accuracy;
        }
        if crashed {
            return RunResult {
                accuracy: 0.0,
                latency,
                crashed: true,
                valid_output: false,
            };
        }
        RunResult {
            accuracy,
            latency,
            crashed: false,
            valid_output: true,
        }
    }
}

fn page_span(k: &Kernel) -> (usize, usize) {
    (k.start / SLOTS_PER_PAGE, (k.end - 1) / SLOTS_PER_PAGE)
}
