//! Scenario setup, ground-truth verification and multi-seed fan-out.
//!
//! Unlike the engine, this module inspects the simulator directly: it builds
//! co-tenant layouts and checks what the attack achieved against ground
//! truth, after the attack has finished.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vramsim::device_memory::{reference_profile, BitFlipSite, DramGeometry};
use vramsim::uvm_allocator::FrameOwner;
use vramsim::{
    CtxId, Guest, PhysAddr, SessionId, SimConfig, Simulator, VirtAddr, BIG_PAGE, FRAME_SIZE, GIB,
    MEDIUM_PAGE,
};

use vramsim::host_driver::Scheduler;

use crate::engine::{escalate_to_host, ArbitraryRW, Attack, AttackConfig, AttackError, Transcript};
use crate::privesc::{escalate, PrivescConfig, PrivescReport};

/// Marker the victim writes at the start of each of its pages.
pub const VICTIM_MAGIC: u64 = 0x5EC2E7;

pub fn victim_tag(i: u64) -> u64 {
    VICTIM_MAGIC << 40 | i
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub capacity: u64,
    /// Share of 2 MiB blocks pinned by a co-tenant before the attack starts,
    /// scattered over the device.
    pub victim_fraction: f64,
    pub seed: u64,
    /// Chance that the host driver runs right after each GSP message; zero
    /// means it only runs when the guest yields.
    pub wake_probability: f64,
    pub attack: AttackConfig,
    /// Simulator settings other than capacity, seed and host scheduling.
    pub base: SimConfig,
    /// Fault profile; the reference profile for the geometry when unset.
    pub profile: Option<Vec<BitFlipSite>>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            capacity: 48 * GIB,
            victim_fraction: 0.0,
            seed: 0,
            wake_probability: 0.0,
            attack: AttackConfig::default(),
            base: SimConfig::default(),
            profile: None,
        }
    }
}

impl Scenario {
    pub fn sim_config(&self) -> SimConfig {
        let mut cfg = SimConfig {
            capacity: self.capacity,
            seed: self.seed,
            ..self.base.clone()
        };
        cfg.host.seed = self.seed;
        cfg.host.iova_base = self.attack.iova_base;
        if self.wake_probability > 0.0 {
            cfg.host.scheduler = Scheduler::Randomized {
                wake_probability: self.wake_probability,
            };
        }
        cfg
    }
}

pub struct Setup {
    pub sim: Simulator,
    pub attacker: SessionId,
    pub victim: Option<SessionId>,
    pub victim_pages: Vec<VirtAddr>,
}

/// Builds the simulator, places the victim's pinned pages between
/// temporarily occupied blocks and opens the attacker session.
pub fn setup(s: &Scenario) -> Result<Setup, AttackError> {
    let mut sim = Simulator::new(s.sim_config()).map_err(|e| AttackError::NoTarget(e.to_string()))?;
    let sites = match &s.profile {
        Some(p) => p.clone(),
        None => reference_profile(sim.memory().geometry()),
    };
    sim.register_sites(&sites);
    let mut victim_pages = Vec::new();
    let mut victim = None;
    if s.victim_fraction > 0.0 {
        let vid = sim.create_session("victim").map_err(|e| AttackError::NoTarget(e.to_string()))?;
        let spacer = sim.create_session("spacer").map_err(|e| AttackError::NoTarget(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x7669_6374);
        let blocks = s.capacity / BIG_PAGE;
        let want = (blocks as f64 * s.victim_fraction) as u64;
        let mut spaced = Vec::new();
        while (victim_pages.len() as u64) < want {
            if rng.gen_bool(s.victim_fraction.min(1.0)) {
                let mut g = Guest::new(&mut sim, vid);
                let va = g.malloc_pinned(BIG_PAGE)?;
                g.write_u64(va, victim_tag(victim_pages.len() as u64))?;
                victim_pages.push(va);
            } else {
                let mut g = Guest::new(&mut sim, spacer);
                if g.mem_get_info() < 2 * BIG_PAGE {
                    break;
                }
                let va = g.alloc(BIG_PAGE)?;
                g.timed_touch(va, BIG_PAGE)?;
                spaced.push(va);
            }
        }
        let mut g = Guest::new(&mut sim, spacer);
        for va in spaced {
            g.free(va)?;
        }
        victim = Some(vid);
    }
    let attacker = sim.create_session("attacker").map_err(|e| AttackError::NoTarget(e.to_string()))?;
    Ok(Setup {
        sim,
        attacker,
        victim,
        victim_pages,
    })
}

/// Share of device frames not held by other contexts.
pub fn attacker_occupancy(sim: &Simulator, attacker: CtxId) -> f64 {
    let alloc = sim.allocator();
    let total = alloc.frame_counts().total;
    let mut foreign = 0;
    for frame in 0..total {
        let other = match alloc.frame_owner(frame) {
            FrameOwner::Free => false,
            FrameOwner::PtRegion { ctx, .. } | FrameOwner::Data { ctx, .. } => ctx != attacker,
        };
        foreign += other as u64;
    }
    1.0 - foreign as f64 / total as f64
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct HandleCheck {
    pub frames: usize,
    pub mismatches: usize,
    pub first_mismatch: Option<PhysAddr>,
}

/// Reads `n` random device frames through the handle and compares them with
/// ground truth.
pub fn verify_handle(setup: &mut Setup, rw: &mut ArbitraryRW, n: usize, seed: u64) -> Result<HandleCheck, AttackError> {
    let geo: DramGeometry = *setup.sim.memory().geometry();
    let frames = geo.capacity() / FRAME_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6672_616d);
    let picks: Vec<u64> = (0..n).map(|_| rng.gen_range(0..frames)).collect();
    let mut got = Vec::with_capacity(n);
    {
        let mut g = Guest::new(&mut setup.sim, setup.attacker);
        for &f in &picks {
            got.push(rw.read_phys(&mut g, PhysAddr::from_frame(f), FRAME_SIZE)?);
        }
    }
    let mut check = HandleCheck {
        frames: n,
        ..Default::default()
    };
    for (&f, bytes) in picks.iter().zip(&got) {
        let truth = setup
            .sim
            .read_phys_oracle(PhysAddr::from_frame(f), FRAME_SIZE)
            .map_err(|e| AttackError::Remassage(e.to_string()))?;
        if &truth != bytes {
            check.mismatches += 1;
            check.first_mismatch.get_or_insert(PhysAddr::from_frame(f));
        }
    }
    Ok(check)
}

/// Outcome of one seeded end-to-end run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub reached_rw: bool,
    pub occupancy: f64,
    /// Ground-truth accesses made while the attack was running.
    pub oracle_reads: u64,
    pub audit_ops: usize,
    pub violations: u32,
    pub handle_check: Option<HandleCheck>,
    pub transcript: Transcript,
}

impl SeedReport {
    pub fn confined(&self) -> bool {
        self.oracle_reads == 0 && self.violations == 0
    }
}

/// Sets up `scenario`, runs Steps 1–4 and verifies the handle with
/// `verify_frames` random frame reads.
pub fn run_seed(scenario: &Scenario, verify_frames: usize) -> Result<(SeedReport, Setup, Option<ArbitraryRW>), AttackError> {
    let mut setup = setup(scenario)?;
    let ctx = setup.sim.session(setup.attacker).ctx;
    let occupancy = attacker_occupancy(&setup.sim, ctx);
    let before = setup.sim.oracle_reads();
    let mut attack = Attack::new(AttackConfig {
        seed: scenario.seed,
        ..scenario.attack.clone()
    });
    let result = {
        let mut g = Guest::new(&mut setup.sim, setup.attacker);
        attack.run(&mut g)
    };
    let oracle_reads = setup.sim.oracle_reads() - before;
    let session = setup.sim.session(setup.attacker);
    let (audit_ops, violations) = (session.audit.len(), session.violations);
    let transcript = attack.transcript(result.as_ref().err());
    let mut handle = result.ok();
    let handle_check = match handle.as_mut() {
        Some(rw) if verify_frames > 0 => Some(verify_handle(&mut setup, rw, verify_frames, scenario.seed)?),
        _ => None,
    };
    let report = SeedReport {
        seed: scenario.seed,
        reached_rw: handle.is_some(),
        occupancy,
        oracle_reads,
        audit_ops,
        violations,
        handle_check,
        transcript,
    };
    Ok((report, setup, handle))
}

/// End-to-end run followed by the host escalation through the handle.
pub fn run_privesc(
    scenario: &Scenario,
    cfg: &PrivescConfig,
) -> Result<(SeedReport, Option<PrivescReport>, Setup), AttackError> {
    let (report, mut setup, handle) = run_seed(scenario, 0)?;
    let Some(rw) = handle else { return Ok((report, None, setup)) };
    let mut dma = escalate_to_host(rw, scenario.attack.iova_base);
    let outcome = {
        let mut g = Guest::new(&mut setup.sim, setup.attacker);
        escalate(&mut g, &mut dma, cfg)?
    };
    let pr = PrivescReport::from_simulator(&setup.sim, &outcome);
    Ok((report, Some(pr), setup))
}

/// One Step-3 round together with the owned fraction measured right before it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrySample {
    pub seed: u64,
    /// Step-3 rounds with a visible flip until an own destination.
    pub retries: u32,
    /// Attacker-owned share of jump destinations among candidate frames
    /// whose bit can flip, measured before the first round.
    pub p: f64,
    pub reached: bool,
}

/// Fraction of candidate frames for the target PTE whose flipped
/// destination is attacker data.
pub fn owned_destination_fraction(sim: &Simulator, attacker: CtxId, attack: &Attack) -> f64 {
    let Some(t) = attack.target() else { return 0.0 };
    let bit = t.site.pte_bit() - vramsim::page_table::PFN_SHIFT;
    let source = t.site.direction.source();
    let alloc = sim.allocator();
    let (mut eligible, mut owned) = (0u64, 0u64);
    for va in attack.reshuffle_pool() {
        let chunk = va.offset(t.entry * MEDIUM_PAGE);
        let Some(page) = alloc.resident_mapping(attacker, chunk) else { continue };
        let frame = page.phys.frame() + (chunk.get() - page.va.get()) / FRAME_SIZE;
        if (frame >> bit & 1 == 1) != source {
            continue;
        }
        eligible += 1;
        let dest = frame ^ (1 << bit);
        let mine = match alloc.frame_owner(dest) {
            FrameOwner::Data { ctx, .. } => ctx == attacker,
            _ => false,
        };
        owned += mine as u64;
    }
    if eligible == 0 {
        0.0
    } else {
        owned as f64 / eligible as f64
    }
}

/// Runs Steps 1–3 for one seed, measuring p before the first hammer round.
pub fn retry_sample(scenario: &Scenario) -> Result<RetrySample, AttackError> {
    let mut setup = setup(scenario)?;
    let ctx = setup.sim.session(setup.attacker).ctx;
    let mut attack = Attack::new(AttackConfig {
        seed: scenario.seed,
        ..scenario.attack.clone()
    });
    {
        let mut g = Guest::new(&mut setup.sim, setup.attacker);
        attack.step1_fill(&mut g)?;
        attack.select_target(&mut g)?;
        attack.step2_massage(&mut g)?;
        attack.dense_fill(&mut g)?;
    }
    let p = owned_destination_fraction(&setup.sim, ctx, &attack);
    let reached = {
        let mut g = Guest::new(&mut setup.sim, setup.attacker);
        attack.step3_hammer_scan(&mut g).is_ok()
    };
    Ok(RetrySample {
        seed: scenario.seed,
        retries: attack.state.retries,
        p,
        reached,
    })
}

/// Maps `f` over `seeds` on a pool of `jobs` threads (or sequentially
/// without the `parallel` feature); results come back in seed order.
pub fn fan_out<T, F>(seeds: &[u64], jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if jobs > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .expect("thread pool");
            return pool.install(|| seeds.par_iter().map(|&s| f(s)).collect());
        }
    }
    let _ = jobs;
    seeds.iter().map(|&s| f(s)).collect()
}
