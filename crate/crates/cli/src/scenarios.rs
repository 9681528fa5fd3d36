//! The seven runnable scenarios. Each trial yields checks, a summary and,
//! for the first trial only, traces and side files.

use std::collections::BTreeSet;

use attack_engine::privesc::PrivescConfig;
use attack_engine::runner::{fan_out, run_privesc, run_seed, setup, Scenario};
use attack_engine::engine::dense_table_count;
use attack_engine::{Attack, AttackConfig};
use payload_lab::code::{synthesize, CodeImage, ImageSpec};
use payload_lab::fingerprint::{fingerprint, perturb, synth_family, Corpus};
use payload_lab::oracle::AccuracyOracle;
use payload_lab::race::{find_candidates, race_probability, run_key_race, synth_snapshot, RaceParams, SnapshotSpec};
use payload_lab::search::{filter_pipeline, SearchError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use vramsim::device_memory::{parse_profile, reference_profile_labeled, write_profile, BitFlipSite};
use vramsim::sim::{LatencyRecord, SimEvent, TimingConfig};
use vramsim::uvm_allocator::{allocations_to_next_pt_region, AllocatorConfig};
use vramsim::{Guest, SimConfig, Simulator, SpikeDetector, KIB, MIB};

use crate::config::{Config, ConfigError};

#[derive(Copy, Clone, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ScenarioName {
    MassageDemo,
    E2eAttack,
    HostPrivesc,
    CodeTamper,
    KeyRace,
    Fingerprint,
    Eq1Trace,
}

impl ScenarioName {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::MassageDemo => "massage-demo",
            ScenarioName::E2eAttack => "e2e-attack",
            ScenarioName::HostPrivesc => "host-privesc",
            ScenarioName::CodeTamper => "code-tamper",
            ScenarioName::KeyRace => "key-race",
            ScenarioName::Fingerprint => "fingerprint",
            ScenarioName::Eq1Trace => "eq1-trace",
        }
    }

    /// Whether `trials` runs independent seeded instances.
    fn seeded(self) -> bool {
        !matches!(self, ScenarioName::Fingerprint | ScenarioName::Eq1Trace)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail: detail.into(),
    }
}

#[derive(Default)]
struct Trial {
    checks: Vec<Check>,
    summary: Value,
    latency: Vec<LatencyRecord>,
    events: Vec<SimEvent>,
    files: Vec<(String, Vec<u8>)>,
}

impl Trial {
    fn failed(name: &str, why: impl ToString) -> Self {
        Trial {
            checks: vec![check(name, false, why.to_string())],
            summary: Value::Null,
            ..Default::default()
        }
    }

    fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

/// Everything a run writes out.
pub struct Artifacts {
    pub report: Value,
    pub latency: Vec<LatencyRecord>,
    pub events: Vec<SimEvent>,
    pub files: Vec<(String, Vec<u8>)>,
    pub verified: bool,
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

fn lab_event(tick: u64, event: &str, detail: String) -> SimEvent {
    SimEvent {
        tick,
        event: event.to_string(),
        ctx: 0,
        frame: None,
        detail,
    }
}

// ---- configuration ----------------------------------------------------------

pub fn sim_config(cfg: &Config) -> Result<SimConfig, ConfigError> {
    Ok(SimConfig {
        capacity: cfg.size("capacity")?,
        banks: cfg.positive("banks")?,
        row_size: cfg.size("row_size")?,
        tlb_entries: cfg.positive("tlb_entries")?,
        allocator: AllocatorConfig {
            region0_distance: cfg.size("region0_distance")?,
            initial_fill: cfg.size("initial_fill")?,
            ..AllocatorConfig::default()
        },
        timing: TimingConfig {
            base: cfg.positive("timing_base")?,
            eviction_penalty: cfg.get("timing_eviction_penalty")?,
            jitter: cfg.fraction("timing_jitter")?,
        },
        polarity_gating: cfg.get("polarity_gating")?,
        seed: cfg.get("seed")?,
        ..SimConfig::default()
    })
}

fn load_profile(cfg: &Config) -> Result<Option<Vec<BitFlipSite>>, ConfigError> {
    let Some(path) = cfg.path("fault_profile") else { return Ok(None) };
    let f = std::fs::File::open(path).map_err(|e| ConfigError::Io {
        path: path.to_string(),
        why: e.to_string(),
    })?;
    parse_profile(f).map(Some).map_err(|e| ConfigError::Value {
        key: "fault_profile".into(),
        value: path.into(),
        why: e.to_string(),
    })
}

/// Attack scenario for one seed.
pub fn scenario(cfg: &Config, seed: u64) -> Result<Scenario, ConfigError> {
    let base = sim_config(cfg)?;
    let geo = base.geometry().map_err(|e| ConfigError::Value {
        key: "capacity".into(),
        value: cfg.raw("capacity").into(),
        why: e.to_string(),
    })?;
    let profile = load_profile(cfg)?;
    let chosen_site = match cfg.path("site") {
        None => None,
        Some(s) => {
            let bad = |why: &str| ConfigError::Value {
                key: "site".into(),
                value: s.into(),
                why: why.into(),
            };
            if let Ok(i) = s.parse::<usize>() {
                let sites = profile.clone().unwrap_or_else(|| vramsim::device_memory::reference_profile(&geo));
                Some(*sites.get(i).ok_or_else(|| bad("index beyond the profile"))?)
            } else if profile.is_some() {
                return Err(bad("labels name reference sites; use an index with a custom profile"));
            } else {
                let l = reference_profile_labeled(&geo);
                Some(l.iter().find(|(n, _)| *n == s).ok_or_else(|| bad("no such reference site"))?.1)
            }
        }
    };
    let attack = AttackConfig {
        chosen_site,
        spike_factor: cfg.positive("spike_factor")?,
        max_step3_retries: cfg.positive("max_step3_retries")?,
        keep_alive_period: cfg.positive("keep_alive_period")?,
        reshuffle_pages: cfg.positive("reshuffle_pages")?,
        max_silent_rounds: cfg.positive("max_silent_rounds")?,
        iova_base: cfg.size("iova_base")?,
        seed,
    };
    Ok(Scenario {
        capacity: base.capacity,
        victim_fraction: cfg.fraction("victim_fraction")?,
        seed,
        wake_probability: cfg.fraction("race_window")?,
        attack,
        base,
        profile,
    })
}

// ---- scenarios --------------------------------------------------------------

fn massage_demo(sc: &Scenario, keep: bool) -> Trial {
    let mut s = match setup(sc) {
        Ok(s) => s,
        Err(e) => return Trial::failed("setup", e),
    };
    let ctx = s.sim.session(s.attacker).ctx;
    let mut attack = Attack::new(sc.attack.clone());
    let result = {
        let mut g = Guest::new(&mut s.sim, s.attacker);
        attack
            .step1_fill(&mut g)
            .and_then(|_| attack.select_target(&mut g).map(|_| ()))
            .and_then(|_| attack.step2_massage(&mut g))
            .and_then(|_| attack.dense_fill(&mut g))
    };
    let transcript = attack.transcript(result.as_ref().err());
    let mut t = Trial::default();
    t.checks.push(check(
        "massage",
        result.is_ok(),
        transcript.error.clone().unwrap_or_else(|| "steps 1-2 and dense fill completed".into()),
    ));
    let period = allocations_to_next_pt_region(0);
    let c = &transcript.counters;
    let periodic = c.massage_spikes.windows(2).all(|w| w[1] - w[0] == period);
    let on_schedule = c.massage_spikes.last().map(|s| s + period) == c.trigger_allocation;
    t.checks.push(check(
        "trigger_on_schedule",
        periodic && on_schedule,
        format!("spikes at {:?}, trigger at {:?}, period {period}", c.massage_spikes, c.trigger_allocation),
    ));
    let mut density = None;
    if let Some(target) = attack.target() {
        let alloc = s.sim.allocator();
        let region = alloc.regions().into_iter().find(|r| r.ctx == ctx && r.base.block() == target.block);
        t.checks.push(check(
            "region_at_target",
            region.is_some(),
            format!("target block {}", target.block),
        ));
        if let Some(r) = region {
            let d = alloc.region_density(s.sim.memory(), r.id);
            let frac = d.fraction();
            t.checks.push(check(
                "density",
                frac >= 0.968 && d.full_minus_one == d.tables && d.tables == dense_table_count(),
                format!("{} tables, {}/{} valid ({:.4})", d.tables, d.valid, d.slots, frac),
            ));
            density = Some(json!({"tables": d.tables, "valid": d.valid, "slots": d.slots, "fraction": frac}));
        }
    }
    t.summary = json!({
        "seed": sc.seed,
        "target": transcript.target,
        "counters": transcript.counters,
        "density": density,
    });
    if keep {
        let mut csv = Vec::new();
        write_profile(&s.sim.memory().sites(), &mut csv).expect("in-memory write");
        t.files.push(("fault_profile.csv".into(), csv));
        t.files.push(("transcript.json".into(), json_bytes(&transcript)));
        t.latency = s.sim.latency_trace();
        t.events = s.sim.events().to_vec();
    }
    t
}

fn e2e_attack(sc: &Scenario, verify: usize, keep: bool) -> Trial {
    let (report, s, _) = match run_seed(sc, verify) {
        Ok(r) => r,
        Err(e) => return Trial::failed("setup", e),
    };
    let mut t = Trial::default();
    t.checks.push(check(
        "arbitrary_rw",
        report.reached_rw,
        report.transcript.error.clone().unwrap_or_else(|| "handle built and self-tested".into()),
    ));
    t.checks.push(check(
        "guest_api_only",
        report.confined(),
        format!(
            "{} ground-truth reads, {} audit violations over {} ops",
            report.oracle_reads, report.violations, report.audit_ops
        ),
    ));
    if report.reached_rw && verify > 0 {
        let h = report.handle_check.clone().unwrap_or_default();
        t.checks.push(check(
            "handle_matches_memory",
            h.mismatches == 0 && h.frames == verify,
            format!("{} frames read, {} mismatches", h.frames, h.mismatches),
        ));
    }
    t.summary = json!({
        "seed": report.seed,
        "reached_rw": report.reached_rw,
        "occupancy": report.occupancy,
        "retries": report.transcript.state.retries,
        "oracle_reads": report.oracle_reads,
        "audit_ops": report.audit_ops,
        "violations": report.violations,
        "handle_check": report.handle_check,
        "error": report.transcript.error,
    });
    if keep {
        t.files.push(("transcript.json".into(), json_bytes(&report.transcript)));
        t.latency = s.sim.latency_trace();
        t.events = s.sim.events().to_vec();
    }
    t
}

fn host_privesc(sc: &Scenario, pc: &PrivescConfig, keep: bool) -> Trial {
    let (report, pr, s) = match run_privesc(sc, pc) {
        Ok(r) => r,
        Err(e) => return Trial::failed("privesc", e),
    };
    let mut t = Trial::default();
    t.checks.push(check(
        "arbitrary_rw",
        report.reached_rw,
        report.transcript.error.clone().unwrap_or_else(|| "handle built".into()),
    ));
    if let Some(p) = &pr {
        t.checks.push(check(
            "euid",
            p.euid_before == vramsim::host_driver::INITIAL_EUID && p.euid_after == 0,
            format!("{} -> {}", p.euid_before, p.euid_after),
        ));
        t.checks.push(check(
            "kernel_stable",
            p.kernel_state == vramsim::host_driver::KernelState::Stable,
            format!("{:?}", p.kernel_state),
        ));
        if pc.fcn_flush != 0 {
            t.checks.push(check(
                "driver_crashed",
                p.driver_state == vramsim::host_driver::DriverState::Crashed,
                format!("{:?}", p.driver_state),
            ));
        }
    }
    t.summary = json!({
        "seed": report.seed,
        "reached_rw": report.reached_rw,
        "retries": report.transcript.state.retries,
        "privesc": pr,
    });
    if keep {
        if let Some(p) = &pr {
            t.files.push(("privesc.json".into(), json_bytes(p)));
        }
        t.files.push(("transcript.json".into(), json_bytes(&report.transcript)));
        t.latency = s.sim.latency_trace();
        t.events = s.sim.events().to_vec();
    }
    t
}

/// Tail-only 2 MiB+4 KiB allocations after a full fill, opening a 2 MiB hole
/// whenever memory runs out. Returns per-allocation (latency, spiked,
/// evicted) and the simulator.
pub fn tail_trace(sim_cfg: SimConfig, allocs: usize) -> Result<(Vec<(u32, bool, bool)>, Simulator), String> {
    let mut sim = Simulator::new(sim_cfg).map_err(|e| e.to_string())?;
    let filler = sim.create_session("filler").map_err(|e| e.to_string())?;
    let probe = sim.create_session("probe").map_err(|e| e.to_string())?;
    let mut big = std::collections::VecDeque::new();
    {
        let mut g = Guest::new(&mut sim, filler);
        while g.mem_get_info() > 0 {
            let va = g.alloc(2 * MIB).map_err(|e| e.to_string())?;
            g.timed_touch(va, 8).map_err(|e| e.to_string())?;
            big.push_back(va);
        }
    }
    let mut rows = Vec::with_capacity(allocs);
    let mut det = SpikeDetector::new(10.0);
    det.prime(1);
    let mut seen = sim.allocator().events().len();
    for _ in 0..allocs {
        while Guest::new(&mut sim, probe).mem_get_info() == 0 {
            let hole = big.pop_front().ok_or("ran out of filler pages")?;
            Guest::new(&mut sim, filler).cpu_touch(hole, 2 * MIB).map_err(|e| e.to_string())?;
        }
        seen = sim.allocator().events().len().max(seen);
        let mut g = Guest::new(&mut sim, probe);
        let va = g.alloc(2 * MIB + 4 * KIB).map_err(|e| e.to_string())?;
        let lat = g.timed_touch(va.offset(2 * MIB), 4 * KIB).map_err(|e| e.to_string())?;
        let spiked = det.observe(lat);
        let events = sim.allocator().events();
        let evicted = events[seen..].iter().any(|e| e.event == "evict");
        seen = events.len();
        rows.push((lat, spiked, evicted));
    }
    Ok((rows, sim))
}

fn eq1_trace(cfg: &Config) -> Result<Trial, ConfigError> {
    let mut sc = sim_config(cfg)?;
    sc.capacity = cfg.size("eq1_capacity")?;
    let periods: usize = cfg.positive("eq1_periods")?;
    let first = allocations_to_next_pt_region(sc.allocator.initial_fill) as usize;
    let period = allocations_to_next_pt_region(0) as usize;
    let n = first + periods * period + 5;
    let (rows, sim) = match tail_trace(sc, n) {
        Ok(r) => r,
        Err(e) => return Ok(Trial::failed("trace", e)),
    };
    let spikes: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| r.1).map(|(i, _)| i).collect();
    let evictions: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| r.2).map(|(i, _)| i).collect();
    let expected: Vec<usize> = (0..=periods).map(|k| first + k * period).collect();
    let mut t = Trial::default();
    t.checks.push(check(
        "spike_schedule",
        spikes == expected,
        format!("first {first}, period {period}, observed {spikes:?}"),
    ));
    t.checks.push(check(
        "spikes_are_evictions",
        spikes == evictions,
        format!("{} spikes, {} evicting allocations", spikes.len(), evictions.len()),
    ));
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["allocation", "latency", "spike", "evicted"]).expect("in-memory");
    for (i, (lat, s, e)) in rows.iter().enumerate() {
        csv.write_record([i.to_string(), lat.to_string(), (*s as u8).to_string(), (*e as u8).to_string()])
            .expect("in-memory");
    }
    t.files.push(("eq1.csv".into(), csv.into_inner().expect("in-memory")));
    t.summary = json!({
        "allocations": n,
        "first_spike": spikes.first(),
        "period": period,
        "spikes": spikes,
        "intervals": spikes.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>(),
    });
    t.latency = sim.latency_trace();
    t.events = sim.events().to_vec();
    Ok(t)
}

struct CodeSetup {
    image: CodeImage,
    used_pages: usize,
    budget: usize,
}

fn code_setup(cfg: &Config) -> Result<CodeSetup, ConfigError> {
    let image = match cfg.path("code_image") {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| ConfigError::Io {
                path: p.into(),
                why: e.to_string(),
            })?;
            CodeImage::from_bytes(&bytes).map_err(|e| ConfigError::Value {
                key: "code_image".into(),
                value: p.into(),
                why: e.to_string(),
            })?
        }
        None => synthesize(&ImageSpec {
            pages: cfg.positive("code_pages")?,
            kernels: cfg.positive("code_kernels")?,
            branches: cfg.positive("code_branches")?,
            seed: cfg.get("seed")?,
        })
        .map_err(|e| ConfigError::Value {
            key: "code_pages".into(),
            value: cfg.raw("code_pages").into(),
            why: e.to_string(),
        })?,
    };
    Ok(CodeSetup {
        image,
        used_pages: cfg.positive("code_used_pages")?,
        budget: cfg.positive("code_budget")?,
    })
}

fn code_tamper(cs: &CodeSetup, seed: u64, keep: bool) -> Trial {
    let kernels = cs.image.kernels();
    let branches = cs.image.branches(&kernels);
    if branches.is_empty() {
        return Trial::failed("image", "no candidate branches");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted = branches[rng.gen_range(0..branches.len())].slot;
    let oracle = AccuracyOracle::plant(&cs.image, Some(planted), cs.used_pages, seed);
    let mut t = Trial::default();
    let found = filter_pipeline(&cs.image, &oracle, cs.budget);
    match &found {
        Ok(r) => {
            t.checks.push(check(
                "planted_branch_found",
                r.critical_branch == planted,
                format!("planted slot {planted}, found slot {} in {} runs", r.critical_branch, r.runs_used),
            ));
            t.checks.push(check(
                "stealthy_collapse",
                r.result.stealthy_collapse(),
                format!("accuracy {:.4}, latency x{:.3}", r.result.accuracy, r.result.latency),
            ));
        }
        Err(e) => t.checks.push(check("planted_branch_found", false, e.to_string())),
    }
    if keep {
        let control = AccuracyOracle::plant(&cs.image, None, cs.used_pages, seed);
        let neg = filter_pipeline(&cs.image, &control, cs.budget.max(1000));
        t.checks.push(check(
            "negative_control",
            matches!(neg, Err(SearchError::NotFound { .. })),
            match &neg {
                Ok(r) => format!("false positive at slot {}", r.critical_branch),
                Err(e) => e.to_string(),
            },
        ));
        if let Ok(r) = &found {
            let l = &r.log;
            t.events = vec![
                lab_event(0, "page_filter", format!("{} of {} pages survive: {:?}", l.surviving_pages.len(), l.pages, l.surviving_pages)),
                lab_event(l.runs_per_stage[0] as u64, "kernel_search", format!("kernel {} of {} candidates", l.kernel, l.kernel_candidates)),
                lab_event(
                    (l.runs_per_stage[0] + l.runs_per_stage[1]) as u64,
                    "branch_search",
                    format!("slot {} of {} candidates", r.critical_branch, l.branch_candidates),
                ),
            ];
        }
    }
    t.summary = json!({
        "seed": seed,
        "planted": planted,
        "baseline": oracle.baseline(),
        "search": found.as_ref().ok(),
        "error": found.as_ref().err().map(|e| e.to_string()),
    });
    t
}

fn race_params(cfg: &Config) -> Result<RaceParams, ConfigError> {
    Ok(RaceParams {
        candidates: cfg.positive("race_candidates")?,
        dump_time_per_page: cfg.positive("race_dump_ms")?,
        residency: cfg.positive("race_residency_ms")?,
        trials: cfg.positive("race_trials")?,
    })
}

fn key_race(cfg: &Config, p: &RaceParams, seed: u64, keep: bool) -> Result<Trial, ConfigError> {
    let pool: usize = cfg.positive("race_pool_pages")?;
    let prefill = cfg.size("race_prefill")?;
    let prefill = u8::try_from(prefill).map_err(|_| ConfigError::Value {
        key: "race_prefill".into(),
        value: cfg.raw("race_prefill").into(),
        why: "must fit in a byte".into(),
    })?;
    if p.candidates as usize + 2 > pool {
        return Err(ConfigError::Value {
            key: "race_pool_pages".into(),
            value: pool.to_string(),
            why: "pool must hold the candidates plus two partially zeroed pages".into(),
        });
    }
    let mut t = Trial::default();
    let analytic = race_probability(p).expect("validated");
    match run_key_race(p, seed) {
        Ok(mc) => {
            let gap = (mc - analytic.p).abs();
            t.checks.push(check(
                "monte_carlo_matches_analytic",
                analytic.saturated || gap <= 0.005,
                format!("monte carlo {mc:.5}, analytic {:.5}, gap {gap:.5}", analytic.p),
            ));
            t.summary = json!({"seed": seed, "analytic": analytic, "monte_carlo": mc});
        }
        Err(e) => return Ok(Trial::failed("monte_carlo", e)),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut pages: Vec<usize> = (0..pool).collect();
    pages.shuffle(&mut rng);
    let mut freed = pages[..p.candidates as usize].to_vec();
    let partial = pages[p.candidates as usize..p.candidates as usize + 2].to_vec();
    let busy: Vec<usize> = pages[p.candidates as usize + 2..].iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
    freed.sort_unstable();
    let snap = synth_snapshot(&SnapshotSpec {
        pages: pool,
        page_size: 4096,
        prefill,
        freed: &freed,
        busy: &busy,
        partial: &partial,
        seed,
    });
    match find_candidates(&snap, 4096, prefill) {
        Ok(found) => {
            t.checks.push(check(
                "zeroed_pages_found",
                found == freed,
                format!("{} candidates of {} freed pages", found.len(), freed.len()),
            ));
            t.summary["candidates"] = json!(found.len());
        }
        Err(e) => t.checks.push(check("zeroed_pages_found", false, e.to_string())),
    }
    if keep {
        let band: Vec<f64> = [0.3, 0.1]
            .iter()
            .map(|&d| {
                race_probability(&RaceParams {
                    dump_time_per_page: d,
                    ..*p
                })
                .map(|r| r.p)
                .unwrap_or(f64::NAN)
            })
            .collect();
        t.summary["band_over_dump_time"] = json!({"d_0.3": band[0], "d_0.1": band[1]});
        t.events = vec![lab_event(0, "candidates", format!("{} zeroed pages in a pool of {pool}", freed.len()))];
    }
    Ok(t)
}

fn fingerprint_scenario(cfg: &Config) -> Result<Trial, ConfigError> {
    let seed: u64 = cfg.get("seed")?;
    let families: u64 = cfg.positive("fp_families")?;
    let variants: u64 = cfg.positive("fp_variants")?;
    let layers: usize = cfg.positive("fp_layers")?;
    let weights: usize = cfg.positive("fp_weights")?;
    let noise: f64 = cfg.positive("fp_perturbation")?;
    let dumps: Vec<Vec<Vec<f32>>> = (0..families)
        .map(|f| synth_family(layers, weights, seed.wrapping_mul(1000).wrapping_add(f)))
        .collect();
    let label = |f: usize| format!("family-{f}");
    let corpus = match cfg.path("fp_references") {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
                path: p.into(),
                why: e.to_string(),
            })?;
            Corpus::from_json(&text).map_err(|e| ConfigError::Value {
                key: "fp_references".into(),
                value: p.into(),
                why: e.to_string(),
            })?
        }
        None => Corpus::new(dumps.iter().enumerate().map(|(f, w)| fingerprint(&label(f), w)).collect())
            .expect("non-empty"),
    };
    let mut t = Trial::default();
    let self_ok = corpus
        .references
        .iter()
        .all(|r| corpus.similarity(r, r).map_or(false, |s| (s - 1.0).abs() < 1e-9));
    t.checks.push(check("self_similarity", self_ok, "every reference scores 1.0 against itself"));

    let mut hits = 0;
    let mut total = 0;
    let mut within_min = f64::INFINITY;
    let mut rows = Vec::new();
    for (f, w) in dumps.iter().enumerate() {
        for v in 0..variants {
            let tuned = perturb(w, noise, seed ^ ((f as u64) << 32 | v));
            let fp = fingerprint("dump", &tuned);
            match corpus.identify(&fp) {
                Ok(m) => {
                    total += 1;
                    hits += (m.label == label(f)) as u32;
                    if let Some((_, s)) = m.scores.iter().find(|(l, _)| *l == label(f)) {
                        within_min = within_min.min(*s);
                    }
                    t.events.push(lab_event(total as u64, "identify", format!("{} v{v} -> {} ({:.4})", label(f), m.label, m.score)));
                    rows.push(json!({"family": label(f), "variant": v, "match": m}));
                }
                Err(e) => {
                    t.checks.push(check("alignment", false, e.to_string()));
                    return Ok(t);
                }
            }
        }
    }
    t.checks.push(check(
        "top1_accuracy",
        hits == total,
        format!("{hits}/{total} variants matched to their family"),
    ));
    t.checks.push(check(
        "variant_similarity",
        within_min >= 0.97,
        format!("lowest within-family score {within_min:.4}"),
    ));
    let refs = &corpus.references;
    let mut cross_max = f64::NEG_INFINITY;
    for i in 0..refs.len() {
        for j in i + 1..refs.len() {
            if let Ok(s) = corpus.similarity(&refs[i], &refs[j]) {
                cross_max = cross_max.max(s);
            }
        }
    }
    t.summary = json!({
        "families": families,
        "variants": variants,
        "top1": hits as f64 / total.max(1) as f64,
        "lowest_within_family": within_min,
        "highest_cross_family": cross_max,
        "normalizer": corpus.normalizer,
        "queries": rows,
    });
    t.files.push(("references.json".into(), format!("{}\n", corpus.to_json()).into_bytes()));
    Ok(t)
}

// ---- driver -----------------------------------------------------------------

/// Runs `name` under `cfg` and assembles the report.
pub fn run(name: ScenarioName, cfg: &Config) -> Result<Artifacts, ConfigError> {
    let seed: u64 = cfg.get("seed")?;
    let trials: u64 = if name.seeded() { cfg.positive("trials")? } else { 1 };
    let jobs: usize = cfg.positive("jobs")?;
    let min_success = cfg.fraction("min_success")?;
    let seeds: Vec<u64> = (0..trials).map(|i| seed.wrapping_add(i)).collect();

    let results: Vec<Trial> = match name {
        ScenarioName::MassageDemo | ScenarioName::E2eAttack | ScenarioName::HostPrivesc => {
            let scs = seeds.iter().map(|&s| scenario(cfg, s)).collect::<Result<Vec<_>, _>>()?;
            let verify: usize = cfg.get("verify_frames")?;
            let pc = PrivescConfig {
                fcn_flush: cfg.size("fcn_flush")?,
                max_attempts: cfg.positive("privesc_attempts")?,
            };
            fan_out(&seeds, jobs, |s| {
                let sc = &scs[(s.wrapping_sub(seed)) as usize];
                let keep = s == seed;
                match name {
                    ScenarioName::MassageDemo => massage_demo(sc, keep),
                    ScenarioName::E2eAttack => e2e_attack(sc, verify, keep),
                    _ => host_privesc(sc, &pc, keep),
                }
            })
        }
        ScenarioName::CodeTamper => {
            let cs = code_setup(cfg)?;
            let mut r = fan_out(&seeds, jobs, |s| code_tamper(&cs, s, s == seed));
            if cfg.get::<bool>("write_image")? {
                r[0].files.push(("code.bin".into(), cs.image.to_bytes()));
            }
            r
        }
        ScenarioName::KeyRace => {
            let p = race_params(cfg)?;
            let mut out = Vec::new();
            for &s in &seeds {
                out.push(key_race(cfg, &p, s, s == seed)?);
            }
            out
        }
        ScenarioName::Fingerprint => vec![fingerprint_scenario(cfg)?],
        ScenarioName::Eq1Trace => vec![eq1_trace(cfg)?],
    };

    let passed = results.iter().filter(|t| t.passed()).count();
    let need = (min_success * results.len() as f64).ceil() as usize;
    let verified = passed >= need.max(1);
    let per_trial: Vec<Value> = seeds
        .iter()
        .zip(&results)
        .map(|(s, t)| json!({"seed": s, "passed": t.passed(), "checks": t.checks, "summary": t.summary}))
        .collect();
    let failed_checks: BTreeSet<&str> = results
        .iter()
        .flat_map(|t| t.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()))
        .collect();
    let report = json!({
        "scenario": name.as_str(),
        "config": cfg.echo(),
        "trials": per_trial,
        "passed_trials": passed,
        "required_trials": need.max(1),
        "failed_checks": failed_checks,
        "verified": verified,
    });
    let mut results = results;
    let first = results.swap_remove(0);
    Ok(Artifacts {
        report,
        latency: first.latency,
        events: first.events,
        files: first.files,
        verified,
    })
}

/// Writes `report.json`, `latency.csv`, `events.jsonl` and side files.
pub fn write_artifacts(dir: &std::path::Path, a: &Artifacts) -> std::io::Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), json_bytes(&a.report))?;
    let mut w = csv::Writer::from_path(dir.join("latency.csv"))?;
    w.write_record(["tick", "ctx", "op", "latency"])?;
    for r in &a.latency {
        w.write_record([r.tick.to_string(), r.ctx.to_string(), r.op.name().to_string(), r.latency.to_string()])?;
    }
    w.flush()?;
    let mut ev = std::io::BufWriter::new(std::fs::File::create(dir.join("events.jsonl"))?);
    for e in &a.events {
        serde_json::to_writer(&mut ev, e)?;
        ev.write_all(b"\n")?;
    }
    ev.flush()?;
    for (name, bytes) in &a.files {
        std::fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}
