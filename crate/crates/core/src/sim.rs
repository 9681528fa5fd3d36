//! The simulator: device memory, allocator, TLB, timing and host driver
//! wired together, with guest sessions interleaving at operation boundaries.
//!
//! Everything reachable from [`Simulator`] directly is ground truth for test
//! harnesses. Attack code only ever holds a [`crate::guest_api::Guest`].

use crate::addr::{CtxId, HostAddr, PageSize, PhysAddr, VirtAddr, GIB, KIB};
use crate::device_memory::{reference_profile, BitFlipSite, DeviceMemory, DramGeometry, MemError};
use crate::guest_api::{AuditEntry, GuestOp};
use crate::host_driver::{HostConfig, HostDriver, ReceiveOutcome};
use crate::page_table::{walk, Mapping, Target, Tlb, TranslateError, TranslationSource};
use crate::uvm_allocator::{AllocError, AllocatorConfig, EvictionReport, UvmAllocator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::Cell;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub capacity: u64,
    pub banks: u32,
    pub row_size: u64,
    pub tlb_entries: usize,
    pub allocator: AllocatorConfig,
    pub host: HostConfig,
    pub timing: TimingConfig,
    pub polarity_gating: bool,
    pub detailed_journal: bool,
    pub record_events: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            capacity: 48 * GIB,
            banks: 16,
            row_size: 2 * KIB,
            tlb_entries: 512,
            allocator: AllocatorConfig::default(),
            host: HostConfig::default(),
            timing: TimingConfig::default(),
            polarity_gating: true,
            detailed_journal: false,
            record_events: true,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn with_capacity(capacity: u64) -> Self {
        SimConfig {
            capacity,
            ..Default::default()
        }
    }

    pub fn geometry(&self) -> Result<DramGeometry, MemError> {
        DramGeometry::new(self.capacity, self.banks, self.row_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub base: u32,
    pub eviction_penalty: u32,
    /// Uniform multiplicative jitter half-width, e.g. 0.1 for ±10%.
    pub jitter: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            base: 1,
            eviction_penalty: 99,
            jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TimingModel {
    cfg: TimingConfig,
    rng: ChaCha8Rng,
}

impl TimingModel {
    pub fn new(cfg: TimingConfig, seed: u64) -> Self {
        TimingModel {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7159_c0de),
        }
    }

    pub fn latency(&mut self, evictions: u32) -> u32 {
        let ideal = self.cfg.base as f64 + self.cfg.eviction_penalty as f64 * evictions as f64;
        if self.cfg.jitter <= 0.0 {
            return ideal as u32;
        }
        let f = 1.0 + self.rng.gen_range(-self.cfg.jitter..=self.cfg.jitter);
        (ideal * f).round().max(1.0) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub tick: u64,
    pub event: String,
    pub ctx: u32,
    pub frame: Option<u64>,
    pub detail: String,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionId(pub u32);

#[derive(Debug, Clone)]
pub struct Session {
    pub ctx: CtxId,
    pub name: String,
    pub audit: Vec<AuditEntry>,
    pub violations: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub tick: u64,
    pub ctx: u32,
    pub op: GuestOp,
    pub latency: u32,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Memory(#[from] MemError),
    #[error(transparent)]
    Translate(#[from] TranslateError),
    #[error("write to read-only mapping at {0}")]
    ReadOnly(VirtAddr),
}

/// The whole simulated machine.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    pub(crate) mem: DeviceMemory,
    pub(crate) alloc: UvmAllocator,
    pub(crate) tlb: Tlb,
    pub(crate) timing: TimingModel,
    pub(crate) driver: HostDriver,
    pub(crate) sessions: Vec<Session>,
    pub(crate) tick: u64,
    events: Vec<SimEvent>,
    alloc_events_seen: usize,
    oracle_reads: Cell<u64>,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        let geometry = cfg.geometry()?;
        let mut mem = DeviceMemory::new(geometry);
        mem.set_polarity_gating(cfg.polarity_gating);
        mem.set_detailed_journal(cfg.detailed_journal);
        let mut host = cfg.host.clone();
        host.seed ^= cfg.seed;
        Ok(Simulator {
            alloc: UvmAllocator::new(cfg.capacity, cfg.allocator.clone()),
            tlb: Tlb::new(cfg.tlb_entries),
            timing: TimingModel::new(cfg.timing, cfg.seed),
            driver: HostDriver::new(&host),
            sessions: Vec::new(),
            tick: 0,
            events: Vec::new(),
            alloc_events_seen: 0,
            oracle_reads: Cell::new(0),
            mem,
            cfg,
        })
    }

    /// A simulator with the reference fault profile registered.
    pub fn with_reference_profile(cfg: SimConfig) -> Result<Self, SimError> {
        let mut s = Self::new(cfg)?;
        let sites = reference_profile(s.mem.geometry());
        s.mem.register_sites(&sites);
        Ok(s)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn register_sites(&mut self, sites: &[BitFlipSite]) {
        self.mem.register_sites(sites);
    }

    pub fn create_session(&mut self, name: &str) -> Result<SessionId, SimError> {
        let id = SessionId(self.sessions.len() as u32);
        let ctx = CtxId(id.0);
        self.alloc.set_tick(self.tick);
        self.alloc.create_context(&mut self.mem, ctx)?;
        self.sessions.push(Session {
            ctx,
            name: name.to_string(),
            audit: Vec::new(),
            violations: 0,
        });
        self.sync_events();
        Ok(id)
    }

    pub fn session(&self, id: SessionId) -> &Session {
        &self.sessions[id.0 as usize]
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub(crate) fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.alloc.set_tick(self.tick);
        self.tick
    }

    // ---- ground truth (harness side) -------------------------------------

    fn oracle(&self) {
        self.oracle_reads.set(self.oracle_reads.get() + 1);
    }

    /// Number of ground-truth accessor calls so far.
    pub fn oracle_reads(&self) -> u64 {
        self.oracle_reads.get()
    }

    pub fn memory(&self) -> &DeviceMemory {
        self.oracle();
        &self.mem
    }

    pub fn allocator(&self) -> &UvmAllocator {
        self.oracle();
        &self.alloc
    }

    pub fn driver(&self) -> &HostDriver {
        self.oracle();
        &self.driver
    }

    pub fn driver_mut(&mut self) -> &mut HostDriver {
        self.oracle();
        &mut self.driver
    }

    pub fn tlb(&self) -> &Tlb {
        self.oracle();
        &self.tlb
    }

    /// Page-table walk for `ctx`/`va` that bypasses (and does not fill) the TLB.
    pub fn walk_oracle(&self, ctx: CtxId, va: VirtAddr) -> Result<Mapping, TranslateError> {
        self.oracle();
        let pd0 = self.alloc.pd0_entry(ctx, va).ok_or(TranslateError::NoDirectory(va))?;
        walk(&self.mem, pd0, va)
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    /// Latency trace assembled from all sessions' audit logs, in tick order.
    pub fn latency_trace(&self) -> Vec<LatencyRecord> {
        let mut v: Vec<LatencyRecord> = self
            .sessions
            .iter()
            .flat_map(|s| {
                s.audit.iter().map(move |a| LatencyRecord {
                    tick: a.tick,
                    ctx: s.ctx.0,
                    op: a.op,
                    latency: a.latency,
                })
            })
            .collect();
        v.sort_by_key(|r| r.tick);
        v
    }

    // ---- internal plumbing used by the guest API --------------------------

    pub(crate) fn push_event(&mut self, event: &str, ctx: CtxId, frame: Option<u64>, detail: String) {
        if self.cfg.record_events {
            self.events.push(SimEvent {
                tick: self.tick,
                event: event.to_string(),
                ctx: ctx.0,
                frame,
                detail,
            });
        }
    }

    /// Pulls allocator events into the simulator log and applies pending
    /// TLB shootdowns.
    pub(crate) fn sync_events(&mut self) {
        for (ctx, slot) in self.alloc.take_invalidations() {
            self.tlb.invalidate_slot(ctx, slot);
        }
        let all = self.alloc.events();
        if self.cfg.record_events {
            for e in &all[self.alloc_events_seen..] {
                self.events.push(SimEvent {
                    tick: e.tick,
                    event: e.event.clone(),
                    ctx: e.ctx,
                    frame: e.frame,
                    detail: e.detail.clone(),
                });
            }
        }
        self.alloc_events_seen = all.len();
    }

    pub(crate) fn translate(&mut self, ctx: CtxId, va: VirtAddr) -> Result<(Mapping, TranslationSource), TranslateError> {
        if let Some(m) = self.tlb.lookup(ctx, va) {
            return Ok((m, TranslationSource::Tlb));
        }
        let pd0 = self.alloc.pd0_entry(ctx, va).ok_or(TranslateError::NoDirectory(va))?;
        let m = walk(&self.mem, pd0, va)?;
        self.tlb.insert(ctx, va, m);
        Ok((m, TranslationSource::Walk))
    }

    /// Translation that faults own non-resident pages in.
    pub(crate) fn translate_faulting(&mut self, ctx: CtxId, va: VirtAddr, rep: &mut EvictionReport) -> Result<Mapping, SimError> {
        match self.translate(ctx, va) {
            Ok((m, _)) => Ok(m),
            Err(TranslateError::Memory(e)) => Err(e.into()),
            Err(e) => {
                if self.alloc.allocation_of(ctx, va).is_none() {
                    return Err(e.into());
                }
                let r = self.alloc.gpu_touch(&mut self.mem, ctx, va, 1)?;
                rep.evictions += r.evictions;
                rep.pt_regions_created += r.pt_regions_created;
                rep.frames_materialized += r.frames_materialized;
                self.sync_events();
                Ok(self.translate(ctx, va)?.0)
            }
        }
    }

    fn target_read(&self, t: Target, buf: &mut [u8]) -> Result<(), SimError> {
        match t {
            Target::Vram(p) => self.mem.read_into(p, buf)?,
            Target::Host(h) => buf.copy_from_slice(&self.driver.host.dma_read(h, buf.len() as u64)?),
        }
        Ok(())
    }

    fn target_write(&mut self, t: Target, data: &[u8]) -> Result<(), SimError> {
        match t {
            Target::Vram(p) => self.mem.write_phys(p, data)?,
            Target::Host(h) => self.driver.host.dma_write(h, data)?,
        }
        Ok(())
    }

    /// GPU load of `buf.len()` bytes at `va`, page by page.
    pub(crate) fn gpu_read(&mut self, ctx: CtxId, va: VirtAddr, buf: &mut [u8], rep: &mut EvictionReport) -> Result<(), SimError> {
        let mut done = 0usize;
        while done < buf.len() {
            let cur = va.offset(done as u64);
            let m = self.translate_faulting(ctx, cur, rep)?;
            let page_left = m.size.bytes() - (cur.get() & (m.size.bytes() - 1));
            let n = (buf.len() - done).min(page_left as usize);
            self.target_read(m.resolve(cur), &mut buf[done..done + n])?;
            done += n;
        }
        Ok(())
    }

    pub(crate) fn gpu_write(&mut self, ctx: CtxId, va: VirtAddr, data: &[u8], rep: &mut EvictionReport) -> Result<(), SimError> {
        let mut done = 0usize;
        while done < data.len() {
            let cur = va.offset(done as u64);
            let m = self.translate_faulting(ctx, cur, rep)?;
            if m.read_only {
                return Err(SimError::ReadOnly(cur));
            }
            let page_left = m.size.bytes() - (cur.get() & (m.size.bytes() - 1));
            let n = (data.len() - done).min(page_left as usize);
            self.target_write(m.resolve(cur), &data[done..done + n])?;
            done += n;
        }
        Ok(())
    }

    pub(crate) fn record_driver(&mut self, ctx: CtxId, outcomes: &[ReceiveOutcome]) {
        for o in outcomes {
            if !matches!(o, ReceiveOutcome::Idle) {
                self.push_event("driver_receive", ctx, None, format!("{o:?}"));
            }
        }
    }

    /// Physical frame behind `va` according to the live page tables.
    pub fn resolve_oracle(&self, ctx: CtxId, va: VirtAddr) -> Option<Target> {
        self.walk_oracle(ctx, va).ok().map(|m| m.resolve(va))
    }

    pub fn page_size_of(&self, ctx: CtxId, va: VirtAddr) -> Option<PageSize> {
        self.walk_oracle(ctx, va).ok().map(|m| m.size)
    }

    pub fn read_host_oracle(&self, addr: HostAddr, len: u64) -> Result<Vec<u8>, MemError> {
        self.oracle();
        self.driver.host.cpu_read(addr, len)
    }

    pub fn read_phys_oracle(&self, addr: PhysAddr, len: u64) -> Result<Vec<u8>, MemError> {
        self.oracle();
        self.mem.read_phys(addr, len)
    }
}
