//! The confined interface an unprivileged GPU process gets.
//!
//! Every call is appended to the session's audit log with a digest of its
//! arguments and its modeled latency; the latency trace exported by the
//! simulator is built from these entries.

use crate::addr::{CtxId, VirtAddr, FRAME_SIZE};
use crate::device_memory::{BitFlipSite, DramGeometry, DramLocation, MemError};
use crate::page_table::{Target, TlbKey, TranslateError};
use crate::sim::{SessionId, SimError, Simulator};
use crate::uvm_allocator::{AllocError, EvictionReport};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use thiserror::Error;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GuestOp {
    Alloc,
    MallocPinned,
    Touch,
    CpuTouch,
    Free,
    Read,
    Write,
    Hammer,
    TlbThrash,
    MemGetInfo,
    AttributeQuery,
    YieldToDriver,
    DramLocate,
    DramGeometry,
    FaultProfile,
    GetEuid,
}

impl GuestOp {
    pub fn name(self) -> &'static str {
        match self {
            GuestOp::Alloc => "alloc",
            GuestOp::MallocPinned => "malloc_pinned",
            GuestOp::Touch => "touch",
            GuestOp::CpuTouch => "cpu_touch",
            GuestOp::Free => "free",
            GuestOp::Read => "read",
            GuestOp::Write => "write",
            GuestOp::Hammer => "hammer",
            GuestOp::TlbThrash => "tlb_thrash",
            GuestOp::MemGetInfo => "mem_get_info",
            GuestOp::AttributeQuery => "attribute_query",
            GuestOp::YieldToDriver => "yield",
            GuestOp::DramLocate => "dram_locate",
            GuestOp::DramGeometry => "dram_geometry",
            GuestOp::FaultProfile => "fault_profile",
            GuestOp::GetEuid => "geteuid",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub tick: u64,
    pub op: GuestOp,
    pub digest: u64,
    pub latency: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GuestError {
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Memory(#[from] MemError),
    #[error(transparent)]
    Translate(#[from] TranslateError),
    #[error("write to read-only mapping at {0}")]
    ReadOnly(VirtAddr),
    #[error("{op:?} on {va} which the session does not own")]
    AuditViolation { op: GuestOp, va: VirtAddr },
    #[error("TLB thrash needs {needed} distinct pages, got {given}")]
    ThrashTooSmall { given: usize, needed: usize },
}

impl From<SimError> for GuestError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Alloc(a) => GuestError::Alloc(a),
            SimError::Memory(m) => GuestError::Memory(m),
            SimError::Translate(t) => GuestError::Translate(t),
            SimError::ReadOnly(v) => GuestError::ReadOnly(v),
        }
    }
}

/// 64-bit FNV-1a over a sequence of words.
pub fn fnv_digest(words: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
    }
    h
}

/// A guest session bound to the simulator for the duration of a borrow.
pub struct Guest<'a> {
    sim: &'a mut Simulator,
    sid: SessionId,
}

impl<'a> Guest<'a> {
    pub fn new(sim: &'a mut Simulator, sid: SessionId) -> Self {
        Guest { sim, sid }
    }

    pub fn session_id(&self) -> SessionId {
        self.sid
    }

    fn ctx(&self) -> CtxId {
        self.sim.sessions[self.sid.0 as usize].ctx
    }

    fn audit(&mut self, op: GuestOp, args: &[u64], latency: u32) {
        let tick = self.sim.next_tick();
        let s = &mut self.sim.sessions[self.sid.0 as usize];
        s.audit.push(AuditEntry {
            tick,
            op,
            digest: fnv_digest(args),
            latency,
        });
    }

    fn finish(&mut self, op: GuestOp, args: &[u64], rep: &EvictionReport) -> u32 {
        self.sim.sync_events();
        let lat = self.sim.timing.latency(rep.evictions);
        self.audit(op, args, lat);
        lat
    }

    fn violation(&mut self, op: GuestOp, va: VirtAddr) -> GuestError {
        self.sim.sessions[self.sid.0 as usize].violations += 1;
        self.audit(op, &[u64::MAX, va.get()], 0);
        let ctx = self.ctx();
        self.sim.push_event("audit_violation", ctx, None, format!("{op:?} {va}"));
        GuestError::AuditViolation { op, va }
    }

    /// Reserves VA space; nothing is materialized until touched.
    pub fn alloc(&mut self, size: u64) -> Result<VirtAddr, GuestError> {
        let ctx = self.ctx();
        self.audit(GuestOp::Alloc, &[size], self.sim.config().timing.base);
        Ok(self.sim.alloc.uvm_alloc(ctx, size)?)
    }

    /// Allocates resident, non-evictable device memory.
    pub fn malloc_pinned(&mut self, size: u64) -> Result<VirtAddr, GuestError> {
        let ctx = self.ctx();
        self.sim.next_tick();
        let (va, rep) = self.sim.alloc.alloc_pinned(&mut self.sim.mem, ctx, size)?;
        self.finish(GuestOp::MallocPinned, &[size], &rep);
        Ok(va)
    }

    /// GPU touch of `va..va+len`; returns the modeled latency.
    pub fn timed_touch(&mut self, va: VirtAddr, len: u64) -> Result<u32, GuestError> {
        let ctx = self.ctx();
        self.sim.next_tick();
        let rep = self.sim.alloc.gpu_touch(&mut self.sim.mem, ctx, va, len)?;
        Ok(self.finish(GuestOp::Touch, &[va.get(), len], &rep))
    }

    /// CPU access to `va..va+len`, migrating the covered pages to host memory.
    pub fn cpu_touch(&mut self, va: VirtAddr, len: u64) -> Result<(), GuestError> {
        let ctx = self.ctx();
        self.sim.next_tick();
        let rep = self.sim.alloc.cpu_touch(&mut self.sim.mem, ctx, va, len)?;
        self.finish(GuestOp::CpuTouch, &[va.get(), len], &rep);
        Ok(())
    }

    pub fn free(&mut self, va: VirtAddr) -> Result<(), GuestError> {
        let ctx = self.ctx();
        self.sim.next_tick();
        self.sim.alloc.free(&mut self.sim.mem, ctx, va)?;
        self.finish(GuestOp::Free, &[va.get()], &EvictionReport::default());
        Ok(())
    }

    pub fn write_data(&mut self, va: VirtAddr, data: &[u8]) -> Result<u32, GuestError> {
        let ctx = self.ctx();
        let mut rep = EvictionReport::default();
        self.sim.next_tick();
        let r = self.sim.gpu_write(ctx, va, data, &mut rep);
        let lat = self.finish(GuestOp::Write, &[va.get(), data.len() as u64], &rep);
        r?;
        Ok(lat)
    }

    pub fn read_data(&mut self, va: VirtAddr, len: u64) -> Result<Vec<u8>, GuestError> {
        let ctx = self.ctx();
        let mut rep = EvictionReport::default();
        let mut buf = vec![0u8; len as usize];
        self.sim.next_tick();
        let r = self.sim.gpu_read(ctx, va, &mut buf, &mut rep);
        self.finish(GuestOp::Read, &[va.get(), len], &rep);
        r?;
        Ok(buf)
    }

    pub fn read_u64(&mut self, va: VirtAddr) -> Result<u64, GuestError> {
        let b = self.read_data(va, 8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn write_u64(&mut self, va: VirtAddr, v: u64) -> Result<(), GuestError> {
        self.write_data(va, &v.to_le_bytes()).map(|_| ())
    }

    /// One kernel launch loading a word from each address.
    pub fn read_u64s(&mut self, vas: &[VirtAddr]) -> Vec<Result<u64, GuestError>> {
        let ctx = self.ctx();
        let mut rep = EvictionReport::default();
        self.sim.next_tick();
        let out = vas
            .iter()
            .map(|&va| {
                let mut b = [0u8; 8];
                self.sim
                    .gpu_read(ctx, va, &mut b, &mut rep)
                    .map(|_| u64::from_le_bytes(b))
                    .map_err(GuestError::from)
            })
            .collect();
        let digest_args: Vec<u64> = vas.iter().map(|v| v.get()).collect();
        self.finish(GuestOp::Read, &digest_args, &rep);
        out
    }

    /// One kernel launch storing a word at each address.
    pub fn write_u64s(&mut self, writes: &[(VirtAddr, u64)]) -> Result<(), GuestError> {
        let ctx = self.ctx();
        let mut rep = EvictionReport::default();
        self.sim.next_tick();
        let mut first_err = None;
        for &(va, v) in writes {
            if let Err(e) = self.sim.gpu_write(ctx, va, &v.to_le_bytes(), &mut rep) {
                first_err.get_or_insert(e);
            }
        }
        let digest_args: Vec<u64> = writes.iter().flat_map(|(a, v)| [a.get(), *v]).collect();
        self.finish(GuestOp::Write, &digest_args, &rep);
        match first_err {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }

    /// Hammers the DRAM rows behind the given own addresses.
    pub fn hammer_own(&mut self, vas: &[VirtAddr]) -> Result<usize, GuestError> {
        let ctx = self.ctx();
        for &va in vas {
            if self.sim.alloc.allocation_of(ctx, va).is_none() {
                return Err(self.violation(GuestOp::Hammer, va));
            }
        }
        self.sim.next_tick();
        let mut rep = EvictionReport::default();
        let mut per_bank: BTreeMap<u32, BTreeSet<u64>> = BTreeMap::new();
        for &va in vas {
            let m = self.sim.translate_faulting(ctx, va, &mut rep)?;
            if let Target::Vram(p) = m.resolve(va) {
                let loc = self.sim.mem.geometry().locate(p);
                per_bank.entry(loc.bank).or_default().insert(loc.row);
            }
        }
        let mut flips = 0;
        for (bank, rows) in per_bank {
            let rows: Vec<u64> = rows.into_iter().collect();
            for f in self.sim.mem.hammer(bank, &rows) {
                flips += 1;
                self.sim.push_event(
                    "bit_flip",
                    ctx,
                    Some(f.addr.frame()),
                    format!("addr={} bit={} bank={} row={}", f.addr, f.bit, f.site.bank, f.site.victim_row),
                );
            }
        }
        let args: Vec<u64> = vas.iter().map(|v| v.get()).collect();
        self.finish(GuestOp::Hammer, &args, &rep);
        Ok(flips)
    }

    /// Touches one word in each page of `vas` so older TLB entries of this
    /// context fall out. A no-op when the TLB holds nothing for the context.
    pub fn tlb_thrash(&mut self, vas: &[VirtAddr]) -> Result<(), GuestError> {
        let ctx = self.ctx();
        let needed = self.sim.tlb.capacity();
        let distinct: HashSet<u64> = vas.iter().map(|v| v.get() / FRAME_SIZE).collect();
        if distinct.len() < needed {
            return Err(GuestError::ThrashTooSmall {
                given: distinct.len(),
                needed,
            });
        }
        self.sim.next_tick();
        let mut rep = EvictionReport::default();
        if !self.sim.tlb.entries_for(ctx).is_empty() {
            let mut swept = HashSet::new();
            for &va in vas {
                if let Ok(m) = self.sim.translate_faulting(ctx, va, &mut rep) {
                    swept.insert(TlbKey::new(ctx, m.size, va));
                }
            }
            for key in self.sim.tlb.entries_for(ctx) {
                if !swept.contains(&key) {
                    self.sim.tlb.remove(&key);
                }
            }
        }
        self.finish(GuestOp::TlbThrash, &[vas.len() as u64], &rep);
        Ok(())
    }

    /// Free device memory in bytes.
    pub fn mem_get_info(&mut self) -> u64 {
        let free = self.sim.alloc.mem_get_info();
        self.audit(GuestOp::MemGetInfo, &[], self.sim.config().timing.base);
        free
    }

    pub fn device_capacity(&self) -> u64 {
        self.sim.config().capacity
    }

    /// A device-attribute RPC; the GSP answers through the status queue.
    pub fn device_attribute_query(&mut self) -> bool {
        let ctx = self.ctx();
        let woke = self.sim.driver.gsp_produce(1, b"attr");
        if woke {
            self.sim.push_event("driver_wake", ctx, None, "after gsp message".into());
        }
        self.audit(GuestOp::AttributeQuery, &[], self.sim.config().timing.base);
        woke
    }

    /// Lets the host driver process its queue.
    pub fn yield_to_driver(&mut self) {
        let ctx = self.ctx();
        let outcomes = self.sim.driver.drain();
        self.sim.record_driver(ctx, &outcomes);
        self.audit(GuestOp::YieldToDriver, &[], self.sim.config().timing.base);
    }

    /// DRAM coordinates of an own address, as a reverse-engineered address
    /// mapping would provide.
    pub fn dram_locate(&mut self, va: VirtAddr) -> Result<DramLocation, GuestError> {
        let ctx = self.ctx();
        if self.sim.alloc.allocation_of(ctx, va).is_none() {
            return Err(self.violation(GuestOp::DramLocate, va));
        }
        self.sim.next_tick();
        let mut rep = EvictionReport::default();
        let m = self.sim.translate_faulting(ctx, va, &mut rep);
        self.finish(GuestOp::DramLocate, &[va.get()], &rep);
        match m?.resolve(va) {
            Target::Vram(p) => Ok(self.sim.mem.geometry().locate(p)),
            Target::Host(_) => Err(GuestError::Translate(TranslateError::Fault(va))),
        }
    }

    pub fn dram_geometry(&mut self) -> DramGeometry {
        self.audit(GuestOp::DramGeometry, &[], self.sim.config().timing.base);
        *self.sim.mem.geometry()
    }

    /// The device's profiled bit-flip sites.
    pub fn fault_profile(&mut self) -> Vec<BitFlipSite> {
        self.audit(GuestOp::FaultProfile, &[], self.sim.config().timing.base);
        self.sim.mem.sites()
    }

    pub fn geteuid(&mut self) -> u32 {
        self.audit(GuestOp::GetEuid, &[], self.sim.config().timing.base);
        self.sim.driver.euid()
    }

    pub fn tlb_capacity(&self) -> usize {
        self.sim.tlb.capacity()
    }

    pub fn audit_log(&self) -> &[AuditEntry] {
        &self.sim.sessions[self.sid.0 as usize].audit
    }
}

/// Flags latencies above `factor` times the running median.
#[derive(Debug, Clone)]
pub struct SpikeDetector {
    factor: f64,
    counts: BTreeMap<u32, u64>,
    n: u64,
}

impl SpikeDetector {
    pub fn new(factor: f64) -> Self {
        SpikeDetector {
            factor,
            counts: BTreeMap::new(),
            n: 0,
        }
    }

    pub fn median(&self) -> Option<u32> {
        if self.n == 0 {
            return None;
        }
        let mid = (self.n - 1) / 2;
        let mut seen = 0;
        for (&v, &c) in &self.counts {
            seen += c;
            if seen > mid {
                return Some(v);
            }
        }
        None
    }

    /// Classifies `latency` against the history, then records it.
    pub fn observe(&mut self, latency: u32) -> bool {
        let spike = match self.median() {
            Some(m) => latency as f64 > self.factor * m as f64,
            None => false,
        };
        if !spike {
            *self.counts.entry(latency).or_default() += 1;
            self.n += 1;
        }
        spike
    }

    /// Seeds the history with a baseline sample.
    pub fn prime(&mut self, latency: u32) {
        *self.counts.entry(latency).or_default() += 1;
        self.n += 1;
    }
}
