//! Driver-model UVM allocator.
//!
//! Lazily materializes pages on GPU touch, picks page sizes from the
//! allocation size, keeps all page-table bytes inside 2 MiB PT regions,
//! evicts least-recently-used pages to host memory when frames run out and
//! recycles freed frames in FIFO order.
//!
//! Free frames are queued three ways — single frames, fully free 64 KiB
//! chunks and fully free 2 MiB blocks — each in the order they became free.
//! Queue entries carry the stamp of the free that produced them and are
//! validated lazily, so a frame taken through one queue silently disappears
//! from the others.

use crate::addr::{
    div_ceil, CtxId, PageSize, PhysAddr, VirtAddr, BIG_PAGE, CHUNKS_PER_BLOCK, FRAMES_PER_BLOCK,
    FRAMES_PER_CHUNK, FRAME_SIZE, KIB, MEDIUM_PAGE, MIB, SMALL_PAGE,
};
use crate::device_memory::{DeviceMemory, FrameData, MemError};
use crate::lru::LruMap;
use crate::page_table::{
    encode_pte, encode_table_pointer, Pte, PD0_ENTRY_BYTES, PT4K_BYTES, PT64_BYTES, PT64_ENTRIES,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use thiserror::Error;

pub type AllocId = u64;
pub type GroupId = u32;
pub type RegionId = u32;

pub const PT_REGION_SIZE: u64 = BIG_PAGE;
/// PT-region bytes one touched 2 MiB+4 KiB allocation consumes: two PD0
/// entries and a 4 KiB table.
pub const TAIL_FILL_COST: u64 = 2 * PD0_ENTRY_BYTES + PT4K_BYTES;

const FREE: u32 = u32::MAX;
const PT_OWNER: u32 = u32::MAX - 1;
const CLAIMED: u32 = u32::MAX - 2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AllocatorConfig {
    /// Distance of the first PT region from the first data frame.
    pub region0_distance: u64,
    /// Bytes of a context's first region already used by upper directory levels.
    pub initial_fill: u64,
    pub va_base: u64,
    pub va_limit: u64,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        AllocatorConfig {
            region0_distance: 96 * MIB,
            initial_fill: 352 * KIB,
            va_base: 1 << 32,
            va_limit: 1 << 47,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocError {
    #[error("allocation size must be positive")]
    ZeroSize,
    #[error("virtual address space exhausted")]
    VaExhausted,
    #[error("{0} is not the start of a live allocation")]
    NotAllocated(VirtAddr),
    #[error("{0} was already freed")]
    DoubleFree(VirtAddr),
    #[error("range {va}+{len:#x} is not inside one allocation")]
    OutsideAllocation { va: VirtAddr, len: u64 },
    #[error("{0} has never been touched")]
    Untouched(VirtAddr),
    #[error("no evictable memory left")]
    OutOfMemory,
    #[error("unknown context {0}")]
    UnknownContext(CtxId),
    #[error("region-0 block is not free")]
    RegionPlacement,
    #[error(transparent)]
    Memory(#[from] MemError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableKind {
    Pd0,
    Pt64,
    Pt4k,
}

impl TableKind {
    fn idx(self) -> usize {
        self as usize
    }

    pub fn bytes(self) -> u64 {
        match self {
            TableKind::Pd0 => PD0_ENTRY_BYTES,
            TableKind::Pt64 => PT64_BYTES,
            TableKind::Pt4k => PT4K_BYTES,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableLoc {
    pub region: RegionId,
    pub offset: u64,
}

#[derive(Debug, Clone)]
struct Region {
    ctx: CtxId,
    block: u64,
    bottom: u64,
    top: u64,
    free: [Vec<u64>; 3],
}

impl Region {
    fn base(&self) -> PhysAddr {
        PhysAddr(self.block * BIG_PAGE)
    }

    /// Tries to place every table of `req` here; commits only if all fit.
    fn place(&mut self, req: &[TableKind]) -> Option<Vec<u64>> {
        let mut bottom = self.bottom;
        let mut top = self.top;
        let mut used = [0usize; 3];
        let mut out = Vec::with_capacity(req.len());
        for &k in req {
            let fl = &self.free[k.idx()];
            if used[k.idx()] < fl.len() {
                out.push(fl[fl.len() - 1 - used[k.idx()]]);
                used[k.idx()] += 1;
                continue;
            }
            match k {
                TableKind::Pd0 => {
                    top += PD0_ENTRY_BYTES;
                    out.push(PT_REGION_SIZE.checked_sub(top)?);
                }
                _ => {
                    bottom = bottom.next_multiple_of(k.bytes());
                    out.push(bottom);
                    bottom += k.bytes();
                }
            }
            if bottom + top > PT_REGION_SIZE {
                return None;
            }
        }
        for (i, fl) in self.free.iter_mut().enumerate() {
            fl.truncate(fl.len() - used[i]);
        }
        self.bottom = bottom;
        self.top = top;
        Some(out)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    Big,
    Chunk(u8),
    Page(u16),
}

impl Unit {
    fn frames(self) -> u64 {
        match self {
            Unit::Big => FRAMES_PER_BLOCK,
            Unit::Chunk(_) => FRAMES_PER_CHUNK,
            Unit::Page(_) => 1,
        }
    }

    fn offset(self) -> u64 {
        match self {
            Unit::Big => 0,
            Unit::Chunk(i) => i as u64 * MEDIUM_PAGE,
            Unit::Page(i) => i as u64 * SMALL_PAGE,
        }
    }

    fn size(self) -> PageSize {
        match self {
            Unit::Big => PageSize::Big,
            Unit::Chunk(_) => PageSize::Medium,
            Unit::Page(_) => PageSize::Small,
        }
    }

    fn level(self) -> Level {
        match self {
            Unit::Big => Level::Block,
            Unit::Chunk(_) => Level::Chunk,
            Unit::Page(_) => Level::Frame,
        }
    }
}

#[derive(Debug, Clone)]
struct Group {
    ctx: CtxId,
    slot: u64,
    unit: Unit,
    frame: u64,
    pinned: bool,
    alloc: Option<AllocId>,
}

impl Group {
    fn va(&self) -> VirtAddr {
        VirtAddr(self.slot * BIG_PAGE + self.unit.offset())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Res {
    Absent,
    Gpu(GroupId),
    Host,
}

#[derive(Debug, Clone)]
struct Paged {
    pt64: Option<TableLoc>,
    pt4k: Option<TableLoc>,
    chunks: [Res; 32],
    pages: BTreeMap<u16, Res>,
}

impl Paged {
    fn new() -> Self {
        Paged {
            pt64: None,
            pt4k: None,
            chunks: [Res::Absent; 32],
            pages: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
enum SlotState {
    Empty,
    Big(GroupId),
    BigHost,
    Paged(Box<Paged>),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Big,
    Medium,
    Small,
}

#[derive(Debug, Clone)]
struct Slot {
    pd0: Option<TableLoc>,
    kind: SlotKind,
    state: SlotState,
    splintered: bool,
    users: u32,
}

#[derive(Debug, Clone)]
struct Allocation {
    ctx: CtxId,
    va: VirtAddr,
    size: u64,
    packed: bool,
    touched: bool,
    pinned: bool,
    live: bool,
}

impl Allocation {
    fn end(&self) -> u64 {
        self.va.get() + self.size
    }

    fn slots(&self) -> std::ops::Range<u64> {
        self.va.get() / BIG_PAGE..div_ceil(self.end(), BIG_PAGE)
    }

    fn slot_kind(&self, slot: u64) -> SlotKind {
        if self.packed {
            return SlotKind::Medium;
        }
        let s0 = slot * BIG_PAGE;
        let covered = self.end().min(s0 + BIG_PAGE) - self.va.get().max(s0);
        if covered == BIG_PAGE || covered > MIB {
            SlotKind::Big
        } else if covered <= MEDIUM_PAGE {
            SlotKind::Small
        } else {
            SlotKind::Medium
        }
    }
}

#[derive(Debug, Clone, Default)]
struct VaSpace {
    next_slot: u64,
    small: Option<(u64, u64)>,
    slots: HashMap<u64, Slot>,
    allocs: BTreeMap<u64, AllocId>,
    freed: HashSet<u64>,
    regions: Vec<RegionId>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Level {
    Frame,
    Chunk,
    Block,
}

/// Outcome of servicing one touch.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionReport {
    pub evictions: u32,
    pub pt_regions_created: u32,
    pub frames_materialized: u64,
}

impl EvictionReport {
    pub fn evicted(&self) -> bool {
        self.evictions > 0
    }

    pub fn pt_region_created(&self) -> bool {
        self.pt_regions_created > 0
    }

    fn add(&mut self, o: EvictionReport) {
        self.evictions += o.evictions;
        self.pt_regions_created += o.pt_regions_created;
        self.frames_materialized += o.frames_materialized;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocEvent {
    pub tick: u64,
    pub event: String,
    pub ctx: u32,
    pub frame: Option<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub ctx: CtxId,
    pub va: VirtAddr,
    pub from: PageSize,
    pub to: PageSize,
    pub pages: u32,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameOwner {
    Free,
    PtRegion { ctx: CtxId, region: RegionId },
    Data { ctx: CtxId, va: VirtAddr, size: PageSize, pinned: bool, splintered: bool },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub total: u64,
    pub free: u64,
    pub data: u64,
    pub pt: u64,
    /// Frames worth of data held in host backing (not VRAM frames).
    pub host_backed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionInfo {
    pub id: RegionId,
    pub ctx: CtxId,
    pub base: PhysAddr,
    pub fill: u64,
    pub bottom: u64,
    pub top: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidentPage {
    pub ctx: CtxId,
    pub va: VirtAddr,
    pub size: PageSize,
    pub phys: PhysAddr,
}

/// PTE occupancy of the 64 KiB tables placed inside one region.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Density {
    pub tables: u64,
    pub valid: u64,
    pub slots: u64,
    pub full_minus_one: u64,
}

impl Density {
    pub fn fraction(&self) -> f64 {
        if self.slots == 0 {
            0.0
        } else {
            self.valid as f64 / self.slots as f64
        }
    }
}

/// Allocations of the 2 MiB+4 KiB pattern needed before the region holding
/// `current_fill` bytes is exhausted: the least `A` with
/// `current_fill + 4 KiB * (A + ceil(A / 128)) >= 2 MiB`.
pub fn allocations_to_next_pt_region(current_fill: u64) -> u64 {
    if current_fill >= PT_REGION_SIZE {
        return 0;
    }
    let cost = |a: u64| PT4K_BYTES * (a + div_ceil(a, 128));
    let (mut lo, mut hi) = (0u64, PT_REGION_SIZE / PT4K_BYTES);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if current_fill + cost(mid) >= PT_REGION_SIZE {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Aligned 16-page windows of a 4 KiB table that may be coalesced into a
/// 64 KiB page: every page resident, all from one allocation, and part of a
/// contiguous same-allocation run longer than 16 pages.
pub fn small_page_coalesce_windows(pages: &[(u16, AllocId)]) -> Vec<u8> {
    let mut sorted = pages.to_vec();
    sorted.sort_unstable();
    let mut run_len: HashMap<u16, u32> = HashMap::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[j].0 + 1 && sorted[j + 1].1 == sorted[i].1 {
            j += 1;
        }
        for k in i..=j {
            run_len.insert(sorted[k].0, (j - i + 1) as u32);
        }
        i = j + 1;
    }
    let owner: HashMap<u16, AllocId> = sorted.iter().copied().collect();
    let mut out = Vec::new();
    for w in 0..32u16 {
        let first = w * 16;
        let Some(&a) = owner.get(&first) else { continue };
        let full = (first..first + 16).all(|p| owner.get(&p) == Some(&a));
        if full && run_len.get(&first).copied().unwrap_or(0) > 16 {
            out.push(w as u8);
        }
    }
    out
}

/// The allocator. All mutating calls take the device memory so page-table
/// bytes are written where the walker will read them.
#[derive(Debug, Clone)]
pub struct UvmAllocator {
    cfg: AllocatorConfig,
    total_frames: u64,
    owner: Vec<u32>,
    stamp: Vec<u32>,
    chunk_free: Vec<u8>,
    chunk_stamp: Vec<u32>,
    chunk_fixed: Vec<u8>,
    block_free: Vec<u16>,
    block_stamp: Vec<u32>,
    block_fixed: Vec<u16>,
    frame_q: VecDeque<(u64, u32, u32)>,
    chunk_q: VecDeque<(u64, u32)>,
    block_q: VecDeque<(u64, u32)>,
    next_stamp: u32,
    free_count: u64,
    pt_count: u64,

    groups: Vec<Option<Group>>,
    free_groups: Vec<GroupId>,
    lru: LruMap<GroupId, ()>,
    protected: HashSet<GroupId>,

    regions: Vec<Region>,
    spaces: BTreeMap<CtxId, VaSpace>,
    allocs: Vec<Allocation>,
    backing: HashMap<(CtxId, u64), FrameData>,
    host_frames: u64,

    tick: u64,
    events: Vec<AllocEvent>,
    invalidations: Vec<(CtxId, u64)>,
}

impl UvmAllocator {
    pub fn new(capacity: u64, cfg: AllocatorConfig) -> Self {
        assert!(capacity % BIG_PAGE == 0 && capacity > 0);
        let total_frames = capacity / FRAME_SIZE;
        let chunks = total_frames / FRAMES_PER_CHUNK;
        let blocks = total_frames / FRAMES_PER_BLOCK;
        UvmAllocator {
            cfg,
            total_frames,
            owner: vec![FREE; total_frames as usize],
            stamp: vec![1; total_frames as usize],
            chunk_free: vec![FRAMES_PER_CHUNK as u8; chunks as usize],
            chunk_stamp: vec![1; chunks as usize],
            chunk_fixed: vec![0; chunks as usize],
            block_free: vec![FRAMES_PER_BLOCK as u16; blocks as usize],
            block_stamp: vec![1; blocks as usize],
            block_fixed: vec![0; blocks as usize],
            frame_q: VecDeque::from([(0, total_frames as u32, 1)]),
            chunk_q: (0..chunks).map(|c| (c, 1)).collect(),
            block_q: (0..blocks).map(|b| (b, 1)).collect(),
            next_stamp: 2,
            free_count: total_frames,
            pt_count: 0,
            groups: Vec::new(),
            free_groups: Vec::new(),
            lru: LruMap::new(),
            protected: HashSet::new(),
            regions: Vec::new(),
            spaces: BTreeMap::new(),
            allocs: Vec::new(),
            backing: HashMap::new(),
            host_frames: 0,
            tick: 0,
            events: Vec::new(),
            invalidations: Vec::new(),
        }
    }

    pub fn config(&self) -> &AllocatorConfig {
        &self.cfg
    }

    pub fn set_tick(&mut self, tick: u64) {
        self.tick = tick;
    }

    fn log(&mut self, event: &str, ctx: CtxId, frame: Option<u64>, detail: String) {
        self.events.push(AllocEvent {
            tick: self.tick,
            event: event.to_string(),
            ctx: ctx.0,
            frame,
            detail,
        });
    }

    pub fn events(&self) -> &[AllocEvent] {
        &self.events
    }

    pub fn take_invalidations(&mut self) -> Vec<(CtxId, u64)> {
        std::mem::take(&mut self.invalidations)
    }

    // ---- frame pool -------------------------------------------------------

    /// Bytes currently free.
    pub fn mem_get_info(&self) -> u64 {
        self.free_count * FRAME_SIZE
    }

    fn bump_stamp(&mut self) -> u32 {
        let s = self.next_stamp;
        self.next_stamp += 1;
        s
    }

    /// Returns frames to the pool; runs are pushed in ascending order.
    fn release_frames(&mut self, mut frames: Vec<(u64, u64)>) {
        frames.sort_unstable();
        let s = self.bump_stamp();
        for (first, count) in frames {
            for f in first..first + count {
                debug_assert_ne!(self.owner[f as usize], FREE);
                self.owner[f as usize] = FREE;
                self.stamp[f as usize] = s;
                self.free_count += 1;
                let c = (f / FRAMES_PER_CHUNK) as usize;
                self.chunk_free[c] += 1;
                if self.chunk_free[c] as u64 == FRAMES_PER_CHUNK {
                    self.chunk_stamp[c] = s;
                    self.chunk_q.push_back((c as u64, s));
                }
                let b = (f / FRAMES_PER_BLOCK) as usize;
                self.block_free[b] += 1;
                if self.block_free[b] as u64 == FRAMES_PER_BLOCK {
                    self.block_stamp[b] = s;
                    self.block_q.push_back((b as u64, s));
                }
            }
            match self.frame_q.back_mut() {
                Some(back) if back.2 == s && back.0 + back.1 as u64 == first => back.1 += count as u32,
                _ => self.frame_q.push_back((first, count as u32, s)),
            }
        }
    }

    fn claim(&mut self, first: u64, count: u64, owner: u32) {
        for f in first..first + count {
            debug_assert_eq!(self.owner[f as usize], FREE);
            self.owner[f as usize] = owner;
            self.stamp[f as usize] = 0;
            self.free_count -= 1;
            let c = (f / FRAMES_PER_CHUNK) as usize;
            self.chunk_free[c] -= 1;
            self.chunk_stamp[c] = 0;
            let b = (f / FRAMES_PER_BLOCK) as usize;
            self.block_free[b] -= 1;
            self.block_stamp[b] = 0;
        }
    }

    fn pop_free(&mut self, level: Level) -> Option<u64> {
        match level {
            Level::Block => {
                while let Some(&(b, s)) = self.block_q.front() {
                    self.block_q.pop_front();
                    if self.block_stamp[b as usize] == s && s != 0 {
                        return Some(b * FRAMES_PER_BLOCK);
                    }
                }
                None
            }
            Level::Chunk => {
                while let Some(&(c, s)) = self.chunk_q.front() {
                    self.chunk_q.pop_front();
                    if self.chunk_stamp[c as usize] == s && s != 0 {
                        return Some(c * FRAMES_PER_CHUNK);
                    }
                }
                None
            }
            Level::Frame => {
                while let Some(run) = self.frame_q.front_mut() {
                    while run.1 > 0 {
                        let f = run.0;
                        run.0 += 1;
                        run.1 -= 1;
                        if self.stamp[f as usize] == run.2 && self.owner[f as usize] == FREE {
                            if run.1 == 0 {
                                self.frame_q.pop_front();
                            }
                            return Some(f);
                        }
                    }
                    self.frame_q.pop_front();
                }
                None
            }
        }
    }

    fn level_frames(level: Level) -> u64 {
        match level {
            Level::Frame => 1,
            Level::Chunk => FRAMES_PER_CHUNK,
            Level::Block => FRAMES_PER_BLOCK,
        }
    }

    fn take(
        &mut self,
        mem: &mut DeviceMemory,
        level: Level,
        owner: u32,
    ) -> Result<(u64, u32), AllocError> {
        let mut evictions = 0;
        loop {
            if let Some(first) = self.pop_free(level) {
                self.claim(first, Self::level_frames(level), owner);
                return Ok((first, evictions));
            }
            evictions += self.evict_for(mem, level)?;
        }
    }

    // ---- eviction ---------------------------------------------------------

    fn container_evictable(&self, level: Level, frame: u64) -> Option<(u64, u64)> {
        let (first, n) = match level {
            Level::Frame => return None,
            Level::Chunk => {
                let c = frame / FRAMES_PER_CHUNK;
                if self.chunk_fixed[c as usize] != 0 {
                    return None;
                }
                (c * FRAMES_PER_CHUNK, FRAMES_PER_CHUNK)
            }
            Level::Block => {
                let b = frame / FRAMES_PER_BLOCK;
                if self.block_fixed[b as usize] != 0 {
                    return None;
                }
                (b * FRAMES_PER_BLOCK, FRAMES_PER_BLOCK)
            }
        };
        Some((first, n))
    }

    /// Evicts the least recently used group whose containing `level` unit
    /// holds only evictable data, along with everything else in that unit.
    fn evict_for(&mut self, mem: &mut DeviceMemory, level: Level) -> Result<u32, AllocError> {
        let mut chosen: Option<Vec<GroupId>> = None;
        for (&g, _) in self.lru.iter() {
            if self.protected.contains(&g) {
                continue;
            }
            let grp = self.groups[g as usize].as_ref().expect("group in lru");
            if level == Level::Frame {
                chosen = Some(vec![g]);
                break;
            }
            let Some((first, n)) = self.container_evictable(level, grp.frame) else {
                continue;
            };
            let mut members = Vec::new();
            let mut ok = true;
            let mut f = first;
            while f < first + n {
                let o = self.owner[f as usize];
                if o == FREE {
                    f += 1;
                    continue;
                }
                if o == PT_OWNER || o == CLAIMED || self.protected.contains(&o) {
                    ok = false;
                    break;
                }
                let og = self.groups[o as usize].as_ref().expect("owner group");
                if og.pinned {
                    ok = false;
                    break;
                }
                members.push(o);
                f = og.frame + og.unit.frames();
            }
            if ok {
                members.dedup();
                chosen = Some(members);
                break;
            }
        }
        let members = chosen.ok_or(AllocError::OutOfMemory)?;
        let n = members.len() as u32;
        for g in members {
            self.evict_group(mem, g);
        }
        Ok(n)
    }

    fn evict_group(&mut self, mem: &mut DeviceMemory, g: GroupId) {
        let grp = self.groups[g as usize].clone().expect("live group");
        self.stash(mem, &grp);
        self.clear_pte(mem, &grp);
        self.set_res(grp.ctx, grp.slot, grp.unit, Res::Host);
        self.drop_group(g);
        self.release_frames(vec![(grp.frame, grp.unit.frames())]);
        self.invalidations.push((grp.ctx, grp.slot));
        self.log(
            "evict",
            grp.ctx,
            Some(grp.frame),
            format!("va={} size={:?}", grp.va(), grp.unit.size()),
        );
    }

    /// Copies a group's frames into host backing, leaving them zero.
    fn stash(&mut self, mem: &mut DeviceMemory, grp: &Group) {
        let va_frame = grp.va().get() / FRAME_SIZE;
        for i in 0..grp.unit.frames() {
            if let Some(d) = mem.take_frame(grp.frame + i) {
                self.backing.insert((grp.ctx, va_frame + i), d);
            }
        }
        self.host_frames += grp.unit.frames();
    }

    fn unstash(&mut self, mem: &mut DeviceMemory, ctx: CtxId, va: VirtAddr, frame: u64, n: u64) {
        let va_frame = va.get() / FRAME_SIZE;
        for i in 0..n {
            if let Some(d) = self.backing.remove(&(ctx, va_frame + i)) {
                mem.put_frame(frame + i, d);
            }
        }
        self.host_frames -= n;
    }

    fn drop_backing(&mut self, ctx: CtxId, va: VirtAddr, n: u64) {
        let va_frame = va.get() / FRAME_SIZE;
        for i in 0..n {
            self.backing.remove(&(ctx, va_frame + i));
        }
        self.host_frames -= n;
    }

    // ---- groups -----------------------------------------------------------

    fn new_group(&mut self, grp: Group) -> GroupId {
        let g = match self.free_groups.pop() {
            Some(g) => {
                self.groups[g as usize] = Some(grp);
                g
            }
            None => {
                self.groups.push(Some(grp));
                (self.groups.len() - 1) as GroupId
            }
        };
        let grp = self.groups[g as usize].as_ref().unwrap();
        let (first, n, pinned) = (grp.frame, grp.unit.frames(), grp.pinned);
        for f in first..first + n {
            self.owner[f as usize] = g;
        }
        if pinned {
            self.fix_frames(first, n, true);
        } else {
            self.lru.insert(g, ());
        }
        g
    }

    fn drop_group(&mut self, g: GroupId) {
        let grp = self.groups[g as usize].take().expect("live group");
        if grp.pinned {
            self.fix_frames(grp.frame, grp.unit.frames(), false);
        }
        self.lru.remove(&g);
        self.protected.remove(&g);
        self.free_groups.push(g);
    }

    fn fix_frames(&mut self, first: u64, n: u64, on: bool) {
        for f in first..first + n {
            let c = (f / FRAMES_PER_CHUNK) as usize;
            let b = (f / FRAMES_PER_BLOCK) as usize;
            if on {
                self.chunk_fixed[c] += 1;
                self.block_fixed[b] += 1;
            } else {
                self.chunk_fixed[c] -= 1;
                self.block_fixed[b] -= 1;
            }
        }
    }

    // ---- PT regions -------------------------------------------------------

    pub fn create_context(&mut self, mem: &mut DeviceMemory, ctx: CtxId) -> Result<EvictionReport, AllocError> {
        if self.spaces.contains_key(&ctx) {
            return Ok(EvictionReport::default());
        }
        self.spaces.insert(
            ctx,
            VaSpace {
                next_slot: self.cfg.va_base / BIG_PAGE,
                ..Default::default()
            },
        );
        let (_, rep) = self.create_region(mem, ctx)?;
        Ok(rep)
    }

    fn space(&self, ctx: CtxId) -> Result<&VaSpace, AllocError> {
        self.spaces.get(&ctx).ok_or(AllocError::UnknownContext(ctx))
    }

    fn space_mut(&mut self, ctx: CtxId) -> Result<&mut VaSpace, AllocError> {
        self.spaces.get_mut(&ctx).ok_or(AllocError::UnknownContext(ctx))
    }

    fn create_region(&mut self, mem: &mut DeviceMemory, ctx: CtxId) -> Result<(RegionId, EvictionReport), AllocError> {
        let mut rep = EvictionReport::default();
        let first = if self.regions.is_empty() {
            // Small devices put the first region mid-memory instead.
            let b = (self.cfg.region0_distance / BIG_PAGE).min(self.block_free.len() as u64 / 2);
            if b as usize >= self.block_free.len() || self.block_free[b as usize] as u64 != FRAMES_PER_BLOCK {
                return Err(AllocError::RegionPlacement);
            }
            self.claim(b * FRAMES_PER_BLOCK, FRAMES_PER_BLOCK, PT_OWNER);
            b * FRAMES_PER_BLOCK
        } else {
            let (f, ev) = self.take(mem, Level::Block, PT_OWNER)?;
            rep.evictions += ev;
            f
        };
        mem.zero_frames(first, FRAMES_PER_BLOCK)?;
        self.fix_frames(first, FRAMES_PER_BLOCK, true);
        self.pt_count += FRAMES_PER_BLOCK;
        let id = self.regions.len() as RegionId;
        let space = self.space_mut(ctx)?;
        let initial = if space.regions.is_empty() { 0 } else { 1 };
        space.regions.push(id);
        let bottom = if initial == 0 { self.cfg.initial_fill } else { 0 };
        self.regions.push(Region {
            ctx,
            block: first / FRAMES_PER_BLOCK,
            bottom,
            top: 0,
            free: Default::default(),
        });
        rep.pt_regions_created += 1;
        self.log(
            "pt_region",
            ctx,
            Some(first),
            format!("region={id} base={}", PhysAddr::from_frame(first)),
        );
        Ok((id, rep))
    }

    /// Places a set of tables in one region of `ctx`, newest region first,
    /// creating a new region if none can hold all of them.
    fn place_tables(
        &mut self,
        mem: &mut DeviceMemory,
        ctx: CtxId,
        req: &[TableKind],
    ) -> Result<(Vec<TableLoc>, EvictionReport), AllocError> {
        let mut rep = EvictionReport::default();
        if req.is_empty() {
            return Ok((Vec::new(), rep));
        }
        let ids: Vec<RegionId> = self.space(ctx)?.regions.iter().rev().copied().collect();
        // Free slots in any region first, then the newest region's cursor.
        for &id in &ids {
            let r = &mut self.regions[id as usize];
            let has_free = req.iter().all(|k| !r.free[k.idx()].is_empty());
            if has_free || id == ids[0] {
                if let Some(offs) = r.place(req) {
                    return Ok((offs.into_iter().map(|offset| TableLoc { region: id, offset }).collect(), rep));
                }
            }
        }
        let (id, r) = self.create_region(mem, ctx)?;
        rep.add(r);
        let offs = self.regions[id as usize].place(req).ok_or(AllocError::OutOfMemory)?;
        Ok((offs.into_iter().map(|offset| TableLoc { region: id, offset }).collect(), rep))
    }

    pub fn table_addr(&self, loc: TableLoc) -> PhysAddr {
        self.regions[loc.region as usize].base().offset(loc.offset)
    }

    fn release_table(&mut self, mem: &mut DeviceMemory, kind: TableKind, loc: TableLoc) -> Result<(), AllocError> {
        mem.zero_range(self.table_addr(loc), kind.bytes())?;
        self.regions[loc.region as usize].free[kind.idx()].push(loc.offset);
        Ok(())
    }

    // ---- VA management ----------------------------------------------------

    pub fn uvm_alloc(&mut self, ctx: CtxId, size: u64) -> Result<VirtAddr, AllocError> {
        self.reserve(ctx, size, false)
    }

    fn reserve(&mut self, ctx: CtxId, size: u64, pinned: bool) -> Result<VirtAddr, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let limit = self.cfg.va_limit / BIG_PAGE;
        let id = self.allocs.len() as AllocId;
        let space = self.space_mut(ctx)?;
        let packed = size < MIB;
        let va = if packed {
            let rsize = size.next_multiple_of(MEDIUM_PAGE);
            match space.small {
                Some((slot, used)) if used + rsize <= BIG_PAGE => {
                    space.small = Some((slot, used + rsize));
                    VirtAddr(slot * BIG_PAGE + used)
                }
                _ => {
                    if space.next_slot + 1 > limit {
                        return Err(AllocError::VaExhausted);
                    }
                    let slot = space.next_slot;
                    space.next_slot += 1;
                    space.small = Some((slot, rsize));
                    VirtAddr(slot * BIG_PAGE)
                }
            }
        } else {
            let n = div_ceil(size, BIG_PAGE);
            if space.next_slot + n > limit {
                return Err(AllocError::VaExhausted);
            }
            let va = VirtAddr(space.next_slot * BIG_PAGE);
            space.next_slot += n;
            va
        };
        space.allocs.insert(va.get(), id);
        let a = Allocation {
            ctx,
            va,
            size,
            packed,
            touched: false,
            pinned,
            live: true,
        };
        for slot in a.slots() {
            let kind = a.slot_kind(slot);
            let s = space.slots.entry(slot).or_insert(Slot {
                pd0: None,
                kind,
                state: SlotState::Empty,
                splintered: false,
                users: 0,
            });
            s.users += 1;
        }
        self.allocs.push(a);
        Ok(va)
    }

    fn find_alloc(&self, ctx: CtxId, va: VirtAddr, len: u64) -> Result<AllocId, AllocError> {
        let space = self.space(ctx)?;
        let (_, &id) = space
            .allocs
            .range(..=va.get())
            .next_back()
            .ok_or(AllocError::OutsideAllocation { va, len })?;
        let a = &self.allocs[id as usize];
        if va.get() + len.max(1) > a.end() {
            return Err(AllocError::OutsideAllocation { va, len });
        }
        Ok(id)
    }

    /// Allocation containing `va`, if any.
    pub fn allocation_of(&self, ctx: CtxId, va: VirtAddr) -> Option<(VirtAddr, u64)> {
        let id = self.find_alloc(ctx, va, 1).ok()?;
        let a = &self.allocs[id as usize];
        Some((a.va, a.size))
    }

    fn slot(&self, ctx: CtxId, slot: u64) -> &Slot {
        &self.spaces[&ctx].slots[&slot]
    }

    fn slot_mut(&mut self, ctx: CtxId, slot: u64) -> &mut Slot {
        self.spaces.get_mut(&ctx).unwrap().slots.get_mut(&slot).unwrap()
    }

    fn set_res(&mut self, ctx: CtxId, slot: u64, unit: Unit, r: Res) {
        let s = self.slot_mut(ctx, slot);
        match (unit, &mut s.state) {
            (Unit::Big, st) => {
                *st = match r {
                    Res::Gpu(g) => SlotState::Big(g),
                    Res::Host => SlotState::BigHost,
                    Res::Absent => SlotState::Empty,
                }
            }
            (Unit::Chunk(i), SlotState::Paged(p)) => p.chunks[i as usize] = r,
            (Unit::Page(i), SlotState::Paged(p)) => {
                if r == Res::Absent {
                    p.pages.remove(&i);
                } else {
                    p.pages.insert(i, r);
                }
            }
            _ => unreachable!("unit/state mismatch"),
        }
    }

    /// PD0 entry of the slot covering `va`, for the walker.
    pub fn pd0_entry(&self, ctx: CtxId, va: VirtAddr) -> Option<PhysAddr> {
        let s = self.spaces.get(&ctx)?.slots.get(&(va.get() / BIG_PAGE))?;
        s.pd0.map(|l| self.table_addr(l))
    }

    // ---- PTE writes -------------------------------------------------------

    fn write_leaf(&self, mem: &mut DeviceMemory, ctx: CtxId, slot: u64, unit: Unit, frame: u64) -> Result<(), AllocError> {
        let raw = encode_pte(&Pte::vram(PhysAddr::from_frame(frame))).expect("pfn fits");
        let addr = self.leaf_addr(ctx, slot, unit);
        mem.write_u64(addr, raw)?;
        Ok(())
    }

    fn leaf_addr(&self, ctx: CtxId, slot: u64, unit: Unit) -> PhysAddr {
        let s = self.slot(ctx, slot);
        match (unit, &s.state) {
            (Unit::Big, _) => self.table_addr(s.pd0.expect("pd0 reserved")),
            (Unit::Chunk(i), SlotState::Paged(p)) => self.table_addr(p.pt64.expect("pt64")).offset(i as u64 * 8),
            (Unit::Page(i), SlotState::Paged(p)) => self.table_addr(p.pt4k.expect("pt4k")).offset(i as u64 * 8),
            _ => unreachable!("unit/state mismatch"),
        }
    }

    fn clear_pte(&self, mem: &mut DeviceMemory, grp: &Group) {
        let addr = self.leaf_addr(grp.ctx, grp.slot, grp.unit);
        mem.write_u64(addr, 0).expect("pt inside memory");
    }

    // ---- touch ------------------------------------------------------------

    fn units_in(&self, ctx: CtxId, slot: u64, start: u64, end: u64) -> Vec<Unit> {
        let s = self.slot(ctx, slot);
        let s0 = slot * BIG_PAGE;
        let lo = start.max(s0) - s0;
        let hi = end.min(s0 + BIG_PAGE) - s0;
        let chunked = matches!(s.kind, SlotKind::Medium) || (s.kind == SlotKind::Big && matches!(s.state, SlotState::Paged(_)));
        match s.kind {
            _ if chunked => (lo / MEDIUM_PAGE..div_ceil(hi, MEDIUM_PAGE)).map(|i| Unit::Chunk(i as u8)).collect(),
            SlotKind::Big => vec![Unit::Big],
            SlotKind::Small => {
                let mut v = Vec::new();
                let mut p = lo / SMALL_PAGE;
                while p < div_ceil(hi, SMALL_PAGE) {
                    let coalesced = matches!(&s.state, SlotState::Paged(pg) if pg.chunks[(p / 16) as usize] != Res::Absent);
                    if coalesced {
                        v.push(Unit::Chunk((p / 16) as u8));
                        p = (p / 16 + 1) * 16;
                    } else {
                        v.push(Unit::Page(p as u16));
                        p += 1;
                    }
                }
                v
            }
            SlotKind::Medium => unreachable!(),
        }
    }

    fn res_of(&self, ctx: CtxId, slot: u64, unit: Unit) -> Res {
        match (&self.slot(ctx, slot).state, unit) {
            (SlotState::Empty, _) => Res::Absent,
            (SlotState::Big(g), _) => Res::Gpu(*g),
            (SlotState::BigHost, _) => Res::Host,
            (SlotState::Paged(p), Unit::Chunk(i)) => p.chunks[i as usize],
            (SlotState::Paged(p), Unit::Page(i)) => p.pages.get(&i).copied().unwrap_or(Res::Absent),
            (SlotState::Paged(_), Unit::Big) => Res::Absent,
        }
    }

    /// GPU access to `va..va+len`: materializes, migrates back or refreshes
    /// every covered page.
    pub fn gpu_touch(&mut self, mem: &mut DeviceMemory, ctx: CtxId, va: VirtAddr, len: u64) -> Result<EvictionReport, AllocError> {
        let id = self.find_alloc(ctx, va, len)?;
        self.touch_alloc(mem, id, va.get(), va.get() + len.max(1))
    }

    fn touch_alloc(&mut self, mem: &mut DeviceMemory, id: AllocId, start: u64, end: u64) -> Result<EvictionReport, AllocError> {
        let mut rep = EvictionReport::default();
        let a = self.allocs[id as usize].clone();
        let ctx = a.ctx;
        let slots: Vec<u64> = (start / BIG_PAGE..div_ceil(end, BIG_PAGE)).collect();

        // Tables first: PD0 entries for the whole allocation on first touch,
        // last-level tables for the slots about to gain small pages.
        let mut req = Vec::new();
        let mut req_slots: Vec<(u64, TableKind)> = Vec::new();
        let pd0_slots: Vec<u64> = if a.touched { slots.clone() } else { a.slots().collect() };
        for &slot in &pd0_slots {
            if self.slot(ctx, slot).pd0.is_none() {
                req.push(TableKind::Pd0);
                req_slots.push((slot, TableKind::Pd0));
            }
        }
        for &slot in &slots {
            let units = self.units_in(ctx, slot, start, end);
            let s = self.slot(ctx, slot);
            let (has64, has4k) = match &s.state {
                SlotState::Paged(p) => (p.pt64.is_some(), p.pt4k.is_some()),
                _ => (false, false),
            };
            let wants64 = units.iter().any(|u| matches!(u, Unit::Chunk(_)) && !matches!(self.res_of(ctx, slot, *u), Res::Gpu(_)));
            let wants4k = units.iter().any(|u| matches!(u, Unit::Page(_)) && !matches!(self.res_of(ctx, slot, *u), Res::Gpu(_)));
            if wants64 && !has64 {
                req.push(TableKind::Pt64);
                req_slots.push((slot, TableKind::Pt64));
            }
            if wants4k && !has4k {
                req.push(TableKind::Pt4k);
                req_slots.push((slot, TableKind::Pt4k));
            }
        }
        let (locs, r) = self.place_tables(mem, ctx, &req)?;
        rep.add(r);
        for ((slot, kind), loc) in req_slots.into_iter().zip(locs) {
            self.install_table(mem, ctx, slot, kind, loc)?;
        }
        self.allocs[id as usize].touched = true;

        let mut materialized = 0u64;
        for &slot in &slots {
            for unit in self.units_in(ctx, slot, start, end) {
                match self.res_of(ctx, slot, unit) {
                    Res::Gpu(g) => {
                        self.lru.touch(&g);
                    }
                    res => {
                        let (frame, ev) = self.take(mem, unit.level(), CLAIMED)?;
                        rep.evictions += ev;
                        // take() may have evicted other units of this slot;
                        // our unit was not resident so its state is unchanged.
                        let va_u = VirtAddr(slot * BIG_PAGE + unit.offset());
                        if res == Res::Host {
                            self.unstash(mem, ctx, va_u, frame, unit.frames());
                            self.log("to_gpu", ctx, Some(frame), format!("va={va_u} size={:?}", unit.size()));
                        }
                        let g = self.new_group(Group {
                            ctx,
                            slot,
                            unit,
                            frame,
                            pinned: a.pinned,
                            alloc: Some(id),
                        });
                        self.set_res(ctx, slot, unit, Res::Gpu(g));
                        self.write_leaf(mem, ctx, slot, unit, frame)?;
                        materialized += unit.frames();
                    }
                }
            }
        }
        rep.frames_materialized = materialized;
        if materialized > 0 {
            self.log(
                "materialize",
                ctx,
                None,
                format!("va={} frames={materialized} evictions={}", VirtAddr(start), rep.evictions),
            );
        }
        for &slot in &slots {
            self.invalidations.push((ctx, slot));
        }
        self.merge_slots(mem, ctx, &slots)?;
        Ok(rep)
    }

    fn install_table(&mut self, mem: &mut DeviceMemory, ctx: CtxId, slot: u64, kind: TableKind, loc: TableLoc) -> Result<(), AllocError> {
        let addr = self.table_addr(loc);
        mem.zero_range(addr, kind.bytes())?;
        match kind {
            TableKind::Pd0 => {
                self.slot_mut(ctx, slot).pd0 = Some(loc);
            }
            TableKind::Pt64 | TableKind::Pt4k => {
                let pd0 = self.slot(ctx, slot).pd0.expect("pd0 before pt");
                let pd0_addr = self.table_addr(pd0);
                let s = self.slot_mut(ctx, slot);
                if !matches!(s.state, SlotState::Paged(_)) {
                    s.state = SlotState::Paged(Box::new(Paged::new()));
                }
                let SlotState::Paged(p) = &mut s.state else { unreachable!() };
                if kind == TableKind::Pt64 {
                    p.pt64 = Some(loc);
                    mem.write_u64(pd0_addr, encode_table_pointer(addr))?;
                } else {
                    p.pt4k = Some(loc);
                    mem.write_u64(pd0_addr.offset(8), encode_table_pointer(addr))?;
                }
            }
        }
        Ok(())
    }

    /// Allocates and immediately materializes non-evictable memory.
    pub fn alloc_pinned(&mut self, mem: &mut DeviceMemory, ctx: CtxId, size: u64) -> Result<(VirtAddr, EvictionReport), AllocError> {
        let va = self.reserve(ctx, size, true)?;
        let id = self.find_alloc(ctx, va, size)?;
        let rep = self.touch_alloc(mem, id, va.get(), va.get() + size)?;
        Ok((va, rep))
    }

    // ---- CPU touch --------------------------------------------------------

    /// CPU access: migrates the covered 64 KiB slices (or whole pages) to host.
    pub fn cpu_touch(&mut self, mem: &mut DeviceMemory, ctx: CtxId, va: VirtAddr, len: u64) -> Result<EvictionReport, AllocError> {
        let id = self.find_alloc(ctx, va, len)?;
        let (start, end) = (va.get(), va.get() + len.max(1));
        let mut rep = EvictionReport::default();
        let mut any = false;
        for slot in start / BIG_PAGE..div_ceil(end, BIG_PAGE) {
            let s0 = slot * BIG_PAGE;
            let whole = start <= s0 && end >= s0 + BIG_PAGE;
            match self.slot(ctx, slot).state.clone() {
                SlotState::Empty => continue,
                SlotState::BigHost => {
                    any = true;
                    continue;
                }
                SlotState::Big(g) => {
                    any = true;
                    if whole {
                        self.migrate_out(mem, g);
                        continue;
                    }
                    if self.groups[g as usize].as_ref().unwrap().pinned {
                        continue;
                    }
                    rep.add(self.splinter(mem, ctx, slot, g, Some(id))?);
                }
                SlotState::Paged(_) => {}
            }
            for unit in self.units_in(ctx, slot, start, end) {
                match self.res_of(ctx, slot, unit) {
                    Res::Gpu(g) => {
                        any = true;
                        if !self.groups[g as usize].as_ref().unwrap().pinned {
                            self.migrate_out(mem, g);
                        }
                    }
                    Res::Host => any = true,
                    Res::Absent => {}
                }
            }
        }
        if !any {
            return Err(AllocError::Untouched(va));
        }
        Ok(rep)
    }

    fn migrate_out(&mut self, mem: &mut DeviceMemory, g: GroupId) {
        let grp = self.groups[g as usize].clone().expect("live group");
        self.stash(mem, &grp);
        self.clear_pte(mem, &grp);
        self.set_res(grp.ctx, grp.slot, grp.unit, Res::Host);
        self.drop_group(g);
        self.release_frames(vec![(grp.frame, grp.unit.frames())]);
        self.invalidations.push((grp.ctx, grp.slot));
        self.log("to_host", grp.ctx, Some(grp.frame), format!("va={} size={:?}", grp.va(), grp.unit.size()));
    }

    /// Rewrites a resident 2 MiB page as 32 resident 64 KiB pages backed by
    /// a new 256-byte table. The chunks take the big page's LRU position.
    fn splinter(&mut self, mem: &mut DeviceMemory, ctx: CtxId, slot: u64, g: GroupId, _by: Option<AllocId>) -> Result<EvictionReport, AllocError> {
        self.protected.insert(g);
        let placed = self.place_tables(mem, ctx, &[TableKind::Pt64]);
        self.protected.remove(&g);
        let (locs, rep) = placed?;
        let big = self.groups[g as usize].clone().expect("live group");
        let loc = locs[0];
        let table = self.table_addr(loc);
        mem.zero_range(table, PT64_BYTES)?;
        let mut paged = Paged::new();
        paged.pt64 = Some(loc);
        let s = self.slot_mut(ctx, slot);
        s.state = SlotState::Paged(Box::new(paged));
        s.splintered = true;
        let mut chunk_groups = Vec::with_capacity(32);
        let ids: Vec<GroupId> = (0..CHUNKS_PER_BLOCK)
            .map(|i| {
                let grp = Group {
                    ctx,
                    slot,
                    unit: Unit::Chunk(i as u8),
                    frame: big.frame + i * FRAMES_PER_CHUNK,
                    pinned: false,
                    alloc: big.alloc,
                };
                match self.free_groups.pop() {
                    Some(id) => {
                        self.groups[id as usize] = Some(grp);
                        id
                    }
                    None => {
                        self.groups.push(Some(grp));
                        (self.groups.len() - 1) as GroupId
                    }
                }
            })
            .collect();
        for (i, &cg) in ids.iter().enumerate() {
            let frame = big.frame + i as u64 * FRAMES_PER_CHUNK;
            for f in frame..frame + FRAMES_PER_CHUNK {
                self.owner[f as usize] = cg;
            }
            let raw = encode_pte(&Pte::vram(PhysAddr::from_frame(frame))).expect("pfn fits");
            mem.write_u64(table.offset(i as u64 * 8), raw)?;
            chunk_groups.push((cg, ()));
        }
        self.lru.replace_in_place(&g, chunk_groups);
        self.groups[g as usize] = None;
        self.free_groups.push(g);
        {
            let SlotState::Paged(p) = &mut self.slot_mut(ctx, slot).state else { unreachable!() };
            for (i, &cg) in ids.iter().enumerate() {
                p.chunks[i] = Res::Gpu(cg);
            }
        }
        let pd0 = self.table_addr(self.slot(ctx, slot).pd0.expect("pd0"));
        mem.write_u64(pd0, encode_table_pointer(table))?;
        self.invalidations.push((ctx, slot));
        self.log("splinter", ctx, Some(big.frame), format!("va={}", VirtAddr(slot * BIG_PAGE)));
        Ok(rep)
    }

    // ---- merge ------------------------------------------------------------

    /// Applies every pending merge for the context.
    pub fn merge_check(&mut self, mem: &mut DeviceMemory, ctx: CtxId) -> Result<Vec<MergeRecord>, AllocError> {
        let slots: Vec<u64> = self.space(ctx)?.slots.keys().copied().collect();
        self.merge_slots(mem, ctx, &slots)
    }

    fn merge_slots(&mut self, mem: &mut DeviceMemory, ctx: CtxId, slots: &[u64]) -> Result<Vec<MergeRecord>, AllocError> {
        let mut out = Vec::new();
        for &slot in slots {
            let Some(s) = self.spaces[&ctx].slots.get(&slot) else { continue };
            if s.splintered {
                continue;
            }
            let SlotState::Paged(p) = &s.state else { continue };
            let gpu = p.chunks.iter().filter(|r| matches!(r, Res::Gpu(_))).count();
            let host = p.chunks.iter().any(|r| *r == Res::Host);
            let pinned = p.chunks.iter().any(|r| matches!(r, Res::Gpu(g) if self.groups[*g as usize].as_ref().unwrap().pinned));
            if s.kind == SlotKind::Medium && gpu > 16 && !host && !pinned && p.pages.is_empty() {
                out.push(self.merge_to_big(mem, ctx, slot)?);
                continue;
            }
            if s.kind == SlotKind::Small {
                let pages: Vec<(u16, AllocId)> = p
                    .pages
                    .iter()
                    .filter_map(|(&i, r)| match r {
                        Res::Gpu(g) => {
                            let grp = self.groups[*g as usize].as_ref().unwrap();
                            (!grp.pinned).then_some((i, grp.alloc.unwrap_or(u64::MAX)))
                        }
                        _ => None,
                    })
                    .collect();
                for w in small_page_coalesce_windows(&pages) {
                    out.push(self.coalesce_window(mem, ctx, slot, w)?);
                }
            }
        }
        Ok(out)
    }

    fn merge_to_big(&mut self, mem: &mut DeviceMemory, ctx: CtxId, slot: u64) -> Result<MergeRecord, AllocError> {
        let SlotState::Paged(p) = self.slot(ctx, slot).state.clone() else { unreachable!() };
        let members: Vec<(usize, GroupId)> = p
            .chunks
            .iter()
            .enumerate()
            .filter_map(|(i, r)| match r {
                Res::Gpu(g) => Some((i, *g)),
                _ => None,
            })
            .collect();
        for &(_, g) in &members {
            self.protected.insert(g);
        }
        let taken = self.take(mem, Level::Block, CLAIMED);
        for &(_, g) in &members {
            self.protected.remove(&g);
        }
        let (block, _) = taken?;
        let mut allocs: HashSet<Option<AllocId>> = HashSet::new();
        for &(i, g) in &members {
            let grp = self.groups[g as usize].clone().unwrap();
            allocs.insert(grp.alloc);
            for k in 0..FRAMES_PER_CHUNK {
                mem.move_frame(grp.frame + k, block + i as u64 * FRAMES_PER_CHUNK + k);
            }
            self.drop_group(g);
            self.release_frames(vec![(grp.frame, FRAMES_PER_CHUNK)]);
        }
        let alloc = if allocs.len() == 1 { allocs.into_iter().next().unwrap() } else { None };
        let g = self.new_group(Group {
            ctx,
            slot,
            unit: Unit::Big,
            frame: block,
            pinned: false,
            alloc,
        });
        self.slot_mut(ctx, slot).state = SlotState::Big(g);
        self.write_leaf(mem, ctx, slot, Unit::Big, block)?;
        if let Some(loc) = p.pt64 {
            self.release_table(mem, TableKind::Pt64, loc)?;
        }
        self.invalidations.push((ctx, slot));
        let va = VirtAddr(slot * BIG_PAGE);
        self.log("merge", ctx, Some(block), format!("va={va} chunks={}", members.len()));
        Ok(MergeRecord {
            ctx,
            va,
            from: PageSize::Medium,
            to: PageSize::Big,
            pages: members.len() as u32,
        })
    }

    fn coalesce_window(&mut self, mem: &mut DeviceMemory, ctx: CtxId, slot: u64, w: u8) -> Result<MergeRecord, AllocError> {
        let SlotState::Paged(p) = self.slot(ctx, slot).state.clone() else { unreachable!() };
        let members: Vec<(u16, GroupId)> = (w as u16 * 16..w as u16 * 16 + 16)
            .map(|i| match p.pages.get(&i) {
                Some(Res::Gpu(g)) => (i, *g),
                _ => unreachable!("window fully resident"),
            })
            .collect();
        for &(_, g) in &members {
            self.protected.insert(g);
        }
        let mut rep = EvictionReport::default();
        let res = (|| -> Result<u64, AllocError> {
            if p.pt64.is_none() {
                let (locs, r) = self.place_tables(mem, ctx, &[TableKind::Pt64])?;
                rep.add(r);
                self.install_table(mem, ctx, slot, TableKind::Pt64, locs[0])?;
            }
            Ok(self.take(mem, Level::Chunk, CLAIMED)?.0)
        })();
        for &(_, g) in &members {
            self.protected.remove(&g);
        }
        let chunk = res?;
        let alloc = self.groups[members[0].1 as usize].as_ref().unwrap().alloc;
        for &(i, g) in &members {
            let grp = self.groups[g as usize].clone().unwrap();
            mem.move_frame(grp.frame, chunk + (i as u64 % 16));
            self.clear_pte(mem, &grp);
            self.set_res(ctx, slot, Unit::Page(i), Res::Absent);
            self.drop_group(g);
            self.release_frames(vec![(grp.frame, 1)]);
        }
        let g = self.new_group(Group {
            ctx,
            slot,
            unit: Unit::Chunk(w),
            frame: chunk,
            pinned: false,
            alloc,
        });
        self.set_res(ctx, slot, Unit::Chunk(w), Res::Gpu(g));
        self.write_leaf(mem, ctx, slot, Unit::Chunk(w), chunk)?;
        self.invalidations.push((ctx, slot));
        let va = VirtAddr(slot * BIG_PAGE + w as u64 * MEDIUM_PAGE);
        self.log("merge", ctx, Some(chunk), format!("va={va} pages=16"));
        Ok(MergeRecord {
            ctx,
            va,
            from: PageSize::Small,
            to: PageSize::Medium,
            pages: 16,
        })
    }

    /// Turns a resident 2 MiB page back into 64 KiB pages without moving data.
    fn demote(&mut self, mem: &mut DeviceMemory, ctx: CtxId, slot: u64, g: GroupId) -> Result<(), AllocError> {
        self.splinter(mem, ctx, slot, g, None)?;
        // Chunks inherit owners from whichever live allocation covers them.
        let SlotState::Paged(p) = self.slot(ctx, slot).state.clone() else { unreachable!() };
        for (i, r) in p.chunks.iter().enumerate() {
            if let Res::Gpu(cg) = r {
                let va = VirtAddr(slot * BIG_PAGE + i as u64 * MEDIUM_PAGE);
                let owner = self.find_alloc(ctx, va, 1).ok().filter(|&id| self.allocs[id as usize].live);
                self.groups[*cg as usize].as_mut().unwrap().alloc = owner;
            }
        }
        Ok(())
    }

    // ---- free -------------------------------------------------------------

    pub fn free(&mut self, mem: &mut DeviceMemory, ctx: CtxId, va: VirtAddr) -> Result<(), AllocError> {
        let space = self.space(ctx)?;
        if space.freed.contains(&va.get()) {
            return Err(AllocError::DoubleFree(va));
        }
        let id = *space.allocs.get(&va.get()).ok_or(AllocError::NotAllocated(va))?;
        if !self.allocs[id as usize].live {
            return Err(AllocError::DoubleFree(va));
        }
        let a = self.allocs[id as usize].clone();
        self.allocs[id as usize].live = false;
        let mut freed: Vec<(u64, u64)> = Vec::new();
        for slot in a.slots() {
            let s0 = slot * BIG_PAGE;
            let (lo, hi) = (a.va.get().max(s0), a.end().min(s0 + BIG_PAGE));
            let shared = self.slot(ctx, slot).users > 1;
            match self.slot(ctx, slot).state.clone() {
                SlotState::Empty => {}
                SlotState::BigHost => {
                    if !shared {
                        self.drop_backing(ctx, VirtAddr(s0), FRAMES_PER_BLOCK);
                        self.slot_mut(ctx, slot).state = SlotState::Empty;
                    }
                }
                SlotState::Big(g) => {
                    if shared {
                        self.demote(mem, ctx, slot, g)?;
                    } else {
                        let grp = self.groups[g as usize].clone().unwrap();
                        self.clear_pte(mem, &grp);
                        self.drop_group(g);
                        freed.push((grp.frame, FRAMES_PER_BLOCK));
                        self.slot_mut(ctx, slot).state = SlotState::Empty;
                    }
                }
                SlotState::Paged(_) => {}
            }
            if matches!(self.slot(ctx, slot).state, SlotState::Paged(_)) {
                let units = self.units_in(ctx, slot, lo, hi);
                let mut all_units = units.clone();
                if self.slot(ctx, slot).users == 1 {
                    // Last user: sweep everything left in the slot.
                    let SlotState::Paged(p) = &self.slot(ctx, slot).state else { unreachable!() };
                    all_units = (0..32u8)
                        .filter(|&i| p.chunks[i as usize] != Res::Absent)
                        .map(Unit::Chunk)
                        .chain(p.pages.keys().map(|&i| Unit::Page(i)))
                        .collect();
                }
                for unit in all_units {
                    match self.res_of(ctx, slot, unit) {
                        Res::Gpu(g) => {
                            let grp = self.groups[g as usize].clone().unwrap();
                            self.clear_pte(mem, &grp);
                            self.drop_group(g);
                            freed.push((grp.frame, unit.frames()));
                        }
                        Res::Host => self.drop_backing(ctx, VirtAddr(s0 + unit.offset()), unit.frames()),
                        Res::Absent => continue,
                    }
                    self.set_res(ctx, slot, unit, Res::Absent);
                }
            }
            let last = {
                let s = self.slot_mut(ctx, slot);
                s.users -= 1;
                s.users == 0
            };
            if last {
                let s = self.spaces.get_mut(&ctx).unwrap().slots.remove(&slot).unwrap();
                if let SlotState::Paged(p) = s.state {
                    if let Some(l) = p.pt64 {
                        self.release_table(mem, TableKind::Pt64, l)?;
                    }
                    if let Some(l) = p.pt4k {
                        self.release_table(mem, TableKind::Pt4k, l)?;
                    }
                }
                if let Some(l) = s.pd0 {
                    self.release_table(mem, TableKind::Pd0, l)?;
                }
                let space = self.spaces.get_mut(&ctx).unwrap();
                if space.small.map(|(sl, _)| sl) == Some(slot) {
                    space.small = None;
                }
            }
            self.invalidations.push((ctx, slot));
        }
        for &(f, n) in &freed {
            mem.zero_frames(f, n)?;
        }
        let total: u64 = freed.iter().map(|x| x.1).sum();
        self.release_frames(freed);
        let space = self.spaces.get_mut(&ctx).unwrap();
        space.allocs.remove(&va.get());
        space.freed.insert(va.get());
        self.log("free", ctx, None, format!("va={va} frames={total}"));
        Ok(())
    }

    // ---- ground truth -----------------------------------------------------

    pub fn frame_owner(&self, frame: u64) -> FrameOwner {
        match self.owner.get(frame as usize).copied() {
            None | Some(FREE) => FrameOwner::Free,
            Some(PT_OWNER) => {
                let (i, r) = self
                    .regions
                    .iter()
                    .enumerate()
                    .find(|(_, r)| r.block == frame / FRAMES_PER_BLOCK)
                    .expect("pt frame in a region");
                FrameOwner::PtRegion { ctx: r.ctx, region: i as RegionId }
            }
            Some(g) => {
                let grp = self.groups[g as usize].as_ref().expect("owner group");
                let splintered = self.slot(grp.ctx, grp.slot).splintered;
                FrameOwner::Data {
                    ctx: grp.ctx,
                    va: VirtAddr(grp.va().get() + (frame - grp.frame) * FRAME_SIZE),
                    size: grp.unit.size(),
                    pinned: grp.pinned,
                    splintered,
                }
            }
        }
    }

    pub fn frame_counts(&self) -> FrameCounts {
        FrameCounts {
            total: self.total_frames,
            free: self.free_count,
            pt: self.pt_count,
            data: self.total_frames - self.free_count - self.pt_count,
            host_backed: self.host_frames,
        }
    }

    pub fn regions(&self) -> Vec<RegionInfo> {
        self.regions
            .iter()
            .enumerate()
            .map(|(i, r)| RegionInfo {
                id: i as RegionId,
                ctx: r.ctx,
                base: r.base(),
                fill: r.bottom + r.top,
                bottom: r.bottom,
                top: r.top,
            })
            .collect()
    }

    /// Valid-entry census of the 64 KiB tables the allocator placed in `region`.
    pub fn region_density(&self, mem: &DeviceMemory, region: RegionId) -> Density {
        let mut d = Density::default();
        for space in self.spaces.values() {
            for s in space.slots.values() {
                let SlotState::Paged(p) = &s.state else { continue };
                let Some(loc) = p.pt64 else { continue };
                if loc.region != region {
                    continue;
                }
                let base = self.table_addr(loc);
                let valid = (0..PT64_ENTRIES)
                    .filter(|i| mem.read_u64(base.offset(i * 8)).map_or(false, |w| w & 1 == 1))
                    .count() as u64;
                d.tables += 1;
                d.valid += valid;
                d.slots += PT64_ENTRIES;
                if valid == PT64_ENTRIES - 1 {
                    d.full_minus_one += 1;
                }
            }
        }
        d
    }

    /// Resident pages in eviction order (least recent first).
    pub fn lru_order(&self) -> Vec<ResidentPage> {
        self.lru
            .iter()
            .map(|(&g, _)| {
                let grp = self.groups[g as usize].as_ref().unwrap();
                ResidentPage {
                    ctx: grp.ctx,
                    va: grp.va(),
                    size: grp.unit.size(),
                    phys: PhysAddr::from_frame(grp.frame),
                }
            })
            .collect()
    }

    /// Allocator-side mapping of `va` (independent of PT bytes).
    pub fn resident_mapping(&self, ctx: CtxId, va: VirtAddr) -> Option<ResidentPage> {
        let slot = va.get() / BIG_PAGE;
        let s = self.spaces.get(&ctx)?.slots.get(&slot)?;
        let within = va.get() % BIG_PAGE;
        let g = match &s.state {
            SlotState::Big(g) => *g,
            SlotState::Paged(p) => match p.chunks[(within / MEDIUM_PAGE) as usize] {
                Res::Gpu(g) => g,
                _ => match p.pages.get(&((within / SMALL_PAGE) as u16)) {
                    Some(Res::Gpu(g)) => *g,
                    _ => return None,
                },
            },
            _ => return None,
        };
        let grp = self.groups[g as usize].as_ref()?;
        Some(ResidentPage {
            ctx,
            va: grp.va(),
            size: grp.unit.size(),
            phys: PhysAddr::from_frame(grp.frame),
        })
    }

    pub fn is_host_resident(&self, ctx: CtxId, va: VirtAddr) -> bool {
        let slot = va.get() / BIG_PAGE;
        let Some(s) = self.spaces.get(&ctx).and_then(|sp| sp.slots.get(&slot)) else {
            return false;
        };
        let within = va.get() % BIG_PAGE;
        match &s.state {
            SlotState::BigHost => true,
            SlotState::Paged(p) => {
                p.chunks[(within / MEDIUM_PAGE) as usize] == Res::Host
                    || p.pages.get(&((within / SMALL_PAGE) as u16)) == Some(&Res::Host)
            }
            _ => false,
        }
    }

    /// Host-backed copy of one 4 KiB VA frame, if it lives on the host.
    pub fn host_frame_words(&self, ctx: CtxId, va: VirtAddr) -> Option<Vec<(u16, u64)>> {
        self.backing.get(&(ctx, va.get() / FRAME_SIZE)).map(|d| d.words())
    }

    pub fn contexts(&self) -> Vec<CtxId> {
        self.spaces.keys().copied().collect()
    }

    /// Frame-level consistency check used by tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut free = 0u64;
        let mut pt = 0u64;
        for (f, &o) in self.owner.iter().enumerate() {
            match o {
                FREE => free += 1,
                PT_OWNER => pt += 1,
                g => {
                    let grp = self.groups.get(g as usize).and_then(|x| x.as_ref()).ok_or(format!("frame {f} owned by dead group {g}"))?;
                    let f = f as u64;
                    if f < grp.frame || f >= grp.frame + grp.unit.frames() {
                        return Err(format!("frame {f} outside its group"));
                    }
                }
            }
        }
        if free != self.free_count || pt != self.pt_count {
            return Err(format!("counts drifted: free {free} vs {}, pt {pt} vs {}", self.free_count, self.pt_count));
        }
        for (c, &n) in self.chunk_free.iter().enumerate() {
            let real = (0..FRAMES_PER_CHUNK).filter(|i| self.owner[(c as u64 * FRAMES_PER_CHUNK + i) as usize] == FREE).count();
            if real != n as usize {
                return Err(format!("chunk {c} free count {n} != {real}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(cap: u64) -> (DeviceMemory, UvmAllocator) {
        let mut mem = DeviceMemory::with_capacity(cap).unwrap();
        let mut a = UvmAllocator::new(cap, AllocatorConfig::default());
        a.create_context(&mut mem, CtxId(0)).unwrap();
        (mem, a)
    }

    #[test]
    fn eq1_values() {
        assert_eq!(allocations_to_next_pt_region(0), 508);
        assert_eq!(allocations_to_next_pt_region(352 * KIB), 420);
        assert_eq!(allocations_to_next_pt_region(2 * MIB), 0);
    }

    #[test]
    fn region0_placement() {
        let (_, a) = setup(256 * MIB);
        let r = a.regions();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].base, PhysAddr(96 * MIB));
        assert_eq!(r[0].fill, 352 * KIB);
    }

    #[test]
    fn lazy_allocation() {
        let (mut mem, mut a) = setup(256 * MIB);
        let free = a.mem_get_info();
        let v1 = a.uvm_alloc(CtxId(0), 2 * MIB).unwrap();
        let v2 = a.uvm_alloc(CtxId(0), 2 * MIB).unwrap();
        assert_eq!(a.mem_get_info(), free);
        assert!(v2.get() >= v1.get() + 2 * MIB);
        assert_eq!(a.uvm_alloc(CtxId(0), 0), Err(AllocError::ZeroSize));
        let rep = a.gpu_touch(&mut mem, CtxId(0), v1, 1).unwrap();
        assert_eq!(rep.frames_materialized, FRAMES_PER_BLOCK);
        assert_eq!(a.mem_get_info(), free - 2 * MIB);
    }

    #[test]
    fn tail_touch_costs() {
        let (mut mem, mut a) = setup(256 * MIB);
        let va = a.uvm_alloc(CtxId(0), 2 * MIB + 4 * KIB).unwrap();
        let before = a.regions()[0].fill;
        let free = a.mem_get_info();
        a.gpu_touch(&mut mem, CtxId(0), va.offset(2 * MIB), 4 * KIB).unwrap();
        assert_eq!(a.regions()[0].fill - before, TAIL_FILL_COST);
        assert_eq!(free - a.mem_get_info(), 4 * KIB);
        a.gpu_touch(&mut mem, CtxId(0), va, 8).unwrap();
        assert_eq!(free - a.mem_get_info(), 2 * MIB + 4 * KIB);
    }

    #[test]
    fn one_mib_uses_sixteen_chunks() {
        let (mut mem, mut a) = setup(256 * MIB);
        let va = a.uvm_alloc(CtxId(0), MIB).unwrap();
        a.gpu_touch(&mut mem, CtxId(0), va, MIB).unwrap();
        let pages: Vec<_> = a.lru_order().into_iter().filter(|p| p.size == PageSize::Medium).collect();
        assert_eq!(pages.len(), 16);
    }

    #[test]
    fn free_zeroes_and_double_free_errors() {
        let (mut mem, mut a) = setup(256 * MIB);
        let va = a.uvm_alloc(CtxId(0), 2 * MIB).unwrap();
        a.gpu_touch(&mut mem, CtxId(0), va, 1).unwrap();
        let phys = a.resident_mapping(CtxId(0), va).unwrap().phys;
        mem.write_u64(phys, 0xdead).unwrap();
        a.free(&mut mem, CtxId(0), va).unwrap();
        assert_eq!(mem.read_u64(phys).unwrap(), 0);
        assert_eq!(a.free(&mut mem, CtxId(0), va), Err(AllocError::DoubleFree(va)));
        a.check_invariants().unwrap();
    }

    #[test]
    fn splinter_leaves_31_valid() {
        let (mut mem, mut a) = setup(256 * MIB);
        let va = a.uvm_alloc(CtxId(0), 2 * MIB).unwrap();
        a.gpu_touch(&mut mem, CtxId(0), va, 1).unwrap();
        a.cpu_touch(&mut mem, CtxId(0), va.offset(5 * MEDIUM_PAGE), 1).unwrap();
        let d = a.region_density(&mem, 0);
        assert_eq!((d.tables, d.valid), (1, 31));
        a.check_invariants().unwrap();
    }

    #[test]
    fn packed_small_allocations_merge_past_sixteen() {
        let (mut mem, mut a) = setup(256 * MIB);
        let mut vas = Vec::new();
        for _ in 0..17 {
            vas.push(a.uvm_alloc(CtxId(0), 64 * KIB).unwrap());
        }
        for v in &vas[..16] {
            a.gpu_touch(&mut mem, CtxId(0), *v, 1).unwrap();
        }
        assert!(a.merge_check(&mut mem, CtxId(0)).unwrap().is_empty());
        mem.write_u64(a.resident_mapping(CtxId(0), vas[3]).unwrap().phys, 77).unwrap();
        a.gpu_touch(&mut mem, CtxId(0), vas[16], 1).unwrap();
        let m = a.resident_mapping(CtxId(0), vas[3]).unwrap();
        assert_eq!(m.size, PageSize::Big);
        assert_eq!(mem.read_u64(m.phys.offset(3 * MEDIUM_PAGE)).unwrap(), 77);
        a.free(&mut mem, CtxId(0), vas[3]).unwrap();
        assert_eq!(a.resident_mapping(CtxId(0), vas[4]).unwrap().size, PageSize::Medium);
        a.check_invariants().unwrap();
    }

    #[test]
    fn coalesce_policy() {
        let scattered: Vec<(u16, AllocId)> = (0..17).map(|i| (i, i as u64)).collect();
        assert!(small_page_coalesce_windows(&scattered).is_empty());
        let run: Vec<(u16, AllocId)> = (0..17).map(|i| (i, 9)).collect();
        assert_eq!(small_page_coalesce_windows(&run), vec![0]);
        let exact: Vec<(u16, AllocId)> = (0..16).map(|i| (i, 9)).collect();
        assert!(small_page_coalesce_windows(&exact).is_empty());
    }
}
