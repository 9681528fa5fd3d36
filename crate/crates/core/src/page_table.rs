//! PTE format, PD0 entry words, the in-memory page walk and the TLB.
//!
//! Entry layout (8 bytes, little-endian in device memory):
//!
//! | bits  | field        |
//! |-------|--------------|
//! | 0     | valid        |
//! | 1     | privileged   |
//! | 2     | read-only    |
//! | 3–4   | aperture     |
//! | 5–7   | reserved     |
//! | 8–53  | PFN          |
//!
//! A PD0 entry is 16 bytes. Its first half is either a 2 MiB leaf PTE or a
//! pointer to a 256-byte table of 64 KiB PTEs; its second half points to a
//! 4 KiB table of 4 KiB PTEs. Pointer words carry bit 6 and store the table
//! address shifted right by 8 in bits 8–63.

use crate::addr::{CtxId, HostAddr, PageSize, PhysAddr, VirtAddr, FRAME_SIZE, KIB};
use crate::device_memory::{DeviceMemory, MemError};
use crate::lru::LruMap;
use std::collections::HashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PTE_VALID: u64 = 1;
pub const PTE_PRIVILEGED: u64 = 1 << 1;
pub const PTE_READ_ONLY: u64 = 1 << 2;
pub const APERTURE_SHIFT: u32 = 3;
pub const APERTURE_MASK: u64 = 0b11 << APERTURE_SHIFT;
pub const RESERVED_MASK: u64 = 0b111 << 5;
pub const PFN_SHIFT: u32 = 8;
pub const PFN_BITS: u32 = 46;
pub const PFN_MASK: u64 = ((1 << PFN_BITS) - 1) << PFN_SHIFT;
/// Marks a PD0 word as a table pointer rather than a leaf.
pub const PDE_TABLE: u64 = 1 << 6;

pub const PD0_ENTRY_BYTES: u64 = 16;
pub const PT64_BYTES: u64 = 256;
pub const PT4K_BYTES: u64 = 4 * KIB;
pub const PT64_ENTRIES: u64 = PT64_BYTES / 8;
pub const PT4K_ENTRIES: u64 = PT4K_BYTES / 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PteError {
    #[error("pfn {0:#x} does not fit in 46 bits")]
    PfnTooWide(u64),
    #[error("pte bit {0} is outside the PFN field (8..=53)")]
    OutsidePfn(u32),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aperture {
    Vram = 0,
    VramPeer = 1,
    SysCoherent = 2,
    SysNonCoherent = 3,
}

impl Aperture {
    pub fn from_bits(bits: u8) -> Self {
        match bits & 0b11 {
            0 => Aperture::Vram,
            1 => Aperture::VramPeer,
            2 => Aperture::SysCoherent,
            _ => Aperture::SysNonCoherent,
        }
    }

    pub fn bits(self) -> u8 {
        self as u8
    }

    pub fn is_system(self) -> bool {
        matches!(self, Aperture::SysCoherent | Aperture::SysNonCoherent)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PteFlags {
    pub valid: bool,
    pub privileged: bool,
    pub read_only: bool,
    pub aperture: Aperture,
}

impl PteFlags {
    pub const VALID_VRAM: PteFlags = PteFlags {
        valid: true,
        privileged: false,
        read_only: false,
        aperture: Aperture::Vram,
    };
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pte {
    pub flags: PteFlags,
    pub pfn: u64,
}

impl Pte {
    pub fn vram(addr: PhysAddr) -> Self {
        Pte {
            flags: PteFlags::VALID_VRAM,
            pfn: addr.get() / FRAME_SIZE,
        }
    }

    pub fn system(addr: HostAddr) -> Self {
        Pte {
            flags: PteFlags {
                aperture: Aperture::SysNonCoherent,
                ..PteFlags::VALID_VRAM
            },
            pfn: addr.get() / FRAME_SIZE,
        }
    }

    pub fn address(&self) -> u64 {
        self.pfn * FRAME_SIZE
    }
}

pub fn encode_pte(p: &Pte) -> Result<u64, PteError> {
    if p.pfn >> PFN_BITS != 0 {
        return Err(PteError::PfnTooWide(p.pfn));
    }
    let f = &p.flags;
    Ok((p.pfn << PFN_SHIFT)
        | (f.aperture.bits() as u64) << APERTURE_SHIFT
        | if f.read_only { PTE_READ_ONLY } else { 0 }
        | if f.privileged { PTE_PRIVILEGED } else { 0 }
        | if f.valid { PTE_VALID } else { 0 })
}

/// Decoded entry plus any bits the format says must be zero.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct DecodedPte {
    pub pte: Pte,
    /// Reserved flag bits (5–7) and bits above the PFN; nonzero means the
    /// entry was malformed but still usable.
    pub stray_bits: u64,
}

impl DecodedPte {
    pub fn has_warning(&self) -> bool {
        self.stray_bits != 0
    }
}

pub fn decode_pte(raw: u64) -> DecodedPte {
    DecodedPte {
        pte: Pte {
            flags: PteFlags {
                valid: raw & PTE_VALID != 0,
                privileged: raw & PTE_PRIVILEGED != 0,
                read_only: raw & PTE_READ_ONLY != 0,
                aperture: Aperture::from_bits(((raw & APERTURE_MASK) >> APERTURE_SHIFT) as u8),
            },
            pfn: (raw & PFN_MASK) >> PFN_SHIFT,
        },
        stray_bits: raw & !(PFN_MASK | 0x1f),
    }
}

/// Distance a translation moves when PTE bit `pte_bit` flips.
pub fn pte_bit_to_jump(pte_bit: u32) -> Result<u64, PteError> {
    if !(PFN_SHIFT..PFN_SHIFT + PFN_BITS).contains(&pte_bit) {
        return Err(PteError::OutsidePfn(pte_bit));
    }
    Ok(1u64 << (pte_bit + 4))
}

pub fn encode_table_pointer(table: PhysAddr) -> u64 {
    debug_assert!(table.is_aligned(256));
    (table.get() & !0xff) | PDE_TABLE | PTE_VALID
}

/// Returns the table address if `raw` is a valid pointer word.
pub fn decode_table_pointer(raw: u64) -> Option<PhysAddr> {
    (raw & (PDE_TABLE | PTE_VALID) == PDE_TABLE | PTE_VALID).then_some(PhysAddr(raw & !0xff))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Pd0Half0 {
    Empty,
    Leaf(Pte),
    Table(PhysAddr),
}

pub fn decode_pd0_half0(raw: u64) -> Pd0Half0 {
    if let Some(t) = decode_table_pointer(raw) {
        return Pd0Half0::Table(t);
    }
    let d = decode_pte(raw);
    if d.pte.flags.valid {
        Pd0Half0::Leaf(d.pte)
    } else {
        Pd0Half0::Empty
    }
}

/// Where a translation lands.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Vram(PhysAddr),
    Host(HostAddr),
}

impl Target {
    pub fn offset(self, by: u64) -> Target {
        match self {
            Target::Vram(a) => Target::Vram(a.offset(by)),
            Target::Host(a) => Target::Host(a.offset(by)),
        }
    }

    pub fn vram(self) -> Option<PhysAddr> {
        match self {
            Target::Vram(a) => Some(a),
            Target::Host(_) => None,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TranslationSource {
    Tlb,
    Walk,
}

/// A page-granular mapping: `base` is the start of the mapped page.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Mapping {
    pub base: Target,
    pub size: PageSize,
    pub read_only: bool,
}

impl Mapping {
    pub fn resolve(&self, va: VirtAddr) -> Target {
        self.base.offset(va.get() & (self.size.bytes() - 1))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TranslateError {
    #[error("no PD0 entry covers {0}")]
    NoDirectory(VirtAddr),
    #[error("translation fault at {0}")]
    Fault(VirtAddr),
    #[error("page walk touched bad memory: {0}")]
    Memory(#[from] MemError),
}

fn leaf_mapping(pte: Pte, size: PageSize) -> Mapping {
    let base = if pte.flags.aperture.is_system() {
        Target::Host(HostAddr(pte.address()))
    } else {
        Target::Vram(PhysAddr(pte.address()))
    };
    Mapping {
        base: base.align_to(size),
        size,
        read_only: pte.flags.read_only,
    }
}

impl Target {
    fn align_to(self, size: PageSize) -> Target {
        match self {
            Target::Vram(a) => Target::Vram(a.align_down(size.bytes())),
            Target::Host(a) => Target::Host(a.align_down(size.bytes())),
        }
    }
}

/// Walks the PD0 entry at `pd0_entry` for `va` by decoding bytes from memory.
///
/// Order: 2 MiB leaf, then the 64 KiB table, then the 4 KiB table.
pub fn walk(mem: &DeviceMemory, pd0_entry: PhysAddr, va: VirtAddr) -> Result<Mapping, TranslateError> {
    let half0 = mem.read_u64(pd0_entry)?;
    match decode_pd0_half0(half0) {
        Pd0Half0::Leaf(pte) => return Ok(leaf_mapping(pte, PageSize::Big)),
        Pd0Half0::Table(t) => {
            let idx = (va.get() >> 16) & (PT64_ENTRIES - 1);
            let pte = decode_pte(mem.read_u64(t.offset(idx * 8))?).pte;
            if pte.flags.valid {
                return Ok(leaf_mapping(pte, PageSize::Medium));
            }
        }
        Pd0Half0::Empty => {}
    }
    let half1 = mem.read_u64(pd0_entry.offset(8))?;
    if let Some(t) = decode_table_pointer(half1) {
        let idx = (va.get() >> 12) & (PT4K_ENTRIES - 1);
        let pte = decode_pte(mem.read_u64(t.offset(idx * 8))?).pte;
        if pte.flags.valid {
            return Ok(leaf_mapping(pte, PageSize::Small));
        }
    }
    Err(TranslateError::Fault(va))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TlbKey {
    pub ctx: CtxId,
    pub size: PageSize,
    pub vpn: u64,
}

impl TlbKey {
    /// 2 MiB VA slot the key falls in.
    pub fn slot(&self) -> u64 {
        self.vpn * self.size.bytes() / PageSize::Big.bytes()
    }

    pub fn new(ctx: CtxId, size: PageSize, va: VirtAddr) -> Self {
        TlbKey {
            ctx,
            size,
            vpn: va.get() / size.bytes(),
        }
    }
}

const SIZES: [PageSize; 3] = [PageSize::Big, PageSize::Medium, PageSize::Small];

/// Fully associative LRU TLB. Capacity 0 never caches.
#[derive(Debug, Clone)]
pub struct Tlb {
    capacity: usize,
    entries: LruMap<TlbKey, Mapping>,
    by_slot: HashMap<(CtxId, u64), Vec<TlbKey>>,
    pub hits: u64,
    pub misses: u64,
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        Tlb {
            capacity,
            entries: LruMap::new(),
            by_slot: HashMap::new(),
            hits: 0,
            misses: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&mut self, ctx: CtxId, va: VirtAddr) -> Option<Mapping> {
        for size in SIZES {
            if let Some(m) = self.entries.get(&TlbKey::new(ctx, size, va)) {
                self.hits += 1;
                return Some(*m);
            }
        }
        self.misses += 1;
        None
    }

    pub fn insert(&mut self, ctx: CtxId, va: VirtAddr, m: Mapping) -> TlbKey {
        let key = TlbKey::new(ctx, m.size, va);
        if self.capacity == 0 {
            return key;
        }
        if !self.entries.contains(&key) {
            if self.entries.len() >= self.capacity {
                if let Some((old, _)) = self.entries.pop_lru() {
                    self.unindex(&old);
                }
            }
            self.by_slot.entry((ctx, key.slot())).or_default().push(key);
        }
        self.entries.insert(key, m);
        key
    }

    fn unindex(&mut self, key: &TlbKey) {
        let slot = (key.ctx, key.slot());
        if let Some(v) = self.by_slot.get_mut(&slot) {
            v.retain(|k| k != key);
            if v.is_empty() {
                self.by_slot.remove(&slot);
            }
        }
    }

    pub fn contains(&self, key: &TlbKey) -> bool {
        self.entries.contains(key)
    }

    pub fn entries_for(&self, ctx: CtxId) -> Vec<TlbKey> {
        self.entries
            .iter()
            .filter(|(k, _)| k.ctx == ctx)
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn remove(&mut self, key: &TlbKey) -> bool {
        let hit = self.entries.remove(key).is_some();
        if hit {
            self.unindex(key);
        }
        hit
    }

    /// Drops every entry of `ctx` overlapping the 2 MiB VA slot `slot`.
    pub fn invalidate_slot(&mut self, ctx: CtxId, slot: u64) {
        if let Some(keys) = self.by_slot.remove(&(ctx, slot)) {
            for k in keys {
                self.entries.remove(&k);
            }
        }
    }

    pub fn flush(&mut self) {
        self.entries.clear();
        self.by_slot.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::{GIB, MIB};

    #[test]
    fn encode_matches_bit_arithmetic() {
        let p = Pte::vram(PhysAddr(16 * MIB));
        assert_eq!(encode_pte(&p).unwrap(), 0x0000_0000_0010_0001);
        assert_eq!(encode_pte(&Pte::vram(PhysAddr(0))).unwrap(), 0x1);
    }

    #[test]
    fn aperture_bits_land_at_3_and_4() {
        let p = Pte::system(HostAddr(0x1000));
        assert_eq!(encode_pte(&p).unwrap(), (1 << 8) | (0b11 << 3) | 1);
    }

    #[test]
    fn oversized_pfn_is_rejected() {
        let p = Pte {
            flags: PteFlags::VALID_VRAM,
            pfn: 1 << 46,
        };
        assert_eq!(encode_pte(&p), Err(PteError::PfnTooWide(1 << 46)));
    }

    #[test]
    fn reserved_bits_produce_warning() {
        let d = decode_pte(0x1 | 1 << 5);
        assert!(d.has_warning());
        assert!(d.pte.flags.valid);
        assert!(!decode_pte(0x101).has_warning());
    }

    #[test]
    fn jump_distances() {
        assert_eq!(pte_bit_to_jump(20).unwrap(), 16 * MIB);
        assert_eq!(pte_bit_to_jump(31).unwrap(), 32 * GIB);
        assert_eq!(pte_bit_to_jump(8).unwrap(), 4 * KIB);
        assert_eq!(pte_bit_to_jump(7), Err(PteError::OutsidePfn(7)));
        assert_eq!(pte_bit_to_jump(54), Err(PteError::OutsidePfn(54)));
    }

    #[test]
    fn table_pointer_roundtrip() {
        let t = PhysAddr(0x1234_5600);
        let raw = encode_table_pointer(t);
        assert_eq!(decode_table_pointer(raw), Some(t));
        assert_eq!(decode_pd0_half0(raw), Pd0Half0::Table(t));
        let leaf = encode_pte(&Pte::vram(PhysAddr(2 * MIB))).unwrap();
        assert_eq!(decode_table_pointer(leaf), None);
    }

    #[test]
    fn tlb_evicts_least_recent() {
        let mut tlb = Tlb::new(2);
        let m = Mapping {
            base: Target::Vram(PhysAddr(0)),
            size: PageSize::Medium,
            read_only: false,
        };
        let ctx = CtxId(0);
        tlb.insert(ctx, VirtAddr(0), m);
        tlb.insert(ctx, VirtAddr(0x10000), m);
        assert!(tlb.lookup(ctx, VirtAddr(0)).is_some());
        tlb.insert(ctx, VirtAddr(0x20000), m);
        assert!(tlb.lookup(ctx, VirtAddr(0x10000)).is_none());
        assert!(tlb.lookup(ctx, VirtAddr(0x0)).is_some());
    }

    #[test]
    fn zero_capacity_never_hits() {
        let mut tlb = Tlb::new(0);
        let m = Mapping {
            base: Target::Vram(PhysAddr(0)),
            size: PageSize::Big,
            read_only: false,
        };
        tlb.insert(CtxId(1), VirtAddr(0), m);
        assert!(tlb.lookup(CtxId(1), VirtAddr(0)).is_none());
    }
}
