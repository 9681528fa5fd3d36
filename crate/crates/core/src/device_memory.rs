//! Simulated VRAM: a sparse word store with DRAM geometry, a Rowhammer fault
//! model driven by a bit-flip profile, and the host memory reachable by DMA.

use crate::addr::{HostAddr, PhysAddr, BIG_PAGE, FRAME_SIZE, GIB, KIB};
use crate::page_table::pte_bit_to_jump;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use thiserror::Error;

const WORDS_PER_FRAME: usize = (FRAME_SIZE / 8) as usize;
const DENSE_THRESHOLD: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("physical range {addr}+{len:#x} exceeds capacity {capacity:#x}")]
    OutOfRange { addr: PhysAddr, len: u64, capacity: u64 },
    #[error("IOMMU fault: host range {addr}+{len:#x} is outside the IOVA window")]
    IommuFault { addr: HostAddr, len: u64 },
    #[error("host range {addr}+{len:#x} is not mapped")]
    HostUnmapped { addr: HostAddr, len: u64 },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("fault profile line {line}: {msg}")]
    Profile { line: usize, msg: String },
    #[error("fault profile is empty")]
    EmptyProfile,
}

/// DRAM organisation of the simulated device.
///
/// Physical addresses map frame-major: the 2 MiB block index selects the low
/// part of the row number, so rows `r-1` and `r+1` of a bank lie in the
/// neighbouring 2 MiB blocks at the same in-block offset.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramGeometry {
    pub banks: u32,
    pub rows_per_bank: u64,
    pub row_size: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DramLocation {
    pub bank: u32,
    pub row: u64,
    pub column: u64,
}

impl DramGeometry {
    pub fn new(capacity: u64, banks: u32, row_size: u64) -> Result<Self, MemError> {
        if capacity == 0 || capacity % BIG_PAGE != 0 {
            return Err(MemError::Geometry(format!(
                "capacity {capacity:#x} is not a positive multiple of 2 MiB"
            )));
        }
        if banks == 0 || row_size == 0 || row_size % 8 != 0 {
            return Err(MemError::Geometry("banks and row_size must be positive, row_size a multiple of 8".into()));
        }
        let stripe = banks as u64 * row_size;
        if BIG_PAGE % stripe != 0 {
            return Err(MemError::Geometry(format!(
                "banks*row_size ({stripe:#x}) must divide 2 MiB"
            )));
        }
        Ok(DramGeometry {
            banks,
            rows_per_bank: (BIG_PAGE / stripe) * (capacity / BIG_PAGE),
            row_size,
        })
    }

    /// Rows of one bank that fall inside a single 2 MiB block.
    pub fn rows_per_block(&self) -> u64 {
        BIG_PAGE / (self.banks as u64 * self.row_size)
    }

    pub fn blocks(&self) -> u64 {
        self.rows_per_bank / self.rows_per_block()
    }

    pub fn capacity(&self) -> u64 {
        self.blocks() * BIG_PAGE
    }

    pub fn locate(&self, addr: PhysAddr) -> DramLocation {
        let block = addr.get() / BIG_PAGE;
        let within = addr.get() % BIG_PAGE;
        let chunk = within / self.row_size;
        DramLocation {
            bank: (chunk % self.banks as u64) as u32,
            row: (chunk / self.banks as u64) * self.blocks() + block,
            column: within % self.row_size,
        }
    }

    pub fn address_of(&self, loc: DramLocation) -> Option<PhysAddr> {
        if loc.bank >= self.banks || loc.row >= self.rows_per_bank || loc.column >= self.row_size {
            return None;
        }
        let block = loc.row % self.blocks();
        let sub = loc.row / self.blocks();
        Some(PhysAddr(
            block * BIG_PAGE + (sub * self.banks as u64 + loc.bank as u64) * self.row_size + loc.column,
        ))
    }

    pub fn block_of_row(&self, row: u64) -> u64 {
        row % self.blocks()
    }

    pub fn row_at(&self, block: u64, sub: u64) -> u64 {
        sub * self.blocks() + block
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlipDirection {
    /// A charged cell (1) leaks to 0.
    OneToZero,
    /// An empty cell (0) gains charge to 1.
    ZeroToOne,
}

impl FlipDirection {
    pub fn source(self) -> bool {
        matches!(self, FlipDirection::OneToZero)
    }

    /// Profile-file encoding: the value the cell ends up holding.
    pub fn code(self) -> u8 {
        match self {
            FlipDirection::OneToZero => 0,
            FlipDirection::ZeroToOne => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FlipDirection::OneToZero),
            1 => Some(FlipDirection::ZeroToOne),
            _ => None,
        }
    }
}

/// A profiled cell that flips when both neighbouring rows are hammered.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitFlipSite {
    pub bank: u32,
    pub victim_row: u64,
    pub byte_in_row: u64,
    pub bit: u8,
    pub direction: FlipDirection,
}

impl BitFlipSite {
    /// Bit index inside the 8-byte entry that covers this cell.
    pub fn pte_bit(&self) -> u32 {
        (self.byte_in_row % 8) as u32 * 8 + self.bit as u32
    }

    pub fn address(&self, g: &DramGeometry) -> Option<PhysAddr> {
        g.address_of(DramLocation {
            bank: self.bank,
            row: self.victim_row,
            column: self.byte_in_row,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ineligible {
    /// The cell cannot be placed inside an 8-byte entry of a row.
    NoEntryContext,
    /// The bit is in the flag byte or above the PFN.
    OutsidePfn { pte_bit: u32 },
    TooShort { jump: u64 },
    TooLong { jump: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteVerdict {
    pub site: BitFlipSite,
    pub verdict: Result<u64, Ineligible>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityReport {
    pub eligible: Vec<BitFlipSite>,
    pub rejected: Vec<(BitFlipSite, Ineligible)>,
}

/// Judges one site: usable iff it moves a translation by at least 2 MiB and
/// less than `mem_limit`.
pub fn assess_site(site: &BitFlipSite, row_size: u64, mem_limit: u64) -> Result<u64, Ineligible> {
    if site.bit > 7 || site.byte_in_row >= row_size || row_size % 8 != 0 {
        return Err(Ineligible::NoEntryContext);
    }
    let pte_bit = site.pte_bit();
    let jump = pte_bit_to_jump(pte_bit).map_err(|_| Ineligible::OutsidePfn { pte_bit })?;
    if jump < BIG_PAGE {
        Err(Ineligible::TooShort { jump })
    } else if jump >= mem_limit {
        Err(Ineligible::TooLong { jump })
    } else {
        Ok(jump)
    }
}

pub fn eligible_flips(
    profile: &[BitFlipSite],
    row_size: u64,
    mem_limit: u64,
) -> Result<EligibilityReport, MemError> {
    if profile.is_empty() {
        return Err(MemError::EmptyProfile);
    }
    let mut report = EligibilityReport::default();
    for site in profile {
        match assess_site(site, row_size, mem_limit) {
            Ok(_) => report.eligible.push(*site),
            Err(why) => report.rejected.push((*site, why)),
        }
    }
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    bank: u32,
    row: u64,
    byte: u64,
    bit: u8,
    direction: u8,
}

/// Parses `bank,row,byte,bit,direction` lines; `direction` is the value the
/// cell flips to (0 or 1). Lines starting with `#` are ignored.
pub fn parse_profile(reader: impl Read) -> Result<Vec<BitFlipSite>, MemError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<ProfileRow>().enumerate() {
        let row = rec.map_err(|e| MemError::Profile {
            line: e.position().map(|p| p.line() as usize).unwrap_or(i + 1),
            msg: e.to_string(),
        })?;
        let direction = FlipDirection::from_code(row.direction).ok_or(MemError::Profile {
            line: i + 1,
            msg: format!("direction must be 0 or 1, got {}", row.direction),
        })?;
        if row.bit > 7 {
            return Err(MemError::Profile {
                line: i + 1,
                msg: format!("bit must be 0..=7, got {}", row.bit),
            });
        }
        out.push(BitFlipSite {
            bank: row.bank,
            victim_row: row.row,
            byte_in_row: row.byte,
            bit: row.bit,
            direction,
        });
    }
    Ok(out)
}

pub fn write_profile(sites: &[BitFlipSite], writer: impl Write) -> Result<(), MemError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for s in sites {
        w.serialize(ProfileRow {
            bank: s.bank,
            row: s.victim_row,
            byte: s.byte_in_row,
            bit: s.bit,
            direction: s.direction.code(),
        })
        .map_err(|e| MemError::Profile { line: 0, msg: e.to_string() })?;
    }
    w.flush().map_err(|e| MemError::Profile { line: 0, msg: e.to_string() })
}

/// Label, bank, in-block row (`sub`), block position as a fraction of the
/// device, byte-in-row, bit, direction for the nine reference sites.
const REFERENCE: [(&str, u32, u64, (u64, u64), u64, u8, FlipDirection); 9] = [
    ("A1", 0, 32, (11, 20), 2, 4, FlipDirection::OneToZero),
    ("B1", 1, 20, (13, 20), 138, 6, FlipDirection::ZeroToOne),
    ("C1", 2, 40, (7, 20), 266, 4, FlipDirection::OneToZero),
    ("C2", 2, 44, (7, 20), 523, 2, FlipDirection::ZeroToOne),
    ("D1", 3, 24, (15, 20), 1042, 4, FlipDirection::ZeroToOne),
    ("E1", 4, 48, (5, 20), 1579, 4, FlipDirection::OneToZero),
    ("F1", 5, 12, (17, 20), 1803, 0, FlipDirection::OneToZero),
    ("F2", 5, 28, (9, 20), 811, 1, FlipDirection::ZeroToOne),
    ("F3", 5, 36, (3, 20), 1187, 7, FlipDirection::OneToZero),
];

/// Nine sites with the byte/bit positions of the reference profile
/// (A1..F3 over banks 0..5), placed for the given geometry.
pub fn reference_profile(g: &DramGeometry) -> Vec<BitFlipSite> {
    reference_profile_labeled(g).into_iter().map(|(_, s)| s).collect()
}

pub fn reference_profile_labeled(g: &DramGeometry) -> Vec<(&'static str, BitFlipSite)> {
    let subs = g.rows_per_block();
    REFERENCE
        .iter()
        .map(|&(label, bank, sub, (num, den), byte, bit, direction)| {
            let block = (g.blocks() * num / den).max(1).min(g.blocks().saturating_sub(2));
            let sub = sub * subs / 64;
            (
                label,
                BitFlipSite {
                    bank: bank % g.banks,
                    victim_row: g.row_at(block, sub),
                    byte_in_row: byte % g.row_size,
                    bit,
                    direction,
                },
            )
        })
        .collect()
}

/// Contents of one 4 KiB frame; absent words are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameData {
    Sparse(Vec<(u16, u64)>),
    Dense(Box<[u64; WORDS_PER_FRAME]>),
}

impl FrameData {
    fn get(&self, w: usize) -> u64 {
        match self {
            FrameData::Sparse(v) => match v.binary_search_by_key(&(w as u16), |e| e.0) {
                Ok(i) => v[i].1,
                Err(_) => 0,
            },
            FrameData::Dense(d) => d[w],
        }
    }

    fn set(&mut self, w: usize, val: u64) {
        match self {
            FrameData::Sparse(v) => match v.binary_search_by_key(&(w as u16), |e| e.0) {
                Ok(i) if val == 0 => {
                    v.remove(i);
                }
                Ok(i) => v[i].1 = val,
                Err(_) if val == 0 => {}
                Err(i) => {
                    v.insert(i, (w as u16, val));
                    if v.len() > DENSE_THRESHOLD {
                        let mut d = Box::new([0u64; WORDS_PER_FRAME]);
                        for &(k, x) in v.iter() {
                            d[k as usize] = x;
                        }
                        *self = FrameData::Dense(d);
                    }
                }
            },
            FrameData::Dense(d) => d[w] = val,
        }
    }

    fn is_zero(&self) -> bool {
        match self {
            FrameData::Sparse(v) => v.is_empty(),
            FrameData::Dense(d) => d.iter().all(|&x| x == 0),
        }
    }

    /// Nonzero words in ascending order.
    pub fn words(&self) -> Vec<(u16, u64)> {
        match self {
            FrameData::Sparse(v) => v.clone(),
            FrameData::Dense(d) => d
                .iter()
                .enumerate()
                .filter(|(_, &x)| x != 0)
                .map(|(i, &x)| (i as u16, x))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedFlip {
    pub site: BitFlipSite,
    pub addr: PhysAddr,
    pub bit: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemEvent {
    Write { addr: PhysAddr, len: u64 },
    Zero { addr: PhysAddr, len: u64 },
    Move { from: PhysAddr, to: PhysAddr, len: u64 },
    Flip { addr: PhysAddr, bit: u8, now: bool },
}

/// Modification journal. Flips are always kept; other events are kept only
/// when `detailed` is set, but are always counted.
#[derive(Debug, Clone, Default)]
pub struct Journal {
    pub detailed: bool,
    pub events: Vec<MemEvent>,
    pub flips: Vec<AppliedFlip>,
    pub writes: u64,
    pub zeroes: u64,
}

impl Journal {
    fn record(&mut self, e: MemEvent) {
        match e {
            MemEvent::Flip { .. } => {}
            MemEvent::Zero { .. } => self.zeroes += 1,
            _ => self.writes += 1,
        }
        if self.detailed || matches!(e, MemEvent::Flip { .. }) {
            self.events.push(e);
        }
    }
}

/// Byte-addressable simulated VRAM.
#[derive(Debug, Clone)]
pub struct DeviceMemory {
    capacity: u64,
    geometry: DramGeometry,
    frames: HashMap<u64, FrameData>,
    sites: HashMap<u32, Vec<BitFlipSite>>,
    polarity_gating: bool,
    journal: Journal,
}

impl DeviceMemory {
    pub fn new(geometry: DramGeometry) -> Self {
        DeviceMemory {
            capacity: geometry.capacity(),
            geometry,
            frames: HashMap::new(),
            sites: HashMap::new(),
            polarity_gating: true,
            journal: Journal::default(),
        }
    }

    pub fn with_capacity(capacity: u64) -> Result<Self, MemError> {
        Ok(Self::new(DramGeometry::new(capacity, 16, 2 * KIB)?))
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn set_detailed_journal(&mut self, on: bool) {
        self.journal.detailed = on;
    }

    /// With gating off, a qualifying site flips regardless of its current value.
    pub fn set_polarity_gating(&mut self, on: bool) {
        self.polarity_gating = on;
    }

    pub fn register_sites(&mut self, sites: &[BitFlipSite]) {
        for s in sites {
            self.sites.entry(s.bank).or_default().push(*s);
        }
    }

    pub fn sites(&self) -> Vec<BitFlipSite> {
        let mut v: Vec<_> = self.sites.values().flatten().copied().collect();
        v.sort_by_key(|s| (s.bank, s.victim_row, s.byte_in_row, s.bit));
        v
    }

    fn check(&self, addr: PhysAddr, len: u64) -> Result<(), MemError> {
        match addr.get().checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(MemError::OutOfRange {
                addr,
                len,
                capacity: self.capacity,
            }),
        }
    }

    fn word(&self, a: u64) -> u64 {
        let frame = a / FRAME_SIZE;
        let w = ((a % FRAME_SIZE) / 8) as usize;
        self.frames.get(&frame).map_or(0, |f| f.get(w))
    }

    fn set_word(&mut self, a: u64, v: u64) {
        let frame = a / FRAME_SIZE;
        let w = ((a % FRAME_SIZE) / 8) as usize;
        match self.frames.get_mut(&frame) {
            Some(f) => {
                f.set(w, v);
                if v == 0 && matches!(f, FrameData::Sparse(x) if x.is_empty()) {
                    self.frames.remove(&frame);
                }
            }
            None if v == 0 => {}
            None => {
                let mut f = FrameData::Sparse(Vec::new());
                f.set(w, v);
                self.frames.insert(frame, f);
            }
        }
    }

    pub fn read_phys(&self, addr: PhysAddr, len: u64) -> Result<Vec<u8>, MemError> {
        let mut buf = vec![0u8; len as usize];
        self.read_into(addr, &mut buf)?;
        Ok(buf)
    }

    pub fn read_into(&self, addr: PhysAddr, buf: &mut [u8]) -> Result<(), MemError> {
        self.check(addr, buf.len() as u64)?;
        let mut a = addr.get();
        let mut i = 0;
        while i < buf.len() {
            let wa = a & !7;
            let off = (a - wa) as usize;
            let n = (8 - off).min(buf.len() - i);
            let bytes = self.word(wa).to_le_bytes();
            buf[i..i + n].copy_from_slice(&bytes[off..off + n]);
            i += n;
            a += n as u64;
        }
        Ok(())
    }

    pub fn write_phys(&mut self, addr: PhysAddr, data: &[u8]) -> Result<(), MemError> {
        self.check(addr, data.len() as u64)?;
        let mut a = addr.get();
        let mut i = 0;
        while i < data.len() {
            let wa = a & !7;
            let off = (a - wa) as usize;
            let n = (8 - off).min(data.len() - i);
            let mut bytes = self.word(wa).to_le_bytes();
            bytes[off..off + n].copy_from_slice(&data[i..i + n]);
            self.set_word(wa, u64::from_le_bytes(bytes));
            i += n;
            a += n as u64;
        }
        self.journal.record(MemEvent::Write {
            addr,
            len: data.len() as u64,
        });
        Ok(())
    }

    pub fn read_u64(&self, addr: PhysAddr) -> Result<u64, MemError> {
        self.check(addr, 8)?;
        if addr.is_aligned(8) {
            return Ok(self.word(addr.get()));
        }
        let mut b = [0u8; 8];
        self.read_into(addr, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn write_u64(&mut self, addr: PhysAddr, v: u64) -> Result<(), MemError> {
        if !addr.is_aligned(8) {
            return self.write_phys(addr, &v.to_le_bytes());
        }
        self.check(addr, 8)?;
        self.set_word(addr.get(), v);
        self.journal.record(MemEvent::Write { addr, len: 8 });
        Ok(())
    }

    /// Zeroes a frame-aligned range.
    pub fn zero_frames(&mut self, first_frame: u64, count: u64) -> Result<(), MemError> {
        let addr = PhysAddr::from_frame(first_frame);
        self.check(addr, count * FRAME_SIZE)?;
        for f in first_frame..first_frame + count {
            self.frames.remove(&f);
        }
        self.journal.record(MemEvent::Zero {
            addr,
            len: count * FRAME_SIZE,
        });
        Ok(())
    }

    pub fn zero_range(&mut self, addr: PhysAddr, len: u64) -> Result<(), MemError> {
        self.check(addr, len)?;
        if addr.is_aligned(FRAME_SIZE) && len % FRAME_SIZE == 0 {
            return self.zero_frames(addr.frame(), len / FRAME_SIZE);
        }
        self.write_phys(addr, &vec![0u8; len as usize])
    }

    /// Removes and returns a frame's contents, leaving it zero.
    pub fn take_frame(&mut self, frame: u64) -> Option<FrameData> {
        let d = self.frames.remove(&frame);
        if d.is_some() {
            self.journal.record(MemEvent::Zero {
                addr: PhysAddr::from_frame(frame),
                len: FRAME_SIZE,
            });
        }
        d
    }

    /// Installs contents into a frame, replacing what was there.
    pub fn put_frame(&mut self, frame: u64, data: FrameData) {
        let addr = PhysAddr::from_frame(frame);
        if data.is_zero() {
            self.frames.remove(&frame);
        } else {
            self.frames.insert(frame, data);
        }
        self.journal.record(MemEvent::Write { addr, len: FRAME_SIZE });
    }

    /// Moves frame contents (the destination is overwritten, the source zeroed).
    pub fn move_frame(&mut self, from: u64, to: u64) {
        match self.frames.remove(&from) {
            Some(d) => {
                self.frames.insert(to, d);
            }
            None => {
                self.frames.remove(&to);
            }
        }
        self.journal.record(MemEvent::Move {
            from: PhysAddr::from_frame(from),
            to: PhysAddr::from_frame(to),
            len: FRAME_SIZE,
        });
    }

    pub fn frame_is_zero(&self, frame: u64) -> bool {
        self.frames.get(&frame).map_or(true, |f| f.is_zero())
    }

    pub fn materialized_frames(&self) -> usize {
        self.frames.len()
    }

    /// Activates `aggressor_rows` of `bank` and applies every profiled flip
    /// whose victim row is sandwiched by two aggressors.
    pub fn hammer(&mut self, bank: u32, aggressor_rows: &[u64]) -> Vec<AppliedFlip> {
        let Some(sites) = self.sites.get(&bank) else {
            return Vec::new();
        };
        let rows: std::collections::HashSet<u64> = aggressor_rows.iter().copied().collect();
        let mut qualifying: Vec<BitFlipSite> = sites
            .iter()
            .filter(|s| {
                s.victim_row > 0 && rows.contains(&(s.victim_row - 1)) && rows.contains(&(s.victim_row + 1))
            })
            .copied()
            .collect();
        qualifying.sort_by_key(|s| (s.victim_row, s.byte_in_row, s.bit));
        let mut applied = Vec::new();
        for site in qualifying {
            let Some(addr) = site.address(&self.geometry) else {
                continue;
            };
            let wa = addr.get() & !7;
            let shift = (addr.get() - wa) * 8 + site.bit as u64;
            let word = self.word(wa);
            let current = word >> shift & 1 == 1;
            if self.polarity_gating && current != site.direction.source() {
                continue;
            }
            let now = !current;
            self.set_word(wa, word ^ (1 << shift));
            self.journal.record(MemEvent::Flip {
                addr,
                bit: site.bit,
                now,
            });
            let flip = AppliedFlip {
                site,
                addr,
                bit: site.bit,
            };
            self.journal.flips.push(flip.clone());
            applied.push(flip);
        }
        applied
    }

    /// Copy of the materialized store for before/after comparisons.
    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            frames: self
                .frames
                .iter()
                .map(|(&k, v)| (k, v.words()))
                .filter(|(_, w)| !w.is_empty())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemorySnapshot {
    frames: BTreeMap<u64, Vec<(u16, u64)>>,
}

impl MemorySnapshot {
    fn word_map(&self) -> HashMap<(u64, u16), u64> {
        self.frames
            .iter()
            .flat_map(|(&f, ws)| ws.iter().map(move |&(w, v)| ((f, w), v)))
            .collect()
    }

    pub fn hamming_distance(&self, other: &MemorySnapshot) -> u64 {
        let a = self.word_map();
        let b = other.word_map();
        let mut d = 0u64;
        for (k, &va) in &a {
            d += (va ^ b.get(k).copied().unwrap_or(0)).count_ones() as u64;
        }
        for (k, &vb) in &b {
            if !a.contains_key(k) {
                d += vb.count_ones() as u64;
            }
        }
        d
    }
}

/// Host-side memory: the IOVA window a device may DMA into plus kernel
/// regions only the CPU can touch.
#[derive(Debug, Clone)]
pub struct HostMemory {
    iova_base: HostAddr,
    iova_len: u64,
    kernel: Vec<(HostAddr, u64)>,
    pages: HashMap<u64, Box<[u8; FRAME_SIZE as usize]>>,
    pub dma_writes: u64,
    pub dma_faults: u64,
}

pub const DEFAULT_IOVA_BASE: u64 = 8 * GIB;
pub const DEFAULT_IOVA_LEN: u64 = 1 << 20;

impl HostMemory {
    pub fn new(iova_base: HostAddr, iova_len: u64) -> Self {
        HostMemory {
            iova_base,
            iova_len,
            kernel: Vec::new(),
            pages: HashMap::new(),
            dma_writes: 0,
            dma_faults: 0,
        }
    }

    pub fn map_kernel(&mut self, base: HostAddr, len: u64) {
        self.kernel.push((base, len));
    }

    pub fn iova_base(&self) -> HostAddr {
        self.iova_base
    }

    pub fn iova_len(&self) -> u64 {
        self.iova_len
    }

    pub fn in_iova(&self, addr: HostAddr, len: u64) -> bool {
        let start = self.iova_base.get();
        match addr.get().checked_add(len) {
            Some(end) => addr.get() >= start && end <= start + self.iova_len,
            None => false,
        }
    }

    pub fn in_kernel(&self, addr: HostAddr, len: u64) -> bool {
        self.kernel.iter().any(|&(b, l)| match addr.get().checked_add(len) {
            Some(end) => addr >= b && end <= b.get() + l,
            None => false,
        })
    }

    fn raw_read(&self, addr: HostAddr, buf: &mut [u8]) {
        let mut done = 0;
        while done < buf.len() {
            let a = addr.get() + done as u64;
            let off = (a % FRAME_SIZE) as usize;
            let n = (FRAME_SIZE as usize - off).min(buf.len() - done);
            let dst = &mut buf[done..done + n];
            match self.pages.get(&(a / FRAME_SIZE)) {
                Some(p) => dst.copy_from_slice(&p[off..off + n]),
                None => dst.fill(0),
            }
            done += n;
        }
    }

    fn raw_write(&mut self, addr: HostAddr, data: &[u8]) {
        let mut done = 0;
        while done < data.len() {
            let a = addr.get() + done as u64;
            let off = (a % FRAME_SIZE) as usize;
            let n = (FRAME_SIZE as usize - off).min(data.len() - done);
            let page = self
                .pages
                .entry(a / FRAME_SIZE)
                .or_insert_with(|| Box::new([0u8; FRAME_SIZE as usize]));
            page[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
    }

    /// Device-initiated write; all-or-nothing against the IOVA window.
    pub fn dma_write(&mut self, addr: HostAddr, data: &[u8]) -> Result<(), MemError> {
        if !self.in_iova(addr, data.len() as u64) {
            self.dma_faults += 1;
            return Err(MemError::IommuFault {
                addr,
                len: data.len() as u64,
            });
        }
        self.dma_writes += 1;
        self.raw_write(addr, data);
        Ok(())
    }

    pub fn dma_read(&self, addr: HostAddr, len: u64) -> Result<Vec<u8>, MemError> {
        if !self.in_iova(addr, len) {
            return Err(MemError::IommuFault { addr, len });
        }
        let mut buf = vec![0u8; len as usize];
        self.raw_read(addr, &mut buf);
        Ok(buf)
    }

    /// CPU (driver/kernel) write: any mapped host range.
    pub fn cpu_write(&mut self, addr: HostAddr, data: &[u8]) -> Result<(), MemError> {
        let len = data.len() as u64;
        if !self.in_iova(addr, len) && !self.in_kernel(addr, len) {
            return Err(MemError::HostUnmapped { addr, len });
        }
        self.raw_write(addr, data);
        Ok(())
    }

    pub fn cpu_read(&self, addr: HostAddr, len: u64) -> Result<Vec<u8>, MemError> {
        if !self.in_iova(addr, len) && !self.in_kernel(addr, len) {
            return Err(MemError::HostUnmapped { addr, len });
        }
        let mut buf = vec![0u8; len as usize];
        self.raw_read(addr, &mut buf);
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::addr::MIB;

    fn mem() -> DeviceMemory {
        DeviceMemory::with_capacity(64 * MIB).unwrap()
    }

    #[test]
    fn read_after_write() {
        let mut m = mem();
        m.write_phys(PhysAddr(0), &[0xAA; 8]).unwrap();
        assert_eq!(m.read_phys(PhysAddr(0), 8).unwrap(), vec![0xAA; 8]);
        m.write_phys(PhysAddr(13), &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]).unwrap();
        assert_eq!(m.read_phys(PhysAddr(12), 12).unwrap(), vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0]);
    }

    #[test]
    fn out_of_range() {
        let m = mem();
        assert!(matches!(m.read_phys(PhysAddr(m.capacity()), 1), Err(MemError::OutOfRange { .. })));
        assert!(m.read_phys(PhysAddr(m.capacity() - 1), 1).is_ok());
    }

    #[test]
    fn dense_promotion_preserves_contents() {
        let mut m = mem();
        for w in 0..200u64 {
            m.write_u64(PhysAddr(w * 8), w + 1).unwrap();
        }
        for w in 0..200u64 {
            assert_eq!(m.read_u64(PhysAddr(w * 8)).unwrap(), w + 1);
        }
        m.zero_frames(0, 1).unwrap();
        assert!(m.frame_is_zero(0));
    }

    #[test]
    fn geometry_is_bijective_on_samples() {
        let g = DramGeometry::new(64 * MIB, 16, 2 * KIB).unwrap();
        assert_eq!(g.rows_per_block(), 64);
        assert_eq!(g.rows_per_bank, 64 * 32);
        for a in (0..g.capacity()).step_by(4093 * 7) {
            let loc = g.locate(PhysAddr(a));
            assert_eq!(g.address_of(loc), Some(PhysAddr(a)));
        }
    }

    #[test]
    fn neighbouring_rows_are_neighbouring_blocks() {
        let g = DramGeometry::new(64 * MIB, 16, 2 * KIB).unwrap();
        let a = PhysAddr(10 * BIG_PAGE + 5 * 32 * KIB + 3 * 2 * KIB + 17);
        let l = g.locate(a);
        let up = g.address_of(DramLocation { row: l.row + 1, ..l }).unwrap();
        assert_eq!(up.get(), a.get() + BIG_PAGE);
    }

    #[test]
    fn hammer_requires_both_neighbours_and_polarity() {
        let mut m = mem();
        let g = *m.geometry();
        let site = BitFlipSite {
            bank: 3,
            victim_row: g.row_at(5, 10),
            byte_in_row: 2,
            bit: 4,
            direction: FlipDirection::OneToZero,
        };
        m.register_sites(&[site]);
        let addr = site.address(&g).unwrap();
        let r = site.victim_row;
        assert!(m.hammer(3, &[r - 1, r + 1]).is_empty(), "cell holds 0 already");
        m.write_u64(addr.align_down(8), 1 << 20).unwrap();
        assert!(m.hammer(3, &[r - 1]).is_empty());
        assert!(m.hammer(2, &[r - 1, r + 1]).is_empty());
        let flips = m.hammer(3, &[r - 1, r + 1]);
        assert_eq!(flips.len(), 1);
        assert_eq!(m.read_u64(addr.align_down(8)).unwrap(), 0);
    }

    #[test]
    fn gating_can_be_relaxed() {
        let mut m = mem();
        let g = *m.geometry();
        let site = BitFlipSite {
            bank: 0,
            victim_row: g.row_at(3, 1),
            byte_in_row: 8,
            bit: 0,
            direction: FlipDirection::OneToZero,
        };
        m.register_sites(&[site]);
        m.set_polarity_gating(false);
        let r = site.victim_row;
        assert_eq!(m.hammer(0, &[r - 1, r + 1]).len(), 1);
        assert_eq!(m.read_u64(site.address(&g).unwrap()).unwrap(), 1);
    }

    #[test]
    fn eligibility_rules() {
        let base = BitFlipSite {
            bank: 0,
            victim_row: 1,
            byte_in_row: 2,
            bit: 0,
            direction: FlipDirection::OneToZero,
        };
        // pte bit 16 -> 1 MiB
        assert_eq!(assess_site(&base, 2048, 48 * GIB), Err(Ineligible::TooShort { jump: MIB }));
        let wide = BitFlipSite { byte_in_row: 4, ..base };
        assert_eq!(assess_site(&wide, 2048, 48 * GIB), Err(Ineligible::TooLong { jump: 64 * GIB }));
        let flag = BitFlipSite { byte_in_row: 0, bit: 3, ..base };
        assert_eq!(assess_site(&flag, 2048, 48 * GIB), Err(Ineligible::OutsidePfn { pte_bit: 3 }));
        let outside = BitFlipSite { byte_in_row: 4096, ..base };
        assert_eq!(assess_site(&outside, 2048, 48 * GIB), Err(Ineligible::NoEntryContext));
        assert_eq!(eligible_flips(&[], 2048, GIB), Err(MemError::EmptyProfile));
    }

    #[test]
    fn profile_roundtrip() {
        let g = DramGeometry::new(48 * GIB, 16, 2 * KIB).unwrap();
        let p = reference_profile(&g);
        let mut buf = Vec::new();
        write_profile(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 9);
        let back = parse_profile(format!("# header\n{text}").as_bytes()).unwrap();
        assert_eq!(back, p);
        assert!(parse_profile("1,2,3,9,0\n".as_bytes()).is_err());
        assert!(parse_profile("1,2,3,1,7\n".as_bytes()).is_err());
        assert!(parse_profile("1,2,x,1,0\n".as_bytes()).is_err());
    }

    #[test]
    fn iommu_window() {
        let mut h = HostMemory::new(HostAddr(DEFAULT_IOVA_BASE), DEFAULT_IOVA_LEN);
        let base = DEFAULT_IOVA_BASE;
        assert!(h.dma_write(HostAddr(base + 0x42000), &[1, 2, 3]).is_ok());
        assert!(h.dma_write(HostAddr(base + DEFAULT_IOVA_LEN), &[1]).is_err());
        assert!(h.dma_write(HostAddr(base + DEFAULT_IOVA_LEN - 2), &[9, 9, 9, 9]).is_err());
        assert_eq!(h.dma_read(HostAddr(base + DEFAULT_IOVA_LEN - 2), 2).unwrap(), vec![0, 0]);
        h.map_kernel(HostAddr(0x1000_0000), 4096);
        assert!(h.dma_write(HostAddr(0x1000_0000), &[1]).is_err());
        assert!(h.cpu_write(HostAddr(0x1000_0000), &[1]).is_ok());
        assert!(h.cpu_write(HostAddr(0x2000_0000), &[1]).is_err());
    }
}
