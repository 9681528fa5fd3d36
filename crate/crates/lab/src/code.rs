//! Synthetic GPU code images: 16-byte instruction slots grouped into 2 MiB
//! pages, with kernels delimited by an `EXIT; BRA self; NOP…` tail.
//!
//! Binary format, one slot per 16 bytes, little endian:
//!
//! | bytes | field                                                   |
//! |-------|---------------------------------------------------------|
//! | 0     | opcode: `0x01` EXIT, `0x02` BRA, `0x03` NOP, `0x04` OTHER |
//! | 1..8  | reserved, zero                                          |
//! | 8..16 | BRA: target byte offset; OTHER: opaque payload; else 0  |
//!
//! The image length must be a multiple of 16. Pages are consecutive 2 MiB
//! ranges; the last one may be short.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SLOT_BYTES: usize = 16;
pub const PAGE_BYTES: usize = 2 << 20;
pub const SLOTS_PER_PAGE: usize = PAGE_BYTES / SLOT_BYTES;

pub mod opcode {
    pub const EXIT: u8 = 0x01;
    pub const BRA: u8 = 0x02;
    pub const NOP: u8 = 0x03;
    pub const OTHER: u8 = 0x04;
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instr {
    Exit,
    /// Branch to a byte offset in the image.
    Bra(u64),
    Nop,
    Other(u64),
}

impl Instr {
    pub fn encode(self) -> [u8; SLOT_BYTES] {
        let mut b = [0u8; SLOT_BYTES];
        let (op, arg) = match self {
            Instr::Exit => (opcode::EXIT, 0),
            Instr::Bra(t) => (opcode::BRA, t),
            Instr::Nop => (opcode::NOP, 0),
            Instr::Other(p) => (opcode::OTHER, p),
        };
        b[0] = op;
        b[8..].copy_from_slice(&arg.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Option<Instr> {
        let arg = u64::from_le_bytes(b[8..16].try_into().ok()?);
        match b[0] {
            opcode::EXIT => Some(Instr::Exit),
            opcode::BRA => Some(Instr::Bra(arg)),
            opcode::NOP => Some(Instr::Nop),
            opcode::OTHER => Some(Instr::Other(arg)),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodeError {
    #[error("image length {0} is not a multiple of {SLOT_BYTES}")]
    Ragged(usize),
    #[error("unknown opcode {opcode:#04x} at slot {slot}")]
    BadOpcode { slot: usize, opcode: u8 },
    #[error("invalid image spec: {0}")]
    Spec(String),
}

/// A kernel: its instructions, the `EXIT; BRA self` terminator and the NOP
/// sled that follows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kernel {
    pub index: usize,
    pub start: usize,
    /// Slot of the terminating EXIT.
    pub exit: usize,
    /// One past the last sled NOP.
    pub end: usize,
}

impl Kernel {
    pub fn slots(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub slot: usize,
    pub target: u64,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeImage {
    slots: Vec<Instr>,
}

impl CodeImage {
    pub fn new(slots: Vec<Instr>) -> Self {
        CodeImage { slots }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodeError> {
        if bytes.len() % SLOT_BYTES != 0 {
            return Err(CodeError::Ragged(bytes.len()));
        }
        let slots = bytes
            .chunks_exact(SLOT_BYTES)
            .enumerate()
            .map(|(slot, b)| Instr::decode(b).ok_or(CodeError::BadOpcode { slot, opcode: b[0] }))
            .collect::<Result<_, _>>()?;
        Ok(CodeImage { slots })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.slots.iter().flat_map(|i| i.encode()).collect()
    }

    pub fn slots(&self) -> &[Instr] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn pages(&self) -> usize {
        self.slots.len().div_ceil(SLOTS_PER_PAGE)
    }

    pub fn page_slots(&self, page: usize) -> Range<usize> {
        let start = page * SLOTS_PER_PAGE;
        start..(start + SLOTS_PER_PAGE).min(self.slots.len())
    }

    fn is_trap(&self, i: usize) -> bool {
        self.slots.get(i) == Some(&Instr::Bra((i * SLOT_BYTES) as u64))
    }

    /// Kernels found by the terminator pattern alone. Slots after the last
    /// terminator belong to no kernel.
    pub fn kernels(&self) -> Vec<Kernel> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i + 2 < self.slots.len() {
            if self.slots[i] == Instr::Exit && self.is_trap(i + 1) && self.slots[i + 2] == Instr::Nop {
                let mut end = i + 2;
                while end < self.slots.len() && self.slots[end] == Instr::Nop {
                    end += 1;
                }
                out.push(Kernel {
                    index: out.len(),
                    start,
                    exit: i,
                    end,
                });
                start = end;
                i = end;
            } else {
                i += 1;
            }
        }
        out
    }

    /// Candidate branches: every BRA except the terminators' self-loops.
    pub fn branches(&self, kernels: &[Kernel]) -> Vec<Branch> {
        let mut out = Vec::new();
        for k in kernels {
            for slot in k.start..k.exit {
                if let Instr::Bra(target) = self.slots[slot] {
                    out.push(Branch {
                        slot,
                        target,
                        kernel: k.index,
                    });
                }
            }
        }
        out
    }

    pub fn set(&mut self, slot: usize, i: Instr) {
        self.slots[slot] = i;
    }
}

/// Shape of a synthetic image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageSpec {
    pub pages: usize,
    pub kernels: usize,
    pub branches: usize,
    pub seed: u64,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec {
            pages: 16,
            kernels: 96,
            branches: 5436,
            seed: 0,
        }
    }
}

/// Lays out `kernels` kernels of random length over `pages` full pages and
/// scatters `branches` branches over their bodies.
pub fn synthesize(spec: &ImageSpec) -> Result<CodeImage, CodeError> {
    let total = spec.pages * SLOTS_PER_PAGE;
    if spec.kernels == 0 || spec.pages == 0 {
        return Err(CodeError::Spec("need at least one page and one kernel".into()));
    }
    let min_kernel = 64;
    if spec.kernels * min_kernel > total {
        return Err(CodeError::Spec("too many kernels for the page count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Kernel extents from sorted random cut points, 8-slot (128 B) aligned.
    let mut cuts: Vec<usize> = (1..spec.kernels)
        .map(|_| rng.gen_range(0..total / 8) * 8)
        .collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    for c in cuts {
        let prev = *bounds.last().unwrap();
        bounds.push(c.max(prev + min_kernel).min(total - (spec.kernels - bounds.len()) * min_kernel));
    }
    bounds.push(total);

    let mut slots = Vec::with_capacity(total);
    let mut bodies = Vec::with_capacity(spec.kernels);
    for w in bounds.windows(2) {
        let (start, end) = (w[0], w[1]);
        let sled = rng.gen_range(2..8);
        let exit = end - 2 - sled;
        for _ in start..exit {
            slots.push(Instr::Other(rng.gen()));
        }
        slots.push(Instr::Exit);
        slots.push(Instr::Bra(((exit + 1) * SLOT_BYTES) as u64));
        slots.extend(std::iter::repeat(Instr::Nop).take(sled));
        bodies.push(start..exit);
    }
    let body_total: usize = bodies.iter().map(|b| b.len()).sum();
    if spec.branches > body_total / 2 {
        return Err(CodeError::Spec("too many branches for the code size".into()));
    }
    let mut placed = 0;
    while placed < spec.branches {
        let mut at = rng.gen_range(0..body_total);
        let body = bodies
            .iter()
            .find(|b| {
                if at < b.len() {
                    true
                } else {
                    at -= b.len();
                    false
                }
            })
            .unwrap()
            .clone();
        let slot = body.start + at;
        if matches!(slots[slot], Instr::Bra(_)) {
            continue;
        }
        let mut target = rng.gen_range(body.clone());
        if target == slot {
            target = if slot > body.start { slot - 1 } else { slot + 1 };
        }
        slots[slot] = Instr::Bra((target * SLOT_BYTES) as u64);
        placed += 1;
    }
    Ok(CodeImage { slots })
}
