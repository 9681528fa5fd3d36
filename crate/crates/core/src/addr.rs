//! Address newtypes and size constants shared by every layer of the simulator.

use serde::{Deserialize, Serialize};
use std::fmt;

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

/// Smallest physical allocation unit.
pub const FRAME_SIZE: u64 = 4 * KIB;
pub const SMALL_PAGE: u64 = 4 * KIB;
pub const MEDIUM_PAGE: u64 = 64 * KIB;
pub const BIG_PAGE: u64 = 2 * MIB;

/// Frames per 64 KiB chunk and per 2 MiB block.
pub const FRAMES_PER_CHUNK: u64 = MEDIUM_PAGE / FRAME_SIZE;
pub const FRAMES_PER_BLOCK: u64 = BIG_PAGE / FRAME_SIZE;
pub const CHUNKS_PER_BLOCK: u64 = BIG_PAGE / MEDIUM_PAGE;

macro_rules! addr_type {
    ($name:ident, $prefix:literal) => {
        #[derive(
            Copy, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl $name {
            pub const fn new(v: u64) -> Self {
                Self(v)
            }

            pub const fn get(self) -> u64 {
                self.0
            }

            pub const fn offset(self, by: u64) -> Self {
                Self(self.0 + by)
            }

            pub const fn align_down(self, align: u64) -> Self {
                Self(self.0 & !(align - 1))
            }

            pub const fn is_aligned(self, align: u64) -> bool {
                self.0 & (align - 1) == 0
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{:#x}"), self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:#x}", self.0)
            }
        }
    };
}

addr_type!(PhysAddr, "P:");
addr_type!(VirtAddr, "V:");
addr_type!(HostAddr, "H:");

impl PhysAddr {
    /// Index of the 4 KiB frame holding this address.
    pub const fn frame(self) -> u64 {
        self.0 / FRAME_SIZE
    }

    pub const fn from_frame(frame: u64) -> Self {
        Self(frame * FRAME_SIZE)
    }

    /// Index of the 2 MiB block holding this address.
    pub const fn block(self) -> u64 {
        self.0 / BIG_PAGE
    }
}

/// GPU context (one per CUDA-like process).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CtxId(pub u32);

impl fmt::Display for CtxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ctx{}", self.0)
    }
}

/// Page-frame size classes a UVM mapping can use.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PageSize {
    #[serde(rename = "4K")]
    Small,
    #[serde(rename = "64K")]
    Medium,
    #[serde(rename = "2M")]
    Big,
}

impl PageSize {
    pub const fn bytes(self) -> u64 {
        match self {
            PageSize::Small => SMALL_PAGE,
            PageSize::Medium => MEDIUM_PAGE,
            PageSize::Big => BIG_PAGE,
        }
    }

    /// Bytes of last-level bookkeeping one mapped page costs.
    pub const fn pte_bytes(self) -> u64 {
        match self {
            PageSize::Big => 16,
            PageSize::Medium | PageSize::Small => 8,
        }
    }
}

pub(crate) fn div_ceil(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}
