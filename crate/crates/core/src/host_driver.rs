//! Host-side driver model.
//!
//! A GSP status queue living in the device-visible IOVA window, the driver
//! that drains it into a 16-entry kernel staging buffer followed directly by
//! the queue metadata, the read-pointer write-back and callback dispatch
//! after each consumed message, a minimal kernel with one credential record,
//! and the fault-buffer entry parser.

use crate::addr::{HostAddr, FRAME_SIZE};
use crate::device_memory::{HostMemory, DEFAULT_IOVA_BASE, DEFAULT_IOVA_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

pub const QUEUE_OFFSET: u64 = 0x42000;
pub const QUEUE_ENTRIES: u32 = 63;
pub const ENTRY_SIZE: u64 = FRAME_SIZE;
pub const STAGING_ENTRIES: u32 = 16;
/// Shared header where the CPU publishes its queue read pointer.
pub const TX_HEADER_OFFSET: u64 = 0x40000;
pub const EUID_OFFSET: u64 = 8;
pub const UID_OFFSET: u64 = 4;
pub const INITIAL_EUID: u32 = 1000;

pub const KERNEL_BASE: u64 = 0xffff_8880_0010_0000;
pub const CRED_ADDR: u64 = 0xffff_8880_0020_0000;
pub const KERNEL_TEXT: u64 = 0xffff_ffff_8100_0000;

/// Byte offsets of the metadata fields.
pub mod meta_off {
    pub const P_READ_OUTGOING: usize = 0;
    pub const RX_READ_PTR: usize = 8;
    pub const MSG_COUNT: usize = 12;
    pub const FCN_NOTIFY: usize = 16;
    pub const FCN_NOTIFY_ARG: usize = 24;
    pub const FCN_BACKEND_RW: usize = 32;
    pub const FCN_FLUSH: usize = 40;
    pub const FCN_BARRIER: usize = 48;
    pub const LEN: usize = 56;
}

/// Header word offsets inside the first entry of a message.
pub mod hdr_off {
    pub const SEQ: usize = 0;
    pub const ELEM_COUNT: usize = 4;
    pub const CHECKSUM: usize = 8;
    pub const LEN: usize = 16;
}

/// XOR fold of the little-endian 32-bit words of `msg`.
pub fn checksum32(msg: &[u8]) -> u32 {
    assert!(msg.len() % 4 == 0, "checksum input must be word aligned");
    msg.chunks_exact(4)
        .fold(0, |acc, w| acc ^ u32::from_le_bytes([w[0], w[1], w[2], w[3]]))
}

/// Builds a sealed head entry whose checksum fold is zero.
pub fn build_entry(seq: u32, elem_count: u32, payload: &[u8]) -> Vec<u8> {
    let mut e = vec![0u8; ENTRY_SIZE as usize];
    e[hdr_off::SEQ..hdr_off::SEQ + 4].copy_from_slice(&seq.to_le_bytes());
    e[hdr_off::ELEM_COUNT..hdr_off::ELEM_COUNT + 4].copy_from_slice(&elem_count.to_le_bytes());
    let n = payload.len().min(e.len() - hdr_off::LEN);
    e[hdr_off::LEN..hdr_off::LEN + n].copy_from_slice(&payload[..n]);
    seal_entry(&mut e);
    e
}

/// Rewrites the checksum word so the entry folds to zero.
pub fn seal_entry(entry: &mut [u8]) {
    entry[hdr_off::CHECKSUM..hdr_off::CHECKSUM + 4].fill(0);
    let c = checksum32(entry);
    entry[hdr_off::CHECKSUM..hdr_off::CHECKSUM + 4].copy_from_slice(&c.to_le_bytes());
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub seq: u32,
    pub elem_count: u32,
    pub checksum: u32,
}

impl EntryHeader {
    pub fn parse(entry: &[u8]) -> Self {
        let w = |o: usize| u32::from_le_bytes(entry[o..o + 4].try_into().unwrap());
        EntryHeader {
            seq: w(hdr_off::SEQ),
            elem_count: w(hdr_off::ELEM_COUNT),
            checksum: w(hdr_off::CHECKSUM),
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsgqMetadata {
    pub p_read_outgoing: u64,
    pub rx_read_ptr: u32,
    pub msg_count: u32,
    pub fcn_notify: u64,
    pub fcn_notify_arg: u64,
    pub fcn_backend_rw: u64,
    pub fcn_flush: u64,
    pub fcn_barrier: u64,
}

impl MsgqMetadata {
    pub fn to_bytes(&self) -> [u8; meta_off::LEN] {
        let mut b = [0u8; meta_off::LEN];
        b[meta_off::P_READ_OUTGOING..][..8].copy_from_slice(&self.p_read_outgoing.to_le_bytes());
        b[meta_off::RX_READ_PTR..][..4].copy_from_slice(&self.rx_read_ptr.to_le_bytes());
        b[meta_off::MSG_COUNT..][..4].copy_from_slice(&self.msg_count.to_le_bytes());
        b[meta_off::FCN_NOTIFY..][..8].copy_from_slice(&self.fcn_notify.to_le_bytes());
        b[meta_off::FCN_NOTIFY_ARG..][..8].copy_from_slice(&self.fcn_notify_arg.to_le_bytes());
        b[meta_off::FCN_BACKEND_RW..][..8].copy_from_slice(&self.fcn_backend_rw.to_le_bytes());
        b[meta_off::FCN_FLUSH..][..8].copy_from_slice(&self.fcn_flush.to_le_bytes());
        b[meta_off::FCN_BARRIER..][..8].copy_from_slice(&self.fcn_barrier.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        let q = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let d = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        MsgqMetadata {
            p_read_outgoing: q(meta_off::P_READ_OUTGOING),
            rx_read_ptr: d(meta_off::RX_READ_PTR),
            msg_count: d(meta_off::MSG_COUNT),
            fcn_notify: q(meta_off::FCN_NOTIFY),
            fcn_notify_arg: q(meta_off::FCN_NOTIFY_ARG),
            fcn_backend_rw: q(meta_off::FCN_BACKEND_RW),
            fcn_flush: q(meta_off::FCN_FLUSH),
            fcn_barrier: q(meta_off::FCN_BARRIER),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CallbackSlot {
    Flush,
    Barrier,
    Notify,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallbackCall {
    pub slot: CallbackSlot,
    pub addr: u64,
    pub args: Vec<u64>,
}

/// What one `msgqRxMarkConsumed` does, computed from the metadata alone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteEffect {
    pub new_read_ptr: u32,
    /// `(address, value)` of the 4-byte write-back, when the backend hook is unset.
    pub write: Option<(u64, u32)>,
    pub callbacks: Vec<CallbackCall>,
}

pub fn mark_consumed_read_ptr(rx_read_ptr: u32, msg_count: u32, n: u32) -> u32 {
    let mut p = rx_read_ptr.wrapping_add(n);
    if p >= msg_count {
        p = p.wrapping_sub(msg_count);
    }
    p
}

pub fn msgq_rx_mark_consumed(meta: &MsgqMetadata, n: u32) -> WriteEffect {
    let p = mark_consumed_read_ptr(meta.rx_read_ptr, meta.msg_count, n);
    let write = (meta.fcn_backend_rw == 0).then_some((meta.p_read_outgoing, p));
    let mut callbacks = Vec::new();
    if meta.fcn_flush != 0 {
        callbacks.push(CallbackCall {
            slot: CallbackSlot::Flush,
            addr: meta.fcn_flush,
            args: vec![meta.p_read_outgoing, 4],
        });
    }
    if meta.fcn_barrier != 0 {
        callbacks.push(CallbackCall {
            slot: CallbackSlot::Barrier,
            addr: meta.fcn_barrier,
            args: vec![],
        });
    }
    if meta.fcn_notify != 0 {
        callbacks.push(CallbackCall {
            slot: CallbackSlot::Notify,
            addr: meta.fcn_notify,
            args: vec![1, meta.fcn_notify_arg],
        });
    }
    WriteEffect {
        new_read_ptr: p,
        write,
        callbacks,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScanError {
    #[error("queue dump is empty")]
    Empty,
    #[error("queue dump length {0} is not a whole number of entries")]
    Ragged(usize),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqScan {
    pub head_index: u32,
    pub payload_index: u32,
    pub expected_seq: u32,
}

/// Locates the newest entry in a queue dump and predicts where the next
/// message and its 17th element go. Ties resolve to the lowest index.
pub fn scan_expected_seq(dump: &[u8]) -> Result<SeqScan, ScanError> {
    if dump.is_empty() {
        return Err(ScanError::Empty);
    }
    if dump.len() % ENTRY_SIZE as usize != 0 {
        return Err(ScanError::Ragged(dump.len()));
    }
    let n = (dump.len() / ENTRY_SIZE as usize) as u32;
    let (i, s_max) = dump
        .chunks_exact(ENTRY_SIZE as usize)
        .enumerate()
        .map(|(i, e)| (i as u32, EntryHeader::parse(e).seq))
        .fold((0, 0u32), |best, (i, s)| if i == 0 || s > best.1 { (i, s) } else { best });
    Ok(SeqScan {
        head_index: (i + 1) % n,
        payload_index: (i + STAGING_ENTRIES + 1) % n,
        expected_seq: s_max.wrapping_add(1),
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriverState {
    Alive,
    Crashed,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelState {
    Stable,
    Panicked,
}

/// Kernel-side state: the credential record, registered functions and
/// health of the driver module and the kernel.
#[derive(Clone, Debug)]
pub struct KernelModel {
    pub cred_addr: HostAddr,
    pub driver_state: DriverState,
    pub kernel_state: KernelState,
    functions: BTreeMap<u64, String>,
    pub calls: Vec<CallbackCall>,
    pub panic_reason: Option<String>,
}

impl KernelModel {
    pub fn register_function(&mut self, addr: u64, name: &str) {
        self.functions.insert(addr, name.to_string());
    }

    pub fn function_name(&self, addr: u64) -> Option<&str> {
        self.functions.get(&addr).map(String::as_str)
    }

    fn panic(&mut self, why: String) {
        self.kernel_state = KernelState::Panicked;
        self.panic_reason = Some(why);
    }
}

/// Driver/GSP interleaving after each produced message.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Scheduler {
    /// The driver only runs when explicitly yielded to.
    PayloadFirst,
    /// The driver wakes after each GSP message with this probability.
    Randomized { wake_probability: f64 },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetryReason {
    Checksum,
    Sequence,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReceiveOutcome {
    Halted,
    Idle,
    /// Head message needs more entries than are available.
    Gated { need: u32, avail: u32 },
    Retry(RetryReason),
    Consumed { n: u32 },
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverStats {
    pub produced: u64,
    pub consumed: u64,
    pub retries: u64,
    pub staging_overflows: u64,
    pub wakeups: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelLayout {
    pub staging: HostAddr,
    pub meta: HostAddr,
    pub cred: HostAddr,
    pub queue: HostAddr,
    pub tx_header: HostAddr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostConfig {
    pub iova_base: u64,
    pub iova_len: u64,
    pub initial_seq: u32,
    pub scheduler: Scheduler,
    pub seed: u64,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            iova_base: DEFAULT_IOVA_BASE,
            iova_len: DEFAULT_IOVA_LEN,
            initial_seq: 1000,
            scheduler: Scheduler::PayloadFirst,
            seed: 0,
        }
    }
}

/// The GSP producer, the receiving driver and the kernel they share.
#[derive(Clone, Debug)]
pub struct HostDriver {
    pub host: HostMemory,
    pub kernel: KernelModel,
    layout: KernelLayout,
    rx_avail: u32,
    last_seq: u32,
    gsp_write: u32,
    gsp_seq: u32,
    ring_used: u32,
    backlog: VecDeque<(u32, Vec<u8>)>,
    scheduler: Scheduler,
    rng: ChaCha8Rng,
    pub stats: DriverStats,
}

impl HostDriver {
    pub fn new(cfg: &HostConfig) -> Self {
        let mut host = HostMemory::new(HostAddr(cfg.iova_base), cfg.iova_len);
        let staging = HostAddr(KERNEL_BASE);
        let meta = staging.offset(STAGING_ENTRIES as u64 * ENTRY_SIZE);
        host.map_kernel(staging, (STAGING_ENTRIES as u64 + 1) * ENTRY_SIZE);
        host.map_kernel(HostAddr(CRED_ADDR), FRAME_SIZE);
        let layout = KernelLayout {
            staging,
            meta,
            cred: HostAddr(CRED_ADDR),
            queue: HostAddr(cfg.iova_base + QUEUE_OFFSET),
            tx_header: HostAddr(cfg.iova_base + TX_HEADER_OFFSET),
        };
        let mut kernel = KernelModel {
            cred_addr: HostAddr(CRED_ADDR),
            driver_state: DriverState::Alive,
            kernel_state: KernelState::Stable,
            functions: BTreeMap::new(),
            calls: Vec::new(),
            panic_reason: None,
        };
        kernel.register_function(KERNEL_TEXT + 0x100, "msgq_flush");
        kernel.register_function(KERNEL_TEXT + 0x200, "msgq_barrier");
        kernel.register_function(KERNEL_TEXT + 0x300, "msgq_notify");
        let mut cred = [0u8; 16];
        cred[UID_OFFSET as usize..][..4].copy_from_slice(&INITIAL_EUID.to_le_bytes());
        cred[EUID_OFFSET as usize..][..4].copy_from_slice(&INITIAL_EUID.to_le_bytes());
        host.cpu_write(layout.cred, &cred).expect("cred mapped");

        // Ring history: the last 63 messages up to `initial_seq`, all consumed.
        let last = cfg.initial_seq;
        for k in 0..QUEUE_ENTRIES.min(last + 1) {
            let seq = last - k;
            let idx = seq % QUEUE_ENTRIES;
            let e = build_entry(seq, 1, &[]);
            host.cpu_write(layout.queue.offset(idx as u64 * ENTRY_SIZE), &e).expect("queue mapped");
        }
        let read_ptr = (last + 1) % QUEUE_ENTRIES;
        let m = MsgqMetadata {
            p_read_outgoing: layout.tx_header.get(),
            rx_read_ptr: read_ptr,
            msg_count: QUEUE_ENTRIES,
            fcn_notify: KERNEL_TEXT + 0x300,
            fcn_notify_arg: 0x5a,
            fcn_backend_rw: 0,
            fcn_flush: KERNEL_TEXT + 0x100,
            fcn_barrier: KERNEL_TEXT + 0x200,
        };
        host.cpu_write(layout.meta, &m.to_bytes()).expect("meta mapped");
        host.cpu_write(layout.tx_header, &read_ptr.to_le_bytes()).expect("tx header mapped");
        HostDriver {
            host,
            kernel,
            layout,
            rx_avail: 0,
            last_seq: last,
            gsp_write: read_ptr,
            gsp_seq: last + 1,
            ring_used: 0,
            backlog: VecDeque::new(),
            scheduler: cfg.scheduler,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            stats: DriverStats::default(),
        }
    }

    pub fn layout(&self) -> KernelLayout {
        self.layout
    }

    pub fn rx_avail(&self) -> u32 {
        self.rx_avail
    }

    pub fn last_seq(&self) -> u32 {
        self.last_seq
    }

    pub fn set_scheduler(&mut self, s: Scheduler) {
        self.scheduler = s;
    }

    pub fn scheduler(&self) -> Scheduler {
        self.scheduler
    }

    pub fn metadata(&self) -> MsgqMetadata {
        let b = self.host.cpu_read(self.layout.meta, meta_off::LEN as u64).expect("meta mapped");
        MsgqMetadata::from_bytes(&b)
    }

    pub fn write_metadata(&mut self, m: &MsgqMetadata) {
        self.host.cpu_write(self.layout.meta, &m.to_bytes()).expect("meta mapped");
    }

    pub fn euid(&self) -> u32 {
        let b = self.host.cpu_read(self.layout.cred.offset(EUID_OFFSET), 4).expect("cred mapped");
        u32::from_le_bytes(b.try_into().unwrap())
    }

    pub fn entry_addr(&self, idx: u32) -> HostAddr {
        self.layout.queue.offset((idx % QUEUE_ENTRIES) as u64 * ENTRY_SIZE)
    }

    fn halted(&self) -> bool {
        self.kernel.driver_state == DriverState::Crashed || self.kernel.kernel_state == KernelState::Panicked
    }

    /// GSP posts one message of `elem_count` entries and bumps `rxAvail`;
    /// returns whether the scheduler woke the driver afterwards. Messages
    /// that do not fit in the ring wait until the driver frees entries.
    pub fn gsp_produce(&mut self, elem_count: u32, payload: &[u8]) -> bool {
        let elem_count = elem_count.clamp(1, STAGING_ENTRIES);
        self.backlog.push_back((elem_count, payload.to_vec()));
        self.rx_avail += elem_count;
        self.stats.produced += 1;
        self.flush_backlog();
        let wake = match self.scheduler {
            Scheduler::PayloadFirst => false,
            Scheduler::Randomized { wake_probability } => {
                self.rng.gen_bool(wake_probability.clamp(0.0, 1.0))
            }
        };
        if wake {
            self.stats.wakeups += 1;
            self.driver_receive();
        }
        wake
    }

    fn flush_backlog(&mut self) {
        while let Some((elem_count, _)) = self.backlog.front() {
            if self.ring_used + elem_count > QUEUE_ENTRIES {
                break;
            }
            let (elem_count, payload) = self.backlog.pop_front().unwrap();
            let head = build_entry(self.gsp_seq, elem_count, &payload);
            let at = self.entry_addr(self.gsp_write);
            self.host.cpu_write(at, &head).expect("queue mapped");
            for k in 1..elem_count {
                let at = self.entry_addr(self.gsp_write + k);
                self.host
                    .cpu_write(at, &[0u8; ENTRY_SIZE as usize])
                    .expect("queue mapped");
            }
            self.gsp_write = (self.gsp_write + elem_count) % QUEUE_ENTRIES;
            self.gsp_seq = self.gsp_seq.wrapping_add(1);
            self.ring_used += elem_count;
        }
    }

    /// One receive pass over the head message.
    pub fn driver_receive(&mut self) -> ReceiveOutcome {
        if self.halted() {
            return ReceiveOutcome::Halted;
        }
        if self.rx_avail == 0 {
            return ReceiveOutcome::Idle;
        }
        let meta = self.metadata();
        let head_idx = meta.rx_read_ptr % QUEUE_ENTRIES;
        let head = self.host.cpu_read(self.entry_addr(head_idx), ENTRY_SIZE).expect("queue mapped");
        let hdr = EntryHeader::parse(&head);
        let need = hdr.elem_count.max(1);
        if self.rx_avail < need {
            return ReceiveOutcome::Gated {
                need,
                avail: self.rx_avail,
            };
        }
        // Copy first, validate after; the staging buffer has no bound check.
        if need > STAGING_ENTRIES {
            self.stats.staging_overflows += 1;
        }
        for k in 0..need {
            let src = self.host.cpu_read(self.entry_addr(head_idx + k), ENTRY_SIZE).expect("queue mapped");
            let dst = self.layout.staging.offset(k as u64 * ENTRY_SIZE);
            if let Err(e) = self.host.cpu_write(dst, &src) {
                self.kernel.panic(format!("staging copy: {e}"));
                return ReceiveOutcome::Halted;
            }
        }
        let staged = self.host.cpu_read(self.layout.staging, ENTRY_SIZE).expect("staging mapped");
        if checksum32(&staged) != 0 {
            self.stats.retries += 1;
            return ReceiveOutcome::Retry(RetryReason::Checksum);
        }
        if hdr.seq != self.last_seq.wrapping_add(1) {
            self.stats.retries += 1;
            return ReceiveOutcome::Retry(RetryReason::Sequence);
        }
        self.last_seq = hdr.seq;
        self.rx_avail -= need;
        self.ring_used = self.ring_used.saturating_sub(need);
        self.stats.consumed += 1;
        self.apply_mark_consumed(need);
        self.flush_backlog();
        ReceiveOutcome::Consumed { n: need }
    }

    /// Runs receive passes until the queue is idle, gated or stuck.
    pub fn drain(&mut self) -> Vec<ReceiveOutcome> {
        let mut out = Vec::new();
        loop {
            let o = self.driver_receive();
            out.push(o);
            if !matches!(o, ReceiveOutcome::Consumed { .. }) {
                break;
            }
        }
        out
    }

    fn apply_mark_consumed(&mut self, n: u32) {
        let meta = self.metadata();
        let eff = msgq_rx_mark_consumed(&meta, n);
        let ptr_addr = self.layout.meta.offset(meta_off::RX_READ_PTR as u64);
        self.host.cpu_write(ptr_addr, &eff.new_read_ptr.to_le_bytes()).expect("meta mapped");
        if let Some((addr, v)) = eff.write {
            if let Err(e) = self.host.cpu_write(HostAddr(addr), &v.to_le_bytes()) {
                self.kernel.panic(format!("read-pointer write-back: {e}"));
                return;
            }
        }
        for call in eff.callbacks {
            let known = self.kernel.function_name(call.addr).is_some();
            self.kernel.calls.push(call);
            if !known {
                self.kernel.driver_state = DriverState::Crashed;
                return;
            }
        }
    }
}

// ---- fault buffer ----------------------------------------------------------

/// Bits in the per-batch read-fault page mask.
pub const PAGE_MASK_BITS: u64 = 512;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultBufferEntry {
    pub fault_address: u64,
    pub gpc_id: u32,
    pub client_id: u32,
    pub fault_type: u32,
}

impl FaultBufferEntry {
    pub fn utlb_id(&self) -> u32 {
        self.gpc_id
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuildMode {
    Debug,
    Release,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OobField {
    UtlbId(u32),
    PageIndexUnderflow,
    PageIndex(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseOutcome {
    Clean { utlb_id: u32, page_index: u64, known_gpc: bool },
    AssertionTriggered { utlb_id: u32 },
    OobDetected(Vec<OobField>),
}

pub fn parse_fault_entry(
    entry: &FaultBufferEntry,
    mode: BuildMode,
    num_gpcs: u32,
    utlbs_len: u32,
    sub_batch_base: u64,
) -> ParseOutcome {
    let utlb_id = entry.utlb_id();
    let utlb_oob = utlb_id >= utlbs_len;
    if utlb_oob && mode == BuildMode::Debug {
        return ParseOutcome::AssertionTriggered { utlb_id };
    }
    let mut oob = Vec::new();
    if utlb_oob {
        oob.push(OobField::UtlbId(utlb_id));
    }
    let page_index = match entry.fault_address.checked_sub(sub_batch_base) {
        None => {
            oob.push(OobField::PageIndexUnderflow);
            None
        }
        Some(d) => {
            let idx = d / FRAME_SIZE;
            if idx >= PAGE_MASK_BITS {
                oob.push(OobField::PageIndex(idx));
            }
            Some(idx)
        }
    };
    if oob.is_empty() {
        ParseOutcome::Clean {
            utlb_id,
            page_index: page_index.unwrap(),
            known_gpc: entry.gpc_id < num_gpcs,
        }
    } else {
        ParseOutcome::OobDetected(oob)
    }
}
