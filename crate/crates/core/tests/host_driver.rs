use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use vramsim::host_driver::*;

/// Byte-level re-execution of the driver's read-pointer update and write-back.
struct Listing {
    mem: HashMap<u64, u8>,
}

impl Listing {
    fn run(&mut self, p_read_outgoing: u64, mut rx_read_ptr: u32, msg_count: u32, backend_rw: u64, n: u32) -> u32 {
        rx_read_ptr = rx_read_ptr.wrapping_add(n);
        if rx_read_ptr >= msg_count {
            rx_read_ptr = rx_read_ptr.wrapping_sub(msg_count);
        }
        if backend_rw == 0 {
            for (i, b) in rx_read_ptr.to_le_bytes().iter().enumerate() {
                self.mem.insert(p_read_outgoing + i as u64, *b);
            }
        }
        rx_read_ptr
    }
}

fn random_triple(rng: &mut ChaCha8Rng) -> (u32, u32, u32) {
    let ptr = match rng.gen_range(0..4) {
        0 => u32::MAX - rng.gen_range(0..64),
        1 => rng.gen_range(0..128),
        _ => rng.gen(),
    };
    let count = match rng.gen_range(0..3) {
        0 => rng.gen_range(0..=64),
        1 => u32::MAX - rng.gen_range(0..64),
        _ => rng.gen(),
    };
    let n = match rng.gen_range(0..3) {
        0 => 17,
        1 => rng.gen_range(0..=64),
        _ => rng.gen(),
    };
    (ptr, count, n)
}

#[test]
fn mark_consumed_matches_listing_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut wrapped = 0;
    let mut single_sub_left_large = 0;
    for _ in 0..10_000 {
        let (ptr, count, n) = random_triple(&mut rng);
        let target = 0xffff_8880_0000_0000 + rng.gen_range(0..1u64 << 20) * 4;
        let backend = if rng.gen_bool(0.8) { 0 } else { rng.gen_range(1..u64::MAX) };
        let meta = MsgqMetadata {
            p_read_outgoing: target,
            rx_read_ptr: ptr,
            msg_count: count,
            fcn_backend_rw: backend,
            ..Default::default()
        };
        let mut reference = Listing { mem: HashMap::new() };
        let want = reference.run(target, ptr, count, backend, n);
        let eff = msgq_rx_mark_consumed(&meta, n);
        assert_eq!(eff.new_read_ptr, want, "{ptr:#x} {count} {n}");
        match eff.write {
            Some((addr, v)) => {
                assert_eq!(backend, 0);
                assert_eq!(addr, target);
                let bytes: Vec<u8> = (0..4).map(|i| reference.mem[&(target + i)]).collect();
                assert_eq!(v.to_le_bytes().to_vec(), bytes);
            }
            None => assert!(backend != 0 && reference.mem.is_empty()),
        }
        if ptr.checked_add(n).is_none() {
            wrapped += 1;
        }
        if want >= count {
            single_sub_left_large += 1;
        }
    }
    assert!(wrapped > 100 && single_sub_left_large > 100);
    assert_eq!(mark_consumed_read_ptr(0xFFFF_FFF9, 10, 17), 0);
    assert_eq!(mark_consumed_read_ptr(0, 100, 17), 17);
    assert_eq!(mark_consumed_read_ptr(5, 10, 17), 12);
}

#[test]
fn callbacks_fire_flush_barrier_notify() {
    let meta = MsgqMetadata {
        fcn_flush: 1,
        fcn_barrier: 2,
        fcn_notify: 3,
        fcn_notify_arg: 9,
        p_read_outgoing: 0x40,
        ..Default::default()
    };
    let eff = msgq_rx_mark_consumed(&meta, 1);
    let slots: Vec<_> = eff.callbacks.iter().map(|c| (c.slot, c.addr, c.args.clone())).collect();
    assert_eq!(
        slots,
        vec![
            (CallbackSlot::Flush, 1, vec![0x40, 4]),
            (CallbackSlot::Barrier, 2, vec![]),
            (CallbackSlot::Notify, 3, vec![1, 9]),
        ]
    );
}

fn inject(d: &mut HostDriver, elem_count: u32, evil: &MsgqMetadata, seq: u32) {
    let head = d.metadata().rx_read_ptr;
    d.host
        .dma_write(d.entry_addr(head), &build_entry(seq, elem_count, &[]))
        .unwrap();
    let mut page = vec![0u8; ENTRY_SIZE as usize];
    page[..meta_off::LEN].copy_from_slice(&evil.to_bytes());
    d.host.dma_write(d.entry_addr(head + 16), &page).unwrap();
}

fn appendix_payload(flush: u64) -> MsgqMetadata {
    MsgqMetadata {
        p_read_outgoing: CRED_ADDR + EUID_OFFSET,
        rx_read_ptr: 0xFFFF_FFF9,
        msg_count: 10,
        fcn_backend_rw: 0,
        fcn_flush: flush,
        ..Default::default()
    }
}

fn flooded() -> HostDriver {
    let mut d = HostDriver::new(&HostConfig::default());
    while d.rx_avail() < 17 {
        d.gsp_produce(1, &[]);
    }
    d
}

#[test]
fn appendix_payload_zeroes_euid_and_crashes_driver() {
    let mut d = flooded();
    let seq = d.last_seq() + 1;
    inject(&mut d, 17, &appendix_payload(0xdead_beef), seq);
    assert_eq!(d.euid(), INITIAL_EUID);
    assert_eq!(d.driver_receive(), ReceiveOutcome::Consumed { n: 17 });
    assert_eq!(d.euid(), 0);
    assert_eq!(d.kernel.driver_state, DriverState::Crashed);
    assert_eq!(d.kernel.kernel_state, KernelState::Stable);
}

#[test]
fn payload_without_flush_leaves_driver_running() {
    let mut d = flooded();
    let seq = d.last_seq() + 1;
    inject(&mut d, 17, &appendix_payload(0), seq);
    d.driver_receive();
    assert_eq!(d.euid(), 0);
    assert_eq!(d.kernel.driver_state, DriverState::Alive);
}

#[test]
fn availability_gate_and_bad_checksum() {
    let mut d = HostDriver::new(&HostConfig::default());
    for _ in 0..16 {
        d.gsp_produce(1, &[]);
    }
    let seq = d.last_seq() + 1;
    inject(&mut d, 17, &appendix_payload(0xdead_beef), seq);
    assert_eq!(d.driver_receive(), ReceiveOutcome::Gated { need: 17, avail: 16 });
    assert_eq!(d.euid(), INITIAL_EUID);

    let mut d = flooded();
    let seq = d.last_seq() + 1;
    inject(&mut d, 17, &appendix_payload(0xdead_beef), seq);
    let head = d.metadata().rx_read_ptr;
    let mut e = d.host.cpu_read(d.entry_addr(head), ENTRY_SIZE).unwrap();
    e[200] ^= 1;
    d.host.dma_write(d.entry_addr(head), &e).unwrap();
    let before = d.metadata();
    assert_eq!(d.driver_receive(), ReceiveOutcome::Retry(RetryReason::Checksum));
    assert_eq!(d.euid(), INITIAL_EUID);
    assert_ne!(d.metadata(), before, "copy happens before validation");
}

#[test]
fn sixteen_entries_fill_staging_only() {
    let mut d = flooded();
    let before = d.metadata();
    let seq = d.last_seq() + 1;
    let head = before.rx_read_ptr;
    d.host.dma_write(d.entry_addr(head), &build_entry(seq, 16, &[])).unwrap();
    assert_eq!(d.driver_receive(), ReceiveOutcome::Consumed { n: 16 });
    let after = d.metadata();
    assert_eq!(after.rx_read_ptr, (head + 16) % QUEUE_ENTRIES);
    assert_eq!(MsgqMetadata { rx_read_ptr: before.rx_read_ptr, ..after }, before);
}

/// Random interleavings of GSP traffic, receives and device-side rewrites
/// of queue entries that never claim more than 16 elements.
#[test]
fn benign_traces_never_touch_credentials() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trace in 0..10_000u64 {
        let mut d = HostDriver::new(&HostConfig {
            seed: trace,
            ..HostConfig::default()
        });
        let initial = d.metadata();
        for _ in 0..rng.gen_range(1..24) {
            match rng.gen_range(0..4) {
                0 | 1 => {
                    let payload: Vec<u8> = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect();
                    d.gsp_produce(rng.gen_range(1..=16), &payload);
                }
                2 => {
                    d.driver_receive();
                }
                _ => {
                    let idx = rng.gen_range(0..QUEUE_ENTRIES);
                    let seq = if rng.gen_bool(0.5) { d.last_seq() + 1 } else { rng.gen() };
                    let mut junk = vec![0u8; 256];
                    rng.fill(&mut junk[..]);
                    let mut e = build_entry(seq, rng.gen_range(0..=16), &junk);
                    if rng.gen_bool(0.2) {
                        e[300] ^= 4;
                    }
                    d.host.dma_write(d.entry_addr(idx), &e).unwrap();
                }
            }
        }
        d.drain();
        let m = d.metadata();
        assert!(m.rx_read_ptr < QUEUE_ENTRIES, "trace {trace}");
        assert_eq!(MsgqMetadata { rx_read_ptr: initial.rx_read_ptr, ..m }, initial, "trace {trace}");
        assert_eq!(d.euid(), INITIAL_EUID, "trace {trace}");
        assert_eq!(d.kernel.driver_state, DriverState::Alive);
        assert_eq!(d.kernel.kernel_state, KernelState::Stable);
        assert_eq!(d.stats.staging_overflows, 0);
    }
}

fn expected_outcome(gpc: u32, addr: u64, base: u64, utlbs_len: u32, mode: BuildMode) -> &'static str {
    if gpc >= utlbs_len {
        return match mode {
            BuildMode::Debug => "assert",
            BuildMode::Release => "oob",
        };
    }
    if addr < base || (addr - base) >> 12 >= 512 {
        "oob"
    } else {
        "clean"
    }
}

#[test]
fn fault_parse_grid() {
    let (num_gpcs, utlbs_len, base) = (6u32, 8u32, 0x4000_0000u64);
    let mut counts = HashMap::new();
    for gpc in 0..100u32 {
        for a in 0..100u64 {
            let addr = base - 8 * 4096 + a * 8 * 4096 - (a % 3) * 1024;
            let entry = FaultBufferEntry {
                fault_address: addr,
                gpc_id: gpc,
                client_id: 0,
                fault_type: 0,
            };
            for mode in [BuildMode::Debug, BuildMode::Release] {
                let got = parse_fault_entry(&entry, mode, num_gpcs, utlbs_len, base);
                let kind = match &got {
                    ParseOutcome::Clean { utlb_id, page_index, known_gpc } => {
                        assert_eq!(*utlb_id, gpc);
                        assert_eq!(*page_index, (addr - base) / 4096);
                        assert_eq!(*known_gpc, gpc < num_gpcs);
                        "clean"
                    }
                    ParseOutcome::AssertionTriggered { utlb_id } => {
                        assert_eq!(*utlb_id, gpc);
                        "assert"
                    }
                    ParseOutcome::OobDetected(fields) => {
                        assert_eq!(fields.contains(&OobField::UtlbId(gpc)), gpc >= utlbs_len);
                        assert_eq!(fields.contains(&OobField::PageIndexUnderflow), addr < base);
                        "oob"
                    }
                };
                assert_eq!(kind, expected_outcome(gpc, addr, base, utlbs_len, mode), "gpc {gpc} addr {addr:#x} {mode:?}");
                *counts.entry((mode == BuildMode::Debug, kind)).or_insert(0) += 1;
            }
        }
    }
    assert!(counts.len() >= 5, "{counts:?}");
}

#[test]
fn scan_picks_lowest_of_tied_maxima() {
    let mut dump = vec![0u8; 63 * ENTRY_SIZE as usize];
    for i in [10usize, 20, 30] {
        dump[i * ENTRY_SIZE as usize..][..4].copy_from_slice(&500u32.to_le_bytes());
    }
    let s = scan_expected_seq(&dump).unwrap();
    assert_eq!((s.head_index, s.payload_index, s.expected_seq), (11, 27, 501));
}
