use attack_engine::privesc::{payload_metadata, PrivescConfig};
use attack_engine::runner::{run_privesc, run_seed, victim_tag, Scenario};
use attack_engine::*;
use proptest::prelude::*;
use vramsim::device_memory::{MemError, DEFAULT_IOVA_LEN};
use vramsim::host_driver::{DriverState, KernelState, INITIAL_EUID, QUEUE_ENTRIES, QUEUE_OFFSET};
use vramsim::page_table::Pte;
use vramsim::{Guest, GuestError, HostAddr, PhysAddr, VirtAddr, FRAME_SIZE, GIB, MEDIUM_PAGE};

fn scenario(seed: u64) -> Scenario {
    Scenario {
        capacity: 24 * GIB,
        seed,
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn tags_name_their_chunk(chunk in 0u64..(1 << 32)) {
        let va = VirtAddr(chunk * MEDIUM_PAGE);
        prop_assert_eq!(untag(tag_of(va)), Some(va));
    }

    #[test]
    fn untagged_words_are_rejected(w in any::<u64>()) {
        prop_assume!(w >> 48 != 0xA77A);
        prop_assert_eq!(untag(w), None);
    }
}

#[test]
fn same_seed_same_transcript() {
    let a = run_seed(&scenario(7), 0).unwrap().0;
    let b = run_seed(&scenario(7), 0).unwrap().0;
    assert!(a.reached_rw, "{:?}", a.transcript.error);
    assert_eq!(
        serde_json::to_string(&a.transcript).unwrap(),
        serde_json::to_string(&b.transcript).unwrap()
    );
    let c = run_seed(&scenario(8), 0).unwrap().0;
    assert_ne!(
        serde_json::to_string(&a.transcript).unwrap(),
        serde_json::to_string(&c.transcript).unwrap()
    );
}

#[test]
fn handle_reads_device_memory_and_tampers_with_victim() {
    let sc = Scenario {
        victim_fraction: 0.05,
        ..scenario(3)
    };
    let (report, mut setup, handle) = run_seed(&sc, 200).unwrap();
    assert!(report.reached_rw, "{:?}", report.transcript.error);
    assert!(report.confined());
    assert!(report.occupancy >= 0.9);
    let check = report.handle_check.unwrap();
    assert_eq!((check.frames, check.mismatches), (200, 0));
    let phases: Vec<_> = report.transcript.phases.iter().map(|p| p.phase).collect();
    assert_eq!(phases.first(), Some(&Some(Phase::Fill)));
    assert_eq!(phases.last(), Some(&Some(Phase::Escalated)));

    let mut rw = handle.unwrap();
    let vid = setup.victim.unwrap();
    let vctx = setup.sim.session(vid).ctx;
    let va = setup.victim_pages[5];
    let Some(vramsim::page_table::Target::Vram(pa)) = setup.sim.resolve_oracle(vctx, va) else {
        panic!("victim page resident in VRAM")
    };
    {
        let mut v = Guest::new(&mut setup.sim, vid);
        assert_eq!(v.read_u64(va).unwrap(), victim_tag(5));
    }
    {
        let mut g = Guest::new(&mut setup.sim, setup.attacker);
        let seen = rw.read_phys(&mut g, pa, 8).unwrap();
        assert_eq!(u64::from_le_bytes(seen.try_into().unwrap()), victim_tag(5));
        rw.write_phys(&mut g, pa, &0xBAD_C0DEu64.to_le_bytes()).unwrap();
    }
    let mut v = Guest::new(&mut setup.sim, vid);
    assert_eq!(v.read_u64(va).unwrap(), 0xBAD_C0DE);
}

#[test]
fn host_window_follows_aperture_and_iommu() {
    let sc = scenario(11);
    let (report, mut setup, handle) = run_seed(&sc, 0).unwrap();
    assert!(report.reached_rw);
    let iova = sc.attack.iova_base;
    let mut dma = escalate_to_host(handle.unwrap(), iova);
    let queue = HostAddr(iova + QUEUE_OFFSET);
    let truth = setup.sim.read_host_oracle(queue, 2 * FRAME_SIZE).unwrap();
    let vram_truth = setup.sim.read_phys_oracle(PhysAddr(iova), 64).unwrap();
    let mut g = Guest::new(&mut setup.sim, setup.attacker);
    assert_eq!(dma.read(&mut g, queue, 2 * FRAME_SIZE).unwrap(), truth);

    let outside = HostAddr(iova + DEFAULT_IOVA_LEN);
    match dma.read(&mut g, outside, 8) {
        Err(AttackError::Guest(GuestError::Memory(MemError::IommuFault { .. }))) => {}
        other => panic!("expected an IOMMU fault, got {other:?}"),
    }
    match dma.write(&mut g, HostAddr(iova + 16 * DEFAULT_IOVA_LEN), &[0; 4]) {
        Err(AttackError::Guest(GuestError::Memory(MemError::IommuFault { .. }))) => {}
        other => panic!("expected an IOMMU fault, got {other:?}"),
    }
    // Kernel virtual addresses do not even fit in a PTE.
    let cred = HostAddr(vramsim::host_driver::CRED_ADDR);
    assert!(matches!(dma.write(&mut g, cred, &[0; 4]), Err(AttackError::Pte(_))));
    assert_eq!(g.geteuid(), INITIAL_EUID);

    // Same frame number with the VRAM aperture lands in device memory.
    let va = dma.rw.map(&mut g, &Pte::vram(PhysAddr(iova))).unwrap();
    assert_eq!(g.read_data(va, 64).unwrap(), vram_truth);
}

#[test]
fn queue_overflow_payload_zeroes_euid() {
    let (report, pr, _) = run_privesc(&scenario(5), &PrivescConfig::default()).unwrap();
    assert!(report.reached_rw);
    let pr = pr.unwrap();
    assert!(pr.success);
    assert_eq!((pr.euid_before, pr.euid_after), (INITIAL_EUID, 0));
    assert_eq!(pr.driver_state, DriverState::Crashed);
    assert_eq!(pr.kernel_state, KernelState::Stable);
    assert_eq!(pr.attempts, 1);
    assert_eq!(pr.callbacks.len(), 1, "driver dies at the first callback");
}

#[test]
fn payload_without_flush_leaves_inconsistent_queue() {
    let cfg = PrivescConfig {
        fcn_flush: 0,
        ..Default::default()
    };
    let (_, pr, _) = run_privesc(&scenario(5), &cfg).unwrap();
    let pr = pr.unwrap();
    assert_eq!(pr.euid_after, 0);
    assert_eq!(pr.driver_state, DriverState::Alive);
    assert_eq!(pr.kernel_state, KernelState::Stable);
    assert!(!pr.queue_consistent);
    assert!(pr.unstable);
    assert_eq!(payload_metadata(0).msg_count, 10);
    assert_ne!(payload_metadata(0).msg_count, QUEUE_ENTRIES);
}

#[test]
fn lost_races_are_retried() {
    let sc = Scenario {
        wake_probability: 0.08,
        ..scenario(5)
    };
    let (_, pr, _) = run_privesc(&sc, &PrivescConfig::default()).unwrap();
    let pr = pr.unwrap();
    assert!(pr.success);
    assert!(pr.race_losses > 0, "the driver never woke during a flood");
    assert_eq!(pr.attempts, pr.race_losses + 1);
    assert_eq!(pr.driver_state, DriverState::Crashed);
}

#[test]
fn unusable_chosen_site_is_rejected() {
    let mut sc = scenario(1);
    let geo = sc.sim_config().geometry().unwrap();
    let far = vramsim::device_memory::reference_profile_labeled(&geo)
        .into_iter()
        .find(|(l, _)| *l == "F3")
        .unwrap()
        .1;
    sc.attack.chosen_site = Some(far);
    let (report, _, handle) = run_seed(&sc, 0).unwrap();
    assert!(handle.is_none());
    assert!(report.transcript.error.unwrap().contains("not eligible"));
}
