use vramsim::uvm_allocator::allocations_to_next_pt_region;
use vramsim::{Guest, SimConfig, Simulator, SpikeDetector, GIB, KIB, MIB};

/// Fills memory from a helper session, then issues tail-only 2 MiB+4 KiB
/// allocations from a fresh session, opening a 2 MiB hole whenever memory
/// runs out. Returns the 0-based indices of allocations that spiked.
fn tail_trace(allocs: usize) -> (Vec<usize>, Vec<usize>) {
    let mut sim = Simulator::new(SimConfig::with_capacity(GIB)).unwrap();
    let filler = sim.create_session("filler").unwrap();
    let probe = sim.create_session("probe").unwrap();
    let mut big = Vec::new();
    {
        let mut g = Guest::new(&mut sim, filler);
        while g.mem_get_info() > 0 {
            let va = g.alloc(2 * MIB).unwrap();
            g.timed_touch(va, 8).unwrap();
            big.push(va);
        }
    }
    let mut spikes = Vec::new();
    let mut evicting = Vec::new();
    let mut det = SpikeDetector::new(10.0);
    det.prime(1);
    for i in 0..allocs {
        while Guest::new(&mut sim, probe).mem_get_info() == 0 {
            let hole = big.remove(0);
            Guest::new(&mut sim, filler).cpu_touch(hole, 2 * MIB).unwrap();
        }
        let before = sim.allocator().events().iter().filter(|e| e.event == "evict").count();
        let mut g = Guest::new(&mut sim, probe);
        let va = g.alloc(2 * MIB + 4 * KIB).unwrap();
        let lat = g.timed_touch(va.offset(2 * MIB), 4 * KIB).unwrap();
        if det.observe(lat) {
            spikes.push(i);
        }
        let after = sim.allocator().events().iter().filter(|e| e.event == "evict").count();
        if after > before {
            evicting.push(i);
        }
    }
    (spikes, evicting)
}

#[test]
fn spikes_follow_region_arithmetic() {
    let first = allocations_to_next_pt_region(352 * KIB) as usize;
    let period = allocations_to_next_pt_region(0) as usize;
    assert_eq!((first, period), (420, 508));
    let n = first + 10 * period + 5;
    let (spikes, evicting) = tail_trace(n);
    let expected: Vec<usize> = (0..=10).map(|k| first + k * period).collect();
    assert_eq!(spikes, expected);
    assert_eq!(spikes, evicting);
}

