use vramsim::{Guest, SimConfig, Simulator, GIB, KIB, MIB};

const REGION: u64 = 2 * MIB;

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Big,
    Splintered,
    Tail,
}

/// Data bytes mapped per region's worth of leaf-entry bytes, measured from
/// region growth over `n` allocations of the pattern.
fn budget(p: Pattern, n: u64) -> (u64, u64) {
    let mut sim = Simulator::new(SimConfig::with_capacity(4 * GIB)).unwrap();
    let sid = sim.create_session("probe").unwrap();
    let r0 = sim.allocator().regions()[0].clone();
    let mut data = 0;
    for _ in 0..n {
        let mut g = Guest::new(&mut sim, sid);
        match p {
            Pattern::Big => {
                let va = g.alloc(2 * MIB).unwrap();
                g.timed_touch(va, 2 * MIB).unwrap();
                data += 2 * MIB;
            }
            Pattern::Splintered => {
                let va = g.alloc(2 * MIB).unwrap();
                g.timed_touch(va, 2 * MIB).unwrap();
                g.cpu_touch(va.offset(64 * KIB), 64 * KIB).unwrap();
                data += 2 * MIB;
            }
            Pattern::Tail => {
                let va = g.alloc(2 * MIB + 4 * KIB).unwrap();
                g.timed_touch(va.offset(2 * MIB), 4 * KIB).unwrap();
                data += 2 * MIB + 4 * KIB;
            }
        }
    }
    let regions = sim.allocator().regions();
    assert_eq!(regions.len(), 1, "{p:?} spilled into a second region");
    let r = &regions[0];
    let leaf = match p {
        Pattern::Big => r.top - r0.top,
        _ => r.bottom - r0.bottom,
    };
    (data, leaf)
}

#[test]
fn two_mib_pages_cost_one_pd0_entry() {
    let (data, leaf) = budget(Pattern::Big, 64);
    assert_eq!(leaf, 64 * 16);
    assert_eq!(data / leaf, 128 * 1024);
    assert_eq!(data * REGION / leaf, 256 * GIB);
}

#[test]
fn splintered_pages_cost_one_small_table() {
    let (data, leaf) = budget(Pattern::Splintered, 64);
    assert_eq!(leaf, 64 * 256);
    assert_eq!(data / leaf, 8 * 1024);
    assert_eq!(data * REGION / leaf, 16 * GIB);
}

#[test]
fn tail_pages_cost_one_full_table() {
    let (data, leaf) = budget(Pattern::Tail, 64);
    assert_eq!(leaf, 64 * 4 * KIB);
    assert_eq!(data / leaf, 513);
    let measured = data * REGION / leaf;
    let alloc = 2 * MIB + 4 * KIB;
    assert!(measured.abs_diff(GIB) <= alloc, "{measured}");
}

#[test]
fn dense_fill_is_thirty_one_of_thirty_two() {
    let mut sim = Simulator::new(SimConfig::with_capacity(16 * GIB)).unwrap();
    let sid = sim.create_session("probe").unwrap();
    let fill = sim.allocator().regions()[0].fill;
    let fit = (REGION - fill) / (256 + 16);
    let mut created_at = None;
    for i in 0..fit + 2 {
        let mut g = Guest::new(&mut sim, sid);
        let va = g.alloc(2 * MIB).unwrap();
        g.timed_touch(va, 2 * MIB).unwrap();
        g.cpu_touch(va.offset(3 * 64 * KIB), 64 * KIB).unwrap();
        if created_at.is_none() && sim.allocator().regions().len() > 1 {
            created_at = Some(i);
        }
    }
    assert_eq!(created_at, Some(fit));
    let d = sim.allocator().region_density(sim.memory(), 0);
    assert_eq!(d.tables, fit);
    assert_eq!(d.full_minus_one, fit);
    assert_eq!(d.valid * 32, d.slots * 31);
    assert_eq!(((2 * MIB - 4096 - 32) / 272), 7694);
}
