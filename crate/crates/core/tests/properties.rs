use proptest::prelude::*;
use std::collections::HashMap;
use vramsim::device_memory::{reference_profile_labeled, DramGeometry};
use vramsim::page_table::*;
use vramsim::*;

proptest! {
    #[test]
    fn pte_roundtrip(pfn in 0u64..(1 << 46), ro: bool, pr: bool, valid: bool, ap in 0u8..4) {
        let p = Pte {
            flags: PteFlags { valid, privileged: pr, read_only: ro, aperture: Aperture::from_bits(ap) },
            pfn,
        };
        let raw = encode_pte(&p).unwrap();
        let d = decode_pte(raw);
        prop_assert_eq!(d.pte, p);
        prop_assert!(!d.has_warning());
    }

    #[test]
    fn pfn_bit_flip_moves_by_jump(pfn in 0u64..(1 << 40), bit in 8u32..48) {
        let raw = encode_pte(&Pte::vram(PhysAddr(pfn * FRAME_SIZE))).unwrap();
        let flipped = decode_pte(raw ^ (1 << bit)).pte;
        let moved = flipped.address().abs_diff(pfn * FRAME_SIZE);
        prop_assert_eq!(moved, pte_bit_to_jump(bit).unwrap());
    }

    #[test]
    fn locate_inverts_address_of(frac in 0.0f64..1.0) {
        let g = DramGeometry::new(4 * GIB, 16, 2 * KIB).unwrap();
        let a = PhysAddr(((4 * GIB) as f64 * frac) as u64);
        let l = g.locate(a);
        prop_assert_eq!(g.address_of(l), Some(a));
    }
}

#[test]
fn profiled_sites_jump_distances() {
    let g = DramGeometry::new(48 * GIB, 16, 2 * KIB).unwrap();
    let want = [
        ("A1", 16 * MIB),
        ("B1", 64 * MIB),
        ("C1", 16 * MIB),
        ("C2", GIB),
        ("D1", 16 * MIB),
        ("E1", 4 * GIB),
        ("F1", 256 * MIB),
        ("F2", 512 * MIB),
        ("F3", 32 * GIB),
    ];
    let got: Vec<_> = reference_profile_labeled(&g)
        .into_iter()
        .map(|(l, s)| (l, pte_bit_to_jump(s.pte_bit()).unwrap()))
        .collect();
    assert_eq!(got, want);
    assert!(pte_bit_to_jump(7).is_err() && pte_bit_to_jump(54).is_err());
}

#[derive(Clone, Debug)]
enum Op {
    Alloc(u8),
    Touch(usize, u16, u16),
    Cpu(usize, u16, u16),
    Write(usize, u16, u64),
    Read(usize, u16),
    Free(usize),
}

const SIZES: [u64; 5] = [4 * KIB, 64 * KIB, 256 * KIB, 2 * MIB, 2 * MIB + 4 * KIB];

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => (0u8..5).prop_map(Op::Alloc),
        3 => (any::<usize>(), any::<u16>(), any::<u16>()).prop_map(|(a, o, l)| Op::Touch(a, o, l)),
        1 => (any::<usize>(), any::<u16>(), any::<u16>()).prop_map(|(a, o, l)| Op::Cpu(a, o, l)),
        3 => (any::<usize>(), any::<u16>(), any::<u64>()).prop_map(|(a, o, v)| Op::Write(a, o, v)),
        3 => (any::<usize>(), any::<u16>()).prop_map(|(a, o)| Op::Read(a, o)),
        1 => any::<usize>().prop_map(Op::Free),
    ]
}

/// Maps a 16-bit fraction onto an 8-byte-aligned offset inside `size`.
fn place(size: u64, frac: u16) -> u64 {
    (size * frac as u64 / 65536) & !7
}

fn check_mappings(sim: &Simulator) -> Result<(), TestCaseError> {
    sim.allocator().check_invariants().map_err(TestCaseError::fail)?;
    for p in sim.allocator().lru_order() {
        let m = sim.walk_oracle(p.ctx, p.va).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(m.size, p.size);
        prop_assert_eq!(m.resolve(p.va), Target::Vram(p.phys));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn allocator_traces_keep_invariants(ops in prop::collection::vec(op(), 1..120), two in any::<bool>(), mib in prop::sample::select(vec![16u64, 24, 64])) {
        let mut sim = Simulator::new(SimConfig::with_capacity(mib * MIB)).unwrap();
        let mut sids = vec![sim.create_session("a").unwrap()];
        if two {
            sids.push(sim.create_session("b").unwrap());
        }
        let mut live: Vec<(SessionId, VirtAddr, u64)> = Vec::new();
        let mut shadow: HashMap<u64, u64> = HashMap::new();
        for (i, o) in ops.into_iter().enumerate() {
            let sid = sids[i % sids.len()];
            let pick = |k: usize| (!live.is_empty()).then(|| live[k % live.len()]);
            match o {
                Op::Alloc(k) => {
                    let size = SIZES[k as usize];
                    let va = Guest::new(&mut sim, sid).alloc(size).unwrap();
                    live.push((sid, va, size));
                }
                Op::Touch(k, off, len) => if let Some((s, va, size)) = pick(k) {
                    let o = place(size, off);
                    let l = (place(size - o, len)).max(1);
                    Guest::new(&mut sim, s).timed_touch(va.offset(o), l).unwrap();
                },
                Op::Cpu(k, off, len) => if let Some((s, va, size)) = pick(k) {
                    let o = place(size, off);
                    let l = (place(size - o, len)).max(1);
                    let _ = Guest::new(&mut sim, s).cpu_touch(va.offset(o), l);
                },
                Op::Write(k, off, v) => if let Some((s, va, size)) = pick(k) {
                    let a = va.offset(place(size, off));
                    Guest::new(&mut sim, s).write_u64(a, v).unwrap();
                    shadow.insert(a.get() ^ (s.0 as u64) << 60, v);
                },
                Op::Read(k, off) => if let Some((s, va, size)) = pick(k) {
                    let a = va.offset(place(size, off));
                    let got = Guest::new(&mut sim, s).read_u64(a).unwrap();
                    let want = shadow.get(&(a.get() ^ (s.0 as u64) << 60)).copied().unwrap_or(0);
                    prop_assert_eq!(got, want);
                },
                Op::Free(k) => if let Some((s, va, size)) = pick(k) {
                    Guest::new(&mut sim, s).free(va).unwrap();
                    live.retain(|&(ls, lv, _)| !(ls == s && lv == va));
                    shadow.retain(|&key, _| {
                        let a = key & ((1 << 60) - 1);
                        key >> 60 != s.0 as u64 || a < va.get() || a >= va.get() + size
                    });
                    prop_assert!(Guest::new(&mut sim, s).free(va).is_err());
                },
            }
            check_mappings(&sim)?;
            let c = sim.allocator().frame_counts();
            prop_assert_eq!(c.free * FRAME_SIZE, Guest::new(&mut sim, sid).mem_get_info());
        }
        for s in sim.sessions() {
            prop_assert_eq!(s.violations, 0);
        }
    }
}
