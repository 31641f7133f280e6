//! Property tests for the model invariants.

use hmrsim::analytics::{self, Curve, RateConvention, RecoveryConstants, WorkloadConstants};
use hmrsim::asm::{assemble, Program};
use hmrsim::cluster::{ClusterConfig, EventKind, RunStatus};
use hmrsim::cpu::{Core, CoreConfig, DataPort, DataReq, MemResponse, OutputBundle, RF_WRITE_PORTS};
use hmrsim::faults::{FaultEvent, FaultKind, FaultLocation, IfaceField, Protection};
use hmrsim::hmr::{check_pair, vote_triple, Dissenter, HmrConfig, HmrOptions, Mode};
use hmrsim::interconnect::{Tcdm, TcdmResponse};
use hmrsim::recovery::{
    ecc_decode, ecc_encode, rapid_recover, EccStatus, RapidBudgets, RecoveryRegion, TclsFsm,
    TclsState, CODEWORD_BITS,
};
use hmrsim::scenario::MatmulScenario;
use hmrsim::workload::MatmulSpec;
use proptest::prelude::*;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn bundle() -> impl Strategy<Value = OutputBundle> {
    (
        any::<u32>(),
        any::<bool>(),
        any::<u32>(),
        any::<u32>(),
        any::<bool>(),
        0u8..16,
    )
        .prop_map(
            |(ifetch_addr, valid, addr, wdata, we, byte_enable)| OutputBundle {
                ifetch_addr,
                data_req: DataReq {
                    valid,
                    addr,
                    wdata,
                    we,
                    byte_enable,
                },
            },
        )
}

/// Majority computed one bit at a time.
fn oracle_bit_majority(a: u32, b: u32, c: u32) -> u32 {
    (0..32).fold(0, |acc, i| {
        let ones = (a >> i & 1) + (b >> i & 1) + (c >> i & 1);
        acc | u32::from(ones >= 2) << i
    })
}

fn oracle_vote(a: &OutputBundle, b: &OutputBundle, c: &OutputBundle) -> OutputBundle {
    let (x, y, z) = (&a.data_req, &b.data_req, &c.data_req);
    let bit = |p: bool, q: bool, r: bool| u8::from(p) + u8::from(q) + u8::from(r) >= 2;
    OutputBundle {
        ifetch_addr: oracle_bit_majority(a.ifetch_addr, b.ifetch_addr, c.ifetch_addr),
        data_req: DataReq {
            valid: bit(x.valid, y.valid, z.valid),
            addr: oracle_bit_majority(x.addr, y.addr, z.addr),
            wdata: oracle_bit_majority(x.wdata, y.wdata, z.wdata),
            we: bit(x.we, y.we, z.we),
            byte_enable: oracle_bit_majority(
                x.byte_enable.into(),
                y.byte_enable.into(),
                z.byte_enable.into(),
            ) as u8,
        },
    }
}

/// Flips one bit of one field; `sel` picks the field and bit.
fn corrupt(b: &OutputBundle, sel: u32) -> OutputBundle {
    let mut o = *b;
    let bit = sel % 32;
    match (sel / 32) % 6 {
        0 => o.ifetch_addr ^= 1 << bit,
        1 => o.data_req.valid ^= true,
        2 => o.data_req.addr ^= 1 << bit,
        3 => o.data_req.wdata ^= 1 << bit,
        4 => o.data_req.we ^= true,
        _ => o.data_req.byte_enable ^= 1 << (bit % 4),
    }
    o
}

proptest! {
    #![proptest_config(cases(10_000))]

    #[test]
    fn voter_matches_bitwise_oracle(a in bundle(), b in bundle(), c in bundle()) {
        let r = vote_triple(&a, &b, &c);
        prop_assert_eq!(r.output, oracle_vote(&a, &b, &c));
        prop_assert_eq!(r.error, !(a == b && b == c));
    }

    #[test]
    fn checker_gates_iff_inputs_differ(a in bundle(), b in bundle(), same in any::<bool>()) {
        let b = if same { a } else { b };
        let r = check_pair(&a, &b);
        prop_assert_eq!(r.error, a != b);
        if r.error {
            prop_assert!(!r.output.data_req.valid && !r.output.data_req.we);
        } else {
            prop_assert_eq!(r.output, a);
        }
    }

    #[test]
    fn single_slot_corruption_masked(a in bundle(), slot in 0usize..3, sel in 0u32..192, extra in 0u32..192) {
        let mut v = [a, a, a];
        v[slot] = corrupt(&corrupt(&a, sel), extra);
        let r = vote_triple(&v[0], &v[1], &v[2]);
        prop_assert_eq!(r.output, a);
        if v[slot] != a {
            prop_assert_eq!(r.dissenter, Dissenter::Slot(slot as u8));
        } else {
            prop_assert_eq!(r.dissenter, Dissenter::None);
        }
    }

    #[test]
    fn ecc_round_trip(w in any::<u32>(), k in 0..CODEWORD_BITS) {
        let cw = ecc_encode(w);
        prop_assert_eq!(ecc_decode(cw), (w, EccStatus::Ok));
        prop_assert_eq!(ecc_decode(cw.flip(k)), (w, EccStatus::Corrected(k)));
    }
}

proptest! {
    #![proptest_config(cases(256))]

    /// A requester that keeps asking for one bank is served within as many
    /// conflicting cycles as there are ports.
    #[test]
    fn round_robin_starvation_free(
        ports in 2usize..13,
        victim_seed in any::<usize>(),
        traffic in prop::collection::vec(prop::collection::vec(any::<bool>(), 12), 40),
    ) {
        let banks = 4;
        let victim = victim_seed % ports;
        let mut t = Tcdm::new(0x1000, 1024, banks, ports);
        let mut waited = 0;
        for row in &traffic {
            let mut reqs = vec![(victim, DataReq::load(0x1000))];
            for p in (0..ports).filter(|&p| p != victim && row[p]) {
                reqs.push((p, DataReq::store(0x1000 + 4 * banks as u32 * p as u32, p as u32)));
            }
            let resp = t.tcdm_cycle(&reqs);
            if matches!(resp[0].1, TcdmResponse::Granted { .. }) {
                waited = 0;
            } else {
                waited += 1;
                prop_assert!(waited < ports, "victim {victim} waited {waited} cycles");
            }
            let granted_per_bank = resp
                .iter()
                .zip(&reqs)
                .filter(|(r, _)| matches!(r.1, TcdmResponse::Granted { .. }))
                .fold(vec![0; banks], |mut acc, (_, (_, q))| {
                    acc[t.bank_index(q.addr)] += 1;
                    acc
                });
            prop_assert!(granted_per_bank.iter().all(|&g| g <= 1));
        }
    }

    /// Granted writes applied in grant order to a flat shadow give the same
    /// memory, and every granted read sees the shadow value.
    #[test]
    fn tcdm_history_is_serial(
        ops in prop::collection::vec(prop::collection::vec((0usize..8, 0u32..16, any::<u32>(), any::<bool>()), 1..8), 1..60),
    ) {
        let mut t = Tcdm::new(0x2000, 64, 4, 8);
        let mut shadow = [0u32; 16];
        for cycle in &ops {
            let mut seen = std::collections::BTreeSet::new();
            let reqs: Vec<(usize, DataReq)> = cycle
                .iter()
                .filter(|(p, ..)| seen.insert(*p))
                .map(|&(p, w, v, we)| {
                    let a = 0x2000 + 4 * w;
                    (p, if we { DataReq::store(a, v) } else { DataReq::load(a) })
                })
                .collect();
            let resp = t.tcdm_cycle(&reqs);
            for ((_, q), (_, r)) in reqs.iter().zip(&resp) {
                if let TcdmResponse::Granted { rdata } = r {
                    let w = ((q.addr - 0x2000) / 4) as usize;
                    if q.we {
                        shadow[w] = q.wdata;
                    } else {
                        prop_assert_eq!(*rdata, shadow[w]);
                    }
                }
            }
        }
        prop_assert_eq!(t.read_block(0x2000, 16), shadow.to_vec());
    }

    #[test]
    fn region_frozen_while_blocked(
        pc in any::<u32>(),
        writes in prop::collection::vec((1u8..32, any::<u32>()), 0..3),
    ) {
        let core = Core::new(CoreConfig::default());
        let mut region = RecoveryRegion::from_state(core.state());
        let before = region.digest();
        let mut ports = hmrsim::cpu::BackupPorts { pc_write: Some(pc), ..Default::default() };
        for w in writes.into_iter().take(RF_WRITE_PORTS) {
            ports.rf_writes.push(w);
        }
        region.commit(&ports, true);
        prop_assert_eq!(region.digest(), before);
        prop_assert!(region.decode().is_ok());
    }

    /// A hardware restore takes exactly the configured phase budgets, never
    /// writes more than two registers per cycle and leaves every member
    /// equal to the region contents.
    #[test]
    fn rapid_restore_identity(
        setup_clear in 1u32..9,
        extra_halt in 0u32..6,
        regs in prop::array::uniform31(any::<u32>()),
        pc in any::<u32>(),
        members in prop::sample::select(vec![vec![0usize, 1], vec![0, 1, 2], vec![3, 7, 11]]),
        scramble in any::<u32>(),
    ) {
        let cfg = CoreConfig::default();
        let budgets = RapidBudgets {
            setup_clear,
            halt_ack: cfg.debug_halt_latency + extra_halt,
            restore: 16,
        };
        let mut reference = Core::new(cfg);
        reference.state_mut().pc = pc & !3;
        for (i, v) in regs.iter().enumerate() {
            reference.state_mut().set_reg(i as u8 + 1, *v);
        }
        let region = RecoveryRegion::from_state(reference.state());
        let mut cores: Vec<Core> = (0..12).map(|_| Core::new(cfg)).collect();
        for &m in &members {
            for r in 1..32u8 {
                cores[m].state_mut().set_reg(r, scramble.rotate_left(r.into()) ^ u32::from(r));
            }
        }
        let t = rapid_recover(&mut cores, &members, &region, budgets).unwrap();
        prop_assert_eq!(t.total, u64::from(budgets.total()));
        prop_assert_eq!(t.phases.iter().map(|p| p.cycles).sum::<u64>(), t.total);
        prop_assert!(t.max_rf_writes_per_cycle <= RF_WRITE_PORTS);
        for &m in &members {
            prop_assert!(cores[m].state().same_architecture(reference.state()));
        }
    }

    /// The software-resynchronization sequencer only moves Run, Unload,
    /// Reload, Run.
    #[test]
    fn tcls_transitions_legal(events in prop::collection::vec((0u8..3, any::<u32>()), 1..40)) {
        let mut f = TclsFsm::new(0);
        let mut cycle = 0;
        for (kind, v) in events {
            cycle += 1;
            let before = f.state;
            match kind {
                0 => { f.on_error(cycle, true); }
                1 => { f.on_sp_write(cycle, v | 4, true); }
                _ => { f.on_sp_write(cycle, 0, true); }
            }
            let ok = matches!(
                (before, f.state),
                (a, b) if a == b
            ) || matches!(
                (before, f.state),
                (TclsState::Run, TclsState::Unload)
                    | (TclsState::Unload, TclsState::Reload)
                    | (TclsState::Reload, TclsState::Run)
            );
            prop_assert!(ok, "{before:?} -> {:?}", f.state);
        }
    }

    #[test]
    fn locked_ids_are_lowest(n in prop::sample::select(vec![6usize, 12, 18, 24]), tmr in any::<bool>()) {
        let mode = if tmr { Mode::Tmr } else { Mode::Dmr };
        let mut h = HmrConfig::new(n, HmrOptions::default()).unwrap();
        let mains: Vec<(usize, Mode)> = (0..n / mode.group_size()).map(|g| (g, mode)).collect();
        h.lock_static(&mains).unwrap();
        let ids: Vec<usize> = h.virtual_cores();
        prop_assert_eq!(ids, (0..n / mode.group_size()).collect::<Vec<_>>());
        for c in 0..n {
            let owner = h.owner(c).unwrap();
            prop_assert_eq!(h.virtual_id(c), owner);
        }
    }

    #[test]
    fn throughput_non_increasing_in_faults(n in 0.0f64..1e4, dn in 0.0f64..1e3) {
        let (wc, rc) = (WorkloadConstants::matmul(), RecoveryConstants::default());
        for c in Curve::ALL {
            let (_, g0) = analytics::perf_vs_fault_rate(c, &wc, &rc, n).unwrap();
            let (_, g1) = analytics::perf_vs_fault_rate(c, &wc, &rc, n + dn).unwrap();
            prop_assert!(g1 <= g0);
        }
    }

    #[test]
    fn ordering_flips_at_crossover(frac in 0.01f64..0.99) {
        let (wc, rc) = (WorkloadConstants::matmul(), RecoveryConstants::default());
        let x = analytics::crossover_rate(&wc, &rc).unwrap();
        let g = |c, r| analytics::gops_at_rate(c, &wc, &rc, r, RateConvention::Parametric);
        let below = x * frac;
        let above = x / frac;
        prop_assert!(g(Curve::DclsRapid, below) > g(Curve::TclsRapid, below));
        prop_assert!(g(Curve::DclsRapid, above) < g(Curve::TclsRapid, above));
    }
}

/// Flat test memory with a pseudo-random stall pattern.
#[derive(Clone)]
struct Ram {
    words: Vec<u32>,
    stalls: Vec<bool>,
    tick: usize,
}

impl DataPort for Ram {
    fn access(&mut self, req: &DataReq) -> MemResponse {
        self.tick += 1;
        if self.stalls[self.tick % self.stalls.len()] {
            return MemResponse::Stall;
        }
        let off = req.addr.wrapping_sub(0x1000_0000);
        let i = (off / 4) as usize;
        if !off.is_multiple_of(4) || i >= self.words.len() {
            return MemResponse::BusError;
        }
        if req.we {
            self.words[i] = req.wdata;
            MemResponse::Granted { rdata: 0 }
        } else {
            MemResponse::Granted {
                rdata: self.words[i],
            }
        }
    }
}

const REGS: [&str; 8] = ["x1", "x2", "x3", "x5", "x6", "x7", "x8", "x9"];

fn instr() -> impl Strategy<Value = String> {
    let r = || prop::sample::select(REGS.to_vec());
    prop_oneof![
        (
            prop::sample::select(vec![
                "add", "sub", "xor", "or", "and", "sll", "srl", "sra", "slt", "sltu", "mul"
            ]),
            r(),
            r(),
            r()
        )
            .prop_map(|(op, d, a, b)| format!("{op} {d}, {a}, {b}")),
        (
            prop::sample::select(vec!["addi", "xori", "ori", "andi", "slti"]),
            r(),
            r(),
            -2048i32..2048
        )
            .prop_map(|(op, d, a, i)| format!("{op} {d}, {a}, {i}")),
        (r(), 0u32..16).prop_map(|(d, w)| format!("lw {d}, {}(x10)", 4 * w)),
        (r(), 0u32..16).prop_map(|(s, w)| format!("sw {s}, {}(x10)", 4 * w)),
        (r(), 0i32..64).prop_map(|(d, o)| format!("lw {d}, {o}(x10)")),
        r().prop_map(|d| format!("csrr {d}, mcause")),
        r().prop_map(|s| format!("csrw mepc, {s}")),
        Just("li x4, 8\ncsrw mstatus, x4".to_string()),
        (r(), r()).prop_map(|(a, b)| format!("beq {a}, {b}, SKIP")),
        Just(".word 0xffffffff".to_string()),
    ]
}

fn program(body: &[String]) -> Program {
    let mut src = String::from("li x10, 0x10000000\n");
    for (i, l) in body.iter().enumerate() {
        src += &format!("l{i}:\n{}\n", l.replace("SKIP", &format!("l{}", i + 2)));
    }
    let n = body.len();
    src += &format!("l{n}:\nl{}:\n j l{n}\n", n + 1);
    assemble(&src, 0).expect("generated program assembles")
}

proptest! {
    #![proptest_config(cases(200))]

    /// Replaying the backup ports on a copy of the initial state tracks the
    /// core exactly, and an identical second core emits identical bundles.
    #[test]
    fn backup_ports_replay_and_lockstep(
        body in prop::collection::vec(instr(), 1..60),
        stalls in prop::collection::vec(prop::bool::weighted(0.2), 1..16),
        irqs in prop::collection::vec(prop::sample::select(vec![0u32, 0, 0, 1 << 16, 1 << 17, 1 << 18]), 1..32),
    ) {
        let prog = program(&body);
        let mut a = Core::new(CoreConfig::default());
        let mut b = a.clone();
        let mut mem_a = Ram { words: vec![0; 16], stalls, tick: 0 };
        let mut mem_b = mem_a.clone();
        let mut shadow = a.state().clone();
        for cycle in 0..300 {
            let irq = irqs[cycle % irqs.len()];
            let oa = a.step(&prog, &mut mem_a, irq, 0);
            let ob = b.step(&prog, &mut mem_b, irq, 0);
            prop_assert_eq!(oa.bundle, ob.bundle);
            prop_assert!(oa.commit.ports.rf_writes.len() <= RF_WRITE_PORTS);
            shadow.apply_ports(&oa.commit.ports);
            prop_assert!(shadow.same_architecture(a.state()), "diverged at cycle {cycle}");
        }
    }
}

fn small() -> MatmulSpec {
    MatmulSpec { m: 6, n: 6, k: 6 }
}

fn fault() -> impl Strategy<Value = FaultEvent> {
    let loc = prop_oneof![
        (1u8..32, 0u8..32)
            .prop_map(|(reg, bit)| (FaultLocation::RfBit { reg, bit }, FaultKind::Seu)),
        (0u8..32).prop_map(|bit| (FaultLocation::PcBit { bit }, FaultKind::Seu)),
        (prop::sample::select(IfaceField::ALL.to_vec()), 0u8..32).prop_map(|(field, bit)| (
            FaultLocation::InterfaceBit {
                field,
                bit: bit % field.width() as u8
            },
            FaultKind::Set
        )),
    ];
    (0u64..1500, 0usize..12, loc).prop_map(|(cycle, target_core, (location, kind))| FaultEvent {
        cycle,
        target_core,
        location,
        kind,
    })
}

proptest! {
    #![proptest_config(cases(24))]

    /// Same configuration and fault: same cycle count, events and memory.
    #[test]
    fn cluster_deterministic(f in fault(), p in prop::sample::select(vec![Protection::TmrSw, Protection::DmrRapid, Protection::Independent])) {
        let cfg = p.configure(&ClusterConfig::default());
        let base = MatmulScenario::new(&cfg, p.mode(), small(), 3).unwrap();
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut s = base.clone();
            s.cluster.inject(f).unwrap();
            let st = s.run(200_000);
            runs.push((st, s.cluster.cycle(), s.cluster.events().to_vec(), s.cluster.memory_digest()));
        }
        prop_assert_eq!(&runs[0], &runs[1]);
    }

    /// In dual lockstep no write from a group reaches the memory after its
    /// error was raised and before recovery ends.
    #[test]
    fn dmr_writes_gated_until_recovered(f in fault(), rapid in any::<bool>()) {
        let p = if rapid { Protection::DmrRapid } else { Protection::DmrSw };
        let cfg = p.configure(&ClusterConfig::default());
        let mut s = MatmulScenario::new(&cfg, Mode::Dmr, small(), 3).unwrap();
        s.cluster.inject(f).unwrap();
        let mut blocked = [false; 12];
        let mut seen = 0;
        while !s.cluster.finished() && s.cluster.cycle() < 200_000 {
            s.cluster.step();
            for (port, req) in s.cluster.tcdm_requests() {
                prop_assert!(!(blocked[*port] && req.we), "write from group {port} while recovering");
            }
            for ev in &s.cluster.events()[seen..] {
                match ev.kind {
                    EventKind::Error { group, .. } => blocked[group] = true,
                    EventKind::RecoveryEnd { .. } => blocked[ev.core] = false,
                    EventKind::Restart => blocked = [false; 12],
                    _ => {}
                }
            }
            seen = s.cluster.events().len();
        }
        prop_assert!(s.cluster.finished());
        prop_assert!(s.correct());
    }

    /// Single faults never corrupt the result under triple lockstep or
    /// dual lockstep with hardware recovery.
    #[test]
    fn protected_modes_never_corrupt(f in fault(), p in prop::sample::select(vec![Protection::TmrSw, Protection::TmrRapid, Protection::DmrRapid])) {
        let cfg = p.configure(&ClusterConfig::default());
        let mut s = MatmulScenario::new(&cfg, p.mode(), small(), 5).unwrap();
        s.cluster.inject(f).unwrap();
        prop_assert_eq!(s.run(500_000), RunStatus::Completed);
        prop_assert!(s.correct());
    }
}

#[test]
fn mops_round_trip_within_tenth_percent() {
    let m = WorkloadConstants::matmul();
    for (c, want) in [
        (m.cycles.independent, 1165.0),
        (m.cycles.dmr, 617.0),
        (m.cycles.tmr, 414.0),
    ] {
        assert!((m.mops(c) / want - 1.0).abs() < 1e-3);
    }
    let f = WorkloadConstants::cfft();
    for (c, want) in [
        (f.cycles.independent, 989.0),
        (f.cycles.dmr, 531.0),
        (f.cycles.tmr, 385.0),
    ] {
        assert!((f.mops(c) / want - 1.0).abs() < 1e-3);
    }
}

#[test]
fn baseline_column_constant() {
    let csv = analytics::emit_curves(
        &analytics::CurveSpec::default(),
        &WorkloadConstants::matmul(),
        &RecoveryConstants::default(),
        RateConvention::Parametric,
    )
    .unwrap();
    let base: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert!(base.windows(2).all(|w| w[0] == w[1]));
}
