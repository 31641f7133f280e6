//! Acceptance suite. Each test prints one `PASS` or `FAIL` line per check
//! and fails if any check fails.

use hmrsim::analytics::{self, Curve, RecoveryConstants, WorkloadConstants};
use hmrsim::cluster::{ClusterConfig, RunStatus};
use hmrsim::config::ScenarioConfig;
use hmrsim::cpu::{DataReq, OutputBundle, MODIFIABLE_REGS, RF_WRITE_PORTS};
use hmrsim::faults::{
    draw_fault, run_campaign, run_seed, CampaignConfig, FaultEvent, FaultKind, FaultLocation,
    Protection, TargetSpace,
};
use hmrsim::hmr::{check_pair, vote_triple};
use hmrsim::recovery::{
    ecc_decode, ecc_encode, tcls_sw_recover, EccStatus, RecoveryKind, RecoveryTrace,
    TclsCalibration, CODEWORD_BITS,
};
use hmrsim::report::{cmd_inject, cmd_model, cmd_run};
use hmrsim::scenario::MatmulScenario;
use hmrsim::splitlock::{Column, SplitCalibration};
use hmrsim::workload::MatmulSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Prints the verdict for one check and returns it.
fn check(id: &str, ok: bool, detail: impl std::fmt::Display) -> bool {
    println!("{} {id}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn all(results: &[bool]) {
    assert!(
        results.iter().all(|&r| r),
        "{} of {} checks failed",
        results.iter().filter(|&&r| !r).count(),
        results.len()
    );
}

fn scenario(p: Protection) -> MatmulScenario {
    let cfg = p.configure(&ClusterConfig::default());
    MatmulScenario::new(&cfg, p.mode(), MatmulSpec::default(), 1).unwrap()
}

fn rapid_traces(s: &MatmulScenario) -> Vec<RecoveryTrace> {
    s.cluster
        .traces()
        .iter()
        .filter(|t| t.kind == RecoveryKind::Rapid)
        .cloned()
        .collect()
}

fn phases_are_4_4_16(t: &RecoveryTrace) -> bool {
    let p: Vec<u64> = t.phases.iter().map(|p| p.cycles).collect();
    t.total == 24 && p == [4, 4, 16]
}

#[test]
fn c01_rapid_recovery_latency() {
    let mut r = Vec::new();
    for p in [Protection::DmrRapid, Protection::TmrRapid] {
        let mut golden = scenario(p);
        assert_eq!(golden.run(u64::MAX), RunStatus::Completed);
        // First register fault, in a fixed search order, that the group
        // actually detects.
        let hit = (1..32u8)
            .flat_map(|reg| [0u8, 5].map(move |bit| (reg, bit)))
            .find_map(|(reg, bit)| {
                let mut s = scenario(p);
                s.cluster
                    .inject(FaultEvent {
                        cycle: 3000,
                        target_core: 1,
                        location: FaultLocation::RfBit { reg, bit },
                        kind: FaultKind::Seu,
                    })
                    .unwrap();
                (s.run(golden.cluster.cycle() * 10) == RunStatus::Completed
                    && !rapid_traces(&s).is_empty())
                .then_some((reg, s))
            });
        let Some((reg, s)) = hit else {
            r.push(check(
                &format!("1 {p:?}"),
                false,
                "no register fault was detected",
            ));
            continue;
        };
        let traces = rapid_traces(&s);
        r.push(check(
            &format!("1 {p:?} latency"),
            traces.len() == 1 && phases_are_4_4_16(&traces[0]),
            format!(
                "x{reg}: {:?}",
                traces
                    .iter()
                    .map(|t| (t.total, t.phases.len()))
                    .collect::<Vec<_>>()
            ),
        ));
        r.push(check(
            &format!("1 {p:?} memory"),
            s.cluster.memory_digest() == golden.cluster.memory_digest(),
            format!("final digest {}", &s.cluster.memory_digest()[..16]),
        ));
    }
    all(&r);
}

#[test]
fn c02_restore_discipline() {
    let rf_only = TargetSpace {
        rf: true,
        pc: false,
        csr: false,
        interface: false,
    };
    let space = rf_only.locations();
    let mut traces = Vec::new();
    let mut runs = 0;
    for (i, p) in [Protection::DmrRapid, Protection::TmrRapid]
        .into_iter()
        .cycle()
        .enumerate()
    {
        if traces.len() >= 100 || runs >= 2000 {
            break;
        }
        let mut s = scenario(p);
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(2, i));
        let f = draw_fault(&mut rng, &space, 12, 15_000);
        s.cluster.inject(f).unwrap();
        s.run(200_000);
        traces.extend(rapid_traces(&s));
        runs += 1;
    }
    traces.truncate(100);
    let widest = traces
        .iter()
        .map(|t| t.max_rf_writes_per_cycle)
        .max()
        .unwrap_or(0);
    let restores: Vec<u64> = traces.iter().filter_map(|t| t.phase("restore")).collect();
    all(&[
        check(
            "2 count",
            traces.len() == 100,
            format!("{} recoveries from {runs} runs", traces.len()),
        ),
        check(
            "2 write ports",
            widest <= RF_WRITE_PORTS,
            format!("at most {widest} RF writes per cycle"),
        ),
        check(
            "2 restore",
            MODIFIABLE_REGS == 31
                && restores.len() == traces.len()
                && restores.iter().all(|&c| c == 16),
            format!(
                "restore phases {:?}",
                restores.iter().collect::<std::collections::BTreeSet<_>>()
            ),
        ),
    ]);
}

#[test]
fn c03_tcls_software_recovery() {
    let t = tcls_sw_recover(0, 1000, &TclsCalibration::default());
    all(&[check(
        "3 tcls",
        t.phase("unload") == Some(247) && t.phase("reload") == Some(116) && t.total == 363,
        format!(
            "unload {:?} + reload {:?} = {}",
            t.phase("unload"),
            t.phase("reload"),
            t.total
        ),
    )]);
}

#[test]
fn c04_split_lock_totals() {
    let cal = SplitCalibration::default();
    let mut r = vec![
        check(
            "4 entry tmr",
            cal.mc_entry.tmr.total() == 408,
            cal.mc_entry.tmr.total(),
        ),
        check(
            "4 entry tmr rapid",
            cal.mc_entry.tmr_rapid.total() == 308,
            cal.mc_entry.tmr_rapid.total(),
        ),
        check(
            "4 exit main",
            (cal.mc_exit_main.dmr.total(), cal.mc_exit_main.tmr.total()) == (22, 23),
            format!(
                "{}/{}",
                cal.mc_exit_main.dmr.total(),
                cal.mc_exit_main.tmr.total()
            ),
        ),
        check(
            "4 exit helper",
            (
                cal.mc_exit_helper.dmr.total(),
                cal.mc_exit_helper.tmr.total(),
            ) == (147, 165),
            format!(
                "{}/{}",
                cal.mc_exit_helper.dmr.total(),
                cal.mc_exit_helper.tmr.total()
            ),
        ),
        check(
            "4 perf entry",
            (cal.perf_entry.tmr.total(), cal.perf_entry.dmr.total()) == (82, 134),
            format!(
                "{}/{}",
                cal.perf_entry.tmr.total(),
                cal.perf_entry.dmr.total()
            ),
        ),
        check(
            "4 perf exit tmr rapid",
            cal.perf_exit.tmr_rapid.total() == 94,
            cal.perf_exit.tmr_rapid.total(),
        ),
    ];
    let cmp = cal.compare();
    let worst = cmp.iter().map(|c| c.delta.abs()).max().unwrap();
    let shown: Vec<String> = cmp
        .iter()
        .filter(|c| c.delta != 0)
        .map(|c| format!("{} {:?} {}", c.row, c.column, c.delta))
        .collect();
    r.push(check(
        "4 reference",
        cmp.len() == 5 * Column::ALL.len() && worst <= 2,
        format!("max |delta| {worst}; {shown:?}"),
    ));
    all(&r);
}

fn oracle_majority(a: u32, b: u32, c: u32) -> u32 {
    (0..32)
        .map(|i| {
            let n = (a >> i & 1) + (b >> i & 1) + (c >> i & 1);
            u32::from(n >= 2) << i
        })
        .sum()
}

fn random_bundle(rng: &mut impl Rng) -> OutputBundle {
    // Sparse bit patterns make near-equal triples common.
    let mut w = || {
        if rng.random_bool(0.5) {
            rng.random::<u32>() & 0x0000_0f0f
        } else {
            rng.random()
        }
    };
    let (ifetch_addr, addr, wdata, be) = (w(), w(), w(), w());
    OutputBundle {
        ifetch_addr,
        data_req: DataReq {
            valid: addr & 1 == 1,
            addr,
            wdata,
            we: wdata & 2 == 2,
            byte_enable: (be & 0xf) as u8,
        },
    }
}

#[test]
fn c05_voter_and_checker() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut vote_bad = 0;
    let mut check_bad = 0;
    for _ in 0..10_000 {
        let (a, b, c) = (
            random_bundle(&mut rng),
            random_bundle(&mut rng),
            random_bundle(&mut rng),
        );
        let v = vote_triple(&a, &b, &c).output;
        let m = |f: fn(&OutputBundle) -> u32| oracle_majority(f(&a), f(&b), f(&c));
        let ok = v.ifetch_addr == m(|x| x.ifetch_addr)
            && v.data_req.addr == m(|x| x.data_req.addr)
            && v.data_req.wdata == m(|x| x.data_req.wdata)
            && u32::from(v.data_req.byte_enable) == m(|x| x.data_req.byte_enable.into())
            && u32::from(v.data_req.valid) == m(|x| x.data_req.valid.into())
            && u32::from(v.data_req.we) == m(|x| x.data_req.we.into());
        vote_bad += usize::from(!ok);
    }
    for i in 0..10_000 {
        let a = random_bundle(&mut rng);
        let b = if i % 2 == 0 {
            a
        } else {
            random_bundle(&mut rng)
        };
        let r = check_pair(&a, &b);
        let gated = !r.output.data_req.valid && !r.output.data_req.we;
        let ok = if a == b {
            !r.error && r.output == a
        } else {
            r.error && gated
        };
        check_bad += usize::from(!ok);
    }
    all(&[
        check(
            "5 voter",
            vote_bad == 0,
            format!("{vote_bad} mismatches in 10000 triples"),
        ),
        check(
            "5 checker",
            check_bad == 0,
            format!("{check_bad} mismatches in 10000 pairs"),
        ),
    ]);
}

#[test]
fn c06_ecc_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let words: Vec<u32> = (0..1000).map(|_| rng.random()).collect();
    let mut single_bad = 0;
    for &w in &words {
        let cw = ecc_encode(w);
        for k in 0..CODEWORD_BITS {
            single_bad += usize::from(ecc_decode(cw.flip(k)).0 != w);
        }
    }
    let mut double_bad = 0;
    let mut pairs = 0;
    for &w in &words[..100] {
        let cw = ecc_encode(w);
        for i in 0..CODEWORD_BITS {
            for j in i + 1..CODEWORD_BITS {
                pairs += 1;
                double_bad +=
                    usize::from(ecc_decode(cw.flip(i).flip(j)).1 != EccStatus::Uncorrectable);
            }
        }
    }
    all(&[
        check(
            "6 single",
            single_bad == 0,
            format!("{single_bad} of 39000 single flips not corrected"),
        ),
        check(
            "6 double",
            pairs == 74_100 && double_bad == 0,
            format!("{double_bad} of {pairs} double flips not flagged"),
        ),
    ]);
}

#[test]
fn c07_zero_sdc_campaigns() {
    let mut r = Vec::new();
    for p in [
        Protection::TmrSw,
        Protection::TmrRapid,
        Protection::DmrRapid,
    ] {
        let cc = CampaignConfig {
            runs: 1000,
            seed: 7,
            protection: p,
            workload: MatmulSpec::default(),
            targets: TargetSpace::default(),
            data_seed: 1,
        };
        let rep = run_campaign(&ClusterConfig::default(), &cc).unwrap();
        let o = rep.outcomes;
        r.push(check(
            &format!("7 {p:?}"),
            o.total() == 1000 && o.sdc == 0 && o.hang == 0,
            format!(
                "masked {} recovered {} sdc {} hang {} (masked fraction {:.3})",
                o.masked, o.detected_recovered, o.sdc, o.hang, rep.masked_fraction
            ),
        ));
    }
    all(&r);
}

#[test]
fn c08_throughput_ratios() {
    let opc = |p: Protection| {
        let mut s = scenario(p);
        assert_eq!(s.run(u64::MAX), RunStatus::Completed);
        assert!(s.correct());
        let ops = MatmulSpec::default().ops() as f64;
        ops / s.cluster.cycle() as f64
    };
    let (ind, dmr, tmr) = (
        opc(Protection::Independent),
        opc(Protection::DmrSw),
        opc(Protection::TmrSw),
    );
    let (r2, r3) = (ind / dmr, ind / tmr);
    all(&[
        check(
            "8 independent/dmr",
            (r2 / 2.0 - 1.0).abs() <= 0.10,
            format!("{r2:.3} (target 2 +-10%)"),
        ),
        check(
            "8 independent/tmr",
            (r3 / 3.0 - 1.0).abs() <= 0.10,
            format!("{r3:.3} (target 3 +-10%)"),
        ),
    ]);
}

#[test]
fn c09_nominal_points() {
    let rc = RecoveryConstants::default();
    let mut r = Vec::new();
    for (name, wc, want) in [
        (
            "matmul",
            WorkloadConstants::matmul(),
            [1165.0, 617.0, 414.0],
        ),
        ("cfft", WorkloadConstants::cfft(), [989.0, 531.0, 385.0]),
    ] {
        let got = [
            wc.mops(wc.cycles.independent),
            analytics::perf_vs_fault_rate(Curve::DclsRapid, &wc, &rc, 0.0)
                .unwrap()
                .1
                * 1e3,
            analytics::perf_vs_fault_rate(Curve::TclsRapid, &wc, &rc, 0.0)
                .unwrap()
                .1
                * 1e3,
        ];
        let ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 1.0);
        r.push(check(
            &format!("9 {name}"),
            ok,
            format!("{got:.1?} MOPS vs {want:?}"),
        ));
    }
    all(&r);
}

#[test]
fn c10_degradation_landmarks() {
    let (wc, rc) = (WorkloadConstants::matmul(), RecoveryConstants::default());
    let mut r = Vec::new();
    for (c, want) in [
        (Curve::DclsSw, 2e4),
        (Curve::TclsSw, 2e6),
        (Curve::DclsRapid, 2e7),
        (Curve::TclsRapid, 4e7),
    ] {
        let got = analytics::half_perf_rate(c, &wc, &rc);
        r.push(check(
            &format!("10 half {}", c.name()),
            (got / want - 1.0).abs() <= 0.15,
            format!("{got:.3e} faults/s vs {want:.0e} +-15%"),
        ));
    }
    let x = analytics::crossover_rate(&wc, &rc).unwrap_or(f64::NAN);
    r.push(check(
        "10 crossover",
        (x / 3e7 - 1.0).abs() <= 0.20,
        format!("{x:.3e} faults/s vs 3e7 +-20%"),
    ));
    all(&r);
}

#[test]
fn c11_monte_carlo() {
    let (wc, rc) = (WorkloadConstants::matmul(), RecoveryConstants::default());
    let mut r = Vec::new();
    for (i, n) in [10.0, 30.0, 100.0].into_iter().enumerate() {
        for c in Curve::ALL {
            let rate = n * wc.f_hz / c.nominal_cycles(&wc);
            let e =
                analytics::monte_carlo_validate(c, rate, &wc, &rc, 1000, run_seed(11, i)).unwrap();
            r.push(check(
                &format!("11 {} n={n}", c.name()),
                e < 0.05,
                format!("relative error {:.4}", e),
            ));
        }
    }
    all(&r);
}

#[test]
fn c12_determinism() {
    let run = ScenarioConfig::from_json(
        r#"{"workload": {"kind": "matmul", "protection": "tmr_rapid"},
            "faults": [{"cycle": 2500, "target_core": 2, "location": {"target": "rf_bit", "reg": 11, "bit": 3}, "kind": "seu"}]}"#,
    )
    .unwrap();
    let inject = ScenarioConfig::from_json(
        r#"{"seed": 9, "workload": {"kind": "matmul", "protection": "dmr_rapid"}, "campaign": {"runs": 40}}"#,
    )
    .unwrap();
    let model = ScenarioConfig::from_json(r#"{"seed": 3}"#).unwrap();
    let twice = |f: &dyn Fn() -> hmrsim::report::CommandOutput| {
        let (a, b) = (f(), f());
        a.report_json() == b.report_json()
            && a.files
                .iter()
                .map(|f| &f.contents)
                .eq(b.files.iter().map(|f| &f.contents))
    };
    all(&[
        check(
            "12 run",
            twice(&|| cmd_run(&run).unwrap()),
            "repeat is byte-identical",
        ),
        check(
            "12 inject",
            twice(&|| cmd_inject(&inject, true).unwrap()),
            "repeat is byte-identical",
        ),
        check(
            "12 model",
            twice(&|| cmd_model(&model, true).unwrap()),
            "repeat is byte-identical",
        ),
    ]);
}
