//! Closed-form throughput and runtime-overhead models under a fault rate,
//! with a Monte Carlo cross-check.
//!
//! Throughput is modelled per run: a run has a nominal cycle count and each
//! fault adds the recovery cost of the chosen policy. The fault rate axis is
//! parametric by default: `n` faults per run correspond to a rate of
//! `n * f / C_nominal`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use std::fmt::Write;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("fault count must be non-negative, got {0}")]
    NegativeFaults(f64),
    #[error("invalid parameter: {0}")]
    Param(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ModeCycles {
    pub independent: f64,
    pub dmr: f64,
    pub tmr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConstants {
    pub ops: f64,
    pub cycles: ModeCycles,
    pub f_hz: f64,
}

impl WorkloadConstants {
    /// 24x24x24 matrix multiplication.
    pub fn matmul() -> Self {
        WorkloadConstants {
            ops: 27648.0,
            cycles: ModeCycles {
                independent: 10203.0,
                dmr: 19266.0,
                tmr: 28708.0,
            },
            f_hz: 430e6,
        }
    }

    /// 2048-point complex FFT; cycle counts rounded from the measured
    /// throughput.
    pub fn cfft() -> Self {
        WorkloadConstants {
            ops: 112640.0,
            cycles: ModeCycles {
                independent: 48974.0,
                dmr: 91215.0,
                tmr: 125806.0,
            },
            f_hz: 430e6,
        }
    }

    pub fn mops(&self, cycles: f64) -> f64 {
        self.ops * self.f_hz / cycles / 1e6
    }

    fn validate(&self) -> Result<(), ModelError> {
        let c = self.cycles;
        let ok = [self.ops, self.f_hz, c.independent, c.dmr, c.tmr]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(ModelError::Param(
                "workload constants must be positive".into(),
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryConstants {
    pub rapid_cycles: f64,
    pub tcls_sw_cycles: f64,
    /// A triple group keeps running on two cores after a first fault and
    /// resynchronizes only on the second.
    pub tcls_tolerates_single: bool,
}

impl Default for RecoveryConstants {
    fn default() -> Self {
        RecoveryConstants {
            rapid_cycles: 24.0,
            tcls_sw_cycles: 363.0,
            tcls_tolerates_single: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Curve {
    /// Dual lockstep, whole application restarted on a fault.
    DclsSw,
    DclsRapid,
    TclsSw,
    TclsRapid,
}

impl Curve {
    pub const ALL: [Curve; 4] = [
        Curve::DclsSw,
        Curve::DclsRapid,
        Curve::TclsSw,
        Curve::TclsRapid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Curve::DclsSw => "dcls_sw",
            Curve::DclsRapid => "dcls_rapid",
            Curve::TclsSw => "tcls_sw",
            Curve::TclsRapid => "tcls_rapid",
        }
    }

    pub fn nominal_cycles(self, wc: &WorkloadConstants) -> f64 {
        match self {
            Curve::DclsSw | Curve::DclsRapid => wc.cycles.dmr,
            Curve::TclsSw | Curve::TclsRapid => wc.cycles.tmr,
        }
    }

    /// Cycles charged per recovery event.
    fn recovery_cost(self, wc: &WorkloadConstants, rc: &RecoveryConstants) -> f64 {
        match self {
            Curve::DclsSw => wc.cycles.dmr,
            Curve::DclsRapid | Curve::TclsRapid => rc.rapid_cycles,
            Curve::TclsSw => rc.tcls_sw_cycles,
        }
    }

    /// Recovery events per fault.
    fn recoveries_per_fault(self, rc: &RecoveryConstants) -> f64 {
        match self {
            Curve::TclsSw | Curve::TclsRapid if rc.tcls_tolerates_single => 0.5,
            _ => 1.0,
        }
    }

    /// Average added cycles per fault.
    pub fn cost_per_fault(self, wc: &WorkloadConstants, rc: &RecoveryConstants) -> f64 {
        self.recovery_cost(wc, rc) * self.recoveries_per_fault(rc)
    }
}

/// How a fault rate maps to faults per run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RateConvention {
    /// Faults counted over the nominal run time.
    #[default]
    Parametric,
    /// Faults counted over the actual, recovery-inflated run time.
    SelfConsistent,
}

/// Cycles of one run with `n` faults.
pub fn run_cycles(curve: Curve, wc: &WorkloadConstants, rc: &RecoveryConstants, n: f64) -> f64 {
    curve.nominal_cycles(wc) + curve.cost_per_fault(wc, rc) * n
}

/// Fault rate at which a run sees `n` faults.
pub fn rate_for(
    curve: Curve,
    wc: &WorkloadConstants,
    rc: &RecoveryConstants,
    n: f64,
    conv: RateConvention,
) -> f64 {
    let cycles = match conv {
        RateConvention::Parametric => curve.nominal_cycles(wc),
        RateConvention::SelfConsistent => run_cycles(curve, wc, rc, n),
    };
    n * wc.f_hz / cycles
}

/// Faults per run at `rate`; `None` when recovery cannot keep up with the
/// rate under the self-consistent convention.
pub fn faults_for(
    curve: Curve,
    wc: &WorkloadConstants,
    rc: &RecoveryConstants,
    rate: f64,
    conv: RateConvention,
) -> Option<f64> {
    let c = curve.nominal_cycles(wc);
    match conv {
        RateConvention::Parametric => Some(rate * c / wc.f_hz),
        RateConvention::SelfConsistent => {
            let denom = wc.f_hz - rate * curve.cost_per_fault(wc, rc);
            (denom > 0.0).then(|| rate * c / denom)
        }
    }
}

/// Returns (fault rate in Hz, throughput in GOPS) for `n` faults per run.
pub fn perf_vs_fault_rate(
    curve: Curve,
    wc: &WorkloadConstants,
    rc: &RecoveryConstants,
    n: f64,
) -> Result<(f64, f64), ModelError> {
    perf_vs_fault_rate_with(curve, wc, rc, n, RateConvention::Parametric)
}

pub fn perf_vs_fault_rate_with(
    curve: Curve,
    wc: &WorkloadConstants,
    rc: &RecoveryConstants,
    n: f64,
    conv: RateConvention,
) -> Result<(f64, f64), ModelError> {
    if n.is_nan() || n < 0.0 {
        return Err(ModelError::NegativeFaults(n));
    }
    wc.validate()?;
    let gops = wc.ops * wc.f_hz / run_cycles(curve, wc, rc, n) / 1e9;
    Ok((rate_for(curve, wc, rc, n, conv), gops))
}

/// Throughput in GOPS at a fault rate.
pub fn gops_at_rate(
    curve: Curve,
    wc: &WorkloadConstants,
    rc: &RecoveryConstants,
    rate: f64,
    conv: RateConvention,
) -> f64 {
    match faults_for(curve, wc, rc, rate, conv) {
        Some(n) => wc.ops * wc.f_hz / run_cycles(curve, wc, rc, n) / 1e9,
        None => 0.0,
    }
}

/// Bisection on a monotone predicate over `[lo, hi]` in log space; returns
/// the smallest point where `pred` holds, to relative precision 1e-12.
fn bisect_log(mut lo: f64, mut hi: f64, pred: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi / lo - 1.0 < 1e-12 {
            break;
        }
    }
    hi
}

/// Fault rate at which throughput halves.
pub fn half_perf_rate(curve: Curve, wc: &WorkloadConstants, rc: &RecoveryConstants) -> f64 {
    half_perf_rate_with(curve, wc, rc, RateConvention::Parametric)
}

pub fn half_perf_rate_with(
    curve: Curve,
    wc: &WorkloadConstants,
    rc: &RecoveryConstants,
    conv: RateConvention,
) -> f64 {
    let g0 = wc.ops * wc.f_hz / curve.nominal_cycles(wc) / 1e9;
    let g = |n: f64| wc.ops * wc.f_hz / run_cycles(curve, wc, rc, n) / 1e9;
    let mut hi = 1.0;
    while g(hi) > g0 / 2.0 {
        hi *= 2.0;
    }
    let n = bisect_log(1e-9, hi, |n| g(n) <= g0 / 2.0);
    rate_for(curve, wc, rc, n, conv)
}

/// Smallest rate where triple lockstep with hardware recovery is at least
/// as fast as dual lockstep with hardware recovery. `None` if it never is
/// below 1e15 faults/s.
pub fn crossover_rate(wc: &WorkloadConstants, rc: &RecoveryConstants) -> Option<f64> {
    crossover_rate_with(wc, rc, RateConvention::Parametric)
}

pub fn crossover_rate_with(
    wc: &WorkloadConstants,
    rc: &RecoveryConstants,
    conv: RateConvention,
) -> Option<f64> {
    let tcls_ahead = |r: f64| {
        gops_at_rate(Curve::TclsRapid, wc, rc, r, conv)
            >= gops_at_rate(Curve::DclsRapid, wc, rc, r, conv)
    };
    const LO: f64 = 1e-6;
    const HI: f64 = 1e15;
    if tcls_ahead(LO) {
        return Some(0.0);
    }
    if !tcls_ahead(HI) {
        return None;
    }
    Some(bisect_log(LO, HI, tcls_ahead))
}

/// Recovery time in seconds accumulated over one execution of `exec_time_s`.
pub fn runtime_overhead(
    curve: Curve,
    error_rate_hz: f64,
    exec_time_s: f64,
    rc: &RecoveryConstants,
    f_hz: f64,
    min_faults: f64,
) -> Result<f64, ModelError> {
    if !(exec_time_s > 0.0) || !(f_hz > 0.0) || error_rate_hz < 0.0 {
        return Err(ModelError::Param(
            "execution time and frequency must be positive".into(),
        ));
    }
    let n = min_faults.max(error_rate_hz * exec_time_s);
    let tcls_share = if rc.tcls_tolerates_single { 0.5 } else { 1.0 };
    Ok(match curve {
        // a fault lands mid-run on average and the run starts over
        Curve::DclsSw => n * exec_time_s / 2.0,
        Curve::DclsRapid => n * rc.rapid_cycles / f_hz,
        Curve::TclsSw => n * tcls_share * rc.tcls_sw_cycles / f_hz,
        Curve::TclsRapid => n * tcls_share * rc.rapid_cycles / f_hz,
    })
}

pub const DEFAULT_MIN_FAULTS: f64 = 1e-3;

/// Simulates fault arrivals run by run and compares the measured mean
/// throughput with the closed form. Returns the relative error.
///
/// Arrivals are a Poisson process over each run's nominal window. Dual
/// lockstep without hardware recovery re-executes the run per fault; triple
/// lockstep resynchronizes on every second fault, with the parity carried
/// from one run to the next.
pub fn monte_carlo_validate(
    curve: Curve,
    rate: f64,
    wc: &WorkloadConstants,
    rc: &RecoveryConstants,
    runs: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    if runs < 100 {
        return Err(ModelError::Param(format!(
            "need at least 100 runs, got {runs}"
        )));
    }
    if !(rate >= 0.0) {
        return Err(ModelError::Param("rate must be non-negative".into()));
    }
    wc.validate()?;
    let nominal = curve.nominal_cycles(wc);
    let per_cycle = rate / wc.f_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total_cycles = 0.0;
    let mut odd = false;
    for _ in 0..runs {
        let mut cycles = nominal;
        if per_cycle > 0.0 {
            let gap = Exp::new(per_cycle).map_err(|e| ModelError::Param(e.to_string()))?;
            let mut t = gap.sample(&mut rng);
            while t < nominal {
                match curve {
                    Curve::DclsSw | Curve::DclsRapid => cycles += curve.recovery_cost(wc, rc),
                    Curve::TclsSw | Curve::TclsRapid => {
                        if odd || !rc.tcls_tolerates_single {
                            cycles += curve.recovery_cost(wc, rc);
                            odd = false;
                        } else {
                            odd = true;
                        }
                    }
                }
                t += gap.sample(&mut rng);
            }
        }
        total_cycles += cycles;
    }
    let mc = wc.ops * wc.f_hz * runs as f64 / total_cycles / 1e9;
    let n = rate * nominal / wc.f_hz;
    let (_, analytic) = perf_vs_fault_rate(curve, wc, rc, n)?;
    Ok((mc - analytic).abs() / analytic)
}

/// Relative errors for every curve, trials spread over threads.
pub fn monte_carlo_all(
    rate: f64,
    wc: &WorkloadConstants,
    rc: &RecoveryConstants,
    runs: usize,
    seed: u64,
) -> Result<Vec<(Curve, f64)>, ModelError> {
    Curve::ALL
        .par_iter()
        .enumerate()
        .map(|(i, &c)| {
            monte_carlo_validate(c, rate, wc, rc, runs, seed.wrapping_add(i as u64)).map(|e| (c, e))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub rate_min: f64,
    pub rate_max: f64,
    pub points: usize,
}

impl Default for CurveSpec {
    fn default() -> Self {
        CurveSpec {
            rate_min: 1e2,
            rate_max: 1e9,
            points: 71,
        }
    }
}

impl CurveSpec {
    /// Log-spaced, strictly increasing rate grid.
    pub fn grid(&self) -> Result<Vec<f64>, ModelError> {
        if !(self.rate_min > 0.0 && self.rate_max > self.rate_min) || self.points < 2 {
            return Err(ModelError::Param(
                "grid needs 0 < rate_min < rate_max and >= 2 points".into(),
            ));
        }
        let (a, b) = (self.rate_min.ln(), self.rate_max.ln());
        let step = (b - a) / (self.points - 1) as f64;
        Ok((0..self.points)
            .map(|i| (a + step * i as f64).exp())
            .collect())
    }
}

/// Throughput curves in MOPS: one row per rate, a baseline column with the
/// unprotected throughput, and one column per curve.
pub fn emit_curves(
    spec: &CurveSpec,
    wc: &WorkloadConstants,
    rc: &RecoveryConstants,
    conv: RateConvention,
) -> Result<String, ModelError> {
    wc.validate()?;
    let mut out = String::from("rate_hz,baseline");
    for c in Curve::ALL {
        write!(out, ",{}", c.name()).unwrap();
    }
    out.push('\n');
    let base = wc.mops(wc.cycles.independent);
    for r in spec.grid()? {
        write!(out, "{r:e},{base}").unwrap();
        for c in Curve::ALL {
            write!(out, ",{}", gops_at_rate(c, wc, rc, r, conv) * 1e3).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OverheadSpec {
    pub rates: CurveSpec,
    pub exec_times_s: Vec<f64>,
    pub min_faults: f64,
}

impl Default for OverheadSpec {
    fn default() -> Self {
        OverheadSpec {
            rates: CurveSpec {
                rate_min: 1e-6,
                rate_max: 1e2,
                points: 41,
            },
            exec_times_s: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0],
            min_faults: DEFAULT_MIN_FAULTS,
        }
    }
}

/// Runtime overhead grid in seconds: one row per (rate, execution time).
pub fn emit_overhead(
    spec: &OverheadSpec,
    rc: &RecoveryConstants,
    f_hz: f64,
) -> Result<String, ModelError> {
    let mut out = String::from("rate_hz,exec_time_s");
    for c in Curve::ALL {
        write!(out, ",{}", c.name()).unwrap();
    }
    out.push('\n');
    for r in spec.rates.grid()? {
        for &t in &spec.exec_times_s {
            write!(out, "{r:e},{t:e}").unwrap();
            for c in Curve::ALL {
                write!(
                    out,
                    ",{:e}",
                    runtime_overhead(c, r, t, rc, f_hz, spec.min_faults)?
                )
                .unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Headline numbers of the model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSummary {
    pub nominal_mops: NominalMops,
    pub half_perf_rate_hz: Vec<(Curve, f64)>,
    pub crossover_rate_hz: Option<f64>,
    /// dcls_rapid over dcls_sw at 1e6 faults/s.
    pub dcls_speedup_at_1e6: f64,
    /// tcls_rapid over tcls_sw at 1e7 faults/s.
    pub tcls_speedup_at_1e7: f64,
    pub rapid_recovery_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NominalMops {
    pub independent: f64,
    pub dmr: f64,
    pub tmr: f64,
}

pub fn summarize(
    wc: &WorkloadConstants,
    rc: &RecoveryConstants,
    conv: RateConvention,
) -> Result<ModelSummary, ModelError> {
    wc.validate()?;
    let g = |c: Curve, r: f64| gops_at_rate(c, wc, rc, r, conv);
    Ok(ModelSummary {
        nominal_mops: NominalMops {
            independent: wc.mops(wc.cycles.independent),
            dmr: wc.mops(wc.cycles.dmr),
            tmr: wc.mops(wc.cycles.tmr),
        },
        half_perf_rate_hz: Curve::ALL
            .iter()
            .map(|&c| (c, half_perf_rate_with(c, wc, rc, conv)))
            .collect(),
        crossover_rate_hz: crossover_rate_with(wc, rc, conv),
        dcls_speedup_at_1e6: g(Curve::DclsRapid, 1e6) / g(Curve::DclsSw, 1e6),
        tcls_speedup_at_1e7: g(Curve::TclsRapid, 1e7) / g(Curve::TclsSw, 1e7),
        rapid_recovery_time_s: runtime_overhead(Curve::DclsRapid, 0.0, 1.0, rc, wc.f_hz, 1.0)?,
    })
}
