//! Scenario commands and their JSON reports.
//!
//! Each command returns a report envelope carrying the config digest and
//! seed, plus any side files (CSV). Reports are plain data with no clock or
//! path information, so equal inputs give byte-identical output.

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::analytics::{self, Curve, ModelError};
use crate::cluster::{ClusterError, RunStatus};
use crate::config::{Assertion, ConfigError, Execution, ScenarioConfig};
use crate::faults::{run_campaign, run_seed, CampaignConfig, CampaignReport};
use crate::recovery::{tcls_sw_recover, RecoveryKind, RecoveryTrace};
use crate::scenario::MatmulScenario;
use crate::splitlock::{run_calibrated, run_functional, SplitError};

pub const SCRIPT_MAX_CYCLES: u64 = 2_000_000;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("simulation did not finish within {0} cycles")]
    Hang(u64),
    #[error("functional protocol checks failed: {0}")]
    ChecksFailed(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SideFile {
    pub name: String,
    pub contents: String,
}

#[derive(Clone, Debug)]
pub struct CommandOutput {
    pub command: &'static str,
    pub report: Value,
    pub files: Vec<SideFile>,
    /// Human-readable lines for the terminal.
    pub summary: Vec<String>,
    pub passed: bool,
}

impl CommandOutput {
    pub fn report_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.report).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn report_name(&self) -> String {
        let seed = self.report["seed"].as_u64().unwrap_or_default();
        format!("{}-seed{seed}.json", self.command)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AssertionResult {
    #[serde(flatten)]
    pub assertion: Assertion,
    pub actual: Option<f64>,
    pub pass: bool,
}

fn evaluate(report: &Value, assertions: &[Assertion]) -> Vec<AssertionResult> {
    assertions
        .iter()
        .map(|a| {
            let actual = report.pointer(&a.path).and_then(|v| match v {
                Value::Bool(b) => Some(f64::from(u8::from(*b))),
                v => v.as_f64(),
            });
            AssertionResult {
                assertion: a.clone(),
                actual,
                pass: actual.is_some_and(|x| a.op.holds(x, a.value, a.tol)),
            }
        })
        .collect()
}

fn envelope(
    command: &'static str,
    cfg: &ScenarioConfig,
    body: Value,
    files: Vec<SideFile>,
    summary: Vec<String>,
) -> CommandOutput {
    let mut report = json!({
        "command": command,
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        command: body,
    });
    let results = evaluate(&report, &cfg.assertions);
    let passed = results.iter().all(|r| r.pass);
    report["assertions"] = serde_json::to_value(&results).expect("serializable");
    report["passed"] = Value::Bool(passed);
    CommandOutput {
        command,
        report,
        files,
        summary,
        passed,
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

/// Simulates the configured workload and/or section script.
pub fn cmd_run(cfg: &ScenarioConfig) -> Result<CommandOutput, CommandError> {
    cfg.validate()?;
    if cfg.workload.is_none() && cfg.script.is_none() {
        return Err(ConfigError::Invalid("run needs a workload or a script".into()).into());
    }
    let mut body = serde_json::Map::new();
    let mut summary = Vec::new();
    if let Some(w) = cfg.workload {
        let cluster = w.protection.configure(&cfg.cluster);
        let mut s = MatmulScenario::new(&cluster, w.protection.mode(), w.matmul, cfg.seed)?;
        for f in &cfg.faults {
            s.cluster.inject(*f)?;
        }
        if s.run(w.max_cycles) == RunStatus::Timeout {
            return Err(CommandError::Hang(w.max_cycles));
        }
        let c = &s.cluster;
        let ops = w.matmul.ops();
        let f_hz = cfg.analytics.constants().f_hz;
        let traces: Vec<RecoveryTrace> = c.traces().to_vec();
        let mut wl = json!({
            "protection": w.protection,
            "matmul": w.matmul,
            "virtual_cores": cfg.cluster.n_cores / w.protection.mode().group_size(),
            "cycles": c.cycle(),
            "ops": ops,
            "ops_per_cycle": ops as f64 / c.cycle() as f64,
            "mops": ops as f64 * f_hz / c.cycle() as f64 / 1e6,
            "correct": s.correct(),
            "errors": c.errors(),
            "fatal": c.fatal(),
            "result_digest": s.result_digest(),
            "memory_digest": c.memory_digest(),
            "recovery_traces": traces,
        });
        if cfg.execution == Execution::Calibrated {
            let cal: Vec<RecoveryTrace> = traces
                .iter()
                .filter(|t| t.kind == RecoveryKind::TclsSoftware)
                .map(|t| tcls_sw_recover(t.group, t.start_cycle, &cfg.calibration.tcls))
                .collect();
            wl["calibrated_recovery_traces"] = to_value(&cal);
        }
        summary.push(format!(
            "workload {:?}: {} cycles, {:.3} ops/cycle, {} recoveries, result {}",
            w.protection,
            c.cycle(),
            ops as f64 / c.cycle() as f64,
            traces.len(),
            if s.correct() { "correct" } else { "WRONG" }
        ));
        body.insert("workload".into(), wl);
    }
    if let Some(script) = &cfg.script {
        let sec = match cfg.execution {
            Execution::Calibrated => {
                let traces = run_calibrated(script, cfg.cluster.n_cores, cfg.calibration.split)?;
                summary.push(format!(
                    "script: {} calibrated section switches",
                    traces.len()
                ));
                json!({
                    "execution": cfg.execution,
                    "section_traces": traces,
                    "reference_comparison": cfg.calibration.split.compare(),
                })
            }
            Execution::Functional => {
                let r = run_functional(&cfg.cluster, script, SCRIPT_MAX_CYCLES)?;
                if !r.passed() {
                    let failed: Vec<&str> = r
                        .checks
                        .iter()
                        .filter(|c| !c.pass)
                        .map(|c| c.name.as_str())
                        .collect();
                    return Err(CommandError::ChecksFailed(failed.join(", ")));
                }
                summary.push(format!(
                    "script: {} section switches, {} checks passed, {} cycles",
                    r.traces.len(),
                    r.checks.len(),
                    r.cycles
                ));
                json!({
                    "execution": cfg.execution,
                    "section_traces": r.traces,
                    "checks": r.checks,
                    "cycles": r.cycles,
                    "memory_digest": r.memory_digest,
                })
            }
        };
        body.insert("script".into(), sec);
    }
    Ok(envelope(
        "run",
        cfg,
        Value::Object(body),
        Vec::new(),
        summary,
    ))
}

/// Runs the configured fault-injection campaign.
pub fn cmd_inject(cfg: &ScenarioConfig, csv: bool) -> Result<CommandOutput, CommandError> {
    cfg.validate()?;
    let w = cfg
        .workload
        .ok_or_else(|| ConfigError::Invalid("inject needs a workload block".into()))?;
    let c = cfg
        .campaign
        .ok_or_else(|| ConfigError::Invalid("inject needs a campaign block".into()))?;
    let cc = CampaignConfig {
        runs: c.runs,
        seed: cfg.seed,
        protection: w.protection,
        workload: w.matmul,
        targets: c.targets,
        data_seed: cfg.seed,
    };
    let rep: CampaignReport = run_campaign(&cfg.cluster, &cc)?;
    let o = rep.outcomes;
    let summary = vec![format!(
        "{:?}: {} runs, masked {}, detected_recovered {}, sdc {}, hang {} (masked fraction {:.3})",
        w.protection, rep.runs, o.masked, o.detected_recovered, o.sdc, o.hang, rep.masked_fraction
    )];
    let files = if csv {
        vec![SideFile {
            name: format!("inject-seed{}-runs.csv", cfg.seed),
            contents: rep.to_csv(),
        }]
    } else {
        Vec::new()
    };
    Ok(envelope("inject", cfg, to_value(&rep), files, summary))
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationPoint {
    pub curve: Curve,
    pub faults_per_run: f64,
    pub rate_hz: f64,
    pub relative_error: f64,
}

/// Evaluates the throughput model, emits curve grids and optionally checks
/// the closed forms against Monte Carlo.
pub fn cmd_model(cfg: &ScenarioConfig, validate: bool) -> Result<CommandOutput, CommandError> {
    cfg.validate()?;
    let a = &cfg.analytics;
    let wc = a.constants();
    let rc = a.recovery;
    let summary_data = analytics::summarize(&wc, &rc, a.convention)?;
    let files = vec![
        SideFile {
            name: "curves.csv".into(),
            contents: analytics::emit_curves(&a.curves, &wc, &rc, a.convention)?,
        },
        SideFile {
            name: "overhead.csv".into(),
            contents: analytics::emit_overhead(&a.overhead, &rc, wc.f_hz)?,
        },
    ];
    let n = summary_data.nominal_mops;
    let mut summary = vec![format!(
        "nominal MOPS: independent {:.1}, dmr {:.1}, tmr {:.1}",
        n.independent, n.dmr, n.tmr
    )];
    for (c, r) in &summary_data.half_perf_rate_hz {
        summary.push(format!(
            "half-performance rate {}: {r:.4e} faults/s",
            c.name()
        ));
    }
    summary.push(match summary_data.crossover_rate_hz {
        Some(r) => format!("crossover tcls_rapid over dcls_rapid: {r:.4e} faults/s"),
        None => "crossover tcls_rapid over dcls_rapid: none".into(),
    });
    let mut body = json!({
        "workload": a.workload,
        "constants": wc,
        "recovery": rc,
        "convention": a.convention,
        "summary": summary_data,
    });
    if validate {
        let mut points = Vec::new();
        let mut idx = 0;
        for c in Curve::ALL {
            for &k in &a.validation.faults_per_run {
                let rate = k * wc.f_hz / c.nominal_cycles(&wc);
                let e = analytics::monte_carlo_validate(
                    c,
                    rate,
                    &wc,
                    &rc,
                    a.validation.runs,
                    run_seed(cfg.seed, idx),
                )?;
                idx += 1;
                summary.push(format!(
                    "monte carlo {} at {k} faults/run ({rate:.3e} faults/s): relative error {e:.4}",
                    c.name()
                ));
                points.push(ValidationPoint {
                    curve: c,
                    faults_per_run: k,
                    rate_hz: rate,
                    relative_error: e,
                });
            }
        }
        body["validation"] = json!({ "runs": a.validation.runs, "points": points });
    }
    Ok(envelope("model", cfg, body, files, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CmpOp, ModelWorkload};

    #[test]
    fn model_default_report() {
        let cfg = ScenarioConfig::from_json("{}").unwrap();
        let out = cmd_model(&cfg, false).unwrap();
        assert!(out.passed);
        assert_eq!(out.report["command"], "model");
        assert_eq!(out.report["config_digest"].as_str().unwrap().len(), 64);
        assert_eq!(
            out.report["model"]["summary"]["half_perf_rate_hz"]
                .as_array()
                .unwrap()
                .len(),
            4
        );
        assert_eq!(out.files.len(), 2);
        assert_eq!(out.report_name(), "model-seed1.json");
    }

    #[test]
    fn model_cfft_nominal() {
        let mut cfg = ScenarioConfig::default();
        cfg.seed = 1;
        cfg.analytics.workload = ModelWorkload::Cfft;
        let out = cmd_model(&cfg, false).unwrap();
        let m = &out.report["model"]["summary"]["nominal_mops"];
        for (k, want) in [("independent", 989.0), ("dmr", 531.0), ("tmr", 385.0)] {
            assert!((m[k].as_f64().unwrap() - want).abs() < 1.0, "{k}");
        }
    }

    #[test]
    fn assertions_decide_pass() {
        let mut cfg = ScenarioConfig::from_json("{}").unwrap();
        cfg.assertions = vec![Assertion {
            path: "/model/summary/nominal_mops/dmr".into(),
            op: CmpOp::Approx,
            value: 617.0,
            tol: 0.01,
        }];
        assert!(cmd_model(&cfg, false).unwrap().passed);
        cfg.assertions[0].path = "/model/missing".into();
        let out = cmd_model(&cfg, false).unwrap();
        assert!(!out.passed);
        assert_eq!(out.report["assertions"][0]["actual"], Value::Null);
    }

    #[test]
    fn run_and_inject_need_workload() {
        let cfg = ScenarioConfig::from_json("{}").unwrap();
        assert!(matches!(cmd_run(&cfg), Err(CommandError::Config(_))));
        assert!(matches!(
            cmd_inject(&cfg, false),
            Err(CommandError::Config(_))
        ));
    }
}
