//! Single-bit fault injection and campaign classification.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpu::{Csr, OutputBundle};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FaultError {
    #[error("x0 is not architectural state")]
    ZeroRegister,
    #[error("register x{0} does not exist")]
    BadRegister(u8),
    #[error("bit {bit} out of range for a {width}-bit target")]
    BadBit { bit: u8, width: u32 },
    #[error("core {0} does not exist")]
    BadCore(usize),
    #[error("fault scheduled for cycle {at} but the simulation is at cycle {now}")]
    InThePast { at: u64, now: u64 },
    #[error("{0:?} faults cannot target {1}")]
    KindMismatch(FaultKind, &'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum IfaceField {
    IfetchAddr,
    Valid,
    Addr,
    Wdata,
    We,
    ByteEnable,
}

impl IfaceField {
    pub const ALL: [IfaceField; 6] = [
        IfaceField::IfetchAddr,
        IfaceField::Valid,
        IfaceField::Addr,
        IfaceField::Wdata,
        IfaceField::We,
        IfaceField::ByteEnable,
    ];

    pub fn width(self) -> u32 {
        match self {
            IfaceField::Valid | IfaceField::We => 1,
            IfaceField::ByteEnable => 4,
            _ => 32,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Inverts one bit of this field in `b`.
    pub fn flip(self, b: &mut OutputBundle, bit: u8) {
        let m = 1u32 << bit;
        let d = &mut b.data_req;
        match self {
            IfaceField::IfetchAddr => b.ifetch_addr ^= m,
            IfaceField::Valid => d.valid ^= true,
            IfaceField::Addr => d.addr ^= m,
            IfaceField::Wdata => d.wdata ^= m,
            IfaceField::We => d.we ^= true,
            IfaceField::ByteEnable => d.byte_enable ^= m as u8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", tag = "target")]
pub enum FaultLocation {
    RfBit { reg: u8, bit: u8 },
    PcBit { bit: u8 },
    CsrBit { csr: Csr, bit: u8 },
    InterfaceBit { field: IfaceField, bit: u8 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// State flip, persists until overwritten.
    Seu,
    /// One-cycle inversion of an output signal.
    Set,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FaultEvent {
    pub cycle: u64,
    pub target_core: usize,
    pub location: FaultLocation,
    pub kind: FaultKind,
}

impl FaultEvent {
    pub fn validate(&self, n_cores: usize) -> Result<(), FaultError> {
        if self.target_core >= n_cores {
            return Err(FaultError::BadCore(self.target_core));
        }
        let check = |bit: u8, width: u32| {
            if (bit as u32) < width {
                Ok(())
            } else {
                Err(FaultError::BadBit { bit, width })
            }
        };
        match (self.location, self.kind) {
            (FaultLocation::InterfaceBit { field, bit }, FaultKind::Set) => {
                check(bit, field.width())
            }
            (FaultLocation::InterfaceBit { .. }, k) => {
                Err(FaultError::KindMismatch(k, "interface signals"))
            }
            (_, FaultKind::Set) => Err(FaultError::KindMismatch(
                FaultKind::Set,
                "architectural state",
            )),
            (FaultLocation::RfBit { reg: 0, .. }, _) => Err(FaultError::ZeroRegister),
            (FaultLocation::RfBit { reg, .. }, _) if reg >= 32 => Err(FaultError::BadRegister(reg)),
            (FaultLocation::RfBit { bit, .. }, _) | (FaultLocation::PcBit { bit }, _) => {
                check(bit, 32)
            }
            (FaultLocation::CsrBit { csr, bit }, _) => check(bit, csr.width()),
        }
    }
}

// ---------------------------------------------------------------------------
// Campaigns
// ---------------------------------------------------------------------------

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::cluster::{Cluster, ClusterConfig, ClusterError, RunStatus};
use crate::hmr::Mode;
use crate::scenario::MatmulScenario;
use crate::workload::MatmulSpec;

/// Redundancy setup a campaign runs under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Protection {
    Independent,
    /// Dual lockstep, application restart on error.
    DmrSw,
    DmrRapid,
    /// Triple lockstep with software resynchronization.
    TmrSw,
    TmrRapid,
}

impl Protection {
    pub fn mode(self) -> Mode {
        match self {
            Protection::Independent => Mode::Independent,
            Protection::DmrSw | Protection::DmrRapid => Mode::Dmr,
            Protection::TmrSw | Protection::TmrRapid => Mode::Tmr,
        }
    }

    pub fn rapid(self) -> bool {
        matches!(self, Protection::DmrRapid | Protection::TmrRapid)
    }

    /// Applies the recovery option to a cluster configuration.
    pub fn configure(self, cfg: &ClusterConfig) -> ClusterConfig {
        let mut c = *cfg;
        c.options.rapid_recovery_enabled = self.rapid();
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSpace {
    pub rf: bool,
    pub pc: bool,
    pub csr: bool,
    pub interface: bool,
}

impl Default for TargetSpace {
    fn default() -> Self {
        TargetSpace {
            rf: true,
            pc: true,
            csr: true,
            interface: true,
        }
    }
}

impl TargetSpace {
    /// Every injectable bit, in a fixed order.
    pub fn locations(&self) -> Vec<(FaultLocation, FaultKind)> {
        let mut out = Vec::new();
        if self.rf {
            for reg in 1..32u8 {
                for bit in 0..32u8 {
                    out.push((FaultLocation::RfBit { reg, bit }, FaultKind::Seu));
                }
            }
        }
        if self.pc {
            for bit in 0..32u8 {
                out.push((FaultLocation::PcBit { bit }, FaultKind::Seu));
            }
        }
        if self.csr {
            for csr in Csr::ALL {
                for bit in 0..csr.width() as u8 {
                    out.push((FaultLocation::CsrBit { csr, bit }, FaultKind::Seu));
                }
            }
        }
        if self.interface {
            for field in IfaceField::ALL {
                for bit in 0..field.width() as u8 {
                    out.push((FaultLocation::InterfaceBit { field, bit }, FaultKind::Set));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub runs: usize,
    pub seed: u64,
    pub protection: Protection,
    #[serde(default)]
    pub workload: MatmulSpec,
    #[serde(default)]
    pub targets: TargetSpace,
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
}

fn default_data_seed() -> u64 {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Masked,
    DetectedRecovered,
    Sdc,
    Hang,
}

/// Observable summary of one finished (or abandoned) run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunObservation {
    pub status: RunStatus,
    pub result_digest: String,
    pub cycles: u64,
    pub errors: u64,
    pub recoveries: usize,
    pub recovery_cycles: u64,
}

impl RunObservation {
    pub fn of(s: &MatmulScenario, status: RunStatus) -> Self {
        let c = &s.cluster;
        RunObservation {
            status,
            result_digest: s.result_digest(),
            cycles: c.cycle(),
            errors: c.errors(),
            recoveries: c.traces().len(),
            recovery_cycles: c.traces().iter().map(|t| t.total).sum(),
        }
    }
}

pub fn classify(golden: &RunObservation, faulty: &RunObservation) -> Outcome {
    if faulty.status == RunStatus::Timeout {
        Outcome::Hang
    } else if faulty.result_digest != golden.result_digest {
        Outcome::Sdc
    } else if faulty.errors > 0 || faulty.recoveries > 0 {
        Outcome::DetectedRecovered
    } else {
        Outcome::Masked
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OutcomeCounts {
    pub masked: usize,
    pub detected_recovered: usize,
    pub sdc: usize,
    pub hang: usize,
}

impl OutcomeCounts {
    pub fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Masked => self.masked += 1,
            Outcome::DetectedRecovered => self.detected_recovered += 1,
            Outcome::Sdc => self.sdc += 1,
            Outcome::Hang => self.hang += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.masked + self.detected_recovered + self.sdc + self.hang
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunRecord {
    pub index: usize,
    pub seed: u64,
    pub fault: FaultEvent,
    pub outcome: Outcome,
    pub cycles: u64,
    pub recovery_cycles: u64,
    pub errors: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CampaignReport {
    pub config: CampaignConfig,
    pub runs: usize,
    pub golden_cycles: u64,
    pub golden_digest: String,
    pub outcomes: OutcomeCounts,
    pub masked_fraction: f64,
    pub records: Vec<RunRecord>,
    pub hash: String,
}

impl CampaignReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "index,seed,cycle,core,kind,target,detail,bit,outcome,cycles,recovery_cycles,errors\n",
        );
        for r in &self.records {
            let (target, detail, bit) = match r.fault.location {
                FaultLocation::RfBit { reg, bit } => ("rf", format!("x{reg}"), bit),
                FaultLocation::PcBit { bit } => ("pc", String::new(), bit),
                FaultLocation::CsrBit { csr, bit } => {
                    ("csr", format!("{csr:?}").to_lowercase(), bit)
                }
                FaultLocation::InterfaceBit { field, bit } => (
                    "interface",
                    serde_json::to_value(field)
                        .unwrap()
                        .as_str()
                        .unwrap()
                        .to_string(),
                    bit,
                ),
            };
            let outcome = serde_json::to_value(r.outcome).unwrap();
            s += &format!(
                "{},{},{},{},{:?},{},{},{},{},{},{},{}\n",
                r.index,
                r.seed,
                r.fault.cycle,
                r.fault.target_core,
                r.fault.kind,
                target,
                detail,
                bit,
                outcome.as_str().unwrap(),
                r.cycles,
                r.recovery_cycles,
                r.errors
            );
        }
        s
    }
}

/// Seed of run `index`, independent of execution order.
pub fn run_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws one fault uniformly over `space`, cores and the cycle window.
pub fn draw_fault(
    rng: &mut impl Rng,
    space: &[(FaultLocation, FaultKind)],
    n_cores: usize,
    window: u64,
) -> FaultEvent {
    let (location, kind) = space[rng.random_range(0..space.len())];
    FaultEvent {
        cycle: rng.random_range(0..window.max(1)),
        target_core: rng.random_range(0..n_cores),
        location,
        kind,
    }
}

pub const HANG_FACTOR: u64 = 10;

pub fn run_campaign(
    cluster: &ClusterConfig,
    cc: &CampaignConfig,
) -> Result<CampaignReport, ClusterError> {
    let cfg = cc.protection.configure(cluster);
    let base = MatmulScenario::new(&cfg, cc.protection.mode(), cc.workload, cc.data_seed)?;
    let mut golden_run = base.clone();
    let status = golden_run.run(u64::MAX);
    let golden = RunObservation::of(&golden_run, status);
    if !golden_run.correct() {
        return Err(ClusterError::Config(
            "golden run produced a wrong result".into(),
        ));
    }
    let space = cc.targets.locations();
    if space.is_empty() {
        return Err(ClusterError::Config("empty fault target space".into()));
    }
    let limit = golden.cycles * HANG_FACTOR;
    let records: Vec<RunRecord> = (0..cc.runs)
        .into_par_iter()
        .map(|index| {
            let seed = run_seed(cc.seed, index);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fault = draw_fault(&mut rng, &space, cfg.n_cores, golden.cycles);
            let mut sim = base.clone();
            sim.cluster.inject(fault).expect("drawn fault is valid");
            let status = sim.run(limit);
            let obs = RunObservation::of(&sim, status);
            RunRecord {
                index,
                seed,
                fault,
                outcome: classify(&golden, &obs),
                cycles: obs.cycles,
                recovery_cycles: obs.recovery_cycles,
                errors: obs.errors,
            }
        })
        .collect();
    let mut outcomes = OutcomeCounts::default();
    records.iter().for_each(|r| outcomes.add(r.outcome));
    let mut h = Sha256::new();
    h.update(
        serde_json::to_vec(&(&golden.result_digest, golden.cycles, &records))
            .expect("serializable"),
    );
    Ok(CampaignReport {
        config: *cc,
        runs: cc.runs,
        golden_cycles: golden.cycles,
        golden_digest: golden.result_digest,
        masked_fraction: if cc.runs == 0 {
            0.0
        } else {
            outcomes.masked as f64 / cc.runs as f64
        },
        outcomes,
        records,
        hash: hex::encode(h.finalize()),
    })
}

/// Schedules `event` on a running cluster.
pub fn inject(sim: &mut Cluster, event: FaultEvent) -> Result<(), ClusterError> {
    sim.inject(event)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let ev = |location, kind| FaultEvent {
            cycle: 0,
            target_core: 0,
            location,
            kind,
        };
        assert_eq!(
            ev(FaultLocation::RfBit { reg: 0, bit: 0 }, FaultKind::Seu).validate(12),
            Err(FaultError::ZeroRegister)
        );
        assert!(ev(FaultLocation::RfBit { reg: 5, bit: 0 }, FaultKind::Seu)
            .validate(12)
            .is_ok());
        assert!(ev(
            FaultLocation::CsrBit {
                csr: Csr::Mstatus,
                bit: 1
            },
            FaultKind::Seu
        )
        .validate(12)
        .is_err());
        assert!(ev(
            FaultLocation::InterfaceBit {
                field: IfaceField::Wdata,
                bit: 7
            },
            FaultKind::Seu
        )
        .validate(12)
        .is_err());
        let mut e = ev(FaultLocation::PcBit { bit: 3 }, FaultKind::Seu);
        e.target_core = 12;
        assert_eq!(e.validate(12), Err(FaultError::BadCore(12)));
    }

    #[test]
    fn target_space_size() {
        assert_eq!(
            TargetSpace::default().locations().len(),
            31 * 32 + 32 + 97 + 102
        );
    }

    #[test]
    fn classification() {
        let g = RunObservation {
            status: RunStatus::Completed,
            result_digest: "a".into(),
            cycles: 10,
            errors: 0,
            recoveries: 0,
            recovery_cycles: 0,
        };
        let mut f = g.clone();
        assert_eq!(classify(&g, &f), Outcome::Masked);
        f.errors = 1;
        assert_eq!(classify(&g, &f), Outcome::DetectedRecovered);
        f.result_digest = "b".into();
        assert_eq!(classify(&g, &f), Outcome::Sdc);
        f.status = RunStatus::Timeout;
        assert_eq!(classify(&g, &f), Outcome::Hang);
    }
}
