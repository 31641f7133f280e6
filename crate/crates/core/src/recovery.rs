//! Recovery paths: the ECC-protected shadow region with its hardware
//! restore sequence, and the software resynchronization state machine.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cpu::{ArchState, BackupPorts, Core, Csr, DebugWrite, MODIFIABLE_REGS, RF_WRITE_PORTS};

// ---------------------------------------------------------------------------
// SEC-DED Hamming(39,32)
// ---------------------------------------------------------------------------

/// Codeword bits: 0 is overall parity, 1..=38 form a Hamming code with
/// parity at the power-of-two positions.
pub const CODEWORD_BITS: u32 = 39;

const fn data_positions() -> [u8; 32] {
    let mut out = [0u8; 32];
    let mut pos = 1u8;
    let mut i = 0;
    while i < 32 {
        if !pos.is_power_of_two() {
            out[i] = pos;
            i += 1;
        }
        pos += 1;
    }
    out
}

const DATA_POS: [u8; 32] = data_positions();

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
pub struct EccCodeword(pub u64);

impl EccCodeword {
    pub fn flip(self, bit: u32) -> Self {
        assert!(bit < CODEWORD_BITS);
        EccCodeword(self.0 ^ (1 << bit))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EccStatus {
    Ok,
    Corrected(u32),
    Uncorrectable,
}

fn syndrome(bits: u64) -> u32 {
    let mut s = 0u32;
    let mut rest = bits & !1;
    while rest != 0 {
        let p = rest.trailing_zeros();
        s ^= p;
        rest &= rest - 1;
    }
    s
}

pub fn ecc_encode(word: u32) -> EccCodeword {
    let mut bits = 0u64;
    for (i, &p) in DATA_POS.iter().enumerate() {
        bits |= (((word >> i) & 1) as u64) << p;
    }
    let s = syndrome(bits);
    for k in 0..6 {
        bits |= (((s >> k) & 1) as u64) << (1u32 << k);
    }
    bits |= (bits.count_ones() & 1) as u64;
    EccCodeword(bits)
}

fn extract(bits: u64) -> u32 {
    DATA_POS
        .iter()
        .enumerate()
        .fold(0u32, |w, (i, &p)| w | (((bits >> p) & 1) as u32) << i)
}

pub fn ecc_decode(cw: EccCodeword) -> (u32, EccStatus) {
    let bits = cw.0 & ((1u64 << CODEWORD_BITS) - 1);
    let s = syndrome(bits);
    let odd = bits.count_ones() & 1 == 1;
    match (s, odd) {
        (0, false) => (extract(bits), EccStatus::Ok),
        (s, true) if s < CODEWORD_BITS => (extract(bits ^ (1 << s)), EccStatus::Corrected(s)),
        _ => (extract(bits), EccStatus::Uncorrectable),
    }
}

// ---------------------------------------------------------------------------
// Shadow region
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecoveryError {
    #[error("uncorrectable ECC word in the recovery region ({0})")]
    Uncorrectable(RegionSlot),
    #[error("restore budget of {budget} cycles is below the {needed} cycles the write ports need")]
    RestoreBudget { budget: u32, needed: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum RegionSlot {
    Pc,
    Rf(u8),
    Csr(usize),
}

impl std::fmt::Display for RegionSlot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegionSlot::Pc => write!(f, "pc"),
            RegionSlot::Rf(r) => write!(f, "x{r}"),
            RegionSlot::Csr(c) => write!(f, "{:?}", Csr::ALL[*c]),
        }
    }
}

/// ECC-protected copy of one core's PC, registers x1..x31 and CSRs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecoveryRegion {
    pub backup_pc: EccCodeword,
    pub backup_rf: [EccCodeword; MODIFIABLE_REGS],
    pub backup_csrs: [EccCodeword; 4],
    pub write_blocked: bool,
}

/// Decoded region contents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionImage {
    pub pc: u32,
    pub rf: [u32; MODIFIABLE_REGS],
    pub csrs: [u32; 4],
    pub corrections: u32,
}

impl RecoveryRegion {
    pub fn from_state(s: &ArchState) -> Self {
        RecoveryRegion {
            backup_pc: ecc_encode(s.pc),
            backup_rf: std::array::from_fn(|i| ecc_encode(s.reg(i as u8 + 1))),
            backup_csrs: std::array::from_fn(|i| ecc_encode(s.csrs.get(Csr::ALL[i]))),
            write_blocked: false,
        }
    }

    /// Mirrors one cycle of port writes unless `error` blocks the update.
    pub fn commit(&mut self, ports: &BackupPorts, error: bool) {
        self.write_blocked = error;
        if error {
            return;
        }
        if let Some(pc) = ports.pc_write {
            self.backup_pc = ecc_encode(pc);
        }
        for &(r, v) in &ports.rf_writes {
            if r != 0 {
                self.backup_rf[r as usize - 1] = ecc_encode(v);
            }
        }
        for &(c, v) in &ports.csr_writes {
            let v = if c.width() < 32 {
                v & ((1 << c.width()) - 1)
            } else {
                v
            };
            self.backup_csrs[c.index()] = ecc_encode(v);
        }
    }

    pub fn decode(&self) -> Result<RegionImage, RecoveryError> {
        let mut corrections = 0;
        let mut dec = |cw: EccCodeword, slot: RegionSlot| match ecc_decode(cw) {
            (w, EccStatus::Ok) => Ok(w),
            (w, EccStatus::Corrected(_)) => {
                corrections += 1;
                Ok(w)
            }
            (_, EccStatus::Uncorrectable) => Err(RecoveryError::Uncorrectable(slot)),
        };
        let pc = dec(self.backup_pc, RegionSlot::Pc)?;
        let mut rf = [0u32; MODIFIABLE_REGS];
        for (i, cw) in self.backup_rf.iter().enumerate() {
            rf[i] = dec(*cw, RegionSlot::Rf(i as u8 + 1))?;
        }
        let mut csrs = [0u32; 4];
        for (i, cw) in self.backup_csrs.iter().enumerate() {
            csrs[i] = dec(*cw, RegionSlot::Csr(i))?;
        }
        Ok(RegionImage {
            pc,
            rf,
            csrs,
            corrections,
        })
    }

    /// The architectural state held by the region, if decodable.
    pub fn to_state(&self, template: &ArchState) -> Result<ArchState, RecoveryError> {
        let img = self.decode()?;
        let mut s = template.clone();
        s.pc = img.pc;
        for (i, v) in img.rf.iter().enumerate() {
            s.set_reg(i as u8 + 1, *v);
        }
        for (i, v) in img.csrs.iter().enumerate() {
            s.csrs.set(Csr::ALL[i], *v);
        }
        Ok(s)
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.backup_pc.0.to_le_bytes());
        for cw in self.backup_rf.iter().chain(&self.backup_csrs) {
            h.update(cw.0.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn flip(&mut self, slot: RegionSlot, bit: u32) {
        let cw = match slot {
            RegionSlot::Pc => &mut self.backup_pc,
            RegionSlot::Rf(r) => &mut self.backup_rf[r as usize - 1],
            RegionSlot::Csr(c) => &mut self.backup_csrs[c],
        };
        *cw = cw.flip(bit);
    }
}

pub fn backup_commit(
    mut region: RecoveryRegion,
    ports: &BackupPorts,
    error: bool,
) -> RecoveryRegion {
    region.commit(ports, error);
    region
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryKind {
    Rapid,
    TclsSoftware,
    /// Whole application restarted from boot.
    Restart,
    /// Hardware copy of the main core's state into a newly formed group.
    HwFill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    Measured,
    Calibrated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Phase {
    pub name: String,
    pub cycles: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RecoveryTrace {
    pub kind: RecoveryKind,
    pub group: usize,
    pub start_cycle: u64,
    pub phases: Vec<Phase>,
    pub total: u64,
    pub max_rf_writes_per_cycle: usize,
    pub ecc_corrections: u32,
    pub source: TraceSource,
}

impl RecoveryTrace {
    pub fn new(kind: RecoveryKind, group: usize, start_cycle: u64, source: TraceSource) -> Self {
        RecoveryTrace {
            kind,
            group,
            start_cycle,
            phases: Vec::new(),
            total: 0,
            max_rf_writes_per_cycle: 0,
            ecc_corrections: 0,
            source,
        }
    }

    pub fn push(&mut self, name: &str, cycles: u64) {
        self.phases.push(Phase {
            name: name.to_string(),
            cycles,
        });
        self.total += cycles;
    }

    pub fn phase(&self, name: &str) -> Option<u64> {
        self.phases
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.cycles)
    }
}

// ---------------------------------------------------------------------------
// Rapid recovery
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RapidBudgets {
    pub setup_clear: u32,
    pub halt_ack: u32,
    pub restore: u32,
}

impl Default for RapidBudgets {
    fn default() -> Self {
        RapidBudgets {
            setup_clear: 4,
            halt_ack: 4,
            restore: restore_cycles(MODIFIABLE_REGS as u32, RF_WRITE_PORTS as u32),
        }
    }
}

impl RapidBudgets {
    pub fn total(&self) -> u32 {
        self.setup_clear + self.halt_ack + self.restore
    }

    pub fn validate(&self) -> Result<(), RecoveryError> {
        let needed = restore_cycles(MODIFIABLE_REGS as u32, RF_WRITE_PORTS as u32);
        if self.restore < needed || self.setup_clear == 0 {
            return Err(RecoveryError::RestoreBudget {
                budget: self.restore,
                needed,
            });
        }
        Ok(())
    }
}

pub fn restore_cycles(regs: u32, ports: u32) -> u32 {
    regs.div_ceil(ports)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RapidState {
    Idle,
    Clear,
    Halt,
    Restore,
}

/// Result of one rapid-recovery cycle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RapidStep {
    Busy,
    Done(RecoveryTrace),
    /// The region could not be decoded; the caller escalates.
    Aborted(RegionSlot),
}

/// Hardware restore sequencer for one group. Driven once per cycle.
#[derive(Clone, Debug)]
pub struct RapidFsm {
    pub state: RapidState,
    budgets: RapidBudgets,
    in_phase: u32,
    image: Option<RegionImage>,
    trace: Option<RecoveryTrace>,
}

impl RapidFsm {
    pub fn new(budgets: RapidBudgets) -> Self {
        RapidFsm {
            state: RapidState::Idle,
            budgets,
            in_phase: 0,
            image: None,
            trace: None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.state != RapidState::Idle
    }

    /// Arms the sequencer. The region is validated up front so a bad word
    /// aborts before any core is touched.
    pub fn start(
        &mut self,
        kind: RecoveryKind,
        group: usize,
        cycle: u64,
        region: &RecoveryRegion,
    ) -> Result<(), RegionSlot> {
        let image = region.decode().map_err(|e| match e {
            RecoveryError::Uncorrectable(s) => s,
            RecoveryError::RestoreBudget { .. } => unreachable!(),
        })?;
        let mut trace = RecoveryTrace::new(kind, group, cycle, TraceSource::Measured);
        trace.ecc_corrections = image.corrections;
        self.image = Some(image);
        self.trace = Some(trace);
        self.state = RapidState::Clear;
        self.in_phase = 0;
        Ok(())
    }

    pub fn tick(&mut self, cores: &mut [Core], members: &[usize]) -> RapidStep {
        let trace = self.trace.as_mut().expect("tick on idle rapid FSM");
        self.in_phase += 1;
        match self.state {
            RapidState::Idle => unreachable!(),
            RapidState::Clear => {
                if self.in_phase == 1 {
                    for &m in members {
                        cores[m].synchronous_clear();
                    }
                }
                if self.in_phase == self.budgets.setup_clear {
                    for &m in members {
                        cores[m].debug_halt_request();
                    }
                    trace.push("clear", self.in_phase as u64);
                    self.state = RapidState::Halt;
                    self.in_phase = 0;
                }
                RapidStep::Busy
            }
            RapidState::Halt => {
                let mut all = true;
                for &m in members {
                    all &= cores[m].tick_debug();
                }
                if all && self.in_phase >= self.budgets.halt_ack {
                    trace.push("halt", self.in_phase as u64);
                    self.state = RapidState::Restore;
                    self.in_phase = 0;
                }
                RapidStep::Busy
            }
            RapidState::Restore => {
                let img = self.image.as_ref().expect("armed");
                let k = self.in_phase as usize;
                let lo = (k - 1) * RF_WRITE_PORTS;
                let rf: Vec<(u8, u32)> = (lo..(lo + RF_WRITE_PORTS).min(MODIFIABLE_REGS))
                    .map(|i| (i as u8 + 1, img.rf[i]))
                    .collect();
                let csrs: Vec<(Csr, u32)> = if k == 1 {
                    Csr::ALL.iter().map(|&c| (c, img.csrs[c.index()])).collect()
                } else {
                    Vec::new()
                };
                let w = DebugWrite {
                    pc: (k == 1).then_some(img.pc),
                    rf: &rf,
                    csrs: &csrs,
                };
                for &m in members {
                    cores[m]
                        .debug_write_state(&w)
                        .expect("core halted and within port budget");
                }
                trace.max_rf_writes_per_cycle = trace.max_rf_writes_per_cycle.max(rf.len());
                if self.in_phase == self.budgets.restore {
                    trace.push("restore", self.in_phase as u64);
                    for &m in members {
                        cores[m].resume();
                    }
                    self.state = RapidState::Idle;
                    self.image = None;
                    return RapidStep::Done(self.trace.take().expect("armed"));
                }
                RapidStep::Busy
            }
        }
    }
}

/// Runs a complete hardware restore of `members` from `region`.
pub fn rapid_recover(
    cores: &mut [Core],
    members: &[usize],
    region: &RecoveryRegion,
    budgets: RapidBudgets,
) -> Result<RecoveryTrace, RecoveryError> {
    budgets.validate()?;
    let mut fsm = RapidFsm::new(budgets);
    fsm.start(RecoveryKind::Rapid, members[0], 0, region)
        .map_err(RecoveryError::Uncorrectable)?;
    loop {
        match fsm.tick(cores, members) {
            RapidStep::Busy => {}
            RapidStep::Done(t) => return Ok(t),
            RapidStep::Aborted(s) => return Err(RecoveryError::Uncorrectable(s)),
        }
    }
}

// ---------------------------------------------------------------------------
// Software resynchronization
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TclsState {
    Run,
    Unload,
    Reload,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TclsAction {
    None,
    /// Send the resynchronization interrupt to the group.
    RaiseResync,
    /// Synchronously clear every member.
    Clear,
    /// Recovery finished.
    Complete,
}

#[derive(Clone, Debug)]
pub struct TclsFsm {
    pub state: TclsState,
    pub pending_clear: bool,
    pub unloads: u32,
    pub reloads: u32,
    group: usize,
    start: u64,
    reload_start: u64,
    last: Option<RecoveryTrace>,
}

impl TclsFsm {
    pub fn new(group: usize) -> Self {
        TclsFsm {
            state: TclsState::Run,
            pending_clear: false,
            unloads: 0,
            reloads: 0,
            group,
            start: 0,
            reload_start: 0,
            last: None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.state != TclsState::Run
    }

    pub fn on_error(&mut self, cycle: u64, sync_clear: bool) -> TclsAction {
        match self.state {
            TclsState::Run => {
                self.state = TclsState::Unload;
                self.unloads += 1;
                self.start = cycle;
                TclsAction::RaiseResync
            }
            TclsState::Unload => TclsAction::None,
            TclsState::Reload => {
                // restart the reload; the saved state on the stack is still valid
                self.reloads += 1;
                self.pending_clear = sync_clear;
                if sync_clear {
                    TclsAction::Clear
                } else {
                    TclsAction::None
                }
            }
        }
    }

    pub fn on_sp_write(&mut self, cycle: u64, value: u32, sync_clear: bool) -> TclsAction {
        match (self.state, value) {
            (TclsState::Unload, v) if v != 0 => {
                self.state = TclsState::Reload;
                self.reloads += 1;
                self.reload_start = cycle;
                self.pending_clear = sync_clear;
                if sync_clear {
                    TclsAction::Clear
                } else {
                    TclsAction::None
                }
            }
            (TclsState::Reload, 0) => {
                self.state = TclsState::Run;
                self.pending_clear = false;
                let mut t = RecoveryTrace::new(
                    RecoveryKind::TclsSoftware,
                    self.group,
                    self.start,
                    TraceSource::Measured,
                );
                t.push("unload", self.reload_start - self.start);
                t.push("reload", cycle - self.reload_start);
                self.last = Some(t);
                TclsAction::Complete
            }
            _ => TclsAction::None,
        }
    }

    pub fn take_trace(&mut self) -> Option<RecoveryTrace> {
        self.last.take()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TclsCalibration {
    pub unload: u64,
    pub reload: u64,
}

impl Default for TclsCalibration {
    fn default() -> Self {
        TclsCalibration {
            unload: 247,
            reload: 116,
        }
    }
}

/// Calibrated software resynchronization: walks the state machine with the
/// configured phase latencies instead of executing the handler.
pub fn tcls_sw_recover(group: usize, start_cycle: u64, cal: &TclsCalibration) -> RecoveryTrace {
    let mut fsm = TclsFsm::new(group);
    fsm.on_error(start_cycle, true);
    fsm.on_sp_write(start_cycle + cal.unload, 0x1000, true);
    fsm.on_sp_write(start_cycle + cal.unload + cal.reload, 0, true);
    let mut t = fsm.take_trace().expect("walked to completion");
    t.source = TraceSource::Calibrated;
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BootPath {
    Normal,
    Reload { sp: u32 },
}

pub fn boot_sp_check(sp_reg: u32) -> BootPath {
    if sp_reg == 0 {
        BootPath::Normal
    } else {
        BootPath::Reload { sp: sp_reg }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpu::CoreConfig;

    #[test]
    fn ecc_zero_and_layout() {
        assert_eq!(ecc_encode(0), EccCodeword(0));
        assert_eq!(ecc_decode(ecc_encode(0)), (0, EccStatus::Ok));
        assert_eq!(DATA_POS[0], 3);
        assert_eq!(DATA_POS[31], 38);
        assert!(ecc_encode(u32::MAX).0 < 1 << CODEWORD_BITS);
    }

    #[test]
    fn ecc_single_flips_corrected() {
        for w in [0u32, 1, 0xDEAD_BEEF, u32::MAX, 0x8000_0000] {
            let cw = ecc_encode(w);
            for k in 0..CODEWORD_BITS {
                assert_eq!(
                    ecc_decode(cw.flip(k)),
                    (w, EccStatus::Corrected(k)),
                    "w={w:#x} k={k}"
                );
            }
        }
    }

    #[test]
    fn ecc_double_flips_detected() {
        let cw = ecc_encode(0x1234_5678);
        for i in 0..CODEWORD_BITS {
            for j in i + 1..CODEWORD_BITS {
                assert_eq!(ecc_decode(cw.flip(i).flip(j)).1, EccStatus::Uncorrectable);
            }
        }
    }

    fn sample_state() -> ArchState {
        let mut s = ArchState::cleared(0, 0x80);
        s.pc = 0x240;
        for r in 1..32u8 {
            s.set_reg(r, 0x1000 * r as u32 + 7);
        }
        s.csrs.mepc = 0x44;
        s.csrs.mcause = 0x8000_0011;
        s.csrs.mtvec = 0x81;
        s.csrs.mstatus_mie = true;
        s
    }

    #[test]
    fn commit_and_block() {
        let mut region = RecoveryRegion::from_state(&ArchState::cleared(0, 0x80));
        let mut ports = BackupPorts {
            pc_write: Some(0x40),
            ..Default::default()
        };
        ports.rf_writes.push((3, 7));
        let before = region.clone();
        region.commit(&ports, true);
        assert!(region.write_blocked);
        assert_eq!(region.digest(), before.digest());
        region.commit(&BackupPorts::default(), false);
        assert_eq!(region.digest(), before.digest());
        region.commit(&ports, false);
        let img = region.decode().unwrap();
        assert_eq!((img.pc, img.rf[2]), (0x40, 7));
    }

    #[test]
    fn rapid_restore_budget_and_state() {
        let src = sample_state();
        let region = RecoveryRegion::from_state(&src);
        let mut cores: Vec<Core> = (0..3).map(|_| Core::new(CoreConfig::default())).collect();
        cores[1].state_mut().set_reg(9, 1);
        let t = rapid_recover(&mut cores, &[0, 1, 2], &region, RapidBudgets::default()).unwrap();
        assert_eq!(
            t.phases.iter().map(|p| p.cycles).collect::<Vec<_>>(),
            vec![4, 4, 16]
        );
        assert_eq!(t.total, 24);
        assert_eq!(t.max_rf_writes_per_cycle, 2);
        for c in &cores {
            assert!(!c.is_halted());
            assert!(c.state().same_architecture(&src));
        }
    }

    #[test]
    fn rapid_corrects_single_flip_and_aborts_on_double() {
        let src = sample_state();
        let mut region = RecoveryRegion::from_state(&src);
        region.flip(RegionSlot::Rf(5), 11);
        let mut cores = vec![Core::new(CoreConfig::default()); 2];
        let t = rapid_recover(&mut cores, &[0, 1], &region, RapidBudgets::default()).unwrap();
        assert_eq!(t.ecc_corrections, 1);
        assert!(cores[0].state().same_architecture(&src));
        region.flip(RegionSlot::Rf(5), 12);
        assert_eq!(
            rapid_recover(&mut cores, &[0, 1], &region, RapidBudgets::default()),
            Err(RecoveryError::Uncorrectable(RegionSlot::Rf(5)))
        );
    }

    #[test]
    fn tcls_walk_and_reload_retry() {
        let mut f = TclsFsm::new(0);
        assert_eq!(f.on_error(10, true), TclsAction::RaiseResync);
        assert_eq!(f.on_error(11, true), TclsAction::None);
        assert_eq!(f.on_sp_write(50, 0x2000, true), TclsAction::Clear);
        assert_eq!(f.state, TclsState::Reload);
        assert_eq!(f.on_error(60, true), TclsAction::Clear);
        assert_eq!(f.unloads, 1);
        assert_eq!(f.reloads, 2);
        assert_eq!(f.on_sp_write(90, 0, true), TclsAction::Complete);
        let t = f.take_trace().unwrap();
        assert_eq!((t.phase("unload"), t.phase("reload")), (Some(40), Some(40)));
    }

    #[test]
    fn tcls_calibrated() {
        let t = tcls_sw_recover(0, 100, &TclsCalibration::default());
        assert_eq!(t.phase("unload"), Some(247));
        assert_eq!(t.phase("reload"), Some(116));
        assert_eq!(t.total, 363);
    }

    #[test]
    fn boot_paths() {
        assert_eq!(boot_sp_check(0), BootPath::Normal);
        assert_eq!(boot_sp_check(0x10F0), BootPath::Reload { sp: 0x10F0 });
    }
}
