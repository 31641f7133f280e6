//! Runtime switching between independent cores and locked groups.
//!
//! A switch can be accounted in two ways. [`SplitLockController`] walks the
//! protocol on the redundancy unit's register model and charges per-phase
//! latencies from a [`SplitCalibration`]. [`run_functional`] instead executes
//! the protocol programs on the cluster model and measures the phases from
//! the event log, checking the architectural postconditions on the way.

use std::fmt::Write;
use std::sync::Arc;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{Cluster, ClusterConfig, ClusterError, Event, EventKind};
use crate::cpu::ArchState;
use crate::hmr::{self, irq, regs, GroupState, HmrConfig, HmrError, HmrOptions, Mode, MAX_CORES};
use crate::recovery::{Phase, RecoveryKind, TraceSource};
use crate::scenario::program_for;
use crate::workload::{save_frame, Layout, STACK_SIZE};

pub const SETUP: &str = "setup";
pub const UNLOAD: &str = "unload";
pub const RELOAD: &str = "reload";
pub const HW_FILL: &str = "hw_fill";
const PHASE_ORDER: [&str; 4] = [SETUP, UNLOAD, RELOAD, HW_FILL];

/// Most steps a script may hold; bounds the kernel output area.
pub const MAX_STEPS: usize = 32;
const MAX_ITERS: u32 = 100_000;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("{mode:?} is unavailable with {n} cores")]
    ModeUnavailable { mode: Mode, n: usize },
    #[error("group {main} is {state:?}, expected {expected}")]
    WrongState {
        main: usize,
        state: GroupState,
        expected: &'static str,
    },
    #[error(transparent)]
    Hmr(#[from] HmrError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("script step {step}: {msg}")]
    Script { step: usize, msg: String },
    #[error("functional run did not finish within {0} cycles")]
    Timeout(u64),
    #[error("step {step}: no {what} in the event log")]
    MissingEvent { step: usize, what: &'static str },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// State moves through the stacks.
    #[default]
    Sw,
    /// The group is filled from the main core's backup registers.
    Rapid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    MissionCritical,
    Performance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Entry,
    Exit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Main,
    Helper,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SectionTrace {
    pub kind: SectionKind,
    pub direction: Direction,
    pub mode: Mode,
    pub variant: Variant,
    pub role: Role,
    pub core: usize,
    pub start_cycle: u64,
    pub phases: Vec<Phase>,
    pub total: u64,
    pub source: TraceSource,
}

impl SectionTrace {
    fn new(
        kind: SectionKind,
        direction: Direction,
        mode: Mode,
        variant: Variant,
        role: Role,
        core: usize,
        start_cycle: u64,
        source: TraceSource,
    ) -> Self {
        SectionTrace {
            kind,
            direction,
            mode,
            variant,
            role,
            core,
            start_cycle,
            phases: Vec::new(),
            total: 0,
            source,
        }
    }

    fn push(&mut self, name: &str, cycles: u64) {
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

    /// Phases appear in protocol order and the total is their sum.
    pub fn well_formed(&self) -> bool {
        let idx: Option<Vec<usize>> = self
            .phases
            .iter()
            .map(|p| PHASE_ORDER.iter().position(|&n| n == p.name))
            .collect();
        let Some(idx) = idx else { return false };
        let fill_and_reload = self.phase(RELOAD).is_some() && self.phase(HW_FILL).is_some();
        idx.windows(2).all(|w| w[0] < w[1])
            && !fill_and_reload
            && self.total == self.phases.iter().map(|p| p.cycles).sum::<u64>()
    }
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseCycles {
    pub setup: u64,
    pub unload: u64,
    pub reload: u64,
    pub hw_fill: u64,
}

impl PhaseCycles {
    const fn new(setup: u64, unload: u64, reload: u64, hw_fill: u64) -> Self {
        PhaseCycles {
            setup,
            unload,
            reload,
            hw_fill,
        }
    }

    pub fn total(&self) -> u64 {
        self.setup + self.unload + self.reload + self.hw_fill
    }

    fn nonzero(&self) -> impl Iterator<Item = (&'static str, u64)> {
        [
            (SETUP, self.setup),
            (UNLOAD, self.unload),
            (RELOAD, self.reload),
            (HW_FILL, self.hw_fill),
        ]
        .into_iter()
        .filter(|&(_, c)| c > 0)
    }
}

/// Redundancy configuration a latency belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    Dmr,
    Tmr,
    DmrRapid,
    TmrRapid,
}

impl Column {
    pub const ALL: [Column; 4] = [Column::Dmr, Column::Tmr, Column::DmrRapid, Column::TmrRapid];

    pub fn of(mode: Mode, variant: Variant) -> Option<Column> {
        match (mode, variant) {
            (Mode::Dmr, Variant::Sw) => Some(Column::Dmr),
            (Mode::Tmr, Variant::Sw) => Some(Column::Tmr),
            (Mode::Dmr, Variant::Rapid) => Some(Column::DmrRapid),
            (Mode::Tmr, Variant::Rapid) => Some(Column::TmrRapid),
            (Mode::Independent, _) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PerColumn<T> {
    pub dmr: T,
    pub tmr: T,
    pub dmr_rapid: T,
    pub tmr_rapid: T,
}

impl<T: Copy> PerColumn<T> {
    pub fn get(&self, c: Column) -> T {
        match c {
            Column::Dmr => self.dmr,
            Column::Tmr => self.tmr,
            Column::DmrRapid => self.dmr_rapid,
            Column::TmrRapid => self.tmr_rapid,
        }
    }
}

/// Per-phase latencies charged by the calibrated controller.
///
/// The triple-mode columns carry the measured phase breakdown. The dual-mode
/// columns reuse the triple-mode setup and reload costs and put the rest of
/// the measured total into the unload phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCalibration {
    pub mc_entry: PerColumn<PhaseCycles>,
    pub mc_exit_main: PerColumn<PhaseCycles>,
    pub mc_exit_helper: PerColumn<PhaseCycles>,
    pub perf_entry: PerColumn<PhaseCycles>,
    pub perf_exit: PerColumn<PhaseCycles>,
}

impl Default for SplitCalibration {
    fn default() -> Self {
        let p = PhaseCycles::new;
        SplitCalibration {
            mc_entry: PerColumn {
                dmr: p(87, 321, 126, 0),
                tmr: p(87, 195, 126, 0),
                dmr_rapid: p(86, 287, 0, 24),
                tmr_rapid: p(86, 198, 0, 24),
            },
            mc_exit_main: PerColumn {
                dmr: p(22, 0, 0, 0),
                tmr: p(23, 0, 0, 0),
                dmr_rapid: p(22, 0, 0, 0),
                tmr_rapid: p(23, 0, 0, 0),
            },
            mc_exit_helper: PerColumn {
                dmr: p(0, 0, 147, 0),
                tmr: p(0, 0, 165, 0),
                dmr_rapid: p(0, 0, 184, 0),
                tmr_rapid: p(0, 0, 182, 0),
            },
            perf_entry: PerColumn {
                dmr: p(134, 0, 0, 0),
                tmr: p(82, 0, 0, 0),
                dmr_rapid: p(125, 0, 0, 0),
                tmr_rapid: p(82, 0, 0, 0),
            },
            perf_exit: PerColumn {
                dmr: p(22, 224, 127, 0),
                tmr: p(22, 162, 127, 0),
                dmr_rapid: p(159, 0, 0, 24),
                tmr_rapid: p(70, 0, 0, 24),
            },
        }
    }
}

/// Reference totals measured on the hardware implementation.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ReferenceRow {
    pub name: &'static str,
    pub values: PerColumn<u64>,
}

const fn row(
    name: &'static str,
    dmr: u64,
    tmr: u64,
    dmr_rapid: u64,
    tmr_rapid: u64,
) -> ReferenceRow {
    ReferenceRow {
        name,
        values: PerColumn {
            dmr,
            tmr,
            dmr_rapid,
            tmr_rapid,
        },
    }
}

pub const REFERENCE: [ReferenceRow; 5] = [
    row("mission_critical_entry", 534, 410, 397, 310),
    row("mission_critical_exit_main", 22, 23, 22, 23),
    row("mission_critical_exit_helper", 147, 165, 184, 182),
    row("performance_entry", 134, 82, 125, 82),
    row("performance_exit", 373, 311, 183, 94),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Comparison {
    pub row: &'static str,
    pub column: Column,
    pub calibrated: u64,
    pub reference: u64,
    pub delta: i64,
}

impl SplitCalibration {
    fn table(&self, name: &str) -> &PerColumn<PhaseCycles> {
        match name {
            "mission_critical_entry" => &self.mc_entry,
            "mission_critical_exit_main" => &self.mc_exit_main,
            "mission_critical_exit_helper" => &self.mc_exit_helper,
            "performance_entry" => &self.perf_entry,
            "performance_exit" => &self.perf_exit,
            _ => unreachable!("reference rows are fixed"),
        }
    }

    /// Calibrated totals next to the reference measurements.
    pub fn compare(&self) -> Vec<Comparison> {
        let mut out = Vec::new();
        for r in &REFERENCE {
            for c in Column::ALL {
                let calibrated = self.table(r.name).get(c).total();
                let reference = r.values.get(c);
                out.push(Comparison {
                    row: r.name,
                    column: c,
                    calibrated,
                    reference,
                    delta: calibrated as i64 - reference as i64,
                });
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Calibrated controller
// ---------------------------------------------------------------------------

/// Traces of a mission-critical exit: the main core continues at once while
/// the helpers go through their reload path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct McExit {
    pub main: SectionTrace,
    pub helpers: Vec<SectionTrace>,
}

pub struct SplitLockController {
    hmr: HmrConfig,
    cal: SplitCalibration,
    variant: Variant,
    cycle: u64,
}

impl SplitLockController {
    pub fn new(
        n_cores: usize,
        variant: Variant,
        cal: SplitCalibration,
    ) -> Result<Self, SplitError> {
        let options = HmrOptions {
            rapid_recovery_enabled: variant == Variant::Rapid,
            ..HmrOptions::default()
        };
        Ok(SplitLockController {
            hmr: HmrConfig::new(n_cores, options)?,
            cal,
            variant,
            cycle: 0,
        })
    }

    pub fn hmr(&self) -> &HmrConfig {
        &self.hmr
    }

    /// Cycles charged so far on the main core's timeline.
    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    fn trace(
        &self,
        kind: SectionKind,
        direction: Direction,
        mode: Mode,
        role: Role,
        core: usize,
        phases: PhaseCycles,
    ) -> SectionTrace {
        let mut t = SectionTrace::new(
            kind,
            direction,
            mode,
            self.variant,
            role,
            core,
            self.cycle,
            TraceSource::Calibrated,
        );
        for (name, c) in phases.nonzero() {
            t.push(name, c);
        }
        t
    }

    fn column(&self, mode: Mode) -> Column {
        Column::of(mode, self.variant).expect("locked modes only")
    }

    fn write_mode(&mut self, main: usize, value: u32) -> Result<(), SplitError> {
        self.hmr.write(regs::MODE + 4 * main as u32, main, value)?;
        Ok(())
    }

    pub fn enter_mission_critical(
        &mut self,
        main: usize,
        mode: Mode,
    ) -> Result<SectionTrace, SplitError> {
        let n = self.hmr.n_cores();
        if mode == Mode::Independent || !mode.available(n) {
            return Err(SplitError::ModeUnavailable { mode, n });
        }
        hmr::members(main, mode, n)?;
        let state = self.hmr.group_state(main);
        if state != GroupState::Independent {
            return Err(SplitError::WrongState {
                main,
                state,
                expected: "independent",
            });
        }
        self.write_mode(main, mode.code())?;
        self.hmr.complete_sync(main);
        let t = self.trace(
            SectionKind::MissionCritical,
            Direction::Entry,
            mode,
            Role::Main,
            main,
            self.cal.mc_entry.get(self.column(mode)),
        );
        self.cycle += t.total;
        Ok(t)
    }

    /// Returns `None` (and logs a warning) if the group is not locked.
    pub fn exit_mission_critical(&mut self, main: usize) -> Option<McExit> {
        let GroupState::Locked(mode) = self.hmr.group_state(main) else {
            log::warn!("mission-critical exit for group {main} which is not locked");
            return None;
        };
        self.write_mode(main, Mode::Independent.code()).ok()?;
        let col = self.column(mode);
        let main_t = self.trace(
            SectionKind::MissionCritical,
            Direction::Exit,
            mode,
            Role::Main,
            main,
            self.cal.mc_exit_main.get(col),
        );
        let helpers = hmr::members(main, mode, self.hmr.n_cores())
            .expect("locked group is valid")
            .into_iter()
            .skip(1)
            .map(|h| {
                self.trace(
                    SectionKind::MissionCritical,
                    Direction::Exit,
                    mode,
                    Role::Helper,
                    h,
                    self.cal.mc_exit_helper.get(col),
                )
            })
            .collect();
        self.cycle += main_t.total;
        Some(McExit {
            main: main_t,
            helpers,
        })
    }

    pub fn enter_performance(&mut self, main: usize) -> Result<SectionTrace, SplitError> {
        let state = self.hmr.group_state(main);
        let GroupState::Locked(mode) = state else {
            return Err(SplitError::WrongState {
                main,
                state,
                expected: "locked",
            });
        };
        self.write_mode(main, regs::MODE_SPLIT)?;
        let t = self.trace(
            SectionKind::Performance,
            Direction::Entry,
            mode,
            Role::Main,
            main,
            self.cal.perf_entry.get(self.column(mode)),
        );
        self.cycle += t.total;
        Ok(t)
    }

    pub fn exit_performance(&mut self, main: usize) -> Result<SectionTrace, SplitError> {
        let state = self.hmr.group_state(main);
        let GroupState::Split(mode) = state else {
            return Err(SplitError::WrongState {
                main,
                state,
                expected: "split",
            });
        };
        self.write_mode(main, mode.code())?;
        self.hmr.complete_sync(main);
        let t = self.trace(
            SectionKind::Performance,
            Direction::Exit,
            mode,
            Role::Main,
            main,
            self.cal.perf_exit.get(self.column(mode)),
        );
        self.cycle += t.total;
        Ok(t)
    }
}

// ---------------------------------------------------------------------------
// Section scripts
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    /// Kernel on the main core while its group is dissolved.
    RunIndependent {
        iters: u32,
    },
    EnterMc {
        mode: Mode,
    },
    /// Kernel on whatever the main core currently is: a lone core, a locked
    /// group, or every member of a split group.
    RunKernel {
        iters: u32,
    },
    ExitMc,
    EnterPerf,
    ExitPerf,
}

/// Group state before a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sec {
    Independent,
    Locked(Mode),
    Split(Mode),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SectionScript {
    /// Core that runs the script; the others run a background loop.
    #[serde(default)]
    pub main: usize,
    #[serde(default)]
    pub variant: Variant,
    pub steps: Vec<Step>,
}

impl SectionScript {
    /// Enters a mission-critical section, opens a performance section
    /// inside it, and leaves both.
    pub fn standard(mode: Mode, variant: Variant) -> Self {
        SectionScript {
            main: 0,
            variant,
            steps: vec![
                Step::RunIndependent { iters: 40 },
                Step::EnterMc { mode },
                Step::RunKernel { iters: 30 },
                Step::EnterPerf,
                Step::RunKernel { iters: 25 },
                Step::ExitPerf,
                Step::RunKernel { iters: 20 },
                Step::ExitMc,
                Step::RunIndependent { iters: 10 },
            ],
        }
    }

    /// Checks the step sequence against the group state machine and returns
    /// the state before each step.
    pub fn validate(&self, n_cores: usize) -> Result<Vec<Sec>, SplitError> {
        let err = |step: usize, msg: String| SplitError::Script { step, msg };
        if self.steps.is_empty() || self.steps.len() > MAX_STEPS {
            return Err(err(0, format!("script needs 1..={MAX_STEPS} steps")));
        }
        if self.main >= n_cores {
            return Err(err(
                0,
                format!("main core {} outside the cluster", self.main),
            ));
        }
        let mut sec = Sec::Independent;
        let mut out = Vec::with_capacity(self.steps.len());
        for (i, step) in self.steps.iter().enumerate() {
            out.push(sec);
            sec = match (*step, sec) {
                (Step::RunIndependent { iters } | Step::RunKernel { iters }, _)
                    if iters == 0 || iters > MAX_ITERS =>
                {
                    return Err(err(i, format!("iters must be in 1..={MAX_ITERS}")));
                }
                (Step::RunIndependent { .. }, Sec::Independent) => sec,
                (Step::RunKernel { .. }, _) => sec,
                (Step::EnterMc { mode }, Sec::Independent) => {
                    if mode == Mode::Independent || !mode.available(n_cores) {
                        return Err(SplitError::ModeUnavailable { mode, n: n_cores });
                    }
                    hmr::members(self.main, mode, n_cores)?;
                    Sec::Locked(mode)
                }
                (Step::ExitMc, Sec::Locked(_)) => Sec::Independent,
                (Step::EnterPerf, Sec::Locked(m)) => Sec::Split(m),
                (Step::ExitPerf, Sec::Split(m)) => Sec::Locked(m),
                (s, st) => return Err(err(i, format!("{s:?} not allowed while {st:?}"))),
            };
        }
        if matches!(sec, Sec::Split(_)) {
            return Err(err(
                self.steps.len(),
                "script ends inside a performance section".into(),
            ));
        }
        Ok(out)
    }
}

/// Walks a script through the calibrated controller.
pub fn run_calibrated(
    script: &SectionScript,
    n_cores: usize,
    cal: SplitCalibration,
) -> Result<Vec<SectionTrace>, SplitError> {
    script.validate(n_cores)?;
    let mut ctl = SplitLockController::new(n_cores, script.variant, cal)?;
    let mut traces = Vec::new();
    for step in &script.steps {
        match *step {
            Step::RunIndependent { .. } | Step::RunKernel { .. } => {}
            Step::EnterMc { mode } => traces.push(ctl.enter_mission_critical(script.main, mode)?),
            Step::ExitMc => {
                let x = ctl
                    .exit_mission_critical(script.main)
                    .expect("validated: group locked");
                traces.push(x.main);
                traces.extend(x.helpers);
            }
            Step::EnterPerf => traces.push(ctl.enter_performance(script.main)?),
            Step::ExitPerf => traces.push(ctl.exit_performance(script.main)?),
        }
    }
    Ok(traces)
}

// ---------------------------------------------------------------------------
// Protocol programs
// ---------------------------------------------------------------------------

const TAG_BEGIN: u32 = 1;
const TAG_END: u32 = 2;
const TAG_REQUEST: u32 = 3;

fn mark_value(step: usize, tag: u32) -> u32 {
    (step as u32) << 8 | tag
}

/// Kernel results, one word per (step, hart).
pub fn kernel_out(layout: &Layout) -> u32 {
    layout.data_base()
}

/// Background loop progress, one word per hart.
pub fn background_out(layout: &Layout) -> u32 {
    kernel_out(layout) + (MAX_STEPS * MAX_CORES * 4) as u32
}

pub fn kernel_slot(layout: &Layout, step: usize, hart: usize) -> u32 {
    kernel_out(layout) + 4 * (step * MAX_CORES + hart) as u32
}

/// Reference value of the kernel run by `hart` at `step`.
pub fn kernel_value(hart: usize, step: usize, iters: u32) -> u32 {
    let mut acc = (hart + step) as u32;
    for i in (1..=iters).rev() {
        acc = acc
            .wrapping_mul(1_103_515_245)
            .wrapping_add(1234)
            .wrapping_add(i);
    }
    acc
}

/// Registers the background loop keeps live: everything but x0, sp, the two
/// scratch temporaries, its pointer and its hart id.
const BG_REGS: [u32; 25] = [
    1, 3, 4, 7, 9, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 26, 28, 29, 30, 31,
];

fn emit_mark(s: &mut String, step: usize, tag: u32) {
    writeln!(
        s,
        "    li   t0, {}\n    sw   t0, MARK(zero)",
        mark_value(step, tag)
    )
    .unwrap();
}

fn emit_kernel(s: &mut String, layout: &Layout, step: usize, iters: u32) {
    write!(
        s,
        "    csrr a0, mhartid
    li   a1, {iters}
    addi a2, a0, {step}
    li   a3, 1103515245
k{step}_loop:
    mul  a2, a2, a3
    addi a2, a2, 1234
    add  a2, a2, a1
    addi a1, a1, -1
    bnez a1, k{step}_loop
    slli t0, a0, 2
    li   t1, {base}
    add  t0, t0, t1
    sw   a2, 0(t0)
",
        base = kernel_slot(layout, step, 0),
    )
    .unwrap();
}

fn emit_background(s: &mut String, layout: &Layout) {
    writeln!(
        s,
        "bg:\n    csrr a0, mhartid\n    slli t0, a0, 2\n    li   t1, {}\n    add  s0, t0, t1",
        background_out(layout)
    )
    .unwrap();
    for (i, r) in BG_REGS.iter().enumerate() {
        writeln!(s, "    addi x{r}, a0, {}", 3 * i + 1).unwrap();
    }
    s.push_str("bg_loop:\n");
    for w in BG_REGS.windows(2) {
        writeln!(s, "    add  x{}, x{}, x{}", w[1], w[1], w[0]).unwrap();
    }
    let (first, last) = (BG_REGS[0], BG_REGS[BG_REGS.len() - 1]);
    writeln!(
        s,
        "    xori x{first}, x{first}, 0x5a5\n    addi x{first}, x{first}, 7"
    )
    .unwrap();
    writeln!(s, "    sw   x{last}, 0(s0)\n    j    bg_loop").unwrap();
}

/// Main-core program for `script`, followed by the background loop.
pub fn script_source(layout: &Layout, script: &SectionScript, states: &[Sec]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "main:\n    csrr a0, mhartid\n    li   t0, {}\n    bne  a0, t0, bg",
        script.main
    )
    .unwrap();
    for (k, step) in script.steps.iter().enumerate() {
        match *step {
            Step::RunIndependent { iters } | Step::RunKernel { iters } => {
                emit_kernel(&mut s, layout, k, iters)
            }
            Step::EnterMc { mode } => {
                emit_mark(&mut s, k, TAG_BEGIN);
                writeln!(
                    s,
                    "    li   t0, {}\n    sw   t0, MODE_SELF(zero)",
                    mode.code()
                )
                .unwrap();
                emit_mark(&mut s, k, TAG_END);
            }
            Step::ExitMc => {
                emit_mark(&mut s, k, TAG_BEGIN);
                s.push_str("    sw   zero, MODE_SELF(zero)\n");
                emit_mark(&mut s, k, TAG_END);
            }
            Step::EnterPerf => {
                emit_mark(&mut s, k, TAG_BEGIN);
                // s11 keeps the group's id so members can tell who leads
                writeln!(
                    s,
                    "    csrr s11, mhartid
    li   t0, {split}
    sw   t0, MODE_SELF(zero)
    csrr t0, mhartid
    beq  t0, s11, p{k}_keep
    li   t1, STACK_SIZE
    mul  t1, t0, t1
    li   sp, PERF_STACK_TOP
    sub  sp, sp, t1
p{k}_keep:",
                    split = regs::MODE_SPLIT
                )
                .unwrap();
                emit_mark(&mut s, k, TAG_END);
            }
            Step::ExitPerf => {
                let Sec::Split(mode) = states[k] else {
                    unreachable!("validated: performance exit from a split group")
                };
                s.push_str("    csrr t0, mhartid\n    bne  t0, s11, perf_join\n");
                emit_mark(&mut s, k, TAG_BEGIN);
                writeln!(
                    s,
                    "    li   t0, {}\n    sw   t0, MODE_SELF(zero)",
                    mode.code()
                )
                .unwrap();
                emit_mark(&mut s, k, TAG_REQUEST);
                match script.variant {
                    Variant::Sw => {
                        writeln!(s, "    la   t0, x{k}_resume\n    csrw mepc, t0").unwrap();
                        s.push_str(&save_frame());
                        s.push_str("    sw   sp, SP_SELF(zero)\n    j    perf_join\n");
                    }
                    Variant::Rapid => s.push_str("    lw   x0, GROUP_SYNC(zero)\n"),
                }
                writeln!(s, "x{k}_resume:").unwrap();
                emit_mark(&mut s, k, TAG_END);
            }
        }
    }
    s.push_str("    sw   zero, EOC(zero)\nscript_idle:\n    j    script_idle\n");
    emit_background(&mut s, layout);
    s
}

// ---------------------------------------------------------------------------
// Functional execution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct FunctionalReport {
    pub variant: Variant,
    pub traces: Vec<SectionTrace>,
    pub checks: Vec<Check>,
    pub cycles: u64,
    pub memory_digest: String,
}

impl FunctionalReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Compares a state captured right after a trap with the state after the
/// matching return. Returns a description of the first difference.
/// `skip` lists scratch registers the protocol may clobber.
fn context_diff(
    trapped: &ArchState,
    resumed: &ArchState,
    skip: &[u8],
    with_mepc: bool,
) -> Option<String> {
    for r in 1..32u8 {
        if !skip.contains(&r) && trapped.reg(r) != resumed.reg(r) {
            return Some(format!(
                "x{r}: {:#x} != {:#x}",
                trapped.reg(r),
                resumed.reg(r)
            ));
        }
    }
    let (a, b) = (&trapped.csrs, &resumed.csrs);
    if (a.mcause, a.mtvec) != (b.mcause, b.mtvec) || (with_mepc && a.mepc != b.mepc) {
        return Some(format!("csrs {a:?} != {b:?}"));
    }
    None
}

struct Observer {
    main: usize,
    main_stack: std::ops::Range<u32>,
    members: Vec<usize>,
    after_trap: Vec<Option<ArchState>>,
    /// Mission-critical entry awaiting the group's return from the handler.
    entry_step: Option<usize>,
    /// Mission-critical exit whose helpers are being cleared.
    exit_step: Option<usize>,
    /// Helpers that must come back to their own context, by step.
    resume: Vec<Option<usize>>,
    /// (step, main state at the start of a performance exit).
    perf_exit: Option<(usize, ArchState)>,
    checks: Vec<Check>,
}

impl Observer {
    fn new(main: usize, n: usize, layout: &Layout) -> Self {
        let top = layout.stack_top(main);
        Observer {
            main,
            main_stack: top - STACK_SIZE..top + 1,
            members: vec![main],
            after_trap: vec![None; n],
            entry_step: None,
            exit_step: None,
            resume: vec![None; n],
            perf_exit: None,
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: String, failure: Option<String>) {
        self.checks.push(Check {
            name,
            pass: failure.is_none(),
            detail: failure.unwrap_or_default(),
        });
    }

    fn group_diverges(&self, cl: &Cluster) -> Option<String> {
        let now = cl.core(self.main).state();
        self.members
            .iter()
            .find(|&&m| cl.core(m).state() != now)
            .map(|m| format!("core {m} differs from core {}", self.main))
    }

    fn resumed_at_trap(trapped: &ArchState, now: &ArchState) -> Option<String> {
        context_diff(trapped, now, &[], true).or_else(|| {
            (now.pc != trapped.csrs.mepc).then(|| {
                format!(
                    "resumed at {:#x}, trapped at {:#x}",
                    now.pc, trapped.csrs.mepc
                )
            })
        })
    }

    fn on_mark(
        &mut self,
        cl: &Cluster,
        c: usize,
        script: &SectionScript,
        layout: &Layout,
        value: u32,
    ) {
        let (step, tag) = ((value >> 8) as usize, value & 0xff);
        let Some(&op) = script.steps.get(step) else {
            return;
        };
        match (op, tag) {
            (Step::EnterMc { mode }, TAG_BEGIN) => {
                self.members =
                    hmr::members(self.main, mode, cl.config().n_cores).expect("validated");
                self.entry_step = Some(step);
            }
            (Step::ExitMc, TAG_BEGIN) => self.exit_step = Some(step),
            (Step::EnterPerf, TAG_END) => {
                let sp = cl.core(c).state().reg(2);
                let range = if c == self.main {
                    self.main_stack.clone()
                } else {
                    let top = layout.perf_stack_top(c);
                    top - STACK_SIZE..top + 1
                };
                let ok = range.contains(&sp) && (c == self.main || !self.main_stack.contains(&sp));
                self.check(
                    format!("step{step}_core{c}_stack"),
                    (!ok).then(|| format!("sp {sp:#x} outside {range:#x?}")),
                );
            }
            (Step::ExitPerf, TAG_BEGIN) => {
                self.perf_exit = Some((step, cl.core(c).state().clone()))
            }
            (Step::ExitPerf, TAG_END) if c == self.main => {
                if let Some((k, before)) = self.perf_exit.take() {
                    // the exit sequence points mepc at its own resume label
                    let d = context_diff(&before, cl.core(c).state(), &[5], false)
                        .or_else(|| self.group_diverges(cl));
                    self.check(format!("step{k}_perf_exit_restores_main"), d);
                }
            }
            _ => {}
        }
    }

    fn observe(&mut self, cl: &Cluster, ev: Event, script: &SectionScript, layout: &Layout) {
        let c = ev.core;
        match ev.kind {
            EventKind::IrqTaken { irq: id } if id == irq::GROUP_MAIN || id == irq::GROUP_HELPER => {
                self.after_trap[c] = Some(cl.core(c).state().clone());
            }
            EventKind::Mark { value } => self.on_mark(cl, c, script, layout, value),
            EventKind::Locked { main, .. } if main == self.main => {
                let bad = self
                    .members
                    .iter()
                    .find(|&&m| cl.hmr().virtual_id(m) != main)
                    .map(|&m| format!("core {m} presents id {}", cl.hmr().virtual_id(m)));
                self.check(format!("cycle{}_ids_preserved", ev.cycle), bad);
            }
            EventKind::Cleared if c != self.main && self.members.contains(&c) => {
                if let Some(k) = self.exit_step {
                    self.resume[c] = Some(k);
                }
            }
            EventKind::Mret if c == self.main => {
                if let Some(k) = self.entry_step.take() {
                    let d = match &self.after_trap[c] {
                        None => Some("no trap snapshot".to_string()),
                        Some(t) => Self::resumed_at_trap(t, cl.core(c).state()),
                    }
                    .or_else(|| self.group_diverges(cl));
                    self.check(format!("step{k}_group_holds_main_state"), d);
                }
            }
            EventKind::Mret => {
                if let Some(k) = self.resume[c].take() {
                    let d = match &self.after_trap[c] {
                        None => Some("no trap snapshot".to_string()),
                        Some(t) => Self::resumed_at_trap(t, cl.core(c).state()),
                    };
                    self.check(format!("step{k}_core{c}_resumes_own_context"), d);
                }
            }
            _ => {}
        }
    }

    fn awaiting(&self) -> bool {
        self.resume.iter().any(Option::is_some)
            || self.entry_step.is_some()
            || self.perf_exit.is_some()
    }
}

/// Executes `script` on the cluster model, checking the protocol
/// postconditions and measuring each section switch.
pub fn run_functional(
    cfg: &ClusterConfig,
    script: &SectionScript,
    max_cycles: u64,
) -> Result<FunctionalReport, SplitError> {
    let states = script.validate(cfg.n_cores)?;
    let mut cfg = *cfg;
    cfg.options.rapid_recovery_enabled = script.variant == Variant::Rapid;
    let layout = Layout::new(cfg.map);
    let program = program_for(&cfg, &script_source(&layout, script, &states))?;
    let mut cl = Cluster::new(cfg, Arc::new(program), &[], &[])?;
    let mut obs = Observer::new(script.main, cfg.n_cores, &layout);
    let mut seen = 0;
    let mut exits_pending = script.steps.iter().filter(|s| **s == Step::ExitMc).count();
    loop {
        let done =
            cl.is_done(script.main) && exits_pending == 0 && !obs.awaiting() && !cl.recovering();
        if done || cl.fatal() {
            break;
        }
        if cl.cycle() >= max_cycles {
            return Err(SplitError::Timeout(max_cycles));
        }
        cl.step();
        while seen < cl.events().len() {
            let ev = cl.events()[seen];
            seen += 1;
            if ev.kind == EventKind::Mret && obs.resume[ev.core].is_some() && ev.core != script.main
            {
                let k = obs.resume[ev.core].expect("checked");
                let last_helper = obs.resume.iter().filter(|r| **r == Some(k)).count() == 1;
                if last_helper {
                    exits_pending -= 1;
                }
            }
            obs.observe(&cl, ev, script, &layout);
        }
    }
    obs.check(
        "no_fatal_trap".into(),
        cl.fatal()
            .then(|| "a core reached the exception handler".into()),
    );
    for (k, step) in script.steps.iter().enumerate() {
        if let Step::RunIndependent { iters } | Step::RunKernel { iters } = *step {
            let harts = match states[k] {
                Sec::Split(mode) => {
                    hmr::members(script.main, mode, cfg.n_cores).expect("validated")
                }
                _ => vec![script.main],
            };
            for h in harts {
                let got = cl.read_words(kernel_slot(&layout, k, h), 1)[0];
                let want = kernel_value(h, k, iters);
                obs.check(
                    format!("step{k}_hart{h}_kernel"),
                    (got != want).then(|| format!("{got:#x} != {want:#x}")),
                );
            }
        }
    }
    let leaked: Vec<usize> = (0..cfg.n_cores).filter(|&v| cl.hmr().sp(v) != 0).collect();
    obs.check(
        "sp_registers_zero".into(),
        (!leaked.is_empty()).then(|| format!("nonzero SP registers: {leaked:?}")),
    );
    let traces = extract_traces(cl.events(), script, &states, cfg.n_cores)?;
    for t in &traces {
        if !t.well_formed() {
            obs.check(
                format!("trace_{:?}_{:?}_core{}", t.kind, t.direction, t.core),
                Some("phase order".into()),
            );
        }
    }
    Ok(FunctionalReport {
        variant: script.variant,
        traces,
        checks: obs.checks,
        cycles: cl.cycle(),
        memory_digest: cl.memory_digest(),
    })
}

fn find(
    events: &[Event],
    from: u64,
    step: usize,
    what: &'static str,
    f: impl Fn(&Event) -> bool,
) -> Result<u64, SplitError> {
    events
        .iter()
        .find(|e| e.cycle >= from && f(e))
        .map(|e| e.cycle)
        .ok_or(SplitError::MissingEvent { step, what })
}

/// Measures each section switch from the event log.
fn extract_traces(
    events: &[Event],
    script: &SectionScript,
    states: &[Sec],
    n: usize,
) -> Result<Vec<SectionTrace>, SplitError> {
    let main = script.main;
    let mark = |k: usize, tag: u32, core: usize| {
        move |e: &Event| {
            e.core == core
                && e.kind
                    == EventKind::Mark {
                        value: mark_value(k, tag),
                    }
        }
    };
    let mut out = Vec::new();
    for (k, step) in script.steps.iter().enumerate() {
        let mode = match (states[k], *step) {
            (_, Step::EnterMc { mode }) => mode,
            (Sec::Locked(m) | Sec::Split(m), _) => m,
            (Sec::Independent, _) => continue,
        };
        let members = hmr::members(main, mode, n).expect("validated");
        let new = |kind, dir, role, core, start| {
            SectionTrace::new(
                kind,
                dir,
                mode,
                script.variant,
                role,
                core,
                start,
                TraceSource::Measured,
            )
        };
        let fill = match script.variant {
            Variant::Sw => RELOAD,
            Variant::Rapid => HW_FILL,
        };
        match *step {
            Step::RunIndependent { .. } | Step::RunKernel { .. } => {}
            Step::EnterMc { .. } => {
                let begin = find(events, 0, k, "entry mark", mark(k, TAG_BEGIN, main))?;
                let irq = find(events, begin, k, "group interrupt", |e| {
                    e.core == main
                        && e.kind
                            == EventKind::IrqTaken {
                                irq: irq::GROUP_MAIN,
                            }
                })?;
                let lock = find(
                    events,
                    irq,
                    k,
                    "group lock",
                    |e| matches!(e.kind, EventKind::Locked { main: m, .. } if m == main),
                )?;
                let end = find(events, lock, k, "return into the section", |e| {
                    e.core == main && e.kind == EventKind::Mret
                })? + 1;
                let mut t = new(
                    SectionKind::MissionCritical,
                    Direction::Entry,
                    Role::Main,
                    main,
                    begin,
                );
                t.push(SETUP, irq - begin);
                t.push(UNLOAD, lock - irq);
                t.push(fill, end - lock);
                out.push(t);
            }
            Step::ExitMc => {
                let begin = find(events, 0, k, "exit mark", mark(k, TAG_BEGIN, main))?;
                let end = find(
                    events,
                    begin,
                    k,
                    "main continuation",
                    mark(k, TAG_END, main),
                )?;
                let mut t = new(
                    SectionKind::MissionCritical,
                    Direction::Exit,
                    Role::Main,
                    main,
                    begin,
                );
                t.push(SETUP, end - begin);
                out.push(t);
                for &h in &members[1..] {
                    let cleared = find(events, begin, k, "helper clear", |e| {
                        e.core == h && e.kind == EventKind::Cleared
                    })?;
                    let back = find(events, cleared, k, "helper resume", |e| {
                        e.core == h && e.kind == EventKind::Mret
                    })? + 1;
                    let mut t = new(
                        SectionKind::MissionCritical,
                        Direction::Exit,
                        Role::Helper,
                        h,
                        begin,
                    );
                    t.push(SETUP, cleared - begin);
                    t.push(RELOAD, back - cleared);
                    out.push(t);
                }
            }
            Step::EnterPerf => {
                let begin = find(events, 0, k, "entry mark", mark(k, TAG_BEGIN, main))?;
                for &m in &members {
                    let end = find(events, begin, k, "split continuation", mark(k, TAG_END, m))?;
                    let role = if m == main { Role::Main } else { Role::Helper };
                    let mut t = new(SectionKind::Performance, Direction::Entry, role, m, begin);
                    t.push(SETUP, end - begin);
                    out.push(t);
                }
            }
            Step::ExitPerf => {
                let begin = find(events, 0, k, "exit mark", mark(k, TAG_BEGIN, main))?;
                let req = find(
                    events,
                    begin,
                    k,
                    "rejoin request",
                    mark(k, TAG_REQUEST, main),
                )?;
                let lock = find(
                    events,
                    req,
                    k,
                    "group lock",
                    |e| matches!(e.kind, EventKind::Locked { main: m, .. } if m == main),
                )?;
                let end = match script.variant {
                    Variant::Sw => find(events, lock, k, "return", |e| {
                        e.core == main && e.kind == EventKind::Mret
                    })?,
                    Variant::Rapid => find(events, lock, k, "hardware fill", |e| {
                        e.core == main
                            && e.kind
                                == EventKind::RecoveryEnd {
                                    kind: RecoveryKind::HwFill,
                                }
                    })?,
                } + 1;
                let mut t = new(
                    SectionKind::Performance,
                    Direction::Exit,
                    Role::Main,
                    main,
                    begin,
                );
                t.push(SETUP, req - begin);
                t.push(UNLOAD, lock - req);
                t.push(fill, end - lock);
                out.push(t);
            }
        }
    }
    Ok(out)
}
