//! Redundancy unit: core grouping, DMR checkers, TMR voters and the
//! memory-mapped configuration surface.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpu::{DataReq, OutputBundle};

/// Largest cluster the register map can address.
pub const MAX_CORES: usize = 24;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HmrError {
    #[error("core {core} is not a main core for {mode:?} with {n} cores")]
    NotMain { core: usize, mode: Mode, n: usize },
    #[error("{mode:?} is unavailable with {n} cores")]
    ModeUnavailable { mode: Mode, n: usize },
    #[error("group {a} overlaps group {b}")]
    Overlap { a: usize, b: usize },
    #[error("cluster size {0} outside 1..={MAX_CORES}")]
    BadSize(usize),
    #[error("unmapped HMR offset {0:#x}")]
    Unmapped(u32),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Independent,
    Dmr,
    Tmr,
}

impl Mode {
    pub fn group_size(self) -> usize {
        match self {
            Mode::Independent => 1,
            Mode::Dmr => 2,
            Mode::Tmr => 3,
        }
    }

    pub fn available(self, n: usize) -> bool {
        n > 0 && n.is_multiple_of(self.group_size())
    }

    /// Register encoding used by the MODE registers.
    pub fn code(self) -> u32 {
        match self {
            Mode::Independent => 0,
            Mode::Dmr => 1,
            Mode::Tmr => 2,
        }
    }

    pub fn from_code(v: u32) -> Option<Mode> {
        match v {
            0 => Some(Mode::Independent),
            1 => Some(Mode::Dmr),
            2 => Some(Mode::Tmr),
            _ => None,
        }
    }
}

pub fn dmr_partner(i: usize, n: usize) -> Result<usize, HmrError> {
    if !Mode::Dmr.available(n) {
        return Err(HmrError::ModeUnavailable { mode: Mode::Dmr, n });
    }
    if i >= n / 2 {
        return Err(HmrError::NotMain {
            core: i,
            mode: Mode::Dmr,
            n,
        });
    }
    Ok(i + n / 2)
}

pub fn tmr_partners(i: usize, n: usize) -> Result<(usize, usize), HmrError> {
    if !Mode::Tmr.available(n) {
        return Err(HmrError::ModeUnavailable { mode: Mode::Tmr, n });
    }
    if i >= n / 3 {
        return Err(HmrError::NotMain {
            core: i,
            mode: Mode::Tmr,
            n,
        });
    }
    Ok((i + n / 3, i + 2 * n / 3))
}

/// Members of the group led by `main`, main first.
pub fn members(main: usize, mode: Mode, n: usize) -> Result<Vec<usize>, HmrError> {
    Ok(match mode {
        Mode::Independent => vec![main],
        Mode::Dmr => vec![main, dmr_partner(main, n)?],
        Mode::Tmr => {
            let (b, c) = tmr_partners(main, n)?;
            vec![main, b, c]
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckResult {
    pub output: OutputBundle,
    pub error: bool,
}

/// The gated bundle: no fetch, no data request.
pub const GATED: OutputBundle = OutputBundle {
    ifetch_addr: 0,
    data_req: DataReq {
        valid: false,
        addr: 0,
        wdata: 0,
        we: false,
        byte_enable: 0,
    },
};

pub fn check_pair(a: &OutputBundle, b: &OutputBundle) -> CheckResult {
    if a == b {
        CheckResult {
            output: *a,
            error: false,
        }
    } else {
        CheckResult {
            output: GATED,
            error: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Dissenter {
    None,
    Slot(u8),
    /// No single slot explains the disagreement.
    Unresolved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VoteResult {
    pub output: OutputBundle,
    pub error: bool,
    pub dissenter: Dissenter,
}

impl VoteResult {
    pub fn group_failure(&self) -> bool {
        self.dissenter == Dissenter::Unresolved
    }
}

#[inline]
fn maj(a: u32, b: u32, c: u32) -> u32 {
    (a & b) | (a & c) | (b & c)
}

/// Bit mask of slots whose word differs from the majority word.
#[inline]
fn off_slots(a: u32, b: u32, c: u32, m: u32) -> u8 {
    (a != m) as u8 | ((b != m) as u8) << 1 | ((c != m) as u8) << 2
}

fn fields(o: &OutputBundle) -> [u32; 6] {
    let d = &o.data_req;
    [
        o.ifetch_addr,
        d.valid as u32,
        d.addr,
        d.wdata,
        d.we as u32,
        d.byte_enable as u32,
    ]
}

pub fn vote_triple(a: &OutputBundle, b: &OutputBundle, c: &OutputBundle) -> VoteResult {
    let (fa, fb, fc) = (fields(a), fields(b), fields(c));
    let mut m = [0u32; 6];
    let mut off = 0u8;
    let mut unresolved = false;
    for k in 0..6 {
        m[k] = maj(fa[k], fb[k], fc[k]);
        let s = off_slots(fa[k], fb[k], fc[k], m[k]);
        if s.count_ones() > 1 {
            unresolved = true;
        }
        off |= s;
    }
    let error = !(a == b && b == c);
    let dissenter = if !error {
        Dissenter::None
    } else if unresolved || off.count_ones() != 1 {
        Dissenter::Unresolved
    } else {
        Dissenter::Slot(off.trailing_zeros() as u8)
    };
    let output = OutputBundle {
        ifetch_addr: m[0],
        data_req: DataReq {
            valid: m[1] != 0,
            addr: m[2],
            wdata: m[3],
            we: m[4] != 0,
            byte_enable: m[5] as u8,
        },
    };
    VoteResult {
        output,
        error,
        dissenter,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct HmrOptions {
    pub sync_clear_on_recovery: bool,
    pub tmr_delayed_resync: bool,
    pub rapid_recovery_enabled: bool,
}

impl Default for HmrOptions {
    fn default() -> Self {
        HmrOptions {
            sync_clear_on_recovery: true,
            tmr_delayed_resync: false,
            rapid_recovery_enabled: false,
        }
    }
}

impl HmrOptions {
    pub fn bits(&self) -> u32 {
        self.sync_clear_on_recovery as u32
            | (self.tmr_delayed_resync as u32) << 1
            | (self.rapid_recovery_enabled as u32) << 2
    }

    pub fn from_bits(v: u32) -> Self {
        HmrOptions {
            sync_clear_on_recovery: v & 1 != 0,
            tmr_delayed_resync: v & 2 != 0,
            rapid_recovery_enabled: v & 4 != 0,
        }
    }
}

/// Register offsets inside the HMR window.
pub mod regs {
    pub const MODE: u32 = 0x000;
    pub const MODE_SELF: u32 = 0x07C;
    pub const SP: u32 = 0x080;
    pub const GROUP_SYNC: u32 = 0x0F8;
    pub const SP_SELF: u32 = 0x0FC;
    pub const ERR_COUNT: u32 = 0x100;
    pub const OPTIONS: u32 = 0x180;
    pub const STATUS: u32 = 0x184;
    pub const WINDOW: u32 = 0x200;

    /// Value written to a MODE register to split a locked group for a
    /// performance section.
    pub const MODE_SPLIT: u32 = 3;
}

/// Interrupt ids used by the redundancy protocols.
pub mod irq {
    /// Delivered to the main core of a group being formed.
    pub const GROUP_MAIN: u8 = 16;
    /// Triple-lockstep software resynchronization.
    pub const RESYNC: u8 = 17;
    /// Delivered to the helper cores of a group being formed.
    pub const GROUP_HELPER: u8 = 18;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "mode")]
pub enum GroupState {
    Independent,
    /// Mode requested, waiting for every member at the group barrier.
    Pending(Mode),
    /// Requested while split; members rejoin without an interrupt.
    Rejoining(Mode),
    Locked(Mode),
    /// Locked group temporarily split for a performance section.
    Split(Mode),
}

/// Side effects of a configuration write, applied by the cluster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HmrEffect {
    RaiseIrq {
        targets: Vec<usize>,
        irq: u8,
    },
    /// Group dissolved; the listed helpers must be cleared.
    Unlocked {
        main: usize,
        clear: Vec<usize>,
    },
    Split {
        main: usize,
    },
    SpWritten {
        vid: usize,
        value: u32,
    },
}

/// Configuration, status and group state of the redundancy unit.
#[derive(Clone, Debug)]
pub struct HmrConfig {
    n: usize,
    pub options: HmrOptions,
    groups: Vec<GroupState>,
    /// Main id of the locked group each core belongs to.
    owner: Vec<Option<usize>>,
    sp_regs: Vec<u32>,
    err_count: Vec<u32>,
    failures: u32,
}

impl HmrConfig {
    pub fn new(n: usize, options: HmrOptions) -> Result<Self, HmrError> {
        if n == 0 || n > MAX_CORES {
            return Err(HmrError::BadSize(n));
        }
        Ok(HmrConfig {
            n,
            options,
            groups: vec![GroupState::Independent; n],
            owner: vec![None; n],
            sp_regs: vec![0; n],
            err_count: vec![0; n],
            failures: 0,
        })
    }

    pub fn n_cores(&self) -> usize {
        self.n
    }

    pub fn group_state(&self, main: usize) -> GroupState {
        self.groups[main]
    }

    /// Locks a set of groups immediately, as at configuration time.
    pub fn lock_static(&mut self, mains: &[(usize, Mode)]) -> Result<(), HmrError> {
        let mut claimed: Vec<Option<usize>> = self.owner.clone();
        for &(main, mode) in mains {
            if mode == Mode::Independent {
                continue;
            }
            for m in members(main, mode, self.n)? {
                if let Some(other) = claimed[m] {
                    return Err(HmrError::Overlap { a: main, b: other });
                }
                claimed[m] = Some(main);
            }
        }
        for &(main, mode) in mains {
            if mode != Mode::Independent {
                self.lock(main, mode);
            }
        }
        Ok(())
    }

    fn lock(&mut self, main: usize, mode: Mode) {
        for m in members(main, mode, self.n).expect("validated") {
            self.owner[m] = Some(main);
        }
        self.groups[main] = GroupState::Locked(mode);
    }

    /// Locked groups as (main, mode), ascending by main.
    pub fn locked_groups(&self) -> impl Iterator<Item = (usize, Mode)> + '_ {
        self.groups.iter().enumerate().filter_map(|(i, g)| match g {
            GroupState::Locked(m) => Some((i, *m)),
            _ => None,
        })
    }

    /// Main id of the locked group containing `core`.
    pub fn owner(&self, core: usize) -> Option<usize> {
        self.owner[core]
    }

    /// Hart id presented to `core`: the main id while locked.
    pub fn virtual_id(&self, core: usize) -> usize {
        self.owner[core].unwrap_or(core)
    }

    /// Virtual ids visible to software.
    pub fn virtual_cores(&self) -> Vec<usize> {
        (0..self.n)
            .filter(|&c| self.owner[c].is_none_or(|m| m == c))
            .collect()
    }

    pub fn sp(&self, vid: usize) -> u32 {
        self.sp_regs[vid]
    }

    pub fn set_sp(&mut self, vid: usize, v: u32) {
        self.sp_regs[vid] = v;
    }

    pub fn error_count(&self, main: usize) -> u32 {
        self.err_count[main]
    }

    pub fn record_error(&mut self, main: usize, failure: bool) {
        self.err_count[main] = self.err_count[main].saturating_add(1);
        if failure {
            self.failures = self.failures.saturating_add(1);
        }
    }

    pub fn failures(&self) -> u32 {
        self.failures
    }

    /// Pending group (main, mode) that `core` must join at the group barrier.
    pub fn pending_group_of(&self, core: usize) -> Option<(usize, Mode)> {
        self.groups
            .iter()
            .enumerate()
            .find_map(|(main, g)| match *g {
                GroupState::Pending(mode) | GroupState::Rejoining(mode) => {
                    members(main, mode, self.n)
                        .ok()
                        .filter(|ms| ms.contains(&core))
                        .map(|_| (main, mode))
                }
                _ => None,
            })
    }

    /// Completes a group barrier: the pending group becomes locked.
    pub fn complete_sync(&mut self, main: usize) {
        if let GroupState::Pending(mode) | GroupState::Rejoining(mode) = self.groups[main] {
            self.lock(main, mode);
        }
    }

    /// Resolves a register read. `hart` is the requester's virtual id.
    pub fn read(&self, off: u32, hart: usize) -> Result<u32, HmrError> {
        let idx = |base: u32| ((off - base) / 4) as usize;
        match off {
            regs::MODE_SELF => Ok(self.mode_code(hart)),
            regs::SP_SELF => Ok(self.sp_regs[hart]),
            regs::GROUP_SYNC => Ok(0),
            o if (regs::MODE..regs::MODE_SELF).contains(&o) && idx(regs::MODE) < self.n => {
                Ok(self.mode_code(idx(regs::MODE)))
            }
            o if (regs::SP..regs::GROUP_SYNC).contains(&o) && idx(regs::SP) < self.n => {
                Ok(self.sp_regs[idx(regs::SP)])
            }
            o if (regs::ERR_COUNT..regs::OPTIONS).contains(&o) && idx(regs::ERR_COUNT) < self.n => {
                Ok(self.err_count[idx(regs::ERR_COUNT)])
            }
            regs::OPTIONS => Ok(self.options.bits()),
            regs::STATUS => Ok(self.failures),
            _ => Err(HmrError::Unmapped(off)),
        }
    }

    fn mode_code(&self, main: usize) -> u32 {
        match self.groups[main] {
            GroupState::Locked(m) => m.code(),
            GroupState::Split(_) => regs::MODE_SPLIT,
            _ => 0,
        }
    }

    /// Applies a register write. Returns the effects the cluster must carry out.
    pub fn write(&mut self, off: u32, hart: usize, value: u32) -> Result<Vec<HmrEffect>, HmrError> {
        let idx = |base: u32| ((off - base) / 4) as usize;
        match off {
            regs::MODE_SELF => self.write_mode(hart, value),
            regs::SP_SELF => Ok(self.write_sp(hart, value)),
            o if (regs::MODE..regs::MODE_SELF).contains(&o) && idx(regs::MODE) < self.n => {
                self.write_mode(idx(regs::MODE), value)
            }
            o if (regs::SP..regs::GROUP_SYNC).contains(&o) && idx(regs::SP) < self.n => {
                Ok(self.write_sp(idx(regs::SP), value))
            }
            o if (regs::ERR_COUNT..regs::OPTIONS).contains(&o) && idx(regs::ERR_COUNT) < self.n => {
                self.err_count[idx(regs::ERR_COUNT)] = value;
                Ok(vec![])
            }
            regs::OPTIONS => {
                self.options = HmrOptions::from_bits(value);
                Ok(vec![])
            }
            regs::STATUS | regs::GROUP_SYNC => Ok(vec![]),
            _ => Err(HmrError::Unmapped(off)),
        }
    }

    fn write_sp(&mut self, vid: usize, value: u32) -> Vec<HmrEffect> {
        self.sp_regs[vid] = value;
        vec![HmrEffect::SpWritten { vid, value }]
    }

    fn write_mode(&mut self, main: usize, value: u32) -> Result<Vec<HmrEffect>, HmrError> {
        let state = self.groups[main];
        if value == regs::MODE_SPLIT {
            return Ok(match state {
                GroupState::Locked(mode) => {
                    self.release(main, mode);
                    self.groups[main] = GroupState::Split(mode);
                    vec![HmrEffect::Split { main }]
                }
                _ => {
                    log::warn!("split request for group {main} in state {state:?} ignored");
                    vec![]
                }
            });
        }
        let Some(mode) = Mode::from_code(value) else {
            log::warn!("invalid mode value {value} for group {main}");
            return Ok(vec![]);
        };
        match (state, mode) {
            (GroupState::Locked(cur), Mode::Independent) => {
                self.release(main, cur);
                self.groups[main] = GroupState::Independent;
                let clear = members(main, cur, self.n)?.into_iter().skip(1).collect();
                Ok(vec![HmrEffect::Unlocked { main, clear }])
            }
            (GroupState::Split(_), Mode::Independent) => {
                self.groups[main] = GroupState::Independent;
                Ok(vec![])
            }
            (GroupState::Independent, Mode::Dmr | Mode::Tmr) => {
                let ms = members(main, mode, self.n)?;
                if let Some(&busy) = ms.iter().find(|&&m| self.owner[m].is_some()) {
                    return Err(HmrError::Overlap { a: main, b: busy });
                }
                self.groups[main] = GroupState::Pending(mode);
                Ok(vec![
                    HmrEffect::RaiseIrq {
                        targets: vec![main],
                        irq: irq::GROUP_MAIN,
                    },
                    HmrEffect::RaiseIrq {
                        targets: ms[1..].to_vec(),
                        irq: irq::GROUP_HELPER,
                    },
                ])
            }
            (GroupState::Split(_), Mode::Dmr | Mode::Tmr) => {
                members(main, mode, self.n)?;
                self.groups[main] = GroupState::Rejoining(mode);
                Ok(vec![])
            }
            _ => {
                log::warn!("mode {mode:?} request for group {main} in state {state:?} ignored");
                Ok(vec![])
            }
        }
    }

    fn release(&mut self, main: usize, mode: Mode) {
        for m in members(main, mode, self.n).expect("locked group is valid") {
            self.owner[m] = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(fetch: u32, wdata: u32) -> OutputBundle {
        OutputBundle {
            ifetch_addr: fetch,
            data_req: DataReq::store(0x1000, wdata),
        }
    }

    #[test]
    fn partners() {
        assert_eq!(dmr_partner(0, 6), Ok(3));
        assert_eq!(dmr_partner(0, 12), Ok(6));
        assert_eq!(dmr_partner(5, 12), Ok(11));
        assert!(dmr_partner(6, 12).is_err());
        assert_eq!(tmr_partners(0, 6), Ok((2, 4)));
        assert_eq!(tmr_partners(0, 12), Ok((4, 8)));
        assert_eq!(tmr_partners(3, 12), Ok((7, 11)));
        assert!(tmr_partners(4, 12).is_err());
        assert!(dmr_partner(0, 9).is_err());
        assert!(tmr_partners(0, 8).is_err());
    }

    #[test]
    fn checker() {
        let x = bundle(4, 5);
        assert_eq!(
            check_pair(&x, &x),
            CheckResult {
                output: x,
                error: false
            }
        );
        let y = bundle(4, 5 ^ 0x80);
        let r = check_pair(&x, &y);
        assert!(r.error);
        assert_eq!(r.output, GATED);
    }

    #[test]
    fn voter_single_dissenter() {
        let x = bundle(4, 5);
        let y = bundle(8, 5);
        let r = vote_triple(&x, &x, &x);
        assert_eq!(
            (r.output, r.error, r.dissenter),
            (x, false, Dissenter::None)
        );
        let r = vote_triple(&x, &x, &y);
        assert_eq!(
            (r.output, r.error, r.dissenter),
            (x, true, Dissenter::Slot(2))
        );
        let r = vote_triple(&y, &x, &x);
        assert_eq!(r.dissenter, Dissenter::Slot(0));
    }

    #[test]
    fn voter_bitwise() {
        let r = vote_triple(&bundle(0b1100, 0), &bundle(0b1010, 0), &bundle(0b1000, 0));
        assert_eq!(r.output.ifetch_addr, 0b1000);
        assert!(r.error);
        assert_eq!(r.dissenter, Dissenter::Unresolved);
        assert!(r.group_failure());
    }

    #[test]
    fn voter_two_slots_in_different_fields() {
        let a = bundle(4, 5);
        let b = bundle(8, 5);
        let c = bundle(4, 6);
        assert_eq!(vote_triple(&a, &b, &c).dissenter, Dissenter::Unresolved);
    }

    #[test]
    fn mode_write_raises_group_irqs() {
        let mut h = HmrConfig::new(12, HmrOptions::default()).unwrap();
        let fx = h.write(regs::MODE, 0, Mode::Tmr.code()).unwrap();
        let mut targets: Vec<usize> = fx
            .iter()
            .flat_map(|e| match e {
                HmrEffect::RaiseIrq { targets, .. } => targets.clone(),
                _ => vec![],
            })
            .collect();
        targets.sort();
        assert_eq!(targets, vec![0, 4, 8]);
        assert_eq!(h.pending_group_of(8), Some((0, Mode::Tmr)));
        h.complete_sync(0);
        assert_eq!(h.virtual_id(8), 0);
        assert_eq!(h.read(regs::MODE_SELF, 0), Ok(2));
    }

    #[test]
    fn error_counter_and_sp() {
        let mut h = HmrConfig::new(12, HmrOptions::default()).unwrap();
        for _ in 0..3 {
            h.record_error(2, false);
        }
        assert_eq!(h.read(regs::ERR_COUNT + 8, 0), Ok(3));
        h.write(regs::SP_SELF, 3, 0x10F0).unwrap();
        assert_eq!(h.read(regs::SP + 12, 0), Ok(0x10F0));
        assert_eq!(h.read(0x1F0, 0), Err(HmrError::Unmapped(0x1F0)));
    }

    #[test]
    fn locked_ids_are_lowest() {
        let mut h = HmrConfig::new(12, HmrOptions::default()).unwrap();
        h.lock_static(&[
            (0, Mode::Dmr),
            (1, Mode::Dmr),
            (2, Mode::Dmr),
            (3, Mode::Dmr),
            (4, Mode::Dmr),
            (5, Mode::Dmr),
        ])
        .unwrap();
        assert_eq!(h.virtual_cores(), vec![0, 1, 2, 3, 4, 5]);
        let mut h = HmrConfig::new(12, HmrOptions::default()).unwrap();
        h.lock_static(&[
            (0, Mode::Tmr),
            (1, Mode::Tmr),
            (2, Mode::Tmr),
            (3, Mode::Tmr),
        ])
        .unwrap();
        assert_eq!(h.virtual_cores(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn overlapping_groups_rejected() {
        let mut h = HmrConfig::new(12, HmrOptions::default()).unwrap();
        assert!(matches!(
            h.lock_static(&[(0, Mode::Tmr), (2, Mode::Dmr)]),
            Err(HmrError::Overlap { .. })
        ));
    }

    #[test]
    fn exit_clears_helpers() {
        let mut h = HmrConfig::new(6, HmrOptions::default()).unwrap();
        h.lock_static(&[(0, Mode::Tmr)]).unwrap();
        let fx = h.write(regs::MODE_SELF, 0, 0).unwrap();
        assert_eq!(
            fx,
            vec![HmrEffect::Unlocked {
                main: 0,
                clear: vec![2, 4]
            }]
        );
        assert_eq!(h.virtual_id(4), 4);
    }
}
