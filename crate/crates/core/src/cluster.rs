//! The cluster: cores, redundancy unit, interconnect and recovery engines
//! advanced together one cycle at a time.

use std::sync::Arc;

use arrayvec::ArrayVec;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asm::Program;
use crate::cpu::{
    ArchState, BackupPorts, Core, CoreConfig, CoreEvent, InstrMemory, MemResponse, OutputBundle,
    Plan,
};
use crate::faults::{FaultError, FaultEvent, FaultKind, FaultLocation, IfaceField};
use crate::hmr::{
    self, check_pair, vote_triple, Dissenter, GroupState, HmrConfig, HmrEffect, HmrError,
    HmrOptions, Mode,
};
use crate::interconnect::{
    periph, EventUnit, InterconnectError, MemoryMap, PortId, Region, Tcdm, TcdmResponse,
};
use crate::recovery::{
    RapidBudgets, RapidFsm, RapidStep, RecoveryKind, RecoveryRegion, RecoveryTrace, TclsAction,
    TclsFsm, TraceSource,
};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Hmr(#[from] HmrError),
    #[error(transparent)]
    Interconnect(#[from] InterconnectError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error("invalid cluster configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub n_cores: usize,
    /// Banks per core.
    pub banking_factor: usize,
    pub map: MemoryMap,
    pub core: CoreConfig,
    pub options: HmrOptions,
    pub rapid: RapidBudgets,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n_cores: 12,
            banking_factor: 2,
            map: MemoryMap::default(),
            core: CoreConfig::default(),
            options: HmrOptions::default(),
            rapid: RapidBudgets::default(),
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: &str| Err(ClusterError::Config(m.to_string()));
        if self.n_cores == 0 || self.n_cores > hmr::MAX_CORES {
            return bad("n_cores must be in 1..=24");
        }
        if self.banking_factor == 0 {
            return bad("banking_factor must be positive");
        }
        if self.map.tcdm_size == 0 || !self.map.tcdm_size.is_multiple_of(4) {
            return bad("tcdm_size must be a positive multiple of 4");
        }
        if self.map.periph_size < 0x600 {
            return bad("peripheral window too small");
        }
        if (self.map.periph_base as i32) < -2048 || self.map.periph_base < 0x8000_0000 {
            return bad("peripheral window must be reachable as a negative offset from x0");
        }
        let t = (
            self.map.tcdm_base as u64,
            self.map.tcdm_base as u64 + self.map.tcdm_size as u64,
        );
        let p = (
            self.map.periph_base as u64,
            self.map.periph_base as u64 + self.map.periph_size as u64,
        );
        if t.0 < p.1 && p.0 < t.1 {
            return bad("TCDM overlaps the peripheral window");
        }
        self.rapid
            .validate()
            .map_err(|e| ClusterError::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum EventKind {
    Mark { value: u32 },
    IrqTaken { irq: u8 },
    Mret,
    Exception { cause: u32 },
    Error { group: usize, dissenter: Dissenter },
    Locked { main: usize, mode: Mode },
    Unlocked { main: usize },
    Split { main: usize },
    Cleared,
    RecoveryStart { kind: RecoveryKind },
    RecoveryEnd { kind: RecoveryKind },
    Eoc,
    Fatal,
    Restart,
    FaultInjected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Event {
    pub cycle: u64,
    pub core: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Timeout,
}

#[derive(Clone, Debug)]
struct Unit {
    main: usize,
    mode: Mode,
    members: ArrayVec<usize, 3>,
}

#[derive(Clone, Copy, Debug, Default)]
struct UnitSlot {
    active: bool,
    instr: Option<u32>,
    out: OutputBundle,
    error: bool,
    dissenter: Option<Dissenter>,
    resp: MemResponse,
    drop_writes: bool,
}

#[derive(Clone, Copy, Debug)]
struct PeriphWrite {
    unit: usize,
    off: u32,
    value: u32,
}

#[derive(Clone, Debug)]
pub struct Cluster {
    cfg: ClusterConfig,
    cycle: u64,
    cores: Vec<Core>,
    imem: Arc<Program>,
    tcdm: Tcdm,
    eu: EventUnit,
    hmr: HmrConfig,
    initial_hmr: HmrConfig,
    regions: Vec<RecoveryRegion>,
    rapid: Vec<RapidFsm>,
    rapid_members: Vec<ArrayVec<usize, 3>>,
    tcls: Vec<TclsFsm>,
    first_dissenter: Vec<Option<u8>>,
    done: Vec<bool>,
    restart_pending: bool,
    fatal: bool,
    errors: u64,
    events: Vec<Event>,
    traces: Vec<RecoveryTrace>,
    faults: Vec<FaultEvent>,
    next_fault: usize,
    // per-cycle scratch
    units: Vec<Unit>,
    units_dirty: bool,
    slots: Vec<UnitSlot>,
    plans: Vec<Plan>,
    ports: Vec<BackupPorts>,
    set_masks: Vec<[u32; 6]>,
    tcdm_reqs: Vec<(PortId, crate::cpu::DataReq)>,
    tcdm_owner: Vec<usize>,
    tcdm_resp: Vec<(PortId, TcdmResponse)>,
    sync_arrivals: Vec<usize>,
    barrier_arrivals: [u64; periph::NUM_BARRIERS],
    writes: Vec<PeriphWrite>,
    busy: Vec<bool>,
    pending_locks: Vec<usize>,
    pending_clears: Vec<usize>,
}

impl Cluster {
    /// Builds a cluster with `program` in instruction memory, `image` blocks
    /// preloaded into the TCDM and the given groups locked from reset.
    pub fn new(
        cfg: ClusterConfig,
        program: Arc<Program>,
        image: &[(u32, Vec<u32>)],
        groups: &[(usize, Mode)],
    ) -> Result<Self, ClusterError> {
        cfg.validate()?;
        let n = cfg.n_cores;
        let mut hmr = HmrConfig::new(n, cfg.options)?;
        hmr.lock_static(groups)?;
        let mut tcdm = Tcdm::new(
            cfg.map.tcdm_base,
            cfg.map.tcdm_size,
            n * cfg.banking_factor,
            n,
        );
        for (addr, words) in image {
            tcdm.write_block(*addr, words);
        }
        let core = Core::new(cfg.core);
        let cleared = RecoveryRegion::from_state(core.state());
        let mut c = Cluster {
            cfg,
            cycle: 0,
            cores: vec![core; n],
            imem: program,
            tcdm,
            eu: EventUnit::new(n, periph::NUM_BARRIERS),
            initial_hmr: hmr.clone(),
            hmr,
            regions: vec![cleared; n],
            rapid: vec![RapidFsm::new(cfg.rapid); n],
            rapid_members: vec![ArrayVec::new(); n],
            tcls: (0..n).map(TclsFsm::new).collect(),
            first_dissenter: vec![None; n],
            done: vec![false; n],
            restart_pending: false,
            fatal: false,
            errors: 0,
            events: Vec::new(),
            traces: Vec::new(),
            faults: Vec::new(),
            next_fault: 0,
            units: Vec::new(),
            units_dirty: true,
            slots: Vec::new(),
            plans: vec![Plan::Execute; n],
            ports: vec![BackupPorts::default(); n],
            set_masks: vec![[0; 6]; n],
            tcdm_reqs: Vec::new(),
            tcdm_owner: Vec::new(),
            tcdm_resp: Vec::new(),
            sync_arrivals: Vec::new(),
            barrier_arrivals: [0; periph::NUM_BARRIERS],
            writes: Vec::new(),
            busy: vec![false; n],
            pending_locks: Vec::new(),
            pending_clears: Vec::new(),
        };
        let mask = c.virtual_port_mask();
        c.eu.set_participants(0, mask)?;
        Ok(c)
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn core(&self, i: usize) -> &Core {
        &self.cores[i]
    }

    pub fn core_mut(&mut self, i: usize) -> &mut Core {
        &mut self.cores[i]
    }

    pub fn hmr(&self) -> &HmrConfig {
        &self.hmr
    }

    pub fn tcdm(&self) -> &Tcdm {
        &self.tcdm
    }

    pub fn tcdm_mut(&mut self) -> &mut Tcdm {
        &mut self.tcdm
    }

    pub fn event_unit_mut(&mut self) -> &mut EventUnit {
        &mut self.eu
    }

    pub fn region(&self, core: usize) -> &RecoveryRegion {
        &self.regions[core]
    }

    pub fn region_mut(&mut self, core: usize) -> &mut RecoveryRegion {
        &mut self.regions[core]
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Requests presented to the TCDM arbiter in the last cycle, keyed by
    /// the issuing group's main port.
    pub fn tcdm_requests(&self) -> &[(PortId, crate::cpu::DataReq)] {
        &self.tcdm_reqs
    }

    pub fn traces(&self) -> &[RecoveryTrace] {
        &self.traces
    }

    /// Cycles in which a checker or voter flagged a mismatch.
    pub fn errors(&self) -> u64 {
        self.errors
    }

    pub fn fatal(&self) -> bool {
        self.fatal
    }

    pub fn is_done(&self, vid: usize) -> bool {
        self.done[vid]
    }

    /// Bit mask of the ports that software currently sees as cores.
    pub fn virtual_port_mask(&self) -> u64 {
        self.hmr.virtual_cores().iter().fold(0, |m, &c| m | 1 << c)
    }

    /// Schedules a fault for a future (or the current) cycle.
    pub fn inject(&mut self, ev: FaultEvent) -> Result<(), ClusterError> {
        ev.validate(self.cfg.n_cores)?;
        if ev.cycle < self.cycle {
            return Err(FaultError::InThePast {
                at: ev.cycle,
                now: self.cycle,
            }
            .into());
        }
        let pos = self.faults[self.next_fault..]
            .iter()
            .position(|f| f.cycle > ev.cycle)
            .map_or(self.faults.len(), |p| p + self.next_fault);
        self.faults.insert(pos, ev);
        Ok(())
    }

    fn log(&mut self, core: usize, kind: EventKind) {
        self.events.push(Event {
            cycle: self.cycle,
            core,
            kind,
        });
    }

    fn rebuild_units(&mut self) {
        self.units.clear();
        for c in 0..self.cfg.n_cores {
            match self.hmr.owner(c) {
                Some(main) if main != c => {}
                Some(main) => {
                    let GroupState::Locked(mode) = self.hmr.group_state(main) else {
                        unreachable!("owner set only for locked groups")
                    };
                    let members =
                        hmr::members(main, mode, self.cfg.n_cores).expect("locked group valid");
                    self.units.push(Unit {
                        main,
                        mode,
                        members: members.into_iter().collect(),
                    });
                }
                None => self.units.push(Unit {
                    main: c,
                    mode: Mode::Independent,
                    members: std::iter::once(c).collect(),
                }),
            }
        }
        self.slots.resize(self.units.len(), UnitSlot::default());
        self.units_dirty = false;
    }

    fn apply_faults(&mut self) -> bool {
        let mut any_set = false;
        while let Some(f) = self.faults.get(self.next_fault).copied() {
            if f.cycle != self.cycle {
                break;
            }
            self.next_fault += 1;
            self.log(f.target_core, EventKind::FaultInjected);
            let st = self.cores[f.target_core].state_mut();
            match f.location {
                FaultLocation::RfBit { reg, bit } => {
                    let v = st.reg(reg) ^ (1 << bit);
                    st.set_reg(reg, v);
                }
                FaultLocation::PcBit { bit } => st.pc ^= 1 << bit,
                FaultLocation::CsrBit { csr, bit } => {
                    let v = st.csrs.get(csr) ^ (1 << bit);
                    st.csrs.set(csr, v);
                }
                FaultLocation::InterfaceBit { field, bit } => {
                    debug_assert_eq!(f.kind, FaultKind::Set);
                    self.set_masks[f.target_core][field.index()] ^= 1 << bit;
                    any_set = true;
                }
            }
        }
        any_set
    }

    fn bundle_with_set(&self, core: usize, mut b: OutputBundle) -> OutputBundle {
        let masks = self.set_masks[core];
        for field in IfaceField::ALL {
            let m = masks[field.index()];
            if m != 0 {
                for bit in 0..field.width() {
                    if m >> bit & 1 == 1 {
                        field.flip(&mut b, bit as u8);
                    }
                }
            }
        }
        b
    }

    /// Advances the whole cluster by one cycle.
    pub fn step(&mut self) {
        let any_set = self.apply_faults();
        if self.units_dirty {
            self.rebuild_units();
        }
        self.tick_recovery();
        self.front_end(any_set);
        self.memory_stage();
        self.commit_stage();
        self.end_of_cycle();
        if any_set {
            self.set_masks.iter_mut().for_each(|m| *m = [0; 6]);
        }
        self.cycle += 1;
    }

    fn tick_recovery(&mut self) {
        self.busy.iter_mut().for_each(|b| *b = false);
        for g in 0..self.cfg.n_cores {
            if !self.rapid[g].is_active() {
                continue;
            }
            let members = self.rapid_members[g].clone();
            for &m in &members {
                self.busy[m] = true;
            }
            match self.rapid[g].tick(&mut self.cores, &members) {
                RapidStep::Busy => {}
                RapidStep::Done(t) => {
                    self.log(g, EventKind::RecoveryEnd { kind: t.kind });
                    self.traces.push(t);
                }
                RapidStep::Aborted(_) => unreachable!("region validated at start"),
            }
        }
    }

    fn front_end(&mut self, any_set: bool) {
        let rapid = self.hmr.options.rapid_recovery_enabled;
        for u in 0..self.units.len() {
            let unit = self.units[u].clone();
            let mut slot = UnitSlot::default();
            if unit
                .members
                .iter()
                .any(|&m| self.busy[m] || self.cores[m].is_halted())
            {
                self.slots[u] = slot;
                continue;
            }
            slot.active = true;
            let irq = self.eu.pending(unit.main);
            let mut bundles: ArrayVec<OutputBundle, 3> = ArrayVec::new();
            for &m in &unit.members {
                self.plans[m] = self.cores[m].plan(irq);
            }
            // fetch side: the group fetches once, from the voted or main address
            let fetches: ArrayVec<u32, 3> = unit
                .members
                .iter()
                .map(|&m| {
                    let a = self.cores[m].fetch_addr();
                    if any_set {
                        a ^ self.set_masks[m][IfaceField::IfetchAddr.index()]
                    } else {
                        a
                    }
                })
                .collect();
            let fetch = if unit.mode == Mode::Tmr {
                (fetches[0] & fetches[1]) | (fetches[0] & fetches[2]) | (fetches[1] & fetches[2])
            } else {
                fetches[0]
            };
            let instr = self.imem.fetch(fetch);
            slot.instr = instr;
            for &m in &unit.members {
                let b = OutputBundle {
                    ifetch_addr: self.cores[m].fetch_addr(),
                    data_req: self.cores[m].data_request(self.plans[m], instr),
                };
                bundles.push(if any_set {
                    self.bundle_with_set(m, b)
                } else {
                    b
                });
            }
            match unit.mode {
                Mode::Independent => slot.out = bundles[0],
                Mode::Dmr => {
                    let r = check_pair(&bundles[0], &bundles[1]);
                    slot.out = r.output;
                    slot.error = r.error;
                }
                Mode::Tmr => {
                    let r = vote_triple(&bundles[0], &bundles[1], &bundles[2]);
                    slot.out = r.output;
                    slot.error = r.error;
                    slot.dissenter = Some(r.dissenter);
                    if r.error && rapid {
                        // the instruction is replayed after restore
                        slot.out = hmr::GATED;
                    }
                }
            }
            self.slots[u] = slot;
        }
    }

    fn memory_stage(&mut self) {
        self.tcdm_reqs.clear();
        self.tcdm_owner.clear();
        self.sync_arrivals.clear();
        self.barrier_arrivals = [0; periph::NUM_BARRIERS];
        self.writes.clear();
        for u in 0..self.units.len() {
            let slot = self.slots[u];
            if !slot.active || !slot.out.data_req.valid {
                continue;
            }
            let req = slot.out.data_req;
            let main = self.units[u].main;
            let resp = match self.cfg.map.decode(req.addr) {
                Region::Tcdm(_) => {
                    self.tcdm_reqs.push((main, req));
                    self.tcdm_owner.push(u);
                    continue;
                }
                Region::Unmapped => MemResponse::BusError,
                Region::Periph(off) if off % 4 != 0 => MemResponse::BusError,
                Region::Periph(off) => self.periph_access(u, off, req.we, req.wdata),
            };
            self.slots[u].resp = resp;
        }
        self.resolve_group_sync();
        self.resolve_barriers();
        self.tcdm
            .tcdm_cycle_into(&self.tcdm_reqs, &mut self.tcdm_resp);
        for (i, &(_, r)) in self.tcdm_resp.iter().enumerate() {
            self.slots[self.tcdm_owner[i]].resp = match r {
                TcdmResponse::Granted { rdata } => MemResponse::Granted { rdata },
                TcdmResponse::Stall => MemResponse::Stall,
                TcdmResponse::BusError => MemResponse::BusError,
            };
        }
    }

    fn periph_access(&mut self, u: usize, off: u32, we: bool, wdata: u32) -> MemResponse {
        let main = self.units[u].main;
        let hart = self.hmr.virtual_id(main);
        let ok = MemResponse::Granted { rdata: 0 };
        if off < periph::HMR_END {
            if off == hmr::regs::GROUP_SYNC && !we {
                self.sync_arrivals.push(u);
                return MemResponse::Stall;
            }
            return match self.hmr.read(off, hart) {
                Err(_) => MemResponse::BusError,
                Ok(v) if !we => MemResponse::Granted { rdata: v },
                Ok(_) => {
                    self.writes.push(PeriphWrite {
                        unit: u,
                        off,
                        value: wdata,
                    });
                    ok
                }
            };
        }
        let nb = periph::NUM_BARRIERS as u32;
        match off {
            o if (periph::BARRIER_WAIT..periph::BARRIER_WAIT + 4 * nb).contains(&o) => {
                let b = ((o - periph::BARRIER_WAIT) / 4) as usize;
                if we {
                    return MemResponse::BusError;
                }
                self.barrier_arrivals[b] |= 1 << main;
                MemResponse::Stall
            }
            o if (periph::BARRIER_MASK..periph::BARRIER_MASK + 4 * nb).contains(&o) => {
                let b = ((o - periph::BARRIER_MASK) / 4) as usize;
                if we {
                    self.writes.push(PeriphWrite {
                        unit: u,
                        off,
                        value: wdata,
                    });
                    ok
                } else {
                    let v = self.eu.barrier(b).map_or(0, |x| x.participants as u32);
                    MemResponse::Granted { rdata: v }
                }
            }
            periph::EOC | periph::MARK | periph::FATAL => {
                if we {
                    self.writes.push(PeriphWrite {
                        unit: u,
                        off,
                        value: wdata,
                    });
                }
                ok
            }
            _ => MemResponse::BusError,
        }
    }

    /// Group barrier: completes once every member of the pending group waits.
    fn resolve_group_sync(&mut self) {
        if self.sync_arrivals.is_empty() {
            return;
        }
        let arrived: Vec<usize> = self
            .sync_arrivals
            .iter()
            .map(|&u| self.units[u].main)
            .collect();
        let mut completed: Vec<usize> = Vec::new();
        for (i, &u) in self.sync_arrivals.iter().enumerate() {
            let core = arrived[i];
            let unit = &self.units[u];
            let grant = if unit.mode != Mode::Independent {
                true
            } else if let Some((g, mode)) = self.hmr.pending_group_of(core) {
                let ms = hmr::members(g, mode, self.cfg.n_cores).expect("pending group valid");
                let all = ms.iter().all(|m| arrived.contains(m));
                if all && !completed.contains(&g) {
                    completed.push(g);
                }
                all
            } else {
                // waiting for a split group to be recalled, or nothing to join
                self.split_group_of(core).is_none()
            };
            if grant {
                self.slots[u].resp = MemResponse::Granted { rdata: 0 };
            }
        }
        self.pending_locks = completed;
    }

    fn split_group_of(&self, core: usize) -> Option<usize> {
        (0..self.cfg.n_cores).find(|&g| match self.hmr.group_state(g) {
            GroupState::Split(mode) => hmr::members(g, mode, self.cfg.n_cores)
                .map(|ms| ms.contains(&core))
                .unwrap_or(false),
            _ => false,
        })
    }

    fn resolve_barriers(&mut self) {
        for b in 0..periph::NUM_BARRIERS {
            let arrivals = self.barrier_arrivals[b];
            if arrivals == 0 {
                continue;
            }
            let result = self.eu.barrier_read(b, arrivals);
            for u in 0..self.units.len() {
                let main = self.units[u].main;
                if !self.slots[u].active || arrivals >> main & 1 == 0 {
                    continue;
                }
                let req = self.slots[u].out.data_req;
                let off = req.addr.wrapping_sub(self.cfg.map.periph_base);
                if off != periph::BARRIER_WAIT + 4 * b as u32 {
                    continue;
                }
                self.slots[u].resp = match result {
                    Ok(true) => MemResponse::Granted { rdata: 0 },
                    Ok(false) => MemResponse::Stall,
                    Err(_) => MemResponse::BusError,
                };
            }
        }
    }

    fn commit_stage(&mut self) {
        let rapid = self.hmr.options.rapid_recovery_enabled;
        for u in 0..self.units.len() {
            let slot = self.slots[u];
            if !slot.active {
                continue;
            }
            let (main, mode) = (self.units[u].main, self.units[u].mode);
            let hart = self.hmr.virtual_id(main) as u32;
            let members = self.units[u].members.clone();
            for &m in &members {
                let c = self.cores[m].commit(self.plans[m], slot.instr, slot.resp, hart);
                match c.event {
                    Some(CoreEvent::TookIrq(id)) => {
                        self.eu.acknowledge(main, id);
                        self.log(m, EventKind::IrqTaken { irq: id });
                    }
                    Some(CoreEvent::Mret) => self.log(m, EventKind::Mret),
                    Some(CoreEvent::Exception(cause)) => {
                        self.log(m, EventKind::Exception { cause })
                    }
                    None => {}
                }
                self.ports[m] = c.ports;
            }
            let mut port_error = false;
            if rapid && mode != Mode::Independent {
                port_error = members[1..]
                    .iter()
                    .any(|&m| self.ports[m] != self.ports[main]);
            }
            let error = slot.error || port_error;
            self.regions[main].commit(&self.ports[main], error);
            if error {
                if rapid {
                    self.slots[u].drop_writes = true;
                }
                let dissenter = slot.dissenter.unwrap_or(Dissenter::None);
                self.on_group_error(main, mode, dissenter);
            }
        }
    }

    fn on_group_error(&mut self, main: usize, mode: Mode, dissenter: Dissenter) {
        self.errors += 1;
        let failure = dissenter == Dissenter::Unresolved;
        self.hmr.record_error(main, failure);
        self.log(
            main,
            EventKind::Error {
                group: main,
                dissenter,
            },
        );
        let opts = self.hmr.options;
        match mode {
            Mode::Independent => {}
            Mode::Dmr if opts.rapid_recovery_enabled => {
                if !self.start_rapid(main, RecoveryKind::Rapid) {
                    self.restart_pending = true;
                }
            }
            Mode::Dmr => self.restart_pending = true,
            Mode::Tmr if opts.rapid_recovery_enabled => {
                if !self.start_rapid(main, RecoveryKind::Rapid) {
                    self.tcls_error(main);
                }
            }
            Mode::Tmr => {
                if opts.tmr_delayed_resync && !failure && !self.tcls[main].is_active() {
                    if let Dissenter::Slot(s) = dissenter {
                        match self.first_dissenter[main] {
                            None => {
                                self.first_dissenter[main] = Some(s);
                                return;
                            }
                            Some(prev) if prev == s => return,
                            Some(_) => {}
                        }
                    }
                }
                self.tcls_error(main);
            }
        }
    }

    fn tcls_error(&mut self, main: usize) {
        let sync_clear = self.hmr.options.sync_clear_on_recovery;
        match self.tcls[main].on_error(self.cycle, sync_clear) {
            TclsAction::RaiseResync => {
                self.first_dissenter[main] = None;
                self.log(
                    main,
                    EventKind::RecoveryStart {
                        kind: RecoveryKind::TclsSoftware,
                    },
                );
                self.eu.raise_irq([main], hmr::irq::RESYNC);
            }
            TclsAction::Clear => self.pending_clears.push(main),
            TclsAction::None | TclsAction::Complete => {}
        }
    }

    /// Arms the hardware restore for the group led by `main`. Returns false if
    /// the region holds an uncorrectable word.
    fn start_rapid(&mut self, main: usize, kind: RecoveryKind) -> bool {
        let mode = match self.hmr.group_state(main) {
            GroupState::Locked(m) => m,
            _ => Mode::Independent,
        };
        let members = hmr::members(main, mode, self.cfg.n_cores).expect("valid group");
        let cycle = self.cycle + 1;
        match self.rapid[main].start(kind, main, cycle, &self.regions[main]) {
            Ok(()) => {
                self.rapid_members[main] = members.into_iter().collect();
                self.log(main, EventKind::RecoveryStart { kind });
                true
            }
            Err(slot) => {
                log::warn!("group {main}: uncorrectable backup word in {slot}, escalating");
                false
            }
        }
    }

    fn clear_core(&mut self, c: usize) {
        self.cores[c].synchronous_clear();
        self.regions[c] = RecoveryRegion::from_state(self.cores[c].state());
        self.log(c, EventKind::Cleared);
    }

    fn end_of_cycle(&mut self) {
        let writes = std::mem::take(&mut self.writes);
        for w in &writes {
            if self.slots[w.unit].drop_writes {
                continue;
            }
            let main = self.units[w.unit].main;
            let hart = self.hmr.virtual_id(main);
            match w.off {
                periph::EOC => {
                    self.done[hart] = true;
                    self.log(main, EventKind::Eoc);
                }
                periph::MARK => self.log(main, EventKind::Mark { value: w.value }),
                periph::FATAL => {
                    self.fatal = true;
                    self.log(main, EventKind::Fatal);
                }
                o if (periph::BARRIER_MASK
                    ..periph::BARRIER_MASK + 4 * periph::NUM_BARRIERS as u32)
                    .contains(&o) =>
                {
                    let b = ((o - periph::BARRIER_MASK) / 4) as usize;
                    self.eu
                        .set_participants(b, w.value as u64)
                        .expect("barrier in range");
                }
                o => match self.hmr.write(o, hart, w.value) {
                    Ok(effects) => self.apply_effects(main, effects),
                    Err(e) => log::warn!("core {main}: {e}"),
                },
            }
        }
        self.writes = writes;
        for g in std::mem::take(&mut self.pending_locks) {
            self.hmr.complete_sync(g);
            self.units_dirty = true;
            if let GroupState::Locked(mode) = self.hmr.group_state(g) {
                self.log(g, EventKind::Locked { main: g, mode });
                if self.hmr.options.rapid_recovery_enabled {
                    self.start_rapid(g, RecoveryKind::HwFill);
                }
            }
        }
        for g in std::mem::take(&mut self.pending_clears) {
            let mode = match self.hmr.group_state(g) {
                GroupState::Locked(m) => m,
                _ => Mode::Independent,
            };
            for m in hmr::members(g, mode, self.cfg.n_cores).expect("valid group") {
                self.clear_core(m);
            }
        }
        if self.restart_pending {
            self.restart();
        }
    }

    fn apply_effects(&mut self, writer: usize, effects: Vec<HmrEffect>) {
        let sync_clear = self.hmr.options.sync_clear_on_recovery;
        for e in effects {
            match e {
                HmrEffect::RaiseIrq { targets, irq } => self.eu.raise_irq(targets, irq),
                HmrEffect::Unlocked { main, clear } => {
                    self.units_dirty = true;
                    self.log(main, EventKind::Unlocked { main });
                    for c in clear {
                        self.clear_core(c);
                    }
                }
                HmrEffect::Split { main } => {
                    self.units_dirty = true;
                    self.log(main, EventKind::Split { main });
                }
                HmrEffect::SpWritten { vid, value } => {
                    match self.tcls[vid].on_sp_write(self.cycle, value, sync_clear) {
                        TclsAction::Clear => self.pending_clears.push(vid),
                        TclsAction::Complete => {
                            let t = self.tcls[vid].take_trace().expect("completed");
                            self.log(writer, EventKind::RecoveryEnd { kind: t.kind });
                            self.traces.push(t);
                        }
                        TclsAction::None | TclsAction::RaiseResync => {}
                    }
                }
            }
        }
    }

    /// Restarts the application: every core is cleared and the redundancy
    /// configuration returns to its reset value. Data memory is kept.
    fn restart(&mut self) {
        self.restart_pending = false;
        let counters: Vec<u32> = (0..self.cfg.n_cores)
            .map(|g| self.hmr.error_count(g))
            .collect();
        self.hmr = self.initial_hmr.clone();
        for (g, c) in counters.into_iter().enumerate() {
            for _ in 0..c {
                self.hmr.record_error(g, false);
            }
        }
        for c in 0..self.cfg.n_cores {
            self.clear_core(c);
            self.rapid[c] = RapidFsm::new(self.cfg.rapid);
            self.tcls[c] = TclsFsm::new(c);
            self.first_dissenter[c] = None;
            self.done[c] = false;
        }
        self.eu.reset();
        self.units_dirty = true;
        self.log(0, EventKind::Restart);
        let mut t = RecoveryTrace::new(RecoveryKind::Restart, 0, self.cycle, TraceSource::Measured);
        t.push("clear", 1);
        self.traces.push(t);
    }

    /// A hardware restore or software resynchronization is in flight.
    pub fn recovering(&self) -> bool {
        self.rapid.iter().any(|r| r.is_active()) || self.tcls.iter().any(|t| t.is_active())
    }

    /// True once every core has signalled completion, either itself or
    /// through the group it is locked into, and no recovery is in flight.
    pub fn finished(&self) -> bool {
        !self.recovering()
            && (0..self.cfg.n_cores).all(|c| match self.hmr.owner(c) {
                Some(m) => self.done[m],
                None => self.done[c],
            })
    }

    pub fn run(&mut self, max_cycles: u64) -> RunStatus {
        while !self.finished() {
            if self.cycle >= max_cycles {
                return RunStatus::Timeout;
            }
            self.step();
        }
        RunStatus::Completed
    }

    pub fn read_words(&self, addr: u32, len: usize) -> Vec<u32> {
        self.tcdm.read_block(addr, len)
    }

    pub fn digest_words(words: &[u32]) -> String {
        let mut h = Sha256::new();
        for w in words {
            h.update(w.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Digest of the whole data memory.
    pub fn memory_digest(&self) -> String {
        let size = self.cfg.map.tcdm_size as usize / 4;
        Self::digest_words(&self.tcdm.read_block(self.cfg.map.tcdm_base, size))
    }

    pub fn states(&self) -> Vec<ArchState> {
        self.cores.iter().map(|c| c.state().clone()).collect()
    }
}
