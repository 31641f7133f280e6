//! Minimal RV32I+MUL core model.
//!
//! A core retires at most one instruction per cycle. Each cycle is split into
//! phases so that a redundancy unit can sit between the core and the rest of
//! the cluster:
//!
//! 1. [`Core::plan`] decides whether a pending interrupt is taken this cycle.
//! 2. [`Core::fetch_addr`] exposes the instruction fetch address.
//! 3. [`Core::data_request`] decodes the delivered instruction word and
//!    produces the data-side request.
//! 4. [`Core::commit`] consumes the memory response and updates the
//!    architectural state, reporting every write on its [`BackupPorts`].
//!
//! [`Core::step`] chains the phases for standalone use.

use arrayvec::ArrayVec;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of architectural integer registers.
pub const NUM_REGS: usize = 32;

/// Registers that hold state (x1..x31).
pub const MODIFIABLE_REGS: usize = NUM_REGS - 1;

/// Maximum register-file writes per cycle (two write ports).
pub const RF_WRITE_PORTS: usize = 2;

pub const CSR_MSTATUS: u16 = 0x300;
pub const CSR_MTVEC: u16 = 0x305;
pub const CSR_MEPC: u16 = 0x341;
pub const CSR_MCAUSE: u16 = 0x342;
pub const CSR_MHARTID: u16 = 0xF14;

const MSTATUS_MIE: u32 = 1 << 3;

/// Exception cause codes written to `mcause`.
pub mod cause {
    pub const ILLEGAL_INSTRUCTION: u32 = 2;
    pub const LOAD_ACCESS_FAULT: u32 = 5;
    pub const STORE_ACCESS_FAULT: u32 = 7;
    pub const INTERRUPT: u32 = 0x8000_0000;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoreError {
    #[error("debug write attempted while core is running")]
    NotHalted,
    #[error("{0} register writes requested in one cycle, at most {RF_WRITE_PORTS} allowed")]
    TooManyRfWrites(usize),
    #[error("register x{0} is not writable")]
    BadRegister(u8),
}

/// The saved control and status registers.
#[derive(Clone, Copy, Debug, Hash, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub enum Csr {
    Mepc,
    Mcause,
    Mtvec,
    Mstatus,
}

impl Csr {
    pub const ALL: [Csr; 4] = [Csr::Mepc, Csr::Mcause, Csr::Mtvec, Csr::Mstatus];

    pub fn index(self) -> usize {
        match self {
            Csr::Mepc => 0,
            Csr::Mcause => 1,
            Csr::Mtvec => 2,
            Csr::Mstatus => 3,
        }
    }

    /// Width in bits of the stored value.
    pub fn width(self) -> u32 {
        match self {
            Csr::Mstatus => 1,
            _ => 32,
        }
    }

    fn from_addr(addr: u16) -> Option<Csr> {
        match addr {
            CSR_MEPC => Some(Csr::Mepc),
            CSR_MCAUSE => Some(Csr::Mcause),
            CSR_MTVEC => Some(Csr::Mtvec),
            CSR_MSTATUS => Some(Csr::Mstatus),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Hash, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Csrs {
    pub mepc: u32,
    pub mcause: u32,
    pub mtvec: u32,
    pub mstatus_mie: bool,
}

impl Csrs {
    /// Raw value as seen on the backup ports (`mstatus` carries only MIE in bit 0).
    pub fn get(&self, csr: Csr) -> u32 {
        match csr {
            Csr::Mepc => self.mepc,
            Csr::Mcause => self.mcause,
            Csr::Mtvec => self.mtvec,
            Csr::Mstatus => self.mstatus_mie as u32,
        }
    }

    pub fn set(&mut self, csr: Csr, value: u32) {
        match csr {
            Csr::Mepc => self.mepc = value,
            Csr::Mcause => self.mcause = value,
            Csr::Mtvec => self.mtvec = value,
            Csr::Mstatus => self.mstatus_mie = value & 1 != 0,
        }
    }
}

/// Architectural state of one core.
#[derive(Clone, Debug, Hash, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct ArchState {
    pub pc: u32,
    rf: [u32; NUM_REGS],
    pub csrs: Csrs,
    pub halted: bool,
}

impl ArchState {
    /// The state a synchronous clear produces: everything zero except the
    /// program counter and the reset value of `mtvec`.
    pub fn cleared(boot_addr: u32, mtvec_reset: u32) -> Self {
        ArchState {
            pc: boot_addr,
            rf: [0; NUM_REGS],
            csrs: Csrs {
                mtvec: mtvec_reset,
                ..Csrs::default()
            },
            halted: false,
        }
    }

    pub fn reg(&self, idx: u8) -> u32 {
        self.rf[idx as usize & 31]
    }

    /// Writes to x0 are dropped.
    pub fn set_reg(&mut self, idx: u8, value: u32) {
        if idx != 0 {
            self.rf[idx as usize & 31] = value;
        }
    }

    pub fn regs(&self) -> &[u32; NUM_REGS] {
        &self.rf
    }

    /// Replays one cycle of backup-port writes onto this state.
    pub fn apply_ports(&mut self, ports: &BackupPorts) {
        if let Some(pc) = ports.pc_write {
            self.pc = pc;
        }
        for &(r, v) in &ports.rf_writes {
            self.set_reg(r, v);
        }
        for &(c, v) in &ports.csr_writes {
            self.csrs.set(c, v);
        }
    }

    /// Equality over PC, register file and CSRs (ignores the halt flag).
    pub fn same_architecture(&self, other: &ArchState) -> bool {
        self.pc == other.pc && self.rf == other.rf && self.csrs == other.csrs
    }
}

/// Data-side request. Canonical: when `valid` is false every other field is zero.
#[derive(Clone, Copy, Debug, Default, Hash, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct DataReq {
    pub valid: bool,
    pub addr: u32,
    pub wdata: u32,
    pub we: bool,
    pub byte_enable: u8,
}

impl DataReq {
    pub fn load(addr: u32) -> Self {
        DataReq {
            valid: true,
            addr,
            wdata: 0,
            we: false,
            byte_enable: 0xF,
        }
    }

    pub fn store(addr: u32, wdata: u32) -> Self {
        DataReq {
            valid: true,
            addr,
            wdata,
            we: true,
            byte_enable: 0xF,
        }
    }

    pub fn canonical(self) -> Self {
        if self.valid {
            DataReq {
                byte_enable: self.byte_enable & 0xF,
                ..self
            }
        } else {
            DataReq::default()
        }
    }
}

/// Everything a core drives toward the system in one cycle.
#[derive(Clone, Copy, Debug, Default, Hash, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct OutputBundle {
    pub ifetch_addr: u32,
    pub data_req: DataReq,
}

/// Architectural writes made in one cycle, exposed for the shadow backup.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BackupPorts {
    pub pc_write: Option<u32>,
    pub rf_writes: ArrayVec<(u8, u32), RF_WRITE_PORTS>,
    pub csr_writes: ArrayVec<(Csr, u32), 4>,
}

impl BackupPorts {
    pub fn is_empty(&self) -> bool {
        self.pc_write.is_none() && self.rf_writes.is_empty() && self.csr_writes.is_empty()
    }
}

/// Response to the data request issued in the same cycle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MemResponse {
    /// No response: the request (if any) was not granted.
    #[default]
    Stall,
    Granted {
        rdata: u32,
    },
    BusError,
}

/// What the core will do this cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plan {
    Execute,
    TakeIrq(u8),
}

/// Notable events reported at commit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoreEvent {
    TookIrq(u8),
    Mret,
    Exception(u32),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Commit {
    pub retired: bool,
    pub ports: BackupPorts,
    pub event: Option<CoreEvent>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct CoreConfig {
    pub boot_addr: u32,
    pub mtvec_reset: u32,
    /// Cycles between a debug request and the halt acknowledge.
    pub debug_halt_latency: u32,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig {
            boot_addr: 0x0,
            mtvec_reset: 0x80,
            debug_halt_latency: 4,
        }
    }
}

/// Source of instruction words. `None` for unmapped or misaligned addresses.
pub trait InstrMemory {
    fn fetch(&self, addr: u32) -> Option<u32>;
}

impl InstrMemory for crate::asm::Program {
    fn fetch(&self, addr: u32) -> Option<u32> {
        self.word_at(addr)
    }
}

/// Data-side target for [`Core::step`].
pub trait DataPort {
    fn access(&mut self, req: &DataReq) -> MemResponse;
}

/// One debug-mode write cycle.
#[derive(Clone, Debug, Default)]
pub struct DebugWrite<'a> {
    pub pc: Option<u32>,
    pub rf: &'a [(u8, u32)],
    pub csrs: &'a [(Csr, u32)],
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub bundle: OutputBundle,
    pub commit: Commit,
}

#[derive(Clone, Debug)]
pub struct Core {
    state: ArchState,
    cfg: CoreConfig,
    halt_countdown: Option<u32>,
}

impl Core {
    pub fn new(cfg: CoreConfig) -> Self {
        Core {
            state: ArchState::cleared(cfg.boot_addr, cfg.mtvec_reset),
            cfg,
            halt_countdown: None,
        }
    }

    pub fn config(&self) -> &CoreConfig {
        &self.cfg
    }

    pub fn state(&self) -> &ArchState {
        &self.state
    }

    /// Direct state access for fault injection and test setup.
    pub fn state_mut(&mut self) -> &mut ArchState {
        &mut self.state
    }

    pub fn is_halted(&self) -> bool {
        self.state.halted
    }

    pub fn halt_pending(&self) -> bool {
        self.halt_countdown.is_some()
    }

    /// Brings all flip-flops back to their reset value without a reset.
    pub fn synchronous_clear(&mut self) {
        self.state = ArchState::cleared(self.cfg.boot_addr, self.cfg.mtvec_reset);
        self.halt_countdown = None;
    }

    pub fn debug_halt_request(&mut self) {
        if self.state.halted {
            return;
        }
        if self.cfg.debug_halt_latency == 0 {
            self.state.halted = true;
        } else {
            self.halt_countdown = Some(self.cfg.debug_halt_latency);
        }
    }

    /// Advances the debug handshake by one cycle. Returns true once halted.
    pub fn tick_debug(&mut self) -> bool {
        if let Some(left) = self.halt_countdown {
            if left <= 1 {
                self.halt_countdown = None;
                self.state.halted = true;
            } else {
                self.halt_countdown = Some(left - 1);
            }
        }
        self.state.halted
    }

    pub fn debug_write_state(&mut self, w: &DebugWrite<'_>) -> Result<(), CoreError> {
        if !self.state.halted {
            return Err(CoreError::NotHalted);
        }
        if w.rf.len() > RF_WRITE_PORTS {
            return Err(CoreError::TooManyRfWrites(w.rf.len()));
        }
        if let Some(&(r, _)) =
            w.rf.iter()
                .find(|(r, _)| *r == 0 || *r as usize >= NUM_REGS)
        {
            return Err(CoreError::BadRegister(r));
        }
        if let Some(pc) = w.pc {
            self.state.pc = pc;
        }
        for &(r, v) in w.rf {
            self.state.set_reg(r, v);
        }
        for &(c, v) in w.csrs {
            self.state.csrs.set(c, v);
        }
        Ok(())
    }

    /// Leaves debug mode and resumes at the current PC.
    pub fn resume(&mut self) {
        self.state.halted = false;
        self.halt_countdown = None;
    }

    /// Chooses the lowest pending, enabled interrupt.
    pub fn plan(&self, irq_pending: u32) -> Plan {
        if self.state.csrs.mstatus_mie && irq_pending != 0 {
            Plan::TakeIrq(irq_pending.trailing_zeros() as u8)
        } else {
            Plan::Execute
        }
    }

    pub fn fetch_addr(&self) -> u32 {
        self.state.pc
    }

    /// Data request for the delivered instruction (pure).
    pub fn data_request(&self, plan: Plan, instr: Option<u32>) -> DataReq {
        if plan != Plan::Execute || self.state.halted {
            return DataReq::default();
        }
        match instr.map(decode) {
            Some(Op::Lw { rs1, imm, .. }) => {
                DataReq::load(self.state.reg(rs1).wrapping_add(imm as u32))
            }
            Some(Op::Sw { rs1, rs2, imm }) => DataReq::store(
                self.state.reg(rs1).wrapping_add(imm as u32),
                self.state.reg(rs2),
            ),
            _ => DataReq::default(),
        }
    }

    /// Retires the instruction (or takes the trap) given the memory response.
    pub fn commit(
        &mut self,
        plan: Plan,
        instr: Option<u32>,
        resp: MemResponse,
        hart_id: u32,
    ) -> Commit {
        let mut out = Commit::default();
        if self.state.halted {
            return out;
        }
        if let Plan::TakeIrq(id) = plan {
            let vector = self.vector_for(Some(id));
            self.trap(&mut out, cause::INTERRUPT | id as u32, vector);
            out.event = Some(CoreEvent::TookIrq(id));
            out.retired = true;
            return out;
        }
        let op = instr.map(decode).unwrap_or(Op::Illegal);
        let pc = self.state.pc;
        let next = pc.wrapping_add(4);
        let s = &self.state;
        let mut rd_write: Option<(u8, u32)> = None;
        let mut new_pc = next;
        match op {
            Op::Lui { rd, imm } => rd_write = Some((rd, imm)),
            Op::Auipc { rd, imm } => rd_write = Some((rd, pc.wrapping_add(imm))),
            Op::Jal { rd, imm } => {
                rd_write = Some((rd, next));
                new_pc = pc.wrapping_add(imm as u32);
            }
            Op::Jalr { rd, rs1, imm } => {
                new_pc = s.reg(rs1).wrapping_add(imm as u32) & !1;
                rd_write = Some((rd, next));
            }
            Op::Branch {
                kind,
                rs1,
                rs2,
                imm,
            } => {
                let (a, b) = (s.reg(rs1), s.reg(rs2));
                let taken = match kind {
                    BranchKind::Eq => a == b,
                    BranchKind::Ne => a != b,
                    BranchKind::Lt => (a as i32) < (b as i32),
                    BranchKind::Ge => (a as i32) >= (b as i32),
                    BranchKind::Ltu => a < b,
                    BranchKind::Geu => a >= b,
                };
                if taken {
                    new_pc = pc.wrapping_add(imm as u32);
                }
            }
            Op::Lw { rd, .. } => match resp {
                MemResponse::Granted { rdata } => rd_write = Some((rd, rdata)),
                MemResponse::Stall => return out,
                MemResponse::BusError => {
                    self.exception(&mut out, cause::LOAD_ACCESS_FAULT);
                    return out;
                }
            },
            Op::Sw { .. } => match resp {
                MemResponse::Granted { .. } => {}
                MemResponse::Stall => return out,
                MemResponse::BusError => {
                    self.exception(&mut out, cause::STORE_ACCESS_FAULT);
                    return out;
                }
            },
            Op::AluImm { kind, rd, rs1, imm } => {
                rd_write = Some((rd, alu(kind, s.reg(rs1), imm as u32)));
            }
            Op::Alu { kind, rd, rs1, rs2 } => {
                rd_write = Some((rd, alu(kind, s.reg(rs1), s.reg(rs2))));
            }
            Op::Csr {
                set,
                rd,
                rs1,
                csr: addr,
            } => {
                let old = match addr {
                    CSR_MHARTID => hart_id,
                    CSR_MSTATUS => {
                        if s.csrs.mstatus_mie {
                            MSTATUS_MIE
                        } else {
                            0
                        }
                    }
                    _ => match Csr::from_addr(addr) {
                        Some(c) => s.csrs.get(c),
                        None => {
                            self.exception(&mut out, cause::ILLEGAL_INSTRUCTION);
                            return out;
                        }
                    },
                };
                let src = s.reg(rs1);
                let write = if set {
                    (rs1 != 0).then_some(old | src)
                } else {
                    Some(src)
                };
                if let (Some(v), Some(c)) = (write, Csr::from_addr(addr)) {
                    let stored = if c == Csr::Mstatus {
                        (v & MSTATUS_MIE != 0) as u32
                    } else {
                        v
                    };
                    self.state.csrs.set(c, stored);
                    out.ports.csr_writes.push((c, stored));
                }
                rd_write = Some((rd, old));
            }
            Op::Mret => {
                new_pc = self.state.csrs.mepc;
                self.state.csrs.mstatus_mie = true;
                out.ports.csr_writes.push((Csr::Mstatus, 1));
                out.event = Some(CoreEvent::Mret);
            }
            Op::Illegal => {
                self.exception(&mut out, cause::ILLEGAL_INSTRUCTION);
                return out;
            }
        }
        if let Some((rd, v)) = rd_write {
            if rd != 0 {
                self.state.set_reg(rd, v);
                out.ports.rf_writes.push((rd, v));
            }
        }
        self.state.pc = new_pc;
        out.ports.pc_write = Some(new_pc);
        out.retired = true;
        out
    }

    /// Runs one full cycle against standalone memories.
    pub fn step<I: InstrMemory, D: DataPort>(
        &mut self,
        imem: &I,
        dmem: &mut D,
        irq_pending: u32,
        hart_id: u32,
    ) -> StepOutput {
        if self.state.halted {
            self.tick_debug();
            return StepOutput {
                bundle: OutputBundle::default(),
                commit: Commit::default(),
            };
        }
        let plan = self.plan(irq_pending);
        let ifetch_addr = self.fetch_addr();
        let instr = imem.fetch(ifetch_addr);
        let data_req = self.data_request(plan, instr);
        let resp = if data_req.valid {
            dmem.access(&data_req)
        } else {
            MemResponse::Stall
        };
        let commit = self.commit(plan, instr, resp, hart_id);
        self.tick_debug();
        StepOutput {
            bundle: OutputBundle {
                ifetch_addr,
                data_req,
            },
            commit,
        }
    }

    fn vector_for(&self, irq: Option<u8>) -> u32 {
        let mtvec = self.state.csrs.mtvec;
        let base = mtvec & !3;
        match irq {
            Some(id) if mtvec & 1 == 1 => base.wrapping_add(4 * id as u32),
            _ => base,
        }
    }

    fn exception(&mut self, out: &mut Commit, code: u32) {
        let vector = self.vector_for(None);
        self.trap(out, code, vector);
        out.event = Some(CoreEvent::Exception(code));
        out.retired = true;
    }

    fn trap(&mut self, out: &mut Commit, mcause: u32, vector: u32) {
        let pc = self.state.pc;
        self.state.csrs.mepc = pc;
        self.state.csrs.mcause = mcause;
        self.state.csrs.mstatus_mie = false;
        self.state.pc = vector;
        out.ports.pc_write = Some(vector);
        out.ports.csr_writes.push((Csr::Mepc, pc));
        out.ports.csr_writes.push((Csr::Mcause, mcause));
        out.ports.csr_writes.push((Csr::Mstatus, 0));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Eq,
    Ne,
    Lt,
    Ge,
    Ltu,
    Geu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AluKind {
    Add,
    Sub,
    Sll,
    Slt,
    Sltu,
    Xor,
    Srl,
    Sra,
    Or,
    And,
    Mul,
}

/// Decoded instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Lui {
        rd: u8,
        imm: u32,
    },
    Auipc {
        rd: u8,
        imm: u32,
    },
    Jal {
        rd: u8,
        imm: i32,
    },
    Jalr {
        rd: u8,
        rs1: u8,
        imm: i32,
    },
    Branch {
        kind: BranchKind,
        rs1: u8,
        rs2: u8,
        imm: i32,
    },
    Lw {
        rd: u8,
        rs1: u8,
        imm: i32,
    },
    Sw {
        rs1: u8,
        rs2: u8,
        imm: i32,
    },
    AluImm {
        kind: AluKind,
        rd: u8,
        rs1: u8,
        imm: i32,
    },
    Alu {
        kind: AluKind,
        rd: u8,
        rs1: u8,
        rs2: u8,
    },
    Csr {
        set: bool,
        rd: u8,
        rs1: u8,
        csr: u16,
    },
    Mret,
    Illegal,
}

fn alu(kind: AluKind, a: u32, b: u32) -> u32 {
    match kind {
        AluKind::Add => a.wrapping_add(b),
        AluKind::Sub => a.wrapping_sub(b),
        AluKind::Sll => a << (b & 31),
        AluKind::Slt => ((a as i32) < (b as i32)) as u32,
        AluKind::Sltu => (a < b) as u32,
        AluKind::Xor => a ^ b,
        AluKind::Srl => a >> (b & 31),
        AluKind::Sra => ((a as i32) >> (b & 31)) as u32,
        AluKind::Or => a | b,
        AluKind::And => a & b,
        AluKind::Mul => a.wrapping_mul(b),
    }
}

pub fn decode(word: u32) -> Op {
    let opcode = word & 0x7F;
    let rd = ((word >> 7) & 31) as u8;
    let funct3 = (word >> 12) & 7;
    let rs1 = ((word >> 15) & 31) as u8;
    let rs2 = ((word >> 20) & 31) as u8;
    let funct7 = word >> 25;
    let imm_i = (word as i32) >> 20;
    match opcode {
        0x37 => Op::Lui {
            rd,
            imm: word & 0xFFFF_F000,
        },
        0x17 => Op::Auipc {
            rd,
            imm: word & 0xFFFF_F000,
        },
        0x6F => {
            let imm = (((word as i32) >> 31) << 20)
                | (((word >> 12) & 0xFF) << 12) as i32
                | (((word >> 20) & 1) << 11) as i32
                | (((word >> 21) & 0x3FF) << 1) as i32;
            Op::Jal { rd, imm }
        }
        0x67 if funct3 == 0 => Op::Jalr {
            rd,
            rs1,
            imm: imm_i,
        },
        0x63 => {
            let imm = (((word as i32) >> 31) << 12)
                | (((word >> 7) & 1) << 11) as i32
                | (((word >> 25) & 0x3F) << 5) as i32
                | (((word >> 8) & 0xF) << 1) as i32;
            let kind = match funct3 {
                0 => BranchKind::Eq,
                1 => BranchKind::Ne,
                4 => BranchKind::Lt,
                5 => BranchKind::Ge,
                6 => BranchKind::Ltu,
                7 => BranchKind::Geu,
                _ => return Op::Illegal,
            };
            Op::Branch {
                kind,
                rs1,
                rs2,
                imm,
            }
        }
        0x03 if funct3 == 2 => Op::Lw {
            rd,
            rs1,
            imm: imm_i,
        },
        0x23 if funct3 == 2 => {
            let imm = (((word as i32) >> 25) << 5) | ((word >> 7) & 31) as i32;
            Op::Sw { rs1, rs2, imm }
        }
        0x13 => {
            let kind = match (funct3, funct7) {
                (0, _) => AluKind::Add,
                (2, _) => AluKind::Slt,
                (3, _) => AluKind::Sltu,
                (4, _) => AluKind::Xor,
                (6, _) => AluKind::Or,
                (7, _) => AluKind::And,
                (1, 0) => AluKind::Sll,
                (5, 0) => AluKind::Srl,
                (5, 0x20) => AluKind::Sra,
                _ => return Op::Illegal,
            };
            let imm = match kind {
                AluKind::Sll | AluKind::Srl | AluKind::Sra => (rs2 as i32) & 31,
                _ => imm_i,
            };
            Op::AluImm { kind, rd, rs1, imm }
        }
        0x33 => {
            let kind = match (funct3, funct7) {
                (0, 0) => AluKind::Add,
                (0, 0x20) => AluKind::Sub,
                (1, 0) => AluKind::Sll,
                (2, 0) => AluKind::Slt,
                (3, 0) => AluKind::Sltu,
                (4, 0) => AluKind::Xor,
                (5, 0) => AluKind::Srl,
                (5, 0x20) => AluKind::Sra,
                (6, 0) => AluKind::Or,
                (7, 0) => AluKind::And,
                (0, 1) => AluKind::Mul,
                _ => return Op::Illegal,
            };
            Op::Alu { kind, rd, rs1, rs2 }
        }
        0x73 => {
            if word == 0x3020_0073 {
                return Op::Mret;
            }
            let csr = (word >> 20) as u16;
            match funct3 {
                1 => Op::Csr {
                    set: false,
                    rd,
                    rs1,
                    csr,
                },
                2 => Op::Csr {
                    set: true,
                    rd,
                    rs1,
                    csr,
                },
                _ => Op::Illegal,
            }
        }
        _ => Op::Illegal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;

    struct FlatMem {
        base: u32,
        words: Vec<u32>,
    }

    impl DataPort for FlatMem {
        fn access(&mut self, req: &DataReq) -> MemResponse {
            let Some(off) = req.addr.checked_sub(self.base) else {
                return MemResponse::BusError;
            };
            let idx = (off / 4) as usize;
            if off % 4 != 0 || idx >= self.words.len() {
                return MemResponse::BusError;
            }
            if req.we {
                self.words[idx] = req.wdata;
                MemResponse::Granted { rdata: 0 }
            } else {
                MemResponse::Granted {
                    rdata: self.words[idx],
                }
            }
        }
    }

    fn mem() -> FlatMem {
        FlatMem {
            base: 0x100,
            words: vec![0; 64],
        }
    }

    fn run(src: &str, steps: usize) -> (Core, Vec<StepOutput>, FlatMem) {
        let prog = assemble(src, 0).unwrap();
        let mut core = Core::new(CoreConfig::default());
        let mut m = mem();
        let outs = (0..steps).map(|_| core.step(&prog, &mut m, 0, 0)).collect();
        (core, outs, m)
    }

    #[test]
    fn addi_writes_register_and_port() {
        let (core, outs, _) = run("addi x1, x0, 5", 1);
        assert_eq!(core.state().reg(1), 5);
        assert_eq!(outs[0].commit.ports.rf_writes.as_slice(), &[(1, 5)]);
    }

    #[test]
    fn store_emits_data_request() {
        let (_, outs, m) = run("addi x1, x0, 5\naddi x2, x0, 0x100\nsw x1, 0(x2)", 3);
        assert_eq!(outs[2].bundle.data_req, DataReq::store(0x100, 5));
        assert_eq!(m.words[0], 5);
    }

    #[test]
    fn writes_to_x0_are_dropped() {
        let (core, outs, _) = run("addi x0, x0, 7\nlui x0, 0x12345", 2);
        assert_eq!(core.state().reg(0), 0);
        assert!(outs.iter().all(|o| o.commit.ports.rf_writes.is_empty()));
    }

    #[test]
    fn illegal_opcode_traps_to_mtvec() {
        let (core, outs, _) = run(".word 0xFFFFFFFF", 1);
        assert_eq!(core.state().pc, 0x80);
        assert_eq!(core.state().csrs.mcause, cause::ILLEGAL_INSTRUCTION);
        assert_eq!(core.state().csrs.mepc, 0);
        assert_eq!(
            outs[0].commit.event,
            Some(CoreEvent::Exception(cause::ILLEGAL_INSTRUCTION))
        );
    }

    #[test]
    fn interrupt_saves_mepc_and_mret_returns() {
        let src = "
            addi t0, x0, 0x81
            csrw mtvec, t0
            addi t0, x0, 8
            csrw mstatus, t0
            addi a0, x0, 1
            addi a0, x0, 2
            .org 0x80
            j 0
            .org 0x80 + 4*3
            mret
        ";
        let prog = assemble(src, 0).unwrap();
        let mut core = Core::new(CoreConfig::default());
        let mut m = mem();
        for _ in 0..4 {
            core.step(&prog, &mut m, 0, 0);
        }
        assert!(core.state().csrs.mstatus_mie);
        let out = core.step(&prog, &mut m, 1 << 3, 0);
        assert_eq!(out.commit.event, Some(CoreEvent::TookIrq(3)));
        assert_eq!(core.state().pc, 0x8C);
        assert_eq!(core.state().csrs.mepc, 0x10);
        assert!(!core.state().csrs.mstatus_mie);
        // masked while inside the handler
        assert_eq!(core.plan(1 << 3), Plan::Execute);
        let out = core.step(&prog, &mut m, 0, 0);
        assert_eq!(out.commit.event, Some(CoreEvent::Mret));
        assert_eq!(core.state().pc, 0x10);
        core.step(&prog, &mut m, 0, 0);
        assert_eq!(core.state().reg(10), 1);
    }

    #[test]
    fn masked_interrupt_stays_pending() {
        let core = Core::new(CoreConfig::default());
        assert_eq!(core.plan(0b100), Plan::Execute);
    }

    #[test]
    fn stalled_load_does_not_retire() {
        let prog = assemble("lw x1, 0x100(x0)", 0).unwrap();
        let mut core = Core::new(CoreConfig::default());
        let plan = core.plan(0);
        let instr = prog.fetch(core.fetch_addr());
        let req = core.data_request(plan, instr);
        assert_eq!(req, DataReq::load(0x100));
        let c = core.commit(plan, instr, MemResponse::Stall, 0);
        assert!(!c.retired);
        assert!(c.ports.is_empty());
        assert_eq!(core.state().pc, 0);
        let c = core.commit(plan, instr, MemResponse::Granted { rdata: 9 }, 0);
        assert!(c.retired);
        assert_eq!(core.state().reg(1), 9);
    }

    #[test]
    fn synchronous_clear_is_idempotent_and_boots() {
        let (mut core, _, _) = run("addi x3, x0, 1\naddi x4, x0, 2", 2);
        core.synchronous_clear();
        let once = core.state().clone();
        core.synchronous_clear();
        assert_eq!(&once, core.state());
        assert_eq!(once, ArchState::cleared(0, 0x80));
        let prog = assemble("nop", 0).unwrap();
        let out = core.step(&prog, &mut mem(), 0, 0);
        assert_eq!(out.bundle.ifetch_addr, 0);
    }

    #[test]
    fn debug_halt_takes_configured_latency() {
        let mut core = Core::new(CoreConfig::default());
        core.debug_halt_request();
        let mut cycles = 0;
        while !core.tick_debug() {
            cycles += 1;
        }
        assert_eq!(cycles + 1, 4);
        let prog = assemble("sw x0, 0x100(x0)", 0).unwrap();
        let out = core.step(&prog, &mut mem(), 0, 0);
        assert!(!out.bundle.data_req.valid);
        core.synchronous_clear();
        assert!(!core.is_halted());
    }

    #[test]
    fn debug_write_respects_port_limit() {
        let mut core = Core::new(CoreConfig::default());
        assert_eq!(
            core.debug_write_state(&DebugWrite::default()),
            Err(CoreError::NotHalted)
        );
        core.debug_halt_request();
        while !core.tick_debug() {}
        core.debug_write_state(&DebugWrite {
            pc: None,
            rf: &[(1, 0xA), (2, 0xB)],
            csrs: &[],
        })
        .unwrap();
        assert_eq!(core.state().reg(1), 0xA);
        assert_eq!(core.state().reg(2), 0xB);
        assert_eq!(
            core.debug_write_state(&DebugWrite {
                pc: None,
                rf: &[(1, 1), (2, 2), (3, 3)],
                csrs: &[],
            }),
            Err(CoreError::TooManyRfWrites(3))
        );
    }

    #[test]
    fn decode_covers_subset() {
        let src = "
            lui a0, 0x10
            auipc a1, 1
            slti a2, a0, 3
            sltiu a2, a0, 3
            xori a2, a0, 3
            ori a2, a0, 3
            andi a2, a0, 3
            slli a2, a0, 3
            srli a2, a0, 3
            srai a2, a0, 3
            add a3, a0, a1
            sub a3, a0, a1
            sll a3, a0, a1
            slt a3, a0, a1
            sltu a3, a0, a1
            xor a3, a0, a1
            srl a3, a0, a1
            sra a3, a0, a1
            or a3, a0, a1
            and a3, a0, a1
            mul a3, a0, a1
            bltu a0, a1, 8
            bgeu a0, a1, 8
            csrrs a4, mhartid, x0
        ";
        let prog = assemble(src, 0).unwrap();
        for (i, w) in prog.words().iter().enumerate() {
            assert_ne!(decode(*w), Op::Illegal, "instruction {i}");
        }
    }

    #[test]
    fn alu_semantics() {
        assert_eq!(alu(AluKind::Sra, 0x8000_0000, 4), 0xF800_0000);
        assert_eq!(alu(AluKind::Srl, 0x8000_0000, 4), 0x0800_0000);
        assert_eq!(alu(AluKind::Slt, (-1i32) as u32, 0), 1);
        assert_eq!(alu(AluKind::Sltu, (-1i32) as u32, 0), 0);
        assert_eq!(alu(AluKind::Mul, 0xFFFF_FFFF, 3), 0xFFFF_FFFD);
    }
}
