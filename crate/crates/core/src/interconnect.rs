//! Word-interleaved TCDM with per-bank round-robin arbitration, and the
//! event unit (barriers and interrupt lines).

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpu::DataReq;

pub type PortId = usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InterconnectError {
    #[error("barrier {0} has no participants configured")]
    EmptyBarrier(usize),
    #[error("barrier {0} does not exist")]
    NoSuchBarrier(usize),
}

/// Cluster address map. Instruction memory is ideal and separate from the
/// data side; the peripheral window is decoded before the TCDM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MemoryMap {
    pub boot_rom_base: u32,
    pub tcdm_base: u32,
    pub tcdm_size: u32,
    pub periph_base: u32,
    pub periph_size: u32,
}

impl Default for MemoryMap {
    fn default() -> Self {
        MemoryMap {
            boot_rom_base: 0x0000_0000,
            tcdm_base: 0x1000_0000,
            tcdm_size: 256 * 1024,
            // top 2 KiB: every register is reachable as a negative offset from x0
            periph_base: 0xFFFF_F800,
            periph_size: 0x800,
        }
    }
}

/// Offsets inside the peripheral window.
pub mod periph {
    /// Redundancy unit registers occupy `[0, HMR_END)`.
    pub const HMR_END: u32 = 0x200;
    pub const BARRIER_WAIT: u32 = 0x400;
    pub const BARRIER_MASK: u32 = 0x440;
    pub const NUM_BARRIERS: usize = 8;
    /// End-of-computation flag, one per virtual core.
    pub const EOC: u32 = 0x500;
    /// Phase marker; the written value is logged with the cycle.
    pub const MARK: u32 = 0x504;
    /// Written by the default exception handler.
    pub const FATAL: u32 = 0x508;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Periph(u32),
    Tcdm(u32),
    Unmapped,
}

impl MemoryMap {
    pub fn decode(&self, addr: u32) -> Region {
        if let Some(off) = addr.checked_sub(self.periph_base) {
            if off < self.periph_size {
                return Region::Periph(off);
            }
        }
        if let Some(off) = addr.checked_sub(self.tcdm_base) {
            if off < self.tcdm_size {
                return Region::Tcdm(off);
            }
        }
        Region::Unmapped
    }

    pub fn tcdm_end(&self) -> u32 {
        self.tcdm_base + self.tcdm_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcdmResponse {
    Granted { rdata: u32 },
    Stall,
    BusError,
}

/// Multi-bank scratchpad. Bank of word `w` is `w mod banks`.
#[derive(Clone, Debug)]
pub struct Tcdm {
    base: u32,
    words: Vec<u32>,
    banks: usize,
    ports: usize,
    rr_pointer: Vec<usize>,
    // scratch: per-bank list of contenders for the current cycle
    contenders: Vec<Vec<usize>>,
}

impl Tcdm {
    pub fn new(base: u32, size_bytes: u32, banks: usize, ports: usize) -> Self {
        assert!(banks > 0 && ports > 0);
        Tcdm {
            base,
            words: vec![0; (size_bytes / 4) as usize],
            banks,
            ports,
            rr_pointer: vec![0; banks],
            contenders: vec![Vec::new(); banks],
        }
    }

    pub fn size_bytes(&self) -> u32 {
        (self.words.len() * 4) as u32
    }

    pub fn num_banks(&self) -> usize {
        self.banks
    }

    pub fn rr_pointer(&self, bank: usize) -> usize {
        self.rr_pointer[bank]
    }

    pub fn set_rr_pointer(&mut self, bank: usize, port: PortId) {
        self.rr_pointer[bank] = port % self.ports;
    }

    pub fn bank_index(&self, addr: u32) -> usize {
        ((addr.wrapping_sub(self.base) / 4) as usize) % self.banks
    }

    fn word_index(&self, addr: u32) -> Option<usize> {
        let off = addr.checked_sub(self.base)?;
        let idx = (off / 4) as usize;
        (off % 4 == 0 && idx < self.words.len()).then_some(idx)
    }

    pub fn read(&self, addr: u32) -> Option<u32> {
        self.word_index(addr).map(|i| self.words[i])
    }

    pub fn write(&mut self, addr: u32, value: u32) -> bool {
        match self.word_index(addr) {
            Some(i) => {
                self.words[i] = value;
                true
            }
            None => false,
        }
    }

    pub fn read_block(&self, addr: u32, len: usize) -> Vec<u32> {
        (0..len)
            .map(|i| self.read(addr + 4 * i as u32).unwrap_or(0))
            .collect()
    }

    pub fn write_block(&mut self, addr: u32, data: &[u32]) {
        for (i, &v) in data.iter().enumerate() {
            self.write(addr + 4 * i as u32, v);
        }
    }

    /// One arbitration cycle. Per bank the first contender at or after the
    /// round-robin pointer wins; the pointer then moves past the winner.
    pub fn tcdm_cycle(&mut self, requests: &[(PortId, DataReq)]) -> Vec<(PortId, TcdmResponse)> {
        let mut out = Vec::with_capacity(requests.len());
        self.tcdm_cycle_into(requests, &mut out);
        out
    }

    pub fn tcdm_cycle_into(
        &mut self,
        requests: &[(PortId, DataReq)],
        out: &mut Vec<(PortId, TcdmResponse)>,
    ) {
        out.clear();
        for c in &mut self.contenders {
            c.clear();
        }
        for (i, (_, req)) in requests.iter().enumerate() {
            if req.valid && self.word_index(req.addr).is_some() {
                let bank = self.bank_index(req.addr);
                self.contenders[bank].push(i);
            }
        }
        let mut result = vec![TcdmResponse::BusError; requests.len()];
        for (i, (_, req)) in requests.iter().enumerate() {
            if req.valid && self.word_index(req.addr).is_some() {
                result[i] = TcdmResponse::Stall;
            }
        }
        for bank in 0..self.banks {
            if self.contenders[bank].is_empty() {
                continue;
            }
            let ptr = self.rr_pointer[bank];
            let ports = self.ports;
            let winner = *self.contenders[bank]
                .iter()
                .min_by_key(|&&i| (requests[i].0 + ports - ptr) % ports)
                .expect("non-empty");
            let (port, req) = requests[winner];
            let idx = self.word_index(req.addr).expect("checked");
            let rdata = if req.we {
                self.words[idx] = req.wdata;
                0
            } else {
                self.words[idx]
            };
            result[winner] = TcdmResponse::Granted { rdata };
            self.rr_pointer[bank] = (port + 1) % ports;
        }
        out.extend(requests.iter().map(|(p, _)| *p).zip(result));
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Barrier {
    pub participants: u64,
    /// Ports waiting in the most recent cycle.
    pub waiters: u64,
    pub completions: u64,
}

/// Barriers and per-port interrupt lines.
#[derive(Clone, Debug)]
pub struct EventUnit {
    barriers: Vec<Barrier>,
    irq_pending: Vec<u32>,
}

impl EventUnit {
    pub fn new(ports: usize, barriers: usize) -> Self {
        EventUnit {
            barriers: vec![Barrier::default(); barriers],
            irq_pending: vec![0; ports],
        }
    }

    pub fn num_barriers(&self) -> usize {
        self.barriers.len()
    }

    pub fn barrier(&self, id: usize) -> Option<&Barrier> {
        self.barriers.get(id)
    }

    pub fn set_participants(&mut self, id: usize, mask: u64) -> Result<(), InterconnectError> {
        let b = self
            .barriers
            .get_mut(id)
            .ok_or(InterconnectError::NoSuchBarrier(id))?;
        b.participants = mask;
        Ok(())
    }

    /// Resolves one cycle of blocking barrier reads. `arrivals` holds the
    /// ports currently waiting on barrier `id`. Returns true when the barrier
    /// completes this cycle, in which case every waiter is released.
    pub fn barrier_read(&mut self, id: usize, arrivals: u64) -> Result<bool, InterconnectError> {
        let b = self
            .barriers
            .get_mut(id)
            .ok_or(InterconnectError::NoSuchBarrier(id))?;
        if b.participants == 0 {
            return Err(InterconnectError::EmptyBarrier(id));
        }
        b.waiters = arrivals;
        if arrivals & b.participants == b.participants {
            b.completions += 1;
            b.waiters = 0;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn raise_irq(&mut self, targets: impl IntoIterator<Item = PortId>, irq: u8) {
        for t in targets {
            if let Some(p) = self.irq_pending.get_mut(t) {
                *p |= 1 << irq;
            }
        }
    }

    pub fn pending(&self, port: PortId) -> u32 {
        self.irq_pending.get(port).copied().unwrap_or(0)
    }

    pub fn acknowledge(&mut self, port: PortId, irq: u8) {
        if let Some(p) = self.irq_pending.get_mut(port) {
            *p &= !(1 << irq);
        }
    }

    pub fn clear_port(&mut self, port: PortId) {
        if let Some(p) = self.irq_pending.get_mut(port) {
            *p = 0;
        }
    }

    pub fn reset(&mut self) {
        for b in &mut self.barriers {
            b.waiters = 0;
        }
        self.irq_pending.iter_mut().for_each(|p| *p = 0);
    }
}
