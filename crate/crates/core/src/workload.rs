//! Built-in software: the boot/trap runtime shared by every program, and the
//! matrix-multiplication benchmark.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use std::fmt::Write;

use crate::hmr::{irq, regs, MAX_CORES};
use crate::interconnect::{periph, MemoryMap};

/// Bytes per core stack.
pub const STACK_SIZE: u32 = 0x400;
/// Saved frame: mepc, x1, mcause, x3..x31.
pub const FRAME_SIZE: u32 = 128;
/// Registers saved by the trap handlers: everything except x0 and sp.
pub const SAVED_REGS: usize = 30;

/// Where things live in the data memory.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub map: MemoryMap,
}

impl Layout {
    pub fn new(map: MemoryMap) -> Self {
        Layout { map }
    }

    /// Initial stack pointer of hart `id`.
    pub fn stack_top(&self, id: usize) -> u32 {
        self.map.tcdm_end() - id as u32 * STACK_SIZE
    }

    /// Private stack used by a core split off for a performance section.
    pub fn perf_stack_top(&self, id: usize) -> u32 {
        self.stack_top(MAX_CORES) - id as u32 * STACK_SIZE
    }

    /// Lowest address any stack may reach.
    pub fn stacks_floor(&self) -> u32 {
        self.perf_stack_top(MAX_CORES)
    }

    pub fn data_base(&self) -> u32 {
        self.map.tcdm_base
    }
}

fn periph_sym(map: &MemoryMap, off: u32) -> i64 {
    map.periph_base as i32 as i64 + off as i64
}

/// Assembler prologue: register and address constants.
pub fn equates(map: &MemoryMap) -> String {
    let mut s = String::new();
    let mut eq = |name: &str, v: i64| writeln!(s, ".equ {name}, {v}").unwrap();
    eq("MODE_SELF", periph_sym(map, regs::MODE_SELF));
    eq("SP_SELF", periph_sym(map, regs::SP_SELF));
    eq("GROUP_SYNC", periph_sym(map, regs::GROUP_SYNC));
    eq("HMR_OPTIONS", periph_sym(map, regs::OPTIONS));
    eq("BARRIER0", periph_sym(map, periph::BARRIER_WAIT));
    eq("EOC", periph_sym(map, periph::EOC));
    eq("MARK", periph_sym(map, periph::MARK));
    eq("FATAL", periph_sym(map, periph::FATAL));
    eq("STACK_TOP", map.tcdm_end() as i64);
    eq("PERF_STACK_TOP", Layout::new(*map).perf_stack_top(0) as i64);
    eq("STACK_SIZE", STACK_SIZE as i64);
    eq("FRAME", FRAME_SIZE as i64);
    s
}

/// Frame slot (byte offset) of register `r`; slots 0 and 2 hold mepc and
/// mcause since x0 and sp are never saved.
fn frame_slot(r: u32) -> u32 {
    4 * r
}

fn saved_regs() -> impl Iterator<Item = u32> {
    (1..32).filter(|&r| r != 2)
}

pub fn save_frame() -> String {
    let mut s = String::from("    addi sp, sp, -FRAME\n");
    for r in saved_regs() {
        writeln!(s, "    sw x{r}, {}(sp)", frame_slot(r)).unwrap();
    }
    s.push_str("    csrr t0, mepc\n    sw t0, 0(sp)\n    csrr t0, mcause\n    sw t0, 8(sp)\n");
    s
}

/// Options that change the generated runtime.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuntimeOptions {
    /// Groups are filled by hardware after the group barrier.
    pub rapid: bool,
}

/// Boot code, vector table, trap handlers and the reload routine.
pub fn runtime(map: &MemoryMap, opts: RuntimeOptions) -> String {
    let mut s = equates(map);
    s.push_str(
        "_start:
    li   t0, 0x81
    csrw mtvec, t0
    lw   sp, SP_SELF(zero)
    bnez sp, reload
    csrr t0, mhartid
    li   t1, STACK_SIZE
    mul  t1, t0, t1
    li   sp, STACK_TOP
    sub  sp, sp, t1
    li   t0, 8
    csrw mstatus, t0
    j    main
",
    );
    s.push_str(".org 0x80\nvectors:\n");
    for id in 0..32u8 {
        let target = match id {
            irq::GROUP_MAIN => "group_main_isr",
            irq::RESYNC => "resync_isr",
            irq::GROUP_HELPER => "group_isr",
            _ => "exc_handler",
        };
        writeln!(s, "    j {target}").unwrap();
    }
    s.push_str(
        "exc_handler:
    sw   zero, FATAL(zero)
exc_spin:
    j    exc_spin
",
    );
    if opts.rapid {
        // main state is copied to the members by hardware once the group locks
        s.push_str("group_main_isr:\n    lw   x0, GROUP_SYNC(zero)\n    mret\n");
    } else {
        s.push_str("group_main_isr:\n    j    group_isr\n");
    }
    s.push_str("group_isr:\n");
    s.push_str(&save_frame());
    s.push_str("    sw   sp, SP_SELF(zero)\n    lw   x0, GROUP_SYNC(zero)\n    j    reload\n");
    s.push_str("resync_isr:\n");
    s.push_str(&save_frame());
    s.push_str("    sw   sp, SP_SELF(zero)\n    j    reload\n");
    s.push_str("perf_join:\n    lw   x0, GROUP_SYNC(zero)\n    j    reload\n");
    s.push_str(
        "reload:
    lw   sp, SP_SELF(zero)
    lw   t0, 0(sp)
    csrw mepc, t0
    lw   t0, 8(sp)
    csrw mcause, t0
",
    );
    for r in saved_regs() {
        writeln!(s, "    lw   x{r}, {}(sp)", frame_slot(r)).unwrap();
    }
    s.push_str("    sw   zero, SP_SELF(zero)\n    addi sp, sp, FRAME\n    mret\n");
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct MatmulSpec {
    pub m: u32,
    pub n: u32,
    pub k: u32,
}

impl Default for MatmulSpec {
    fn default() -> Self {
        MatmulSpec {
            m: 24,
            n: 24,
            k: 24,
        }
    }
}

impl MatmulSpec {
    /// Multiply-accumulate counts twice.
    pub fn ops(&self) -> u64 {
        2 * self.m as u64 * self.n as u64 * self.k as u64
    }

    /// A rows are padded by one word so concurrent rows start in different banks.
    fn a_stride(&self) -> u32 {
        self.k + 1
    }
}

/// Placement of the benchmark operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MatmulLayout {
    pub a: u32,
    pub b: u32,
    pub c: u32,
    pub spec: MatmulSpec,
}

impl MatmulLayout {
    pub fn new(base: u32, spec: MatmulSpec) -> Self {
        let align = |x: u32| x.div_ceil(0x100) * 0x100;
        let a = base;
        let b = a + align(spec.m * spec.a_stride() * 4);
        let c = b + align(spec.k * spec.n * 4);
        MatmulLayout { a, b, c, spec }
    }

    pub fn end(&self) -> u32 {
        self.c + self.spec.m * self.spec.n * 4
    }

    /// Result region as (address, words).
    pub fn result(&self) -> (u32, usize) {
        (self.c, (self.spec.m * self.spec.n) as usize)
    }
}

/// Operands, placed as (address, words) blocks.
pub struct MatmulData {
    pub layout: MatmulLayout,
    pub a: Vec<i32>,
    pub b: Vec<i32>,
}

impl MatmulData {
    pub fn generate(layout: MatmulLayout, seed: u64) -> Self {
        let s = layout.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (0..s.m * s.k).map(|_| rng.random_range(-8..8)).collect();
        let b = (0..s.k * s.n).map(|_| rng.random_range(-8..8)).collect();
        MatmulData { layout, a, b }
    }

    pub fn blocks(&self) -> Vec<(u32, Vec<u32>)> {
        let s = self.layout.spec;
        let mut out = Vec::new();
        for i in 0..s.m {
            let row = &self.a[(i * s.k) as usize..((i + 1) * s.k) as usize];
            out.push((
                self.layout.a + i * s.a_stride() * 4,
                row.iter().map(|&v| v as u32).collect(),
            ));
        }
        out.push((self.layout.b, self.b.iter().map(|&v| v as u32).collect()));
        out
    }

    /// Reference product with wrapping arithmetic.
    pub fn expected(&self) -> Vec<u32> {
        let s = self.layout.spec;
        let (m, n, k) = (s.m as usize, s.n as usize, s.k as usize);
        let mut c = vec![0u32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0i32;
                for x in 0..k {
                    acc = acc.wrapping_add(self.a[i * k + x].wrapping_mul(self.b[x * n + j]));
                }
                c[i * n + j] = acc as u32;
            }
        }
        c
    }
}

/// Rows are interleaved over `n_virtual` harts; each hart starts its column
/// sweep at its own id so concurrent B accesses fall in different banks.
pub fn matmul_main(layout: &MatmulLayout, n_virtual: usize) -> String {
    let s = layout.spec;
    assert!(
        s.k * 4 < 2048 && s.n * 4 < 2048,
        "matrix too wide for immediate strides"
    );
    let stagger = if n_virtual as u32 <= s.n {
        "mv   s2, a0"
    } else {
        "li   s2, 0"
    };
    format!(
        "main:
    csrr a0, mhartid
    li   s0, {nv}
    mv   s1, a0
mm_row:
    li   t0, {m}
    bge  s1, t0, mm_done
    li   t0, {a_row}
    mul  s8, s1, t0
    li   t0, {a}
    add  s8, s8, t0
    {stagger}
    li   s3, {n}
mm_col:
    mv   s4, s8
    addi s6, s8, {k4}
    slli t0, s2, 2
    li   t1, {b}
    add  s5, t0, t1
    li   s7, 0
mm_k:
    lw   t0, 0(s4)
    lw   t1, 0(s5)
    mul  t0, t0, t1
    add  s7, s7, t0
    addi s4, s4, 4
    addi s5, s5, {n4}
    blt  s4, s6, mm_k
    li   t0, {n4}
    mul  t0, s1, t0
    slli t1, s2, 2
    add  t0, t0, t1
    li   t1, {c}
    add  t0, t0, t1
    sw   s7, 0(t0)
    addi s2, s2, 1
    li   t0, {n}
    blt  s2, t0, mm_nowrap
    li   s2, 0
mm_nowrap:
    addi s3, s3, -1
    bnez s3, mm_col
    add  s1, s1, s0
    j    mm_row
mm_done:
    lw   x0, BARRIER0(zero)
    sw   zero, EOC(zero)
mm_idle:
    j    mm_idle
",
        nv = n_virtual,
        m = s.m,
        n = s.n,
        a_row = s.a_stride() * 4,
        a = layout.a,
        b = layout.b,
        c = layout.c,
        k4 = s.k * 4,
        n4 = s.n * 4,
    )
}
