//! Two-pass assembler for the core's instruction subset.
//!
//! One instruction per line. Supports labels, `.equ`, `.org`, `.word`,
//! `%hi()`/`%lo()` relocations and the usual pseudo-instructions
//! (`li`, `la`, `mv`, `j`, `jr`, `call`, `ret`, `nop`, `beqz`, `bnez`,
//! `csrr`, `csrw`).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cpu::{CSR_MCAUSE, CSR_MEPC, CSR_MHARTID, CSR_MSTATUS, CSR_MTVEC};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct AsmError {
    pub line: usize,
    pub msg: String,
}

/// An assembled image: a contiguous block of words starting at `base`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    base: u32,
    words: Vec<u32>,
    symbols: BTreeMap<String, u32>,
}

impl Program {
    pub fn from_words(base: u32, words: Vec<u32>) -> Self {
        Program {
            base,
            words,
            symbols: BTreeMap::new(),
        }
    }

    /// Loads a flat little-endian binary.
    pub fn from_binary(base: u32, bytes: &[u8]) -> Self {
        let words = bytes
            .chunks(4)
            .map(|c| {
                let mut b = [0u8; 4];
                b[..c.len()].copy_from_slice(c);
                u32::from_le_bytes(b)
            })
            .collect();
        Program::from_words(base, words)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    pub fn symbols(&self) -> &BTreeMap<String, u32> {
        &self.symbols
    }

    #[inline]
    pub fn word_at(&self, addr: u32) -> Option<u32> {
        let off = addr.checked_sub(self.base)?;
        if off % 4 != 0 {
            return None;
        }
        self.words.get((off / 4) as usize).copied()
    }
}

#[derive(Clone, Debug)]
enum Item<'a> {
    Instr {
        line: usize,
        addr: u32,
        mnemonic: &'a str,
        args: Vec<&'a str>,
        size: u32,
    },
    Word {
        line: usize,
        addr: u32,
        expr: &'a str,
    },
}

/// Assembles `src` into a program located at `base`.
pub fn assemble(src: &str, base: u32) -> Result<Program, AsmError> {
    let mut symbols: BTreeMap<String, u32> = BTreeMap::new();
    let mut items = Vec::new();
    let mut addr = base;

    for (n, raw) in src.lines().enumerate() {
        let line = n + 1;
        let mut text = raw;
        if let Some(i) = text.find(['#', ';']) {
            text = &text[..i];
        }
        let mut text = text.trim();
        while let Some(colon) = label_end(text) {
            let name = text[..colon].trim();
            if symbols.insert(name.to_string(), addr).is_some() {
                return Err(err(line, format!("duplicate symbol `{name}`")));
            }
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (mnemonic, rest) = match text.find(char::is_whitespace) {
            Some(i) => (&text[..i], text[i..].trim()),
            None => (text, ""),
        };
        let args: Vec<&str> = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(str::trim).collect()
        };
        match mnemonic {
            ".equ" | ".set" => {
                expect_args(line, &args, 2)?;
                let v = eval(args[1], &symbols).map_err(|m| err(line, m))?;
                symbols.insert(args[0].to_string(), v);
            }
            ".org" => {
                expect_args(line, &args, 1)?;
                let target = eval(args[0], &symbols).map_err(|m| err(line, m))?;
                if target < addr || target % 4 != 0 {
                    return Err(err(
                        line,
                        format!(".org {target:#x} moves backwards or is misaligned"),
                    ));
                }
                addr = target;
            }
            ".word" => {
                for a in args {
                    items.push(Item::Word {
                        line,
                        addr,
                        expr: a,
                    });
                    addr += 4;
                }
            }
            _ => {
                let size = instr_size(mnemonic, &args, &symbols);
                items.push(Item::Instr {
                    line,
                    addr,
                    mnemonic,
                    args,
                    size,
                });
                addr += 4 * size;
            }
        }
    }

    let mut words = vec![0u32; ((addr - base) / 4) as usize];
    for item in &items {
        match item {
            Item::Word { line, addr, expr } => {
                let v = eval(expr, &symbols).map_err(|m| err(*line, m))?;
                words[((addr - base) / 4) as usize] = v;
            }
            Item::Instr {
                line,
                addr,
                mnemonic,
                args,
                size,
            } => {
                let enc = encode(mnemonic, args, *addr, &symbols).map_err(|m| err(*line, m))?;
                if enc.len() as u32 != *size {
                    return Err(err(*line, "instruction size changed between passes".into()));
                }
                let at = ((addr - base) / 4) as usize;
                words[at..at + enc.len()].copy_from_slice(&enc);
            }
        }
    }
    Ok(Program {
        base,
        words,
        symbols,
    })
}

fn label_end(text: &str) -> Option<usize> {
    let i = text.find(':')?;
    let name = text[..i].trim();
    (!name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.'))
    .then_some(i)
}

fn err(line: usize, msg: String) -> AsmError {
    AsmError { line, msg }
}

fn expect_args(line: usize, args: &[&str], n: usize) -> Result<(), AsmError> {
    if args.len() != n {
        Err(err(
            line,
            format!("expected {n} operands, got {}", args.len()),
        ))
    } else {
        Ok(())
    }
}

fn fits_i12(v: i64) -> bool {
    (-2048..2048).contains(&v)
}

fn instr_size(mnemonic: &str, args: &[&str], symbols: &BTreeMap<String, u32>) -> u32 {
    match mnemonic {
        "la" => 2,
        "li" => match args.get(1).map(|a| eval(a, symbols)) {
            Some(Ok(v)) if fits_i12(v as i32 as i64) => 1,
            _ => 2,
        },
        _ => 1,
    }
}

fn hi_lo(v: u32) -> (u32, i32) {
    let lo = ((v & 0xFFF) as i32) << 20 >> 20;
    let hi = v.wrapping_sub(lo as u32) & 0xFFFF_F000;
    (hi, lo)
}

/// Evaluates `term (('+'|'-') term)*` where a term is a number, symbol,
/// `%hi(expr)` or `%lo(expr)`, optionally multiplied (`a*b`).
fn eval(expr: &str, symbols: &BTreeMap<String, u32>) -> Result<u32, String> {
    let expr = expr.trim();
    if expr.is_empty() {
        return Err("empty expression".into());
    }
    let mut total: u32 = 0;
    let mut sign_plus = true;
    let mut start = 0;
    let bytes = expr.as_bytes();
    let mut depth = 0;
    let mut i = 0;
    let mut terms = Vec::new();
    while i < bytes.len() {
        match bytes[i] {
            b'(' => depth += 1,
            b')' => depth -= 1,
            b'+' | b'-' if depth == 0 && i > start => {
                terms.push((sign_plus, &expr[start..i]));
                sign_plus = bytes[i] == b'+';
                start = i + 1;
            }
            b'-' if depth == 0 && i == start => {
                sign_plus = !sign_plus;
                start = i + 1;
            }
            _ => {}
        }
        i += 1;
    }
    terms.push((sign_plus, &expr[start..]));
    for (plus, t) in terms {
        let mut product: u32 = 1;
        for factor in t.split('*') {
            product = product.wrapping_mul(eval_term(factor.trim(), symbols)?);
        }
        total = if plus {
            total.wrapping_add(product)
        } else {
            total.wrapping_sub(product)
        };
    }
    Ok(total)
}

fn eval_term(t: &str, symbols: &BTreeMap<String, u32>) -> Result<u32, String> {
    if let Some(inner) = t.strip_prefix("%hi(").and_then(|s| s.strip_suffix(')')) {
        return Ok(hi_lo(eval(inner, symbols)?).0 >> 12);
    }
    if let Some(inner) = t.strip_prefix("%lo(").and_then(|s| s.strip_suffix(')')) {
        return Ok(hi_lo(eval(inner, symbols)?).1 as u32);
    }
    if let Some(inner) = t.strip_prefix('(').and_then(|s| s.strip_suffix(')')) {
        return eval(inner, symbols);
    }
    if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        return u32::from_str_radix(&hex.replace('_', ""), 16).map_err(|e| format!("`{t}`: {e}"));
    }
    if t.chars().next().is_some_and(|c| c.is_ascii_digit()) {
        return t
            .parse::<i64>()
            .map(|v| v as u32)
            .map_err(|e| format!("`{t}`: {e}"));
    }
    symbols
        .get(t)
        .copied()
        .ok_or_else(|| format!("undefined symbol `{t}`"))
}

pub fn reg_index(name: &str) -> Option<u8> {
    let abi = [
        "zero", "ra", "sp", "gp", "tp", "t0", "t1", "t2", "s0", "s1", "a0", "a1", "a2", "a3", "a4",
        "a5", "a6", "a7", "s2", "s3", "s4", "s5", "s6", "s7", "s8", "s9", "s10", "s11", "t3", "t4",
        "t5", "t6",
    ];
    if let Some(n) = name.strip_prefix('x').and_then(|n| n.parse::<u8>().ok()) {
        return (n < 32).then_some(n);
    }
    if name == "fp" {
        return Some(8);
    }
    abi.iter().position(|a| *a == name).map(|i| i as u8)
}

fn reg(name: &str) -> Result<u32, String> {
    reg_index(name)
        .map(u32::from)
        .ok_or_else(|| format!("unknown register `{name}`"))
}

fn csr_addr(name: &str, symbols: &BTreeMap<String, u32>) -> Result<u32, String> {
    Ok(match name {
        "mstatus" => CSR_MSTATUS as u32,
        "mtvec" => CSR_MTVEC as u32,
        "mepc" => CSR_MEPC as u32,
        "mcause" => CSR_MCAUSE as u32,
        "mhartid" => CSR_MHARTID as u32,
        other => eval(other, symbols)? & 0xFFF,
    })
}

/// Splits `off(reg)`.
fn mem_operand(arg: &str) -> Result<(&str, &str), String> {
    let open = arg
        .rfind('(')
        .ok_or_else(|| format!("expected off(reg), got `{arg}`"))?;
    let close = arg
        .rfind(')')
        .ok_or_else(|| format!("expected off(reg), got `{arg}`"))?;
    let off = arg[..open].trim();
    Ok((
        if off.is_empty() { "0" } else { off },
        arg[open + 1..close].trim(),
    ))
}

fn imm12(v: u32) -> Result<u32, String> {
    let s = v as i32;
    if fits_i12(s as i64) {
        Ok(v & 0xFFF)
    } else {
        Err(format!("immediate {s} does not fit in 12 bits"))
    }
}

fn enc_i(opcode: u32, f3: u32, rd: u32, rs1: u32, imm: u32) -> u32 {
    (imm << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | opcode
}

fn enc_r(f7: u32, f3: u32, rd: u32, rs1: u32, rs2: u32) -> u32 {
    (f7 << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | 0x33
}

fn enc_s(rs1: u32, rs2: u32, imm: u32) -> u32 {
    ((imm >> 5) << 25) | (rs2 << 20) | (rs1 << 15) | (2 << 12) | ((imm & 31) << 7) | 0x23
}

fn enc_b(f3: u32, rs1: u32, rs2: u32, off: i32) -> Result<u32, String> {
    if off % 2 != 0 || !(-4096..4096).contains(&off) {
        return Err(format!("branch offset {off} out of range"));
    }
    let o = off as u32;
    Ok((((o >> 12) & 1) << 31)
        | (((o >> 5) & 0x3F) << 25)
        | (rs2 << 20)
        | (rs1 << 15)
        | (f3 << 12)
        | (((o >> 1) & 0xF) << 8)
        | (((o >> 11) & 1) << 7)
        | 0x63)
}

fn enc_j(rd: u32, off: i32) -> Result<u32, String> {
    if off % 2 != 0 || !(-(1 << 20)..(1 << 20)).contains(&off) {
        return Err(format!("jump offset {off} out of range"));
    }
    let o = off as u32;
    Ok((((o >> 20) & 1) << 31)
        | (((o >> 1) & 0x3FF) << 21)
        | (((o >> 11) & 1) << 20)
        | (((o >> 12) & 0xFF) << 12)
        | (rd << 7)
        | 0x6F)
}

fn encode(
    mnemonic: &str,
    args: &[&str],
    pc: u32,
    symbols: &BTreeMap<String, u32>,
) -> Result<Vec<u32>, String> {
    let n = |k: usize| -> Result<(), String> {
        if args.len() == k {
            Ok(())
        } else {
            Err(format!(
                "`{mnemonic}` expects {k} operands, got {}",
                args.len()
            ))
        }
    };
    let ev = |s: &str| eval(s, symbols);
    let target = |s: &str| -> Result<i32, String> { Ok(ev(s)?.wrapping_sub(pc) as i32) };

    let alu_imm = |f3: u32| -> Result<Vec<u32>, String> {
        n(3)?;
        Ok(vec![enc_i(
            0x13,
            f3,
            reg(args[0])?,
            reg(args[1])?,
            imm12(ev(args[2])?)?,
        )])
    };
    let shift_imm = |f3: u32, f7: u32| -> Result<Vec<u32>, String> {
        n(3)?;
        let sh = ev(args[2])?;
        if sh > 31 {
            return Err(format!("shift amount {sh} out of range"));
        }
        Ok(vec![enc_i(
            0x13,
            f3,
            reg(args[0])?,
            reg(args[1])?,
            (f7 << 5) | sh,
        )])
    };
    let alu_reg = |f7: u32, f3: u32| -> Result<Vec<u32>, String> {
        n(3)?;
        Ok(vec![enc_r(
            f7,
            f3,
            reg(args[0])?,
            reg(args[1])?,
            reg(args[2])?,
        )])
    };
    let branch = |f3: u32, swap: bool| -> Result<Vec<u32>, String> {
        n(3)?;
        let (a, b) = if swap {
            (args[1], args[0])
        } else {
            (args[0], args[1])
        };
        Ok(vec![enc_b(f3, reg(a)?, reg(b)?, target(args[2])?)?])
    };
    let csr = |f3: u32, rd: &str, c: &str, rs: &str| -> Result<Vec<u32>, String> {
        Ok(vec![enc_i(
            0x73,
            f3,
            reg(rd)?,
            reg(rs)?,
            csr_addr(c, symbols)?,
        )])
    };

    match mnemonic {
        "lui" | "auipc" => {
            n(2)?;
            let opc = if mnemonic == "lui" { 0x37 } else { 0x17 };
            let v = ev(args[1])?;
            if v > 0xFFFFF {
                return Err(format!("upper immediate {v:#x} exceeds 20 bits"));
            }
            Ok(vec![(v << 12) | (reg(args[0])? << 7) | opc])
        }
        "jal" => match args.len() {
            1 => Ok(vec![enc_j(1, target(args[0])?)?]),
            2 => Ok(vec![enc_j(reg(args[0])?, target(args[1])?)?]),
            _ => Err("`jal` expects 1 or 2 operands".into()),
        },
        "jalr" => {
            if args.len() == 2 && args[1].contains('(') {
                let (off, base) = mem_operand(args[1])?;
                Ok(vec![enc_i(
                    0x67,
                    0,
                    reg(args[0])?,
                    reg(base)?,
                    imm12(ev(off)?)?,
                )])
            } else {
                n(3)?;
                Ok(vec![enc_i(
                    0x67,
                    0,
                    reg(args[0])?,
                    reg(args[1])?,
                    imm12(ev(args[2])?)?,
                )])
            }
        }
        "beq" => branch(0, false),
        "bne" => branch(1, false),
        "blt" => branch(4, false),
        "bge" => branch(5, false),
        "bltu" => branch(6, false),
        "bgeu" => branch(7, false),
        "bgt" => branch(4, true),
        "ble" => branch(5, true),
        "beqz" | "bnez" => {
            n(2)?;
            let f3 = if mnemonic == "beqz" { 0 } else { 1 };
            Ok(vec![enc_b(f3, reg(args[0])?, 0, target(args[1])?)?])
        }
        "lw" => {
            n(2)?;
            let (off, base) = mem_operand(args[1])?;
            Ok(vec![enc_i(
                0x03,
                2,
                reg(args[0])?,
                reg(base)?,
                imm12(ev(off)?)?,
            )])
        }
        "sw" => {
            n(2)?;
            let (off, base) = mem_operand(args[1])?;
            Ok(vec![enc_s(reg(base)?, reg(args[0])?, imm12(ev(off)?)?)])
        }
        "addi" => alu_imm(0),
        "slti" => alu_imm(2),
        "sltiu" => alu_imm(3),
        "xori" => alu_imm(4),
        "ori" => alu_imm(6),
        "andi" => alu_imm(7),
        "slli" => shift_imm(1, 0),
        "srli" => shift_imm(5, 0),
        "srai" => shift_imm(5, 0x20),
        "add" => alu_reg(0, 0),
        "sub" => alu_reg(0x20, 0),
        "sll" => alu_reg(0, 1),
        "slt" => alu_reg(0, 2),
        "sltu" => alu_reg(0, 3),
        "xor" => alu_reg(0, 4),
        "srl" => alu_reg(0, 5),
        "sra" => alu_reg(0x20, 5),
        "or" => alu_reg(0, 6),
        "and" => alu_reg(0, 7),
        "mul" => alu_reg(1, 0),
        "csrrw" => {
            n(3)?;
            csr(1, args[0], args[1], args[2])
        }
        "csrrs" => {
            n(3)?;
            csr(2, args[0], args[1], args[2])
        }
        "csrr" => {
            n(2)?;
            csr(2, args[0], args[1], "x0")
        }
        "csrw" => {
            n(2)?;
            csr(1, "x0", args[0], args[1])
        }
        "mret" => {
            n(0)?;
            Ok(vec![0x3020_0073])
        }
        "nop" => {
            n(0)?;
            Ok(vec![enc_i(0x13, 0, 0, 0, 0)])
        }
        "mv" => {
            n(2)?;
            Ok(vec![enc_i(0x13, 0, reg(args[0])?, reg(args[1])?, 0)])
        }
        "j" => {
            n(1)?;
            Ok(vec![enc_j(0, target(args[0])?)?])
        }
        "jr" => {
            n(1)?;
            Ok(vec![enc_i(0x67, 0, 0, reg(args[0])?, 0)])
        }
        "call" => {
            n(1)?;
            Ok(vec![enc_j(1, target(args[0])?)?])
        }
        "ret" => {
            n(0)?;
            Ok(vec![enc_i(0x67, 0, 0, 1, 0)])
        }
        "li" | "la" => {
            n(2)?;
            let rd = reg(args[0])?;
            let v = ev(args[1])?;
            if mnemonic == "li" && fits_i12(v as i32 as i64) && instr_size("li", args, symbols) == 1
            {
                return Ok(vec![enc_i(0x13, 0, rd, 0, v & 0xFFF)]);
            }
            let (hi, lo) = hi_lo(v);
            Ok(vec![
                hi | (rd << 7) | 0x37,
                enc_i(0x13, 0, rd, rd, (lo as u32) & 0xFFF),
            ])
        }
        other => Err(format!("unknown mnemonic `{other}`")),
    }
}
