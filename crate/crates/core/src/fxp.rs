//! Q1.n two's-complement fixed point and the lowering of a multiplication
//! into bit-line shift-add instructions.
//!
//! A multiplication `IMO × BO` is executed by scanning the broadcast operand
//! (BO) least-significant bit first. Every fractional bit costs one
//! instruction `ACC ← (ACC >> 1) + (bit ? IMO >> 1 : 0)` and the sign bit, when
//! set, costs `ACC ← ACC + (−IMO)`. With more than one embedded shift per
//! read port (NES > 1) runs of zero bits are folded into a single
//! instruction.

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FxpError {
    #[error("value {0} is outside the representable range [-1, 1)")]
    Range(f64),
    #[error("unsupported bit width {0}")]
    Format(u32),
    #[error("embedded shift count must be at least 1")]
    Nes,
}

/// Signed fixed-point format with one integer bit: Q1.(total_bits − 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QFormat {
    total_bits: u8,
}

impl QFormat {
    pub const Q1_15: QFormat = QFormat { total_bits: 16 };
    pub const Q1_7: QFormat = QFormat { total_bits: 8 };

    pub fn new(total_bits: u32) -> Result<Self, FxpError> {
        if !(2..=16).contains(&total_bits) {
            return Err(FxpError::Format(total_bits));
        }
        Ok(QFormat {
            total_bits: total_bits as u8,
        })
    }

    #[inline]
    pub fn total_bits(self) -> u32 {
        self.total_bits as u32
    }

    #[inline]
    pub fn frac_bits(self) -> u32 {
        self.total_bits as u32 - 1
    }

    #[inline]
    pub fn min_raw(self) -> i32 {
        -(1 << self.frac_bits())
    }

    #[inline]
    pub fn max_raw(self) -> i32 {
        (1 << self.frac_bits()) - 1
    }

    #[inline]
    pub fn mask(self) -> u32 {
        (1u32 << self.total_bits) - 1
    }

    /// Value of one least-significant bit.
    pub fn lsb(self) -> f64 {
        (-(self.frac_bits() as f64)).exp2()
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q1.{}", self.frac_bits())
    }
}

/// Quantize `value` to the nearest representable Q1.n integer, ties to even.
///
/// A value that rounds up to +1.0 saturates to the largest positive code.
pub fn to_fixed(value: f64, fmt: QFormat) -> Result<i32, FxpError> {
    if !(-1.0..1.0).contains(&value) {
        return Err(FxpError::Range(value));
    }
    let scaled = (value * (fmt.frac_bits() as f64).exp2()).round_ties_even();
    Ok((scaled as i32).clamp(fmt.min_raw(), fmt.max_raw()))
}

pub fn from_fixed(raw: i32, fmt: QFormat) -> f64 {
    raw as f64 * fmt.lsb()
}

/// Two's-complement bit pattern of `raw` in `fmt`.
pub fn to_pattern(raw: i32, fmt: QFormat) -> u32 {
    raw as u32 & fmt.mask()
}

/// Interpret the low `bits` of `pattern` as a two's-complement integer.
#[inline]
pub fn sign_extend(pattern: u32, bits: u32) -> i32 {
    debug_assert!((1..=32).contains(&bits));
    let shift = 32 - bits;
    ((pattern << shift) as i32) >> shift
}

/// Re-quantize a raw value from one format to another, rounding to nearest
/// even when bits are discarded and saturating at the positive end.
pub fn requantize(raw: i32, from: QFormat, to: QFormat) -> i32 {
    let (fb, tb) = (from.frac_bits() as i32, to.frac_bits() as i32);
    if tb >= fb {
        return raw << (tb - fb);
    }
    let d = (fb - tb) as u32;
    let floor = raw >> d;
    let rem = raw - (floor << d);
    let half = 1 << (d - 1);
    let rounded = if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    };
    rounded.clamp(to.min_raw(), to.max_raw())
}

/// Storage word layout: one Q1.15 value, or two independent Q1.7 values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum WordMode {
    #[default]
    #[serde(rename = "1x16")]
    OneX16,
    #[serde(rename = "2x8")]
    TwoX8,
}

impl WordMode {
    pub fn lanes(self) -> usize {
        match self {
            WordMode::OneX16 => 1,
            WordMode::TwoX8 => 2,
        }
    }

    pub fn lane_bits(self) -> u32 {
        match self {
            WordMode::OneX16 => 16,
            WordMode::TwoX8 => 8,
        }
    }

    pub fn format(self) -> QFormat {
        match self {
            WordMode::OneX16 => QFormat::Q1_15,
            WordMode::TwoX8 => QFormat::Q1_7,
        }
    }
}

impl fmt::Display for WordMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WordMode::OneX16 => "1x16",
            WordMode::TwoX8 => "2x8",
        })
    }
}

impl std::str::FromStr for WordMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1x16" => Ok(WordMode::OneX16),
            "2x8" => Ok(WordMode::TwoX8),
            other => Err(format!("unknown word mode '{other}'")),
        }
    }
}

/// A 16-bit storage word together with its interpretation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FxWord {
    pub bits: u16,
    pub mode: WordMode,
}

impl FxWord {
    pub const fn new(bits: u16, mode: WordMode) -> Self {
        FxWord { bits, mode }
    }

    pub fn zero(mode: WordMode) -> Self {
        FxWord { bits: 0, mode }
    }

    /// Build a word from signed lane values (lane 0 occupies the low bits).
    pub fn from_lanes(lanes: &[i32], mode: WordMode) -> Self {
        let lb = mode.lane_bits();
        let mask = (1u32 << lb) - 1;
        let mut bits = 0u32;
        for (i, &v) in lanes.iter().take(mode.lanes()).enumerate() {
            bits |= (v as u32 & mask) << (i as u32 * lb);
        }
        FxWord {
            bits: bits as u16,
            mode,
        }
    }

    pub fn lane(self, i: usize) -> i32 {
        let lb = self.mode.lane_bits();
        sign_extend((self.bits as u32) >> (i as u32 * lb), lb)
    }

    pub fn lanes(self) -> Vec<i32> {
        (0..self.mode.lanes()).map(|i| self.lane(i)).collect()
    }

    pub fn with_mode(self, mode: WordMode) -> Self {
        FxWord {
            bits: self.bits,
            mode,
        }
    }
}

fn map_lanes(word: FxWord, f: impl Fn(i32, u32) -> i32) -> FxWord {
    let lb = word.mode.lane_bits();
    let lanes: Vec<i32> = word.lanes().into_iter().map(|v| f(v, lb)).collect();
    FxWord::from_lanes(&lanes, word.mode)
}

/// Arithmetic right shift; each lane shifts with its own sign extension.
pub fn arith_rshift(word: FxWord, j: u32) -> FxWord {
    if j == 0 {
        return word;
    }
    map_lanes(word, |v, lb| v >> j.min(lb - 1))
}

/// Two's-complement negation per lane (wrapping: −(−1) = −1).
pub fn negate(word: FxWord) -> FxWord {
    map_lanes(word, |v, _| v.wrapping_neg())
}

/// Lane-wise addition modulo 2^lane_bits; no carry crosses a lane boundary.
pub fn wrapping_add(a: FxWord, b: FxWord) -> FxWord {
    debug_assert_eq!(a.mode, b.mode);
    let lanes: Vec<i32> = a
        .lanes()
        .into_iter()
        .zip(b.lanes())
        .map(|(x, y)| x + y)
        .collect();
    FxWord::from_lanes(&lanes, a.mode)
}

/// The bits of a broadcast operand, index 0 least significant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoBits {
    pattern: u8,
    len: u8,
}

impl BoBits {
    pub fn new(pattern: u32, len: u32) -> Result<Self, FxpError> {
        if !(2..=8).contains(&len) {
            return Err(FxpError::Format(len));
        }
        Ok(BoBits {
            pattern: (pattern & ((1 << len) - 1)) as u8,
            len: len as u8,
        })
    }

    /// From a signed integer that must fit in `len` bits.
    pub fn from_raw(raw: i32, len: u32) -> Result<Self, FxpError> {
        let fmt = QFormat::new(len)?;
        if raw < fmt.min_raw() || raw > fmt.max_raw() {
            return Err(FxpError::Range(from_fixed(raw, fmt)));
        }
        Self::new(raw as u32, len)
    }

    pub fn len(self) -> u32 {
        self.len as u32
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn pattern(self) -> u32 {
        self.pattern as u32
    }

    pub fn bit(self, i: u32) -> bool {
        (self.pattern >> i) & 1 == 1
    }

    pub fn is_zero(self) -> bool {
        self.pattern == 0
    }

    pub fn raw(self) -> i32 {
        sign_extend(self.pattern as u32, self.len as u32)
    }

    pub fn format(self) -> QFormat {
        QFormat {
            total_bits: self.len,
        }
    }
}

/// One broadcastable instruction: `dest ← (ACC >>ₐ acc_shift) + [±(IMO >>ₐ imo_shift)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BCInstr {
    pub acc_shift: u8,
    pub imo_shift: u8,
    pub add_imo: bool,
    pub negate_imo: bool,
    pub write_back: bool,
    pub word_mode: WordMode,
}

impl BCInstr {
    /// `dest ← ACC`, used to copy or clear words.
    pub fn copy(word_mode: WordMode) -> Self {
        BCInstr {
            acc_shift: 0,
            imo_shift: 0,
            add_imo: false,
            negate_imo: false,
            write_back: true,
            word_mode,
        }
    }

    /// `dest ← ACC + IMO`, unshifted.
    pub fn add(word_mode: WordMode) -> Self {
        BCInstr {
            add_imo: true,
            ..Self::copy(word_mode)
        }
    }

    /// Single-step evaluation on pure values.
    pub fn eval(&self, acc: FxWord, imo: FxWord) -> FxWord {
        let acc = arith_rshift(acc.with_mode(self.word_mode), self.acc_shift as u32);
        if !self.add_imo {
            return acc;
        }
        let mut op = arith_rshift(imo.with_mode(self.word_mode), self.imo_shift as u32);
        if self.negate_imo {
            op = negate(op);
        }
        wrapping_add(acc, op)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MulSchedule {
    pub instrs: Vec<BCInstr>,
    pub cycle_count: u64,
    pub skipped: bool,
}

impl MulSchedule {
    pub fn skipped() -> Self {
        MulSchedule {
            instrs: Vec::new(),
            cycle_count: 0,
            skipped: true,
        }
    }

    pub fn in_mode(mut self, mode: WordMode) -> Self {
        for i in &mut self.instrs {
            i.word_mode = mode;
        }
        self
    }

    pub fn total_acc_shift(&self) -> u32 {
        self.instrs.iter().map(|i| i.acc_shift as u32).sum()
    }
}

/// Lower `IMO × bo` into shift-add instructions, grouping zero runs greedily
/// (least-significant bit first) into instructions of at most `nes` shifts.
pub fn schedule_multiply(bo: BoBits, nes: u32) -> Result<MulSchedule, FxpError> {
    if nes == 0 {
        return Err(FxpError::Nes);
    }
    if bo.is_zero() {
        return Ok(MulSchedule::skipped());
    }
    let sign_pos = bo.len() - 1;
    let mut instrs = Vec::new();
    let shift_only = |z: u32| BCInstr {
        acc_shift: z as u8,
        imo_shift: 0,
        add_imo: false,
        negate_imo: false,
        write_back: true,
        word_mode: WordMode::OneX16,
    };

    let mut i = 0;
    while i < sign_pos {
        let run = (i..sign_pos).take_while(|&k| !bo.bit(k)).count() as u32;
        if i + run < sign_pos && run < nes {
            // run of zeros closed by an active fractional bit
            instrs.push(BCInstr {
                acc_shift: (run + 1) as u8,
                imo_shift: 1,
                add_imo: true,
                ..shift_only(0)
            });
            i += run + 1;
        } else if i + run == sign_pos && bo.bit(sign_pos) && run < nes {
            // trailing zeros plus the sign bit form one group of ≤ nes bits
            instrs.push(BCInstr {
                acc_shift: run as u8,
                add_imo: true,
                negate_imo: true,
                ..shift_only(0)
            });
            i = sign_pos + 1;
        } else if i + run == sign_pos && !bo.bit(sign_pos) && run <= nes {
            instrs.push(shift_only(run));
            i = sign_pos + 1;
        } else {
            instrs.push(shift_only(nes));
            i += nes;
        }
    }
    if i == sign_pos && bo.bit(sign_pos) {
        instrs.push(BCInstr {
            add_imo: true,
            negate_imo: true,
            ..shift_only(0)
        });
    }
    let cycle_count = instrs.len() as u64;
    Ok(MulSchedule {
        instrs,
        cycle_count,
        skipped: false,
    })
}

/// Run a schedule against a zero-initialized accumulator.
pub fn exec_schedule(imo: FxWord, sched: &MulSchedule) -> FxWord {
    sched
        .instrs
        .iter()
        .fold(FxWord::zero(imo.mode), |acc, instr| instr.eval(acc, imo))
}

/// Truncating product of a single IMO value in `mode` and a broadcast operand.
pub fn truncating_product(imo_raw: i32, mode: WordMode, bo: BoBits) -> i32 {
    let sched = schedule_multiply(bo, 1).expect("nes = 1 is valid");
    exec_schedule(FxWord::from_lanes(&[imo_raw], mode), &sched.in_mode(mode)).lane(0)
}
