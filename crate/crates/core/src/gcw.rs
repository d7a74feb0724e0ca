//! Generic Convolutional Weights (GCW) variable-length code.
//!
//! Three code-word classes, chosen canonically (shortest admissible):
//!
//! | class | bits                      | length |
//! |-------|---------------------------|--------|
//! | Zero  | `0`                       | 1      |
//! | Short | `1` + 4-bit field ≠ `0000` | 5      |
//! | Long  | `10000` + N-bit value      | 5 + N  |
//!
//! A Short code carries a value whose N-bit pattern is the sign extension of
//! its low four bits. Streams are packed MSB-first into 32-bit memory words;
//! code-words may straddle word boundaries.

use crate::fxp::{self, sign_extend, BoBits, MulSchedule, WordMode};

/// Number of bits the decoder inspects per code-word.
pub const WINDOW_BITS: u32 = 13;
const LONG_PREFIX: u32 = 0b10000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GcwError {
    #[error("quantization width {0} outside [2, 8]")]
    Width(u32),
    #[error("weight {value} does not fit in {n} bits")]
    Unrepresentable { value: i32, n: u32 },
    #[error("stream ends in the middle of a code-word (weight {index})")]
    Truncated { index: u32 },
    #[error("malformed GCW blob: {0}")]
    Blob(String),
    #[error(transparent)]
    Fxp(#[from] fxp::FxpError),
}

fn check_width(n: u32) -> Result<(), GcwError> {
    if (2..=8).contains(&n) {
        Ok(())
    } else {
        Err(GcwError::Width(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodeKind {
    Zero,
    Short,
    Long,
}

/// A single code-word, right-aligned in `bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GcwCodeword {
    pub kind: CodeKind,
    pub bits: u32,
    pub length: u32,
}

impl GcwCodeword {
    pub fn to_bit_string(&self) -> String {
        (0..self.length)
            .rev()
            .map(|i| if (self.bits >> i) & 1 == 1 { '1' } else { '0' })
            .collect()
    }
}

/// Encode one N-bit two's-complement weight.
pub fn encode_weight(value: i32, n: u32) -> Result<GcwCodeword, GcwError> {
    check_width(n)?;
    let (lo, hi) = (-(1 << (n - 1)), (1 << (n - 1)) - 1);
    if value < lo || value > hi {
        return Err(GcwError::Unrepresentable { value, n });
    }
    Ok(if value == 0 {
        GcwCodeword {
            kind: CodeKind::Zero,
            bits: 0,
            length: 1,
        }
    } else if (-8..=7).contains(&value) {
        GcwCodeword {
            kind: CodeKind::Short,
            bits: 0b10000 | (value as u32 & 0xF),
            length: 5,
        }
    } else {
        GcwCodeword {
            kind: CodeKind::Long,
            bits: (LONG_PREFIX << n) | (value as u32 & ((1 << n) - 1)),
            length: 5 + n,
        }
    })
}

/// Code length in bits for a weight, without building the code-word.
pub fn code_length(value: i32, n: u32) -> u32 {
    match value {
        0 => 1,
        -8..=7 => 5,
        _ => 5 + n,
    }
}

/// A packed GCW bitstream for one filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcwStream {
    pub words: Vec<u32>,
    pub n: u32,
    pub weight_count: u32,
}

impl GcwStream {
    /// Stored size in bits (whole 32-bit words).
    pub fn stored_bits(&self) -> u64 {
        self.words.len() as u64 * 32
    }

    /// Serialized blob: `N:u8, weight_count:u32 LE, word_count:u32 LE, words:u32 LE…`.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 4 * self.words.len());
        out.push(self.n as u8);
        out.extend_from_slice(&self.weight_count.to_le_bytes());
        out.extend_from_slice(&(self.words.len() as u32).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Parse a blob from the front of `bytes`, returning the bytes consumed.
    pub fn from_blob(bytes: &[u8]) -> Result<(Self, usize), GcwError> {
        if bytes.len() < 9 {
            return Err(GcwError::Blob("header shorter than 9 bytes".into()));
        }
        let n = bytes[0] as u32;
        check_width(n)?;
        let weight_count = u32::from_le_bytes(bytes[1..5].try_into().unwrap());
        let word_count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let end = 9 + 4 * word_count;
        if bytes.len() < end {
            return Err(GcwError::Blob(format!(
                "expected {word_count} words, found {} bytes",
                bytes.len() - 9
            )));
        }
        let words = bytes[9..end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((
            GcwStream {
                words,
                n,
                weight_count,
            },
            end,
        ))
    }
}

/// MSB-first packer into 32-bit words.
#[derive(Debug, Default)]
struct BitWriter {
    words: Vec<u32>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn push(&mut self, bits: u32, len: u32) {
        self.acc = (self.acc << len) | bits as u64;
        self.filled += len;
        while self.filled >= 32 {
            self.filled -= 32;
            self.words.push((self.acc >> self.filled) as u32);
        }
        self.acc &= (1u64 << self.filled) - 1;
    }

    fn finish(mut self) -> Vec<u32> {
        if self.filled > 0 {
            self.words.push((self.acc << (32 - self.filled)) as u32);
        }
        self.words
    }
}

pub fn encode_filter(weights: &[i32], n: u32) -> Result<GcwStream, GcwError> {
    check_width(n)?;
    let mut w = BitWriter::default();
    for &v in weights {
        let cw = encode_weight(v, n)?;
        w.push(cw.bits, cw.length);
    }
    Ok(GcwStream {
        words: w.finish(),
        n,
        weight_count: weights.len() as u32,
    })
}

/// Shift-register front end of the decoder.
///
/// Holds the unread head of the stream left-aligned in a 64-bit register and
/// refills one 32-bit word whenever fewer than 13 bits are buffered.
#[derive(Debug, Clone)]
pub struct DecoderState<'a> {
    stream: &'a GcwStream,
    shreg: u64,
    buffered: u32,
    position: usize,
    decoded: u32,
}

impl<'a> DecoderState<'a> {
    pub fn new(stream: &'a GcwStream) -> Self {
        let mut s = DecoderState {
            stream,
            shreg: 0,
            buffered: 0,
            position: 0,
            decoded: 0,
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        while self.buffered < WINDOW_BITS && self.position < self.stream.words.len() {
            let word = self.stream.words[self.position] as u64;
            self.shreg |= word << (32 - self.buffered);
            self.buffered += 32;
            self.position += 1;
        }
    }

    /// The `GCW<12:0>` view; bits past the end of the stream read as zero.
    pub fn window(&self) -> u32 {
        (self.shreg >> (64 - WINDOW_BITS)) as u32
    }

    pub fn buffered(&self) -> u32 {
        self.buffered
    }

    pub fn remaining(&self) -> u64 {
        self.buffered as u64 + 32 * (self.stream.words.len() - self.position) as u64
    }

    /// Index of the next memory word to load.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn is_done(&self) -> bool {
        self.decoded >= self.stream.weight_count
    }

    /// Decode one weight, returning it with the number of bits consumed.
    pub fn decode_next(&mut self) -> Result<(i32, u32), GcwError> {
        let n = self.stream.n;
        let index = self.decoded;
        let truncated = GcwError::Truncated { index };
        if self.buffered == 0 {
            return Err(truncated);
        }
        let win = self.window();
        // sel<0> = GCW<12>, sel<1> = NOR(GCW<11:8>)
        let sel0 = (win >> 12) & 1 == 1;
        let field = (win >> 8) & 0xF;
        let (value, consumed) = if !sel0 {
            (0, 1)
        } else if field != 0 {
            (sign_extend(field, 4), 5)
        } else {
            let raw = (win >> (8 - n)) & ((1 << n) - 1);
            (sign_extend(raw, n), 5 + n)
        };
        if consumed > self.buffered {
            return Err(truncated);
        }
        self.shreg <<= consumed;
        self.buffered -= consumed;
        self.decoded += 1;
        self.refill();
        Ok((value, consumed))
    }
}

pub fn decode_all(stream: &GcwStream) -> Result<Vec<i32>, GcwError> {
    let mut st = DecoderState::new(stream);
    let mut out = Vec::with_capacity(stream.weight_count as usize);
    while !st.is_done() {
        out.push(st.decode_next()?.0);
    }
    Ok(out)
}

/// Final pipeline stage: turn each decoded weight into its shift-add schedule.
pub fn weights_to_instructions(
    stream: &GcwStream,
    nes: u32,
    word_mode: WordMode,
) -> Result<Vec<MulSchedule>, GcwError> {
    let mut st = DecoderState::new(stream);
    let mut out = Vec::with_capacity(stream.weight_count as usize);
    while !st.is_done() {
        let (w, _) = st.decode_next()?;
        let bo = BoBits::from_raw(w, stream.n)?;
        out.push(fxp::schedule_multiply(bo, nes)?.in_mode(word_mode));
    }
    Ok(out)
}
