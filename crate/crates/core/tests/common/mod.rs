//! Independent oracles shared by the integration tests. None of these call
//! into the scheduling or execution code they are used to check.
#![allow(dead_code)]

use num_rational::Ratio;

/// Exact value of `imo × bo` where both are two's-complement integers with
/// `imo_bits` and `bo_bits` total bits (one integer bit each).
pub fn exact_product_oracle(imo: i64, imo_bits: u32, bo: i64, bo_bits: u32) -> Ratio<i64> {
    Ratio::new(imo * bo, 1i64 << (imo_bits - 1 + bo_bits - 1))
}

fn wrap(v: i64, bits: u32) -> i64 {
    let m = 1i64 << bits;
    let r = v.rem_euclid(m);
    if r >= m / 2 {
        r - m
    } else {
        r
    }
}

/// Bit-serial truncating multiply, one BO bit per step, LSB first:
/// `ACC ← ⌊ACC/2⌋ + b·⌊IMO/2⌋` for fractional bits, then `ACC − b·IMO` for
/// the sign bit, wrapping in `word_bits`.
pub fn truncating_oracle(imo: i64, word_bits: u32, bo_pattern: u32, bo_bits: u32) -> i64 {
    let mut acc = 0i64;
    for k in 0..bo_bits - 1 {
        let b = (bo_pattern >> k) & 1 == 1;
        acc = acc.div_euclid(2) + if b { imo.div_euclid(2) } else { 0 };
    }
    if (bo_pattern >> (bo_bits - 1)) & 1 == 1 {
        acc -= imo;
    }
    wrap(acc, word_bits)
}

/// Instruction count for a BO bit pattern under greedy NES grouping:
/// zero costs nothing; an active fractional bit that closes a gap of `g`
/// bits (itself included) costs ⌈g/nes⌉; `r` trailing zeros cost ⌈(r+1)/nes⌉
/// before a set sign bit and ⌈r/nes⌉ before a clear one.
pub fn nes_group_oracle(bo_pattern: u32, bo_bits: u32, nes: u32) -> u64 {
    let pattern = bo_pattern & ((1 << bo_bits) - 1);
    if pattern == 0 {
        return 0;
    }
    let mut cost = 0u64;
    let mut gap = 0u32;
    for k in 0..bo_bits - 1 {
        gap += 1;
        if (pattern >> k) & 1 == 1 {
            cost += gap.div_ceil(nes) as u64;
            gap = 0;
        }
    }
    let sign = (pattern >> (bo_bits - 1)) & 1 == 1;
    cost + if sign {
        (gap + 1).div_ceil(nes)
    } else {
        gap.div_ceil(nes)
    } as u64
}

/// Two's-complement field of `len` bits.
pub fn sext(pattern: u32, len: u32) -> i64 {
    let p = (pattern & ((1 << len) - 1)) as i64;
    if p >= 1 << (len - 1) {
        p - (1 << len)
    } else {
        p
    }
}

use bitline::fxp::WordMode;
use bitline::netmodel::{synth, ConvGeom, Layer};
use rand::Rng;

/// Random CONV or FC layer with all dimensions ≤ 8 and BO width ≤ 8.
pub fn random_small_layer<R: Rng>(r: &mut R) -> (Layer, [usize; 3]) {
    let mode = if r.gen_bool(0.5) {
        WordMode::OneX16
    } else {
        WordMode::TwoX8
    };
    let bits = r.gen_range(2..=8);
    if r.gen_bool(0.6) {
        let k_h = r.gen_range(1..=3);
        let k_w = r.gen_range(1..=3);
        let g = ConvGeom {
            in_h: r.gen_range(k_h..=8),
            in_w: r.gen_range(k_w..=8),
            in_c: r.gen_range(1..=8),
            k_h,
            k_w,
            filters: r.gen_range(1..=8),
            stride: r.gen_range(1..=2),
        };
        let zeros = r.gen_range(0.0..0.8);
        let layer = synth::conv_layer(r, g, bits, mode, zeros);
        (Layer::Conv(layer), [g.in_h, g.in_w, g.in_c])
    } else {
        let x = r.gen_range(1..=8);
        let y = r.gen_range(1..=8);
        (Layer::Fc(synth::fc_layer(r, x, y, bits, mode)), [1, 1, x])
    }
}
