//! Seeded generators for synthetic layers, networks, and inputs.

use super::{ConvGeom, ConvLayer, FcLayer, Layer, Network, Tensor};
use crate::fxp::WordMode;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `n`-bit weight, zero with probability `zero_frac`.
pub fn weight<R: Rng>(rng: &mut R, n: u32, zero_frac: f64) -> i32 {
    if rng.gen_bool(zero_frac.clamp(0.0, 1.0)) {
        return 0;
    }
    let half = 1i32 << (n - 1);
    loop {
        let w = rng.gen_range(-half..half);
        if w != 0 {
            return w;
        }
    }
}

/// Exactly `round(count·f)` weights of each GCW class (zero, short, long),
/// shuffled. The short class is nonzero values in −8..=7; the long class is
/// everything else representable in `n` bits.
pub fn class_mix_weights<R: Rng>(
    rng: &mut R,
    count: usize,
    n: u32,
    fractions: [f64; 3],
) -> Vec<i32> {
    let zeros = (count as f64 * fractions[0]).round() as usize;
    let shorts = (count as f64 * fractions[1]).round() as usize;
    let longs = count - zeros - shorts;
    let half = 1i32 << (n - 1);
    let short_range: Vec<i32> = (-8..=7)
        .filter(|&v| v != 0 && v >= -half && v < half)
        .collect();
    let long_range: Vec<i32> = (-half..half).filter(|v| !(-8..=7).contains(v)).collect();
    assert!(
        longs == 0 || !long_range.is_empty(),
        "no long codes at n = {n}"
    );
    let mut out = vec![0; zeros];
    out.extend((0..shorts).map(|_| *short_range.choose(rng).unwrap()));
    out.extend((0..longs).map(|_| *long_range.choose(rng).unwrap()));
    out.shuffle(rng);
    out
}

pub fn conv_layer<R: Rng>(
    rng: &mut R,
    geom: ConvGeom,
    bo_bits: u32,
    imo_mode: WordMode,
    zero_frac: f64,
) -> ConvLayer {
    ConvLayer {
        geom,
        bo_bits,
        imo_mode,
        dropped_msbs: vec![0; geom.filters],
        weights: (0..geom.filters * geom.filter_len())
            .map(|_| weight(rng, bo_bits, zero_frac))
            .collect(),
    }
}

pub fn fc_layer<R: Rng>(
    rng: &mut R,
    inputs: usize,
    outputs: usize,
    bo_bits: u32,
    imo_mode: WordMode,
) -> FcLayer {
    FcLayer {
        inputs,
        outputs,
        bo_bits,
        imo_mode,
        weights: (0..inputs * outputs)
            .map(|_| rng.gen_range(-32768..32768))
            .collect(),
    }
}

/// Values uniform in [−1, 1).
pub fn input<R: Rng>(rng: &mut R, shape: [usize; 3]) -> Tensor {
    Tensor {
        shape,
        data: (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    }
}

/// A small MAC-dominated network: two CONV layers, pooling, and an FC head.
pub fn toy_network(seed: u64, zero_frac: f64) -> Network {
    let mut r = rng(seed);
    let c1 = ConvGeom {
        in_h: 10,
        in_w: 10,
        in_c: 3,
        k_h: 3,
        k_w: 3,
        filters: 6,
        stride: 1,
    };
    let c2 = ConvGeom {
        in_h: 8,
        in_w: 8,
        in_c: 6,
        k_h: 3,
        k_w: 3,
        filters: 8,
        stride: 1,
    };
    let layers = vec![
        Layer::Conv(conv_layer(&mut r, c1, 8, WordMode::OneX16, zero_frac)),
        Layer::Relu,
        Layer::Conv(conv_layer(&mut r, c2, 8, WordMode::OneX16, zero_frac)),
        Layer::Relu,
        Layer::MaxPool { size: 2, stride: 2 },
        Layer::Fc(fc_layer(&mut r, 3 * 3 * 8, 10, 8, WordMode::OneX16)),
    ];
    Network::new([10, 10, 3], layers).expect("consistent toy network")
}
