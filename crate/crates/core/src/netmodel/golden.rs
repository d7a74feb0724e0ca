use super::{ConvLayer, FcLayer, Layer, ModelError, Network, Tensor};
use crate::fxp::{self, BoBits, QFormat, WordMode};

/// Round-to-nearest-even quantization that saturates instead of failing.
pub fn quantize_saturating(value: f64, fmt: QFormat) -> i32 {
    let scaled = (value * (1u64 << fmt.frac_bits()) as f64).round_ties_even();
    scaled.clamp(fmt.min_raw() as f64, fmt.max_raw() as f64) as i32
}

/// Broadcast operand for weight `i` of filter `f`, at the filter's reduced width.
pub fn conv_bo(layer: &ConvLayer, f: usize, i: usize) -> BoBits {
    BoBits::from_raw(layer.filter(f)[i], layer.filter_bits(f)).expect("validated weight")
}

/// In-memory FC weight in the layer's word format.
pub fn fc_imo_raw(layer: &FcLayer, x: usize, y: usize) -> i32 {
    let w = layer.weight(x, y);
    match layer.imo_mode {
        WordMode::OneX16 => w,
        WordMode::TwoX8 => fxp::requantize(w, QFormat::Q1_15, QFormat::Q1_7),
    }
}

/// Per-layer result: real output values plus the raw lane accumulators they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub tensor: Tensor,
    pub raw: Vec<i32>,
}

fn wrap(acc: i64, bits: u32) -> i32 {
    fxp::sign_extend(acc as u32 & ((1u64 << bits) - 1) as u32, bits)
}

fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

fn quantized_input(input: &Tensor, fmt: QFormat) -> Vec<i32> {
    input
        .data
        .iter()
        .map(|&v| quantize_saturating(v, fmt))
        .collect()
}

fn conv_loop(
    layer: &ConvLayer,
    input: &Tensor,
    mut term: impl FnMut(i32, usize, usize) -> i64,
) -> Vec<i64> {
    let g = layer.geom;
    let imo = quantized_input(input, layer.imo_mode.format());
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0i64; oh * ow * g.filters];
    for oy in 0..oh {
        for ox in 0..ow {
            for f in 0..g.filters {
                let mut acc = 0i64;
                let mut i = 0;
                for ky in 0..g.k_h {
                    for kx in 0..g.k_w {
                        for c in 0..g.in_c {
                            let a = imo[input.index(oy * g.stride + ky, ox * g.stride + kx, c)];
                            acc += term(a, f, i);
                            i += 1;
                        }
                    }
                }
                out[(oy * ow + ox) * g.filters + f] = acc;
            }
        }
    }
    out
}

fn check_input(layer: &Layer, input: &Tensor) -> Result<[usize; 3], ModelError> {
    layer.output_shape(input.shape)
}

/// One MAC layer under the in-memory truncating semantics.
pub fn golden_layer_fixed(layer: &Layer, input: &Tensor) -> Result<LayerOutput, ModelError> {
    let shape = check_input(layer, input)?;
    match layer {
        Layer::Conv(c) => {
            let fmt = c.imo_mode.format();
            let bits = fmt.total_bits();
            let sums = conv_loop(c, input, |a, f, i| {
                fxp::truncating_product(a, c.imo_mode, conv_bo(c, f, i)) as i64
            });
            let raw: Vec<i32> = sums.iter().map(|&s| wrap(s, bits)).collect();
            let data = raw
                .iter()
                .enumerate()
                .map(|(j, &r)| {
                    let f = j % c.geom.filters;
                    r as f64 * pow2(-(fmt.frac_bits() as i32) - c.dropped_msbs[f] as i32)
                })
                .collect();
            Ok(LayerOutput {
                tensor: Tensor::new(shape, data)?,
                raw,
            })
        }
        Layer::Fc(fc) => {
            let fmt = fc.imo_mode.format();
            let bo_fmt = QFormat::new(fc.bo_bits)?;
            let xs = quantized_input(input, bo_fmt);
            let raw: Vec<i32> = (0..fc.outputs)
                .map(|y| {
                    let s: i64 = xs
                        .iter()
                        .enumerate()
                        .map(|(x, &b)| {
                            let bo = BoBits::from_raw(b, fc.bo_bits).expect("quantized");
                            fxp::truncating_product(fc_imo_raw(fc, x, y), fc.imo_mode, bo) as i64
                        })
                        .sum();
                    wrap(s, fmt.total_bits())
                })
                .collect();
            let data = raw.iter().map(|&r| fxp::from_fixed(r, fmt)).collect();
            Ok(LayerOutput {
                tensor: Tensor::new(shape, data)?,
                raw,
            })
        }
        _ => Ok(LayerOutput {
            tensor: run_host_op(layer, input)?,
            raw: Vec::new(),
        }),
    }
}

/// One MAC layer with exact products and sums over the same quantized operands.
pub fn golden_layer_exact(layer: &Layer, input: &Tensor) -> Result<Tensor, ModelError> {
    let shape = check_input(layer, input)?;
    match layer {
        Layer::Conv(c) => {
            let fmt = c.imo_mode.format();
            let sums = conv_loop(c, input, |a, f, i| a as i64 * c.filter(f)[i] as i64);
            // weight value is w / 2^(bo_bits − 1) regardless of the MSb drop
            let scale = pow2(-(fmt.frac_bits() as i32) - (c.bo_bits as i32 - 1));
            let data = sums.iter().map(|&s| s as f64 * scale).collect();
            Tensor::new(shape, data)
        }
        Layer::Fc(fc) => {
            let fmt = fc.imo_mode.format();
            let bo_fmt = QFormat::new(fc.bo_bits)?;
            let xs = quantized_input(input, bo_fmt);
            let data = (0..fc.outputs)
                .map(|y| {
                    let s: i64 = xs
                        .iter()
                        .enumerate()
                        .map(|(x, &b)| b as i64 * fc_imo_raw(fc, x, y) as i64)
                        .sum();
                    s as f64 * pow2(-(fmt.frac_bits() as i32) - bo_fmt.frac_bits() as i32)
                })
                .collect();
            Tensor::new(shape, data)
        }
        _ => run_host_op(layer, input),
    }
}

/// ReLU and max-pooling, evaluated on the host.
pub fn run_host_op(layer: &Layer, input: &Tensor) -> Result<Tensor, ModelError> {
    let shape = check_input(layer, input)?;
    match layer {
        Layer::Relu => Ok(Tensor {
            shape,
            data: input.data.iter().map(|&v| v.max(0.0)).collect(),
        }),
        Layer::MaxPool { size, stride } => {
            let mut out = Tensor::zeros(shape);
            for oy in 0..shape[0] {
                for ox in 0..shape[1] {
                    for c in 0..shape[2] {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..*size {
                            for dx in 0..*size {
                                m = m.max(input.get(oy * stride + dy, ox * stride + dx, c));
                            }
                        }
                        let i = out.index(oy, ox, c);
                        out.data[i] = m;
                    }
                }
            }
            Ok(out)
        }
        _ => Err(ModelError::Shape(format!(
            "{} is not a host operation",
            layer.kind_name()
        ))),
    }
}

/// Bit-exact reference for the simulator: every MAC layer uses the
/// truncating shift-add products, sums wrap in the word format, and
/// activations are re-quantized (RNE, saturating) when the next layer reads them.
pub fn golden_infer_fixed(net: &Network, input: &Tensor) -> Result<Tensor, ModelError> {
    net.layers.iter().try_fold(input.clone(), |t, l| {
        golden_layer_fixed(l, &t).map(|o| o.tensor)
    })
}

/// Exact-arithmetic reference over the same quantized operands.
pub fn golden_infer_exact(net: &Network, input: &Tensor) -> Result<Tensor, ModelError> {
    net.layers
        .iter()
        .try_fold(input.clone(), |t, l| golden_layer_exact(l, &t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::ConvGeom;

    fn one_by_one(w: i32, bo_bits: u32, mode: WordMode) -> Layer {
        Layer::Conv(ConvLayer {
            geom: ConvGeom {
                in_h: 1,
                in_w: 1,
                in_c: 1,
                k_h: 1,
                k_w: 1,
                filters: 1,
                stride: 1,
            },
            bo_bits,
            imo_mode: mode,
            dropped_msbs: vec![0],
            weights: vec![w],
        })
    }

    #[test]
    fn single_product_matches_worked_example() {
        // 0.296875 × −0.8125 in Q1.7 × Q1.4
        let l = one_by_one(-13, 5, WordMode::TwoX8);
        let x = Tensor::new([1, 1, 1], vec![0.296875]).unwrap();
        let exact = golden_layer_exact(&l, &x).unwrap();
        assert_eq!(exact.data[0], -0.2412109375);
        let fixed = golden_layer_fixed(&l, &x).unwrap();
        assert!((fixed.tensor.data[0] - exact.data[0]).abs() / 0.2412109375 <= 0.005);
    }

    #[test]
    fn zero_weight_gives_zero() {
        let l = one_by_one(0, 8, WordMode::OneX16);
        let x = Tensor::new([1, 1, 1], vec![0.7]).unwrap();
        assert_eq!(golden_layer_fixed(&l, &x).unwrap().tensor.data, vec![0.0]);
    }

    #[test]
    fn saturating_quantization() {
        assert_eq!(quantize_saturating(1.0, QFormat::Q1_7), 127);
        assert_eq!(quantize_saturating(-3.0, QFormat::Q1_7), -128);
        assert_eq!(quantize_saturating(0.5 / 128.0, QFormat::Q1_7), 0);
        assert_eq!(quantize_saturating(1.5 / 128.0, QFormat::Q1_7), 2);
    }

    #[test]
    fn pooling_and_relu() {
        let t = Tensor::new([2, 2, 1], vec![-1.0, 0.25, 0.5, -0.5]).unwrap();
        let p = run_host_op(&Layer::MaxPool { size: 2, stride: 2 }, &t).unwrap();
        assert_eq!(p.data, vec![0.5]);
        let r = run_host_op(&Layer::Relu, &t).unwrap();
        assert_eq!(r.data, vec![0.0, 0.25, 0.5, 0.0]);
    }
}
