//! CNN model representation, the model container, and the reference
//! executors the simulator is checked against.
//!
//! CONV weights are N-bit integers (N = the layer's BO width) with value
//! `w / 2^(N−1)`. A filter with `d` dropped MSbs is broadcast as an
//! `(N − d)`-bit operand, which scales its products by `2^d`; the host undoes
//! this when reading outputs back. FC weights are in-memory operands held as
//! Q1.15 and re-quantized to Q1.7 when the layer runs in 2x8 mode.

mod container;
mod golden;
pub mod synth;
mod tensor;

pub use container::{load_model, read_model, save_model, write_model, ModelSize, FORMAT_VERSION};
pub use golden::{
    conv_bo, fc_imo_raw, golden_infer_exact, golden_infer_fixed, golden_layer_exact,
    golden_layer_fixed, quantize_saturating, run_host_op, LayerOutput,
};
pub use tensor::Tensor;

use crate::fxp::{FxpError, QFormat, WordMode};
use crate::gcw::GcwError;
use crate::quantopt::QuantState;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed model: {0}")]
    Malformed(String),
    #[error("unsupported model format version {0}")]
    Version(u16),
    #[error("weight error in layer {layer}: {msg}")]
    Weight { layer: usize, msg: String },
    #[error(transparent)]
    Gcw(#[from] GcwError),
    #[error(transparent)]
    Fxp(#[from] FxpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub filters: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.k_w) / self.stride + 1
    }

    /// Weights per filter, ordered (ky, kx, c).
    pub fn filter_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    pub fn macs(&self) -> u64 {
        (self.out_h() * self.out_w() * self.filters * self.filter_len()) as u64
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let g = self;
        if [g.in_h, g.in_w, g.in_c, g.k_h, g.k_w, g.filters, g.stride].contains(&0) {
            return Err(ModelError::Shape(format!("zero dimension in {g:?}")));
        }
        if g.k_h > g.in_h || g.k_w > g.in_w {
            return Err(ModelError::Shape(format!(
                "kernel {}x{} larger than input {}x{}",
                g.k_h, g.k_w, g.in_h, g.in_w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub geom: ConvGeom,
    pub bo_bits: u32,
    pub imo_mode: WordMode,
    pub dropped_msbs: Vec<u32>,
    /// `filters × filter_len` integers at `bo_bits` scale.
    pub weights: Vec<i32>,
}

impl ConvLayer {
    pub fn filter(&self, f: usize) -> &[i32] {
        let n = self.geom.filter_len();
        &self.weights[f * n..(f + 1) * n]
    }

    /// BO width of filter `f` after its MSb drop.
    pub fn filter_bits(&self, f: usize) -> u32 {
        self.bo_bits - self.dropped_msbs[f]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub bo_bits: u32,
    pub imo_mode: WordMode,
    /// Q1.15 weights, `weights[x * outputs + y]`.
    pub weights: Vec<i32>,
}

impl FcLayer {
    pub fn weight(&self, x: usize, y: usize) -> i32 {
        self.weights[x * self.outputs + y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Fc(FcLayer),
    Relu,
    MaxPool { size: usize, stride: usize },
}

impl Layer {
    pub fn is_mac(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Fc(_))
    }

    pub fn macs(&self) -> u64 {
        match self {
            Layer::Conv(c) => c.geom.macs(),
            Layer::Fc(f) => (f.inputs * f.outputs) as u64,
            _ => 0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Fc(_) => "fc",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
        }
    }

    pub fn bo_bits(&self) -> Option<u32> {
        match self {
            Layer::Conv(c) => Some(c.bo_bits),
            Layer::Fc(f) => Some(f.bo_bits),
            _ => None,
        }
    }

    pub fn imo_mode(&self) -> Option<WordMode> {
        match self {
            Layer::Conv(c) => Some(c.imo_mode),
            Layer::Fc(f) => Some(f.imo_mode),
            _ => None,
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3], ModelError> {
        match self {
            Layer::Conv(c) => {
                let g = c.geom;
                if input != [g.in_h, g.in_w, g.in_c] {
                    return Err(ModelError::Shape(format!(
                        "conv expects {:?}, got {:?}",
                        [g.in_h, g.in_w, g.in_c],
                        input
                    )));
                }
                Ok([g.out_h(), g.out_w(), g.filters])
            }
            Layer::Fc(f) => {
                let n: usize = input.iter().product();
                if n != f.inputs {
                    return Err(ModelError::Shape(format!(
                        "fc expects {} inputs, got {:?}",
                        f.inputs, input
                    )));
                }
                Ok([1, 1, f.outputs])
            }
            Layer::Relu => Ok(input),
            Layer::MaxPool { size, stride } => {
                if *size == 0 || *stride == 0 || *size > input[0] || *size > input[1] {
                    return Err(ModelError::Shape(format!(
                        "pool {size}/{stride} on {input:?}"
                    )));
                }
                Ok([
                    (input[0] - size) / stride + 1,
                    (input[1] - size) / stride + 1,
                    input[2],
                ])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    /// Optimizer state recorded alongside the model, if any.
    pub quant: Option<QuantState>,
}

impl Network {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self, ModelError> {
        let net = Network {
            input_shape,
            layers,
            quant: None,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn output_shape(&self) -> Result<[usize; 3], ModelError> {
        self.layers
            .iter()
            .try_fold(self.input_shape, |s, l| l.output_shape(s))
    }

    /// Shapes entering each layer.
    pub fn layer_inputs(&self) -> Result<Vec<[usize; 3]>, ModelError> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut s = self.input_shape;
        for l in &self.layers {
            shapes.push(s);
            s = l.output_shape(s)?;
        }
        Ok(shapes)
    }

    pub fn mac_layers(&self) -> impl Iterator<Item = (usize, &Layer)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_mac())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.output_shape()?;
        for (i, layer) in self.layers.iter().enumerate() {
            let werr = |msg: String| ModelError::Weight { layer: i, msg };
            match layer {
                Layer::Conv(c) => {
                    c.geom.validate()?;
                    if !(2..=8).contains(&c.bo_bits) {
                        return Err(werr(format!("bo_bits {} outside [2, 8]", c.bo_bits)));
                    }
                    if c.dropped_msbs.len() != c.geom.filters {
                        return Err(werr("one dropped-MSb count per filter required".into()));
                    }
                    if c.weights.len() != c.geom.filters * c.geom.filter_len() {
                        return Err(werr(format!("{} weights", c.weights.len())));
                    }
                    for f in 0..c.geom.filters {
                        let d = c.dropped_msbs[f];
                        if d + 2 > c.bo_bits {
                            return Err(werr(format!(
                                "filter {f} drops {d} of {} bits",
                                c.bo_bits
                            )));
                        }
                        let fmt = QFormat::new(c.filter_bits(f))?;
                        if let Some(w) = c
                            .filter(f)
                            .iter()
                            .find(|&&w| w < fmt.min_raw() || w > fmt.max_raw())
                        {
                            return Err(werr(format!(
                                "filter {f} weight {w} not representable in {} bits",
                                c.filter_bits(f)
                            )));
                        }
                    }
                }
                Layer::Fc(f) => {
                    if !(2..=8).contains(&f.bo_bits) {
                        return Err(werr(format!("bo_bits {} outside [2, 8]", f.bo_bits)));
                    }
                    if f.weights.len() != f.inputs * f.outputs || f.inputs == 0 || f.outputs == 0 {
                        return Err(werr(format!("{} weights", f.weights.len())));
                    }
                    if f.weights.iter().any(|w| !(-32768..=32767).contains(w)) {
                        return Err(werr("FC weight outside Q1.15".into()));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}
