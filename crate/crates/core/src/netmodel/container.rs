//! Binary model container, little-endian throughout:
//!
//! ```text
//! "BCNM" | version: u16 | manifest_len: u32 | manifest (JSON, UTF-8)
//! then for each CONV/FC layer in order: blob_len: u32 | blob
//! ```
//!
//! A CONV blob is the concatenation of one GCW stream blob per filter, each
//! encoded at that filter's reduced width. An FC blob is the Q1.15 weights as
//! `i16`, `x`-major. The manifest carries everything else.

use super::{ConvGeom, ConvLayer, FcLayer, Layer, ModelError, Network};
use crate::fxp::WordMode;
use crate::gcw::{self, GcwStream};
use crate::quantopt::QuantState;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const FORMAT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"BCNM";

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerEntry {
    Conv {
        geom: ConvGeom,
        bo_bits: u32,
        imo_mode: WordMode,
        dropped_msbs: Vec<u32>,
    },
    Fc {
        inputs: usize,
        outputs: usize,
        bo_bits: u32,
        imo_mode: WordMode,
    },
    Relu,
    Maxpool {
        size: usize,
        stride: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u16,
    input_shape: [usize; 3],
    layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantState>,
}

fn conv_blob(c: &ConvLayer) -> Result<Vec<u8>, ModelError> {
    let mut out = Vec::new();
    for f in 0..c.geom.filters {
        out.extend(gcw::encode_filter(c.filter(f), c.filter_bits(f))?.to_blob());
    }
    Ok(out)
}

pub fn write_model<W: Write>(net: &Network, mut w: W) -> Result<(), ModelError> {
    net.validate()?;
    let mut blobs = Vec::new();
    let layers = net
        .layers
        .iter()
        .map(|l| {
            Ok(match l {
                Layer::Conv(c) => {
                    blobs.push(conv_blob(c)?);
                    LayerEntry::Conv {
                        geom: c.geom,
                        bo_bits: c.bo_bits,
                        imo_mode: c.imo_mode,
                        dropped_msbs: c.dropped_msbs.clone(),
                    }
                }
                Layer::Fc(f) => {
                    blobs.push(
                        f.weights
                            .iter()
                            .flat_map(|&v| (v as i16).to_le_bytes())
                            .collect(),
                    );
                    LayerEntry::Fc {
                        inputs: f.inputs,
                        outputs: f.outputs,
                        bo_bits: f.bo_bits,
                        imo_mode: f.imo_mode,
                    }
                }
                Layer::Relu => LayerEntry::Relu,
                Layer::MaxPool { size, stride } => LayerEntry::Maxpool {
                    size: *size,
                    stride: *stride,
                },
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        input_shape: net.input_shape,
        layers,
        quant: net.quant.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| ModelError::Malformed(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for b in blobs {
        w.write_all(&(b.len() as u32).to_le_bytes())?;
        w.write_all(&b)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_conv(blob: &[u8], geom: ConvGeom, bits: &[u32]) -> Result<Vec<i32>, ModelError> {
    let mut weights = Vec::with_capacity(geom.filters * geom.filter_len());
    let mut pos = 0;
    for (f, &n) in bits.iter().enumerate() {
        let (stream, used): (GcwStream, usize) = GcwStream::from_blob(&blob[pos..])?;
        pos += used;
        if stream.n != n || stream.weight_count as usize != geom.filter_len() {
            return Err(ModelError::Malformed(format!(
                "filter {f} stream header (n={}, count={}) disagrees with manifest",
                stream.n, stream.weight_count
            )));
        }
        weights.extend(gcw::decode_all(&stream)?);
    }
    if pos != blob.len() {
        return Err(ModelError::Malformed("trailing bytes in conv blob".into()));
    }
    Ok(weights)
}

pub fn read_model(bytes: &[u8]) -> Result<Network, ModelError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(ModelError::Malformed("bad magic".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ModelError::Version(version));
    }
    let len = cur.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(cur.take(len)?)
        .map_err(|e| ModelError::Malformed(format!("manifest: {e}")))?;
    if manifest.version != version {
        return Err(ModelError::Malformed(
            "manifest version disagrees with header".into(),
        ));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in manifest.layers {
        layers.push(match entry {
            LayerEntry::Conv {
                geom,
                bo_bits,
                imo_mode,
                dropped_msbs,
            } => {
                geom.validate()?;
                if dropped_msbs.len() != geom.filters
                    || dropped_msbs.iter().any(|&d| d + 2 > bo_bits)
                {
                    return Err(ModelError::Malformed("bad dropped_msbs".into()));
                }
                let n = cur.u32()? as usize;
                let bits: Vec<u32> = dropped_msbs.iter().map(|d| bo_bits - d).collect();
                let weights = decode_conv(cur.take(n)?, geom, &bits)?;
                Layer::Conv(ConvLayer {
                    geom,
                    bo_bits,
                    imo_mode,
                    dropped_msbs,
                    weights,
                })
            }
            LayerEntry::Fc {
                inputs,
                outputs,
                bo_bits,
                imo_mode,
            } => {
                let n = cur.u32()? as usize;
                if Some(n) != inputs.checked_mul(outputs).and_then(|c| c.checked_mul(2)) {
                    return Err(ModelError::Malformed("fc blob size".into()));
                }
                let weights = cur
                    .take(n)?
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
                    .collect();
                Layer::Fc(FcLayer {
                    inputs,
                    outputs,
                    bo_bits,
                    imo_mode,
                    weights,
                })
            }
            LayerEntry::Relu => Layer::Relu,
            LayerEntry::Maxpool { size, stride } => Layer::MaxPool { size, stride },
        });
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::Malformed("trailing bytes".into()));
    }
    let mut net = Network::new(manifest.input_shape, layers)?;
    net.quant = manifest.quant;
    Ok(net)
}

pub fn save_model(net: &Network, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_model(net, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network, ModelError> {
    read_model(&std::fs::read(path)?)
}

/// Weight storage accounting. `code_bits` is the exact sum of code-word
/// lengths; `stored_bits` adds the padding to whole 32-bit words.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSize {
    pub conv_weights: u64,
    /// CONV weights at the layer's BO width, uncoded.
    pub conv_raw_bits: u64,
    pub conv_code_bits: u64,
    pub conv_stored_bits: u64,
    pub fc_bits: u64,
}

impl ModelSize {
    pub fn of(net: &Network) -> Result<Self, ModelError> {
        let mut s = ModelSize::default();
        for l in &net.layers {
            match l {
                Layer::Conv(c) => {
                    s.conv_weights += c.weights.len() as u64;
                    s.conv_raw_bits += c.weights.len() as u64 * c.bo_bits as u64;
                    for f in 0..c.geom.filters {
                        let n = c.filter_bits(f);
                        s.conv_code_bits += c
                            .filter(f)
                            .iter()
                            .map(|&w| gcw::code_length(w, n) as u64)
                            .sum::<u64>();
                        s.conv_stored_bits += gcw::encode_filter(c.filter(f), n)?.stored_bits();
                    }
                }
                Layer::Fc(f) => s.fc_bits += 16 * f.weights.len() as u64,
                _ => {}
            }
        }
        Ok(s)
    }

    /// Raw over coded CONV size; 1 when there are no CONV weights.
    pub fn conv_compression(&self) -> f64 {
        if self.conv_code_bits == 0 {
            1.0
        } else {
            self.conv_raw_bits as f64 / self.conv_code_bits as f64
        }
    }
}
