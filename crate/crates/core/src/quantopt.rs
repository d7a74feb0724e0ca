//! Workload-aware heterogeneous quantization and pruning.
//!
//! The flow runs three stages over a base network (8-bit BOs, 16-bit IMOs):
//! greedy per-layer BO width reduction with backtracking, lossless per-filter
//! MSb dropping plus deletion of all-zero filters, and per-layer selection of
//! the 2x8 IMO sub-word mode. Accuracy comes from a pluggable [`Evaluator`].

use crate::fxp::{self, QFormat, WordMode};
use crate::netmodel::{golden_infer_fixed, ConvLayer, Layer, ModelError, Network, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum QuantError {
    #[error("evaluator failed: {0}")]
    Evaluator(String),
    #[error("state does not match network: {0}")]
    State(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("bad trace record: {0}")]
    Trace(String),
}

/// Settings for one CONV/FC layer, indexed by its position in the base network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub layer: usize,
    pub bo_bits: u32,
    pub imo_mode: WordMode,
    /// Per base filter; empty for FC layers.
    pub dropped_msbs: Vec<u32>,
    /// Base filter indices removed because all their weights are zero.
    pub deleted_filters: Vec<usize>,
}

impl LayerQuant {
    /// Output scale factor of each surviving filter.
    pub fn scales(&self) -> Vec<u32> {
        self.dropped_msbs.iter().map(|d| 1 << d).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub layers: Vec<LayerQuant>,
    pub threshold: f64,
    /// Layers whose last BO reduction attempt was reverted.
    pub frozen: Vec<usize>,
}

impl QuantState {
    /// 8-bit BOs, 1x16 IMOs, nothing dropped.
    pub fn initial(base: &Network, threshold: f64) -> Self {
        let layers = base
            .mac_layers()
            .map(|(i, l)| LayerQuant {
                layer: i,
                bo_bits: 8,
                imo_mode: WordMode::OneX16,
                dropped_msbs: match l {
                    Layer::Conv(c) => vec![0; c.geom.filters],
                    _ => Vec::new(),
                },
                deleted_filters: Vec::new(),
            })
            .collect();
        QuantState {
            layers,
            threshold,
            frozen: Vec::new(),
        }
    }

    pub fn get(&self, layer: usize) -> Option<&LayerQuant> {
        self.layers.iter().find(|q| q.layer == layer)
    }

    fn get_mut(&mut self, layer: usize) -> &mut LayerQuant {
        self.layers
            .iter_mut()
            .find(|q| q.layer == layer)
            .expect("layer present in state")
    }

    pub fn total_bo_bits(&self) -> u32 {
        self.layers.iter().map(|q| q.bo_bits).sum()
    }
}

/// Accuracy oracle. Implementations must be deterministic.
pub trait Evaluator {
    fn evaluate(&mut self, net: &Network, state: &QuantState) -> Result<f64, QuantError>;

    /// Stand-in for a short fine-tuning pass after each change.
    fn refine(&mut self, _net: &Network, _state: &QuantState) -> Result<(), QuantError> {
        Ok(())
    }
}

fn drop_channels(data: &[i32], inner: usize, channels: usize, keep: &[bool]) -> Vec<i32> {
    // data is laid out [... outer][channels][inner]
    data.chunks(channels * inner)
        .flat_map(|blk| {
            blk.chunks(inner)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(c, _)| c.iter().copied())
        })
        .collect()
}

/// Build the network a state describes from the base network. CONV weights
/// are re-quantized from their base width (round to nearest even, saturating).
pub fn apply_state(base: &Network, state: &QuantState) -> Result<Network, QuantError> {
    let mut layers = base.layers.clone();
    // channels kept from the most recent CONV output, carried into the next MAC layer
    let mut pending: Option<Vec<bool>> = None;
    for (i, layer) in layers.iter_mut().enumerate() {
        let q = match (layer.is_mac(), state.get(i)) {
            (false, _) => continue,
            (true, Some(q)) => q,
            (true, None) => return Err(QuantError::State(format!("no entry for layer {i}"))),
        };
        if !(2..=8).contains(&q.bo_bits) {
            return Err(QuantError::State(format!(
                "layer {i}: bo_bits {}",
                q.bo_bits
            )));
        }
        let keep_in = pending.take();
        match layer {
            Layer::Conv(c) => {
                let from = QFormat::new(c.bo_bits).map_err(ModelError::from)?;
                let to = QFormat::new(q.bo_bits).map_err(ModelError::from)?;
                if q.dropped_msbs.len() != c.geom.filters {
                    return Err(QuantError::State(format!("layer {i}: dropped_msbs length")));
                }
                let mut weights: Vec<i32> = c
                    .weights
                    .iter()
                    .map(|&w| fxp::requantize(w, from, to))
                    .collect();
                let mut geom = c.geom;
                if let Some(keep) = keep_in {
                    weights = drop_channels(&weights, 1, geom.in_c, &keep);
                    geom.in_c = keep.iter().filter(|&&k| k).count();
                }
                let keep: Vec<bool> = (0..c.geom.filters)
                    .map(|f| !q.deleted_filters.contains(&f))
                    .collect();
                let n = geom.filter_len();
                let weights: Vec<i32> = weights
                    .chunks(n)
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .flat_map(|(w, _)| w.iter().copied())
                    .collect();
                let dropped = q
                    .dropped_msbs
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .map(|(&d, _)| d)
                    .collect();
                geom.filters = keep.iter().filter(|&&k| k).count();
                if !q.deleted_filters.is_empty() {
                    pending = Some(keep);
                }
                *c = ConvLayer {
                    geom,
                    bo_bits: q.bo_bits,
                    imo_mode: q.imo_mode,
                    dropped_msbs: dropped,
                    weights,
                };
            }
            Layer::Fc(f) => {
                if !q.deleted_filters.is_empty() {
                    return Err(QuantError::State(format!(
                        "layer {i}: FC outputs cannot be deleted"
                    )));
                }
                if let Some(keep) = keep_in {
                    // FC inputs are the flattened HWC tensor; weights are x-major
                    let kept: Vec<bool> = (0..f.inputs).map(|x| keep[x % keep.len()]).collect();
                    f.weights = drop_channels(&f.weights, f.outputs, f.inputs, &kept);
                    f.inputs = kept.iter().filter(|&&k| k).count();
                }
                f.bo_bits = q.bo_bits;
                f.imo_mode = q.imo_mode;
            }
            _ => unreachable!(),
        }
    }
    if pending.is_some() {
        return Err(QuantError::State(
            "filters deleted from the final MAC layer".into(),
        ));
    }
    let input_shape = base.input_shape;
    let mut net = Network::new(input_shape, layers)?;
    net.quant = Some(state.clone());
    Ok(net)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Baseline,
    Bo,
    Imo,
}

/// One optimizer attempt. Line form: `bo layer=3 value=6 acc=0.912500 accept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: Stage,
    pub layer: usize,
    /// Proposed BO width, or 8/16 for the IMO lane width.
    pub value: u32,
    pub accuracy: f64,
    pub accepted: bool,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage = match self.stage {
            Stage::Baseline => "baseline",
            Stage::Bo => "bo",
            Stage::Imo => "imo",
        };
        write!(
            f,
            "{stage} layer={} value={} acc={:.6} {}",
            self.layer,
            self.value,
            self.accuracy,
            if self.accepted { "accept" } else { "revert" }
        )
    }
}

impl FromStr for TraceRecord {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || QuantError::Trace(s.to_string());
        let t: Vec<&str> = s.split_whitespace().collect();
        if t.len() != 5 {
            return Err(bad());
        }
        let stage = match t[0] {
            "baseline" => Stage::Baseline,
            "bo" => Stage::Bo,
            "imo" => Stage::Imo,
            _ => return Err(bad()),
        };
        let field = |tok: &str, key: &str| -> Result<String, QuantError> {
            tok.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(bad)
        };
        Ok(TraceRecord {
            stage,
            layer: field(t[1], "layer")?.parse().map_err(|_| bad())?,
            value: field(t[2], "value")?.parse().map_err(|_| bad())?,
            accuracy: field(t[3], "acc")?.parse().map_err(|_| bad())?,
            accepted: match t[4] {
                "accept" => true,
                "revert" => false,
                _ => return Err(bad()),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePolicy {
    /// A reverted layer is skipped until some other layer changes.
    #[default]
    PerSweep,
    /// A reverted layer is never attempted again.
    Permanent,
}

/// MAC layers by MAC count, descending; ties go to the lower index.
pub fn workload_order(net: &Network) -> Vec<usize> {
    let mut order: Vec<(usize, u64)> = net.mac_layers().map(|(i, l)| (i, l.macs())).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(i, _)| i).collect()
}

fn attempt<E: Evaluator>(
    base: &Network,
    state: &QuantState,
    eval: &mut E,
) -> Result<f64, QuantError> {
    let net = apply_state(base, state)?;
    eval.refine(&net, state)?;
    eval.evaluate(&net, state)
}

/// Driver for the three-stage flow. Keeps the baseline accuracy and the trace.
pub struct Optimizer<'a, E: Evaluator> {
    base: &'a Network,
    eval: E,
    pub policy: FreezePolicy,
    pub baseline: f64,
    pub trace: Vec<TraceRecord>,
    threshold: f64,
}

impl<'a, E: Evaluator> Optimizer<'a, E> {
    /// Evaluates the baseline at 8-bit BOs and 1x16 IMOs.
    pub fn new(base: &'a Network, mut eval: E, threshold: f64) -> Result<Self, QuantError> {
        let state = QuantState::initial(base, threshold);
        let baseline = attempt(base, &state, &mut eval)?;
        Ok(Optimizer {
            base,
            eval,
            policy: FreezePolicy::default(),
            baseline,
            trace: vec![TraceRecord {
                stage: Stage::Baseline,
                layer: 0,
                value: 8,
                accuracy: baseline,
                accepted: true,
            }],
            threshold,
        })
    }

    pub fn initial_state(&self) -> QuantState {
        QuantState::initial(self.base, self.threshold)
    }

    fn acceptable(&self, acc: f64) -> bool {
        acc >= self.baseline - self.threshold
    }

    /// Greedy BO width reduction, one bit per layer per sweep, highest
    /// workload first, until a sweep changes nothing.
    pub fn optimize_bo(&mut self, mut state: QuantState) -> Result<QuantState, QuantError> {
        let order = workload_order(self.base);
        let mut changes = 0u64;
        // layer -> change counter when it was frozen
        let mut frozen: Vec<(usize, u64)> = Vec::new();
        loop {
            let mut changed = false;
            for &l in &order {
                let bits = state.get(l).map(|q| q.bo_bits).unwrap_or(2);
                let skip = frozen.iter().any(|&(fl, at)| {
                    fl == l && (self.policy == FreezePolicy::Permanent || at == changes)
                });
                if bits <= 2 || skip {
                    continue;
                }
                let mut trial = state.clone();
                trial.get_mut(l).bo_bits = bits - 1;
                let acc = attempt(self.base, &trial, &mut self.eval)?;
                let ok = self.acceptable(acc);
                self.trace.push(TraceRecord {
                    stage: Stage::Bo,
                    layer: l,
                    value: bits - 1,
                    accuracy: acc,
                    accepted: ok,
                });
                frozen.retain(|&(fl, _)| fl != l);
                if ok {
                    state = trial;
                    changes += 1;
                    changed = true;
                } else {
                    frozen.push((l, changes));
                }
            }
            if !changed {
                break;
            }
        }
        let mut fl: Vec<usize> = frozen.into_iter().map(|(l, _)| l).collect();
        fl.sort_unstable();
        state.frozen = fl;
        Ok(state)
    }

    /// Per-layer 1x16 → 2x8 IMO attempts in workload order.
    pub fn optimize_imo(&mut self, mut state: QuantState) -> Result<QuantState, QuantError> {
        for l in workload_order(self.base) {
            if state.get(l).map(|q| q.imo_mode) != Some(WordMode::OneX16) {
                continue;
            }
            let mut trial = state.clone();
            trial.get_mut(l).imo_mode = WordMode::TwoX8;
            let acc = attempt(self.base, &trial, &mut self.eval)?;
            let ok = self.acceptable(acc);
            self.trace.push(TraceRecord {
                stage: Stage::Imo,
                layer: l,
                value: 8,
                accuracy: acc,
                accepted: ok,
            });
            if ok {
                state = trial;
            }
        }
        Ok(state)
    }

    /// BO reduction, then filter pruning and MSb dropping, then IMO selection.
    pub fn run(&mut self) -> Result<QuantState, QuantError> {
        let s = self.optimize_bo(self.initial_state())?;
        let s = optimize_filters(self.base, s)?;
        self.optimize_imo(s)
    }
}

/// Smallest two's-complement width (≥ 2) holding `w`.
fn min_width(w: i32) -> u32 {
    let mag = if w < 0 { !w } else { w } as u32;
    (33 - mag.leading_zeros()).max(2)
}

/// Lossless per-filter MSb dropping and deletion of all-zero CONV filters.
/// Filters of the final MAC layer are never deleted, and every layer keeps
/// at least one filter.
pub fn optimize_filters(base: &Network, mut state: QuantState) -> Result<QuantState, QuantError> {
    let last_mac = base.mac_layers().map(|(i, _)| i).last();
    for q in &mut state.layers {
        q.deleted_filters.clear();
        q.dropped_msbs.iter_mut().for_each(|d| *d = 0);
    }
    // deletions first, judged on the re-quantized base weights
    let requant = apply_state(base, &state)?;
    for (i, layer) in requant.layers.iter().enumerate() {
        if let Layer::Conv(c) = layer {
            if Some(i) == last_mac {
                continue;
            }
            let mut zero: Vec<usize> = (0..c.geom.filters)
                .filter(|&f| c.filter(f).iter().all(|&w| w == 0))
                .collect();
            if zero.len() == c.geom.filters {
                zero.remove(0);
            }
            state.get_mut(i).deleted_filters = zero;
        }
    }
    // MSb drops on the surviving weights (input channels may have shrunk)
    let pruned = apply_state(base, &state)?;
    for (i, layer) in pruned.layers.iter().enumerate() {
        if let Layer::Conv(c) = layer {
            let q = state.get_mut(i);
            let survivors: Vec<usize> = (0..q.dropped_msbs.len())
                .filter(|f| !q.deleted_filters.contains(f))
                .collect();
            for (k, &f) in survivors.iter().enumerate() {
                let width = c.filter(k).iter().map(|&w| min_width(w)).max().unwrap_or(2);
                q.dropped_msbs[f] = c.bo_bits - width;
            }
        }
    }
    Ok(state)
}

/// Rebuild the final state from a trace: accepted records applied in order,
/// then filter optimization between the BO and IMO stages.
pub fn replay(
    base: &Network,
    trace: &[TraceRecord],
    threshold: f64,
) -> Result<QuantState, QuantError> {
    let mut state = QuantState::initial(base, threshold);
    let mut filters_done = false;
    let mut frozen: Vec<usize> = Vec::new();
    for r in trace {
        match r.stage {
            Stage::Baseline => {}
            Stage::Bo => {
                frozen.retain(|&l| l != r.layer);
                if r.accepted {
                    state.get_mut(r.layer).bo_bits = r.value;
                } else {
                    frozen.push(r.layer);
                }
            }
            Stage::Imo => {
                if !filters_done {
                    state = optimize_filters(base, state)?;
                    filters_done = true;
                }
                if r.accepted {
                    state.get_mut(r.layer).imo_mode = WordMode::TwoX8;
                }
            }
        }
    }
    if !filters_done {
        state = optimize_filters(base, state)?;
    }
    frozen.sort_unstable();
    state.frozen = frozen;
    Ok(state)
}

/// Fraction of calibration inputs whose arg-max class matches the base
/// network's, using the fixed-point golden executor.
pub struct AgreementEvaluator {
    inputs: Vec<Tensor>,
    reference: Vec<usize>,
}

impl AgreementEvaluator {
    pub fn new(base: &Network, inputs: Vec<Tensor>) -> Result<Self, QuantError> {
        let reference = inputs
            .iter()
            .map(|x| golden_infer_fixed(base, x).map(|y| y.argmax()))
            .collect::<Result<_, _>>()?;
        Ok(AgreementEvaluator { inputs, reference })
    }
}

impl Evaluator for AgreementEvaluator {
    fn evaluate(&mut self, net: &Network, _state: &QuantState) -> Result<f64, QuantError> {
        if self.inputs.is_empty() {
            return Ok(1.0);
        }
        let mut hits = 0;
        for (x, &r) in self.inputs.iter().zip(&self.reference) {
            if golden_infer_fixed(net, x)?.argmax() == r {
                hits += 1;
            }
        }
        Ok(hits as f64 / self.inputs.len() as f64)
    }
}

/// Always reports the same accuracy.
pub struct ConstantEvaluator(pub f64);

impl Evaluator for ConstantEvaluator {
    fn evaluate(&mut self, _: &Network, _: &QuantState) -> Result<f64, QuantError> {
        Ok(self.0)
    }
}

/// Accuracy 1 while every layer has at least `min_bits` BO bits, 0 otherwise.
/// With `reject_two_x8` set, any 2x8 layer also scores 0.
pub struct MinBitsEvaluator {
    pub min_bits: u32,
    pub reject_two_x8: bool,
}

impl Evaluator for MinBitsEvaluator {
    fn evaluate(&mut self, _: &Network, state: &QuantState) -> Result<f64, QuantError> {
        let ok = state.layers.iter().all(|q| {
            q.bo_bits >= self.min_bits && !(self.reject_two_x8 && q.imo_mode == WordMode::TwoX8)
        });
        Ok(if ok { 1.0 } else { 0.0 })
    }
}
