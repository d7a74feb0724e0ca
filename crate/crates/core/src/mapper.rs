//! Decomposition of CONV and FC layers into subarray tiles, and lowering of a
//! tile plan into a program of host transfers and broadcast instructions.
//!
//! Every subarray in a plan uses the same local layout, so each broadcast
//! binds identical local addresses everywhere:
//!
//! * the last Local Group holds a zero word `Z` and the accumulator `A`;
//! * data words (CONV activations or FC weights) start at index 0, or at 1
//!   when a partial-sum word `P` occupies index 0 (depth-split layers);
//! * output sums `S_j` fill the data region from its top end downwards.
//!
//! A product is computed into `A` (its first instruction reads `Z` as the
//! accumulator), then folded into its running sum with one merge add. For a
//! depth-split layer, each later pass accumulates into `P`, which is merged
//! into `S_j` at the end of the pass.
//!
//! In 2x8 mode a subarray hosts two tiles, one per lane, at identical local
//! positions; a single instruction stream advances both.

use crate::bcarray::{Address, ArrayConfig, ArrayError, BcArray, Binding, OpClass, SubarrayConfig};
use crate::fxp::{self, BCInstr, BoBits, FxWord, FxpError, MulSchedule, WordMode};
use crate::gcw::{self, GcwError};
use crate::netmodel::{
    fc_imo_raw, quantize_saturating, ConvGeom, ConvLayer, FcLayer, Layer, ModelError, Tensor,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("capacity: {0}")]
    Capacity(String),
    #[error("layer kind {0} cannot be mapped to the array")]
    NotMac(&'static str),
    #[error("plan was built for a different layer or configuration")]
    PlanMismatch,
    #[error(transparent)]
    Array(#[from] ArrayError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gcw(#[from] GcwError),
    #[error(transparent)]
    Fxp(#[from] FxpError),
}

/// Geometry of a mappable layer; weights play no part in planning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        geom: ConvGeom,
        imo_mode: WordMode,
    },
    Fc {
        inputs: usize,
        outputs: usize,
        imo_mode: WordMode,
    },
}

impl LayerSpec {
    pub fn of(layer: &Layer) -> Result<Self, MapError> {
        match layer {
            Layer::Conv(c) => Ok(LayerSpec::Conv {
                geom: c.geom,
                imo_mode: c.imo_mode,
            }),
            Layer::Fc(f) => Ok(LayerSpec::Fc {
                inputs: f.inputs,
                outputs: f.outputs,
                imo_mode: f.imo_mode,
            }),
            other => Err(MapError::NotMac(other.kind_name())),
        }
    }

    pub fn imo_mode(&self) -> WordMode {
        match self {
            LayerSpec::Conv { imo_mode, .. } | LayerSpec::Fc { imo_mode, .. } => *imo_mode,
        }
    }
}

/// Local word indices shared by every subarray of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    /// Data words per pass.
    pub data_words: usize,
    /// Output sums per subarray (per lane).
    pub outputs: usize,
    pub partial: bool,
    /// Words usable for data, partial sum, and output sums.
    pub avail: usize,
    pub lg_words: usize,
}

impl Layout {
    pub fn data(&self, i: usize) -> usize {
        i + self.partial as usize
    }

    pub fn sum(&self, j: usize) -> usize {
        self.avail - 1 - j
    }

    pub fn partial_word(&self) -> usize {
        0
    }

    pub fn zero(&self) -> usize {
        self.avail
    }

    pub fn acc(&self) -> usize {
        self.avail + 1
    }

    /// Words resident per subarray, scratch included.
    pub fn resident(&self) -> usize {
        self.data_words + self.outputs + self.partial as usize + 2
    }
}

fn capacity(sc: &SubarrayConfig) -> Result<(usize, usize), MapError> {
    let lgw = sc.lg_words();
    if sc.lg_count < 2 || lgw < 2 {
        return Err(MapError::Capacity(
            "need at least two local groups of at least two words".into(),
        ));
    }
    Ok(((sc.lg_count - 1) * lgw, lgw))
}

fn fits(avail: usize, lgw: usize, data: usize, outputs: usize, passes: usize) -> bool {
    if passes > 1 {
        // output sums must stay out of the partial sum's local group
        data + outputs < avail && outputs + lgw <= avail
    } else {
        data + outputs <= avail
    }
}

/// One tile: a block of outputs computed by one subarray lane.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub round: usize,
    pub subarray: usize,
    pub lane: usize,
    pub out_y: Range<usize>,
    pub out_x: Range<usize>,
    /// Filters (CONV) or output neurons (FC).
    pub out_f: Range<usize>,
    /// Input rows and columns read, halo included (FC: `0..1` × `0..inputs`).
    pub in_y: Range<usize>,
    pub in_x: Range<usize>,
}

impl Tile {
    pub fn output_count(&self) -> usize {
        self.out_y.len() * self.out_x.len() * self.out_f.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub spec: LayerSpec,
    pub layout: Layout,
    pub tiles: Vec<Tile>,
    pub rounds: usize,
    /// Channel ranges (CONV) or input ranges (FC), one per pass.
    pub depth: Vec<Range<usize>>,
    /// Largest tile extent in outputs (y, x, f) and inputs (y, x).
    pub tile_out: [usize; 3],
    pub tile_in: [usize; 2],
}

impl TilePlan {
    pub fn passes(&self) -> usize {
        self.depth.len()
    }

    pub fn depth_chunk(&self) -> usize {
        self.depth.iter().map(|r| r.len()).max().unwrap_or(0)
    }

    pub fn lanes(&self) -> usize {
        self.spec.imo_mode().lanes()
    }

    pub fn round_tiles(&self, round: usize) -> impl Iterator<Item = &Tile> {
        self.tiles.iter().filter(move |t| t.round == round)
    }

    /// Distinct subarrays used.
    pub fn subarrays_used(&self) -> usize {
        let mut s: Vec<usize> = self.tiles.iter().map(|t| t.subarray).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    }

    /// Partial-sum merge adds: one per output per extra pass.
    pub fn partial_merges(&self) -> usize {
        let outputs: usize = self.tiles.iter().map(Tile::output_count).sum();
        outputs * (self.passes() - 1)
    }

    /// Words written by the host: per round, pass, and subarray, every local
    /// data word that holds a real value in at least one lane.
    pub fn transfer_in_words(&self) -> usize {
        let mut total = 0;
        for r in 0..self.rounds {
            let mut by_sub: HashMap<usize, Vec<&Tile>> = HashMap::new();
            for t in self.round_tiles(r) {
                by_sub.entry(t.subarray).or_default().push(t);
            }
            for tiles in by_sub.values() {
                for depth in &self.depth {
                    total += self.local_words(tiles, depth.len());
                }
            }
        }
        total
    }

    fn local_words(&self, tiles: &[&Tile], depth: usize) -> usize {
        match self.spec {
            LayerSpec::Conv { .. } => {
                let (h, w) = (self.tile_in[0], self.tile_in[1]);
                let mut n = 0;
                for y in 0..h {
                    for x in 0..w {
                        if tiles.iter().any(|t| y < t.in_y.len() && x < t.in_x.len()) {
                            n += depth;
                        }
                    }
                }
                n
            }
            LayerSpec::Fc { .. } => tiles.iter().map(|t| t.out_f.len()).max().unwrap_or(0) * depth,
        }
    }

    /// Output words read back.
    pub fn read_words(&self) -> usize {
        let mut total = 0;
        for r in 0..self.rounds {
            let mut by_sub: HashMap<usize, usize> = HashMap::new();
            for t in self.round_tiles(r) {
                let e = by_sub.entry(t.subarray).or_default();
                *e = (*e).max(t.output_count());
            }
            total += by_sub.values().sum::<usize>();
        }
        total
    }

    /// Input cells (y, x, c) needed by two or more tiles.
    pub fn halo_cells(&self) -> usize {
        let LayerSpec::Conv { geom, .. } = self.spec else {
            return 0;
        };
        let mut count = vec![0u32; geom.in_h * geom.in_w];
        // tiles repeat per filter group; count each spatial tile once
        let first = self.tiles.first().map(|t| t.out_f.clone());
        for t in self
            .tiles
            .iter()
            .filter(|t| Some(&t.out_f) == first.as_ref())
        {
            for y in t.in_y.clone() {
                for x in t.in_x.clone() {
                    count[y * geom.in_w + x] += 1;
                }
            }
        }
        count.iter().filter(|&&c| c >= 2).count() * geom.in_c
    }
}

/// Tile grid for at most `n` tiles over an `h`×`w` output: the largest tile
/// count, then the squarest tiles, then more splits along the longer axis.
pub fn grid(n: usize, h: usize, w: usize) -> (usize, usize) {
    let mut best = (1, 1);
    let mut best_key = (0usize, usize::MAX, 0usize);
    for gy in 1..=h.min(n) {
        let gx = (n / gy).min(w);
        let th = h.div_ceil(gy);
        let tw = w.div_ceil(gx);
        let along_long = if h >= w { gy } else { gx };
        let key = (gy * gx, th.abs_diff(tw), along_long);
        if key.0 > best_key.0
            || (key.0 == best_key.0
                && (key.1 < best_key.1 || (key.1 == best_key.1 && key.2 > best_key.2)))
        {
            best = (gy, gx);
            best_key = key;
        }
    }
    best
}

/// Near-equal split of `0..n` into `parts` ranges.
fn split(n: usize, parts: usize) -> Vec<Range<usize>> {
    (0..parts)
        .map(|i| i * n / parts..(i + 1) * n / parts)
        .collect()
}

fn chunks(n: usize, size: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(size))
        .map(|i| i * size..((i + 1) * size).min(n))
        .collect()
}

/// Assign tiles to (round, subarray); each tile is then split into `lanes`
/// halves that share the subarray and the round.
fn assign(
    groups: Vec<Vec<Tile>>,
    s: usize,
    lanes: usize,
    halve: &dyn Fn(&Tile) -> Vec<Tile>,
) -> (Vec<Tile>, usize) {
    let mut out = Vec::new();
    let mut round = 0;
    for group in groups {
        let n = group.len();
        for (k, mut t) in group.into_iter().enumerate() {
            t.round = round + k / s;
            t.subarray = k % s;
            if lanes == 1 {
                out.push(t);
            } else {
                out.extend(halve(&t));
            }
        }
        round += n.div_ceil(s);
    }
    (out, round)
}

fn halves(r: &Range<usize>) -> [Range<usize>; 2] {
    let mid = r.start + r.len().div_ceil(2);
    [r.start..mid, mid..r.end]
}

fn lane_tiles(parts: [Tile; 2]) -> Vec<Tile> {
    parts
        .into_iter()
        .enumerate()
        .filter(|(_, p)| p.output_count() > 0)
        .map(|(lane, p)| Tile { lane, ..p })
        .collect()
}

/// CONV lanes share the broadcast weight, so a tile splits spatially. Every
/// tile splits along the same axis so lane halves line up across subarrays.
fn halve_conv(t: &Tile, by_rows: bool, stride: usize, k: [usize; 2]) -> Vec<Tile> {
    let part = |ys: Range<usize>, xs: Range<usize>| Tile {
        in_y: ys.start * stride..(ys.end.max(ys.start + 1) - 1) * stride + k[0],
        in_x: xs.start * stride..(xs.end.max(xs.start + 1) - 1) * stride + k[1],
        out_y: ys,
        out_x: xs,
        ..t.clone()
    };
    let parts = if by_rows {
        halves(&t.out_y).map(|ys| part(ys, t.out_x.clone()))
    } else {
        halves(&t.out_x).map(|xs| part(t.out_y.clone(), xs))
    };
    lane_tiles(parts)
}

/// FC lanes hold different weights against the same broadcast input.
fn halve_fc(t: &Tile) -> Vec<Tile> {
    lane_tiles(halves(&t.out_f).map(|f| Tile {
        out_f: f,
        ..t.clone()
    }))
}

pub fn plan_conv(
    geom: &ConvGeom,
    imo_mode: WordMode,
    config: &ArrayConfig,
) -> Result<TilePlan, MapError> {
    geom.validate()?;
    let (avail, lgw) = capacity(&config.subarray)?;
    let lanes = imo_mode.lanes();
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let kk = geom.k_h * geom.k_w;

    // fewest filter groups, then fewest passes, for which a single output fits
    let mut choice = None;
    'search: for groups in 1..=geom.filters {
        let fk = geom.filters.div_ceil(groups);
        for p in 1..=geom.in_c {
            let cc = geom.in_c.div_ceil(p);
            let passes = geom.in_c.div_ceil(cc);
            if fits(avail, lgw, kk * cc, fk, passes) {
                choice = Some((fk, cc, passes));
                break 'search;
            }
        }
    }
    let (fk, cc, passes) = choice.ok_or_else(|| {
        MapError::Capacity(format!(
            "a single {}x{} output does not fit {} data words even with one channel and one filter",
            geom.k_h, geom.k_w, avail
        ))
    })?;

    let tile_dims = |gy: usize, gx: usize| {
        let (th, tw) = (oh.div_ceil(gy), ow.div_ceil(gx));
        (
            th,
            tw,
            (th - 1) * geom.stride + geom.k_h,
            (tw - 1) * geom.stride + geom.k_w,
        )
    };
    let mut n = config.subarrays.min(oh * ow);
    let (gy, gx) = loop {
        let (gy, gx) = grid(n, oh, ow);
        let (th, tw, rh, rw) = tile_dims(gy, gx);
        if fits(avail, lgw, rh * rw * cc, th * tw * fk, passes) {
            break (gy, gx);
        }
        n += 1;
    };
    let (th, tw, rh, rw) = tile_dims(gy, gx);

    let mut groups = Vec::new();
    for f in chunks(geom.filters, fk) {
        let mut g = Vec::new();
        for ys in split(oh, gy) {
            for xs in split(ow, gx) {
                g.push(Tile {
                    round: 0,
                    subarray: 0,
                    lane: 0,
                    in_y: ys.start * geom.stride..(ys.end - 1) * geom.stride + geom.k_h,
                    in_x: xs.start * geom.stride..(xs.end - 1) * geom.stride + geom.k_w,
                    out_y: ys.clone(),
                    out_x: xs,
                    out_f: f.clone(),
                });
            }
        }
        groups.push(g);
    }
    // split rows if every tile has an even row count, else columns if every
    // tile has an even column count, else the longer tile axis
    let even = |n: usize, g: usize| split(n, g).iter().all(|r| r.len() % 2 == 0);
    let by_rows = even(oh, gy) || (!even(ow, gx) && th >= tw);
    let halve = |t: &Tile| halve_conv(t, by_rows, geom.stride, [geom.k_h, geom.k_w]);
    let (tiles, rounds) = assign(groups, config.subarrays, lanes, &halve);
    Ok(TilePlan {
        spec: LayerSpec::Conv {
            geom: *geom,
            imo_mode,
        },
        layout: Layout {
            data_words: rh * rw * cc,
            outputs: th * tw * fk,
            partial: passes > 1,
            avail,
            lg_words: lgw,
        },
        tiles,
        rounds,
        depth: chunks(geom.in_c, cc),
        tile_out: [th, tw, fk],
        tile_in: [rh, rw],
    })
}

pub fn plan_fc(
    inputs: usize,
    outputs: usize,
    imo_mode: WordMode,
    config: &ArrayConfig,
) -> Result<TilePlan, MapError> {
    if inputs == 0 || outputs == 0 {
        return Err(MapError::Model(ModelError::Shape("empty FC layer".into())));
    }
    let (avail, lgw) = capacity(&config.subarray)?;
    let lanes = imo_mode.lanes();
    let feasible = |per: usize| {
        (1..=inputs).find_map(|p| {
            let cx = inputs.div_ceil(p);
            let passes = inputs.div_ceil(cx);
            fits(avail, lgw, per * cx, per, passes).then_some((cx, passes))
        })
    };
    let mut per = outputs.div_ceil(config.subarrays.min(outputs));
    let (cx, _) = loop {
        if let Some(c) = feasible(per) {
            break c;
        }
        if per == 1 {
            return Err(MapError::Capacity(format!(
                "one FC output does not fit {avail} words"
            )));
        }
        per -= 1;
    };
    let group: Vec<Tile> = chunks(outputs, per)
        .into_iter()
        .map(|f| Tile {
            round: 0,
            subarray: 0,
            lane: 0,
            out_y: 0..1,
            out_x: 0..1,
            out_f: f,
            in_y: 0..1,
            in_x: 0..inputs,
        })
        .collect();
    let (tiles, rounds) = assign(vec![group], config.subarrays, lanes, &halve_fc);
    let depth = chunks(inputs, cx);
    Ok(TilePlan {
        spec: LayerSpec::Fc {
            inputs,
            outputs,
            imo_mode,
        },
        layout: Layout {
            data_words: per * cx,
            outputs: per,
            partial: depth.len() > 1,
            avail,
            lg_words: lgw,
        },
        tiles,
        rounds,
        depth,
        tile_out: [1, 1, per],
        tile_in: [1, inputs],
    })
}

pub fn plan_layer(layer: &Layer, config: &ArrayConfig) -> Result<TilePlan, MapError> {
    match LayerSpec::of(layer)? {
        LayerSpec::Conv { geom, imo_mode } => plan_conv(&geom, imo_mode, config),
        LayerSpec::Fc {
            inputs,
            outputs,
            imo_mode,
        } => plan_fc(inputs, outputs, imo_mode, config),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Write {
        subarray: usize,
        index: usize,
        word: FxWord,
    },
    Broadcast {
        instr: BCInstr,
        acc: usize,
        imo: usize,
        dest: usize,
        subarrays: Vec<usize>,
        class: OpClass,
    },
    /// Read one output word; each lane maps to a flat output index, if any.
    Read {
        subarray: usize,
        index: usize,
        lanes: Vec<Option<usize>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub steps: Vec<Step>,
    pub mode: WordMode,
    pub out_shape: [usize; 3],
    /// Per flat output: power-of-two divisor applied on read-back.
    pub out_shift: Vec<u32>,
}

impl Program {
    pub fn count(&self, class: OpClass) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s, Step::Broadcast { class: c, .. } if *c == class))
            .count()
    }
}

/// Everything the emitter needs for one round.
struct RoundWork<'a> {
    passes: Vec<PassWork<'a>>,
    /// Per output slot: participating subarrays.
    participants: Vec<Vec<usize>>,
    reads: Vec<(usize, usize, Vec<Option<usize>>)>,
}

struct PassWork<'a> {
    writes: Vec<(usize, usize, FxWord)>,
    /// Per output slot: (local data index, schedule).
    terms: Vec<Vec<(usize, &'a MulSchedule)>>,
}

fn bc(
    steps: &mut Vec<Step>,
    instr: BCInstr,
    acc: usize,
    imo: usize,
    dest: usize,
    subs: &[usize],
    class: OpClass,
) {
    steps.push(Step::Broadcast {
        instr,
        acc,
        imo,
        dest,
        subarrays: subs.to_vec(),
        class,
    });
}

fn emit_round(steps: &mut Vec<Step>, layout: &Layout, mode: WordMode, work: RoundWork<'_>) {
    let (z, a, p) = (layout.zero(), layout.acc(), layout.partial_word());
    let mut sum_init = vec![false; layout.outputs];
    for (q, pass) in work.passes.into_iter().enumerate() {
        steps.extend(
            pass.writes
                .into_iter()
                .map(|(subarray, index, word)| Step::Write {
                    subarray,
                    index,
                    word,
                }),
        );
        for (j, terms) in pass.terms.iter().enumerate() {
            let subs = &work.participants[j];
            if subs.is_empty() {
                continue;
            }
            let target = if q == 0 { layout.sum(j) } else { p };
            let mut target_init = false;
            for &(idx, sched) in terms {
                if sched.skipped {
                    continue;
                }
                for (n, instr) in sched.instrs.iter().enumerate() {
                    let acc = if n == 0 { z } else { a };
                    bc(steps, *instr, acc, idx, a, subs, OpClass::Mac);
                }
                if target_init {
                    bc(
                        steps,
                        BCInstr::add(mode),
                        target,
                        a,
                        target,
                        subs,
                        OpClass::Merge,
                    );
                } else {
                    bc(
                        steps,
                        BCInstr::copy(mode),
                        a,
                        a,
                        target,
                        subs,
                        OpClass::Merge,
                    );
                    target_init = true;
                }
            }
            if q == 0 {
                sum_init[j] = target_init;
            } else if target_init {
                let s = layout.sum(j);
                if sum_init[j] {
                    bc(steps, BCInstr::add(mode), s, p, s, subs, OpClass::Merge);
                } else {
                    bc(steps, BCInstr::copy(mode), p, p, s, subs, OpClass::Merge);
                    sum_init[j] = true;
                }
            }
        }
    }
    for (j, subs) in work.participants.iter().enumerate() {
        if !subs.is_empty() && !sum_init[j] {
            bc(
                steps,
                BCInstr::copy(mode),
                z,
                z,
                layout.sum(j),
                subs,
                OpClass::Other,
            );
        }
    }
    for (subarray, j, lanes) in work.reads {
        steps.push(Step::Read {
            subarray,
            index: layout.sum(j),
            lanes,
        });
    }
}

/// Tiles grouped by subarray within a round, indexed by lane.
fn by_subarray(plan: &TilePlan, round: usize) -> Vec<(usize, Vec<Option<&Tile>>)> {
    let mut subs: Vec<(usize, Vec<Option<&Tile>>)> = Vec::new();
    for t in plan.round_tiles(round) {
        let pos = match subs.iter().position(|(s, _)| *s == t.subarray) {
            Some(p) => p,
            None => {
                subs.push((t.subarray, vec![None; plan.lanes()]));
                subs.len() - 1
            }
        };
        subs[pos].1[t.lane] = Some(t);
    }
    subs.sort_by_key(|(s, _)| *s);
    subs
}

fn conv_schedules(layer: &ConvLayer, nes: u32) -> Result<Vec<Vec<MulSchedule>>, MapError> {
    (0..layer.geom.filters)
        .map(|f| {
            let stream = gcw::encode_filter(layer.filter(f), layer.filter_bits(f))?;
            Ok(gcw::weights_to_instructions(&stream, nes, layer.imo_mode)?)
        })
        .collect()
}

fn lower_conv(
    plan: &TilePlan,
    layer: &ConvLayer,
    input: &Tensor,
    nes: u32,
) -> Result<Program, MapError> {
    let g = layer.geom;
    let mode = layer.imo_mode;
    let lay = plan.layout;
    let fmt = mode.format();
    let sched = conv_schedules(layer, nes)?;
    let imo: Vec<i32> = input
        .data
        .iter()
        .map(|&v| quantize_saturating(v, fmt))
        .collect();
    let [th, tw, fk] = plan.tile_out;
    let [_, rw] = plan.tile_in;
    let cc = plan.depth_chunk();
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut steps = Vec::new();
    for r in 0..plan.rounds {
        let subs = by_subarray(plan, r);
        // output slot -> (ty, tx, fl)
        let slot = |j: usize| (j / fk / tw, j / fk % tw, j % fk);
        let lane_out = |t: &Tile, j: usize| {
            let (ty, tx, fl) = slot(j);
            (ty < t.out_y.len() && tx < t.out_x.len() && fl < t.out_f.len()).then(|| {
                let (oy, ox, f) = (t.out_y.start + ty, t.out_x.start + tx, t.out_f.start + fl);
                (oy * ow + ox) * g.filters + f
            })
        };
        let participants: Vec<Vec<usize>> = (0..lay.outputs)
            .map(|j| {
                subs.iter()
                    .filter(|(_, lanes)| lanes.iter().flatten().any(|t| lane_out(t, j).is_some()))
                    .map(|(s, _)| *s)
                    .collect()
            })
            .collect();
        let reads = subs
            .iter()
            .flat_map(|(s, lanes)| {
                (0..lay.outputs).filter_map(move |j| {
                    let outs: Vec<Option<usize>> = lanes
                        .iter()
                        .map(|t| t.and_then(|t| lane_out(t, j)))
                        .collect();
                    outs.iter().any(Option::is_some).then_some((*s, j, outs))
                })
            })
            .collect();
        let f0 = subs[0]
            .1
            .iter()
            .flatten()
            .next()
            .expect("nonempty round")
            .out_f
            .start;
        let mut passes = Vec::new();
        for depth in &plan.depth {
            let mut writes = Vec::new();
            for (s, lanes) in &subs {
                for y in 0..plan.tile_in[0] {
                    for x in 0..rw {
                        for cl in 0..depth.len() {
                            let vals: Vec<Option<i32>> = lanes
                                .iter()
                                .map(|t| {
                                    t.filter(|t| y < t.in_y.len() && x < t.in_x.len()).map(|t| {
                                        imo[input.index(
                                            t.in_y.start + y,
                                            t.in_x.start + x,
                                            depth.start + cl,
                                        )]
                                    })
                                })
                                .collect();
                            if vals.iter().any(Option::is_some) {
                                let raw: Vec<i32> = vals.iter().map(|v| v.unwrap_or(0)).collect();
                                writes.push((
                                    *s,
                                    lay.data((y * rw + x) * cc + cl),
                                    FxWord::from_lanes(&raw, mode),
                                ));
                            }
                        }
                    }
                }
            }
            let terms = (0..lay.outputs)
                .map(|j| {
                    let (ty, tx, fl) = slot(j);
                    let f = f0 + fl;
                    if f >= g.filters || ty >= th {
                        return Vec::new();
                    }
                    let mut t = Vec::new();
                    for ky in 0..g.k_h {
                        for kx in 0..g.k_w {
                            for c in depth.clone() {
                                let (y, x) = (ty * g.stride + ky, tx * g.stride + kx);
                                let idx = lay.data((y * rw + x) * cc + (c - depth.start));
                                t.push((idx, &sched[f][(ky * g.k_w + kx) * g.in_c + c]));
                            }
                        }
                    }
                    t
                })
                .collect();
            passes.push(PassWork { writes, terms });
        }
        emit_round(
            &mut steps,
            &lay,
            mode,
            RoundWork {
                passes,
                participants,
                reads,
            },
        );
    }
    let out_shift = (0..oh * ow * g.filters)
        .map(|o| layer.dropped_msbs[o % g.filters])
        .collect();
    Ok(Program {
        steps,
        mode,
        out_shape: [oh, ow, g.filters],
        out_shift,
    })
}

fn lower_fc(
    plan: &TilePlan,
    layer: &FcLayer,
    input: &Tensor,
    nes: u32,
) -> Result<Program, MapError> {
    let mode = layer.imo_mode;
    let lay = plan.layout;
    let bo_fmt = fxp::QFormat::new(layer.bo_bits)?;
    let cx = plan.depth_chunk();
    let mut cache: HashMap<i32, MulSchedule> = HashMap::new();
    let xs: Vec<i32> = input
        .data
        .iter()
        .map(|&v| quantize_saturating(v, bo_fmt))
        .collect();
    for &b in &xs {
        if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(b) {
            e.insert(
                fxp::schedule_multiply(BoBits::from_raw(b, layer.bo_bits)?, nes)?.in_mode(mode),
            );
        }
    }
    let mut steps = Vec::new();
    for r in 0..plan.rounds {
        let subs = by_subarray(plan, r);
        let lane_out = |t: &Tile, j: usize| (j < t.out_f.len()).then(|| t.out_f.start + j);
        let participants: Vec<Vec<usize>> = (0..lay.outputs)
            .map(|j| {
                subs.iter()
                    .filter(|(_, lanes)| lanes.iter().flatten().any(|t| lane_out(t, j).is_some()))
                    .map(|(s, _)| *s)
                    .collect()
            })
            .collect();
        let reads = subs
            .iter()
            .flat_map(|(s, lanes)| {
                (0..lay.outputs).filter_map(move |j| {
                    let outs: Vec<Option<usize>> = lanes
                        .iter()
                        .map(|t| t.and_then(|t| lane_out(t, j)))
                        .collect();
                    outs.iter().any(Option::is_some).then_some((*s, j, outs))
                })
            })
            .collect();
        let mut passes = Vec::new();
        for depth in &plan.depth {
            let mut writes = Vec::new();
            for (s, lanes) in &subs {
                for j in 0..lay.outputs {
                    if !lanes.iter().flatten().any(|t| j < t.out_f.len()) {
                        continue;
                    }
                    for x in depth.clone() {
                        let raw: Vec<i32> = lanes
                            .iter()
                            .map(|t| {
                                t.and_then(|t| lane_out(t, j))
                                    .map_or(0, |y| fc_imo_raw(layer, x, y))
                            })
                            .collect();
                        writes.push((
                            *s,
                            lay.data(j * cx + (x - depth.start)),
                            FxWord::from_lanes(&raw, mode),
                        ));
                    }
                }
            }
            let terms = (0..lay.outputs)
                .map(|j| {
                    depth
                        .clone()
                        .map(|x| (lay.data(j * cx + (x - depth.start)), &cache[&xs[x]]))
                        .collect()
                })
                .collect();
            passes.push(PassWork { writes, terms });
        }
        emit_round(
            &mut steps,
            &lay,
            mode,
            RoundWork {
                passes,
                participants,
                reads,
            },
        );
    }
    Ok(Program {
        steps,
        mode,
        out_shape: [1, 1, layer.outputs],
        out_shift: vec![0; layer.outputs],
    })
}

/// Lower a plan for `layer` applied to `input` into an executable program.
pub fn lower_plan(
    plan: &TilePlan,
    layer: &Layer,
    input: &Tensor,
    nes: u32,
) -> Result<Program, MapError> {
    if LayerSpec::of(layer)? != plan.spec {
        return Err(MapError::PlanMismatch);
    }
    layer.output_shape(input.shape)?;
    match layer {
        Layer::Conv(c) => lower_conv(plan, c, input, nes),
        Layer::Fc(f) => lower_fc(plan, f, input, nes),
        _ => unreachable!(),
    }
}

/// Run a program and return the layer output read back from the array.
pub fn execute(array: &mut BcArray, program: &Program) -> Result<Tensor, MapError> {
    let cfg = array.config().subarray;
    let frac = program.mode.format().frac_bits() as i32;
    let mut out = Tensor::zeros(program.out_shape);
    let mut bindings = Vec::new();
    for step in &program.steps {
        match step {
            Step::Write {
                subarray,
                index,
                word,
            } => array.write_word(Address::from_index(&cfg, *subarray, *index), *word)?,
            Step::Broadcast {
                instr,
                acc,
                imo,
                dest,
                subarrays,
                class,
            } => {
                bindings.clear();
                bindings.extend(subarrays.iter().map(|&s| Binding {
                    acc: Address::from_index(&cfg, s, *acc),
                    imo: Address::from_index(&cfg, s, *imo),
                    dest: Address::from_index(&cfg, s, *dest),
                }));
                array.broadcast_exec(instr, &bindings, *class)?;
            }
            Step::Read {
                subarray,
                index,
                lanes,
            } => {
                let word = array.read_word(Address::from_index(&cfg, *subarray, *index))?;
                for (l, o) in lanes.iter().enumerate() {
                    if let Some(o) = *o {
                        let shift = frac + program.out_shift[o] as i32;
                        out.data[o] = word.lane(l) as f64 * 2f64.powi(-shift);
                    }
                }
            }
        }
    }
    Ok(out)
}
