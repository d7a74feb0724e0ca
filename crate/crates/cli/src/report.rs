//! Text and CSV renderings of a `RunReport`, and report comparison.

use anyhow::{bail, Result};
use bitline::bcarray::{CycleBreakdown, EnergyBreakdown};
use bitline::pipeline::RunReport;
use serde::{Deserialize, Serialize};
use std::fmt::Write;

/// One CSV row. Per-layer rows carry the layer index; the last row has
/// `layer = "total"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub layer: String,
    pub kind: String,
    pub macs: u64,
    pub cycles_mac: u64,
    pub cycles_transfer: u64,
    pub cycles_merge: u64,
    pub cycles_other: u64,
    pub cycles_total: u64,
    pub energy_mac_pj: f64,
    pub energy_transfer_pj: f64,
    pub energy_merge_pj: f64,
    pub energy_decode_pj: f64,
    pub energy_leakage_pj: f64,
    pub energy_other_pj: f64,
    pub energy_total_pj: f64,
}

fn row(layer: String, kind: &str, macs: u64, c: &CycleBreakdown, e: &EnergyBreakdown) -> Row {
    Row {
        layer,
        kind: kind.to_string(),
        macs,
        cycles_mac: c.mac,
        cycles_transfer: c.transfer,
        cycles_merge: c.merge,
        cycles_other: c.other,
        cycles_total: c.total(),
        energy_mac_pj: e.mac,
        energy_transfer_pj: e.transfer,
        energy_merge_pj: e.merge,
        energy_decode_pj: e.decode,
        energy_leakage_pj: e.leakage,
        energy_other_pj: e.other,
        energy_total_pj: e.total(),
    }
}

pub fn rows(r: &RunReport) -> Vec<Row> {
    let mut out: Vec<Row> = r
        .layers
        .iter()
        .map(|l| {
            row(
                l.index.to_string(),
                &l.kind,
                l.macs,
                &l.cycles,
                &l.energy_pj,
            )
        })
        .collect();
    let macs = r.layers.iter().map(|l| l.macs).sum();
    out.push(row(
        "total".into(),
        "network",
        macs,
        &r.cycles,
        &r.energy_pj,
    ));
    out
}

pub fn to_csv(r: &RunReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows(r) {
        w.serialize(row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn pct(part: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * part as f64 / total as f64
    }
}

pub fn to_text(r: &RunReport) -> String {
    let mut s = String::new();
    let c = &r.cycles;
    let e = &r.energy_pj;
    let _ = writeln!(
        s,
        "subarrays {}  nes {}  clock {:.3} GHz",
        r.subarrays,
        r.nes,
        r.clock_freq_hz / 1e9
    );
    let _ = writeln!(
        s,
        "{:>5} {:<8} {:>10} {:>12} {:>10} {:>10} {:>8} {:>14}",
        "layer", "kind", "macs", "cycles", "mac", "transfer", "merge", "energy_pj"
    );
    for l in &r.layers {
        let _ = writeln!(
            s,
            "{:>5} {:<8} {:>10} {:>12} {:>10} {:>10} {:>8} {:>14.3}",
            l.index,
            l.kind,
            l.macs,
            l.cycles.total(),
            l.cycles.mac,
            l.cycles.transfer,
            l.cycles.merge,
            l.energy_pj.total()
        );
    }
    let t = r.total_cycles;
    let _ = writeln!(
        s,
        "cycles   {t} (mac {:.1}%, transfer {:.1}%, merge {:.1}%, other {:.1}%)",
        pct(c.mac, t),
        pct(c.transfer, t),
        pct(c.merge, t),
        pct(c.other, t)
    );
    let _ = writeln!(
        s,
        "energy   {:.3} pJ (mac {:.3}, transfer {:.3}, merge {:.3}, decode {:.3}, leakage {:.3}, other {:.3})",
        r.total_energy_pj, e.mac, e.transfer, e.merge, e.decode, e.leakage, e.other
    );
    let _ = writeln!(
        s,
        "time     {:.6e} s per inference, {:.1} inferences/s",
        r.inference_time_s, r.inferences_per_second
    );
    let m = &r.model_size;
    let _ = writeln!(
        s,
        "weights  conv {} raw bits, {} GCW bits ({:.3}x), fc {} bits",
        m.conv_raw_bits,
        m.conv_code_bits,
        m.conv_compression(),
        m.fc_bits
    );
    if let Some(a) = r.accuracy {
        let _ = writeln!(s, "accuracy {a:.6}");
    }
    s
}

/// Per-row comparison of `base` against `other`: speed-up is base cycles
/// over other cycles, energy ratio is other energy over base energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub layer: String,
    pub kind: String,
    pub cycles_base: u64,
    pub cycles_other: u64,
    pub speedup: f64,
    pub energy_base_pj: f64,
    pub energy_other_pj: f64,
    pub energy_ratio: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

pub fn compare(base: &RunReport, other: &RunReport) -> Result<Vec<CompareRow>> {
    let (a, b) = (rows(base), rows(other));
    if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.kind != y.kind) {
        bail!("reports describe different networks");
    }
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| CompareRow {
            layer: x.layer.clone(),
            kind: x.kind.clone(),
            cycles_base: x.cycles_total,
            cycles_other: y.cycles_total,
            speedup: ratio(x.cycles_total as f64, y.cycles_total as f64),
            energy_base_pj: x.energy_total_pj,
            energy_other_pj: y.energy_total_pj,
            energy_ratio: ratio(y.energy_total_pj, x.energy_total_pj),
        })
        .collect())
}

pub fn compare_csv(rows: &[CompareRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn compare_text(rows: &[CompareRow]) -> String {
    let mut s = format!(
        "{:>5} {:<8} {:>12} {:>12} {:>9} {:>9}\n",
        "layer", "kind", "cycles", "cycles'", "speedup", "energy'/e"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>5} {:<8} {:>12} {:>12} {:>9.4} {:>9.4}",
            r.layer, r.kind, r.cycles_base, r.cycles_other, r.speedup, r.energy_ratio
        );
    }
    s
}
