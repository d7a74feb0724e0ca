//! End-to-end inference on the simulated array, layer by layer, with
//! optional bit-exact verification against the fixed-point golden executor.

use crate::bcarray::{
    report_from, ArrayConfig, ArrayError, BcArray, CycleBreakdown, EnergyBreakdown, Ledger, OpClass,
};
use crate::mapper::{self, MapError, TilePlan};
use crate::netmodel::{golden_layer_fixed, run_host_op, ModelError, ModelSize, Network, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("layer {layer} ({kind}): {source}")]
    Plan {
        layer: usize,
        kind: &'static str,
        source: MapError,
    },
    #[error("layer {layer}: output {index} is {got}, golden executor gives {expected}")]
    Mismatch {
        layer: usize,
        index: usize,
        got: f64,
        expected: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Array(#[from] ArrayError),
}

/// Plan statistics for one MAC layer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStats {
    pub tiles: usize,
    pub rounds: usize,
    pub passes: usize,
    pub subarrays_used: usize,
    pub words_in: usize,
    pub words_out: usize,
    pub halo_cells: usize,
    pub partial_merges: usize,
    pub resident_words: usize,
}

impl From<&TilePlan> for PlanStats {
    fn from(p: &TilePlan) -> Self {
        PlanStats {
            tiles: p.tiles.len(),
            rounds: p.rounds,
            passes: p.passes(),
            subarrays_used: p.subarrays_used(),
            words_in: p.transfer_in_words(),
            words_out: p.read_words(),
            halo_cells: p.halo_cells(),
            partial_merges: p.partial_merges(),
            resident_words: p.layout.resident(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub index: usize,
    pub kind: String,
    pub macs: u64,
    pub cycles: CycleBreakdown,
    pub energy_pj: EnergyBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub subarrays: usize,
    pub nes: u32,
    pub clock_freq_hz: f64,
    pub layers: Vec<LayerReport>,
    pub cycles: CycleBreakdown,
    pub energy_pj: EnergyBreakdown,
    pub total_cycles: u64,
    pub total_energy_pj: f64,
    pub inference_time_s: f64,
    pub inferences_per_second: f64,
    pub model_size: ModelSize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

impl RunReport {
    pub fn mac_share(&self) -> f64 {
        if self.total_cycles == 0 {
            0.0
        } else {
            self.cycles.mac as f64 / self.total_cycles as f64
        }
    }
}

fn merge(into: &mut Ledger, l: &Ledger) {
    into.cycles.add(&l.cycles);
    into.energy.add(&l.energy);
    into.reads += l.reads;
    into.writes += l.writes;
    into.bc_ops += l.bc_ops;
    into.decoded += l.decoded;
    into.mac_broadcasts += l.mac_broadcasts;
    into.heterogeneous_broadcasts += l.heterogeneous_broadcasts;
}

pub struct Simulation {
    pub output: Tensor,
    pub report: RunReport,
    pub ledger: Ledger,
}

/// Run `net` on `input`. With `verify`, each MAC layer's output must equal
/// the golden fixed-point executor's output for the same layer input.
pub fn simulate(
    net: &Network,
    input: &Tensor,
    config: &ArrayConfig,
    verify: bool,
) -> Result<Simulation, SimError> {
    net.validate()?;
    let mut array = BcArray::new(*config)?;
    let nes = config.subarray.nes;
    let mut x = input.clone();
    let mut layers = Vec::new();
    let mut total = Ledger::default();
    for (i, layer) in net.layers.iter().enumerate() {
        if !layer.is_mac() {
            x = run_host_op(layer, &x)?;
            layers.push(LayerReport {
                index: i,
                kind: layer.kind_name().into(),
                macs: 0,
                cycles: CycleBreakdown::default(),
                energy_pj: EnergyBreakdown::default(),
                plan: None,
            });
            continue;
        }
        let plan_err = |source| SimError::Plan {
            layer: i,
            kind: layer.kind_name(),
            source,
        };
        let plan = mapper::plan_layer(layer, config).map_err(plan_err)?;
        let program = mapper::lower_plan(&plan, layer, &x, nes).map_err(plan_err)?;
        array.reset_ledger();
        let y = mapper::execute(&mut array, &program).map_err(plan_err)?;
        if verify {
            let golden = golden_layer_fixed(layer, &x)?.tensor;
            if let Some(k) = (0..y.len()).find(|&k| y.data[k] != golden.data[k]) {
                return Err(SimError::Mismatch {
                    layer: i,
                    index: k,
                    got: y.data[k],
                    expected: golden.data[k],
                });
            }
        }
        let ledger = array.ledger().clone();
        let rep = report_from(&ledger, config);
        merge(&mut total, &ledger);
        layers.push(LayerReport {
            index: i,
            kind: layer.kind_name().into(),
            macs: layer.macs(),
            cycles: rep.cycles,
            energy_pj: rep.energy_pj,
            plan: Some(PlanStats::from(&plan)),
        });
        debug_assert_eq!(
            ledger.cycles.mac,
            program.count(OpClass::Mac) as u64 * config.subarray.bc_cycle_cost
        );
        x = y;
    }
    let rep = report_from(&total, config);
    let total_cycles = rep.cycles.total();
    let clock = config.energy.clock_freq_hz;
    let report = RunReport {
        subarrays: config.subarrays,
        nes,
        clock_freq_hz: clock,
        layers,
        cycles: rep.cycles,
        energy_pj: rep.energy_pj,
        total_cycles,
        total_energy_pj: rep.energy_pj.total(),
        inference_time_s: total_cycles as f64 / clock,
        inferences_per_second: if total_cycles == 0 {
            0.0
        } else {
            clock / total_cycles as f64
        },
        model_size: ModelSize::of(net)?,
        accuracy: None,
    };
    Ok(Simulation {
        output: x,
        report,
        ledger: total,
    })
}

/// MAC cycles each layer would take, without executing anything but the
/// lowering. Host layers report zero.
pub fn mac_cycles(
    net: &Network,
    input: &Tensor,
    config: &ArrayConfig,
) -> Result<Vec<u64>, SimError> {
    let mut x = input.clone();
    let mut out = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        if layer.is_mac() {
            let plan_err = |source| SimError::Plan {
                layer: i,
                kind: layer.kind_name(),
                source,
            };
            let plan = mapper::plan_layer(layer, config).map_err(plan_err)?;
            let program =
                mapper::lower_plan(&plan, layer, &x, config.subarray.nes).map_err(plan_err)?;
            out.push(program.count(OpClass::Mac) as u64 * config.subarray.bc_cycle_cost);
            x = golden_layer_fixed(layer, &x)?.tensor;
        } else {
            out.push(0);
            x = run_host_op(layer, &x)?;
        }
    }
    Ok(out)
}
