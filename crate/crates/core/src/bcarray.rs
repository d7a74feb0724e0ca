//! Functional model of a bit-line computing memory.
//!
//! Each subarray is a set of Local Groups (LGs); every LG has `rows_per_lg`
//! rows of `ways` interleaved 16-bit words. An in-memory instruction reads two
//! words from distinct LGs, passes each through its LG periphery read port
//! (embedded right shift, optional bitwise inversion) and sums them in the
//! bit-line computing unit, a ripple-carry adder along the 16 bit columns.
//! In 2x8 mode the column 7/8 links are cut: shifts sign-extend from column 7
//! and the carry into column 8 is driven by the instruction instead of
//! column 7.
//!
//! Every access is charged to a [`Ledger`] in cycles and femtojoules.

use crate::fxp::{BCInstr, FxWord, WordMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ArrayError {
    #[error("address {0} is outside the configured array")]
    OutOfRange(Address),
    #[error("operands {0} and {1} share a local group")]
    SameLocalGroup(Address, Address),
    #[error("operands of one instruction span subarrays {0} and {1}")]
    CrossSubarray(usize, usize),
    #[error("accumulator shift {shift} exceeds NES = {nes}")]
    ShiftBeyondNes { shift: u8, nes: u32 },
    #[error("in-memory operand shift {0} unsupported (max 1)")]
    ImoShift(u8),
    #[error("subarray {0} bound twice in one broadcast")]
    DuplicateBinding(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubarrayConfig {
    pub lg_count: usize,
    pub rows_per_lg: usize,
    pub ways: usize,
    pub word_bits: u32,
    pub nes: u32,
    /// Cycles charged per in-memory instruction, write-back included.
    pub bc_cycle_cost: u64,
}

impl Default for SubarrayConfig {
    fn default() -> Self {
        SubarrayConfig {
            lg_count: 5,
            rows_per_lg: 32,
            ways: 2,
            word_bits: 16,
            nes: 3,
            bc_cycle_cost: 1,
        }
    }
}

impl SubarrayConfig {
    pub fn capacity(&self) -> usize {
        self.lg_count * self.rows_per_lg * self.ways
    }

    pub fn lg_words(&self) -> usize {
        self.rows_per_lg * self.ways
    }

    pub fn validate(&self) -> Result<(), ArrayError> {
        let bad = |m: &str| Err(ArrayError::Config(m.to_string()));
        if self.lg_count < 2 {
            return bad("at least two local groups are required");
        }
        if self.rows_per_lg == 0 || self.ways == 0 {
            return bad("rows_per_lg and ways must be positive");
        }
        if self.word_bits != 16 {
            return bad("only 16-bit words are supported");
        }
        if self.nes == 0 || self.nes > 15 {
            return bad("nes must be in 1..=15");
        }
        if self.bc_cycle_cost == 0 {
            return bad("bc_cycle_cost must be positive");
        }
        Ok(())
    }
}

/// Energy and timing constants. Energies in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    pub e_read: f64,
    pub e_write: f64,
    pub e_shift_add: f64,
    pub e_decoder_cycle: f64,
    pub clock_freq_hz: f64,
    pub e_htree_word_transfer: f64,
    /// Leakage per subarray per cycle.
    pub p_leak_subarray: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            e_read: 376.0,
            e_write: 414.0,
            e_shift_add: 381.0,
            e_decoder_cycle: 0.001,
            clock_freq_hz: 2.2e9,
            e_htree_word_transfer: 0.0,
            p_leak_subarray: 0.0,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<(), ArrayError> {
        let vals = [
            self.e_read,
            self.e_write,
            self.e_shift_add,
            self.e_decoder_cycle,
            self.e_htree_word_transfer,
            self.p_leak_subarray,
        ];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ArrayError::Config("energies must be non-negative".into()));
        }
        if !(self.clock_freq_hz.is_finite() && self.clock_freq_hz > 0.0) {
            return Err(ArrayError::Config(
                "clock frequency must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Full array configuration, loadable from a TOML/JSON file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayConfig {
    pub subarrays: usize,
    pub subarray: SubarrayConfig,
    pub energy: EnergyParams,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        ArrayConfig {
            subarrays: 1,
            subarray: SubarrayConfig::default(),
            energy: EnergyParams::default(),
        }
    }
}

impl ArrayConfig {
    pub fn validate(&self) -> Result<(), ArrayError> {
        if self.subarrays == 0 {
            return Err(ArrayError::Config("need at least one subarray".into()));
        }
        self.subarray.validate()?;
        self.energy.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Address {
    pub subarray: usize,
    pub lg: usize,
    pub row: usize,
    pub way: usize,
}

impl std::fmt::Display for Address {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "s{}:lg{}:r{}:w{}",
            self.subarray, self.lg, self.row, self.way
        )
    }
}

impl Address {
    pub fn new(subarray: usize, lg: usize, row: usize, way: usize) -> Self {
        Address {
            subarray,
            lg,
            row,
            way,
        }
    }

    /// Address of the `index`-th word of a subarray (LG-major, then row, then way).
    pub fn from_index(cfg: &SubarrayConfig, subarray: usize, index: usize) -> Self {
        let lg = index / cfg.lg_words();
        let rem = index % cfg.lg_words();
        Address {
            subarray,
            lg,
            row: rem / cfg.ways,
            way: rem % cfg.ways,
        }
    }

    pub fn index(&self, cfg: &SubarrayConfig) -> usize {
        (self.lg * cfg.rows_per_lg + self.row) * cfg.ways + self.way
    }

    fn local(&self) -> (usize, usize, usize) {
        (self.lg, self.row, self.way)
    }
}

/// Ledger category for in-memory instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpClass {
    Mac,
    Merge,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleBreakdown {
    pub mac: u64,
    pub transfer: u64,
    pub merge: u64,
    pub other: u64,
}

impl CycleBreakdown {
    pub fn total(&self) -> u64 {
        self.mac + self.transfer + self.merge + self.other
    }

    pub fn add(&mut self, o: &CycleBreakdown) {
        self.mac += o.mac;
        self.transfer += o.transfer;
        self.merge += o.merge;
        self.other += o.other;
    }
}

/// Energy in femtojoules, kept as integers so summation order never matters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyFj {
    pub mac: u64,
    pub transfer: u64,
    pub merge: u64,
    pub decode: u64,
    pub leakage: u64,
    pub other: u64,
}

impl EnergyFj {
    pub fn total(&self) -> u64 {
        self.mac + self.transfer + self.merge + self.decode + self.leakage + self.other
    }

    pub fn add(&mut self, o: &EnergyFj) {
        self.mac += o.mac;
        self.transfer += o.transfer;
        self.merge += o.merge;
        self.decode += o.decode;
        self.leakage += o.leakage;
        self.other += o.other;
    }
}

/// Energy in picojoules for reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub mac: f64,
    pub transfer: f64,
    pub merge: f64,
    pub decode: f64,
    pub leakage: f64,
    pub other: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.mac + self.transfer + self.merge + self.decode + self.leakage + self.other
    }
}

impl From<EnergyFj> for EnergyBreakdown {
    fn from(e: EnergyFj) -> Self {
        let pj = |v: u64| v as f64 / 1000.0;
        EnergyBreakdown {
            mac: pj(e.mac),
            transfer: pj(e.transfer),
            merge: pj(e.merge),
            decode: pj(e.decode),
            leakage: pj(e.leakage),
            other: pj(e.other),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    pub cycles: CycleBreakdown,
    pub energy: EnergyFj,
    /// Per subarray: instructions executed in MAC broadcasts.
    pub mac_active: Vec<u64>,
    /// MAC broadcasts issued (one per global instruction).
    pub mac_broadcasts: u64,
    pub reads: u64,
    pub writes: u64,
    pub bc_ops: u64,
    pub decoded: u64,
    pub heterogeneous_broadcasts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub cycles: CycleBreakdown,
    pub energy_pj: EnergyBreakdown,
    pub utilization: Vec<f64>,
}

/// The three addresses bound to one subarray for a broadcast instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Binding {
    pub acc: Address,
    pub imo: Address,
    pub dest: Address,
}

#[derive(Debug, Clone, Copy)]
struct FemtoParams {
    read: u64,
    write: u64,
    shift_add: u64,
    decoder: u64,
    htree: u64,
    leak: u64,
}

impl From<&EnergyParams> for FemtoParams {
    fn from(p: &EnergyParams) -> Self {
        let fj = |v: f64| (v * 1000.0).round() as u64;
        FemtoParams {
            read: fj(p.e_read),
            write: fj(p.e_write),
            shift_add: fj(p.e_shift_add),
            decoder: fj(p.e_decoder_cycle),
            htree: fj(p.e_htree_word_transfer),
            leak: fj(p.p_leak_subarray),
        }
    }
}

/// LGP read port: embedded right shift with per-lane sign extension, then
/// optional inversion. Evaluated one bit column at a time.
fn read_port(word: u16, shift: u32, invert: bool, mode: WordMode) -> u16 {
    let mut out = 0u16;
    for col in 0..16u32 {
        // H1: column 7 takes its shift input from itself in 2x8 mode
        let top = if mode == WordMode::TwoX8 && col < 8 {
            7
        } else {
            15
        };
        let src = (col + shift).min(top);
        let mut bit = (word >> src) & 1;
        if invert {
            bit ^= 1;
        }
        out |= bit << col;
    }
    out
}

/// BCU ripple-carry adder. `carry_in` enters column 0 and, in 2x8 mode,
/// also column 8 through H2.
fn bcu_add(a: u16, b: u16, carry_in: bool, mode: WordMode) -> u16 {
    let mut carry = carry_in as u16;
    let mut out = 0u16;
    for col in 0..16 {
        if col == 8 && mode == WordMode::TwoX8 {
            carry = carry_in as u16;
        }
        let (x, y) = ((a >> col) & 1, (b >> col) & 1);
        out |= (x ^ y ^ carry) << col;
        carry = (x & y) | (carry & (x ^ y));
    }
    out
}

#[derive(Debug, Clone)]
struct Subarray {
    words: Vec<FxWord>,
}

#[derive(Debug, Clone)]
pub struct BcArray {
    config: ArrayConfig,
    fj: FemtoParams,
    subarrays: Vec<Subarray>,
    ledger: Ledger,
}

impl BcArray {
    pub fn new(config: ArrayConfig) -> Result<Self, ArrayError> {
        config.validate()?;
        let cap = config.subarray.capacity();
        Ok(BcArray {
            fj: FemtoParams::from(&config.energy),
            subarrays: vec![
                Subarray {
                    words: vec![FxWord::default(); cap]
                };
                config.subarrays
            ],
            ledger: Ledger {
                mac_active: vec![0; config.subarrays],
                ..Ledger::default()
            },
            config,
        })
    }

    pub fn config(&self) -> &ArrayConfig {
        &self.config
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn reset_ledger(&mut self) {
        self.ledger = Ledger {
            mac_active: vec![0; self.config.subarrays],
            ..Ledger::default()
        };
    }

    fn check(&self, a: Address) -> Result<usize, ArrayError> {
        let c = &self.config.subarray;
        if a.subarray >= self.config.subarrays
            || a.lg >= c.lg_count
            || a.row >= c.rows_per_lg
            || a.way >= c.ways
        {
            return Err(ArrayError::OutOfRange(a));
        }
        Ok(a.index(c))
    }

    fn charge_transfer(&mut self, words: u64, dir: Direction) {
        self.ledger.cycles.transfer += words;
        let per = match dir {
            Direction::In => self.fj.write,
            Direction::Out => self.fj.read,
        };
        self.ledger.energy.transfer += words * (per + self.fj.htree);
    }

    /// Host write through the H-tree.
    pub fn write_word(&mut self, addr: Address, word: FxWord) -> Result<(), ArrayError> {
        let i = self.check(addr)?;
        self.subarrays[addr.subarray].words[i] = word;
        self.ledger.writes += 1;
        self.charge_transfer(1, Direction::In);
        Ok(())
    }

    /// Host read through the H-tree.
    pub fn read_word(&mut self, addr: Address) -> Result<FxWord, ArrayError> {
        let i = self.check(addr)?;
        self.ledger.reads += 1;
        self.charge_transfer(1, Direction::Out);
        Ok(self.subarrays[addr.subarray].words[i])
    }

    /// Inspect storage without touching the ledger.
    pub fn peek(&self, addr: Address) -> Result<FxWord, ArrayError> {
        let i = self.check(addr)?;
        Ok(self.subarrays[addr.subarray].words[i])
    }

    /// Account a bulk transfer of `words` over the H-tree without moving data.
    pub fn transfer(&mut self, words: u64, dir: Direction) {
        match dir {
            Direction::In => self.ledger.writes += words,
            Direction::Out => self.ledger.reads += words,
        }
        self.charge_transfer(words, dir);
    }

    fn check_pair(&self, a: Address, b: Address) -> Result<(usize, usize), ArrayError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if a.subarray != b.subarray {
            return Err(ArrayError::CrossSubarray(a.subarray, b.subarray));
        }
        if a.lg == b.lg {
            return Err(ArrayError::SameLocalGroup(a, b));
        }
        Ok((ia, ib))
    }

    /// Raw bit-line AND / NOR of two words in different local groups.
    pub fn bitwise_and_nor(&mut self, a1: Address, a2: Address) -> Result<(u16, u16), ArrayError> {
        let (i1, i2) = self.check_pair(a1, a2)?;
        let words = &self.subarrays[a1.subarray].words;
        let (x, y) = (words[i1].bits, words[i2].bits);
        self.ledger.cycles.other += 1;
        self.ledger.energy.other += self.fj.read;
        Ok((x & y, !(x | y)))
    }

    fn validate_instr(&self, instr: &BCInstr, b: &Binding) -> Result<(), ArrayError> {
        let nes = self.config.subarray.nes;
        if instr.acc_shift as u32 > nes {
            return Err(ArrayError::ShiftBeyondNes {
                shift: instr.acc_shift,
                nes,
            });
        }
        if instr.imo_shift > 1 {
            return Err(ArrayError::ImoShift(instr.imo_shift));
        }
        self.check(b.acc)?;
        self.check(b.dest)?;
        if b.dest.subarray != b.acc.subarray {
            return Err(ArrayError::CrossSubarray(b.acc.subarray, b.dest.subarray));
        }
        if instr.add_imo {
            self.check_pair(b.acc, b.imo)?;
        }
        Ok(())
    }

    fn apply(&mut self, instr: &BCInstr, b: &Binding) -> FxWord {
        let cfg = self.config.subarray;
        let mode = instr.word_mode;
        let sub = &mut self.subarrays[b.acc.subarray];
        let acc = read_port(
            sub.words[b.acc.index(&cfg)].bits,
            instr.acc_shift as u32,
            false,
            mode,
        );
        let (imo, carry) = if instr.add_imo {
            let raw = sub.words[b.imo.index(&cfg)].bits;
            (
                read_port(raw, instr.imo_shift as u32, instr.negate_imo, mode),
                instr.negate_imo,
            )
        } else {
            (0, false)
        };
        let result = FxWord::new(bcu_add(acc, imo, carry, mode), mode);
        if instr.write_back {
            sub.words[b.dest.index(&cfg)] = result;
        }
        result
    }

    fn charge_bc(&mut self, class: OpClass, participants: u64) {
        let cyc = self.config.subarray.bc_cycle_cost;
        let e = participants * self.fj.shift_add;
        match class {
            OpClass::Mac => {
                self.ledger.cycles.mac += cyc;
                self.ledger.energy.mac += e;
                self.ledger.mac_broadcasts += 1;
            }
            OpClass::Merge => {
                self.ledger.cycles.merge += cyc;
                self.ledger.energy.merge += e;
            }
            OpClass::Other => {
                self.ledger.cycles.other += cyc;
                self.ledger.energy.other += e;
            }
        }
        self.ledger.bc_ops += participants;
        self.ledger.decoded += 1;
        self.ledger.energy.decode += self.fj.decoder;
    }

    /// Execute one instruction on a single subarray, charged as a MAC cycle.
    pub fn exec_bc(
        &mut self,
        instr: &BCInstr,
        acc: Address,
        imo: Address,
        dest: Address,
    ) -> Result<FxWord, ArrayError> {
        let b = Binding { acc, imo, dest };
        self.validate_instr(instr, &b)?;
        let out = self.apply(instr, &b);
        self.charge_bc(OpClass::Mac, 1);
        self.ledger.mac_active[acc.subarray] += 1;
        Ok(out)
    }

    /// Broadcast one instruction to every bound subarray in a single global
    /// cycle. Either all bindings are valid and applied, or none is.
    pub fn broadcast_exec(
        &mut self,
        instr: &BCInstr,
        bindings: &[Binding],
        class: OpClass,
    ) -> Result<(), ArrayError> {
        let mut seen = vec![false; self.config.subarrays];
        for b in bindings {
            self.validate_instr(instr, b)?;
            if std::mem::replace(&mut seen[b.acc.subarray], true) {
                return Err(ArrayError::DuplicateBinding(b.acc.subarray));
            }
        }
        if let Some(first) = bindings.first() {
            let homogeneous = bindings.iter().all(|b| {
                b.acc.local() == first.acc.local()
                    && (!instr.add_imo || b.imo.local() == first.imo.local())
                    && b.dest.local() == first.dest.local()
            });
            if !homogeneous {
                self.ledger.heterogeneous_broadcasts += 1;
            }
        }
        for b in bindings {
            self.apply(instr, b);
            if class == OpClass::Mac {
                self.ledger.mac_active[b.acc.subarray] += 1;
            }
        }
        self.charge_bc(class, bindings.len() as u64);
        Ok(())
    }

    /// Ledger snapshot in reporting units; leakage accrues on every
    /// subarray for every elapsed cycle.
    pub fn report(&self) -> EnergyReport {
        report_from(&self.ledger, &self.config)
    }
}

pub fn report_from(ledger: &Ledger, config: &ArrayConfig) -> EnergyReport {
    let mut energy = ledger.energy;
    let leak = FemtoParams::from(&config.energy).leak;
    energy.leakage += leak * config.subarrays as u64 * ledger.cycles.total();
    let utilization = ledger
        .mac_active
        .iter()
        .map(|&a| {
            if ledger.mac_broadcasts == 0 {
                0.0
            } else {
                a as f64 / ledger.mac_broadcasts as f64
            }
        })
        .collect();
    EnergyReport {
        cycles: ledger.cycles,
        energy_pj: energy.into(),
        utilization,
    }
}
