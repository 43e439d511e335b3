//! Analytical machine model: maps an unrolled schedule plus a frequency
//! setting to steady-state power, IPC, effective frequency, and loop rate.
//!
//! The model is deliberately simple: linear energy accounting per access,
//! a stall cliff once a level's outstanding-access cover is exceeded,
//! quadratic voltage scaling of dynamic energy, and a one-notch-at-a-time
//! EDC throttle descent. Constants in [`MachineConfig::reference`] are
//! calibrated once against the model itself, not measured hardware.

use std::fmt;
use std::path::Path;

use crate::workload::{AccessPattern, AccessTarget, DataLevel, InstructionSetDef, Schedule};

/// Instruction fetch tier serving the inner loop, by loop size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FetchTier {
    OpCache,
    L1i,
    L2,
}

impl FetchTier {
    pub fn index(self) -> usize {
        match self {
            FetchTier::OpCache => 0,
            FetchTier::L1i => 1,
            FetchTier::L2 => 2,
        }
    }
}

impl fmt::Display for FetchTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FetchTier::OpCache => "opcache",
            FetchTier::L1i => "l1i",
            FetchTier::L2 => "l2",
        })
    }
}

/// How many memory operations one slot with the given pattern issues.
/// Prefetches are cheapest, combined load/store patterns scale up.
pub fn visit_weight(pattern: AccessPattern) -> f64 {
    match pattern {
        AccessPattern::Load | AccessPattern::Store => 1.0,
        AccessPattern::LoadStore => 2.0,
        AccessPattern::TwoLoadsStore => 3.0,
        AccessPattern::Prefetch => 0.5,
    }
}

/// Parameters of the analytical machine model.
///
/// Per-level arrays are indexed by [`DataLevel::index`]; the fetch-tier
/// bonus array by [`FetchTier::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct MachineConfig {
    pub cores: u32,
    /// Selectable core frequencies in MHz, strictly increasing.
    pub pstates_mhz: Vec<u32>,
    /// Decoded instructions per cycle.
    pub decoder_width: f64,
    pub opcache_capacity_sets: u32,
    pub l1i_capacity_sets: u32,
    pub l2i_capacity_sets: u32,
    /// Effective exposed latency per uncovered access, in cycles.
    pub access_latency_cycles: [f64; 4],
    /// Accesses per loop the out-of-order engine hides per level.
    pub max_outstanding: [f64; 4],
    pub energy_per_access_nj: [f64; 4],
    /// Compute energy of one all-register instruction set.
    pub energy_per_set_reg_nj: f64,
    /// Additive package power per fetch tier {opcache, l1i, l2}.
    pub fetch_tier_power_bonus_w: [f64; 3],
    pub static_power_w: f64,
    /// Per-pstate multiplier applied (squared) to dynamic energy.
    pub voltage_scale: Vec<f64>,
    /// Power threshold above which the effective frequency steps down.
    pub edc_limit_w: f64,
}

impl MachineConfig {
    /// The shipped reference machine: two sockets of 32 cores with three
    /// P-states. Energy, latency, and limit constants were fitted by grid
    /// search so the model exhibits the qualitative behaviours the rest of
    /// the crate tests for (level-wise power growth, top-frequency EDC
    /// throttling by one notch, IPC dip at the tuned optimum).
    pub fn reference() -> Self {
        MachineConfig {
            cores: 64,
            pstates_mhz: vec![1500, 2200, 2500],
            decoder_width: 4.0,
            opcache_capacity_sets: 512,
            l1i_capacity_sets: 1536,
            l2i_capacity_sets: 24576,
            access_latency_cycles: [3.0, 6.0, 12.0, 14.0],
            max_outstanding: [312.0, 270.0, 385.0, 64.0],
            energy_per_access_nj: [0.9, 2.2, 3.4, 20.0],
            energy_per_set_reg_nj: 1.0,
            fetch_tier_power_bonus_w: [0.0, 5.0, 12.0],
            static_power_w: 150.0,
            voltage_scale: vec![1.0, 1.1, 1.2],
            edc_limit_w: 581.04,
        }
    }

    /// Fetch tier for an inner loop of `unroll` instruction sets. Loops
    /// larger than `l2i_capacity_sets` stay in the L2 tier; `simulate`
    /// charges the overflow sets a doubled decode cost.
    pub fn fetch_tier(&self, unroll: u32) -> FetchTier {
        if unroll <= self.opcache_capacity_sets {
            FetchTier::OpCache
        } else if unroll <= self.l1i_capacity_sets {
            FetchTier::L1i
        } else {
            FetchTier::L2
        }
    }

    /// Largest unroll factor still served from the L1-I tier; the default
    /// loop size when none is requested.
    pub fn default_unroll(&self) -> u32 {
        self.l1i_capacity_sets
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |key: &str, msg: &str| {
            Err(ConfigError::Invariant { key: key.to_string(), message: msg.to_string() })
        };
        if self.cores == 0 {
            return inv("cores", "must be positive");
        }
        if self.pstates_mhz.is_empty() {
            return inv("pstates_mhz", "at least one P-state required");
        }
        if !self.pstates_mhz.windows(2).all(|w| w[0] < w[1]) {
            return inv("pstates_mhz", "must be strictly increasing");
        }
        if self.decoder_width <= 0.0 {
            return inv("decoder_width", "must be positive");
        }
        if !(self.opcache_capacity_sets < self.l1i_capacity_sets
            && self.l1i_capacity_sets < self.l2i_capacity_sets)
        {
            return inv(
                "opcache_capacity_sets",
                "fetch-tier capacities must satisfy opcache < l1i < l2i",
            );
        }
        for (name, arr) in [
            ("access_latency_cycles", &self.access_latency_cycles),
            ("max_outstanding", &self.max_outstanding),
            ("energy_per_access_nj", &self.energy_per_access_nj),
        ] {
            if arr.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return inv(name, "entries must be finite and non-negative");
            }
        }
        if !self.energy_per_set_reg_nj.is_finite() || self.energy_per_set_reg_nj < 0.0 {
            return inv("energy_per_set_reg_nj", "must be finite and non-negative");
        }
        if self.fetch_tier_power_bonus_w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return inv("fetch_tier_power_bonus_w", "entries must be finite and non-negative");
        }
        if !self.fetch_tier_power_bonus_w.windows(2).all(|w| w[0] <= w[1]) {
            return inv("fetch_tier_power_bonus_w", "tier bonuses must be non-decreasing");
        }
        if !self.static_power_w.is_finite() || self.static_power_w < 0.0 {
            return inv("static_power_w", "must be finite and non-negative");
        }
        if self.voltage_scale.len() != self.pstates_mhz.len() {
            return inv("voltage_scale", "needs one entry per P-state");
        }
        if self.voltage_scale.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return inv("voltage_scale", "entries must be finite and positive");
        }
        if !(self.edc_limit_w > self.static_power_w) {
            return inv("edc_limit_w", "must exceed static_power_w");
        }
        Ok(())
    }
}

/// Steady-state prediction for one workload at one requested P-state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimResult {
    pub power_w: f64,
    /// Instructions per cycle per core, at most the decoder width.
    pub ipc: f64,
    /// Core frequency after EDC throttling.
    pub eff_freq_mhz: u32,
    /// Inner-loop completions per second per core.
    pub loop_iterations_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimError {
    InvalidPState { index: usize, available: usize },
    EmptySchedule,
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::InvalidPState { index, available } => {
                write!(f, "P-state index {index} out of range (machine has {available})")
            }
            SimError::EmptySchedule => write!(f, "schedule has no slots"),
        }
    }
}

impl std::error::Error for SimError {}

/// Weighted access counts per data level for one loop iteration.
pub fn level_visits(schedule: &Schedule) -> [f64; 4] {
    let mut visits = [0.0f64; 4];
    for slot in schedule.slots() {
        if let AccessTarget::Mem { level, pattern } = slot {
            visits[level.index()] += visit_weight(*pattern);
        }
    }
    visits
}

/// Evaluates the analytical model.
///
/// Cycle accounting per loop: `unroll * instructions_per_set / decoder_width`
/// base cycles, a doubled decode cost for sets beyond the L2 instruction
/// capacity, and per-level stall cycles for accesses beyond the out-of-order
/// cover. Dynamic power scales with loop rate, per-loop energy, and the
/// square of the P-state voltage multiplier. While the total exceeds
/// `edc_limit_w` and a lower P-state exists, the effective P-state steps
/// down one notch and power is recomputed.
pub fn simulate(
    schedule: &Schedule,
    iset: &InstructionSetDef,
    machine: &MachineConfig,
    pstate_index: usize,
) -> Result<SimResult, SimError> {
    if schedule.slots().is_empty() {
        return Err(SimError::EmptySchedule);
    }
    if pstate_index >= machine.pstates_mhz.len() {
        return Err(SimError::InvalidPState {
            index: pstate_index,
            available: machine.pstates_mhz.len(),
        });
    }

    let u = schedule.unroll() as f64;
    let ips = iset.instructions_per_set as f64;
    let base_cycles = u * ips / machine.decoder_width;
    let fetch_overflow_sets =
        (schedule.unroll().saturating_sub(machine.l2i_capacity_sets)) as f64;
    let fetch_cycles = fetch_overflow_sets * ips / machine.decoder_width;

    let visits = level_visits(schedule);
    let mut stall_cycles = 0.0;
    for level in DataLevel::ALL {
        let i = level.index();
        let uncovered = (visits[i] - machine.max_outstanding[i]).max(0.0);
        stall_cycles += uncovered * machine.access_latency_cycles[i];
    }
    let cycles = base_cycles + fetch_cycles + stall_cycles;
    let ipc = (u * ips / cycles).min(machine.decoder_width);

    let mut energy_nj = u * machine.energy_per_set_reg_nj;
    for level in DataLevel::ALL {
        energy_nj += visits[level.index()] * machine.energy_per_access_nj[level.index()];
    }
    let tier_bonus = machine.fetch_tier_power_bonus_w[machine.fetch_tier(schedule.unroll()).index()];

    let power_at = |p: usize| {
        let f_hz = machine.pstates_mhz[p] as f64 * 1e6;
        let loops_per_s = f_hz / cycles;
        let vs = machine.voltage_scale[p];
        let dynamic_core_w = vs * vs * loops_per_s * energy_nj * 1e-9;
        machine.static_power_w + machine.cores as f64 * dynamic_core_w + tier_bonus
    };

    let mut eff = pstate_index;
    while power_at(eff) > machine.edc_limit_w && eff > 0 {
        eff -= 1;
    }

    let f_eff_hz = machine.pstates_mhz[eff] as f64 * 1e6;
    Ok(SimResult {
        power_w: power_at(eff),
        ipc,
        eff_freq_mhz: machine.pstates_mhz[eff],
        loop_iterations_per_s: f_eff_hz / cycles,
    })
}

/// Execution backend interface. The analytical simulator is the only
/// backend shipped; native code-generating backends plug in behind the
/// same contract.
pub trait Backend {
    fn run(
        &self,
        schedule: &Schedule,
        iset: &InstructionSetDef,
        pstate_index: usize,
    ) -> Result<SimResult, SimError>;

    fn machine(&self) -> &MachineConfig;
}

/// Backend backed by [`simulate`].
#[derive(Debug, Clone)]
pub struct SimBackend {
    pub machine: MachineConfig,
}

impl SimBackend {
    pub fn new(machine: MachineConfig) -> Self {
        SimBackend { machine }
    }
}

impl Backend for SimBackend {
    fn run(
        &self,
        schedule: &Schedule,
        iset: &InstructionSetDef,
        pstate_index: usize,
    ) -> Result<SimResult, SimError> {
        simulate(schedule, iset, &self.machine, pstate_index)
    }

    fn machine(&self) -> &MachineConfig {
        &self.machine
    }
}

/// Machine-config file trouble; parse errors carry the offending key.
#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    UnknownKey { line: usize, key: String },
    BadValue { key: String, value: String },
    Invariant { key: String, message: String },
    Syntax { line: usize, message: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read machine config: {e}"),
            ConfigError::UnknownKey { line, key } => {
                write!(f, "machine config line {line}: unknown key `{key}`")
            }
            ConfigError::BadValue { key, value } => {
                write!(f, "machine config key `{key}`: cannot parse value `{value}`")
            }
            ConfigError::Invariant { key, message } => {
                write!(f, "machine config key `{key}`: {message}")
            }
            ConfigError::Syntax { line, message } => {
                write!(f, "machine config line {line}: {message}")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError::Io(e)
    }
}

const LEVEL_SUFFIXES: [(&str, usize); 4] = [("l1", 0), ("l2", 1), ("l3", 2), ("ram", 3)];
const TIER_SUFFIXES: [(&str, usize); 3] = [("opcache", 0), ("l1i", 1), ("l2", 2)];

/// Loads a machine config file: `key = value` lines, `#` comments, keys as
/// the [`MachineConfig`] field names with `.l1/.l2/.l3/.ram` level suffixes,
/// comma-separated lists. Unset keys keep the reference-machine defaults.
pub fn load_machine_config(path: &Path) -> Result<MachineConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_machine_config(&text)
}

pub fn parse_machine_config(text: &str) -> Result<MachineConfig, ConfigError> {
    let mut cfg = MachineConfig::reference();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(h) => &raw[..h],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(ConfigError::Syntax {
                line: line_no,
                message: "expected `key = value`".to_string(),
            });
        };
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();
        apply_key(&mut cfg, key, value, line_no)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(
    cfg: &mut MachineConfig,
    key: &str,
    value: &str,
    line: usize,
) -> Result<(), ConfigError> {
    let bad = |key: &str, value: &str| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    };
    let parse_f64 = |key: &str, v: &str| v.parse::<f64>().map_err(|_| bad(key, v));
    let parse_u32 = |key: &str, v: &str| v.parse::<u32>().map_err(|_| bad(key, v));

    if let Some((base, suffix)) = key.split_once('.') {
        match base {
            "access_latency_cycles" | "max_outstanding" | "energy_per_access_nj" => {
                let Some(&(_, i)) = LEVEL_SUFFIXES.iter().find(|(s, _)| *s == suffix) else {
                    return Err(ConfigError::UnknownKey { line, key: key.to_string() });
                };
                let v = parse_f64(key, value)?;
                match base {
                    "access_latency_cycles" => cfg.access_latency_cycles[i] = v,
                    "max_outstanding" => cfg.max_outstanding[i] = v,
                    _ => cfg.energy_per_access_nj[i] = v,
                }
            }
            "fetch_tier_power_bonus_w" => {
                let Some(&(_, i)) = TIER_SUFFIXES.iter().find(|(s, _)| *s == suffix) else {
                    return Err(ConfigError::UnknownKey { line, key: key.to_string() });
                };
                cfg.fetch_tier_power_bonus_w[i] = parse_f64(key, value)?;
            }
            _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
        }
        return Ok(());
    }

    match key {
        "cores" => cfg.cores = parse_u32(key, value)?,
        "pstates_mhz" => {
            let mut out = Vec::new();
            for item in value.split(',') {
                out.push(parse_u32(key, item.trim())?);
            }
            cfg.pstates_mhz = out;
        }
        "decoder_width" => cfg.decoder_width = parse_f64(key, value)?,
        "opcache_capacity_sets" => cfg.opcache_capacity_sets = parse_u32(key, value)?,
        "l1i_capacity_sets" => cfg.l1i_capacity_sets = parse_u32(key, value)?,
        "l2i_capacity_sets" => cfg.l2i_capacity_sets = parse_u32(key, value)?,
        "energy_per_set_reg_nj" => cfg.energy_per_set_reg_nj = parse_f64(key, value)?,
        "static_power_w" => cfg.static_power_w = parse_f64(key, value)?,
        "edc_limit_w" => cfg.edc_limit_w = parse_f64(key, value)?,
        "voltage_scale" => {
            let mut out = Vec::new();
            for item in value.split(',') {
                out.push(parse_f64(key, item.trim())?);
            }
            cfg.voltage_scale = out;
        }
        _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{build_schedule, haswell_fma_alu, parse_access_set, WorkloadConfig};

    fn schedule(unroll: u32, groups: &str) -> Schedule {
        build_schedule(&WorkloadConfig {
            instruction_set: "hsw_fma_alu".into(),
            unroll,
            accesses: parse_access_set(groups).unwrap(),
        })
    }

    #[test]
    fn fetch_tier_boundaries() {
        let m = MachineConfig::reference();
        assert_eq!(m.fetch_tier(m.opcache_capacity_sets), FetchTier::OpCache);
        assert_eq!(m.fetch_tier(m.opcache_capacity_sets + 1), FetchTier::L1i);
        assert_eq!(m.fetch_tier(1000), FetchTier::L1i);
        assert_eq!(m.fetch_tier(m.l1i_capacity_sets), FetchTier::L1i);
        assert_eq!(m.fetch_tier(m.l1i_capacity_sets + 1), FetchTier::L2);
        assert_eq!(m.fetch_tier(2000), FetchTier::L2);
    }

    #[test]
    fn all_reg_hits_decoder_width_exactly() {
        let m = MachineConfig::reference();
        let r = simulate(&schedule(1024, "REG:1"), &haswell_fma_alu(), &m, 0).unwrap();
        assert_eq!(r.ipc, m.decoder_width);
        assert!(r.power_w >= m.static_power_w);
    }

    #[test]
    fn invalid_pstate_rejected() {
        let m = MachineConfig::reference();
        let err = simulate(&schedule(64, "REG:1"), &haswell_fma_alu(), &m, 3).unwrap_err();
        assert!(matches!(err, SimError::InvalidPState { index: 3, available: 3 }));
    }

    #[test]
    fn stall_cycles_exact_beyond_cover() {
        let mut m = MachineConfig::reference();
        m.max_outstanding = [1000.0, 1000.0, 1000.0, 8.0];
        let iset = haswell_fma_alu();
        // 8 covered RAM loads: no stalls
        let covered = schedule(64, "REG:7,RAM_L:1");
        let rc = simulate(&covered, &iset, &m, 0).unwrap();
        assert_eq!(rc.ipc, m.decoder_width);
        // 3 loads beyond cover: exactly 3 * latency extra cycles
        let over = schedule(64, "REG:53,RAM_L:11");
        let visits = level_visits(&over)[DataLevel::Ram.index()];
        assert_eq!(visits, 11.0);
        let r = simulate(&over, &iset, &m, 0).unwrap();
        let base = 64.0 * 4.0 / m.decoder_width;
        let want_cycles = base + 3.0 * m.access_latency_cycles[DataLevel::Ram.index()];
        let got_cycles = 64.0 * 4.0 / r.ipc;
        assert!((got_cycles - want_cycles).abs() < 1e-9);
    }

    #[test]
    fn saturated_level_slot_swap_never_raises_ipc() {
        let m = MachineConfig::reference();
        let iset = haswell_fma_alu();
        // RAM already saturated; replacing a REG slot with one more RAM load
        // (same unroll) must not increase IPC.
        let before = simulate(&schedule(60, "REG:40,RAM_L:20"), &iset, &m, 0).unwrap();
        let after = simulate(&schedule(60, "REG:39,RAM_L:21"), &iset, &m, 0).unwrap();
        assert!(level_visits(&schedule(60, "REG:40,RAM_L:20"))[3] > m.max_outstanding[3]);
        assert!(after.ipc <= before.ipc);
    }

    #[test]
    fn throttle_when_edc_below_reg_power() {
        let mut m = MachineConfig::reference();
        let iset = haswell_fma_alu();
        let top = m.pstates_mhz.len() - 1;
        let sched = schedule(1024, "REG:1");
        let unconstrained = simulate(&sched, &iset, &m, top).unwrap();
        assert_eq!(unconstrained.eff_freq_mhz, *m.pstates_mhz.last().unwrap());
        m.edc_limit_w = unconstrained.power_w - 1.0;
        let throttled = simulate(&sched, &iset, &m, top).unwrap();
        assert!(throttled.eff_freq_mhz < unconstrained.eff_freq_mhz);
        assert!(
            throttled.power_w <= m.edc_limit_w
                || throttled.eff_freq_mhz == m.pstates_mhz[0]
        );
    }

    #[test]
    fn deterministic_result_bits() {
        let m = MachineConfig::reference();
        let iset = haswell_fma_alu();
        let s = schedule(1024, "REG:10,L1_L:10,L2_L:9,L3_L:9,RAM_L:1");
        let a = simulate(&s, &iset, &m, 2).unwrap();
        let b = simulate(&s, &iset, &m, 2).unwrap();
        assert_eq!(a.power_w.to_bits(), b.power_w.to_bits());
        assert_eq!(a.ipc.to_bits(), b.ipc.to_bits());
        assert_eq!(a.loop_iterations_per_s.to_bits(), b.loop_iterations_per_s.to_bits());
    }

    #[test]
    fn empty_config_is_reference() {
        let cfg = parse_machine_config("").unwrap();
        assert_eq!(cfg, MachineConfig::reference());
    }

    #[test]
    fn config_overrides_and_comments() {
        let cfg = parse_machine_config(
            "# test system\npstates_mhz = 1500,2200,2500\ncores = 64\naccess_latency_cycles.ram = 30\nfetch_tier_power_bonus_w.l2 = 20\n",
        )
        .unwrap();
        assert_eq!(cfg.pstates_mhz, vec![1500, 2200, 2500]);
        assert_eq!(cfg.access_latency_cycles[3], 30.0);
        assert_eq!(cfg.fetch_tier_power_bonus_w[2], 20.0);
    }

    #[test]
    fn config_unknown_key() {
        let err = parse_machine_config("cures = 64\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }));
        let err = parse_machine_config("max_outstanding.l9 = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }));
    }

    #[test]
    fn config_invariant_violations_name_key() {
        let err = parse_machine_config("pstates_mhz = 2500,2200\n").unwrap_err();
        match err {
            ConfigError::Invariant { key, .. } => assert_eq!(key, "pstates_mhz"),
            other => panic!("unexpected error {other:?}"),
        }
        let err = parse_machine_config("voltage_scale = 1.0,1.1\n").unwrap_err();
        match err {
            ConfigError::Invariant { key, .. } => assert_eq!(key, "voltage_scale"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn config_bad_value_names_key() {
        let err = parse_machine_config("cores = sixty\n").unwrap_err();
        match err {
            ConfigError::BadValue { key, value } => {
                assert_eq!(key, "cores");
                assert_eq!(value, "sixty");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
