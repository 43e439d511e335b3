//! Orchestration glue: turns an access set into schedule, simulation, metric
//! streams, and windowed objective values — the evaluator behind both the
//! fixed-workload measurement mode and the tuning loop.

use std::fmt;

use crate::machine::{Backend, SimError, SimResult};
use crate::measurement::{window_average, window_sample_count, MeasurementError, MeasurementWindow};
use crate::metrics::{
    collect_backend_ipc, collect_backend_power, collect_external, estimate_ipc, MetricError,
    MetricSample, MetricSource,
};
use crate::optimizer::{Genome, Individual};
use crate::workload::{build_schedule, AccessSet, AccessTarget, InstructionSetDef, WorkloadConfig};

/// Sampling period of the built-in metric streams.
pub const SAMPLE_PERIOD_MS: u64 = 100;

/// Default gene targets for tuning: registers plus a load per memory level.
pub fn default_targets() -> Vec<AccessTarget> {
    use crate::workload::{AccessPattern, DataLevel};
    let mut targets = vec![AccessTarget::Reg];
    targets.extend(
        DataLevel::ALL
            .iter()
            .map(|&level| AccessTarget::mem(level, AccessPattern::Load)),
    );
    targets
}

/// External metric child invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalCommand {
    pub program: String,
    pub args: Vec<String>,
}

/// One selected metric: its registry name, source, and (for external
/// metrics) the command to run.
#[derive(Debug, Clone)]
pub struct MetricSpec {
    pub name: String,
    pub source: MetricSource,
    pub command: Option<ExternalCommand>,
}

/// Everything needed to score one workload candidate.
pub struct EvalContext<'a, B: Backend> {
    pub backend: &'a B,
    pub iset: &'a InstructionSetDef,
    pub unroll: u32,
    pub pstate: usize,
    pub duration_ms: u64,
    pub window: MeasurementWindow,
    pub metrics: Vec<MetricSpec>,
}

/// Windowed mean of one metric over one run.
#[derive(Debug, Clone)]
pub struct MetricOutcome {
    pub name: String,
    pub mean: f64,
    pub samples_in_window: u64,
}

/// Result of scoring one workload.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub sim: SimResult,
    pub metrics: Vec<MetricOutcome>,
    /// False when any metric was unavailable; such candidates are invalid,
    /// never scored as zero.
    pub valid: bool,
}

#[derive(Debug)]
pub enum PipelineError {
    Sim(SimError),
    Metric(MetricError),
    Measurement(MeasurementError),
    ExternalCommandMissing(String),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Sim(e) => write!(f, "{e}"),
            PipelineError::Metric(e) => write!(f, "{e}"),
            PipelineError::Measurement(e) => write!(f, "{e}"),
            PipelineError::ExternalCommandMissing(name) => {
                write!(f, "metric `{name}` needs an external command")
            }
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<SimError> for PipelineError {
    fn from(e: SimError) -> Self {
        PipelineError::Sim(e)
    }
}

impl From<MeasurementError> for PipelineError {
    fn from(e: MeasurementError) -> Self {
        PipelineError::Measurement(e)
    }
}

impl<'a, B: Backend> EvalContext<'a, B> {
    /// Runs the full scoring pipeline for one access set: build the
    /// schedule, evaluate the backend, collect each metric stream over the
    /// run duration, and window-average it. A metric with no usable samples
    /// marks the outcome invalid rather than failing the run; spawn and
    /// configuration problems are hard errors.
    pub fn evaluate(&self, accesses: &AccessSet) -> Result<RunOutcome, PipelineError> {
        let config = WorkloadConfig {
            instruction_set: self.iset.id.clone(),
            unroll: self.unroll,
            accesses: accesses.clone(),
        };
        let schedule = build_schedule(&config);
        let sim = self.backend.run(&schedule, self.iset, self.pstate)?;

        let mut outcomes = Vec::with_capacity(self.metrics.len());
        let mut valid = true;
        for spec in &self.metrics {
            match self.collect(spec, &sim)? {
                Some(samples) => match window_average(&samples, &self.window, 0) {
                    Ok(mean) => outcomes.push(MetricOutcome {
                        name: spec.name.clone(),
                        mean,
                        samples_in_window: window_sample_count(&samples, &self.window, 0),
                    }),
                    Err(MeasurementError::EmptyWindow) => {
                        valid = false;
                        outcomes.push(MetricOutcome {
                            name: spec.name.clone(),
                            mean: f64::NAN,
                            samples_in_window: 0,
                        });
                    }
                    Err(e) => return Err(e.into()),
                },
                None => {
                    valid = false;
                    outcomes.push(MetricOutcome {
                        name: spec.name.clone(),
                        mean: f64::NAN,
                        samples_in_window: 0,
                    });
                }
            }
        }
        Ok(RunOutcome { sim, metrics: outcomes, valid })
    }

    /// Collects one metric stream; `Ok(None)` means the metric reported
    /// itself unavailable for this candidate.
    fn collect(
        &self,
        spec: &MetricSpec,
        sim: &SimResult,
    ) -> Result<Option<Vec<MetricSample>>, PipelineError> {
        let stream = match spec.source {
            MetricSource::BackendPower => {
                collect_backend_power(sim, self.duration_ms, SAMPLE_PERIOD_MS)
                    .map_err(PipelineError::Metric)?
            }
            MetricSource::BackendIpc => {
                collect_backend_ipc(sim, self.duration_ms, SAMPLE_PERIOD_MS)
                    .map_err(PipelineError::Metric)?
            }
            MetricSource::IpcEstimate => {
                let duration_s = self.duration_ms as f64 / 1000.0;
                let loops = (sim.loop_iterations_per_s * duration_s).round() as u64;
                let assumed = self.backend.machine().pstates_mhz[self.pstate];
                let estimate = estimate_ipc(
                    loops,
                    self.unroll,
                    self.iset.instructions_per_set,
                    assumed,
                    self.duration_ms,
                )
                .map_err(PipelineError::Metric)?;
                (0..self.duration_ms.div_ceil(SAMPLE_PERIOD_MS))
                    .map(|k| MetricSample {
                        timestamp_ms: (k * SAMPLE_PERIOD_MS) as i64,
                        value: estimate,
                    })
                    .collect()
            }
            MetricSource::External => {
                let Some(cmd) = &spec.command else {
                    return Err(PipelineError::ExternalCommandMissing(spec.name.clone()));
                };
                match collect_external(&cmd.program, &cmd.args, self.duration_ms) {
                    Ok(collection) => collection.samples,
                    Err(MetricError::Unavailable | MetricError::MalformedStream { .. }) => {
                        return Ok(None)
                    }
                    Err(e) => return Err(PipelineError::Metric(e)),
                }
            }
        };
        Ok(Some(stream))
    }

    /// Evaluator closure for the tuning loop: decodes a genome against
    /// `targets` and scores it; objective order follows the metric order.
    pub fn evaluator<'t>(
        &'t self,
        targets: &'t [AccessTarget],
    ) -> impl FnMut(&Genome) -> Result<Individual, String> + 't {
        move |genome: &Genome| {
            let accesses = genome.decode(targets);
            let outcome = self.evaluate(&accesses).map_err(|e| e.to_string())?;
            Ok(Individual {
                genome: genome.clone(),
                objectives: outcome.metrics.iter().map(|m| m.mean).collect(),
                valid: outcome.valid,
            })
        }
    }
}

/// Warm-up run before tuning: the default register-only workload, advanced
/// in simulated time (no wall-clock pacing in the simulator backend).
pub fn preheat<B: Backend>(
    backend: &B,
    iset: &InstructionSetDef,
    unroll: u32,
    pstate: usize,
) -> Result<SimResult, SimError> {
    let accesses = crate::workload::parse_access_set("REG:1").expect("static grammar");
    let schedule = build_schedule(&WorkloadConfig {
        instruction_set: iset.id.clone(),
        unroll,
        accesses,
    });
    backend.run(&schedule, iset, pstate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{MachineConfig, SimBackend};
    use crate::measurement::MeasurementWindow;
    use crate::workload::{haswell_fma_alu, parse_access_set};

    fn specs_power_ipc() -> Vec<MetricSpec> {
        vec![
            MetricSpec { name: "power".into(), source: MetricSource::BackendPower, command: None },
            MetricSpec { name: "perf-ipc".into(), source: MetricSource::BackendIpc, command: None },
        ]
    }

    fn ctx<'a>(backend: &'a SimBackend, iset: &'a InstructionSetDef, metrics: Vec<MetricSpec>) -> EvalContext<'a, SimBackend> {
        EvalContext {
            backend,
            iset,
            unroll: 1024,
            pstate: 0,
            duration_ms: 10_000,
            window: MeasurementWindow::new(10_000, 5000, 2000).unwrap(),
            metrics,
        }
    }

    #[test]
    fn reg_only_objectives() {
        let backend = SimBackend::new(MachineConfig::reference());
        let iset = haswell_fma_alu();
        let c = ctx(&backend, &iset, specs_power_ipc());
        let out = c.evaluate(&parse_access_set("REG:1").unwrap()).unwrap();
        assert!(out.valid);
        assert_eq!(out.metrics.len(), 2);
        assert_eq!(out.metrics[1].mean, 4.0);
        assert!(out.metrics[0].mean > backend.machine.static_power_w);
        // constant stream: windowed mean equals the steady-state value
        assert_eq!(out.metrics[0].mean, out.sim.power_w);
    }

    #[test]
    fn ipc_estimate_matches_backend_without_throttle() {
        let backend = SimBackend::new(MachineConfig::reference());
        let iset = haswell_fma_alu();
        let metrics = vec![MetricSpec {
            name: "ipc-estimate".into(),
            source: MetricSource::IpcEstimate,
            command: None,
        }];
        let c = ctx(&backend, &iset, metrics);
        let accesses = parse_access_set("REG:4,L1_L:2").unwrap();
        let out = c.evaluate(&accesses).unwrap();
        assert_eq!(out.sim.eff_freq_mhz, backend.machine.pstates_mhz[0]);
        // the loop count is rounded to a whole number of iterations, so the
        // agreement bound is one part in the counted loops
        let loops = out.sim.loop_iterations_per_s * 10.0;
        let rel = (out.metrics[0].mean - out.sim.ipc).abs() / out.sim.ipc;
        assert!(rel <= 1.0 / loops, "estimate {} vs ipc {}", out.metrics[0].mean, out.sim.ipc);
    }

    #[test]
    fn ipc_estimate_distorted_by_throttle() {
        let mut machine = MachineConfig::reference();
        let iset = haswell_fma_alu();
        // force a throttle for the plain register loop at the top pstate
        let probe = SimBackend::new(machine.clone());
        let top = machine.pstates_mhz.len() - 1;
        let c_probe = EvalContext { pstate: top, ..ctx(&probe, &iset, specs_power_ipc()) };
        let unthrottled = c_probe.evaluate(&parse_access_set("REG:1").unwrap()).unwrap();
        machine.edc_limit_w = unthrottled.sim.power_w - 1.0;

        let backend = SimBackend::new(machine);
        let metrics = vec![MetricSpec {
            name: "ipc-estimate".into(),
            source: MetricSource::IpcEstimate,
            command: None,
        }];
        let c = EvalContext { pstate: top, ..ctx(&backend, &iset, metrics) };
        let out = c.evaluate(&parse_access_set("REG:1").unwrap()).unwrap();
        assert!(out.sim.eff_freq_mhz < backend.machine.pstates_mhz[top]);
        let expected = out.sim.ipc * out.sim.eff_freq_mhz as f64
            / backend.machine.pstates_mhz[top] as f64;
        let rel = (out.metrics[0].mean - expected).abs() / expected;
        assert!(rel < 1e-6, "estimate {} vs expected {}", out.metrics[0].mean, expected);
    }

    #[test]
    fn silent_external_metric_marks_invalid() {
        let backend = SimBackend::new(MachineConfig::reference());
        let iset = haswell_fma_alu();
        let metrics = vec![
            MetricSpec { name: "power".into(), source: MetricSource::BackendPower, command: None },
            MetricSpec {
                name: "external".into(),
                source: MetricSource::External,
                command: Some(ExternalCommand { program: "true".into(), args: vec![] }),
            },
        ];
        let mut c = ctx(&backend, &iset, metrics);
        c.duration_ms = 500;
        c.window = MeasurementWindow::new(500, 0, 0).unwrap();
        let out = c.evaluate(&parse_access_set("REG:1").unwrap()).unwrap();
        assert!(!out.valid);
        assert!(out.metrics[1].mean.is_nan());
        // the power metric still reported normally
        assert!(out.metrics[0].mean > 0.0);
    }

    #[test]
    fn external_spawn_failure_is_hard_error() {
        let backend = SimBackend::new(MachineConfig::reference());
        let iset = haswell_fma_alu();
        let metrics = vec![MetricSpec {
            name: "external".into(),
            source: MetricSource::External,
            command: Some(ExternalCommand { program: "/nonexistent/bin".into(), args: vec![] }),
        }];
        let mut c = ctx(&backend, &iset, metrics);
        c.duration_ms = 500;
        c.window = MeasurementWindow::new(500, 0, 0).unwrap();
        assert!(matches!(
            c.evaluate(&parse_access_set("REG:1").unwrap()),
            Err(PipelineError::Metric(MetricError::Spawn(_)))
        ));
    }

    #[test]
    fn missing_external_command_rejected() {
        let backend = SimBackend::new(MachineConfig::reference());
        let iset = haswell_fma_alu();
        let metrics = vec![MetricSpec {
            name: "external".into(),
            source: MetricSource::External,
            command: None,
        }];
        let c = ctx(&backend, &iset, metrics);
        assert!(matches!(
            c.evaluate(&parse_access_set("REG:1").unwrap()),
            Err(PipelineError::ExternalCommandMissing(_))
        ));
    }

    #[test]
    fn preheat_runs_register_loop() {
        let backend = SimBackend::new(MachineConfig::reference());
        let iset = haswell_fma_alu();
        let sim = preheat(&backend, &iset, backend.machine.default_unroll(), 0).unwrap();
        assert_eq!(sim.ipc, backend.machine.decoder_width);
    }
}
