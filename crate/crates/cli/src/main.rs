//! ember command line: list instruction sets, measure a fixed workload, or
//! run the preheat + tune + report pipeline against the simulator backend.

use std::io::Write;
use std::path::PathBuf;

use clap::Parser;

use ember_core::machine::{Backend, MachineConfig, SimBackend};
use ember_core::measurement::{
    render_csv_summary, MeasurementWindow, SummaryRow, DEFAULT_START_DELTA_MS,
    DEFAULT_STOP_DELTA_MS,
};
use ember_core::metrics::{MetricRegistry, MetricSource};
use ember_core::optimizer::{evolve, EvolveError, OptimizerParams};
use ember_core::pipeline::{
    default_targets, preheat, EvalContext, ExternalCommand, MetricSpec, PipelineError,
};
use ember_core::workload::{parse_access_set, InstructionSetDef, InstructionSetRegistry};

/// Name of the run log written by `--optimize`.
const OPTIMIZE_LOG: &str = "ember_nsga2.log";

const EXIT_CONFIG: i32 = 2;
const EXIT_METRIC_UNAVAILABLE: i32 = 3;
const EXIT_EVALUATOR: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "ember",
    version,
    about = "Processor stress-workload toolkit with an analytical simulator backend",
    after_help = "Exactly one of -a/--avail, --measurement, or --optimize selects the mode."
)]
struct Args {
    /// List available instruction sets and exit
    #[arg(short = 'a', long = "avail")]
    avail: bool,

    /// Instruction set id (defaults to the only registered set)
    #[arg(short = 'i', long = "function", value_name = "ID")]
    function: Option<String>,

    /// Memory access groups, e.g. REG:4,L1_L:2,L2_L:1 [default: REG:1]
    #[arg(long = "run-instruction-groups", value_name = "GROUPS")]
    run_instruction_groups: Option<String>,

    /// Unroll factor u [default: sized to the L1-I fetch tier]
    #[arg(long = "set-line-count", value_name = "N")]
    set_line_count: Option<u32>,

    /// Measure a fixed workload and print a CSV summary
    #[arg(long = "measurement")]
    measurement: bool,

    /// Tune memory accesses with the given algorithm (supported: NSGA2)
    #[arg(long = "optimize", value_name = "ALGO")]
    optimize: Option<String>,

    /// Tuning population size [default: 40]
    #[arg(long = "individuals", value_name = "N", default_value_t = 40)]
    individuals: usize,

    /// Tuning generations [default: 20]
    #[arg(long = "generations", value_name = "G", default_value_t = 20)]
    generations: usize,

    /// Per-gene mutation probability [default: 0.35]
    #[arg(long = "nsga2-m", value_name = "P", default_value_t = 0.35)]
    nsga2_m: f64,

    /// Run duration per test in seconds [default: 10]
    #[arg(short = 't', value_name = "SECONDS", default_value_t = 10)]
    duration_s: u64,

    /// Warm-up seconds before tuning, simulated time [default: 240]
    #[arg(long = "preheat", value_name = "SECONDS", default_value_t = 240)]
    preheat: u64,

    /// Comma-separated metrics to collect [default: power,perf-ipc]
    #[arg(
        long = "optimization-metric",
        value_name = "NAMES",
        default_value = "power,perf-ipc"
    )]
    optimization_metric: String,

    /// Leading window exclusion in ms [default: 5000]
    #[arg(long = "start-delta", value_name = "MS", default_value_t = DEFAULT_START_DELTA_MS)]
    start_delta: u64,

    /// Trailing window exclusion in ms [default: 2000]
    #[arg(long = "stop-delta", value_name = "MS", default_value_t = DEFAULT_STOP_DELTA_MS)]
    stop_delta: u64,

    /// Machine config file [default: $EMBER_MACHINE_CONFIG, else built-in reference]
    #[arg(long = "machine-config", value_name = "PATH")]
    machine_config: Option<PathBuf>,

    /// P-state index to run at [default: highest]
    #[arg(long = "pstate", value_name = "INDEX")]
    pstate: Option<usize>,

    /// External metric command, whitespace-split program and arguments
    #[arg(long = "metric-command", value_name = "CMD")]
    metric_command: Option<String>,

    /// Tuning RNG seed [default: 0]
    #[arg(long = "seed", value_name = "SEED", default_value_t = 0)]
    seed: u64,
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure { code: EXIT_CONFIG, message: message.into() }
    }
}

fn main() {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => {}
        Err(f) => {
            eprintln!("ember: {}", f.message);
            std::process::exit(f.code);
        }
    }
}

fn run(args: &Args) -> Result<(), Failure> {
    let modes = [args.avail, args.measurement, args.optimize.is_some()];
    if modes.iter().filter(|&&m| m).count() != 1 {
        return Err(Failure::config(
            "choose exactly one of -a/--avail, --measurement, --optimize",
        ));
    }
    if args.avail {
        return run_avail();
    }
    if args.measurement {
        return run_measure(args);
    }
    run_optimize(args)
}

fn run_avail() -> Result<(), Failure> {
    let registry = InstructionSetRegistry::with_builtins();
    let mut out = String::new();
    for set in registry.iter() {
        out.push_str(&set.id);
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

fn load_machine(args: &Args) -> Result<MachineConfig, Failure> {
    let path = args
        .machine_config
        .clone()
        .or_else(|| std::env::var_os("EMBER_MACHINE_CONFIG").map(PathBuf::from));
    match path {
        Some(p) => ember_core::machine::load_machine_config(&p)
            .map_err(|e| Failure::config(e.to_string())),
        None => Ok(MachineConfig::reference()),
    }
}

fn resolve_iset<'r>(
    args: &Args,
    registry: &'r InstructionSetRegistry,
) -> Result<&'r InstructionSetDef, Failure> {
    match &args.function {
        Some(id) => registry
            .get(id)
            .ok_or_else(|| Failure::config(format!("unknown instruction set `{id}`"))),
        None => {
            let mut iter = registry.iter();
            match (iter.next(), iter.next()) {
                (Some(only), None) => Ok(only),
                _ => Err(Failure::config(
                    "-i/--function required when multiple instruction sets exist",
                )),
            }
        }
    }
}

fn metric_specs(args: &Args) -> Result<Vec<MetricSpec>, Failure> {
    let registry = MetricRegistry::builtin();
    let mut specs = Vec::new();
    for name in args.optimization_metric.split(',') {
        let name = name.trim();
        let Some(desc) = registry.get(name) else {
            return Err(Failure::config(format!("unknown metric `{name}`")));
        };
        let command = if desc.source == MetricSource::External {
            let Some(cmd) = &args.metric_command else {
                return Err(Failure::config(
                    "metric `external` needs --metric-command",
                ));
            };
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let Some(program) = parts.next() else {
                return Err(Failure::config("--metric-command is empty"));
            };
            Some(ExternalCommand { program, args: parts.collect() })
        } else {
            None
        };
        specs.push(MetricSpec { name: desc.name.clone(), source: desc.source, command });
    }
    if specs.is_empty() {
        return Err(Failure::config("at least one metric required"));
    }
    Ok(specs)
}

struct Setup {
    backend: SimBackend,
    iset: InstructionSetDef,
    unroll: u32,
    pstate: usize,
    window: MeasurementWindow,
    specs: Vec<MetricSpec>,
}

fn setup(args: &Args) -> Result<Setup, Failure> {
    let machine = load_machine(args)?;
    let registry = InstructionSetRegistry::with_builtins();
    let iset = resolve_iset(args, &registry)?.clone();
    let unroll = args.set_line_count.unwrap_or_else(|| machine.default_unroll());
    if unroll == 0 {
        return Err(Failure::config("--set-line-count must be at least 1"));
    }
    let pstate = args.pstate.unwrap_or(machine.pstates_mhz.len() - 1);
    if pstate >= machine.pstates_mhz.len() {
        return Err(Failure::config(format!(
            "--pstate {pstate} out of range ({} P-states)",
            machine.pstates_mhz.len()
        )));
    }
    let total_ms = args.duration_s.saturating_mul(1000);
    let window = MeasurementWindow::new(total_ms, args.start_delta, args.stop_delta)
        .map_err(|e| Failure::config(e.to_string()))?;
    let specs = metric_specs(args)?;
    Ok(Setup { backend: SimBackend::new(machine), iset, unroll, pstate, window, specs })
}

fn pipeline_failure(e: PipelineError) -> Failure {
    Failure::config(e.to_string())
}

fn run_measure(args: &Args) -> Result<(), Failure> {
    let setup = setup(args)?;
    let groups = args.run_instruction_groups.as_deref().unwrap_or("REG:1");
    let accesses = parse_access_set(groups).map_err(|e| Failure::config(e.to_string()))?;
    let ctx = EvalContext {
        backend: &setup.backend,
        iset: &setup.iset,
        unroll: setup.unroll,
        pstate: setup.pstate,
        duration_ms: args.duration_s * 1000,
        window: setup.window,
        metrics: setup.specs.clone(),
    };
    let machine = setup.backend.machine();
    eprintln!(
        "ember: measuring {groups} with {} (u = {}) at {} MHz for {} s",
        setup.iset.id, setup.unroll, machine.pstates_mhz[setup.pstate], args.duration_s
    );
    let outcome = ctx.evaluate(&accesses).map_err(pipeline_failure)?;
    if !outcome.valid {
        let missing: Vec<&str> = outcome
            .metrics
            .iter()
            .filter(|m| m.mean.is_nan())
            .map(|m| m.name.as_str())
            .collect();
        return Err(Failure {
            code: EXIT_METRIC_UNAVAILABLE,
            message: format!("metric unavailable: {}", missing.join(", ")),
        });
    }
    eprintln!(
        "ember: effective frequency {} MHz, ipc {:.3}",
        outcome.sim.eff_freq_mhz, outcome.sim.ipc
    );
    let rows: Vec<SummaryRow> = outcome
        .metrics
        .iter()
        .map(|m| (groups.to_string(), m.name.clone(), m.mean, m.samples_in_window))
        .collect();
    print!("{}", render_csv_summary(&rows));
    Ok(())
}

fn run_optimize(args: &Args) -> Result<(), Failure> {
    let algo = args.optimize.as_deref().unwrap_or_default();
    if algo != "NSGA2" {
        return Err(Failure::config(format!(
            "unsupported optimizer `{algo}` (supported: NSGA2)"
        )));
    }
    let setup = setup(args)?;
    let machine = setup.backend.machine().clone();

    let sim = preheat(&setup.backend, &setup.iset, setup.unroll, setup.pstate)
        .map_err(|e| Failure::config(e.to_string()))?;
    eprintln!(
        "ember: preheat ran REG:1 for {} s (simulated) at {:.1} W",
        args.preheat, sim.power_w
    );

    let params = OptimizerParams {
        population: args.individuals,
        generations: args.generations,
        mutation_prob: args.nsga2_m,
        max_count: OptimizerParams::default().max_count,
        rng_seed: args.seed,
    };
    let targets = default_targets();
    let ctx = EvalContext {
        backend: &setup.backend,
        iset: &setup.iset,
        unroll: setup.unroll,
        pstate: setup.pstate,
        duration_ms: args.duration_s * 1000,
        window: setup.window,
        metrics: setup.specs.clone(),
    };
    let mut log = std::fs::File::create(OPTIMIZE_LOG)
        .map_err(|e| Failure::config(format!("cannot create {OPTIMIZE_LOG}: {e}")))?;
    eprintln!(
        "ember: NSGA2 over {} targets at {} MHz, N = {}, G = {}, m = {}, seed = {}",
        targets.len(),
        machine.pstates_mhz[setup.pstate],
        params.population,
        params.generations,
        params.mutation_prob,
        params.rng_seed
    );
    let outcome = evolve(&params, &targets, ctx.evaluator(&targets), &mut log).map_err(|e| {
        match e {
            EvolveError::Evaluation { .. } => {
                Failure { code: EXIT_EVALUATOR, message: e.to_string() }
            }
            other => Failure::config(other.to_string()),
        }
    })?;
    log.flush().map_err(|e| Failure::config(e.to_string()))?;
    eprintln!(
        "ember: {} evaluations logged to {OPTIMIZE_LOG}, front holds {} individuals",
        outcome.evaluations,
        outcome.front.len()
    );

    // final front, best first by the leading metric
    let mut front: Vec<&ember_core::optimizer::Individual> =
        outcome.front.iter().map(|&i| &outcome.population[i]).collect();
    front.sort_by(|a, b| {
        b.objectives[0]
            .partial_cmp(&a.objectives[0])
            .expect("front objectives are finite")
            .then_with(|| {
                b.objectives[1..]
                    .iter()
                    .partial_cmp(a.objectives[1..].iter())
                    .expect("front objectives are finite")
            })
    });
    let metric_names: Vec<&str> = setup.specs.iter().map(|s| s.name.as_str()).collect();
    let mut out = format!("accesses\t{}\n", metric_names.join("\t"));
    for ind in front {
        out.push_str(&ind.genome.decode(&targets).to_string());
        for v in &ind.objectives {
            out.push('\t');
            out.push_str(&ember_core::measurement::format_significant(*v, 6));
        }
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}
