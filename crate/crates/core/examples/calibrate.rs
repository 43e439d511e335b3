//! Dev-only calibration scan (removed before release).

use ember_core::machine::MachineConfig;
use ember_core::optimizer::{evolve, Genome, Individual, OptimizerParams};
use ember_core::pipeline::default_targets;
use ember_core::workload::{
    build_base_sequence, AccessGroup, AccessSet, AccessTarget,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const U: u32 = 1536;
const IPS: f64 = 4.0;

#[derive(Clone, Copy, Debug)]
struct FastEval {
    g: f64,
    cycles: f64,
    ipc: f64,
}

use std::cell::RefCell;
use std::collections::HashMap;

thread_local! {
    static VISITS_MEMO: RefCell<HashMap<Vec<u32>, [f64; 4]>> = RefCell::new(HashMap::new());
}

/// Exact per-level weighted visit counts of the tiled schedule (Load-only
/// targets, weight 1), without materializing the slots. Memoized: visits
/// depend only on the count vector.
fn visits_for(counts: &[u32]) -> [f64; 4] {
    if let Some(v) = VISITS_MEMO.with(|m| m.borrow().get(counts).copied()) {
        return v;
    }
    let v = visits_uncached(counts);
    VISITS_MEMO.with(|m| m.borrow_mut().insert(counts.to_vec(), v));
    v
}

fn visits_uncached(counts: &[u32]) -> [f64; 4] {
    let targets = default_targets();
    let groups: Vec<AccessGroup> = targets
        .iter()
        .zip(counts)
        .filter(|(_, &c)| c > 0)
        .map(|(&target, &count)| AccessGroup { target, count })
        .collect();
    let set = AccessSet::new(groups).unwrap();
    let base = build_base_sequence(&set);
    let n = base.len() as u32;
    let reps = U / n;
    let rem = (U % n) as usize;
    let mut visits = [0f64; 4];
    for (j, t) in base.iter().enumerate() {
        if let AccessTarget::Mem { level, .. } = t {
            let extra = if j < rem { 1 } else { 0 };
            visits[level.index()] += (reps + extra) as f64;
        }
    }
    visits
}

fn eval_counts(counts: &[u32], m: &MachineConfig) -> FastEval {
    let visits = visits_for(counts);
    let u = U as f64;
    let base = u * IPS / m.decoder_width;
    let mut stall = 0.0;
    let mut energy = u * m.energy_per_set_reg_nj;
    for i in 0..4 {
        stall += (visits[i] - m.max_outstanding[i]).max(0.0) * m.access_latency_cycles[i];
        energy += visits[i] * m.energy_per_access_nj[i];
    }
    let cycles = base + stall;
    FastEval { g: energy / cycles, cycles, ipc: (u * IPS / cycles).min(m.decoder_width) }
}

fn k_factor(m: &MachineConfig, p: usize) -> f64 {
    let vs = m.voltage_scale[p];
    m.cores as f64 * vs * vs * (m.pstates_mhz[p] as f64 * 1e6) * 1e-9
}

fn tier_bonus(m: &MachineConfig) -> f64 {
    m.fetch_tier_power_bonus_w[m.fetch_tier(U).index()]
}

fn power_at(g: f64, m: &MachineConfig, p: usize) -> f64 {
    m.static_power_w + tier_bonus(m) + k_factor(m, p) * g
}

fn reported(g: f64, m: &MachineConfig, requested: usize) -> (f64, usize) {
    let mut p = requested;
    while power_at(g, m, p) > m.edc_limit_w && p > 0 {
        p -= 1;
    }
    (power_at(g, m, p), p)
}

/// Enumerates count vectors over `genes` active genes with the rest zero.
fn enumerate_counts(gene_idx: &[usize], max_count: u32, f: &mut dyn FnMut(&[u32])) {
    let mut counts = vec![0u32; 5];
    fn rec(
        gene_idx: &[usize],
        max_count: u32,
        depth: usize,
        counts: &mut Vec<u32>,
        f: &mut dyn FnMut(&[u32]),
    ) {
        if depth == gene_idx.len() {
            if counts.iter().any(|&c| c > 0) {
                f(counts);
            }
            return;
        }
        for c in 0..=max_count {
            counts[gene_idx[depth]] = c;
            rec(gene_idx, max_count, depth + 1, counts, f);
        }
        counts[gene_idx[depth]] = 0;
    }
    rec(gene_idx, max_count, 0, &mut counts, f);
}

struct ChainResult {
    best_power: [f64; 5],
    best_all_counts: Vec<u32>,
    best_all_ipc: f64,
    g_max10: f64,
}

/// Criterion-4 style exhaustive chain at the lowest pstate, max_count 10.
fn level_chain(m: &MachineConfig) -> ChainResult {
    let mut best_power = [0f64; 5];
    let mut best_all_counts = vec![];
    let mut best_all_ipc = 0.0;
    let mut g_max10 = 0.0f64;
    for cap in 0..5usize {
        let genes: Vec<usize> = (0..=cap).collect();
        let mut best = f64::MIN;
        enumerate_counts(&genes, 10, &mut |counts| {
            let fe = eval_counts(counts, m);
            let p = power_at(fe.g, m, 0);
            if cap == 4 {
                g_max10 = g_max10.max(fe.g);
            }
            if p > best {
                best = p;
                if cap == 4 {
                    best_all_counts = counts.to_vec();
                    best_all_ipc = fe.ipc;
                }
            }
        });
        best_power[cap] = best;
    }
    ChainResult { best_power, best_all_counts, best_all_ipc, g_max10 }
}

struct EdcPick {
    edc: f64,
    g_b: f64,
    margin: f64,
}

/// Places the EDC limit so the top-pstate optimum throttles exactly one
/// notch while nothing throttles at the lowest pstate.
fn pick_edc(m: &MachineConfig, g_max10: f64) -> Option<EdcPick> {
    let mut gs: Vec<f64> = Vec::new();
    enumerate_counts(&[0, 1, 2, 3, 4], 5, &mut |counts| {
        gs.push(eval_counts(counts, m).g);
    });
    gs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    gs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let g_max5 = *gs.last().unwrap();
    let (k15, k22, k25) = (k_factor(m, 0), k_factor(m, 1), k_factor(m, 2));
    let sb = m.static_power_w + tier_bonus(m);

    let mut best: Option<EdcPick> = None;
    // try the top distinct points (excluding the max itself) as the
    // under-2200-ceiling optimum g_B
    for bi in (gs.len().saturating_sub(600)..gs.len() - 1).rev() {
        let g_b = gs[bi];
        let g_next = gs[bi + 1];
        // heavy branch must lose at 2200
        if k15 * g_max5 >= k22 * g_b {
            continue;
        }
        let t = (k22 / k25) * g_b;
        let g_above = gs.iter().copied().find(|&g| g > t).unwrap_or(f64::INFINITY);
        // light branch at 2500 must top out strictly below the medium branch
        if let Some(&g_below) = gs.iter().rev().find(|&&g| g <= t) {
            if k25 * g_below >= k22 * g_b {
                continue;
            }
        }
        let lo = (k22 * g_b).max(k15 * g_max10);
        let hi = (k22 * g_next).min(k25 * g_above);
        if hi <= lo * 1.0005 {
            continue;
        }
        let w = (lo + hi) / 2.0;
        let margin = (hi - lo) / (2.0 * w);
        let pick = EdcPick { edc: sb + w, g_b, margin };
        if best.as_ref().is_none_or(|b| pick.margin > b.margin) {
            best = Some(pick);
        }
    }
    best
}

fn nsga_eval(m: &MachineConfig, pstate: usize) -> impl Fn(&Genome) -> Result<Individual, String> + '_ {
    move |genome: &Genome| {
        let fe = eval_counts(&genome.counts, m);
        let (power, _eff) = reported(fe.g, m, pstate);
        Ok(Individual { genome: genome.clone(), objectives: vec![power, fe.ipc], valid: true })
    }
}

fn best_power_of_front(out: &ember_core::optimizer::EvolveOutcome) -> (Vec<u32>, f64) {
    let mut best: Option<(Vec<u32>, f64)> = None;
    for &i in &out.front {
        let ind = &out.population[i];
        if best.as_ref().is_none_or(|(_, p)| ind.objectives[0] > *p) {
            best = Some((ind.genome.counts.clone(), ind.objectives[0]));
        }
    }
    best.unwrap()
}

fn check_criterion5(m: &MachineConfig, seeds: [u64; 3]) -> Result<String, String> {
    let targets = default_targets();
    let mut trained: Vec<Vec<u32>> = Vec::new();
    for (p, &seed) in seeds.iter().enumerate() {
        let params = OptimizerParams { max_count: 5, rng_seed: seed, ..Default::default() };
        let mut log = Vec::new();
        let out = evolve(&params, &targets, nsga_eval(m, p), &mut log).map_err(|e| e.to_string())?;
        let (counts, _power) = best_power_of_front(&out);
        trained.push(counts);
    }
    // exhaustive argmax of reported power per pstate for comparison
    let mut exhaustive: Vec<(Vec<u32>, f64)> = Vec::new();
    for p in 0..3 {
        let mut best = (vec![], f64::MIN);
        enumerate_counts(&[0, 1, 2, 3, 4], 5, &mut |counts| {
            let fe = eval_counts(counts, m);
            let (pw, _) = reported(fe.g, m, p);
            if pw > best.1 {
                best = (counts.to_vec(), pw);
            }
        });
        exhaustive.push(best);
    }
    let mut msg = String::new();
    let mut matrix = [[0f64; 3]; 3];
    for (r, counts) in trained.iter().enumerate() {
        let fe = eval_counts(counts, m);
        for c in 0..3 {
            matrix[r][c] = reported(fe.g, m, c).0;
        }
        let found = reported(fe.g, m, r).0;
        let exact = exhaustive[r].1;
        msg += &format!(
            "  train@p{r}: found {:?} power {found:.2} vs exhaustive {:?} {exact:.2} (gap {:.4}%)\n",
            counts,
            exhaustive[r].0,
            (exact - found) / exact * 100.0
        );
    }
    for c in 0..3 {
        for r in 0..3 {
            if matrix[r][c] > matrix[c][c] * (1.0 + 1e-12) {
                return Err(format!(
                    "column {c}: off-diagonal row {r} = {} beats diag {}\n{msg}",
                    matrix[r][c], matrix[c][c]
                ));
            }
        }
    }
    msg += &format!("  matrix: {matrix:?}\n");
    // criterion 6: top-pstate optimum throttles exactly one notch
    let fe = eval_counts(&trained[2], m);
    let (pw, eff) = reported(fe.g, m, 2);
    if eff != 1 {
        return Err(format!("criterion 6: eff index {eff}, want 1\n{msg}"));
    }
    if pw > m.edc_limit_w {
        return Err(format!("criterion 6: fixed-point power {pw} above limit\n{msg}"));
    }
    Ok(msg)
}

fn check_criterion3(m: &MachineConfig) -> (usize, f64) {
    // 4-gene genome: REG, L1_L, L2_L, RAM_L (genes 0,1,2,4), max_count 5
    let genes = [0usize, 1, 2, 4];
    let mut exhaustive_best = f64::MIN;
    let mut count = 0u32;
    enumerate_counts(&genes, 5, &mut |counts| {
        count += 1;
        let fe = eval_counts(counts, m);
        exhaustive_best = exhaustive_best.max(power_at(fe.g, m, 0));
    });
    assert_eq!(count, 1295);
    let targets: Vec<AccessTarget> = {
        let all = default_targets();
        vec![all[0], all[1], all[2], all[4]]
    };
    let mut hits = 0usize;
    let mut worst_gap = 0f64;
    for seed in 0..10u64 {
        let params = OptimizerParams { max_count: 5, rng_seed: seed, ..Default::default() };
        let mut log = Vec::new();
        let eval = |genome: &Genome| {
            let mut counts = vec![0u32; 5];
            counts[0] = genome.counts[0];
            counts[1] = genome.counts[1];
            counts[2] = genome.counts[2];
            counts[4] = genome.counts[3];
            let fe = eval_counts(&counts, m);
            Ok(Individual {
                genome: genome.clone(),
                objectives: vec![power_at(fe.g, m, 0), fe.ipc],
                valid: true,
            })
        };
        let out = evolve(&params, &targets, eval, &mut log).unwrap();
        let (_, best) = best_power_of_front(&out);
        let gap = (exhaustive_best - best) / exhaustive_best;
        worst_gap = worst_gap.max(gap);
        if gap <= 0.02 {
            hits += 1;
        }
    }
    (hits, worst_gap)
}

fn sequencer_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut solver_fail = 0u32;
    let mut bound_fail_solved = 0u32;
    let mut filtered_solver_fail = 0u32;
    let mut kept = 0u32;
    let trials = 30_000;
    for _ in 0..trials {
        let m = rng.random_range(1..=5usize);
        let mut counts = Vec::new();
        for _ in 0..m {
            counts.push(rng.random_range(1..=12u32));
        }
        let n: u32 = counts.iter().sum();
        // distinct targets
        let targets = distinct_targets(m, &mut rng);
        let groups: Vec<AccessGroup> = targets
            .iter()
            .zip(&counts)
            .map(|(&t, &c)| AccessGroup { target: t, count: c })
            .collect();
        let set = AccessSet::new(groups).unwrap();
        let seq = build_base_sequence(&set);
        let ok = bound_holds(&seq, &set);
        let rigid = counts.iter().filter(|&&a| a >= 2 && n % a == 0).count();
        if !ok {
            if rigid >= 2 {
                solver_fail += 1;
            } else {
                filtered_solver_fail += 1;
                println!("  filtered-yet-failed: counts {counts:?} n {n}");
            }
        }
        if rigid < 2 {
            kept += 1;
            if !ok {
                bound_fail_solved += 1;
            }
        }
    }
    println!(
        "sequencer: {trials} trials, unfiltered fails {}, kept {kept}, kept-fails {bound_fail_solved}, filtered-yet-failed {filtered_solver_fail}",
        solver_fail + filtered_solver_fail
    );
}

fn distinct_targets(m: usize, rng: &mut ChaCha8Rng) -> Vec<AccessTarget> {
    use ember_core::workload::{AccessPattern, DataLevel};
    let mut all: Vec<AccessTarget> = vec![AccessTarget::Reg];
    for level in DataLevel::ALL {
        for pattern in AccessPattern::ALL {
            all.push(AccessTarget::mem(level, pattern));
        }
    }
    // Fisher-Yates prefix
    for i in 0..m {
        let j = rng.random_range(i..all.len());
        all.swap(i, j);
    }
    all.truncate(m);
    all
}

fn bound_holds(seq: &[AccessTarget], set: &AccessSet) -> bool {
    let n = seq.len();
    for g in set.groups() {
        if g.count < 2 {
            continue;
        }
        let positions: Vec<usize> = seq
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == g.target)
            .map(|(i, _)| i)
            .collect();
        let floor = n / g.count as usize;
        for w in 0..positions.len() {
            let a = positions[w];
            let b = positions[(w + 1) % positions.len()];
            let gap = if w + 1 == positions.len() { b + n - a } else { b - a };
            if gap < floor {
                return false;
            }
        }
    }
    true
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "seq") {
        sequencer_stats();
        return;
    }
    if args.iter().any(|a| a == "detail") {
        verify_detail();
        return;
    }

    let verbose = args.iter().any(|a| a == "-v");
    let base = MachineConfig::reference();
    let mut candidates = 0u32;
    let mut passing: Vec<(MachineConfig, String, f64)> = Vec::new();

    for &e3 in &[3.0f64, 3.4, 3.8, 4.2] {
        for &e4 in &[16.0f64, 20.0, 24.0] {
            for &cap3 in &[355.0f64, 370.0, 385.0] {
                for &lat4 in &[14.0f64] {
                    for &cap4 in &[32.0f64, 48.0, 64.0] {
                        candidates += 1;
                        let mut m = base.clone();
                        m.energy_per_access_nj[2] = e3;
                        m.energy_per_access_nj[3] = e4;
                        m.max_outstanding[2] = cap3;
                        m.max_outstanding[3] = cap4;
                        m.access_latency_cycles[3] = lat4;
                        m.edc_limit_w = 1e9;

                        let chain = level_chain(&m);
                        let p = &chain.best_power;
                        let mono_ok = (0..4).all(|i| p[i + 1] > p[i] * 1.005);
                        let ratio = p[4] / p[0];
                        let ratio_ok = (1.73..=1.97).contains(&ratio);
                        // no-stall regime: optimum must stay off the flood
                        let ipc_ok = chain.best_all_ipc >= 3.8;
                        if verbose {
                            println!(
                                "e3={e3} e4={e4} cap3={cap3} cap4={cap4} lat4={lat4}: chain={:?} ratio={ratio:.3} ipc={:.3} mix={:?} mono={mono_ok} ratio_ok={ratio_ok} ipc_ok={ipc_ok}",
                                p.map(|x| (x * 10.0).round() / 10.0),
                                chain.best_all_ipc,
                                chain.best_all_counts
                            );
                        }
                        if !(mono_ok && ratio_ok && ipc_ok) {
                            continue;
                        }
                        let Some(edc) = pick_edc(&m, chain.g_max10) else {
                            continue;
                        };
                        let desc = format!(
                            "e3={e3} e4={e4} cap3={cap3} cap4={cap4} lat4={lat4} ratio={ratio:.3} ipc={:.3} mix={:?} chain={:?} edc={:.2} gB={:.4} margin={:.4}",
                            chain.best_all_ipc, chain.best_all_counts, p, edc.edc, edc.g_b, edc.margin
                        );
                        passing.push((m, desc, edc.edc));
                    }
                }
            }
        }
    }
    println!("{candidates} candidates scanned, {} passed stage A+B", passing.len());
    for (m, desc, edc) in passing.iter().take(12) {
        println!("PASS {desc}");
        let mut m2 = m.clone();
        m2.edc_limit_w = *edc;
        let (hits, worst) = check_criterion3(&m2);
        println!("  c3: {hits}/10 seeds within 2% (worst gap {worst:.4})");
        match check_criterion5(&m2, [101, 202, 303]) {
            Ok(msg) => println!("  c5/c6 OK:\n{msg}"),
            Err(e) => println!("  c5/c6 FAIL: {e}"),
        }
    }
}

// appended: detailed verification of one frozen candidate
fn verify_detail() {
    // verify the frozen reference machine exactly as shipped
    let m = MachineConfig::reference();
    let chain = level_chain(&m);
    println!("chain {:?}", chain.best_power);
    println!("ratio {:.4}", chain.best_power[4] / chain.best_power[0]);
    println!("best mix {:?} ipc {:.4}", chain.best_all_counts, chain.best_all_ipc);
    println!("g_max10 {:.6}; no-throttle@1500 needs edc >= {:.3}",
        chain.g_max10,
        m.static_power_w + tier_bonus(&m) + k_factor(&m, 0) * chain.g_max10);
    let (hits, worst) = check_criterion3(&m);
    println!("c3 {hits}/10 worst {worst:.5}");
    match check_criterion5(&m, [101, 202, 303]) {
        Ok(msg) => println!("c5/c6 OK:\n{msg}"),
        Err(e) => println!("c5/c6 FAIL: {e}"),
    }
}
