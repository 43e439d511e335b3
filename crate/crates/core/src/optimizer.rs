//! NSGA-II multi-objective maximization over access-count genomes:
//! non-dominated sorting, crowding distance, binary tournament selection,
//! uniform crossover, per-gene mutation, and the elitist generational loop.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::measurement::format_significant;
use crate::workload::{AccessGroup, AccessSet, AccessTarget};

/// Integer access-count vector aligned with a fixed ordered target list
/// (REG at index 0). At least one count is non-zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genome {
    pub counts: Vec<u32>,
}

impl Genome {
    /// Drops zero-count targets and yields the described access set.
    pub fn decode(&self, targets: &[AccessTarget]) -> AccessSet {
        let groups: Vec<AccessGroup> = targets
            .iter()
            .zip(&self.counts)
            .filter(|(_, &c)| c > 0)
            .map(|(&target, &count)| AccessGroup { target, count })
            .collect();
        AccessSet::new(groups).expect("genome with a non-zero gene decodes to a valid set")
    }
}

/// Candidate with its evaluated objective values (index 0 = power in W,
/// index 1 = IPC under the default metric selection). `valid` is false when
/// any metric was unavailable; such candidates rank below all valid ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub genome: Genome,
    pub objectives: Vec<f64>,
    pub valid: bool,
}

/// Tuning-loop parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerParams {
    /// Population size N; even and at least 4.
    pub population: usize,
    /// Generations evolved after the random initial population.
    pub generations: usize,
    /// Per-gene mutation probability.
    pub mutation_prob: f64,
    /// Inclusive upper bound per gene.
    pub max_count: u32,
    pub rng_seed: u64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        OptimizerParams {
            population: 40,
            generations: 20,
            mutation_prob: 0.35,
            max_count: 10,
            rng_seed: 0,
        }
    }
}

#[derive(Debug)]
pub enum EvolveError {
    BadParams(String),
    Evaluation { generation: usize, index: usize, message: String },
    Log(std::io::Error),
}

impl fmt::Display for EvolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvolveError::BadParams(msg) => write!(f, "bad optimizer parameters: {msg}"),
            EvolveError::Evaluation { generation, index, message } => write!(
                f,
                "evaluation failed at generation {generation}, individual {index}: {message}"
            ),
            EvolveError::Log(e) => write!(f, "cannot write optimizer log: {e}"),
        }
    }
}

impl std::error::Error for EvolveError {}

/// True iff `a` is at least as good as `b` in every objective and strictly
/// better in at least one (maximization). Both individuals must be valid
/// and of equal objective arity.
pub fn dominates(a: &Individual, b: &Individual) -> Result<bool, EvolveError> {
    if a.objectives.len() != b.objectives.len() {
        return Err(EvolveError::BadParams(format!(
            "objective arity mismatch: {} vs {}",
            a.objectives.len(),
            b.objectives.len()
        )));
    }
    Ok(dominates_values(&a.objectives, &b.objectives))
}

fn dominates_values(a: &[f64], b: &[f64]) -> bool {
    let mut strictly_better = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strictly_better = true;
        }
    }
    strictly_better
}

/// Deb's fast non-dominated sort. Front 0 is the exact Pareto-maximal set;
/// later fronts peel the remainder. Indices within a front stay ascending.
/// All individuals must be valid; dominance checks are O(M·N²).
pub fn fast_nondominated_sort(pop: &[Individual]) -> Vec<Vec<usize>> {
    assert!(
        pop.iter().all(|i| i.valid),
        "fast_nondominated_sort expects valid individuals only"
    );
    if !pop.is_empty() {
        let arity = pop[0].objectives.len();
        assert!(
            pop.iter().all(|i| i.objectives.len() == arity),
            "objective arity must be uniform"
        );
    }
    let n = pop.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    for p in 0..n {
        for q in (p + 1)..n {
            if dominates_values(&pop[p].objectives, &pop[q].objectives) {
                dominated_by[p].push(q);
                domination_count[q] += 1;
            } else if dominates_values(&pop[q].objectives, &pop[p].objectives) {
                dominated_by[q].push(p);
                domination_count[p] += 1;
            }
        }
    }
    let mut fronts: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| domination_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next: Vec<usize> = Vec::new();
        for &p in &current {
            for &q in &dominated_by[p] {
                domination_count[q] -= 1;
                if domination_count[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::take(&mut current));
        current = next;
    }
    fronts
}

/// Crowding distance per front member, in front order. Fronts of one or two
/// members are unbounded; per objective the sorted extremes get infinity and
/// interior members accumulate the normalized neighbour gap; objectives with
/// zero range contribute nothing.
pub fn crowding_distance(front: &[&Individual]) -> Vec<f64> {
    let len = front.len();
    assert!(len > 0, "crowding distance of an empty front");
    if len <= 2 {
        return vec![f64::INFINITY; len];
    }
    let arity = front[0].objectives.len();
    let mut distance = vec![0.0f64; len];
    let mut idx: Vec<usize> = (0..len).collect();
    for m in 0..arity {
        idx.sort_by(|&a, &b| {
            front[a].objectives[m]
                .partial_cmp(&front[b].objectives[m])
                .expect("finite objectives")
                .then(a.cmp(&b))
        });
        let lo = front[idx[0]].objectives[m];
        let hi = front[idx[len - 1]].objectives[m];
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        distance[idx[0]] = f64::INFINITY;
        distance[idx[len - 1]] = f64::INFINITY;
        for w in 1..len - 1 {
            let prev = front[idx[w - 1]].objectives[m];
            let next = front[idx[w + 1]].objectives[m];
            distance[idx[w]] += (next - prev) / range;
        }
    }
    distance
}

/// Rank and crowding assigned to one population member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub rank: usize,
    pub crowding: f64,
}

/// Assigns NSGA-II rank and crowding to every member: valid members get
/// their front index, invalid members share one rank below all valid fronts
/// with zero crowding.
pub fn rank_population(pop: &[Individual]) -> Vec<Ranked> {
    let valid_idx: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].valid).collect();
    let valids: Vec<Individual> = valid_idx.iter().map(|&i| pop[i].clone()).collect();
    let fronts = fast_nondominated_sort(&valids);
    let mut ranked = vec![Ranked { rank: fronts.len(), crowding: 0.0 }; pop.len()];
    for (rank, front) in fronts.iter().enumerate() {
        let members: Vec<&Individual> = front.iter().map(|&i| &valids[i]).collect();
        let crowding = crowding_distance(&members);
        for (k, &i) in front.iter().enumerate() {
            ranked[valid_idx[i]] = Ranked { rank, crowding: crowding[k] };
        }
    }
    ranked
}

/// Binary tournament: draws two members uniformly with replacement; the
/// lower rank wins, ties fall to the larger crowding distance, then to the
/// lower index.
pub fn tournament_select<R: Rng>(ranked: &[Ranked], rng: &mut R) -> usize {
    assert!(!ranked.is_empty(), "tournament over an empty population");
    let a = rng.random_range(0..ranked.len());
    let b = rng.random_range(0..ranked.len());
    better_candidate(ranked, a, b)
}

fn better_candidate(ranked: &[Ranked], a: usize, b: usize) -> usize {
    if ranked[a].rank != ranked[b].rank {
        return if ranked[a].rank < ranked[b].rank { a } else { b };
    }
    if ranked[a].crowding != ranked[b].crowding {
        return if ranked[a].crowding > ranked[b].crowding { a } else { b };
    }
    a.min(b)
}

/// Sets one uniformly chosen gene to 1 if every gene is zero.
fn repair_all_zero<R: Rng>(counts: &mut [u32], rng: &mut R) {
    if counts.iter().all(|&c| c == 0) {
        let i = rng.random_range(0..counts.len());
        counts[i] = 1;
    }
}

/// Uniform crossover: each gene comes from either parent with probability
/// one half; the result is clamped to bounds and repaired if all-zero.
pub fn recombine<R: Rng>(a: &Genome, b: &Genome, max_count: u32, rng: &mut R) -> Genome {
    assert_eq!(a.counts.len(), b.counts.len(), "genome length mismatch");
    let mut counts: Vec<u32> = a
        .counts
        .iter()
        .zip(&b.counts)
        .map(|(&x, &y)| if rng.random::<bool>() { x } else { y }.min(max_count))
        .collect();
    repair_all_zero(&mut counts, rng);
    Genome { counts }
}

/// Per-gene mutation: with probability `m` a gene is resampled uniformly
/// from `[0, max_count]`; an all-zero result is repaired.
pub fn mutate<R: Rng>(genome: &Genome, m: f64, max_count: u32, rng: &mut R) -> Genome {
    let mut counts = genome.counts.clone();
    for c in counts.iter_mut() {
        if rng.random::<f64>() < m {
            *c = rng.random_range(0..=max_count);
        }
    }
    repair_all_zero(&mut counts, rng);
    Genome { counts }
}

fn random_genome<R: Rng>(len: usize, max_count: u32, rng: &mut R) -> Genome {
    let mut counts: Vec<u32> = (0..len).map(|_| rng.random_range(0..=max_count)).collect();
    repair_all_zero(&mut counts, rng);
    Genome { counts }
}

/// Final population with the indices of its Pareto front.
#[derive(Debug, Clone)]
pub struct EvolveOutcome {
    pub population: Vec<Individual>,
    /// Indices into `population` forming front 0 of the valid members.
    pub front: Vec<usize>,
    pub evaluations: u64,
}

fn validate(params: &OptimizerParams, targets: &[AccessTarget]) -> Result<(), EvolveError> {
    let fail = |msg: &str| Err(EvolveError::BadParams(msg.to_string()));
    if params.population < 4 || params.population % 2 != 0 {
        return fail("population must be even and at least 4");
    }
    if params.generations < 1 {
        return fail("at least one generation required");
    }
    if !(0.0..=1.0).contains(&params.mutation_prob) {
        return fail("mutation probability must lie in [0, 1]");
    }
    if targets.is_empty() || targets[0] != AccessTarget::Reg {
        return fail("target list must start with REG");
    }
    for (i, t) in targets.iter().enumerate() {
        if targets[..i].contains(t) {
            return fail("target list contains duplicates");
        }
    }
    Ok(())
}

/// Runs the NSGA-II loop: a random initial population of N, then G
/// generations of binary tournament selection, uniform crossover, and
/// mutation, with elitist merge-and-truncate survivor selection. Every
/// evaluation is appended to `log` as one tab-separated line: generation,
/// index, decoded access grammar, objective values to six significant
/// digits, valid flag. Deterministic for a fixed seed and a deterministic
/// evaluator.
pub fn evolve<E>(
    params: &OptimizerParams,
    targets: &[AccessTarget],
    mut evaluator: E,
    log: &mut dyn Write,
) -> Result<EvolveOutcome, EvolveError>
where
    E: FnMut(&Genome) -> Result<Individual, String>,
{
    validate(params, targets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let n = params.population;
    let mut evaluations = 0u64;

    let mut log_eval =
        |generation: usize, index: usize, ind: &Individual, evals: &mut u64| -> Result<(), EvolveError> {
            let grammar = ind.genome.decode(targets).to_string();
            let mut line = format!("{generation}\t{index}\t{grammar}");
            for v in &ind.objectives {
                line.push('\t');
                line.push_str(&format_significant(*v, 6));
            }
            line.push('\t');
            line.push_str(if ind.valid { "true" } else { "false" });
            line.push('\n');
            log.write_all(line.as_bytes()).map_err(EvolveError::Log)?;
            *evals += 1;
            Ok(())
        };

    let mut population: Vec<Individual> = Vec::with_capacity(n);
    for index in 0..n {
        let genome = random_genome(targets.len(), params.max_count, &mut rng);
        let ind = evaluator(&genome).map_err(|message| EvolveError::Evaluation {
            generation: 0,
            index,
            message,
        })?;
        log_eval(0, index, &ind, &mut evaluations)?;
        population.push(ind);
    }

    for generation in 1..=params.generations {
        let ranked = rank_population(&population);
        let mut children: Vec<Individual> = Vec::with_capacity(n);
        for index in 0..n {
            let p1 = tournament_select(&ranked, &mut rng);
            let p2 = tournament_select(&ranked, &mut rng);
            let child = recombine(
                &population[p1].genome,
                &population[p2].genome,
                params.max_count,
                &mut rng,
            );
            let child = mutate(&child, params.mutation_prob, params.max_count, &mut rng);
            let ind = evaluator(&child).map_err(|message| EvolveError::Evaluation {
                generation,
                index,
                message,
            })?;
            log_eval(generation, index, &ind, &mut evaluations)?;
            children.push(ind);
        }
        population.append(&mut children);
        population = select_survivors(population, n);
    }

    let front = final_front(&population);
    Ok(EvolveOutcome { population, front, evaluations })
}

/// Elitist environmental selection over the merged 2N population: fill
/// front by front, truncating the split front by descending crowding
/// distance (ties broken by merge index). Invalid members come last.
fn select_survivors(merged: Vec<Individual>, n: usize) -> Vec<Individual> {
    let valid_idx: Vec<usize> = (0..merged.len()).filter(|&i| merged[i].valid).collect();
    let invalid_idx: Vec<usize> = (0..merged.len()).filter(|&i| !merged[i].valid).collect();
    let valids: Vec<Individual> = valid_idx.iter().map(|&i| merged[i].clone()).collect();

    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    for front in fast_nondominated_sort(&valids) {
        if chosen.len() == n {
            break;
        }
        let room = n - chosen.len();
        if front.len() <= room {
            chosen.extend(front.iter().map(|&i| valid_idx[i]));
            continue;
        }
        let members: Vec<&Individual> = front.iter().map(|&i| &valids[i]).collect();
        let crowding = crowding_distance(&members);
        let mut order: Vec<usize> = (0..front.len()).collect();
        order.sort_by(|&a, &b| {
            crowding[b]
                .partial_cmp(&crowding[a])
                .expect("crowding is never NaN")
                .then(front[a].cmp(&front[b]))
        });
        chosen.extend(order[..room].iter().map(|&k| valid_idx[front[k]]));
    }
    // short on valids: pad with invalid members in merge order
    for &i in &invalid_idx {
        if chosen.len() == n {
            break;
        }
        chosen.push(i);
    }
    chosen.sort_unstable();
    let mut keep = vec![false; merged.len()];
    for &i in &chosen {
        keep[i] = true;
    }
    merged
        .into_iter()
        .zip(keep)
        .filter_map(|(ind, k)| k.then_some(ind))
        .collect()
}

/// Front 0 (indices) of the valid members of a population.
pub fn final_front(population: &[Individual]) -> Vec<usize> {
    let valid_idx: Vec<usize> = (0..population.len()).filter(|&i| population[i].valid).collect();
    if valid_idx.is_empty() {
        return Vec::new();
    }
    let valids: Vec<Individual> = valid_idx.iter().map(|&i| population[i].clone()).collect();
    let fronts = fast_nondominated_sort(&valids);
    fronts[0].iter().map(|&i| valid_idx[i]).collect()
}
