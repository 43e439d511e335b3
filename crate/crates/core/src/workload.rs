//! Workload description model: the memory-access grammar, deterministic
//! interleaving of accesses into a base sequence, and unrolled schedules.

use std::fmt;

/// Memory hierarchy levels with total order REG < L1 < L2 < L3 < RAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MemoryLevel {
    Reg,
    L1,
    L2,
    L3,
    Ram,
}

impl fmt::Display for MemoryLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryLevel::Reg => "REG",
            MemoryLevel::L1 => "L1",
            MemoryLevel::L2 => "L2",
            MemoryLevel::L3 => "L3",
            MemoryLevel::Ram => "RAM",
        })
    }
}

/// Non-register levels that data accesses can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DataLevel {
    L1,
    L2,
    L3,
    Ram,
}

impl DataLevel {
    pub const ALL: [DataLevel; 4] = [DataLevel::L1, DataLevel::L2, DataLevel::L3, DataLevel::Ram];

    pub fn index(self) -> usize {
        match self {
            DataLevel::L1 => 0,
            DataLevel::L2 => 1,
            DataLevel::L3 => 2,
            DataLevel::Ram => 3,
        }
    }

    fn from_token(tok: &str) -> Option<Self> {
        Some(match tok {
            "L1" => DataLevel::L1,
            "L2" => DataLevel::L2,
            "L3" => DataLevel::L3,
            "RAM" => DataLevel::Ram,
            _ => return None,
        })
    }
}

impl From<DataLevel> for MemoryLevel {
    fn from(level: DataLevel) -> Self {
        match level {
            DataLevel::L1 => MemoryLevel::L1,
            DataLevel::L2 => MemoryLevel::L2,
            DataLevel::L3 => MemoryLevel::L3,
            DataLevel::Ram => MemoryLevel::Ram,
        }
    }
}

impl fmt::Display for DataLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        MemoryLevel::from(*self).fmt(f)
    }
}

/// Access pattern for non-register targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AccessPattern {
    /// `L`: one load.
    Load,
    /// `S`: one store.
    Store,
    /// `LS`: load plus store.
    LoadStore,
    /// `2LS`: two loads plus store.
    TwoLoadsStore,
    /// `P`: prefetch.
    Prefetch,
}

impl AccessPattern {
    pub const ALL: [AccessPattern; 5] = [
        AccessPattern::Load,
        AccessPattern::Store,
        AccessPattern::LoadStore,
        AccessPattern::TwoLoadsStore,
        AccessPattern::Prefetch,
    ];

    fn token(self) -> &'static str {
        match self {
            AccessPattern::Load => "L",
            AccessPattern::Store => "S",
            AccessPattern::LoadStore => "LS",
            AccessPattern::TwoLoadsStore => "2LS",
            AccessPattern::Prefetch => "P",
        }
    }

    fn from_token(tok: &str) -> Option<Self> {
        Some(match tok {
            "L" => AccessPattern::Load,
            "S" => AccessPattern::Store,
            "LS" => AccessPattern::LoadStore,
            "2LS" => AccessPattern::TwoLoadsStore,
            "P" => AccessPattern::Prefetch,
            _ => return None,
        })
    }
}

impl fmt::Display for AccessPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// One slot target: registers, or a memory level with an access pattern.
///
/// Register targets carry no pattern by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AccessTarget {
    Reg,
    Mem { level: DataLevel, pattern: AccessPattern },
}

impl AccessTarget {
    pub fn mem(level: DataLevel, pattern: AccessPattern) -> Self {
        AccessTarget::Mem { level, pattern }
    }

    /// Level of this target in the five-level reporting order.
    pub fn memory_level(&self) -> MemoryLevel {
        match self {
            AccessTarget::Reg => MemoryLevel::Reg,
            AccessTarget::Mem { level, .. } => MemoryLevel::from(*level),
        }
    }
}

impl fmt::Display for AccessTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccessTarget::Reg => f.write_str("REG"),
            AccessTarget::Mem { level, pattern } => write!(f, "{level}_{pattern}"),
        }
    }
}

/// A target with its occurrence count within the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessGroup {
    pub target: AccessTarget,
    pub count: u32,
}

impl fmt::Display for AccessGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.target, self.count)
    }
}

/// Ordered, duplicate-free list of access groups with positive counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessSet {
    groups: Vec<AccessGroup>,
}

/// Constraint violation while assembling an [`AccessSet`] programmatically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessSetError {
    Empty,
    ZeroCount(AccessTarget),
    DuplicateTarget(AccessTarget),
}

impl fmt::Display for AccessSetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccessSetError::Empty => write!(f, "access set must contain at least one group"),
            AccessSetError::ZeroCount(t) => write!(f, "access group {t} has zero count"),
            AccessSetError::DuplicateTarget(t) => write!(f, "duplicate access target {t}"),
        }
    }
}

impl std::error::Error for AccessSetError {}

impl AccessSet {
    pub fn new(groups: Vec<AccessGroup>) -> Result<Self, AccessSetError> {
        if groups.is_empty() {
            return Err(AccessSetError::Empty);
        }
        for (i, g) in groups.iter().enumerate() {
            if g.count == 0 {
                return Err(AccessSetError::ZeroCount(g.target));
            }
            if groups[..i].iter().any(|h| h.target == g.target) {
                return Err(AccessSetError::DuplicateTarget(g.target));
            }
        }
        Ok(AccessSet { groups })
    }

    pub fn groups(&self) -> &[AccessGroup] {
        &self.groups
    }

    /// Total number of slots one base period occupies (sum of counts).
    pub fn total(&self) -> u32 {
        self.groups.iter().map(|g| g.count).sum()
    }
}

impl fmt::Display for AccessSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.groups.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{g}")?;
        }
        Ok(())
    }
}

/// Why a grammar string failed to parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax(&'static str),
    UnknownLevel(String),
    UnknownPattern(String),
    InvalidCount(String),
    NonPositiveCount(String),
    DuplicateTarget(AccessTarget),
}

/// Parse failure with the byte offset of the offending item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub position: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "access grammar error at offset {}: ", self.position)?;
        match &self.kind {
            ParseErrorKind::Syntax(msg) => write!(f, "{msg}"),
            ParseErrorKind::UnknownLevel(tok) => write!(f, "unknown memory level `{tok}`"),
            ParseErrorKind::UnknownPattern(tok) => write!(f, "unknown access pattern `{tok}`"),
            ParseErrorKind::InvalidCount(tok) => write!(f, "invalid count `{tok}`"),
            ParseErrorKind::NonPositiveCount(tok) => {
                write!(f, "count must be a positive integer, got `{tok}`")
            }
            ParseErrorKind::DuplicateTarget(t) => write!(f, "duplicate target {t}"),
        }
    }
}

impl std::error::Error for ParseError {}

/// Parses the textual access grammar, e.g. `REG:4,L1_L:2,L2_L:1`.
///
/// Items are `TARGET:COUNT`, comma separated, no whitespace. `TARGET` is
/// `REG` or `<LEVEL>_<PATTERN>` with level in {L1,L2,L3,RAM} and pattern in
/// {L,S,LS,2LS,P}. The textual order of groups is preserved.
pub fn parse_access_set(text: &str) -> Result<AccessSet, ParseError> {
    let err = |position, kind| Err(ParseError { position, kind });
    if text.is_empty() {
        return err(0, ParseErrorKind::Syntax("empty access set"));
    }
    let mut groups: Vec<AccessGroup> = Vec::new();
    let mut pos = 0usize;
    for item in text.split(',') {
        if item.is_empty() {
            return err(pos, ParseErrorKind::Syntax("empty item"));
        }
        let Some(colon) = item.find(':') else {
            return err(pos, ParseErrorKind::Syntax("missing `:` between target and count"));
        };
        let (target_str, count_str) = (&item[..colon], &item[colon + 1..]);
        let target = if target_str == "REG" {
            AccessTarget::Reg
        } else if let Some(us) = target_str.find('_') {
            let (level_tok, pattern_tok) = (&target_str[..us], &target_str[us + 1..]);
            let Some(level) = DataLevel::from_token(level_tok) else {
                return err(pos, ParseErrorKind::UnknownLevel(level_tok.to_string()));
            };
            let Some(pattern) = AccessPattern::from_token(pattern_tok) else {
                return err(
                    pos + us + 1,
                    ParseErrorKind::UnknownPattern(pattern_tok.to_string()),
                );
            };
            AccessTarget::Mem { level, pattern }
        } else {
            return err(pos, ParseErrorKind::Syntax("target must be `REG` or `LEVEL_PATTERN`"));
        };
        let count_pos = pos + colon + 1;
        if count_str.is_empty() || !count_str.bytes().all(|b| b.is_ascii_digit()) {
            if count_str.starts_with('-') {
                return err(count_pos, ParseErrorKind::NonPositiveCount(count_str.to_string()));
            }
            return err(count_pos, ParseErrorKind::InvalidCount(count_str.to_string()));
        }
        let count: u32 = match count_str.parse() {
            Ok(c) => c,
            Err(_) => return err(count_pos, ParseErrorKind::InvalidCount(count_str.to_string())),
        };
        if count == 0 {
            return err(count_pos, ParseErrorKind::NonPositiveCount(count_str.to_string()));
        }
        if groups.iter().any(|g| g.target == target) {
            return err(pos, ParseErrorKind::DuplicateTarget(target));
        }
        groups.push(AccessGroup { target, count });
        pos += item.len() + 1;
    }
    Ok(AccessSet { groups })
}

/// Canonical text form; `parse_access_set(format_access_set(s)) == s`.
pub fn format_access_set(set: &AccessSet) -> String {
    set.to_string()
}

/// Builds the deterministic base interleaving of length `total(set)`.
///
/// Slots are assigned one by one in largest-remainder order: the group whose
/// placed share lags its quota the most goes first, which spreads every
/// group's occurrences as evenly as the mix allows. A bounded backtracking
/// pass additionally enforces the per-group spacing floor of
/// `total / count` slots between consecutive occurrences (circularly)
/// whenever some assignment achieves it; sets where the floors are
/// unsatisfiable keep the plain largest-remainder order.
pub fn build_base_sequence(set: &AccessSet) -> Vec<AccessTarget> {
    spaced_base_sequence(set)
        .unwrap_or_else(|| largest_remainder_sequence(set.groups(), set.total() as usize))
}

/// The spacing-guaranteed interleaving, when one exists within the bounded
/// search: every group with two or more occurrences keeps a circular gap of
/// at least `floor(total / count)` slots. `None` means the floors admit no
/// arrangement (or none was found within budget); [`build_base_sequence`]
/// then falls back to plain largest-remainder order.
pub fn spaced_base_sequence(set: &AccessSet) -> Option<Vec<AccessTarget>> {
    spaced_sequence_search(set.groups(), set.total() as usize)
}

/// Backtracking construction of a sequence in which group `i` keeps a
/// circular gap of at least `floor(n / count_i)` between occurrences.
/// Deterministic: candidate groups per slot are tried in exact
/// largest-remainder order, so the first (returned) solution coincides with
/// [`largest_remainder_sequence`] whenever that already meets the floors.
fn spaced_sequence_search(groups: &[AccessGroup], n: usize) -> Option<Vec<AccessTarget>> {
    const NODE_BUDGET: u64 = 400_000;

    struct State {
        counts: Vec<usize>,
        min_gap: Vec<usize>,
        placed: Vec<usize>,
        first: Vec<usize>,
        last: Vec<usize>,
        choice: Vec<usize>,
        budget: u64,
    }

    fn feasible(st: &State, gi: usize, slot: usize, n: usize) -> bool {
        let placed = st.placed[gi];
        if placed == st.counts[gi] {
            return false;
        }
        if placed > 0 && slot - st.last[gi] < st.min_gap[gi] {
            return false;
        }
        // latest admissible slot for this group's final occurrence: it must
        // leave the circular wrap gap back to the first occurrence intact
        let first = if placed == 0 { slot } else { st.first[gi] };
        let final_deadline = first + n - st.min_gap[gi];
        let remaining_after = st.counts[gi] - placed - 1;
        let earliest_finish = slot + remaining_after * st.min_gap[gi];
        earliest_finish <= final_deadline.min(n - 1).max(0)
    }

    fn others_still_feasible(st: &State, slot: usize, n: usize) -> bool {
        for gi in 0..st.counts.len() {
            let remaining = st.counts[gi] - st.placed[gi];
            if remaining == 0 {
                continue;
            }
            let earliest_next = if st.placed[gi] == 0 {
                slot + 1
            } else {
                (st.last[gi] + st.min_gap[gi]).max(slot + 1)
            };
            let first = if st.placed[gi] == 0 { earliest_next } else { st.first[gi] };
            let finish = earliest_next + (remaining - 1) * st.min_gap[gi];
            if finish > (first + n).saturating_sub(st.min_gap[gi]).min(n - 1) {
                return false;
            }
        }
        true
    }

    fn recurse(groups: &[AccessGroup], st: &mut State, slot: usize, n: usize) -> bool {
        if slot == n {
            return true;
        }
        if st.budget == 0 {
            return false;
        }
        // largest-remainder candidate order: descending deficit, then
        // descending count, then set order
        let mut order: Vec<usize> = (0..groups.len()).collect();
        let deficit = |gi: usize| {
            groups[gi].count as i128 * (slot as i128 + 1) - st.placed[gi] as i128 * n as i128
        };
        order.sort_by(|&a, &b| {
            deficit(b)
                .cmp(&deficit(a))
                .then(groups[b].count.cmp(&groups[a].count))
                .then(a.cmp(&b))
        });
        for gi in order {
            if st.budget == 0 {
                return false;
            }
            st.budget -= 1;
            if !feasible(st, gi, slot, n) {
                continue;
            }
            let prev_first = st.first[gi];
            let prev_last = st.last[gi];
            if st.placed[gi] == 0 {
                st.first[gi] = slot;
            }
            st.last[gi] = slot;
            st.placed[gi] += 1;
            st.choice[slot] = gi;
            if others_still_feasible(st, slot, n) && recurse(groups, st, slot + 1, n) {
                return true;
            }
            st.placed[gi] -= 1;
            st.first[gi] = prev_first;
            st.last[gi] = prev_last;
        }
        false
    }

    let mut st = State {
        counts: groups.iter().map(|g| g.count as usize).collect(),
        min_gap: groups.iter().map(|g| n / g.count as usize).collect(),
        placed: vec![0; groups.len()],
        first: vec![0; groups.len()],
        last: vec![0; groups.len()],
        choice: vec![0; n],
        budget: NODE_BUDGET,
    };
    if recurse(groups, &mut st, 0, n) {
        Some(st.choice[..n].iter().map(|&gi| groups[gi].target).collect())
    } else {
        None
    }
}

/// Exact largest-remainder sequencing: slot `j` goes to the group whose
/// placed share lags its quota `count * (j+1) / n` the most.
fn largest_remainder_sequence(groups: &[AccessGroup], n: usize) -> Vec<AccessTarget> {
    let mut placed = vec![0u64; groups.len()];
    let mut seq = Vec::with_capacity(n);
    for j in 0..n as u64 {
        let mut best: Option<usize> = None;
        let mut best_deficit = i128::MIN;
        for (i, g) in groups.iter().enumerate() {
            if placed[i] >= g.count as u64 {
                continue;
            }
            // deficit = count*(j+1)/n - placed, scaled by n to stay integral
            let deficit = g.count as i128 * (j as i128 + 1) - placed[i] as i128 * n as i128;
            let better = match best {
                None => true,
                Some(b) => {
                    deficit > best_deficit
                        || (deficit == best_deficit && groups[i].count > groups[b].count)
                }
            };
            if better {
                best = Some(i);
                best_deficit = deficit;
            }
        }
        let i = best.expect("some group always has a positive deficit");
        placed[i] += 1;
        seq.push(groups[i].target);
    }
    seq
}

/// Instruction mix identified by `-i/--function`: the arithmetic content of
/// one set of instructions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionSetDef {
    pub id: String,
    pub fma_per_set: u32,
    pub alu_per_set: u32,
    pub instructions_per_set: u32,
    /// Encoded size estimate, informational for fetch-tier sizing.
    pub bytes_per_set: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstructionSetError {
    /// `instructions_per_set >= fma_per_set + alu_per_set >= 1` violated.
    BadCounts { id: String },
    DuplicateId(String),
}

impl fmt::Display for InstructionSetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstructionSetError::BadCounts { id } => write!(
                f,
                "instruction set `{id}`: instructions_per_set must cover fma + alu (>= 1)"
            ),
            InstructionSetError::DuplicateId(id) => {
                write!(f, "instruction set `{id}` already registered")
            }
        }
    }
}

impl std::error::Error for InstructionSetError {}

impl InstructionSetDef {
    pub fn new(
        id: &str,
        fma_per_set: u32,
        alu_per_set: u32,
        instructions_per_set: u32,
        bytes_per_set: u32,
    ) -> Result<Self, InstructionSetError> {
        let arith = fma_per_set + alu_per_set;
        if arith < 1 || instructions_per_set < arith {
            return Err(InstructionSetError::BadCounts { id: id.to_string() });
        }
        Ok(InstructionSetDef {
            id: id.to_string(),
            fma_per_set,
            alu_per_set,
            instructions_per_set,
            bytes_per_set,
        })
    }
}

/// Haswell-style mix: two FMA plus two ALU instructions per set, one set per
/// cycle on a four-wide decoder.
pub fn haswell_fma_alu() -> InstructionSetDef {
    InstructionSetDef::new("hsw_fma_alu", 2, 2, 4, 18).expect("builtin is valid")
}

/// Ordered registry of instruction sets; `--avail` lists registration order.
#[derive(Debug, Clone, Default)]
pub struct InstructionSetRegistry {
    sets: Vec<InstructionSetDef>,
}

impl InstructionSetRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::default();
        reg.register(haswell_fma_alu()).expect("no duplicates among builtins");
        reg
    }

    pub fn register(&mut self, def: InstructionSetDef) -> Result<(), InstructionSetError> {
        if self.sets.iter().any(|s| s.id == def.id) {
            return Err(InstructionSetError::DuplicateId(def.id));
        }
        self.sets.push(def);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&InstructionSetDef> {
        self.sets.iter().find(|s| s.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &InstructionSetDef> {
        self.sets.iter()
    }
}

/// Complete workload description: instruction set id, unroll factor, and
/// memory accesses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadConfig {
    pub instruction_set: String,
    pub unroll: u32,
    pub accesses: AccessSet,
}

/// Fully unrolled inner loop: one target per instruction-set slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    slots: Vec<AccessTarget>,
}

impl Schedule {
    pub fn slots(&self) -> &[AccessTarget] {
        &self.slots
    }

    pub fn unroll(&self) -> u32 {
        self.slots.len() as u32
    }
}

/// Tiles the base sequence cyclically to exactly `unroll` slots.
pub fn build_schedule(config: &WorkloadConfig) -> Schedule {
    assert!(config.unroll >= 1, "unroll factor must be at least 1");
    let base = build_base_sequence(&config.accesses);
    let n = base.len();
    let slots = (0..config.unroll as usize).map(|j| base[j % n]).collect();
    Schedule { slots }
}
