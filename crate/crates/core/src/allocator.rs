//! Bit allocation under an average-bit budget.
//!
//! [`greedy_allocate`] starts every designated channel at 16 bits and pops
//! adjacent demotions (16→8→4→2→0) from a min-heap keyed by the marginal
//! error per saved bit until the average fits the budget.
//! [`brute_force_allocate`] enumerates every assignment for small instances.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ChannelId;
use crate::quant::BitWidth;
use crate::sensitivity::{Method, SensitivityTable};

/// Largest instance [`brute_force_allocate`] accepts.
pub const BRUTE_FORCE_MAX_CHANNELS: usize = 8;

/// Bits available to `n` channels at average `budget`.
fn bit_capacity(budget: f64, n: usize) -> u64 {
    (budget * n as f64 + 1e-9).floor().max(0.0) as u64
}

/// Per-channel bit assignment over the designated channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BitAllocation {
    assignment: BTreeMap<ChannelId, BitWidth>,
    budget: f64,
    designated: BTreeSet<ChannelId>,
    last_demotion: Option<DemotionCandidate>,
}

impl BitAllocation {
    /// Uniform assignment of `bit` to every channel.
    pub fn uniform(channels: &[ChannelId], bit: BitWidth) -> Result<Self> {
        Self::unchecked(channels.iter().map(|&c| (c, bit)).collect(), f64::from(bit.bits()))
    }

    /// Builds an allocation without checking the budget; use
    /// [`Self::satisfies_budget`] to validate.
    pub fn unchecked(assignment: BTreeMap<ChannelId, BitWidth>, budget: f64) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::InvalidArgument("allocation has no designated channels".into()));
        }
        Ok(BitAllocation {
            designated: assignment.keys().copied().collect(),
            assignment,
            budget,
            last_demotion: None,
        })
    }

    pub fn assignment(&self) -> &BTreeMap<ChannelId, BitWidth> {
        &self.assignment
    }

    pub fn designated(&self) -> &BTreeSet<ChannelId> {
        &self.designated
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn bit(&self, ch: ChannelId) -> Option<BitWidth> {
        self.assignment.get(&ch).copied()
    }

    pub fn total_bits(&self) -> u64 {
        self.assignment.values().map(|b| u64::from(b.bits())).sum()
    }

    pub fn satisfies_budget(&self) -> bool {
        self.total_bits() <= bit_capacity(self.budget, self.assignment.len())
    }

    /// The demotion that brought the allocation within budget, if any.
    pub fn last_demotion(&self) -> Option<&DemotionCandidate> {
        self.last_demotion.as_ref()
    }

    /// Whether reverting the final demotion would break the budget.
    pub fn is_minimal(&self) -> bool {
        match &self.last_demotion {
            None => true,
            Some(d) => {
                let saved = u64::from(d.from_bit.bits() - d.to_bit.bits());
                self.total_bits() + saved > bit_capacity(self.budget, self.assignment.len())
            }
        }
    }

    pub fn histogram(&self) -> BTreeMap<u32, usize> {
        let mut h: BTreeMap<u32, usize> = BitWidth::ALL.iter().map(|b| (b.bits(), 0)).collect();
        for b in self.assignment.values() {
            *h.entry(b.bits()).or_default() += 1;
        }
        h
    }

    pub fn pruned_fraction(&self) -> f64 {
        let pruned = self.assignment.values().filter(|b| **b == BitWidth::ZERO).count();
        pruned as f64 / self.assignment.len() as f64
    }

    /// Mean assigned bits over channels whose id satisfies `filter`.
    pub fn mean_bits_where(&self, filter: impl Fn(ChannelId) -> bool) -> Option<f64> {
        let (n, sum) = self
            .assignment
            .iter()
            .filter(|(c, _)| filter(**c))
            .fold((0usize, 0u64), |(n, s), (_, b)| (n + 1, s + u64::from(b.bits())));
        (n > 0).then(|| sum as f64 / n as f64)
    }
}

/// Mean bit-width over designated channels.
pub fn average_bits(alloc: &BitAllocation) -> Result<f64> {
    if alloc.assignment.is_empty() {
        return Err(Error::InvalidArgument("no designated channels".into()));
    }
    Ok(alloc.total_bits() as f64 / alloc.assignment.len() as f64)
}

/// `Σ s^(b)` of an allocation under `table`.
pub fn objective(table: &SensitivityTable, alloc: &BitAllocation) -> Result<f64> {
    alloc
        .assignment
        .iter()
        .map(|(&c, &b)| table.require(c, b))
        .sum()
}

/// Marginal increase in error per bit saved by demoting `b_hi → b_lo`.
pub fn rho(s_lo: f64, s_hi: f64, b_hi: BitWidth, b_lo: BitWidth) -> Result<f64> {
    if b_hi <= b_lo {
        return Err(Error::InvalidArgument(format!(
            "demotion must lower the bit-width, got {b_hi} -> {b_lo}"
        )));
    }
    Ok((s_lo - s_hi) / f64::from(b_hi.bits() - b_lo.bits()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemotionCandidate {
    pub channel: ChannelId,
    pub from_bit: BitWidth,
    pub to_bit: BitWidth,
    pub rho: f64,
}

impl DemotionCandidate {
    fn new(table: &SensitivityTable, channel: ChannelId, from_bit: BitWidth) -> Result<Option<Self>> {
        let Some(to_bit) = from_bit.demoted() else {
            return Ok(None);
        };
        let rho = rho(
            table.require(channel, to_bit)?,
            table.require(channel, from_bit)?,
            from_bit,
            to_bit,
        )?;
        Ok(Some(DemotionCandidate {
            channel,
            from_bit,
            to_bit,
            rho,
        }))
    }
}

impl Eq for DemotionCandidate {}

impl Ord for DemotionCandidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rho
            .total_cmp(&other.rho)
            .then(self.channel.cmp(&other.channel))
            .then(other.from_bit.cmp(&self.from_bit))
    }
}

impl PartialOrd for DemotionCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Settings for gating 2→0 demotions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneGuardConfig {
    /// Absolute ceiling on `s^(0)`. `None` means `1e-4 ·` mean `s^(2)`.
    pub tau_abs: Option<f64>,
    /// Ceiling on `s^(0) − s^(2)` relative to its median over designated
    /// channels.
    pub tau_rel: f64,
    /// Largest fraction of designated channels that may be pruned.
    pub prune_cap: f64,
}

pub const DEFAULT_TAU_ABS_FACTOR: f64 = 1e-4;
pub const DEFAULT_TAU_REL: f64 = 1.0;
pub const DEFAULT_PRUNE_CAP: f64 = 0.10;

impl Default for PruneGuardConfig {
    fn default() -> Self {
        PruneGuardConfig {
            tau_abs: None,
            tau_rel: DEFAULT_TAU_REL,
            prune_cap: DEFAULT_PRUNE_CAP,
        }
    }
}

impl PruneGuardConfig {
    /// Lets every 2→0 demotion through.
    pub fn permissive() -> Self {
        PruneGuardConfig {
            tau_abs: Some(f64::INFINITY),
            tau_rel: f64::INFINITY,
            prune_cap: 1.0,
        }
    }

    pub fn resolve(&self, table: &SensitivityTable, designated: &[ChannelId]) -> Result<PruneGuard> {
        if !(0.0..=1.0).contains(&self.prune_cap) {
            return Err(Error::InvalidArgument(format!(
                "prune cap must be in [0, 1], got {}",
                self.prune_cap
            )));
        }
        if self.tau_rel < 0.0 || self.tau_abs.is_some_and(|t| t < 0.0) {
            return Err(Error::InvalidArgument("prune thresholds must be non-negative".into()));
        }
        let s2: Vec<f64> = designated
            .iter()
            .map(|&c| table.require(c, BitWidth::TWO))
            .collect::<Result<_>>()?;
        let mut gaps: Vec<f64> = designated
            .iter()
            .zip(&s2)
            .map(|(&c, s2)| Ok(table.require(c, BitWidth::ZERO)? - s2))
            .collect::<Result<_>>()?;
        gaps.sort_by(f64::total_cmp);
        let median_gap = match gaps.len() {
            0 => 0.0,
            n if n % 2 == 1 => gaps[n / 2],
            n => 0.5 * (gaps[n / 2 - 1] + gaps[n / 2]),
        };
        let tau_abs = self.tau_abs.unwrap_or_else(|| {
            DEFAULT_TAU_ABS_FACTOR * s2.iter().sum::<f64>() / s2.len().max(1) as f64
        });
        Ok(PruneGuard {
            tau_abs,
            tau_rel: self.tau_rel,
            median_gap: median_gap.max(0.0),
            max_pruned: (self.prune_cap * designated.len() as f64 + 1e-9).floor() as usize,
        })
    }
}

/// Resolved dual-threshold rule plus the pruning cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneGuard {
    pub tau_abs: f64,
    pub tau_rel: f64,
    pub median_gap: f64,
    pub max_pruned: usize,
}

impl PruneGuard {
    /// Dual-threshold test: `s^(0) ≤ tau_abs` and
    /// `s^(0) − s^(2) ≤ tau_rel · median(s^(0) − s^(2))`.
    pub fn allows(&self, ch: ChannelId, table: &SensitivityTable) -> Result<bool> {
        let s0 = table.require(ch, BitWidth::ZERO)?;
        let s2 = table.require(ch, BitWidth::TWO)?;
        let rel_ok = self.tau_rel.is_infinite() || s0 - s2 <= self.tau_rel * self.median_gap;
        Ok(s0 <= self.tau_abs && rel_ok)
    }
}

/// Convenience form of [`PruneGuard::allows`].
pub fn prune_guard(ch: ChannelId, table: &SensitivityTable, guard: &PruneGuard) -> Result<bool> {
    guard.allows(ch, table)
}

fn check_designated(designated: &[ChannelId], budget: f64) -> Result<()> {
    if designated.is_empty() {
        return Err(Error::InvalidArgument("no designated channels".into()));
    }
    if !(0.0..=16.0).contains(&budget) {
        return Err(Error::InvalidArgument(format!("budget must be in [0, 16], got {budget}")));
    }
    let unique: BTreeSet<_> = designated.iter().collect();
    if unique.len() != designated.len() {
        return Err(Error::InvalidArgument("designated channels contain duplicates".into()));
    }
    Ok(())
}

/// Greedy demotion: lowest `ρ` first, ties by (layer, channel), stopping as
/// soon as the average fits `budget`.
pub fn greedy_allocate(
    table: &SensitivityTable,
    designated: &[ChannelId],
    budget: f64,
    guard: &PruneGuardConfig,
) -> Result<BitAllocation> {
    check_designated(designated, budget)?;
    table.check_complete(designated)?;
    let guard = guard.resolve(table, designated)?;

    let mut current: BTreeMap<ChannelId, BitWidth> =
        designated.iter().map(|&c| (c, BitWidth::FULL)).collect();
    let capacity = bit_capacity(budget, designated.len());
    let mut total = 16 * designated.len() as u64;

    let mut heap = BinaryHeap::with_capacity(designated.len());
    for &ch in designated {
        if let Some(c) = DemotionCandidate::new(table, ch, BitWidth::FULL)? {
            heap.push(Reverse(c));
        }
    }

    let mut pruned = 0usize;
    let mut last = None;
    while total > capacity {
        let Some(Reverse(cand)) = heap.pop() else {
            break;
        };
        let slot = current.get_mut(&cand.channel).expect("designated channel");
        if *slot != cand.from_bit {
            continue;
        }
        if cand.to_bit == BitWidth::ZERO {
            if pruned >= guard.max_pruned || !guard.allows(cand.channel, table)? {
                continue;
            }
            pruned += 1;
        }
        *slot = cand.to_bit;
        total -= u64::from(cand.from_bit.bits() - cand.to_bit.bits());
        last = Some(cand);
        if let Some(next) = DemotionCandidate::new(table, cand.channel, cand.to_bit)? {
            heap.push(Reverse(next));
        }
    }
    if total > capacity {
        return Err(Error::BudgetInfeasible {
            budget,
            reason: format!(
                "average {:.4} bits after all permitted demotions",
                total as f64 / designated.len() as f64
            ),
        });
    }
    let mut alloc = BitAllocation::unchecked(current, budget)?;
    alloc.last_demotion = last;
    Ok(alloc)
}

/// Exhaustive search over all `5^n` assignments (`n ≤ 8`). Returns the
/// feasible assignment with the least objective; ties prefer more total bits,
/// then the lexicographically larger assignment.
pub fn brute_force_allocate(
    table: &SensitivityTable,
    designated: &[ChannelId],
    budget: f64,
) -> Result<BitAllocation> {
    check_designated(designated, budget)?;
    if designated.len() > BRUTE_FORCE_MAX_CHANNELS {
        return Err(Error::InstanceTooLarge(designated.len(), BRUTE_FORCE_MAX_CHANNELS));
    }
    table.check_complete(designated)?;
    let n = designated.len();
    let scores: Vec<[f64; 5]> = designated
        .iter()
        .map(|&c| {
            let mut s = [0.0; 5];
            for (k, &b) in BitWidth::ALL.iter().enumerate() {
                s[k] = table.require(c, b)?;
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let capacity = bit_capacity(budget, n);

    let mut digits = vec![0usize; n];
    let mut best: Option<(f64, u64, Vec<usize>)> = None;
    loop {
        let bits: u64 = digits.iter().map(|&d| u64::from(BitWidth::ALL[d].bits())).sum();
        if bits <= capacity {
            let obj: f64 = digits.iter().zip(&scores).map(|(&d, s)| s[d]).sum();
            let better = match &best {
                None => true,
                Some((bo, bb, bd)) => match obj.total_cmp(bo) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => bits > *bb || (bits == *bb && digits > *bd),
                },
            };
            if better {
                best = Some((obj, bits, digits.clone()));
            }
        }
        let mut k = 0;
        loop {
            if k == n {
                let (_, _, d) = best.expect("all-zero assignment is always feasible");
                let assignment = designated
                    .iter()
                    .zip(d)
                    .map(|(&c, d)| (c, BitWidth::ALL[d]))
                    .collect();
                return BitAllocation::unchecked(assignment, budget);
            }
            digits[k] += 1;
            if digits[k] < BitWidth::ALL.len() {
                break;
            }
            digits[k] = 0;
            k += 1;
        }
    }
}

/// Allocation summary file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationSummary {
    pub avg_bits: f64,
    pub histogram: BTreeMap<u32, usize>,
    pub pruned_fraction: f64,
    pub objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_gap: Option<f64>,
}

impl AllocationSummary {
    pub fn new(table: &SensitivityTable, alloc: &BitAllocation) -> Result<Self> {
        Ok(AllocationSummary {
            avg_bits: average_bits(alloc)?,
            histogram: alloc.histogram(),
            pruned_fraction: alloc.pruned_fraction(),
            objective: objective(table, alloc)?,
            oracle_objective: None,
            oracle_gap: None,
        })
    }

    /// Records the exhaustive optimum and the greedy's relative gap to it.
    pub fn with_oracle(mut self, oracle_objective: f64) -> Self {
        self.oracle_gap = Some(relative_gap(self.objective, oracle_objective));
        self.oracle_objective = Some(oracle_objective);
        self
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serialization is infallible");
        s.push('\n');
        s
    }
}

/// `(greedy − oracle) / oracle`, or 0 when both are 0.
pub fn relative_gap(greedy: f64, oracle: f64) -> f64 {
    if oracle == 0.0 {
        if greedy == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (greedy - oracle) / oracle
    }
}

/// Random table whose per-channel curves have non-decreasing marginal error
/// per saved bit as precision drops.
pub fn synthetic_convex_table(n_channels: usize, seed: u64) -> (SensitivityTable, Vec<ChannelId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = SensitivityTable::new();
    let channels: Vec<ChannelId> = (0..n_channels).map(|c| ChannelId::new(0, c)).collect();
    for &ch in &channels {
        let mut slopes = [0.0f64; 4];
        let mut s = rng.random_range(0.01..1.0);
        for slope in &mut slopes {
            *slope = s;
            s *= rng.random_range(1.0..4.0);
        }
        // 16→8, 8→4, 4→2, 2→0 save 8, 4, 2, 2 bits.
        let s8 = 8.0 * slopes[0];
        let s4 = s8 + 4.0 * slopes[1];
        let s2 = s4 + 2.0 * slopes[2];
        let s0 = s2 + 2.0 * slopes[3];
        for (b, v) in [(BitWidth::EIGHT, s8), (BitWidth::FOUR, s4), (BitWidth::TWO, s2), (BitWidth::ZERO, s0)] {
            table.insert(ch, b, v, Method::ExactSingleStep).expect("finite score");
        }
    }
    (table, channels)
}

/// Random table with independent per-bit scores that are non-increasing in
/// bits.
pub fn synthetic_random_table(n_channels: usize, seed: u64) -> (SensitivityTable, Vec<ChannelId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = SensitivityTable::new();
    let channels: Vec<ChannelId> = (0..n_channels).map(|c| ChannelId::new(0, c)).collect();
    for &ch in &channels {
        let mut s = 0.0;
        for b in [BitWidth::EIGHT, BitWidth::FOUR, BitWidth::TWO, BitWidth::ZERO] {
            s += rng.random_range(0.0..1.0);
            table.insert(ch, b, s, Method::ExactSingleStep).expect("finite score");
        }
    }
    (table, channels)
}

/// Times one greedy allocation at budget 8 over a synthetic table.
pub fn allocation_complexity_probe(n_channels: usize, seed: u64) -> Result<Duration> {
    let (table, channels) = synthetic_random_table(n_channels, seed);
    let start = Instant::now();
    let alloc = greedy_allocate(&table, &channels, 8.0, &PruneGuardConfig::default())?;
    let elapsed = start.elapsed();
    debug_assert!(alloc.satisfies_budget());
    Ok(elapsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ch(c: usize) -> ChannelId {
        ChannelId::new(0, c)
    }

    fn table_from(rows: &[[f64; 4]]) -> (SensitivityTable, Vec<ChannelId>) {
        let mut t = SensitivityTable::new();
        let chans: Vec<ChannelId> = (0..rows.len()).map(ch).collect();
        for (c, r) in chans.iter().zip(rows) {
            for (b, s) in BitWidth::SCORED.iter().zip(r) {
                t.insert(*c, *b, *s, Method::ExactSingleStep).unwrap();
            }
        }
        (t, chans)
    }

    #[test]
    fn rho_values() {
        assert!((rho(0.9, 0.1, BitWidth::FULL, BitWidth::EIGHT).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(rho(0.3, 0.3, BitWidth::FOUR, BitWidth::TWO).unwrap(), 0.0);
        assert!((rho(0.0, 0.2, BitWidth::FOUR, BitWidth::TWO).unwrap() + 0.1).abs() < 1e-15);
        assert!(rho(0.0, 0.2, BitWidth::TWO, BitWidth::FOUR).is_err());
        assert!(rho(0.0, 0.2, BitWidth::TWO, BitWidth::TWO).is_err());
    }

    fn alloc_with(counts: &[(BitWidth, usize)]) -> BitAllocation {
        let mut m = BTreeMap::new();
        let mut c = 0;
        for &(b, n) in counts {
            for _ in 0..n {
                m.insert(ch(c), b);
                c += 1;
            }
        }
        BitAllocation::unchecked(m, 16.0).unwrap()
    }

    #[test]
    fn average_bits_cases() {
        assert_eq!(average_bits(&alloc_with(&[(BitWidth::EIGHT, 10)])).unwrap(), 8.0);
        assert_eq!(
            average_bits(&alloc_with(&[(BitWidth::FULL, 5), (BitWidth::ZERO, 5)])).unwrap(),
            8.0
        );
        let gate = alloc_with(&[
            (BitWidth::ZERO, 1),
            (BitWidth::TWO, 5),
            (BitWidth::FOUR, 22),
            (BitWidth::EIGHT, 56),
            (BitWidth::FULL, 16),
        ]);
        assert!((average_bits(&gate).unwrap() - 8.02).abs() < 1e-12);
        assert!(BitAllocation::unchecked(BTreeMap::new(), 8.0).is_err());
    }

    #[test]
    fn budget_sixteen_keeps_everything() {
        let (t, c) = synthetic_convex_table(5, 1);
        let a = greedy_allocate(&t, &c, 16.0, &PruneGuardConfig::default()).unwrap();
        assert!(a.assignment().values().all(|b| *b == BitWidth::FULL));
        assert!(a.last_demotion().is_none());
    }

    #[test]
    fn budget_zero_prunes_everything_when_permitted() {
        let (t, c) = synthetic_convex_table(7, 2);
        let a = greedy_allocate(&t, &c, 0.0, &PruneGuardConfig::permissive()).unwrap();
        assert!(a.assignment().values().all(|b| *b == BitWidth::ZERO));
        let blocked = greedy_allocate(&t, &c, 0.0, &PruneGuardConfig::default());
        assert!(matches!(blocked, Err(Error::BudgetInfeasible { .. })));
    }

    #[test]
    fn negative_rho_goes_first() {
        // Channel 1 scores better at 8 bits than at 16 would suggest: negative rho.
        let (t, c) = table_from(&[[5.0, 2.0, 1.0, 0.5], [5.0, 2.0, 1.0, 0.0]]);
        let mut t = t;
        t.insert(ch(1), BitWidth::EIGHT, 0.0, Method::ExactSingleStep).unwrap();
        let a = greedy_allocate(&t, &c, 12.0, &PruneGuardConfig::default()).unwrap();
        assert_eq!(a.bit(ch(1)), Some(BitWidth::EIGHT));
        assert_eq!(a.bit(ch(0)), Some(BitWidth::FULL));
    }

    #[test]
    fn ties_break_by_channel_order() {
        let (t, c) = table_from(&[[4.0, 2.0, 1.0, 0.5], [4.0, 2.0, 1.0, 0.5]]);
        let a = greedy_allocate(&t, &c, 12.0, &PruneGuardConfig::default()).unwrap();
        assert_eq!(a.bit(ch(0)), Some(BitWidth::EIGHT));
        assert_eq!(a.bit(ch(1)), Some(BitWidth::FULL));
    }

    #[test]
    fn missing_entries_are_reported() {
        let mut t = SensitivityTable::new();
        t.insert(ch(0), BitWidth::EIGHT, 0.1, Method::Proxy).unwrap();
        assert!(matches!(
            greedy_allocate(&t, &[ch(0)], 8.0, &PruneGuardConfig::default()),
            Err(Error::MissingEntry { .. })
        ));
    }

    #[test]
    fn single_channel_oracle() {
        let (t, c) = table_from(&[[0.5, 0.2, 0.3, 0.0]]);
        let a = brute_force_allocate(&t, &c, 4.0).unwrap();
        assert_eq!(a.bit(ch(0)), Some(BitWidth::TWO));
        let full = brute_force_allocate(&t, &c, 16.0).unwrap();
        assert_eq!(full.bit(ch(0)), Some(BitWidth::FULL));
        let (big, bc) = synthetic_random_table(9, 0);
        assert!(matches!(
            brute_force_allocate(&big, &bc, 8.0),
            Err(Error::InstanceTooLarge(9, 8))
        ));
    }

    #[test]
    fn prune_guard_thresholds() {
        let (t, c) = table_from(&[[0.0, 0.0, 0.0, 0.0], [3.0, 1.0, 0.5, 0.1], [2.0, 1.5, 0.5, 0.1]]);
        let g = PruneGuardConfig {
            tau_abs: Some(0.0),
            tau_rel: 1.0,
            prune_cap: 1.0,
        }
        .resolve(&t, &c)
        .unwrap();
        assert!(g.allows(ch(0), &t).unwrap());
        assert!(!g.allows(ch(1), &t).unwrap());
        let g = PruneGuardConfig {
            tau_abs: Some(10.0),
            tau_rel: 1.0,
            prune_cap: 1.0,
        }
        .resolve(&t, &c)
        .unwrap();
        // gaps: 0, 2, 0.5 -> median 0.5
        assert_eq!(g.median_gap, 0.5);
        assert!(!g.allows(ch(1), &t).unwrap());
        assert!(g.allows(ch(2), &t).unwrap());
    }

    #[test]
    fn prune_cap_limits_zero_bits() {
        let (t, c) = synthetic_convex_table(20, 3);
        let cfg = PruneGuardConfig {
            tau_abs: Some(f64::INFINITY),
            tau_rel: f64::INFINITY,
            prune_cap: 0.1,
        };
        let a = greedy_allocate(&t, &c, 2.0, &cfg).unwrap();
        assert!(a.histogram()[&0] <= 2);
        assert!(a.satisfies_budget());
    }

    #[test]
    fn summary_json_shape() {
        let (t, c) = synthetic_convex_table(4, 9);
        let a = greedy_allocate(&t, &c, 8.0, &PruneGuardConfig::default()).unwrap();
        let s = AllocationSummary::new(&t, &a).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json_string()).unwrap();
        assert_eq!(v["avg_bits"].as_f64().unwrap(), average_bits(&a).unwrap());
        assert!(v["histogram"]["16"].is_u64());
        assert!(v.get("oracle_gap").is_none());
        let with = s.with_oracle(1.0);
        assert!(with.oracle_gap.is_some());
    }

    #[test]
    fn complexity_probe_smoke() {
        allocation_complexity_probe(1000, 0).unwrap();
    }

    proptest! {
        #[test]
        fn budget_minimality_adjacency(seed in any::<u64>(), n in 1usize..40, budget in 0.5f64..16.0) {
            let (t, c) = synthetic_random_table(n, seed);
            let a = greedy_allocate(&t, &c, budget, &PruneGuardConfig::permissive()).unwrap();
            prop_assert!(average_bits(&a).unwrap() <= budget + 1e-12);
            prop_assert!(a.is_minimal());
            prop_assert_eq!(a.assignment().len(), n);
            let again = greedy_allocate(&t, &c, budget, &PruneGuardConfig::permissive()).unwrap();
            prop_assert_eq!(a, again);
        }

        #[test]
        fn oracle_never_worse(seed in any::<u64>(), n in 1usize..6, budget in 1.0f64..15.0) {
            let (t, c) = synthetic_random_table(n, seed);
            let g = greedy_allocate(&t, &c, budget, &PruneGuardConfig::permissive()).unwrap();
            let o = brute_force_allocate(&t, &c, budget).unwrap();
            prop_assert!(o.satisfies_budget());
            prop_assert!(objective(&t, &o).unwrap() <= objective(&t, &g).unwrap() + 1e-12);
        }
    }
}
