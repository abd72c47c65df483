//! Evaluation quantities: average acceptance length, per-position acceptance,
//! confidence-calibration bins, and a parametric cost-model speedup estimate
//! standing in for hardware-dependent wall-clock ratios.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::engine::{EngineConfig, GenerationTrace, Mode};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no cycles to aggregate")]
    Empty,
    #[error("invalid {what}: {message}")]
    InvalidParameter { what: &'static str, message: String },
}

/// Relative costs of one drafting-verification cycle, normalized to one
/// target forward pass.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CostModel<T> {
    /// One draft-model forward over a layer.
    pub draft_step_cost: T,
    /// One target forward; the unit of the model.
    pub target_step_cost: T,
    pub per_token_overhead: T,
}

impl<T: Scalar> Default for CostModel<T> {
    fn default() -> Self {
        Self {
            draft_step_cost: T::from_f64_lossy(0.05),
            target_step_cost: T::one(),
            per_token_overhead: T::zero(),
        }
    }
}

impl<T: Scalar> CostModel<T> {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let positive = |x: T| x.is_finite() && x > T::zero();
        if !positive(self.draft_step_cost) && self.draft_step_cost != T::zero() {
            return Err(MetricsError::InvalidParameter {
                what: "draft_step_cost",
                message: "must be finite and non-negative".into(),
            });
        }
        if !positive(self.target_step_cost) {
            return Err(MetricsError::InvalidParameter {
                what: "target_step_cost",
                message: "must be finite and positive".into(),
            });
        }
        if !(self.per_token_overhead.is_finite() && self.per_token_overhead >= T::zero()) {
            return Err(MetricsError::InvalidParameter {
                what: "per_token_overhead",
                message: "must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Mean tokens emitted per drafting-verification cycle, across all traces.
/// Cycles cut short by `max_tokens` count with their emitted length, so the
/// mean times the cycle count always equals the token count.
pub fn average_acceptance_length<T: Scalar>(
    traces: &[GenerationTrace<T>],
) -> Result<f64, MetricsError> {
    let mut acc = MetricsAccumulator::new(2);
    for t in traces {
        acc.add_trace(t);
    }
    acc.tau().ok_or(MetricsError::Empty)
}

/// Tokens per cycle divided by cycle cost relative to vanilla's one token per
/// target step: `tau * c_t / (c_t + depth * c_d + overhead)`. Vanilla mode
/// drafts nothing, so its depth counts as zero.
pub fn speedup_estimate<T: Scalar>(
    tau: f64,
    cfg: &EngineConfig<T>,
    cost: &CostModel<T>,
) -> Result<f64, MetricsError> {
    if !tau.is_finite() || tau < 1.0 {
        return Err(MetricsError::InvalidParameter {
            what: "tau",
            message: format!("must be at least 1, got {tau}"),
        });
    }
    cost.validate()?;
    let depth = if cfg.mode == Mode::Vanilla { 0 } else { cfg.depth };
    let c_t = cost.target_step_cost.to_f64_lossy();
    let c_d = cost.draft_step_cost.to_f64_lossy();
    let overhead = cost.per_token_overhead.to_f64_lossy();
    Ok(tau * c_t / (c_t + depth as f64 * c_d + overhead))
}

/// Draft-tree position class: depth plus value-rank within the layer. The
/// (depth, rank) classification is this artifact's interpretation of the
/// pictorial position classes used for positional acceptance plots.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize)]
pub struct PositionKey {
    pub depth: usize,
    pub rank: usize,
}

#[derive(Clone, Copy, Default, Debug, Serialize)]
pub struct PositionStats {
    pub accepted: u64,
    /// Trials where this position's acceptance was actually tested (all its
    /// ancestors accepted).
    pub tried: u64,
    /// Cycles where the position existed but an ancestor's rejection meant
    /// it was never tested. Reported separately from the acceptance rate.
    pub not_reached: u64,
}

impl PositionStats {
    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.tried > 0).then(|| self.accepted as f64 / self.tried as f64)
    }
}

/// Acceptance counts per (depth, value-rank) position class.
pub fn positional_acceptance<T: Scalar>(
    traces: &[GenerationTrace<T>],
) -> BTreeMap<PositionKey, PositionStats> {
    let mut acc = MetricsAccumulator::new(2);
    for t in traces {
        acc.add_trace(t);
    }
    acc.positional
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CalibrationBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    /// `None` when the bin saw no tested tokens.
    pub mean_confidence: Option<f64>,
    pub acceptance_rate: Option<f64>,
    pub count: u64,
}

/// Empirical acceptance rate per confidence interval, over tokens whose
/// acceptance was actually tested.
pub fn calibration_bins<T: Scalar>(
    traces: &[GenerationTrace<T>],
    n_bins: usize,
) -> Result<Vec<CalibrationBin>, MetricsError> {
    if n_bins < 2 {
        return Err(MetricsError::InvalidParameter {
            what: "n_bins",
            message: "must be at least 2".into(),
        });
    }
    let mut acc = MetricsAccumulator::new(n_bins);
    for t in traces {
        acc.add_trace(t);
    }
    Ok(acc.calibration())
}

#[derive(Clone, Copy, Default)]
struct BinAcc {
    count: u64,
    accepted: u64,
    conf_sum: f64,
}

/// Streaming aggregator over generation traces, so large runs never need to
/// hold every trace in memory.
pub struct MetricsAccumulator {
    n_bins: usize,
    bins: Vec<BinAcc>,
    positional: BTreeMap<PositionKey, PositionStats>,
    n_cycles: u64,
    emitted_tokens: u64,
    n_traces: u64,
}

impl MetricsAccumulator {
    pub fn new(n_bins: usize) -> Self {
        Self {
            n_bins,
            bins: vec![BinAcc::default(); n_bins],
            positional: BTreeMap::new(),
            n_cycles: 0,
            emitted_tokens: 0,
            n_traces: 0,
        }
    }

    pub fn add_trace<T: Scalar>(&mut self, trace: &GenerationTrace<T>) {
        self.n_traces += 1;
        for cycle in &trace.cycles {
            self.n_cycles += 1;
            self.emitted_tokens += cycle.emitted_len as u64;
            let Some(draft) = &cycle.draft else { continue };

            let ranks = value_ranks(&draft.depths, &draft.values);
            let mut tested: BTreeMap<usize, bool> = BTreeMap::new();
            for trial in &cycle.outcome.trials {
                tested.insert(trial.position, trial.accepted);
            }
            for (pos, (&depth, &rank)) in draft.depths.iter().zip(&ranks).enumerate() {
                let key = PositionKey { depth, rank };
                let stats = self.positional.entry(key).or_default();
                match tested.get(&pos) {
                    Some(&accepted) => {
                        stats.tried += 1;
                        if accepted {
                            stats.accepted += 1;
                        }
                    }
                    None => stats.not_reached += 1,
                }
            }
            for trial in &cycle.outcome.trials {
                let conf = draft.confidences[trial.position].to_f64_lossy().clamp(0.0, 1.0);
                let bin = ((conf * self.n_bins as f64) as usize).min(self.n_bins - 1);
                let acc = &mut self.bins[bin];
                acc.count += 1;
                acc.conf_sum += conf;
                if trial.accepted {
                    acc.accepted += 1;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        assert_eq!(self.n_bins, other.n_bins, "bin layouts must agree");
        self.n_cycles += other.n_cycles;
        self.emitted_tokens += other.emitted_tokens;
        self.n_traces += other.n_traces;
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.count += b.count;
            a.accepted += b.accepted;
            a.conf_sum += b.conf_sum;
        }
        for (key, stats) in &other.positional {
            let slot = self.positional.entry(*key).or_default();
            slot.accepted += stats.accepted;
            slot.tried += stats.tried;
            slot.not_reached += stats.not_reached;
        }
    }

    pub fn tau(&self) -> Option<f64> {
        (self.n_cycles > 0).then(|| self.emitted_tokens as f64 / self.n_cycles as f64)
    }

    pub fn n_cycles(&self) -> u64 {
        self.n_cycles
    }

    /// Total tested-token events, which always equals the sum of bin counts.
    pub fn tested_tokens(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn calibration(&self) -> Vec<CalibrationBin> {
        let width = 1.0 / self.n_bins as f64;
        self.bins
            .iter()
            .enumerate()
            .map(|(i, b)| CalibrationBin {
                bin_lo: i as f64 * width,
                bin_hi: (i + 1) as f64 * width,
                mean_confidence: (b.count > 0).then(|| b.conf_sum / b.count as f64),
                acceptance_rate: (b.count > 0).then(|| b.accepted as f64 / b.count as f64),
                count: b.count,
            })
            .collect()
    }

    pub fn positional(&self) -> &BTreeMap<PositionKey, PositionStats> {
        &self.positional
    }

    pub fn into_report<T: Scalar>(
        self,
        cfg: &EngineConfig<T>,
        cost: &CostModel<T>,
    ) -> Result<RunReport, MetricsError> {
        let tau = self.tau().ok_or(MetricsError::Empty)?;
        let speedup = speedup_estimate(tau, cfg, cost)?;
        Ok(RunReport {
            mode: cfg.mode.to_string(),
            tau,
            speedup_estimate: speedup,
            n_traces: self.n_traces,
            n_cycles: self.n_cycles,
            tested_tokens: self.tested_tokens(),
            positional_acceptance: self
                .positional
                .iter()
                .map(|(k, s)| PositionRecord {
                    depth: k.depth,
                    rank: k.rank,
                    accepted: s.accepted,
                    tried: s.tried,
                    not_reached: s.not_reached,
                    acceptance_rate: s.acceptance_rate(),
                })
                .collect(),
            calibration_bins: self.calibration(),
        })
    }
}

/// 1-based rank of each position's value within its layer (ties to the
/// earlier flat position).
pub fn value_ranks<T: Scalar>(depths: &[usize], values: &[T]) -> Vec<usize> {
    let mut ranks = vec![0usize; depths.len()];
    let mut by_depth: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &d) in depths.iter().enumerate() {
        by_depth.entry(d).or_default().push(pos);
    }
    for layer in by_depth.values() {
        let mut order = layer.clone();
        order.sort_by(|&a, &b| {
            values[b].partial_cmp(&values[a]).expect("values are finite").then(a.cmp(&b))
        });
        for (rank, &pos) in order.iter().enumerate() {
            ranks[pos] = rank + 1;
        }
    }
    ranks
}

/// Per-run metrics in report form.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub mode: String,
    pub tau: f64,
    pub speedup_estimate: f64,
    pub n_traces: u64,
    pub n_cycles: u64,
    pub tested_tokens: u64,
    pub positional_acceptance: Vec<PositionRecord>,
    pub calibration_bins: Vec<CalibrationBin>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PositionRecord {
    pub depth: usize,
    pub rank: usize,
    pub accepted: u64,
    pub tried: u64,
    pub not_reached: u64,
    pub acceptance_rate: Option<f64>,
}

// ---------------------------------------------------------------------------
// Small statistics helpers used by reports and the acceptance suite
// ---------------------------------------------------------------------------

/// Spearman rank correlation; `None` for fewer than two points or zero
/// variance in either input. Ties get averaged ranks.
pub fn spearman_rank_correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// One-sided paired sign-flip permutation test of H1 "mean(diffs) > 0".
/// Deterministic for a fixed seed.
pub fn paired_permutation_pvalue(diffs: &[f64], resamples: u32, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    if diffs.is_empty() {
        return 1.0;
    }
    let observed = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut at_least = 0u32;
    for _ in 0..resamples {
        let mut flipped = 0.0;
        for &d in diffs {
            flipped += if rng.random::<bool>() { d } else { -d };
        }
        if flipped / diffs.len() as f64 >= observed {
            at_least += 1;
        }
    }
    (at_least + 1) as f64 / (resamples + 1) as f64
}

/// One-sided two-proportion z-test of H1 "p1 > p2" with pooled variance.
pub fn one_sided_proportion_pvalue(acc1: u64, n1: u64, acc2: u64, n2: u64) -> f64 {
    if n1 == 0 || n2 == 0 {
        return 1.0;
    }
    let p1 = acc1 as f64 / n1 as f64;
    let p2 = acc2 as f64 / n2 as f64;
    let pooled = (acc1 + acc2) as f64 / (n1 + n2) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return if p1 > p2 { 0.0 } else { 1.0 };
    }
    let z = (p1 - p2) / se;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    1.0 - normal.cdf(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{generate, CycleTrace, EngineConfig, GenerationTrace};
    use crate::models::{random_model, Context, DerivedDraftModel, Distortion, TabularModel, TokenId};
    use crate::verify::VerificationOutcome;

    fn fake_trace(cycle_lengths: &[usize]) -> GenerationTrace<f64> {
        let cycles = cycle_lengths
            .iter()
            .map(|&len| CycleTrace {
                draft: None,
                outcome: VerificationOutcome {
                    accepted: vec![TokenId(0); len - 1],
                    accepted_positions: (0..len - 1).collect(),
                    bonus: TokenId(0),
                    trials: Vec::new(),
                },
                emitted_len: len,
            })
            .collect();
        GenerationTrace {
            prompt: Context::new(),
            emitted: vec![TokenId(0); cycle_lengths.iter().sum()],
            cycles,
            config: EngineConfig::default(),
        }
    }

    #[test]
    fn tau_is_the_mean_cycle_length() {
        let traces = vec![fake_trace(&[3, 5, 4])];
        assert_eq!(average_acceptance_length(&traces).unwrap(), 4.0);
        assert!(average_acceptance_length::<f64>(&[]).is_err());
    }

    #[test]
    fn vanilla_tau_is_exactly_one() {
        let model: TabularModel<f64> = random_model(4, 1, 2, 0.5).unwrap();
        let cfg = EngineConfig {
            mode: crate::engine::Mode::Vanilla,
            max_tokens: 25,
            ..EngineConfig::default()
        };
        let trace = generate(&model, &model, &Context::new(), &cfg).unwrap();
        assert_eq!(average_acceptance_length(&[trace]).unwrap(), 1.0);
    }

    #[test]
    fn speedup_matches_stated_formula() {
        let cfg = EngineConfig::<f64>::default(); // depth 6
        let cost = CostModel { draft_step_cost: 0.05, target_step_cost: 1.0, per_token_overhead: 0.0 };
        let got = speedup_estimate(4.65, &cfg, &cost).unwrap();
        assert!((got - 4.65 / 1.30).abs() < 1e-12);

        let free = CostModel { draft_step_cost: 0.0, ..cost };
        assert!((speedup_estimate(4.65, &cfg, &free).unwrap() - 4.65).abs() < 1e-12);

        let vanilla = EngineConfig::<f64> {
            mode: crate::engine::Mode::Vanilla,
            ..EngineConfig::default()
        };
        assert!((speedup_estimate(1.0, &vanilla, &cost).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn speedup_is_monotone() {
        let cfg = EngineConfig::<f64>::default();
        let cost = CostModel::<f64>::default();
        let lo = speedup_estimate(2.0, &cfg, &cost).unwrap();
        let hi = speedup_estimate(4.0, &cfg, &cost).unwrap();
        assert!(hi > lo);
        let pricier = CostModel { draft_step_cost: 0.2, ..cost };
        assert!(speedup_estimate(4.0, &cfg, &pricier).unwrap() < hi);
    }

    #[test]
    fn perfect_draft_has_unit_calibration_and_positional_rates() {
        let model: TabularModel<f64> = random_model(5, 1, 31, 0.4).unwrap();
        let draft = DerivedDraftModel::new(&model, Distortion::None).unwrap();
        let cfg = EngineConfig {
            temperature: 0.0,
            depth: 3,
            k: 2,
            branch: 2,
            m: 30,
            max_tokens: 40,
            ..EngineConfig::default()
        };
        let trace = generate(&model, &draft, &Context::from_ids(&[0]), &cfg).unwrap();
        let positional = positional_acceptance(std::slice::from_ref(&trace));
        let top = positional[&PositionKey { depth: 1, rank: 1 }];
        assert_eq!(top.acceptance_rate(), Some(1.0));

        let bins = calibration_bins(std::slice::from_ref(&trace), 10).unwrap();
        for bin in &bins {
            if let Some(rate) = bin.acceptance_rate {
                assert_eq!(rate, 1.0);
            }
        }
        let total: u64 = bins.iter().map(|b| b.count).sum();
        let tested: u64 = trace.cycles.iter().map(|c| c.outcome.trials.len() as u64).sum();
        assert_eq!(total, tested);
    }

    #[test]
    fn miscalibrated_draft_shows_rising_bins() {
        let model: TabularModel<f64> = random_model(8, 1, 12, 0.3).unwrap();
        let draft = DerivedDraftModel::new(&model, Distortion::Mix(0.4)).unwrap();
        let mut acc = MetricsAccumulator::new(10);
        for p in 0..40u64 {
            let cfg = EngineConfig {
                temperature: 1.0,
                max_tokens: 60,
                seed: p,
                depth: 4,
                k: 4,
                branch: 4,
                m: 24,
                ..EngineConfig::default()
            };
            let trace = generate(&model, &draft, &Context::from_ids(&[0]), &cfg).unwrap();
            acc.add_trace(&trace);
        }
        let bins = acc.calibration();
        let (mut idx, mut rate) = (Vec::new(), Vec::new());
        for (i, b) in bins.iter().enumerate() {
            if let Some(r) = b.acceptance_rate {
                if b.count >= 20 {
                    idx.push(i as f64);
                    rate.push(r);
                }
            }
        }
        let rho = spearman_rank_correlation(&idx, &rate).unwrap();
        assert!(rho > 0.0, "rho = {rho}");
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman_rank_correlation(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman_rank_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman_rank_correlation(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn permutation_test_behaves() {
        let strong: Vec<f64> = (0..60).map(|_| 1.0).collect();
        assert!(paired_permutation_pvalue(&strong, 2000, 1) < 0.01);
        let null: Vec<f64> = (0..60).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let p = paired_permutation_pvalue(&null, 2000, 1);
        assert!(p > 0.2, "null p = {p}");
    }

    #[test]
    fn proportion_test_behaves() {
        assert!(one_sided_proportion_pvalue(90, 100, 50, 100) < 1e-6);
        let p = one_sided_proportion_pvalue(50, 100, 50, 100);
        assert!(p > 0.4);
    }
}
