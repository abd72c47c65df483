//! Independent brute-force ground truth for the decoding pipeline.
//!
//! `exact_autoregressive` enumerates the exact distribution over length-L
//! continuations of a model. `exact_tree_verification_marginal` enumerates
//! every way a draft tree's token slots can be drawn (without replacement
//! from the recorded draft rows, in slot order) jointly with every
//! accept/reject outcome of tree verification, and reports the exact
//! distribution of the token emitted at each visited node. The module's
//! theorem-check is that this marginal equals the target row at every node;
//! a counterexample is a verified bug in the verifier, not in the oracle.
//!
//! Enumeration guards are hard errors: an oracle must never be silently
//! approximate.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::models::{Context, LanguageModel, ModelError, TokenDistribution, TokenId};
use crate::scalar::Scalar;
use crate::tree::{FlatDraft, TreeError};
use crate::verify::MaskedTargetDists;

/// Sequence-space guard for [`exact_autoregressive`] (`V ^ L`).
pub const MAX_SEQUENCE_SPACE: u128 = 1_000_000;
/// Node-count guard for [`exact_tree_verification_marginal`].
pub const MAX_ORACLE_NODES: usize = 10;
/// Vocabulary guard for [`exact_tree_verification_marginal`].
pub const MAX_ORACLE_VOCAB: usize = 6;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration guard exceeded: {what} is {value}, limit {limit}")]
    EnumerationGuard { what: &'static str, value: u128, limit: u128 },
    #[error("insufficient samples for a valid chi-square: need about {required}, got {got}")]
    InsufficientSamples { required: u64, got: u64 },
    #[error("observed data is empty")]
    EmptyObservation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Draft(#[from] TreeError),
}

/// Exact probability of every length-L continuation of a prompt.
#[derive(Clone, Debug)]
pub struct ExactSequenceDistribution<T> {
    pub horizon: usize,
    pub probs: BTreeMap<Vec<TokenId>, T>,
}

impl<T: Scalar> ExactSequenceDistribution<T> {
    pub fn total(&self) -> T {
        self.probs.values().fold(T::zero(), |a, &b| a + b)
    }

    /// Sum out the final position, giving the horizon L-1 distribution.
    pub fn marginalize_last(&self) -> ExactSequenceDistribution<T> {
        assert!(self.horizon > 0, "cannot marginalize a length-0 distribution");
        let mut probs: BTreeMap<Vec<TokenId>, T> = BTreeMap::new();
        for (seq, &p) in &self.probs {
            let prefix = seq[..seq.len() - 1].to_vec();
            let slot = probs.entry(prefix).or_insert_with(T::zero);
            *slot = *slot + p;
        }
        ExactSequenceDistribution { horizon: self.horizon - 1, probs }
    }
}

/// Enumerate the exact distribution of the next `horizon` tokens after
/// `prompt` by the chain rule. Guarded by [`MAX_SEQUENCE_SPACE`].
pub fn exact_autoregressive<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    prompt: &Context,
    horizon: usize,
) -> Result<ExactSequenceDistribution<T>, OracleError> {
    let space = (model.vocab_size() as u128).saturating_pow(horizon as u32);
    if space > MAX_SEQUENCE_SPACE {
        return Err(OracleError::EnumerationGuard {
            what: "V^L",
            value: space,
            limit: MAX_SEQUENCE_SPACE,
        });
    }
    let mut probs = BTreeMap::new();
    let mut ctx = prompt.clone();
    let mut prefix = Vec::with_capacity(horizon);
    descend(model, &mut ctx, &mut prefix, T::one(), horizon, &mut probs)?;
    return Ok(ExactSequenceDistribution { horizon, probs });

    fn descend<T: Scalar, M: LanguageModel<T>>(
        model: &M,
        ctx: &mut Context,
        prefix: &mut Vec<TokenId>,
        weight: T,
        remaining: usize,
        out: &mut BTreeMap<Vec<TokenId>, T>,
    ) -> Result<(), OracleError> {
        if remaining == 0 {
            out.insert(prefix.clone(), weight);
            return Ok(());
        }
        let dist = model.next_distribution(ctx)?;
        for i in 0..dist.vocab_size() {
            let p = dist.probs()[i];
            if p <= T::zero() {
                continue;
            }
            let token = TokenId(i as u32);
            ctx.push(token);
            prefix.push(token);
            descend(model, ctx, prefix, weight * p, remaining - 1, out)?;
            prefix.pop();
            let mut tokens = ctx.tokens().to_vec();
            tokens.pop();
            *ctx = Context::from_tokens(tokens);
        }
        Ok(())
    }
}

/// Exact law of the token emitted at one node of the verification walk.
#[derive(Clone, Debug)]
pub struct NodeMarginal<T> {
    /// Probability that the walk reaches this node at all.
    pub visit_probability: T,
    /// Distribution of the emitted token given the node was reached; `None`
    /// when the node is unreachable.
    pub marginal: Option<TokenDistribution<T>>,
}

/// Per-node emitted-token marginals of tree verification, from exhaustive
/// enumeration of draft-token draws and accept/reject outcomes.
#[derive(Clone, Debug)]
pub struct TreeMarginals<T> {
    pub root: NodeMarginal<T>,
    /// One entry per flat draft position.
    pub per_position: Vec<NodeMarginal<T>>,
}

impl<T: Scalar> TreeMarginals<T> {
    /// Largest absolute deviation between any reachable node's emitted
    /// marginal and the target row at that node. Losslessness says this is
    /// zero up to rounding.
    pub fn max_deviation(&self, dists: &MaskedTargetDists<T>) -> T {
        let mut worst = T::zero();
        let mut check = |node: &NodeMarginal<T>, target: &TokenDistribution<T>| {
            if let Some(marginal) = &node.marginal {
                for (&m, &t) in marginal.probs().iter().zip(target.probs()) {
                    worst = worst.max((m - t).abs());
                }
            }
        };
        check(&self.root, &dists.root);
        for (node, target) in self.per_position.iter().zip(&dists.after) {
            check(node, target);
        }
        worst
    }
}

struct MarginalAcc<T> {
    visit: Vec<T>,
    emit: Vec<Vec<T>>,
}

/// Enumerate verification over the draft's *shape*: the concrete tokens in
/// `draft` are ignored, and each sibling group's slots are instead summed
/// over every without-replacement assignment from the group's draft row,
/// weighted by the draw probabilities, jointly with every accept/reject
/// outcome (products of acceptance probabilities and residual masses).
pub fn exact_tree_verification_marginal<T: Scalar>(
    dists: &MaskedTargetDists<T>,
    draft: &FlatDraft<T>,
) -> Result<TreeMarginals<T>, OracleError> {
    draft.validate()?;
    if draft.len() > MAX_ORACLE_NODES {
        return Err(OracleError::EnumerationGuard {
            what: "draft nodes",
            value: draft.len() as u128,
            limit: MAX_ORACLE_NODES as u128,
        });
    }
    let vocab = dists.root.vocab_size();
    if vocab > MAX_ORACLE_VOCAB {
        return Err(OracleError::EnumerationGuard {
            what: "vocabulary",
            value: vocab as u128,
            limit: MAX_ORACLE_VOCAB as u128,
        });
    }

    let n = draft.len();
    let mut acc = MarginalAcc {
        visit: vec![T::zero(); n + 1],
        emit: vec![vec![T::zero(); vocab]; n + 1],
    };
    visit_node(dists, draft, None, dists.root.probs(), T::one(), &mut acc);

    let wrap = |visit: T, emit: &[T]| -> NodeMarginal<T> {
        if visit <= T::zero() {
            return NodeMarginal { visit_probability: visit, marginal: None };
        }
        let probs: Vec<T> = emit.iter().map(|&e| e / visit).collect();
        NodeMarginal {
            visit_probability: visit,
            marginal: Some(
                TokenDistribution::from_unnormalized(probs)
                    .expect("emitted mass at a visited node is positive"),
            ),
        }
    };
    let root = wrap(acc.visit[0], &acc.emit[0]);
    let per_position = (0..n).map(|i| wrap(acc.visit[i + 1], &acc.emit[i + 1])).collect();
    Ok(TreeMarginals { root, per_position })
}

fn acc_index(node: Option<usize>) -> usize {
    node.map_or(0, |i| i + 1)
}

fn visit_node<T: Scalar>(
    dists: &MaskedTargetDists<T>,
    draft: &FlatDraft<T>,
    node: Option<usize>,
    p: &[T],
    weight: T,
    acc: &mut MarginalAcc<T>,
) {
    if weight <= T::zero() {
        return;
    }
    let idx = acc_index(node);
    acc.visit[idx] = acc.visit[idx] + weight;
    let kids = draft.children_of(node);
    if kids.is_empty() {
        emit_all(&mut acc.emit[idx], p, weight);
        return;
    }
    let q = draft.draft_dists[kids[0]].probs().to_vec();
    try_slots(dists, draft, node, &kids, 0, p, &q, weight, acc);
}

/// Sum over the token drawn for slot `slot` of `kids` and its accept/reject
/// outcome. `p` and `q` are the residual-updated target and draft rows.
#[allow(clippy::too_many_arguments)]
fn try_slots<T: Scalar>(
    dists: &MaskedTargetDists<T>,
    draft: &FlatDraft<T>,
    node: Option<usize>,
    kids: &[usize],
    slot: usize,
    p: &[T],
    q: &[T],
    weight: T,
    acc: &mut MarginalAcc<T>,
) {
    let idx = acc_index(node);
    if slot == kids.len() {
        // Every drafted sibling rejected: bonus from the final residual.
        emit_all(&mut acc.emit[idx], p, weight);
        return;
    }
    let q_total = q.iter().fold(T::zero(), |a, &b| a + b);
    if q_total <= T::zero() {
        // Drafting could not have filled this slot; remaining siblings are
        // unreachable and the walk bonuses out of the residual.
        emit_all(&mut acc.emit[idx], p, weight);
        return;
    }
    for t in 0..q.len() {
        if q[t] <= T::zero() {
            continue;
        }
        let q_t = q[t] / q_total;
        let draw_w = weight * q_t;
        let alpha = (p[t] / q_t).min(T::one());

        // Accept: emit t here, descend into the slot's subtree with fresh
        // distributions at the child node.
        let accept_w = draw_w * alpha;
        if accept_w > T::zero() {
            acc.emit[idx][t] = acc.emit[idx][t] + accept_w;
            let child = kids[slot];
            visit_node(dists, draft, Some(child), dists.after[child].probs(), accept_w, acc);
        }

        // Reject: residual-update p, zero t out of q, move to the next slot.
        let reject_w = draw_w * (T::one() - alpha);
        if reject_w > T::zero() {
            let p_next: Vec<T> = p
                .iter()
                .zip(q)
                .map(|(&pi, &qi)| (pi - qi / q_total).max(T::zero()))
                .collect();
            let norm = p_next.iter().fold(T::zero(), |a, &b| a + b);
            let p_next: Vec<T> = if norm > T::zero() {
                p_next.into_iter().map(|x| x / norm).collect()
            } else {
                // Unreachable for a genuine rejection; guard anyway.
                p.to_vec()
            };
            let mut q_next = q.to_vec();
            q_next[t] = T::zero();
            try_slots(dists, draft, node, kids, slot + 1, &p_next, &q_next, reject_w, acc);
        }
    }
}

fn emit_all<T: Scalar>(emit: &mut [T], p: &[T], weight: T) {
    for (slot, &pi) in emit.iter_mut().zip(p) {
        *slot = *slot + weight * pi;
    }
}

/// All draft-tree shapes with up to `max_nodes` nodes, as parent arrays in
/// breadth-compatible order (`parent[i] < i`), deduplicated up to sibling
/// reordering.
pub fn enumerate_tree_shapes(max_nodes: usize) -> Vec<Vec<Option<usize>>> {
    let mut shapes = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut current: Vec<Option<usize>> = Vec::new();
    grow(max_nodes, &mut current, &mut seen, &mut shapes);
    return shapes;

    fn grow(
        max_nodes: usize,
        current: &mut Vec<Option<usize>>,
        seen: &mut std::collections::BTreeSet<String>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if !current.is_empty() && seen.insert(canonical(current)) {
            out.push(current.clone());
        }
        if current.len() == max_nodes {
            return;
        }
        let next = current.len();
        for parent in std::iter::once(None).chain((0..next).map(Some)) {
            current.push(parent);
            grow(max_nodes, current, seen, out);
            current.pop();
        }
    }

    fn canonical(parents: &[Option<usize>]) -> String {
        fn encode(node: Option<usize>, parents: &[Option<usize>]) -> String {
            let mut kids: Vec<String> = (0..parents.len())
                .filter(|&i| parents[i] == node)
                .map(|i| encode(Some(i), parents))
                .collect();
            kids.sort();
            format!("({})", kids.join(""))
        }
        encode(None, parents)
    }
}

/// Deterministic random fixture over a tree shape: one full-support draft
/// row per sibling group, random target rows at the root and every node, and
/// tokens assigned per group in descending row order. Errors when a sibling
/// group is larger than the vocabulary (not draftable without replacement).
pub fn shape_fixture<T: Scalar>(
    parents: &[Option<usize>],
    vocab: usize,
    seed: u64,
) -> Result<(FlatDraft<T>, MaskedTargetDists<T>), TreeError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let random_dist = |rng: &mut rand_chacha::ChaCha8Rng| {
        let weights: Vec<T> = (0..vocab)
            .map(|_| T::from_f64_lossy(rng.random_range(0.05..1.0)))
            .collect();
        TokenDistribution::from_unnormalized(weights).expect("positive weights")
    };

    let n = parents.len();
    let mut group_dist: BTreeMap<Option<usize>, TokenDistribution<T>> = BTreeMap::new();
    let mut group_rank: BTreeMap<Option<usize>, usize> = BTreeMap::new();
    let mut tokens = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for &parent in parents {
        let dist = group_dist.entry(parent).or_insert_with(|| random_dist(&mut rng)).clone();
        let rank = group_rank.entry(parent).or_insert(0);
        if *rank >= vocab {
            return Err(TreeError::InvalidDraft(format!(
                "sibling group under {parent:?} exceeds vocabulary {vocab}"
            )));
        }
        let mut order: Vec<usize> = (0..vocab).collect();
        order.sort_by(|&a, &b| {
            dist.probs()[b]
                .partial_cmp(&dist.probs()[a])
                .expect("finite probabilities")
                .then(a.cmp(&b))
        });
        tokens.push(TokenId(order[*rank] as u32));
        *rank += 1;
        rows.push(dist);
    }
    let draft = FlatDraft::from_parts(tokens, parents.to_vec(), rows)?;
    let root = random_dist(&mut rng);
    let after = (0..n).map(|_| random_dist(&mut rng)).collect();
    Ok((draft, MaskedTargetDists { root, after }))
}

/// Statistical verdict from comparing observed sequence counts against an
/// exact distribution.
#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceVerdict {
    pub statistic: f64,
    pub p_value: f64,
    pub tv_distance: f64,
    pub n_samples: u64,
    pub alpha: f64,
    /// Effective cell count after pooling low-expectation cells.
    pub cells: usize,
    pub pass: bool,
}

/// Pearson chi-square goodness of fit of `observed` against `expected`.
///
/// Cells with expected count below 5 are pooled into one remainder cell (a
/// standard validity rule); if pooling cannot produce two valid cells the
/// test refuses and reports the sample size it would need. Sequences outside
/// the expected support fail the verdict outright, since the exact oracle
/// assigns them probability zero.
pub fn chi_square_equivalence<T: Scalar>(
    observed: &BTreeMap<Vec<TokenId>, u64>,
    expected: &ExactSequenceDistribution<T>,
    alpha: f64,
) -> Result<EquivalenceVerdict, OracleError> {
    let n: u64 = observed.values().sum();
    if n == 0 {
        return Err(OracleError::EmptyObservation);
    }
    let nf = n as f64;

    let mut support: Vec<(&Vec<TokenId>, f64)> = expected
        .probs
        .iter()
        .map(|(k, &p)| (k, p.to_f64_lossy()))
        .filter(|&(_, p)| p > 0.0)
        .collect();
    let tv_distance = {
        let mut tv = 0.0;
        for (key, p) in &support {
            let obs = *observed.get(*key).unwrap_or(&0) as f64 / nf;
            tv += (obs - p).abs();
        }
        for (key, &count) in observed {
            if !expected.probs.contains_key(key) || expected.probs[key] <= T::zero() {
                tv += count as f64 / nf;
            }
        }
        tv / 2.0
    };

    // Observations outside the exact support are impossible under the null.
    let outside: u64 = observed
        .iter()
        .filter(|(k, _)| support.iter().all(|(s, _)| s != k))
        .map(|(_, &c)| c)
        .sum();
    if outside > 0 {
        return Ok(EquivalenceVerdict {
            statistic: f64::INFINITY,
            p_value: 0.0,
            tv_distance,
            n_samples: n,
            alpha,
            cells: support.len(),
            pass: false,
        });
    }

    if support.len() == 1 {
        // Degenerate expected distribution: matching observations are exact.
        return Ok(EquivalenceVerdict {
            statistic: 0.0,
            p_value: 1.0,
            tv_distance,
            n_samples: n,
            alpha,
            cells: 1,
            pass: true,
        });
    }

    // Pool cells with expected count < 5, smallest first.
    support.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite probabilities"));
    let mut cells: Vec<(f64, f64)> = Vec::new(); // (observed, expected) counts
    let mut pool_obs = 0.0;
    let mut pool_exp = 0.0;
    for (key, p) in &support {
        let e = p * nf;
        let o = *observed.get(*key).unwrap_or(&0) as f64;
        if e < 5.0 || (pool_exp > 0.0 && pool_exp < 5.0) {
            pool_obs += o;
            pool_exp += e;
        } else {
            cells.push((o, e));
        }
    }
    if pool_exp > 0.0 {
        cells.push((pool_obs, pool_exp));
    }
    if cells.len() < 2 || cells.iter().any(|&(_, e)| e < 5.0) {
        let second_largest = {
            let mut ps: Vec<f64> = support.iter().map(|&(_, p)| p).collect();
            ps.sort_by(|a, b| b.partial_cmp(a).expect("finite probabilities"));
            ps.get(1).copied().unwrap_or(ps[0])
        };
        return Err(OracleError::InsufficientSamples {
            required: (5.0 / second_largest).ceil() as u64,
            got: n,
        });
    }

    let statistic: f64 = cells.iter().map(|&(o, e)| (o - e) * (o - e) / e).sum();
    let df = (cells.len() - 1) as f64;
    let p_value = 1.0 - ChiSquared::new(df).expect("df >= 1").cdf(statistic);
    Ok(EquivalenceVerdict {
        statistic,
        p_value,
        tv_distance,
        n_samples: n,
        alpha,
        cells: cells.len(),
        pass: p_value > alpha,
    })
}
