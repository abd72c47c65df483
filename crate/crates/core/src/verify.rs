//! Lossless acceptance of drafted tokens against the target model.
//!
//! Chain verification walks the draft front to back, accepting token t with
//! probability `min(1, p(t)/q(t))` and replacing the first rejection with a
//! sample from the residual `norm(max(0, p - q))`. Tree verification
//! generalizes this to sibling groups with multi-round residual rejection:
//! after a sibling is rejected, the target distribution is replaced by its
//! residual and the sibling's token is zeroed out of the draft row before the
//! next sibling is tried. Because drafted sibling groups are draw-order
//! prefixes of without-replacement samples, the updated draft row is exactly
//! the distribution the next sibling was drawn from, and the emitted token at
//! every visited node is distributed as the target row there — the oracle
//! module certifies this by exhaustive enumeration.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::models::{TokenDistribution, TokenId};
use crate::scalar::Scalar;
use crate::tree::{FlatDraft, TreeError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("token {token} has zero draft probability and cannot have been drafted")]
    ZeroDraftProbability { token: u32 },
    #[error("residual distribution is empty: target equals draft pointwise")]
    EmptyResidual,
    #[error("target and draft distributions disagree on vocabulary size ({p} vs {q})")]
    VocabMismatch { p: usize, q: usize },
    #[error("expected {expected} target distributions, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("draft is not a chain")]
    NotAChain,
    #[error(transparent)]
    Draft(#[from] TreeError),
}

/// Target distributions conditioned per the draft's ancestor mask.
///
/// `root` is the target row after the plain context; `after[i]` is the row
/// after the context extended by flat position `i`'s root path including its
/// own token, i.e. the row that judges `i`'s children and supplies the bonus
/// token when the walk stops at `i`.
#[derive(Clone, Debug)]
pub struct MaskedTargetDists<T> {
    pub root: TokenDistribution<T>,
    pub after: Vec<TokenDistribution<T>>,
}

/// One tested position: its acceptance was actually drawn (or, in greedy
/// mode, compared), with all ancestors accepted.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Trial {
    pub position: usize,
    pub accepted: bool,
}

/// Result of one drafting-verification cycle.
#[derive(Clone, Debug, Serialize)]
pub struct VerificationOutcome {
    /// Accepted tokens, a root-to-node path through the draft tree.
    pub accepted: Vec<TokenId>,
    /// Flat positions of the accepted path.
    pub accepted_positions: Vec<usize>,
    /// Token sampled after the accepted path: the residual correction on
    /// rejection, or a fresh target sample when the walk ran off the draft.
    pub bonus: TokenId,
    /// Every position whose acceptance was tested, in trial order.
    pub trials: Vec<Trial>,
}

impl VerificationOutcome {
    /// Tokens emitted by the cycle: the accepted path plus the bonus token.
    pub fn cycle_length(&self) -> usize {
        self.accepted.len() + 1
    }
}

/// Extra verification knobs. `acceptance_bias` exists for mutation testing
/// only: it perturbs every acceptance probability by the given amount
/// (clamped to 1), which certification must detect as a broken sampler.
#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions<T> {
    pub acceptance_bias: T,
}

impl<T: Scalar> Default for VerifyOptions<T> {
    fn default() -> Self {
        Self { acceptance_bias: T::zero() }
    }
}

/// `min(1, p(t)/q(t))`: the probability of accepting drafted token `t`.
pub fn accept_probability<T: Scalar>(
    p: &TokenDistribution<T>,
    q: &TokenDistribution<T>,
    token: TokenId,
) -> Result<T, VerifyError> {
    if p.vocab_size() != q.vocab_size() {
        return Err(VerifyError::VocabMismatch { p: p.vocab_size(), q: q.vocab_size() });
    }
    let qt = q.prob(token);
    if qt <= T::zero() {
        return Err(VerifyError::ZeroDraftProbability { token: token.0 });
    }
    Ok((p.prob(token) / qt).min(T::one()))
}

/// `norm(max(0, p - q))`: the distribution sampled in place of a rejected
/// token. Errors when `p == q` pointwise, in which case rejection cannot
/// occur and callers must not reach this state.
pub fn residual<T: Scalar>(
    p: &TokenDistribution<T>,
    q: &TokenDistribution<T>,
) -> Result<TokenDistribution<T>, VerifyError> {
    if p.vocab_size() != q.vocab_size() {
        return Err(VerifyError::VocabMismatch { p: p.vocab_size(), q: q.vocab_size() });
    }
    let weights: Vec<T> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&pi, &qi)| (pi - qi).max(T::zero()))
        .collect();
    TokenDistribution::from_unnormalized(weights).map_err(|_| VerifyError::EmptyResidual)
}

fn biased<T: Scalar>(alpha: T, opts: &VerifyOptions<T>) -> T {
    (alpha + opts.acceptance_bias).min(T::one())
}

/// Zero `token` out of `q` and renormalize; `None` when no mass remains.
fn zero_and_renorm<T: Scalar>(q: &TokenDistribution<T>, token: TokenId) -> Option<TokenDistribution<T>> {
    let mut weights = q.probs().to_vec();
    weights[token.index()] = T::zero();
    TokenDistribution::from_unnormalized(weights).ok()
}

/// Sequential front-to-back acceptance of a chain draft.
pub fn verify_chain<T: Scalar, R: Rng + ?Sized>(
    dists: &MaskedTargetDists<T>,
    draft: &FlatDraft<T>,
    rng: &mut R,
    opts: &VerifyOptions<T>,
) -> Result<VerificationOutcome, VerifyError> {
    draft.validate()?;
    if !draft.is_chain() {
        return Err(VerifyError::NotAChain);
    }
    check_lengths(dists, draft)?;

    let mut accepted = Vec::new();
    let mut accepted_positions = Vec::new();
    let mut trials = Vec::new();
    let mut p = &dists.root;
    for i in 0..draft.len() {
        let token = draft.tokens[i];
        let q = &draft.draft_dists[i];
        let alpha = biased(accept_probability(p, q, token)?, opts);
        if T::from_f64_lossy(rng.random::<f64>()) < alpha {
            trials.push(Trial { position: i, accepted: true });
            accepted.push(token);
            accepted_positions.push(i);
            p = &dists.after[i];
        } else {
            trials.push(Trial { position: i, accepted: false });
            // First rejection: replace with a residual sample, drop the rest.
            let bonus = residual(p, q)?.sample(rng);
            return Ok(VerificationOutcome { accepted, accepted_positions, bonus, trials });
        }
    }
    let bonus = p.sample(rng);
    Ok(VerificationOutcome { accepted, accepted_positions, bonus, trials })
}

/// Multi-branch tree acceptance with residual rejection across siblings.
///
/// Starting at the root, the current node's children are tried in flat
/// order (their draw order). A rejected sibling updates the target to its
/// residual and zeroes its token out of the draft row; an accepted sibling
/// resets both distributions at the new node. When a node's children are
/// exhausted (or it has none) the bonus token is sampled from the current
/// target distribution.
pub fn verify_tree<T: Scalar, R: Rng + ?Sized>(
    dists: &MaskedTargetDists<T>,
    draft: &FlatDraft<T>,
    rng: &mut R,
    opts: &VerifyOptions<T>,
) -> Result<VerificationOutcome, VerifyError> {
    draft.validate()?;
    check_lengths(dists, draft)?;

    let mut accepted = Vec::new();
    let mut accepted_positions = Vec::new();
    let mut trials = Vec::new();
    let mut cur: Option<usize> = None;
    let mut p = dists.root.clone();
    'walk: loop {
        let kids = draft.children_of(cur);
        let Some(&first) = kids.first() else {
            let bonus = p.sample(rng);
            return Ok(VerificationOutcome { accepted, accepted_positions, bonus, trials });
        };
        let mut q = draft.draft_dists[first].clone();
        for &c in &kids {
            let token = draft.tokens[c];
            if q.prob(token) <= T::zero() {
                // Already zeroed by an earlier rejection in this group:
                // unreachable as drafted, skipped without a trial.
                continue;
            }
            let alpha = biased(accept_probability(&p, &q, token)?, opts);
            if T::from_f64_lossy(rng.random::<f64>()) < alpha {
                trials.push(Trial { position: c, accepted: true });
                accepted.push(token);
                accepted_positions.push(c);
                p = dists.after[c].clone();
                cur = Some(c);
                continue 'walk;
            }
            trials.push(Trial { position: c, accepted: false });
            p = residual(&p, &q)?;
            match zero_and_renorm(&q, token) {
                Some(next_q) => q = next_q,
                None => break, // group's draft mass is exhausted
            }
        }
        let bonus = p.sample(rng);
        return Ok(VerificationOutcome { accepted, accepted_positions, bonus, trials });
    }
}

/// Temperature-0 acceptance: walk the tree taking a child exactly when its
/// token is the argmax of the target row at the parent (ties to the lowest
/// token id); the bonus is the argmax where the walk stops. Token for token
/// identical to vanilla greedy decoding.
pub fn verify_greedy<T: Scalar>(
    dists: &MaskedTargetDists<T>,
    draft: &FlatDraft<T>,
) -> Result<VerificationOutcome, VerifyError> {
    draft.validate()?;
    check_lengths(dists, draft)?;

    let mut accepted = Vec::new();
    let mut accepted_positions = Vec::new();
    let mut trials = Vec::new();
    let mut cur: Option<usize> = None;
    let mut p = &dists.root;
    'walk: loop {
        let top = p.argmax();
        for c in draft.children_of(cur) {
            if draft.tokens[c] == top {
                trials.push(Trial { position: c, accepted: true });
                accepted.push(top);
                accepted_positions.push(c);
                p = &dists.after[c];
                cur = Some(c);
                continue 'walk;
            }
            trials.push(Trial { position: c, accepted: false });
        }
        return Ok(VerificationOutcome { accepted, accepted_positions, bonus: top, trials });
    }
}

fn check_lengths<T: Scalar>(dists: &MaskedTargetDists<T>, draft: &FlatDraft<T>) -> Result<(), VerifyError> {
    if dists.after.len() != draft.len() {
        return Err(VerifyError::LengthMismatch { expected: draft.len(), got: dists.after.len() });
    }
    for d in std::iter::once(&dists.root).chain(&dists.after) {
        if d.vocab_size() != dists.root.vocab_size() {
            return Err(VerifyError::VocabMismatch {
                p: dists.root.vocab_size(),
                q: d.vocab_size(),
            });
        }
    }
    Ok(())
}
