//! Dynamic draft-tree construction: value-ranked layer expansion, global
//! reranking, and flattening into a verification-ready token sequence with an
//! ancestor-visibility mask.
//!
//! A node's value is the product of draft confidences along its root path,
//! an estimate of the probability that the whole path gets accepted. The
//! expansion phase grows the deepest layer under the most valuable nodes;
//! the reranking phase selects the global top-m nodes and flattens them
//! breadth-first so that every parent precedes its children.

use rand::Rng;
use thiserror::Error;

use crate::models::{Context, LanguageModel, ModelError, TokenDistribution, TokenId};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("draft tree has no expandable layer")]
    EmptyTree,
    #[error("invalid {what}: {message}")]
    InvalidParameter { what: &'static str, message: String },
    #[error("malformed draft: {0}")]
    InvalidDraft(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One node of the draft tree. Index 0 is the root, which stands for the last
/// accepted token: depth 0, value 1, not itself a draft token.
#[derive(Clone, Debug)]
pub struct DraftNode<T> {
    pub token: TokenId,
    /// Draft probability of this token given its path (c_j).
    pub confidence: T,
    /// Product of confidences along the root path (V_i).
    pub value: T,
    pub parent: Option<usize>,
    pub depth: usize,
    pub children: Vec<usize>,
    /// Draft distribution queried when this node was expanded; the children's
    /// confidences are raw probabilities under this row.
    pub expansion_dist: Option<TokenDistribution<T>>,
}

/// The growing candidate tree for one drafting cycle.
#[derive(Clone, Debug)]
pub struct DraftTree<T> {
    root_context: Context,
    nodes: Vec<DraftNode<T>>,
    /// `layers[d]` holds the indices of all nodes at depth d; layer 0 is the
    /// root alone, and every node's parent lives in the previous layer.
    layers: Vec<Vec<usize>>,
}

impl<T: Scalar> DraftTree<T> {
    pub fn new(root_context: Context) -> Self {
        let token = root_context.tokens().last().copied().unwrap_or(TokenId(0));
        let root = DraftNode {
            token,
            confidence: T::one(),
            value: T::one(),
            parent: None,
            depth: 0,
            children: Vec::new(),
            expansion_dist: None,
        };
        Self { root_context, nodes: vec![root], layers: vec![vec![0]] }
    }

    pub fn root_context(&self) -> &Context {
        &self.root_context
    }

    pub fn nodes(&self) -> &[DraftNode<T>] {
        &self.nodes
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    /// Number of draft tokens (all nodes except the root).
    pub fn draft_len(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Context for querying a model at `node`: the root context followed by
    /// the draft tokens on the path from the root (exclusive) to `node`.
    pub fn context_at(&self, node: usize) -> Context {
        let mut path = Vec::new();
        let mut cur = node;
        while let Some(parent) = self.nodes[cur].parent {
            path.push(self.nodes[cur].token);
            cur = parent;
        }
        path.reverse();
        let mut ctx = self.root_context.clone();
        ctx.extend_from(&path);
        ctx
    }
}

/// Ranking used to pick which nodes of the deepest layer get expanded.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ExpansionRank {
    /// Global path value V_i (the default).
    Value,
    /// Raw per-token confidence c_j (the "w/o value" ablation).
    Confidence,
}

/// Strategy for picking a node's candidate children from its draft row.
///
/// The returned tokens are distinct, carry positive draft probability, and
/// are listed in the order verification will try them.
pub trait ChildDrafter<T: Scalar> {
    fn draft_children(&mut self, dist: &TokenDistribution<T>, branch: usize) -> Vec<TokenId>;
}

/// Deterministic drafting: the `branch` highest-probability tokens, ties to
/// the lower token id. Used at temperature 0.
pub struct TopProbDrafter;

impl<T: Scalar> ChildDrafter<T> for TopProbDrafter {
    fn draft_children(&mut self, dist: &TokenDistribution<T>, branch: usize) -> Vec<TokenId> {
        let mut order: Vec<usize> = (0..dist.vocab_size())
            .filter(|&i| dist.probs()[i] > T::zero())
            .collect();
        order.sort_by(|&a, &b| {
            dist.probs()[b]
                .partial_cmp(&dist.probs()[a])
                .expect("probabilities are finite")
                .then(a.cmp(&b))
        });
        order.truncate(branch);
        order.into_iter().map(|i| TokenId(i as u32)).collect()
    }
}

/// Stochastic drafting: `branch` distinct tokens drawn sequentially without
/// replacement, each from the row renormalized over the not-yet-drawn tokens.
///
/// The draw order is the order verification must try the siblings in: its
/// residual updates zero out exactly the tokens that were removed from the
/// row when the next sibling was drawn, which is what makes tree acceptance
/// lossless. Used at temperature > 0.
pub struct SampledDrafter<'r, R: Rng> {
    rng: &'r mut R,
}

impl<'r, R: Rng> SampledDrafter<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self { rng }
    }
}

impl<T: Scalar, R: Rng> ChildDrafter<T> for SampledDrafter<'_, R> {
    fn draft_children(&mut self, dist: &TokenDistribution<T>, branch: usize) -> Vec<TokenId> {
        let mut weights = dist.probs().to_vec();
        let mut out = Vec::with_capacity(branch.min(weights.len()));
        for _ in 0..branch {
            let total = weights.iter().fold(T::zero(), |a, &b| a + b);
            if total <= T::zero() {
                break;
            }
            let u = T::from_f64_lossy(self.rng.random::<f64>()) * total;
            let mut acc = T::zero();
            let mut chosen = None;
            for (i, &w) in weights.iter().enumerate() {
                if w > T::zero() {
                    acc = acc + w;
                    chosen = Some(i);
                    if u < acc {
                        break;
                    }
                }
            }
            let i = chosen.expect("positive total implies a positive weight");
            weights[i] = T::zero();
            out.push(TokenId(i as u32));
        }
        out
    }
}

/// Expand the deepest layer: the top `k` nodes by `rank` each acquire up to
/// `branch` children drafted by `drafter`; a new layer is appended.
pub fn expand_layer_with<T, M, D>(
    tree: &mut DraftTree<T>,
    model: &M,
    k: usize,
    branch: usize,
    rank: ExpansionRank,
    drafter: &mut D,
) -> Result<(), TreeError>
where
    T: Scalar,
    M: LanguageModel<T>,
    D: ChildDrafter<T> + ?Sized,
{
    if k < 1 {
        return Err(TreeError::InvalidParameter { what: "k", message: "must be at least 1".into() });
    }
    if branch < 1 {
        return Err(TreeError::InvalidParameter { what: "branch", message: "must be at least 1".into() });
    }
    let last = tree.layers.last().filter(|l| !l.is_empty()).ok_or(TreeError::EmptyTree)?;

    let mut ranked: Vec<usize> = last.clone();
    ranked.sort_by(|&a, &b| {
        let key = |i: usize| match rank {
            ExpansionRank::Value => tree.nodes[i].value,
            ExpansionRank::Confidence => tree.nodes[i].confidence,
        };
        key(b).partial_cmp(&key(a)).expect("node scores are finite").then(a.cmp(&b))
    });
    ranked.truncate(k.min(last.len()));
    // Expand in index order so node numbering does not depend on the ranking.
    ranked.sort_unstable();

    let mut new_layer = Vec::new();
    for idx in ranked {
        let dist = model.next_distribution(&tree.context_at(idx))?;
        let tokens = drafter.draft_children(&dist, branch);
        for token in tokens {
            let confidence = dist.prob(token);
            let value = confidence * tree.nodes[idx].value;
            let depth = tree.nodes[idx].depth + 1;
            let child = tree.nodes.len();
            tree.nodes.push(DraftNode {
                token,
                confidence,
                value,
                parent: Some(idx),
                depth,
                children: Vec::new(),
                expansion_dist: None,
            });
            tree.nodes[idx].children.push(child);
            new_layer.push(child);
        }
        tree.nodes[idx].expansion_dist = Some(dist);
    }
    tree.layers.push(new_layer);
    Ok(())
}

/// [`expand_layer_with`] using value ranking and deterministic drafting.
pub fn expand_layer<T: Scalar, M: LanguageModel<T>>(
    tree: &mut DraftTree<T>,
    model: &M,
    k: usize,
    branch: usize,
) -> Result<(), TreeError> {
    expand_layer_with(tree, model, k, branch, ExpansionRank::Value, &mut TopProbDrafter)
}

/// Build a tree by applying the expansion step `depth` times from a bare root.
pub fn build_tree_with<T, M, D>(
    ctx: &Context,
    model: &M,
    depth: usize,
    k: usize,
    branch: usize,
    rank: ExpansionRank,
    drafter: &mut D,
) -> Result<DraftTree<T>, TreeError>
where
    T: Scalar,
    M: LanguageModel<T>,
    D: ChildDrafter<T> + ?Sized,
{
    if depth < 1 {
        return Err(TreeError::InvalidParameter { what: "depth", message: "must be at least 1".into() });
    }
    let mut tree = DraftTree::new(ctx.clone());
    for _ in 0..depth {
        expand_layer_with(&mut tree, model, k, branch, rank, drafter)?;
    }
    Ok(tree)
}

/// [`build_tree_with`] using value ranking and deterministic drafting.
pub fn build_tree<T: Scalar, M: LanguageModel<T>>(
    ctx: &Context,
    model: &M,
    depth: usize,
    k: usize,
    branch: usize,
) -> Result<DraftTree<T>, TreeError> {
    build_tree_with(ctx, model, depth, k, branch, ExpansionRank::Value, &mut TopProbDrafter)
}

/// The reranked, flattened draft handed to verification.
///
/// Tokens are in breadth-first order (parents strictly before children), and
/// `mask[i][j]` is true exactly when `j == i` or `j` is a strict ancestor of
/// `i`, so row `i` lists everything position `i` may condition on.
#[derive(Clone, Debug)]
pub struct FlatDraft<T> {
    pub tokens: Vec<TokenId>,
    /// Flat position of each token's parent; `None` hangs off the root.
    pub parents: Vec<Option<usize>>,
    pub confidences: Vec<T>,
    pub values: Vec<T>,
    pub depths: Vec<usize>,
    /// Row each token was drafted from (the draft distribution at its parent).
    pub draft_dists: Vec<TokenDistribution<T>>,
    pub mask: Vec<Vec<bool>>,
}

impl<T: Scalar> FlatDraft<T> {
    /// Assemble a draft from tokens, parent links and per-position draft
    /// rows, deriving confidences, values, depths and the mask.
    pub fn from_parts(
        tokens: Vec<TokenId>,
        parents: Vec<Option<usize>>,
        draft_dists: Vec<TokenDistribution<T>>,
    ) -> Result<Self, TreeError> {
        if tokens.len() != parents.len() || tokens.len() != draft_dists.len() {
            return Err(TreeError::InvalidDraft("field lengths disagree".into()));
        }
        let mut confidences = Vec::with_capacity(tokens.len());
        let mut values = Vec::with_capacity(tokens.len());
        let mut depths = Vec::with_capacity(tokens.len());
        for i in 0..tokens.len() {
            if tokens[i].index() >= draft_dists[i].vocab_size() {
                return Err(TreeError::InvalidDraft(format!("token at position {i} out of vocabulary")));
            }
            let confidence = draft_dists[i].prob(tokens[i]);
            let (value, depth) = match parents[i] {
                Some(p) if p < i => (confidence * values[p], depths[p] + 1),
                None => (confidence, 1),
                Some(p) => {
                    return Err(TreeError::InvalidDraft(format!(
                        "parent {p} of position {i} does not precede it"
                    )))
                }
            };
            confidences.push(confidence);
            values.push(value);
            depths.push(depth);
        }
        let mask = ancestor_mask(&parents);
        let flat = Self { tokens, parents, confidences, values, depths, draft_dists, mask };
        flat.validate()?;
        Ok(flat)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Keep only the first `m` positions. Flat order is breadth-first with
    /// parents before children, so the prefix is still a connected draft.
    pub fn truncated(mut self, m: usize) -> Self {
        if self.len() > m {
            self.tokens.truncate(m);
            self.parents.truncate(m);
            self.confidences.truncate(m);
            self.values.truncate(m);
            self.depths.truncate(m);
            self.draft_dists.truncate(m);
            self.mask = ancestor_mask(&self.parents);
        }
        self
    }

    /// Positions whose parent is `of`, in flat (= trial) order.
    pub fn children_of(&self, of: Option<usize>) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.parents[i] == of).collect()
    }

    pub fn is_chain(&self) -> bool {
        self.parents
            .iter()
            .enumerate()
            .all(|(i, &p)| p == if i == 0 { None } else { Some(i - 1) })
    }

    /// Check the structural preconditions verification relies on.
    pub fn validate(&self) -> Result<(), TreeError> {
        let n = self.len();
        let bad = |m: String| Err(TreeError::InvalidDraft(m));
        if self.parents.len() != n
            || self.confidences.len() != n
            || self.values.len() != n
            || self.depths.len() != n
            || self.draft_dists.len() != n
            || self.mask.len() != n
        {
            return bad("field lengths disagree".into());
        }
        for (i, &p) in self.parents.iter().enumerate() {
            if let Some(p) = p {
                if p >= i {
                    return bad(format!("parent {p} of position {i} does not precede it"));
                }
            }
            let expected_depth = p.map_or(1, |p| self.depths[p] + 1);
            if self.depths[i] != expected_depth {
                return bad(format!("depth of position {i} disagrees with its parent"));
            }
            if self.tokens[i].index() >= self.draft_dists[i].vocab_size() {
                return bad(format!("token at position {i} is out of vocabulary"));
            }
            if self.draft_dists[i].prob(self.tokens[i]) <= T::zero() {
                return bad(format!("position {i} was drafted with zero draft probability"));
            }
        }
        if self.mask != ancestor_mask(&self.parents) {
            return bad("mask does not match the ancestor relation".into());
        }
        // Sibling groups share one draft row and cannot repeat a token.
        for parent in std::iter::once(None).chain((0..n).map(Some)) {
            let kids = self.children_of(parent);
            for pair in kids.windows(2) {
                if self.draft_dists[pair[0]] != self.draft_dists[pair[1]] {
                    return bad(format!("siblings {} and {} carry different draft rows", pair[0], pair[1]));
                }
            }
            let mut seen = std::collections::BTreeSet::new();
            for &c in &kids {
                if !seen.insert(self.tokens[c]) {
                    return bad(format!("duplicate sibling token at position {c}"));
                }
            }
        }
        Ok(())
    }
}

/// Visibility rows from a parent array: self plus strict ancestors.
pub fn ancestor_mask(parents: &[Option<usize>]) -> Vec<Vec<bool>> {
    let n = parents.len();
    let mut mask: Vec<Vec<bool>> = Vec::with_capacity(n);
    for (i, &p) in parents.iter().enumerate() {
        let mut row = match p {
            Some(p) => mask[p].clone(),
            None => vec![false; n],
        };
        row.resize(n, false);
        row[i] = true;
        mask.push(row);
    }
    mask
}

fn flatten<T: Scalar>(tree: &DraftTree<T>, mut selected: Vec<usize>) -> FlatDraft<T> {
    // Breadth-first output order; parents must already be in the selection.
    selected.sort_by_key(|&i| (tree.nodes[i].depth, i));
    let mut flat_index = vec![usize::MAX; tree.nodes.len()];
    for (pos, &idx) in selected.iter().enumerate() {
        flat_index[idx] = pos;
    }

    let mut tokens = Vec::with_capacity(selected.len());
    let mut parents = Vec::with_capacity(selected.len());
    let mut confidences = Vec::with_capacity(selected.len());
    let mut values = Vec::with_capacity(selected.len());
    let mut depths = Vec::with_capacity(selected.len());
    let mut draft_dists = Vec::with_capacity(selected.len());
    for &idx in &selected {
        let node = &tree.nodes[idx];
        let parent_node = node.parent.expect("root is never selected");
        let parent = if parent_node == 0 {
            None
        } else {
            let p = flat_index[parent_node];
            assert!(p != usize::MAX, "selection is closed under parents");
            Some(p)
        };
        tokens.push(node.token);
        parents.push(parent);
        confidences.push(node.confidence);
        values.push(node.value);
        depths.push(node.depth);
        draft_dists.push(
            tree.nodes[parent_node]
                .expansion_dist
                .clone()
                .expect("selected node's parent was expanded"),
        );
    }
    let mask = ancestor_mask(&parents);
    FlatDraft { tokens, parents, confidences, values, depths, draft_dists, mask }
}

/// Flatten every drafted node in breadth-first order, with no selection.
pub fn flatten_all<T: Scalar>(tree: &DraftTree<T>) -> FlatDraft<T> {
    flatten(tree, (1..tree.nodes().len()).collect())
}

/// Global reranking: select the `m` nodes with the highest values (ties to
/// the smaller depth, then the smaller index) and flatten them.
///
/// Values never exceed the parent's value and parents sort strictly earlier
/// on ties, so the greedy selection is closed under parents; `flatten`
/// asserts this rather than assuming it.
pub fn rerank_and_flatten<T: Scalar>(tree: &DraftTree<T>, m: usize) -> Result<FlatDraft<T>, TreeError> {
    if m < 1 {
        return Err(TreeError::InvalidParameter { what: "m", message: "must be at least 1".into() });
    }
    let mut candidates: Vec<usize> = (1..tree.nodes.len()).collect();
    candidates.sort_by(|&a, &b| {
        tree.nodes[b]
            .value
            .partial_cmp(&tree.nodes[a].value)
            .expect("values are finite")
            .then(tree.nodes[a].depth.cmp(&tree.nodes[b].depth))
            .then(a.cmp(&b))
    });
    candidates.truncate(m.min(tree.draft_len()));
    Ok(flatten(tree, candidates))
}

/// Sampling-safe reranking used when the tree was drafted stochastically:
/// whole sibling groups are taken greedily in descending order of the
/// expanded parent's value, and only the group hit by the budget boundary is
/// cut, to a prefix in draw order.
///
/// Keeping each group a draw-order prefix whose length does not depend on the
/// group's own tokens is what keeps tree verification lossless; ranking
/// individual nodes by their own values (as [`rerank_and_flatten`] does)
/// would bias which drawn siblings get verified.
pub fn rerank_groups_and_flatten<T: Scalar>(
    tree: &DraftTree<T>,
    m: usize,
) -> Result<FlatDraft<T>, TreeError> {
    if m < 1 {
        return Err(TreeError::InvalidParameter { what: "m", message: "must be at least 1".into() });
    }
    let mut groups: Vec<usize> = (0..tree.nodes.len())
        .filter(|&i| !tree.nodes[i].children.is_empty())
        .collect();
    groups.sort_by(|&a, &b| {
        tree.nodes[b]
            .value
            .partial_cmp(&tree.nodes[a].value)
            .expect("values are finite")
            .then(tree.nodes[a].depth.cmp(&tree.nodes[b].depth))
            .then(a.cmp(&b))
    });
    let mut budget = m;
    let mut selected = Vec::new();
    for parent in groups {
        if budget == 0 {
            break;
        }
        let kids = &tree.nodes[parent].children;
        let take = budget.min(kids.len());
        selected.extend_from_slice(&kids[..take]);
        budget -= take;
    }
    Ok(flatten(tree, selected))
}

/// The "w/o reranking" draft: per layer, the top `k` nodes by value (the same
/// nodes the expansion phase selects), with no global reranking. If the total
/// exceeds `m`, overflow is dropped deepest layer first, lowest value first
/// within a layer.
pub fn flatten_expansion_selection<T: Scalar>(
    tree: &DraftTree<T>,
    k: usize,
    m: usize,
) -> Result<FlatDraft<T>, TreeError> {
    if k < 1 || m < 1 {
        return Err(TreeError::InvalidParameter { what: "k/m", message: "must be at least 1".into() });
    }
    let mut per_layer: Vec<Vec<usize>> = Vec::new();
    for layer in tree.layers().iter().skip(1) {
        let mut ranked = layer.clone();
        ranked.sort_by(|&a, &b| {
            tree.nodes[b]
                .value
                .partial_cmp(&tree.nodes[a].value)
                .expect("values are finite")
                .then(a.cmp(&b))
        });
        ranked.truncate(k.min(layer.len()));
        per_layer.push(ranked);
    }
    let mut total: usize = per_layer.iter().map(Vec::len).sum();
    for layer in per_layer.iter_mut().rev() {
        while total > m && !layer.is_empty() {
            layer.pop(); // lowest value of the deepest layer goes first
            total -= 1;
        }
    }
    Ok(flatten(tree, per_layer.into_iter().flatten().collect()))
}

/// Fixed-shape baseline draft: `shape[i]` is the width of layer `i + 1`,
/// filled value-free left to right (each layer's nodes are spread over the
/// previous layer's nodes in index order), then flattened without reranking.
pub fn static_tree_with<T, M, D>(
    ctx: &Context,
    model: &M,
    shape: &[usize],
    drafter: &mut D,
) -> Result<FlatDraft<T>, TreeError>
where
    T: Scalar,
    M: LanguageModel<T>,
    D: ChildDrafter<T> + ?Sized,
{
    if shape.is_empty() || shape.contains(&0) {
        return Err(TreeError::InvalidParameter {
            what: "shape",
            message: "must be non-empty with positive widths".into(),
        });
    }
    let mut tree = DraftTree::new(ctx.clone());
    for &width in shape {
        let prev = tree.layers.last().expect("tree always has a layer").clone();
        if prev.is_empty() {
            break; // drafting exhausted the vocabulary at every parent
        }
        let counts: Vec<usize> = if width <= prev.len() {
            (0..prev.len()).map(|i| usize::from(i < width)).collect()
        } else {
            let base = width / prev.len();
            let extra = width % prev.len();
            (0..prev.len()).map(|i| base + usize::from(i < extra)).collect()
        };
        let mut new_layer = Vec::new();
        for (&idx, &count) in prev.iter().zip(&counts) {
            if count == 0 {
                continue;
            }
            let dist = model.next_distribution(&tree.context_at(idx))?;
            let tokens = drafter.draft_children(&dist, count);
            for token in tokens {
                let confidence = dist.prob(token);
                let value = confidence * tree.nodes[idx].value;
                let depth = tree.nodes[idx].depth + 1;
                let child = tree.nodes.len();
                tree.nodes.push(DraftNode {
                    token,
                    confidence,
                    value,
                    parent: Some(idx),
                    depth,
                    children: Vec::new(),
                    expansion_dist: None,
                });
                tree.nodes[idx].children.push(child);
                new_layer.push(child);
            }
            tree.nodes[idx].expansion_dist = Some(dist);
        }
        tree.layers.push(new_layer);
    }
    Ok(flatten(&tree, (1..tree.nodes.len()).collect()))
}

/// [`static_tree_with`] using deterministic top-probability drafting.
pub fn static_tree<T: Scalar, M: LanguageModel<T>>(
    ctx: &Context,
    model: &M,
    shape: &[usize],
) -> Result<FlatDraft<T>, TreeError> {
    static_tree_with(ctx, model, shape, &mut TopProbDrafter)
}
