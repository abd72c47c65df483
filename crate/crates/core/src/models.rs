//! Exact, enumerable toy language models behind a shared next-token interface.
//!
//! A [`TabularModel`] stores one probability row per length-`order` context
//! window plus a mandatory fallback row, so every context is answerable and
//! every distribution can be enumerated exactly. [`DerivedDraftModel`] wraps a
//! tabular model with a controlled distortion, standing in for an imperfect
//! draft model whose calibration quality is an experimental knob.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Largest table size `random_model` will materialize (`vocab_size ^ order`).
pub const MAX_TABLE_ROWS: usize = 1_000_000;

/// Tolerance applied to row sums when parsing a model file. Rows inside this
/// tolerance are renormalized exactly on load.
pub const FILE_ROW_TOLERANCE: f64 = 1e-6;

/// Index of a token in a model's vocabulary.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An ordered token prefix; every model query conditions on one of these.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context {
    tokens: Vec<TokenId>,
}

impl Context {
    pub fn new() -> Self {
        Self { tokens: Vec::new() }
    }

    pub fn from_tokens(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }

    pub fn from_ids(ids: &[u32]) -> Self {
        Self { tokens: ids.iter().copied().map(TokenId).collect() }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, token: TokenId) {
        self.tokens.push(token);
    }

    pub fn extend_from(&mut self, tokens: &[TokenId]) {
        self.tokens.extend_from_slice(tokens);
    }

    /// The last `n` tokens, or `None` when the context is shorter than `n`.
    pub fn window(&self, n: usize) -> Option<&[TokenId]> {
        self.tokens.len().checked_sub(n).map(|start| &self.tokens[start..])
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("distribution entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("distribution sums to {sum}, expected 1 within {tolerance}")]
    NotNormalized { sum: f64, tolerance: f64 },
    #[error("distribution has no probability mass")]
    ZeroMass,
    #[error("distribution is empty")]
    EmptyDistribution,
    #[error("token {token} is out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("row \"{context}\": {message}")]
    BadRow { context: String, message: String },
    #[error("invalid {what}: {message}")]
    InvalidParameter { what: &'static str, message: String },
    #[error("model table would need {rows} rows, limit is {limit}")]
    TableTooLarge { rows: u128, limit: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("model file parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Probability vector over a finite vocabulary; the unit of all model output.
///
/// Invariants, enforced at construction: no entry is negative and the entries
/// sum to one within [`Scalar::sum_tolerance`].
#[derive(Clone, PartialEq, Debug)]
pub struct TokenDistribution<T> {
    probs: Vec<T>,
}

impl<T: Scalar> TokenDistribution<T> {
    pub fn new(probs: Vec<T>) -> Result<Self, ModelError> {
        let dist = Self { probs };
        dist.validate()?;
        Ok(dist)
    }

    /// Build a distribution from non-negative weights by dividing out their
    /// sum. Weights that already sum to one are left untouched.
    pub fn from_unnormalized(weights: Vec<T>) -> Result<Self, ModelError> {
        if weights.is_empty() {
            return Err(ModelError::EmptyDistribution);
        }
        for (index, &w) in weights.iter().enumerate() {
            if w < T::zero() || !w.is_finite() {
                return Err(ModelError::NegativeEntry { index, value: w.to_f64_lossy() });
            }
        }
        let sum = weights.iter().fold(T::zero(), |a, &b| a + b);
        if sum <= T::zero() {
            return Err(ModelError::ZeroMass);
        }
        let probs = if sum == T::one() {
            weights
        } else {
            weights.into_iter().map(|w| w / sum).collect()
        };
        Ok(Self { probs })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        assert!(vocab_size > 0, "uniform distribution needs a non-empty vocabulary");
        let p = T::one() / T::from_usize(vocab_size).unwrap();
        Self { probs: vec![p; vocab_size] }
    }

    /// Point mass on `token`.
    pub fn delta(vocab_size: usize, token: TokenId) -> Self {
        assert!(token.index() < vocab_size, "delta token out of range");
        let mut probs = vec![T::zero(); vocab_size];
        probs[token.index()] = T::one();
        Self { probs }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.probs.is_empty() {
            return Err(ModelError::EmptyDistribution);
        }
        for (index, &p) in self.probs.iter().enumerate() {
            if p < T::zero() || !p.is_finite() {
                return Err(ModelError::NegativeEntry { index, value: p.to_f64_lossy() });
            }
        }
        let sum = self.probs.iter().fold(T::zero(), |a, &b| a + b);
        if (sum - T::one()).abs() > T::sum_tolerance() {
            return Err(ModelError::NotNormalized {
                sum: sum.to_f64_lossy(),
                tolerance: T::sum_tolerance().to_f64_lossy(),
            });
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> T {
        self.probs[token.index()]
    }

    /// Highest-probability token; exact ties go to the lowest token id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    /// Inverse-CDF sample using one uniform draw from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        let u = T::from_f64_lossy(rng.random::<f64>());
        let mut acc = T::zero();
        let mut last_positive = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > T::zero() {
                acc = acc + p;
                last_positive = Some(i);
                if u < acc {
                    return TokenId(i as u32);
                }
            }
        }
        // Rounding can leave acc slightly below 1; fall back to the last
        // token that carries mass.
        TokenId(last_positive.expect("valid distribution has positive mass") as u32)
    }

    /// Rescale as `p_i^(1/t)` and renormalize. `t = 1` is the identity and
    /// `t = 0` collapses to a point mass on the argmax (lowest id on ties).
    pub fn tempered(&self, temperature: T) -> Self {
        if temperature == T::one() {
            return self.clone();
        }
        if temperature == T::zero() {
            return Self::delta(self.vocab_size(), self.argmax());
        }
        let inv = T::one() / temperature;
        let weights: Vec<T> = self.probs.iter().map(|&p| p.powf(inv)).collect();
        Self::from_unnormalized(weights).expect("tempered weights keep positive mass")
    }
}

/// Next-token interface shared by target and draft models.
pub trait LanguageModel<T: Scalar> {
    fn vocab_size(&self) -> usize;

    /// Distribution over the next token after `ctx`. Deterministic; errors if
    /// `ctx` contains out-of-vocabulary tokens.
    fn next_distribution(&self, ctx: &Context) -> Result<TokenDistribution<T>, ModelError>;
}

impl<T: Scalar, M: LanguageModel<T> + ?Sized> LanguageModel<T> for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_distribution(&self, ctx: &Context) -> Result<TokenDistribution<T>, ModelError> {
        (**self).next_distribution(ctx)
    }
}

/// Order-N tabular language model: one stored row per length-N context
/// window, plus a fallback row for windows that have no stored entry.
///
/// Models are immutable after construction and safe to share across threads.
#[derive(Clone, Debug)]
pub struct TabularModel<T> {
    vocab_size: usize,
    order: usize,
    rows: BTreeMap<Vec<TokenId>, TokenDistribution<T>>,
    fallback: TokenDistribution<T>,
}

impl<T: Scalar> TabularModel<T> {
    pub fn new(
        vocab_size: usize,
        order: usize,
        rows: BTreeMap<Vec<TokenId>, TokenDistribution<T>>,
        fallback: TokenDistribution<T>,
    ) -> Result<Self, ModelError> {
        if vocab_size == 0 {
            return Err(ModelError::InvalidParameter {
                what: "vocab_size",
                message: "must be at least 1".into(),
            });
        }
        check_row(&fallback, vocab_size, "<fallback>")?;
        for (key, dist) in &rows {
            let name = context_key(key);
            if key.len() != order {
                return Err(ModelError::BadRow {
                    context: name,
                    message: format!("context has {} tokens, order is {order}", key.len()),
                });
            }
            for t in key {
                if t.index() >= vocab_size {
                    return Err(ModelError::BadRow {
                        context: name,
                        message: format!("token {t} out of range for vocabulary {vocab_size}"),
                    });
                }
            }
            check_row(dist, vocab_size, &name)?;
        }
        Ok(Self { vocab_size, order, rows, fallback })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn fallback(&self) -> &TokenDistribution<T> {
        &self.fallback
    }

    pub fn rows(&self) -> &BTreeMap<Vec<TokenId>, TokenDistribution<T>> {
        &self.rows
    }

    fn lookup(&self, ctx: &Context) -> &TokenDistribution<T> {
        match ctx.window(self.order) {
            Some(window) => self.rows.get(window).unwrap_or(&self.fallback),
            // Context shorter than the order: no window to match.
            None => &self.fallback,
        }
    }

    /// Materialize a model whose every row is the tempered original row.
    pub fn tempered(&self, temperature: T) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|(k, d)| (k.clone(), d.tempered(temperature)))
            .collect();
        Self {
            vocab_size: self.vocab_size,
            order: self.order,
            rows,
            fallback: self.fallback.tempered(temperature),
        }
    }

    fn check_context(&self, ctx: &Context) -> Result<(), ModelError> {
        for t in ctx.tokens() {
            if t.index() >= self.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: t.0,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }
}

impl<T: Scalar> LanguageModel<T> for TabularModel<T> {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_distribution(&self, ctx: &Context) -> Result<TokenDistribution<T>, ModelError> {
        self.check_context(ctx)?;
        Ok(self.lookup(ctx).clone())
    }
}

fn check_row<T: Scalar>(
    dist: &TokenDistribution<T>,
    vocab_size: usize,
    name: &str,
) -> Result<(), ModelError> {
    if dist.vocab_size() != vocab_size {
        return Err(ModelError::BadRow {
            context: name.to_owned(),
            message: format!("row has {} entries, vocabulary is {vocab_size}", dist.vocab_size()),
        });
    }
    dist.validate().map_err(|e| ModelError::BadRow {
        context: name.to_owned(),
        message: e.to_string(),
    })
}

fn context_key(tokens: &[TokenId]) -> String {
    tokens.iter().map(|t| t.0.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_context_key(key: &str) -> Result<Vec<TokenId>, ModelError> {
    if key.is_empty() {
        return Ok(Vec::new());
    }
    key.split(',')
        .map(|part| {
            part.trim().parse::<u32>().map(TokenId).map_err(|_| ModelError::BadRow {
                context: key.to_owned(),
                message: format!("cannot parse token \"{part}\""),
            })
        })
        .collect()
}

/// Distribution-level distortion turning a target model into a controlled
/// imperfect draft model.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Distortion<T> {
    /// Draft is identical to the base model.
    None,
    /// `p_i^(1/gamma)` renormalized; gamma > 0 preserves the argmax.
    Temperature(T),
    /// `(1 - lambda) * p + lambda * uniform`, lambda in [0, 1].
    Mix(T),
    /// Move `eps` probability (clamped to the available mass) from the argmax
    /// token to the runner-up, deliberately mis-calibrating the draft.
    SwapMass(T),
}

impl<T: Scalar> Distortion<T> {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |what: &'static str, message: String| ModelError::InvalidParameter { what, message };
        match *self {
            Distortion::None => Ok(()),
            Distortion::Temperature(g) => {
                if g > T::zero() && g.is_finite() {
                    Ok(())
                } else {
                    Err(bad("temperature distortion", format!("gamma must be > 0, got {g}")))
                }
            }
            Distortion::Mix(l) => {
                if l >= T::zero() && l <= T::one() {
                    Ok(())
                } else {
                    Err(bad("mix distortion", format!("lambda must be in [0, 1], got {l}")))
                }
            }
            Distortion::SwapMass(e) => {
                if e >= T::zero() && e.to_f64_lossy() <= 0.5 {
                    Ok(())
                } else {
                    Err(bad("swap_mass distortion", format!("eps must be in [0, 0.5], got {e}")))
                }
            }
        }
    }

    pub fn apply(&self, dist: &TokenDistribution<T>) -> TokenDistribution<T> {
        match *self {
            Distortion::None => dist.clone(),
            Distortion::Temperature(g) => dist.tempered(g),
            Distortion::Mix(l) => {
                let u = T::one() / T::from_usize(dist.vocab_size()).unwrap();
                let probs = dist.probs().iter().map(|&p| (T::one() - l) * p + l * u).collect();
                TokenDistribution::new(probs).expect("mix of two distributions is a distribution")
            }
            Distortion::SwapMass(e) => {
                let mut probs = dist.probs().to_vec();
                if probs.len() < 2 {
                    return dist.clone();
                }
                let top = dist.argmax().index();
                let mut second = if top == 0 { 1 } else { 0 };
                for i in 0..probs.len() {
                    if i != top && probs[i] > probs[second] {
                        second = i;
                    }
                }
                let moved = e.min(probs[top]);
                probs[top] = probs[top] - moved;
                probs[second] = probs[second] + moved;
                TokenDistribution::new(probs).expect("moved mass stays normalized")
            }
        }
    }

    /// Parse the CLI spelling: `none`, `temperature:G`, `mix:L`, `swap_mass:E`.
    pub fn parse(spec: &str) -> Result<Self, ModelError> {
        let bad = |message: String| ModelError::InvalidParameter { what: "distortion", message };
        let (kind, param) = match spec.split_once(':') {
            Some((k, p)) => (k.trim(), Some(p.trim())),
            None => (spec.trim(), None),
        };
        let value = |p: Option<&str>| -> Result<T, ModelError> {
            let raw = p.ok_or_else(|| bad(format!("\"{spec}\" is missing a parameter")))?;
            let x: f64 = raw
                .parse()
                .map_err(|_| bad(format!("cannot parse parameter \"{raw}\"")))?;
            Ok(T::from_f64_lossy(x))
        };
        let distortion = match kind {
            "none" => Distortion::None,
            "temperature" => Distortion::Temperature(value(param)?),
            "mix" => Distortion::Mix(value(param)?),
            "swap_mass" => Distortion::SwapMass(value(param)?),
            other => return Err(bad(format!("unknown distortion \"{other}\""))),
        };
        distortion.validate()?;
        Ok(distortion)
    }
}

impl<T: Scalar> fmt::Display for Distortion<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distortion::None => write!(f, "none"),
            Distortion::Temperature(g) => write!(f, "temperature:{g}"),
            Distortion::Mix(l) => write!(f, "mix:{l}"),
            Distortion::SwapMass(e) => write!(f, "swap_mass:{e}"),
        }
    }
}

/// A draft model derived from a target model by distorting each row.
#[derive(Clone, Debug)]
pub struct DerivedDraftModel<'a, T> {
    base: &'a TabularModel<T>,
    distortion: Distortion<T>,
}

impl<'a, T: Scalar> DerivedDraftModel<'a, T> {
    pub fn new(base: &'a TabularModel<T>, distortion: Distortion<T>) -> Result<Self, ModelError> {
        distortion.validate()?;
        Ok(Self { base, distortion })
    }

    pub fn distortion(&self) -> Distortion<T> {
        self.distortion
    }
}

impl<T: Scalar> LanguageModel<T> for DerivedDraftModel<'_, T> {
    fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }

    fn next_distribution(&self, ctx: &Context) -> Result<TokenDistribution<T>, ModelError> {
        Ok(self.distortion.apply(&self.base.next_distribution(ctx)?))
    }
}

// ---------------------------------------------------------------------------
// Model file format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ModelFile {
    vocab_size: usize,
    order: usize,
    fallback: Vec<f64>,
    rows: BTreeMap<String, Vec<f64>>,
}

/// Load a model file: a JSON document with `vocab_size`, `order`, `fallback`
/// and a `rows` map keyed by comma-joined token ids (empty key for order 0).
///
/// Rows must sum to 1 within `1e-6` and are renormalized exactly after the
/// check; violations are rejected with the offending context key.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<TabularModel<T>, ModelError> {
    let text = std::fs::read_to_string(path)?;
    parse_model(&text)
}

/// [`load_model`] for an in-memory document.
pub fn parse_model<T: Scalar>(text: &str) -> Result<TabularModel<T>, ModelError> {
    let file: ModelFile = serde_json::from_str(text)?;
    let fallback = file_row(&file.fallback, "<fallback>")?;
    let mut rows = BTreeMap::new();
    for (key, entries) in &file.rows {
        let tokens = parse_context_key(key)?;
        rows.insert(tokens, file_row(entries, key)?);
    }
    TabularModel::new(file.vocab_size, file.order, rows, fallback)
}

fn file_row<T: Scalar>(entries: &[f64], name: &str) -> Result<TokenDistribution<T>, ModelError> {
    let row_err = |message: String| ModelError::BadRow { context: name.to_owned(), message };
    for &p in entries {
        if !p.is_finite() || p < 0.0 {
            return Err(row_err(format!("entry {p} is not a probability")));
        }
    }
    let sum: f64 = entries.iter().sum();
    if (sum - 1.0).abs() > FILE_ROW_TOLERANCE {
        return Err(row_err(format!("entries sum to {sum}, expected 1 within {FILE_ROW_TOLERANCE}")));
    }
    let weights: Vec<T> = entries.iter().map(|&p| T::from_f64_lossy(p)).collect();
    TokenDistribution::from_unnormalized(weights).map_err(|e| row_err(e.to_string()))
}

/// Write `model` in the format read by [`load_model`].
pub fn save_model<T: Scalar>(model: &TabularModel<T>, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let file = ModelFile {
        vocab_size: model.vocab_size(),
        order: model.order(),
        fallback: model.fallback().probs().iter().map(|p| p.to_f64_lossy()).collect(),
        rows: model
            .rows()
            .iter()
            .map(|(k, d)| (context_key(k), d.probs().iter().map(|p| p.to_f64_lossy()).collect()))
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Random model fixtures
// ---------------------------------------------------------------------------

/// Deterministic random model: every row (and the fallback) is drawn from a
/// symmetric Dirichlet with the given concentration. Small concentrations
/// give spiky rows, large ones near-uniform rows.
pub fn random_model<T: Scalar>(
    vocab_size: usize,
    order: usize,
    seed: u64,
    concentration: f64,
) -> Result<TabularModel<T>, ModelError> {
    if vocab_size < 2 {
        return Err(ModelError::InvalidParameter {
            what: "vocab_size",
            message: format!("must be at least 2, got {vocab_size}"),
        });
    }
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(ModelError::InvalidParameter {
            what: "concentration",
            message: format!("must be a positive real, got {concentration}"),
        });
    }
    let row_count = (vocab_size as u128)
        .checked_pow(order as u32)
        .filter(|&n| n <= MAX_TABLE_ROWS as u128)
        .ok_or(ModelError::TableTooLarge {
            rows: (vocab_size as u128).saturating_pow(order as u32),
            limit: MAX_TABLE_ROWS,
        })?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(concentration, 1.0).expect("validated concentration");
    let draw_row = |rng: &mut ChaCha8Rng| -> TokenDistribution<T> {
        let weights: Vec<f64> = (0..vocab_size).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return TokenDistribution::uniform(vocab_size);
        }
        let scaled: Vec<T> = weights.iter().map(|&w| T::from_f64_lossy(w / sum)).collect();
        TokenDistribution::from_unnormalized(scaled).expect("dirichlet weights are non-negative")
    };

    let fallback = draw_row(&mut rng);
    let mut rows = BTreeMap::new();
    // Lexicographic context enumeration keeps the RNG stream, and therefore
    // the model, a pure function of the inputs.
    let mut window = vec![TokenId(0); order];
    for _ in 0..row_count {
        rows.insert(window.clone(), draw_row(&mut rng));
        for slot in window.iter_mut().rev() {
            if slot.index() + 1 < vocab_size {
                slot.0 += 1;
                break;
            }
            slot.0 = 0;
        }
    }
    TabularModel::new(vocab_size, order, rows, fallback)
}

/// Sample `len` tokens autoregressively from `model` after `ctx`.
pub fn sample_continuation<T: Scalar, M: LanguageModel<T>, R: Rng + ?Sized>(
    model: &M,
    ctx: &Context,
    len: usize,
    rng: &mut R,
) -> Result<Vec<TokenId>, ModelError> {
    let mut extended = ctx.clone();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let token = model.next_distribution(&extended)?.sample(rng);
        extended.push(token);
        out.push(token);
    }
    Ok(out)
}
