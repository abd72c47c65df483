//! Command implementations. Everything here is a thin orchestration of the
//! core library so the acceptance suite can drive the same code paths the
//! binary does.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use specdec_core::engine::{derive_seed, generate, EngineConfig, Mode};
use specdec_core::metrics::{
    average_acceptance_length, paired_permutation_pvalue, CostModel, MetricsAccumulator, RunReport,
};
use specdec_core::models::{
    load_model, random_model, sample_continuation, save_model, Context, DerivedDraftModel,
    Distortion, LanguageModel, ModelError, TokenDistribution, TokenId,
};
use specdec_core::oracle::{
    chi_square_equivalence, enumerate_tree_shapes, exact_autoregressive,
    exact_tree_verification_marginal, shape_fixture, EquivalenceVerdict,
};
use specdec_core::tree::ancestor_mask;
use specdec_core::{EngineConfig64, TabularModel64};

use crate::args::{
    AblateArgs, BenchArgs, BudgetArgs, CalibrateArgs, CertifyArgs, Cli, Command, GenModelArgs,
    GenerateArgs, ModelArgs, PromptArgs,
};
use crate::report::ReportDocument;

/// Acceptance-probability perturbation applied by `--inject-bias`.
pub const INJECTED_BIAS: f64 = 0.05;
/// Token length of synthesized prompts.
pub const SYNTH_PROMPT_LEN: usize = 4;
/// Deviation threshold for the exhaustive tree-verification suite.
pub const TREE_SUITE_TOLERANCE: f64 = 1e-9;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or inconsistent data: exit code 2.
    Data(String),
    /// Certification ran and failed: exit code 3.
    CertifyFailed,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Data(msg) => write!(f, "{msg}"),
            CliError::CertifyFailed => write!(f, "certification failed"),
        }
    }
}

impl std::error::Error for CliError {}

fn data_err(e: impl fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Certify(args) => cmd_certify(args).map(|_| ()),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::GenModel(args) => cmd_gen_model(args),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

pub struct Models {
    pub target: TabularModel64,
    draft_file: Option<TabularModel64>,
    pub distortion: Distortion<f64>,
}

/// Either a separately loaded draft model or one derived from the target.
pub enum DraftRef<'a> {
    File(&'a TabularModel64),
    Derived(DerivedDraftModel<'a, f64>),
}

impl LanguageModel<f64> for DraftRef<'_> {
    fn vocab_size(&self) -> usize {
        match self {
            DraftRef::File(m) => m.vocab_size(),
            DraftRef::Derived(m) => m.vocab_size(),
        }
    }

    fn next_distribution(&self, ctx: &Context) -> Result<TokenDistribution<f64>, ModelError> {
        match self {
            DraftRef::File(m) => m.next_distribution(ctx),
            DraftRef::Derived(m) => m.next_distribution(ctx),
        }
    }
}

impl Models {
    pub fn load(args: &ModelArgs) -> Result<Self, CliError> {
        let target: TabularModel64 = load_model(&args.target)
            .map_err(|e| CliError::Data(format!("{}: {e}", args.target.display())))?;
        let draft_file = match &args.draft {
            Some(path) => {
                let model: TabularModel64 = load_model(path)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                if model.vocab_size() != target.vocab_size() {
                    return Err(CliError::Data(format!(
                        "draft vocabulary {} does not match target vocabulary {}",
                        model.vocab_size(),
                        target.vocab_size()
                    )));
                }
                Some(model)
            }
            None => None,
        };
        let distortion = Distortion::parse(&args.distortion).map_err(data_err)?;
        Ok(Self { target, draft_file, distortion })
    }

    pub fn draft(&self) -> Result<DraftRef<'_>, CliError> {
        match &self.draft_file {
            Some(model) => Ok(DraftRef::File(model)),
            None => Ok(DraftRef::Derived(
                DerivedDraftModel::new(&self.target, self.distortion).map_err(data_err)?,
            )),
        }
    }
}

pub fn parse_mode(s: &str) -> Result<Mode, CliError> {
    s.parse().map_err(CliError::Data)
}

fn parse_shape(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Data(format!("cannot parse shape width \"{w}\"")))
        })
        .collect()
}

pub fn engine_config(
    mode: Mode,
    budget: &BudgetArgs,
    max_tokens: usize,
    inject_bias: bool,
) -> Result<EngineConfig64, CliError> {
    let static_shape = budget.shape.as_deref().map(parse_shape).transpose()?;
    let cfg = EngineConfig {
        mode,
        depth: budget.depth,
        k: budget.k,
        branch: budget.branch,
        m: budget.m,
        temperature: budget.temperature,
        max_tokens,
        seed: budget.seed,
        static_shape,
        acceptance_bias: if inject_bias { INJECTED_BIAS } else { 0.0 },
    };
    cfg.validate().map_err(data_err)?;
    Ok(cfg)
}

pub fn load_prompts(path: &Path, vocab_size: usize) -> Result<Vec<Context>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut prompts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut ids = Vec::new();
        for part in line.split_whitespace() {
            let id: u32 = part.parse().map_err(|_| {
                CliError::Data(format!(
                    "{}:{}: cannot parse token \"{part}\"",
                    path.display(),
                    lineno + 1
                ))
            })?;
            if id as usize >= vocab_size {
                return Err(CliError::Data(format!(
                    "{}:{}: token {id} out of range for vocabulary {vocab_size}",
                    path.display(),
                    lineno + 1
                )));
            }
            ids.push(id);
        }
        prompts.push(Context::from_ids(&ids));
    }
    if prompts.is_empty() {
        return Err(CliError::Data(format!("{}: no prompts found", path.display())));
    }
    Ok(prompts)
}

pub fn synthesize_prompts(target: &TabularModel64, n: usize, seed: u64) -> Vec<Context> {
    use rand::SeedableRng;
    (0..n)
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                1_000_000_007 + i as u64,
            ));
            let tokens = sample_continuation(target, &Context::new(), SYNTH_PROMPT_LEN, &mut rng)
                .expect("sampling from a validated model");
            Context::from_tokens(tokens)
        })
        .collect()
}

pub fn resolve_prompts(
    args: &PromptArgs,
    target: &TabularModel64,
    seed: u64,
) -> Result<Vec<Context>, CliError> {
    match &args.prompts {
        Some(path) => load_prompts(path, target.vocab_size()),
        None => {
            if args.n_prompts == 0 {
                return Err(CliError::Data("need at least one prompt".into()));
            }
            Ok(synthesize_prompts(target, args.n_prompts, seed))
        }
    }
}

pub struct ModeRun {
    pub report: RunReport,
    pub per_prompt_tau: Vec<f64>,
}

/// Run one mode over every prompt (prompt i uses the seed derived from the
/// base seed and i, identically across modes) and fold the metrics. Prompts
/// run in a parallel pool; results merge in prompt order, so reports do not
/// depend on worker count.
pub fn run_mode_over_prompts(
    target: &TabularModel64,
    draft: &DraftRef<'_>,
    prompts: &[Context],
    base_cfg: &EngineConfig64,
    cost: &CostModel<f64>,
    bins: usize,
) -> Result<ModeRun, CliError> {
    let per_prompt: Result<Vec<(MetricsAccumulator, f64)>, CliError> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut cfg = base_cfg.clone();
            cfg.seed = derive_seed(base_cfg.seed, i as u64);
            let trace = generate(&target, draft, prompt, &cfg).map_err(data_err)?;
            let mut acc = MetricsAccumulator::new(bins);
            acc.add_trace(&trace);
            let tau = acc.tau().unwrap_or(1.0);
            Ok((acc, tau))
        })
        .collect();
    let per_prompt = per_prompt?;

    let mut total = MetricsAccumulator::new(bins);
    let mut per_prompt_tau = Vec::with_capacity(per_prompt.len());
    for (acc, tau) in &per_prompt {
        total.merge(acc);
        per_prompt_tau.push(*tau);
    }
    let report = total.into_report(base_cfg, cost).map_err(data_err)?;
    Ok(ModeRun { report, per_prompt_tau })
}

fn cost_model(args: &crate::args::CostArgs) -> CostModel<f64> {
    CostModel {
        draft_step_cost: args.draft_cost,
        target_step_cost: 1.0,
        per_token_overhead: args.overhead,
    }
}

fn config_echo<A: Serialize>(args: &A) -> serde_json::Value {
    serde_json::to_value(args).expect("args are serializable")
}

fn write_report<R: Serialize>(
    doc: &ReportDocument<R>,
    path: Option<&Path>,
) -> Result<(), CliError> {
    doc.write(path).map_err(|e| CliError::Data(format!("writing report: {e}")))
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CycleDump {
    tokens: Vec<u32>,
    /// Parent flat positions, -1 for children of the root.
    parents: Vec<i64>,
    depths: Vec<usize>,
    values: Vec<f64>,
    confidences: Vec<f64>,
    /// Ancestor-visibility rows as 0/1 strings.
    mask: Vec<String>,
    accepted_positions: Vec<usize>,
    bonus: u32,
    emitted_len: usize,
}

#[derive(Serialize)]
struct GenerateResults {
    emitted: Vec<u32>,
    n_cycles: usize,
    tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cycles: Option<Vec<CycleDump>>,
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let models = Models::load(&args.models)?;
    let draft = models.draft()?;
    let mode = parse_mode(&args.mode)?;
    let cfg = engine_config(mode, &args.budget, args.max_tokens, false)?;
    let prompt = match &args.prompts {
        Some(path) => load_prompts(path, models.target.vocab_size())?
            .into_iter()
            .next()
            .expect("load_prompts rejects empty files"),
        None => Context::new(),
    };

    let trace = generate(&models.target, &draft, &prompt, &cfg).map_err(data_err)?;
    let stream: Vec<String> = trace.emitted.iter().map(|t| t.to_string()).collect();
    println!("{}", stream.join(" "));

    let cycles = args.dump_tree.then(|| {
        trace
            .cycles
            .iter()
            .map(|cycle| {
                let (tokens, parents, depths, values, confidences, mask) = match &cycle.draft {
                    Some(d) => (
                        d.tokens.iter().map(|t| t.0).collect(),
                        d.parents.iter().map(|p| p.map_or(-1, |x| x as i64)).collect(),
                        d.depths.clone(),
                        d.values.clone(),
                        d.confidences.clone(),
                        ancestor_mask(&d.parents)
                            .iter()
                            .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
                            .collect(),
                    ),
                    None => Default::default(),
                };
                CycleDump {
                    tokens,
                    parents,
                    depths,
                    values,
                    confidences,
                    mask,
                    accepted_positions: cycle.outcome.accepted_positions.clone(),
                    bonus: cycle.outcome.bonus.0,
                    emitted_len: cycle.emitted_len,
                }
            })
            .collect()
    });
    let results = GenerateResults {
        emitted: trace.emitted.iter().map(|t| t.0).collect(),
        n_cycles: trace.cycles.len(),
        tau: average_acceptance_length(std::slice::from_ref(&trace)).ok(),
        cycles,
    };
    let doc = ReportDocument::new("generate", cfg.seed, config_echo(&args), results);
    write_report(&doc, args.report.as_deref())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct BenchResults {
    n_prompts: usize,
    modes: Vec<RunReport>,
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    let models = Models::load(&args.models)?;
    let draft = models.draft()?;
    let mut modes = Vec::new();
    for raw in &args.modes {
        let mode = parse_mode(raw)?;
        if !modes.contains(&mode) {
            modes.push(mode);
        }
    }
    let prompts = resolve_prompts(&args.prompt_set, &models.target, args.budget.seed)?;
    let cost = cost_model(&args.cost);

    let mut reports = Vec::new();
    for mode in modes {
        let cfg = engine_config(mode, &args.budget, args.max_tokens, false)?;
        let run = run_mode_over_prompts(&models.target, &draft, &prompts, &cfg, &cost, args.bins)?;
        println!(
            "{}: tau {:.4}  speedup_estimate {:.4}  ({} cycles over {} prompts)",
            mode,
            run.report.tau,
            run.report.speedup_estimate,
            run.report.n_cycles,
            prompts.len()
        );
        reports.push(run.report);
    }
    let results = BenchResults { n_prompts: prompts.len(), modes: reports };
    let doc = ReportDocument::new("bench", args.budget.seed, config_echo(&args), results);
    write_report(&doc, args.report.as_deref())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Comparison {
    better: String,
    worse: String,
    mean_tau_better: f64,
    mean_tau_worse: f64,
    /// One-sided paired sign-flip permutation p-value for "better > worse".
    p_value: f64,
}

#[derive(Serialize)]
struct AblateResults {
    n_prompts: usize,
    /// Flagged so single-prompt reports are recognizably anecdotal.
    single_prompt: bool,
    arms: Vec<RunReport>,
    comparisons: Vec<Comparison>,
}

pub const ABLATION_ARMS: [Mode; 4] = [Mode::Eagle2, Mode::NoValue, Mode::NoRerank, Mode::NoBoth];

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let models = Models::load(&args.models)?;
    let draft = models.draft()?;
    let prompts = resolve_prompts(&args.prompt_set, &models.target, args.budget.seed)?;
    let cost = cost_model(&args.cost);

    let mut runs: BTreeMap<&'static str, ModeRun> = BTreeMap::new();
    for mode in ABLATION_ARMS {
        let cfg = engine_config(mode, &args.budget, args.max_tokens, false)?;
        let run = run_mode_over_prompts(&models.target, &draft, &prompts, &cfg, &cost, args.bins)?;
        println!(
            "{}: tau {:.4}  speedup_estimate {:.4}",
            mode, run.report.tau, run.report.speedup_estimate
        );
        runs.insert(mode.as_str(), run);
    }

    let pairs = [
        ("eagle2", "no_rerank"),
        ("no_rerank", "no_both"),
        ("eagle2", "no_value"),
        ("no_value", "no_both"),
    ];
    let mut comparisons = Vec::new();
    for (idx, (better, worse)) in pairs.into_iter().enumerate() {
        let a = &runs[better];
        let b = &runs[worse];
        let diffs: Vec<f64> = a
            .per_prompt_tau
            .iter()
            .zip(&b.per_prompt_tau)
            .map(|(x, y)| x - y)
            .collect();
        let p_value =
            paired_permutation_pvalue(&diffs, 10_000, derive_seed(args.budget.seed, 0xAB1A + idx as u64));
        println!("{better} vs {worse}: mean tau {:.4} vs {:.4}, one-sided p = {p_value:.5}",
            a.report.tau, b.report.tau);
        comparisons.push(Comparison {
            better: better.into(),
            worse: worse.into(),
            mean_tau_better: a.report.tau,
            mean_tau_worse: b.report.tau,
            p_value,
        });
    }

    let results = AblateResults {
        n_prompts: prompts.len(),
        single_prompt: prompts.len() == 1,
        arms: ABLATION_ARMS.iter().map(|m| runs[m.as_str()].report.clone()).collect(),
        comparisons,
    };
    let doc = ReportDocument::new("ablate", args.budget.seed, config_echo(&args), results);
    write_report(&doc, args.report.as_deref())
}

// ---------------------------------------------------------------------------
// certify
// ---------------------------------------------------------------------------

#[derive(Serialize)]
pub struct ExactEqualityResult {
    pub prompts_checked: usize,
    pub mismatches: usize,
}

#[derive(Serialize)]
pub struct TreeSuiteResult {
    pub shapes_tested: usize,
    pub max_deviation: f64,
    pub pass: bool,
}

#[derive(Serialize)]
pub struct CertifyResults {
    pub method: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<EquivalenceVerdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<ExactEqualityResult>,
    pub tree_suite: TreeSuiteResult,
    pub pass: bool,
}

fn cmd_certify(args: CertifyArgs) -> Result<CertifyResults, CliError> {
    let models = Models::load(&args.models)?;
    let draft = models.draft()?;
    let mode = parse_mode(&args.mode)?;
    let cfg = engine_config(mode, &args.budget, args.max_tokens, args.inject_bias)?;
    let results = certify(&models.target, &draft, &cfg, args.n_samples, args.alpha)?;

    match (&results.verdict, &results.exact) {
        (Some(v), _) => println!(
            "monte carlo: chi2 {:.3} over {} cells, p = {:.5}, tv = {:.5}, n = {} -> {}",
            v.statistic,
            v.cells,
            v.p_value,
            v.tv_distance,
            v.n_samples,
            if v.pass { "PASS" } else { "FAIL" }
        ),
        (None, Some(e)) => println!(
            "exact greedy equality: {} prompts, {} mismatches -> {}",
            e.prompts_checked,
            e.mismatches,
            if e.mismatches == 0 { "exact-pass" } else { "FAIL" }
        ),
        _ => {}
    }
    println!(
        "tree suite: {} shapes, max deviation {:.3e} -> {}",
        results.tree_suite.shapes_tested,
        results.tree_suite.max_deviation,
        if results.tree_suite.pass { "PASS" } else { "FAIL" }
    );
    println!("certification: {}", if results.pass { "PASS" } else { "FAIL" });

    let doc = ReportDocument::new("certify", cfg.seed, config_echo(&args), &results);
    write_report(&doc, args.report.as_deref())?;
    if results.pass {
        Ok(results)
    } else {
        Err(CliError::CertifyFailed)
    }
}

/// Certification core, reusable without CLI arguments: Monte Carlo
/// generations against the exact autoregressive law of the tempered target
/// (or exact token equality at temperature 0), plus the exhaustive
/// small-tree verification suite.
pub fn certify(
    target: &TabularModel64,
    draft: &DraftRef<'_>,
    cfg: &EngineConfig64,
    n_samples: u64,
    alpha: f64,
) -> Result<CertifyResults, CliError> {
    // Surface configuration and model errors once, before the parallel loop.
    let mut probe = cfg.clone();
    probe.seed = derive_seed(cfg.seed, 0);
    generate(target, draft, &Context::new(), &probe).map_err(data_err)?;

    let (method, verdict, exact) = if cfg.is_greedy() {
        let prompts = {
            let mut p = synthesize_prompts(target, 100, cfg.seed);
            p.push(Context::new());
            p
        };
        let mismatches = prompts
            .par_iter()
            .filter(|prompt| {
                let run = |mode: Mode| {
                    let mut c = cfg.clone();
                    c.mode = mode;
                    generate(target, draft, prompt, &c).expect("probed config").emitted
                };
                run(cfg.mode) != run(Mode::Vanilla)
            })
            .count();
        let exact = ExactEqualityResult { prompts_checked: prompts.len(), mismatches };
        ("exact", None, Some(exact))
    } else {
        let tempered = target.tempered(cfg.temperature);
        let expected =
            exact_autoregressive(&tempered, &Context::new(), cfg.max_tokens).map_err(data_err)?;
        let counts: BTreeMap<Vec<TokenId>, u64> = (0..n_samples)
            .into_par_iter()
            .fold(BTreeMap::new, |mut map, i| {
                let mut c = cfg.clone();
                c.seed = derive_seed(cfg.seed, i);
                let trace = generate(target, draft, &Context::new(), &c).expect("probed config");
                *map.entry(trace.emitted).or_insert(0) += 1;
                map
            })
            .reduce(BTreeMap::new, |mut a, b| {
                for (k, v) in b {
                    *a.entry(k).or_insert(0) += v;
                }
                a
            });
        let verdict = chi_square_equivalence(&counts, &expected, alpha).map_err(data_err)?;
        ("chi_square", Some(verdict), None)
    };

    let tree_suite = run_tree_suite(5, 3, cfg.seed)?;
    let mc_pass = verdict.as_ref().map(|v| v.pass).unwrap_or(true)
        && exact.as_ref().map(|e| e.mismatches == 0).unwrap_or(true);
    let pass = mc_pass && tree_suite.pass;
    Ok(CertifyResults { method, verdict, exact, tree_suite, pass })
}

/// Exhaustively check the tree-verification marginal over every draft shape
/// with up to `max_nodes` nodes at the given vocabulary.
pub fn run_tree_suite(max_nodes: usize, vocab: usize, seed: u64) -> Result<TreeSuiteResult, CliError> {
    let mut max_deviation = 0.0f64;
    let mut shapes_tested = 0;
    for (i, parents) in enumerate_tree_shapes(max_nodes).iter().enumerate() {
        let Ok((draft, dists)) = shape_fixture::<f64>(parents, vocab, derive_seed(seed, 7_000 + i as u64))
        else {
            continue; // sibling group wider than the vocabulary
        };
        let marginals = exact_tree_verification_marginal(&dists, &draft).map_err(data_err)?;
        max_deviation = max_deviation.max(marginals.max_deviation(&dists));
        shapes_tested += 1;
    }
    Ok(TreeSuiteResult { shapes_tested, max_deviation, pass: max_deviation < TREE_SUITE_TOLERANCE })
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CalibrateResults {
    n_prompts: usize,
    run: RunReport,
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let models = Models::load(&args.models)?;
    let draft = models.draft()?;
    let mode = parse_mode(&args.mode)?;
    let cfg = engine_config(mode, &args.budget, args.max_tokens, false)?;
    let prompts = resolve_prompts(&args.prompt_set, &models.target, args.budget.seed)?;
    let cost = cost_model(&args.cost);
    let run = run_mode_over_prompts(&models.target, &draft, &prompts, &cfg, &cost, args.bins)?;

    println!(
        "calibrate: {} tested tokens over {} cycles, tau {:.4}",
        run.report.tested_tokens, run.report.n_cycles, run.report.tau
    );
    for bin in &run.report.calibration_bins {
        if let (Some(conf), Some(rate)) = (bin.mean_confidence, bin.acceptance_rate) {
            println!(
                "  [{:.2}, {:.2})  mean_conf {:.4}  acc_rate {:.4}  n = {}",
                bin.bin_lo, bin.bin_hi, conf, rate, bin.count
            );
        }
    }

    if let Some(path) = &args.csv {
        let mut text = String::from("bin_lo,bin_hi,mean_conf,acc_rate,count\n");
        for b in &run.report.calibration_bins {
            let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                b.bin_lo,
                b.bin_hi,
                opt(b.mean_confidence),
                opt(b.acceptance_rate),
                b.count
            ));
        }
        std::fs::write(path, text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }

    let results = CalibrateResults { n_prompts: prompts.len(), run: run.report };
    let doc = ReportDocument::new("calibrate", args.budget.seed, config_echo(&args), results);
    write_report(&doc, args.report.as_deref())
}

// ---------------------------------------------------------------------------
// gen-model
// ---------------------------------------------------------------------------

fn cmd_gen_model(args: GenModelArgs) -> Result<(), CliError> {
    let model: TabularModel64 =
        random_model(args.vocab, args.order, args.seed, args.concentration).map_err(data_err)?;
    save_model(&model, &args.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    println!(
        "wrote model: vocab {} order {} seed {} concentration {} -> {}",
        args.vocab,
        args.order,
        args.seed,
        args.concentration,
        args.out.display()
    );
    Ok(())
}
