use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use chainuq::chain::{
    load_inputs, ChainRunner, ChatClient, HttpChatClient, TemplateSet, TranscriptMode, TranscriptStore,
};
use chainuq::config::{init_thread_pool, RunConfig};
use chainuq::eval::{
    check_loss_monotonicity, generate_synthetic, metrics, rejected_misclassification_ratio, render_table_row,
    simulate_risk_identity, sweep_curves, ScoreRegime, SyntheticConfig, TheoryConfig,
};
use chainuq::pipeline::{score_dataset, train};
use chainuq::scores::{read_profiles_csv, write_profiles_csv};
use chainuq::selective::{
    decide_score, dominance_bound, optimize_p, read_routing_csv, regret_curve, threshold_from_quantile,
    write_routing_csv, DeferralPolicy, Level,
};
use chainuq::store::{
    load_artifact, load_traces, read_json, save_artifact, save_traces, stratified_split, write_json, SplitSpec,
};
use chainuq::weights::{read_scored_csv, simplex_grid, weight_trajectory, write_scored_csv, WeightTrajectory};
use chainuq::{Dataset, Label, LabelSet};

#[derive(Parser)]
#[command(name = "chainuq", version, about = "Stage-wise uncertainty scores and deferral for model ensembles")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short = 'c', long, global = true)]
    run_config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a traces file and print a summary.
    Ingest(IngestArgs),
    /// Run the reasoning chain for each input and write traces.
    RunChain(RunChainArgs),
    /// Fit the uncertainty model, weights and policy on training traces.
    Fit(FitArgs),
    /// Per-instance uncertainty profiles under a fitted artifact.
    Score(ScoreArgs),
    /// Weight trajectory over rejection rates from cross-fitted scores.
    OptimizeWeights(OptimizeWeightsArgs),
    /// Cost-optimal rejection rate and deferral policy.
    OptimizeP(OptimizePArgs),
    /// Route instances to automatic handling or review.
    Route(RouteArgs),
    /// Retained-set metrics of a routing file.
    Evaluate(EvaluateArgs),
    /// Metric-versus-rejection-rate curves.
    Sweep(SweepArgs),
    /// Monte Carlo check of the deferral risk identity and loss monotonicity.
    VerifyTheory(VerifyTheoryArgs),
    /// Generate synthetic traces.
    Synth(SynthArgs),
}

#[derive(Args)]
struct IngestArgs {
    traces: PathBuf,
    /// Fail on malformed lines instead of skipping them.
    #[arg(long)]
    strict: bool,
    /// Write a JSON summary here.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Stratified split: write the training part here.
    #[arg(long, requires = "split_test")]
    split_train: Option<PathBuf>,
    #[arg(long, requires = "split_train")]
    split_test: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
}

#[derive(Args)]
struct RunChainArgs {
    /// JSONL of `{instance_id, data_ref, side_info_c?, true_label?, strata_tag?}`.
    #[arg(long)]
    inputs: PathBuf,
    /// Comma-separated model ids.
    #[arg(long, value_delimiter = ',')]
    roster: Vec<String>,
    /// Directory with comprehension.txt, analysis.txt, reflection.txt.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, conflicts_with = "record")]
    replay: bool,
    #[arg(long)]
    record: bool,
    #[arg(long)]
    transcripts: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Comma-separated label set.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    #[arg(long)]
    positive: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    train: PathBuf,
    /// Output directory for the artifact bundle.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Weights `a,b,c`; the artifact policy's by default.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    alpha: Option<Vec<f64>>,
}

#[derive(Args)]
struct OptimizeWeightsArgs {
    /// Cross-fitted scores written by `fit`.
    #[arg(long)]
    cv_scores: PathBuf,
    #[arg(long = "P-levels", value_delimiter = ',')]
    p_levels: Option<Vec<f64>>,
    #[arg(long)]
    grid_step: Option<f64>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizePArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    cv_scores: PathBuf,
    #[arg(long)]
    trajectory: PathBuf,
    /// In-sample profiles written by `fit`; thresholds come from these.
    #[arg(long)]
    train_profiles: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RouteArgs {
    #[arg(long)]
    policy: PathBuf,
    /// Profiles written by `score`.
    #[arg(long)]
    profiles: PathBuf,
    /// Traces the profiles were computed from (for the ensemble votes).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    routing: PathBuf,
    /// Traces carrying the true labels.
    #[arg(long)]
    labels: PathBuf,
    /// Policy, to record P and the weights in the report.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    cv_scores: PathBuf,
    /// Weights per level; fixed `--alpha` otherwise.
    #[arg(long, required_unless_present = "alpha")]
    trajectory: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    alpha: Option<Vec<f64>>,
    #[arg(long = "P-levels", value_delimiter = ',')]
    p_levels: Option<Vec<f64>>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyTheoryArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Instances per trial.
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    #[arg(long = "P", default_value_t = 0.2)]
    p: f64,
    #[arg(long, default_value_t = 0.02)]
    delta: f64,
    #[arg(long, default_value_t = 1000)]
    grid_points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator settings (TOML or JSON); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-instance generating truth (JSONL).
    #[arg(long)]
    truth: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<chainuq::Error>())
                .map_or("error", |c| c.kind());
            eprintln!("error[{kind}]: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    args: Vec<String>,
}

impl Ctx {
    fn snapshot(&self, command: &str, out: &Path) -> Result<()> {
        let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        self.snapshot_in(command, dir)
    }

    fn snapshot_in(&self, command: &str, dir: &Path) -> Result<()> {
        self.cfg.write_snapshot(dir, command, &self.args)?;
        Ok(())
    }

    fn load(&self, path: &Path) -> Result<Dataset> {
        let report = load_traces(path, &self.cfg.ingest.load_options())
            .with_context(|| format!("loading {}", path.display()))?;
        if !report.skipped.is_empty() {
            log::warn!("{}: skipped {} malformed lines", path.display(), report.skipped.len());
        }
        Ok(report.dataset)
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.run_config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    init_thread_pool(cfg.jobs)?;
    let ctx = Ctx {
        cfg,
        args: std::env::args().skip(1).collect(),
    };
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::RunChain(a) => run_chain(&ctx, a),
        Command::Fit(a) => fit(&ctx, a),
        Command::Score(a) => score(&ctx, a),
        Command::OptimizeWeights(a) => optimize_weights(&ctx, a),
        Command::OptimizeP(a) => optimize_p_cmd(&ctx, a),
        Command::Route(a) => route(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::VerifyTheory(a) => verify_theory(&ctx, a),
        Command::Synth(a) => synth(&ctx, a, cli.seed),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn alpha_arg(v: &Option<Vec<f64>>) -> Option<[f64; 3]> {
    v.as_ref().map(|a| [a[0], a[1], a[2]])
}

fn ingest(ctx: &Ctx, a: IngestArgs) -> Result<()> {
    let mut opts = ctx.cfg.ingest.load_options();
    opts.strict |= a.strict;
    let report = load_traces(&a.traces, &opts)?;
    let d = &report.dataset;
    let summary = serde_json::json!({
        "instances": d.len(),
        "models": d.model_roster,
        "labels": d.label_set.labels,
        "positive": d.label_set.positive,
        "strata": d.strata_counts(),
        "skipped_lines": report.skipped.iter().map(|(l, m)| serde_json::json!({"line": l, "message": m})).collect::<Vec<_>>(),
    });
    println!("instances: {}", d.len());
    println!("models:    {}", d.model_roster.join(", "));
    let labels: Vec<&str> = d.label_set.labels.iter().map(Label::as_str).collect();
    println!("labels:    {}", labels.join(", "));
    for (tag, n) in d.strata_counts() {
        println!("  {tag}: {n}");
    }
    println!("skipped:   {}", report.skipped.len());
    if let Some(path) = &a.summary {
        write_json(path, &summary)?;
        ctx.snapshot("ingest", path)?;
    }
    if let (Some(tr), Some(te)) = (&a.split_train, &a.split_test) {
        let spec = SplitSpec {
            train_fraction: a.train_fraction,
            ..SplitSpec::four_to_one(chainuq::seed::derive_seed(ctx.cfg.seed, "split"))
        };
        let (train, test) = stratified_split(d, &spec)?;
        create(tr)?;
        create(te)?;
        save_traces(tr, &train)?;
        save_traces(te, &test)?;
        println!("split:     {} train, {} test", train.len(), test.len());
        ctx.snapshot("ingest", tr)?;
    }
    Ok(())
}

fn run_chain(ctx: &Ctx, a: RunChainArgs) -> Result<()> {
    let mut chain = ctx.cfg.chain.clone();
    if !a.roster.is_empty() {
        chain.roster = a.roster.clone();
    }
    if let Some(t) = &a.task {
        chain.task = t.clone();
    }
    if a.endpoint.is_some() {
        chain.endpoint = a.endpoint.clone();
    }
    if a.replay {
        chain.mode = TranscriptMode::Replay;
    } else if a.record {
        chain.mode = TranscriptMode::Record;
    }
    let labels = if a.labels.is_empty() {
        ctx.cfg
            .ingest
            .label_set()
            .ok_or_else(|| anyhow!("a label set is required (--labels or ingest.labels)"))?
    } else {
        let positive = a.positive.clone().or_else(|| ctx.cfg.ingest.positive.clone());
        LabelSet::new(a.labels.iter().map(String::as_str), positive.as_deref().map(Label::from))
    };
    let templates = match a.templates.as_ref().or(chain.templates.as_ref()) {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    let transcripts = a.transcripts.clone().or_else(|| ctx.cfg.paths.transcripts.clone());
    let store = match (chain.mode, &transcripts) {
        (TranscriptMode::Passthrough, _) => TranscriptStore::passthrough(),
        (mode, Some(path)) => TranscriptStore::open(mode, path)?,
        (mode, None) => bail!("{mode:?} mode needs a transcript file (--transcripts)"),
    };
    let http = match chain.mode {
        TranscriptMode::Replay => None,
        _ => Some(HttpChatClient::new(chain.http()?)?),
    };
    let settings = chain.settings(labels.clone());
    let runner = ChainRunner {
        client: http.as_ref().map(|c| c as &dyn ChatClient),
        store: &store,
        templates: &templates,
        settings: &settings,
    };
    let inputs = load_inputs(&a.inputs)?;
    let results = runner.run_all(&inputs)?;
    let mut traces = Vec::new();
    let mut rejected = Vec::new();
    for r in results {
        match r {
            Ok(t) => traces.push(t),
            Err(e @ chainuq::Error::ChainFailed(_)) => rejected.push(e.to_string()),
            Err(e) => return Err(e.into()),
        }
    }
    for msg in &rejected {
        eprintln!("rejected: {msg}");
    }
    if traces.is_empty() {
        bail!("every instance was rejected");
    }
    let dataset = Dataset::from_traces(traces, Some(labels), Some(chain.roster.clone()));
    create(&a.out)?;
    save_traces(&a.out, &dataset)?;
    println!("wrote {} traces ({} rejected) to {}", dataset.len(), rejected.len(), a.out.display());
    ctx.snapshot("run-chain", &a.out)
}

fn fit(ctx: &Ctx, a: FitArgs) -> Result<()> {
    let dataset = ctx.load(&a.train)?;
    let embedder = ctx.cfg.embedding.build()?;
    let outcome = train(&dataset, &embedder, &ctx.cfg.train_config())?;
    embedder.persist()?;
    let dir = &a.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    save_artifact(dir.join("artifact.json"), &outcome.artifact)?;
    write_json(dir.join("fit_report.json"), &outcome.report)?;
    write_scored_csv(&outcome.cv_scored, create(&dir.join("cv_scores.csv"))?)?;
    outcome.trajectory.write_csv(create(&dir.join("weight_trajectory.csv"))?)?;
    let policy = outcome.artifact.policy.as_ref().expect("training sets a policy");
    write_json(dir.join("policy.json"), policy)?;
    let (_, profiles) = score_dataset(&outcome.artifact, &dataset, &embedder, Some(policy.alpha))?;
    write_profiles_csv(&profiles, create(&dir.join("train_profiles.csv"))?)?;
    println!(
        "K_x = {}, K_z = {}, reflection flips {}/{}",
        outcome.report.k_x, outcome.report.k_z, outcome.report.reflection_flips, outcome.report.reflection_examples
    );
    println!(
        "policy: P = {}, tau = {:.6}, alpha = {:?}",
        policy.p, policy.tau, policy.alpha
    );
    ctx.snapshot_in("fit", dir)
}

fn score(ctx: &Ctx, a: ScoreArgs) -> Result<()> {
    let artifact = load_artifact(&a.artifact)?;
    let dataset = ctx.load(&a.input)?;
    let embedder = ctx.cfg.embedding.build()?;
    let (_, profiles) = score_dataset(&artifact, &dataset, &embedder, alpha_arg(&a.alpha))?;
    embedder.persist()?;
    write_profiles_csv(&profiles, create(&a.out)?)?;
    println!("scored {} instances", profiles.len());
    ctx.snapshot("score", &a.out)
}

fn optimize_weights(ctx: &Ctx, a: OptimizeWeightsArgs) -> Result<()> {
    let folds = read_scored_csv(open(&a.cv_scores)?)?;
    let levels = a.p_levels.clone().unwrap_or_else(|| ctx.cfg.weights.p_levels.clone());
    let grid = simplex_grid(a.grid_step.unwrap_or(ctx.cfg.weights.grid_step))?;
    let traj = weight_trajectory(&levels, &folds, &grid, a.bandwidth.or(ctx.cfg.weights.bandwidth))?;
    traj.write_csv(create(&a.out)?)?;
    for ((p, r), s) in traj.p_levels.iter().zip(&traj.alpha_raw).zip(&traj.alpha_smooth) {
        println!("P = {p:.3}: raw {r:?} smoothed {s:?}");
    }
    ctx.snapshot("optimize-weights", &a.out)
}

fn levels_of(traj: &WeightTrajectory) -> Vec<Level> {
    traj.p_levels
        .iter()
        .zip(&traj.alpha_smooth)
        .map(|(&p, &alpha)| Level { p, alpha })
        .collect()
}

fn optimize_p_cmd(ctx: &Ctx, a: OptimizePArgs) -> Result<()> {
    let lambda = a.lambda.unwrap_or(ctx.cfg.policy.lambda_cost);
    let folds = read_scored_csv(open(&a.cv_scores)?)?;
    let traj = WeightTrajectory::read_csv(open(&a.trajectory)?)?;
    let levels = levels_of(&traj);
    let choice = optimize_p(lambda, &levels, &folds)?;
    let bound = dominance_bound(&regret_curve(&levels, &folds)?)?;
    let train = read_profiles_csv(open(&a.train_profiles)?)?;
    let s: Vec<f64> = train
        .iter()
        .map(|r| chainuq::scores::combine(&r.components(), &choice.alpha))
        .collect::<chainuq::Result<_>>()?;
    let tau = threshold_from_quantile(&s, choice.p_star)?;
    let bounds = ctx
        .cfg
        .policy
        .bounds
        .unwrap_or((levels[0].p, levels[levels.len() - 1].p));
    let policy = DeferralPolicy::new(choice.p_star, tau, choice.alpha, lambda, bounds)?;
    write_json(&a.out, &policy)?;
    println!("P        mean C        objective");
    for (p, c, o) in &choice.objective {
        println!("{p:<8.3} {c:<13.6} {o:.6}");
    }
    println!("chosen P = {}, tau = {tau:.6}, dominance bound on lambda = {bound:.6}", choice.p_star);
    ctx.snapshot("optimize-p", &a.out)
}

fn route(ctx: &Ctx, a: RouteArgs) -> Result<()> {
    let policy: DeferralPolicy = read_json(&a.policy)?;
    let dataset = ctx.load(&a.input)?;
    let profiles = read_profiles_csv(open(&a.profiles)?)?;
    let votes: BTreeMap<&str, Vec<Label>> = dataset
        .traces
        .iter()
        .map(|t| (t.instance_id.as_str(), t.votes()))
        .collect();
    let decisions = profiles
        .iter()
        .map(|p| {
            let v = votes
                .get(p.instance_id.as_str())
                .ok_or_else(|| anyhow!("instance `{}` is not in {}", p.instance_id, a.input.display()))?;
            let s = chainuq::scores::combine(&p.components(), &policy.alpha)?;
            Ok(decide_score(&p.instance_id, s, policy.tau, v, &dataset.label_set))
        })
        .collect::<Result<Vec<_>>>()?;
    write_routing_csv(&decisions, create(&a.out)?)?;
    let deferred = decisions
        .iter()
        .filter(|d| d.route == chainuq::selective::Route::Defer)
        .count();
    println!("{} automatic, {deferred} deferred", decisions.len() - deferred);
    ctx.snapshot("route", &a.out)
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let decisions = read_routing_csv(open(&a.routing)?)?;
    let dataset = ctx.load(&a.labels)?;
    let truth: BTreeMap<String, Label> = dataset
        .traces
        .iter()
        .filter_map(|t| t.true_label.clone().map(|l| (t.instance_id.clone(), l)))
        .collect();
    let tags: BTreeMap<String, String> = dataset
        .traces
        .iter()
        .filter_map(|t| t.strata_tag.clone().map(|s| (t.instance_id.clone(), s)))
        .collect();
    let mut report = metrics(&decisions, &truth, &tags, &dataset.label_set)?;
    if let Some(p) = &a.policy {
        let policy: DeferralPolicy = read_json(p)?;
        report.p = Some(policy.p);
        report.alpha = Some(policy.alpha);
    }
    let ensemble: BTreeMap<String, Option<Label>> = dataset
        .traces
        .iter()
        .map(|t| {
            (
                t.instance_id.clone(),
                chainuq::selective::majority_vote(&t.votes(), &dataset.label_set),
            )
        })
        .collect();
    let ratio = rejected_misclassification_ratio(&decisions, &ensemble, &truth).ok();
    println!("{report}");
    match ratio {
        Some(r) => println!("misclassified among deferred: {:.2}%", 100.0 * r),
        None => println!("misclassified among deferred: n/a (nothing deferred)"),
    }
    let subset = tags.values().any(|t| t == "ambiguous").then_some("ambiguous").unwrap_or("");
    println!("{}", render_table_row("S", &report, subset));
    if let Some(path) = &a.json {
        write_json(
            path,
            &serde_json::json!({"metrics": report, "rejected_misclassification_ratio": ratio}),
        )?;
        ctx.snapshot("evaluate", path)?;
    }
    Ok(())
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    let folds = read_scored_csv(open(&a.cv_scores)?)?;
    let pool: Vec<_> = folds.into_iter().flatten().collect();
    let labels = ctx
        .cfg
        .ingest
        .label_set()
        .unwrap_or_else(|| LabelSet::infer(pool.iter().map(|s| &s.label)));
    let levels: Vec<Level> = match (&a.trajectory, alpha_arg(&a.alpha)) {
        (_, Some(alpha)) => a
            .p_levels
            .clone()
            .unwrap_or_else(|| ctx.cfg.weights.p_levels.clone())
            .into_iter()
            .map(|p| Level { p, alpha })
            .collect(),
        (Some(path), None) => {
            let all = levels_of(&WeightTrajectory::read_csv(open(path)?)?);
            match &a.p_levels {
                None => all,
                Some(ps) => ps
                    .iter()
                    .map(|&p| {
                        all.iter()
                            .find(|l| (l.p - p).abs() < 1e-9)
                            .copied()
                            .ok_or_else(|| anyhow!("P = {p} is not a level of the trajectory"))
                    })
                    .collect::<Result<_>>()?,
            }
        }
        (None, None) => unreachable!("clap requires one of --trajectory, --alpha"),
    };
    let reps = a.repetitions.unwrap_or(ctx.cfg.eval.random_repetitions);
    let table = sweep_curves(&pool, &levels, &labels, reps, chainuq::seed::derive_seed(ctx.cfg.seed, "sweep"))?;
    table.write_csv(create(&a.out)?)?;
    println!("P       S        random   S_data   S_task   S_ref");
    for l in &levels {
        let acc = |v: &str| table.get(v, l.p).map_or(f64::NAN, |pt| 100.0 * pt.retained_accuracy);
        println!(
            "{:<7.3} {:<8.2} {:<8.2} {:<8.2} {:<8.2} {:.2}",
            l.p,
            acc("S"),
            acc("random"),
            acc("S_data"),
            acc("S_task"),
            acc("S_ref")
        );
    }
    ctx.snapshot("sweep", &a.out)
}

fn verify_theory(ctx: &Ctx, a: VerifyTheoryArgs) -> Result<()> {
    let mut reports = Vec::new();
    let mut ok = true;
    for regime in ScoreRegime::ALL {
        let r = simulate_risk_identity(&TheoryConfig {
            instances: a.instances,
            trials: a.trials,
            p: a.p,
            delta: a.delta,
            regime,
            seed: ctx.cfg.seed,
            ..Default::default()
        })?;
        let identity = r.identity_holds();
        let cov_zero = regime != ScoreRegime::Independent || r.cov_is_zero();
        ok &= identity && cov_zero;
        println!(
            "{:<16} R_g = {:.5}  R_r = {:.5}  cov = {:+.5} (se {:.1e})  gap = {:+.2e} (se {:.1e})  identity {}{}",
            regime.name(),
            r.r_g.mean,
            r.r_r.mean,
            r.cov_term.mean,
            r.cov_term.se,
            r.identity_gap.mean,
            r.identity_gap.se,
            if identity { "holds" } else { "FAILS" },
            if regime == ScoreRegime::Independent {
                if cov_zero { ", cov ~ 0" } else { ", cov NOT ~ 0" }
            } else {
                ""
            }
        );
        reports.push(r);
    }
    let mut monotonicity = Vec::new();
    for tau in [0.0, 0.25, 0.5, 0.75, 1.0] {
        for case in check_loss_monotonicity(a.grid_points, tau) {
            ok &= case.violations == 0;
            monotonicity.push(serde_json::json!({"tau": tau, "case": case}));
        }
    }
    let violations: usize = monotonicity
        .iter()
        .map(|c| c["case"]["violations"].as_u64().unwrap_or(0) as usize)
        .sum();
    println!("loss monotonicity: {violations} violations over {} cases", monotonicity.len());
    if let Some(path) = &a.out {
        write_json(path, &serde_json::json!({"risk_identity": reports, "monotonicity": monotonicity, "passed": ok}))?;
        ctx.snapshot("verify-theory", path)?;
    }
    if !ok {
        bail!("a theory check failed");
    }
    Ok(())
}

fn synth(ctx: &Ctx, a: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: SyntheticConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text)?
            } else {
                toml::from_str(&text).map_err(|e| anyhow!("{}: {e}", p.display()))?
            }
        }
        None => SyntheticConfig::default(),
    };
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = generate_synthetic(&cfg)?;
    create(&a.out)?;
    save_traces(&a.out, &data.dataset)?;
    if let Some(path) = &a.truth {
        let mut w = create(path)?;
        for t in &data.truth {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    println!("wrote {} synthetic traces to {}", data.dataset.len(), a.out.display());
    ctx.snapshot("synth", &a.out)
}
