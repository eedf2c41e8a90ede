mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use needforge::agent::{
    run_pipeline, score_output, score_transcripts, ChatBackend, HttpChatBackend, HttpEmbedder, OutputLine,
    StubBackend, Transcript,
};
use needforge::curation::curate;
use needforge::domain::{
    dataset_stats, read_records, write_records, DatasetStats, LocationType, SpatioTemporalContext, Taxonomy,
    UserRecord,
};
use needforge::envsim::{generate_users, generate_world, World, WorldSpec};
use needforge::eval::{evaluate, policy_examples, SliceDef};
use needforge::policy::Checkpoint;
use needforge::reward::{Embedder, HashEmbedder, Truths};
use needforge::trainer::{run_curriculum, write_stats_csv};

use config::RunConfig;

/// Midnight UTC of the reference day used for `--context` hours.
const REFERENCE_DAY: i64 = 1_709_510_400;

#[derive(Debug, Parser)]
#[command(name = "needforge", version, about = "Need-driven hierarchical recommendation toolkit")]
struct Cli {
    /// INI run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cluster, filter and resample a user dataset.
    Curate(CurateArgs),
    /// Generate a synthetic world and users drawn from it.
    GenWorld(GenWorldArgs),
    /// Run curriculum GRPO training.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out users.
    Eval(EvalArgs),
    /// Run the three-step agent pipeline for one user.
    Infer(InferArgs),
    /// Score agent outputs with the verifiable rewards.
    Score(ScoreArgs),
    /// Dataset statistics.
    Stats(StatsArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Curate(_) => "curate",
            Command::GenWorld(_) => "gen-world",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Infer(_) => "infer",
            Command::Score(_) => "score",
            Command::Stats(_) => "stats",
        }
    }
}

#[derive(Debug, Args)]
struct CurateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenWorldArgs {
    /// JSON world spec; defaults plus [world] config when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    users: Option<PathBuf>,
    /// Also write the world's taxonomy on its own.
    #[arg(long)]
    taxonomy_out: Option<PathBuf>,
    #[arg(long)]
    n_users: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    world: PathBuf,
    /// INI plan ([grpo], [curriculum], [policy], [reward]); overrides --config.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Steps per phase, overriding the plan.
    #[arg(long)]
    steps: Option<usize>,
    /// Start from this checkpoint instead of a uniform policy.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint file, or a directory holding checkpoint.json.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Comma-separated slices: cold_start, len=N, len=A..B.
    #[arg(long)]
    slices: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Stub,
    Http,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long, value_enum)]
    backend: BackendKind,
    /// Directory of `<user>.json` fixtures for the stub backend.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long)]
    user: String,
    /// "hour,zone" or "hour,zone,lat,lon".
    #[arg(long)]
    context: String,
    #[arg(long)]
    taxonomy: PathBuf,
    /// Dataset holding the user's profile and history; empty when absent.
    #[arg(long)]
    users: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Transcript JSONL (with --truths) or stand-alone output JSONL.
    #[arg(long)]
    transcripts: PathBuf,
    /// Truth JSONL aligned with the transcripts.
    #[arg(long)]
    truths: Option<PathBuf>,
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training step for the length term.
    #[arg(long, default_value_t = 0)]
    step: u64,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long, requires = "taxonomy", conflicts_with = "counts")]
    data: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// "users,categories,interactions".
    #[arg(long)]
    counts: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Pretty JSON to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let res = serde_json::to_writer_pretty(&mut out, value).map_err(std::io::Error::from).and_then(|_| writeln!(out));
    match res {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    init_logging(cli.log_level, cli.command.name());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn init_logging(level: log::LevelFilter, subcommand: &'static str) {
    env_logger::Builder::new()
        .filter_level(level)
        .format(move |buf, record| writeln!(buf, "{} {subcommand} {}", record.level(), record.args()))
        .target(env_logger::Target::Stderr)
        .init();
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Curate(a) => cmd_curate(&cfg, cli.seed, a),
        Command::GenWorld(a) => cmd_gen_world(&cfg, cli.seed, a),
        Command::Train(a) => cmd_train(&cfg, cli.seed, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Infer(a) => cmd_infer(&cfg, a),
        Command::Score(a) => cmd_score(&cfg, a),
        Command::Stats(a) => cmd_stats(a),
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| io_error(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> anyhow::Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        anyhow!("{}: file not found", path.display())
    } else {
        anyhow!("{}: {e}", path.display())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("{}: invalid JSON", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn load_taxonomy(path: &Path) -> Result<Taxonomy> {
    read_json(path)
}

fn load_records(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<UserRecord>> {
    read_records(open(path)?, taxonomy).with_context(|| format!("{}", path.display()))
}

fn cmd_curate(cfg: &RunConfig, seed: Option<u64>, a: CurateArgs) -> Result<()> {
    let mut ccfg = cfg.curation()?;
    if let Some(s) = seed {
        ccfg.seed = s;
    }
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let records = load_records(&a.input, &taxonomy)?;
    let outcome = curate(&records, &taxonomy, &ccfg)?;
    let outliers = outcome.flags.iter().filter(|f| f.is_outlier()).count();
    log::info!("{} users in, {} flagged, {} kept", records.len(), outliers, outcome.curated.len());
    let mut w = create(&a.out)?;
    write_records(&mut w, &outcome.curated, &taxonomy)?;
    w.flush()?;
    if let Some(r) = &a.report {
        write_json(r, &outcome.report)?;
    }
    Ok(())
}

fn cmd_gen_world(cfg: &RunConfig, seed: Option<u64>, a: GenWorldArgs) -> Result<()> {
    let (mut spec, gen) = cfg.world()?;
    if let Some(p) = &a.spec {
        spec = read_json::<WorldSpec>(p)?;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let world = generate_world(&spec)?;
    write_json(&a.out, &world)?;
    if let Some(t) = &a.taxonomy_out {
        write_json(t, &world.taxonomy)?;
    }
    if let Some(u) = &a.users {
        let n = a.n_users.unwrap_or(gen.n_users);
        let users = generate_users(&world, n, (gen.seq_min, gen.seq_max), spec.seed);
        let mut w = create(u)?;
        write_records(&mut w, &users, &world.taxonomy)?;
        w.flush()?;
        log::info!("wrote {n} users");
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, seed: Option<u64>, a: TrainArgs) -> Result<()> {
    let world: World = read_json(&a.world)?;
    let plan_cfg = match &a.plan {
        Some(p) => RunConfig::load(p)?,
        None => cfg.clone(),
    };
    let mut plan = plan_cfg.plan(seed.unwrap_or(0))?;
    if let Some(steps) = a.steps {
        for p in &mut plan.phases {
            p.config.steps = steps;
        }
    }
    let init = match &a.init {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let outcome = run_curriculum(&plan, &world, init)?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        for (k, phase) in outcome.phases.iter().enumerate() {
            let path = dir.join(format!("phase{}_{}.json", k + 1, phase.stage.as_str()));
            write_checkpoint(&path, &phase.checkpoint)?;
        }
        write_checkpoint(&dir.join("checkpoint.json"), &outcome.checkpoint)?;
    }
    if let Some(s) = &a.stats {
        let mut w = create(s)?;
        write_stats_csv(&mut w, &outcome.trajectory)?;
        w.flush()?;
    }
    for p in &outcome.phases {
        log::info!(
            "phase {}: need_acc {} -> {}, cat_hr1 {:.4} -> {:.4}",
            p.stage.as_str(),
            fmt_opt(p.initial_probe.need_acc),
            fmt_opt(p.final_probe.need_acc),
            p.initial_probe.cat_hr1,
            p.final_probe.cat_hr1
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = create(path)?;
    ck.write_json(&mut w)?;
    w.flush()?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let path = if path.is_dir() { path.join("checkpoint.json") } else { path.to_path_buf() };
    Checkpoint::read_json(open(&path)?).with_context(|| format!("{}", path.display()))
}

fn cmd_eval(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let world: World = read_json(&a.world)?;
    let ck = load_checkpoint(&a.ckpt)?;
    if !ck.policy.compatible_with(&world) {
        bail!("checkpoint does not match the world's taxonomy");
    }
    let records = load_records(&a.data, &world.taxonomy)?;
    let slices = a.slices.or(cfg.eval_slices()?).unwrap_or_else(|| "cold_start".into());
    let slices: Vec<SliceDef> = slices
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<SliceDef>().map_err(|e| anyhow!("--slices: {e}")))
        .collect::<Result<_>>()?;
    let examples = policy_examples(&ck.policy, &world, &records);
    let report = evaluate(&examples, &slices)?;
    match &a.report {
        Some(p) => write_json(p, &report)?,
        None => print_json(&report)?,
    }
    Ok(())
}

fn parse_context(s: &str) -> Result<SpatioTemporalContext> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || anyhow!("--context: expected \"hour,zone\" or \"hour,zone,lat,lon\", got {s:?}");
    if parts.len() != 2 && parts.len() != 4 {
        return Err(bad());
    }
    let hour: i64 = parts[0].parse().map_err(|_| bad())?;
    if !(0..24).contains(&hour) {
        bail!("--context: hour must be in 0..=23");
    }
    let zone: LocationType = parts[1].parse()?;
    let (lat, lon) = if parts.len() == 4 {
        (parts[2].parse().map_err(|_| bad())?, parts[3].parse().map_err(|_| bad())?)
    } else {
        (0.0, 0.0)
    };
    Ok(SpatioTemporalContext::new(REFERENCE_DAY + hour * 3600, lat, lon, zone)?)
}

fn make_embedder(cfg: &RunConfig) -> Result<Box<dyn Embedder>> {
    let agent = cfg.agent()?;
    let (_, _, embed_seed) = cfg.reward()?;
    if agent.embed_base_url.is_empty() {
        Ok(Box::new(HashEmbedder::new(agent.embed_dim, embed_seed)))
    } else {
        Ok(Box::new(HttpEmbedder::new(&agent.embed_base_url, &agent.embed_model, agent.embed_dim)?))
    }
}

fn cmd_infer(cfg: &RunConfig, a: InferArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let context = parse_context(&a.context)?;
    let (_, sampling) = cfg.policy()?;
    let backend: Box<dyn ChatBackend> = match a.backend {
        BackendKind::Stub => {
            let dir = a.fixtures.as_deref().ok_or_else(|| anyhow!("--backend stub needs --fixtures"))?;
            Box::new(StubBackend::from_dir(dir, &a.user)?)
        }
        BackendKind::Http => {
            let s = cfg.agent()?;
            Box::new(HttpChatBackend::new(&s.base_url, &s.model)?)
        }
    };
    let user = match &a.users {
        Some(p) => load_records(p, &taxonomy)?
            .into_iter()
            .find(|r| r.user_id == a.user)
            .ok_or_else(|| anyhow!("user {} not in {}", a.user, p.display()))?,
        None => UserRecord { user_id: a.user.clone(), profile: Default::default(), history: Vec::new() },
    };
    let embedder = make_embedder(cfg)?;
    let transcript = run_pipeline(backend.as_ref(), embedder.as_ref(), &taxonomy, &user, &context, &sampling)?;
    let mut w = create(&a.out)?;
    writeln!(w, "{}", serde_json::to_string(&transcript)?)?;
    w.flush()?;
    let d = &transcript.decision;
    log::info!(
        "decision: {} / {} / {}",
        d.need_id.map_or("-", |n| taxonomy.needs()[n].label.as_str()),
        taxonomy.categories()[d.category_id].label,
        taxonomy.behaviors()[d.behavior_id].label
    );
    Ok(())
}

fn cmd_score(cfg: &RunConfig, a: ScoreArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&a.taxonomy)?;
    let (params, _, _) = cfg.reward()?;
    let embedder = make_embedder(cfg)?;
    let report = match &a.truths {
        Some(t) => {
            let transcripts: Vec<Transcript> = read_jsonl(&a.transcripts)?;
            let truths: Vec<Truths> = read_jsonl(t)?;
            serde_json::to_value(score_transcripts(&transcripts, &truths, &params, &taxonomy, embedder.as_ref(), a.step)?)?
        }
        None => {
            let lines: Vec<OutputLine> = read_jsonl(&a.transcripts)?;
            let mut rows = Vec::with_capacity(lines.len());
            for l in &lines {
                rows.push(score_output(l, &params, &taxonomy, embedder.as_ref())?.0);
            }
            let mean_total = (!rows.is_empty()).then(|| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64);
            serde_json::json!({ "rows": rows, "mean_total": mean_total })
        }
    };
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => print_json(&report)?,
    }
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let stats: DatasetStats = match (&a.data, &a.counts) {
        (Some(d), None) => {
            let taxonomy = load_taxonomy(a.taxonomy.as_deref().expect("clap enforces --taxonomy"))?;
            dataset_stats(&load_records(d, &taxonomy)?, &taxonomy)?
        }
        (None, Some(c)) => {
            let n: Vec<usize> = c
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| anyhow!("--counts: expected \"users,categories,interactions\""))?;
            let [u, k, i] = n[..] else { bail!("--counts: expected three numbers") };
            DatasetStats::from_counts(u, k, i)?
        }
        _ => bail!("stats needs --data or --counts"),
    };
    match &a.out {
        Some(p) => write_json(p, &stats)?,
        None => print_json(&stats)?,
    }
    Ok(())
}
