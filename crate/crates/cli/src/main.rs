//! `pkrank`: synthesize corpora, build pair manifests, train the pairwise
//! comparator, rank systems and estimate MOS from the command line.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use pkrank::audio::{Grade, SynthConfig, SystemSet};
use pkrank::comparators::{Comparator, ExternalEndpoint, ModelComparator, OracleComparator};
use pkrank::error::{Error, Result};
use pkrank::experiment::{sweep_delta, train_on_pairs, train_on_set, TrainedModel};
use pkrank::features::{FeatureBank, StftConfig};
use pkrank::metrics::{correlation_report, srcc, CorrelationReport};
use pkrank::model::{read_checkpoint, write_checkpoint};
use pkrank::pairs::{build_pairs, split_validation, PairSet, Split};
use pkrank::ranking::{ecs_rank_with_jobs, RankingResult, ScoringStrategy};
use pkrank::seed::SeedSplitter;
use pkrank::sqa::{estimate_set, system_means, write_estimates_csv, SqaStrategy};

use config::{FileConfig, TrainFlags};

#[derive(Parser)]
#[command(name = "pkrank", version, about = "Pairwise ranking of speech-enhancement systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic system set with known quality order.
    Synth(SynthArgs),
    /// Write the cleaned pair manifest of a labeled system set.
    Pairs(PairsArgs),
    /// Train the pairwise comparator and keep the best checkpoints.
    Train(TrainArgs),
    /// Rank systems by round-robin pairwise comparison.
    Rank(RankArgs),
    /// Estimate per-clip MOS with a trained comparator.
    EvalSqa(EvalSqaArgs),
    /// Train once per pair-cleaning threshold and tabulate held-out correlations.
    SweepDelta(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    k: usize,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated SNR grades in dB, optionally `snr:lowpass`; defaults
    /// to `k` grades evenly spaced from 30 to 0 dB.
    #[arg(long, value_delimiter = ',')]
    grades: Option<Vec<String>>,
    /// Clip duration in seconds.
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    /// Standard deviation of simulated rating noise added to each MOS.
    #[arg(long, default_value_t = 0.0)]
    rating_noise: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PairsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// System set directory with mos.csv.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Training pairs from a manifest instead of the system set.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Directory of cached log-mel features, created on demand.
    #[arg(long)]
    feature_cache: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    data: PathBuf,
    /// `oracle`, `model:<checkpoint>` or `extern:<command line>`.
    #[arg(long)]
    comparator: Option<String>,
    /// `bs` or `nbs`.
    #[arg(long)]
    strategy: Option<String>,
    /// Rank the unprocessed noisy inputs as one more system.
    #[arg(long)]
    include_noisy: bool,
    #[arg(long)]
    jobs: Option<usize>,
    /// Seconds to wait for each external comparison.
    #[arg(long)]
    timeout: Option<f64>,
    /// Ranking CSV (`system_id,score,rank`).
    #[arg(long)]
    out_csv: PathBuf,
    /// JSON summary.
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalSqaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `replication` or `noisy`.
    #[arg(long, default_value = "replication")]
    strategy: String,
    /// Per-clip estimates (`system_id,utterance_id,mos_estimate`).
    #[arg(long)]
    out: PathBuf,
    /// System-level summary JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    /// Utterances held out for scoring each model.
    #[arg(long)]
    test_utts: Option<usize>,
    /// `delta,train_pairs,krcc,srcc,lcc,sum`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    feature_cache: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Pairs(a) => pairs(a),
        Command::Train(a) => train(a),
        Command::Rank(a) => rank(a),
        Command::EvalSqa(a) => eval_sqa(a),
        Command::SweepDelta(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn load_labeled(path: &Path) -> Result<SystemSet> {
    let set = SystemSet::load_dir(path)?;
    if !set.has_mos() {
        return Err(Error::Label(format!("{} has no mos.csv", path.display())));
    }
    Ok(set)
}

fn parse_grade(text: &str) -> Result<Grade> {
    let bad = || Error::Config(format!("bad grade '{text}', expected <snr_db> or <snr_db>:<lowpass>"));
    let mut parts = text.trim().split(':');
    let snr_db = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let lowpass = match parts.next() {
        Some(p) => Some(p.parse().map_err(|_| bad())?),
        None => None,
    };
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok(Grade { snr_db, lowpass })
}

fn synth(a: SynthArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let seed = file.resolve_seed(a.seed)?;
    let grades = match &a.grades {
        Some(list) => list.iter().map(|g| parse_grade(g)).collect::<Result<Vec<_>>>()?,
        None => Grade::evenly_spaced(a.k),
    };
    let cfg = SynthConfig {
        duration_s: a.duration,
        rating_noise: a.rating_noise,
        ..SynthConfig::new(grades, a.m, seed)
    };
    let set = cfg.generate(a.k)?;
    set.save_dir(&a.out)?;
    info!(
        "wrote {} systems x {} utterances to {}",
        set.num_systems(),
        set.num_utterances(),
        a.out.display()
    );
    Ok(())
}

fn pairs(a: PairsArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let delta = a.delta.or(file.delta).unwrap_or(pkrank::pairs::DEFAULT_DELTA);
    let set = load_labeled(&a.data)?;
    let pairs = build_pairs(&set, delta)?;
    pairs.write_manifest(&a.out)?;
    info!("{} ordered pairs survive delta = {delta}", pairs.len());
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    config: &'a pkrank::experiment::PipelineConfig,
    train_pairs: usize,
    val_pairs: usize,
    val_utterances: &'a [String],
    log: &'a pkrank::model::TrainLog,
    checkpoints: Vec<CheckpointRow>,
    selected: CheckpointRow,
}

#[derive(Serialize)]
struct CheckpointRow {
    file: String,
    epoch: usize,
    val_loss: f64,
    val_corr_sum: Option<f64>,
}

fn train(a: TrainArgs) -> Result<()> {
    let file = FileConfig::load(a.flags.config.as_deref())?;
    let cfg = a.flags.pipeline(&file)?;
    let set = load_labeled(&a.data)?;
    let stft = StftConfig { n_mels: cfg.train.model.n_mels, ..StftConfig::default() };
    let bank = FeatureBank::extract_set_cached(&set, stft, a.feature_cache.as_deref())?;
    let trained: TrainedModel = match &a.pairs {
        Some(manifest) => {
            let pairs = PairSet::read_manifest(manifest, cfg.delta, Split::Train)?;
            train_on_pairs(&set, &pairs, &bank, &cfg)?
        }
        None => train_on_set(&set, &bank, &cfg)?,
    };

    create_dir(&a.out)?;
    let sums = &trained.selection.sums;
    let mut rows = Vec::new();
    for (i, ck) in trained.outcome.checkpoints.iter().enumerate() {
        let name = format!("ckpt_{:02}.pkck", i + 1);
        write_checkpoint(&ck.params, a.out.join(&name))?;
        rows.push(CheckpointRow {
            file: name,
            epoch: ck.epoch,
            val_loss: ck.val_loss,
            val_corr_sum: sums.get(i).copied().filter(|s| s.is_finite()),
        });
    }
    let best = trained.selected();
    write_checkpoint(&best.params, a.out.join("best.pkck"))?;
    let chosen = &rows[trained.selection.index];
    let selected = CheckpointRow {
        file: chosen.file.clone(),
        epoch: chosen.epoch,
        val_loss: chosen.val_loss,
        val_corr_sum: chosen.val_corr_sum,
    };
    info!("selected {} (epoch {})", selected.file, selected.epoch);
    let report = TrainReport {
        config: &cfg,
        train_pairs: trained.train_pairs.len(),
        val_pairs: trained.val_pairs.len(),
        val_utterances: trained.val_set.utterance_ids(),
        log: &trained.outcome.log,
        checkpoints: rows,
        selected,
    };
    write_json(&report, &a.out.join("train_log.json"))
}

/// Parses `oracle`, `model:<path>` or `extern:<command>`.
fn make_comparator(spec: &str, timeout: Duration) -> Result<Box<dyn Comparator>> {
    if spec == "oracle" {
        return Ok(Box::new(OracleComparator));
    }
    if let Some(path) = spec.strip_prefix("model:") {
        let params = read_checkpoint(path)?;
        let label = format!("model:{}", Path::new(path).file_name().map_or(path.into(), |f| f.to_string_lossy()));
        let stft = StftConfig { n_mels: params.config().n_mels, ..StftConfig::default() };
        return Ok(Box::new(ModelComparator::new(Arc::new(params), stft, label)?));
    }
    if let Some(cmd) = spec.strip_prefix("extern:") {
        return Ok(Box::new(ExternalEndpoint::spawn_command(cmd, timeout)?));
    }
    Err(Error::Config(format!(
        "unknown comparator '{spec}', expected oracle, model:<checkpoint> or extern:<command>"
    )))
}

#[derive(Serialize)]
struct RankReport<'a> {
    comparator: &'a str,
    strategy: ScoringStrategy,
    comparisons_made: u64,
    num_systems: usize,
    num_utterances: usize,
    noisy_included: bool,
    systems: Vec<SystemRow>,
    correlation: Option<CorrelationReport>,
}

#[derive(Serialize)]
struct SystemRow {
    system_id: String,
    score: f64,
    rank: usize,
    mean_mos: Option<f64>,
}

fn rank(a: RankArgs) -> Result<()> {
    let file = FileConfig::load(a.config.as_deref())?;
    let spec = a.comparator.or(file.comparator.clone()).unwrap_or_else(|| "oracle".into());
    let strategy: ScoringStrategy = a
        .strategy
        .or(file.strategy.clone())
        .map_or(Ok(ScoringStrategy::Bs), |s| s.parse())?;
    let jobs = a.jobs.or(file.jobs).unwrap_or(1).max(1);
    let timeout = a.timeout.or(file.timeout_s).unwrap_or(30.0);
    if !(timeout > 0.0) {
        return Err(Error::Config(format!("timeout must be positive, got {timeout}")));
    }

    let mut set = SystemSet::load_dir(&a.data)?;
    if a.include_noisy {
        set = set.include_noisy_system()?;
    }
    let cmp = make_comparator(&spec, Duration::from_secs_f64(timeout))?;
    let ranking = ecs_rank_with_jobs(&set, cmp.as_ref(), strategy, jobs)?;
    drop(cmp);
    ranking.write_csv(&a.out_csv)?;

    let correlation = if set.has_mos() {
        let mos: Vec<(String, f64)> = set.system_ids().iter().cloned().zip(set.mean_mos()?).collect();
        match correlation_report(&ranking, &mos) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation(msg)) => {
                warn!("correlation undefined: {msg}");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    if let Some(r) = &correlation {
        info!("LCC {:.4}  SRCC {:.4}  KRCC {:.4}", r.lcc, r.srcc, r.krcc);
    }
    if let Some(path) = &a.out_json {
        write_json(&rank_report(&ranking, &set, correlation)?, path)?;
    }
    Ok(())
}

fn rank_report<'a>(
    ranking: &'a RankingResult,
    set: &SystemSet,
    correlation: Option<CorrelationReport>,
) -> Result<RankReport<'a>> {
    let means = if set.has_mos() { Some(set.mean_mos()?) } else { None };
    let ranks = ranking.ranks();
    let systems = ranking
        .order
        .iter()
        .map(|&k| SystemRow {
            system_id: ranking.system_ids[k].clone(),
            score: ranking.scores[k],
            rank: ranks[k],
            mean_mos: means.as_ref().map(|m| m[k]),
        })
        .collect();
    Ok(RankReport {
        comparator: &ranking.comparator,
        strategy: ranking.strategy,
        comparisons_made: ranking.comparisons_made,
        num_systems: set.num_systems(),
        num_utterances: set.num_utterances(),
        noisy_included: set.noisy_included(),
        systems,
        correlation,
    })
}

#[derive(Serialize)]
struct SqaSummary {
    strategy: SqaStrategy,
    systems: Vec<SqaSystemRow>,
    srcc: Option<f64>,
}

#[derive(Serialize)]
struct SqaSystemRow {
    system_id: String,
    mean_estimate: f64,
    mean_mos: Option<f64>,
}

fn eval_sqa(a: EvalSqaArgs) -> Result<()> {
    let strategy: SqaStrategy = a.strategy.parse()?;
    let params = read_checkpoint(&a.checkpoint)?;
    let set = SystemSet::load_dir(&a.data)?;
    let stft = StftConfig { n_mels: params.config().n_mels, ..StftConfig::default() };
    let bank = FeatureBank::extract_set(&set, stft)?;
    let estimates = estimate_set(&params, &set, &bank, strategy)?;
    write_estimates_csv(&estimates, &a.out)?;

    let means = system_means(&estimates, set.system_ids())?;
    let mos = if set.has_mos() { Some(set.mean_mos()?) } else { None };
    let corr = match &mos {
        Some(m) => match srcc(&means, m) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    if let Some(r) = corr {
        info!("system-level SRCC {r:.4}");
    }
    if let Some(path) = &a.summary {
        let systems = set
            .system_ids()
            .iter()
            .enumerate()
            .map(|(k, id)| SqaSystemRow {
                system_id: id.clone(),
                mean_estimate: means[k],
                mean_mos: mos.as_ref().map(|m| m[k]),
            })
            .collect();
        write_json(&SqaSummary { strategy, systems, srcc: corr }, path)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let file = FileConfig::load(a.flags.config.as_deref())?;
    let cfg = a.flags.pipeline(&file)?;
    let deltas = a
        .deltas
        .or(file.deltas.clone())
        .unwrap_or_else(|| vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.7]);
    let set = load_labeled(&a.data)?;
    let n_test = a.test_utts.or(file.test_utts).unwrap_or(set.num_utterances() / 3);
    let split_seed = SeedSplitter::new(cfg.train.seed).child_seed("test");
    let (rest, test) = split_validation(&set, n_test, split_seed)?;
    let stft = StftConfig { n_mels: cfg.train.model.n_mels, ..StftConfig::default() };
    let bank = FeatureBank::extract_set_cached(&set, stft, a.feature_cache.as_deref())?;
    let rows = sweep_delta(&rest, &test, &bank, &deltas, &cfg)?;

    let mut out = String::from("delta,train_pairs,krcc,srcc,lcc,sum\n");
    for row in &rows {
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let r = row.report.as_ref();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.delta,
            row.train_pairs,
            cell(r.map(|r| r.krcc)),
            cell(r.map(|r| r.srcc)),
            cell(r.map(|r| r.lcc)),
            cell(r.map(|r| r.sum())),
        ));
    }
    fs::write(&a.out, out).map_err(|e| Error::Io { path: a.out.clone(), source: e })
}
