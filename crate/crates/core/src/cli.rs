//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data or parse
//! failure, 3 numeric failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dsp::{load_corpus, load_wav, read_manifest, resample, synth_corpus, LogMelFrontEnd, SynthConfig};
use crate::error::{MartError, Result};
use crate::eval::{
    clique_labels, embed, linear_probe, metric_line, retrieval_eval, tag_matrix, EmbeddingSet, ProbeConfig,
    ProbeSplit,
};
use crate::hac::build_tree;
use crate::loss::Ablation;
use crate::selftest::run_selftest;
use crate::train::{full_model_gradcheck, load_checkpoint, pretrain, GradcheckOptions, TrainConfig, CHECKPOINT_FILE};

#[derive(Parser, Debug)]
#[command(name = "mart", version, about = "Hierarchical contrastive audio representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the spans of a hierarchical crop tree, one node per line.
    Crop(CropArgs),
    /// Write the log-mel matrix of one clip as a text grid.
    Spec(SpecArgs),
    /// Generate the synthetic corpus and its manifest.
    Synth(SynthArgs),
    /// Pretrain on a manifest.
    Pretrain(PretrainArgs),
    /// Embed every manifest track with a checkpoint.
    Embed(EmbedArgs),
    /// Linear-probe tagging metrics for an embeddings file.
    Probe(ProbeArgs),
    /// Retrieval metrics for an embeddings file.
    Retrieve(RetrieveArgs),
    /// Finite-difference check of the full model and loss in 64-bit.
    Gradcheck(GradcheckArgs),
    /// Run the built-in worked examples.
    Selftest,
}

#[derive(Args, Debug)]
struct CropArgs {
    /// Root length in samples.
    #[arg(long)]
    len: usize,
    /// Branching factor.
    #[arg(long)]
    m: usize,
    /// Number of levels.
    #[arg(long)]
    n: usize,
}

#[derive(Args, Debug)]
struct SpecArgs {
    /// WAV file to read.
    #[arg(long)]
    input: PathBuf,
    /// First sample of the clip, after resampling.
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// One past the last sample; defaults to the end of the file.
    #[arg(long)]
    end: Option<usize>,
    #[arg(long, default_value_t = 128)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    mel_bands: usize,
    #[arg(long, default_value_t = 16_000)]
    sample_rate: u32,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory that receives the WAV files and manifest.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    tracks: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 25)]
    cliques: usize,
    #[arg(long, default_value_t = 12.8)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16_000)]
    sample_rate: u32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationArg {
    Full,
    NoHcl,
    NoPwt,
    Neither,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoHcl => Ablation::NoHcl,
            AblationArg::NoPwt => Ablation::NoPwt,
            AblationArg::Neither => Ablation::Neither,
        }
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// `key = value` configuration file; desk defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    /// Continue from the checkpoint in the checkpoint directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    /// Checkpoint file, or a directory holding one.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Seeds the split shuffle and minibatch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Recorded in the metric lines; retrieval itself draws no randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    /// Desk widths, a sample of coordinates per tensor.
    Desk,
    /// Reduced widths, every coordinate.
    Small,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Coordinates per tensor for the desk profile.
    #[arg(long, default_value_t = 4)]
    per_tensor: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn emit(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| MartError::io("<stdout>", e))
}

fn crop(a: &CropArgs, out: &mut dyn Write) -> Result<()> {
    let dump = build_tree(a.len, a.m, a.n)?.dump();
    out.write_all(dump.as_bytes()).map_err(|e| MartError::io("<stdout>", e))
}

fn spec(a: &SpecArgs, out: &mut dyn Write) -> Result<()> {
    let buf = resample(&load_wav(&a.input)?, a.sample_rate)?;
    let end = a.end.unwrap_or(buf.len());
    if a.start >= end || end > buf.len() {
        return Err(MartError::Config(format!(
            "clip [{}, {end}) does not fit a file of {} samples",
            a.start,
            buf.len()
        )));
    }
    let s = LogMelFrontEnd::new(a.sample_rate, a.mel_bands, a.frames).clip(buf.samples(), (a.start, end))?;
    let mut text = String::new();
    for row in s.matrix.chunks(s.frames) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    }
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| MartError::io(p, e)),
        None => out.write_all(text.as_bytes()).map_err(|e| MartError::io("<stdout>", e)),
    }
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let corpus = synth_corpus(&SynthConfig {
        tracks: a.tracks,
        classes: a.classes,
        cliques: a.cliques,
        seconds: a.seconds,
        seed: a.seed,
        sample_rate: a.sample_rate,
        ..Default::default()
    })?;
    let manifest = corpus.write(&a.out)?;
    emit(out, &manifest.display().to_string())
}

fn pretrain_cmd(a: &PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::desk(),
    };
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(d) = &a.checkpoint_dir {
        cfg.checkpoint_dir = Some(d.clone());
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(ab) = a.ablation {
        cfg.ablation = ab.into();
    }
    cfg.validate()?;
    let outcome = pretrain(&cfg, a.resume)?;
    for line in outcome.log.iter().filter(|l| l.contains(" done ")) {
        emit(out, line)?;
    }
    Ok(())
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn embed_cmd(a: &EmbedArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(checkpoint_path(&a.checkpoint))?;
    let corpus = load_corpus(&a.manifest, ck.config.sample_rate)?;
    let ids: Vec<String> = corpus.entries.iter().map(|e| e.path.clone()).collect();
    let set = embed(&ck, &ids, &corpus.audio)?;
    set.write(&a.out)?;
    emit(out, &format!("wrote {} embeddings of dimension {} to {}", set.len(), set.dim(), a.out.display()))
}

fn probe_cmd(a: &ProbeArgs, out: &mut dyn Write) -> Result<()> {
    let set = EmbeddingSet::read(&a.embeddings)?;
    let tags = tag_matrix(&set, &read_manifest(&a.manifest)?)?;
    let split = ProbeSplit::random(set.len(), a.seed)?;
    let cfg = ProbeConfig {
        seed: a.seed,
        max_epochs: a.max_epochs,
        patience: a.patience,
        ..Default::default()
    };
    let r = linear_probe(&set.rows(), &tags, &split, &cfg)?;
    emit(out, &metric_line("roc_auc", r.roc_auc, "test", a.seed))?;
    emit(out, &metric_line("pr_auc", r.pr_auc, "test", a.seed))?;
    emit(out, &metric_line("roc_auc", r.valid_roc_auc, "valid", a.seed))
}

fn retrieve_cmd(a: &RetrieveArgs, out: &mut dyn Write) -> Result<()> {
    let set = EmbeddingSet::read(&a.embeddings)?;
    let cliques = clique_labels(&set, &read_manifest(&a.manifest)?)?;
    let r = retrieval_eval(&set, &cliques)?;
    emit(out, &metric_line("map", r.map, "all", a.seed))?;
    emit(out, &metric_line("p_at_10", r.p_at_10, "all", a.seed))?;
    emit(out, &metric_line("mr1", r.mr1, "all", a.seed))
}

fn gradcheck_cmd(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let mut opts = match a.profile {
        Profile::Desk => GradcheckOptions::desk(a.per_tensor),
        Profile::Small => GradcheckOptions::default(),
    };
    opts.seed = a.seed;
    let r = full_model_gradcheck(&opts)?;
    emit(
        out,
        &format!(
            "checked={} kinks={} max_rel_error={:.3e} tolerance={:.0e} worst_tensor={} worst_index={} passed={}",
            r.checked, r.kinks, r.max_rel_error, opts.check.tolerance, r.worst.0, r.worst.1, r.passed
        ),
    )?;
    if r.passed {
        Ok(())
    } else {
        Err(MartError::Numeric(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            r.max_rel_error, opts.check.tolerance
        )))
    }
}

fn selftest_cmd(out: &mut dyn Write) -> Result<()> {
    let checks = run_selftest();
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        if c.passed {
            emit(out, &format!("ok   {}", c.name))?;
        } else {
            emit(out, &format!("FAIL {}: {}", c.name, c.detail))?;
        }
    }
    emit(out, &format!("{} of {} checks passed", checks.len() - failed, checks.len()))?;
    if failed == 0 {
        Ok(())
    } else {
        Err(MartError::Numeric(format!("{failed} selftest checks failed")))
    }
}

fn dispatch(cmd: &Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Crop(a) => crop(a, out),
        Command::Spec(a) => spec(a, out),
        Command::Synth(a) => synth(a, out),
        Command::Pretrain(a) => pretrain_cmd(a, out),
        Command::Embed(a) => embed_cmd(a, out),
        Command::Probe(a) => probe_cmd(a, out),
        Command::Retrieve(a) => retrieve_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::Selftest => selftest_cmd(out),
    }
}

/// Parses `argv` (program name first), runs the command with output to
/// `out`, and returns the process exit code. Errors go to standard error.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mart: {e}");
            e.exit_code()
        }
    }
}

/// [`run_with`] writing to standard output.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run_with(argv, &mut lock)
}
