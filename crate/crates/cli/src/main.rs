use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use plcl::checkpoint::Checkpoint;
use plcl::config::RunConfig;
use plcl::corpus::{synthesize_with_speaker, PairExample};
use plcl::dataset::{load_dataset, load_utterance, utterance_to_json, Dataset};
use plcl::enrollment::{checkpoint_digest, EnrollmentStore};
use plcl::eval::{diagonal_band_mean, evaluate, write_grid};
use plcl::model::Mode;
use plcl::numerics::rng;
use plcl::oracles::quick_suite;
use plcl::splits::{generate_splits, inventory, save_splits};
use plcl::train::{fresh_checkpoint, train};
use plcl::{Error, Result};

#[derive(Parser)]
#[command(name = "plcl", version, about = "Custom keyword spotting with per-phoneme contrastive alignment")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/val/test pair files from a config.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a dataset and write the AUC/EER report as CSV.
    Eval(EvalArgs),
    /// Add or replace a named enrollment in a store.
    Enroll(EnrollArgs),
    /// Score a query utterance against enrolled keywords.
    Query(QueryArgs),
    /// Write the similarity and attention matrices of one pair as text grids.
    DumpAttn(DumpArgs),
    /// Run the built-in oracle checks.
    Selftest,
    /// Synthesize an utterance file for a keyword.
    Synth(SynthArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides corpus.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.jsonl and val.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint; its config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_clat: bool,
    #[arg(long)]
    no_claa: bool,
    #[arg(long)]
    no_uat3: bool,
    /// Disables the memory bank and the hard-negative augmentation that draws from it.
    #[arg(long)]
    no_memory_bank: bool,
}

impl TrainArgs {
    fn has_overrides(&self) -> bool {
        self.config.is_some()
            || self.epochs.is_some()
            || self.seed.is_some()
            || self.no_clat
            || self.no_claa
            || self.no_uat3
            || self.no_memory_bank
    }

    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let t = &mut cfg.train;
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t.use_clat &= !self.no_clat;
        t.use_claa &= !self.no_claa;
        t.use_uat3 &= !self.no_uat3;
        t.use_memory_bank &= !self.no_memory_bank;
        cfg.validate()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Text,
    Audio,
    Both,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Text => Mode::Text,
            ModeArg::Audio => Mode::Audio,
            ModeArg::Both => Mode::Both,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A dataset file (e.g. test.jsonl).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnrollArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    name: String,
    /// Phoneme labels, space separated, e.g. "p3 p17 p5".
    #[arg(long)]
    text: Option<String>,
    /// Utterance JSON file (see `synth`).
    #[arg(long)]
    audio: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    /// Only score this enrollment.
    #[arg(long)]
    name: Option<String>,
    /// Overrides the checkpoint's validation EER threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    keyword: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

/// Writes the normalized config next to an output as `<output>.config.toml`.
fn echo_config(output: &Path, cfg: &RunConfig) -> Result<()> {
    let mut name = output.as_os_str().to_owned();
    name.push(".config.toml");
    write(Path::new(&name), &cfg.to_toml())
}

fn required(flag: Option<PathBuf>, fallback: &Option<String>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Usage(format!("{what} not given and not set in the config")))
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok((Checkpoint::from_bytes(&bytes)?, checkpoint_digest(&bytes)))
}

fn class_counts(ds: &Dataset) -> String {
    let (mut pos, mut easy, mut hard) = (0, 0, 0);
    for p in &ds.pairs {
        match (p.is_positive(), p.difficulty) {
            (true, _) => pos += 1,
            (false, Some(plcl::corpus::Difficulty::Hard)) => hard += 1,
            (false, _) => easy += 1,
        }
    }
    format!("pairs={} positive={pos} easy={easy} hard={hard}", ds.pairs.len())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.corpus.seed = s;
    }
    cfg.validate()?;
    let out = required(a.out, &cfg.paths.data_dir, "--out")?;
    let splits = generate_splits(&cfg)?;
    save_splits(&out, &splits, &cfg)?;
    for ((name, ds), kws) in splits.datasets().into_iter().zip(&splits.split_keywords) {
        println!("{name} {} keywords={}", class_counts(ds), kws.len());
    }
    println!("inventory {}", splits.train.inventory.checksum());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut ck = match &a.resume {
        Some(path) => {
            if a.has_overrides() {
                return Err(Error::Usage("--resume takes its config from the checkpoint; drop the config flags".into()));
            }
            Checkpoint::load(path)?
        }
        None => {
            let mut cfg = load_config(a.config.as_deref())?;
            a.apply(&mut cfg)?;
            fresh_checkpoint(&cfg, "")?
        }
    };
    let cfg = ck.model.cfg.clone();
    let data = required(a.data, &cfg.paths.data_dir, "--data")?;
    let out = required(a.out, &cfg.paths.checkpoint, "--out")?;
    let log_path = a.log.or_else(|| cfg.paths.log.as_ref().map(PathBuf::from));
    let train_ds = load_dataset(&data.join("train.jsonl"))?;
    let val_ds = load_dataset(&data.join("val.jsonl"))?;
    if a.resume.is_none() {
        ck.inventory_checksum = train_ds.inventory.checksum();
    }
    let mut log = match &log_path {
        Some(p) => {
            let f = if a.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(p)
            } else {
                File::create(p)
            };
            Some(f.map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?)
        }
        None => None,
    };
    let mut log_err = None;
    let result = train(&mut ck, &train_ds, &val_ds, a.stop_after, |rec| {
        let line = rec.log_line();
        println!("{line}");
        if let Some(f) = log.as_mut() {
            if let Err(e) = writeln!(f, "{line}") {
                log_err.get_or_insert(e);
            }
        }
    });
    if let (Some(e), Some(p)) = (log_err, &log_path) {
        return Err(Error::Io {
            path: p.clone(),
            source: e,
        });
    }
    result?;
    ck.save(&out)?;
    echo_config(&out, &cfg)?;
    for m in Mode::ALL {
        match ck.thresholds.get(m) {
            Some(t) => eprintln!("threshold {}={t:.6}", m.name()),
            None => eprintln!("threshold {}=absent", m.name()),
        }
    }
    eprintln!("wrote {} after epoch {}", out.display(), ck.epoch);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (ck, _) = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    ck.check_inventory(&ds.inventory.checksum())?;
    let mode = Mode::from(a.mode);
    let csv = evaluate(&ck.model, &ds.pairs, mode)?.to_csv();
    match &a.out {
        Some(p) => {
            write(p, &csv)?;
            echo_config(p, &ck.model.cfg)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_enroll(a: EnrollArgs) -> Result<()> {
    if a.text.is_none() && a.audio.is_none() {
        return Err(Error::Usage("enroll needs --text, --audio, or both".into()));
    }
    let (ck, digest) = load_checkpoint(&a.checkpoint)?;
    let inv = inventory(&ck.model.cfg)?;
    ck.check_inventory(&inv.checksum())?;
    let text = a.text.as_deref().map(|t| inv.parse_keyword(t)).transpose()?;
    let audio = a.audio.as_deref().map(load_utterance).transpose()?;
    if let Some(u) = &audio {
        if u.frames().cols() != inv.dim() {
            return Err(Error::Compatibility(format!(
                "audio has {} features per frame, the model expects {}",
                u.frames().cols(),
                inv.dim()
            )));
        }
    }
    let e = ck.model.enroll(text.as_deref(), audio.as_ref())?;
    let mut store = EnrollmentStore::open_or_new(&a.store, &digest)?;
    store.insert(&a.name, &e)?;
    store.save(&a.store)?;
    println!(
        "enrolled {} mode={} entries={}",
        a.name,
        e.mode().expect("checked above").name(),
        store.len()
    );
    Ok(())
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let (ck, digest) = load_checkpoint(&a.checkpoint)?;
    if !a.store.exists() {
        return Err(Error::Usage(format!("no enrollment store at {}; run enroll first", a.store.display())));
    }
    let store = EnrollmentStore::load(&a.store)?;
    store.check_checkpoint(&digest)?;
    if store.is_empty() {
        return Err(Error::Usage("enrollment store is empty".into()));
    }
    let query = load_utterance(&a.audio)?;
    let names: Vec<String> = match &a.name {
        Some(n) => vec![n.clone()],
        None => store.names().map(String::from).collect(),
    };
    for name in names {
        let e = store.get(&name)?;
        let mode = e.mode().expect("stored enrollments are non-empty");
        eprintln!(
            "{name}: {} path",
            match mode {
                Mode::Both => "fusion (text + audio)",
                Mode::Text => "text",
                Mode::Audio => "audio",
            }
        );
        let score = ck.model.infer_enrolled(&query, &e)?.score;
        let threshold = a.threshold.or(ck.thresholds.get(mode)).unwrap_or(0.5);
        println!(
            "name={name} mode={} score={score:.6} threshold={threshold:.6} decision={}",
            mode.name(),
            if score >= threshold { "ACCEPT" } else { "REJECT" }
        );
    }
    Ok(())
}

fn cmd_dump(a: DumpArgs) -> Result<()> {
    let (ck, _) = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    ck.check_inventory(&ds.inventory.checksum())?;
    let pair: &PairExample = ds
        .pairs
        .get(a.index)
        .ok_or_else(|| Error::Usage(format!("pair {} out of range ({} pairs)", a.index, ds.pairs.len())))?;
    let inf = ck
        .model
        .infer_detail(&pair.query, pair.enroll_text.as_deref(), pair.enroll_audio.as_ref())?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let id = format!("pair{}", a.index);
    let grids = [
        ("text", "m_at", &inf.m_at),
        ("text", "attention", &inf.text_attention),
        ("audio", "m_aa", &inf.m_aa),
        ("audio", "attention", &inf.audio_attention),
    ];
    for (head, matrix, t) in grids {
        let Some(t) = t else { continue };
        let path = a.out.join(format!("{id}_{head}_{matrix}.txt"));
        write(&path, &write_grid(&id, head, matrix, t))?;
        println!("{} {}x{}", path.display(), t.rows(), t.cols());
    }
    if let Some(m) = &inf.m_at {
        let text_rows = m.rows() - inf.injected;
        let own = plcl::numerics::Tensor::new(text_rows, m.cols(), m.data()[..text_rows * m.cols()].to_vec())?;
        println!("label={} injected={} band_mean={:.6}", if pair.is_positive() { "positive" } else { "negative" }, inf.injected, diagonal_band_mean(&own, 0.15));
    }
    println!("score={:.6}", inf.score);
    Ok(())
}

fn cmd_selftest() -> Result<bool> {
    let checks = quick_suite()?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{} checks, {failed} failed", checks.len());
    Ok(failed == 0)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let inv = inventory(&cfg)?;
    let ids = inv.parse_keyword(&a.keyword)?;
    let u = synthesize_with_speaker(&inv, &ids, &cfg.synth(), rng::derive(a.seed, &[rng::tag("cli-synth")]))?;
    write(&a.out, &utterance_to_json(&u))?;
    println!("{} frames={} phonemes={}", a.out.display(), u.num_frames(), ids.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Enroll(a) => cmd_enroll(a),
        Cmd::Query(a) => cmd_query(a),
        Cmd::DumpAttn(a) => cmd_dump(a),
        Cmd::Selftest => match cmd_selftest() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Cmd::Synth(a) => cmd_synth(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
