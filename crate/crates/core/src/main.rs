//! `vidcap`: synthesize datasets, train the captioner, generate captions,
//! and score them.
//!
//! Exit codes: 0 success, 1 input/configuration error, 2 internal error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use vidcap_core::checkpoint::{load_checkpoint, save_checkpoint};
use vidcap_core::data::{
    generate_synthetic_dataset, load_manifest, tokenize, CaptionRecord, DatasetManifest,
    ManifestEntry, Split, SynthSpec,
};
use vidcap_core::error::{Error, Result};
use vidcap_core::evaluation::{evaluate_model, generate_captions};
use vidcap_core::training::{
    pretrain_meaning, train_mixed_phase, train_word_phase, TrainingConfig,
};

#[derive(Parser)]
#[command(name = "vidcap", version, about = "Object-aware video captioning with a metric-learning caption head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (packs, captions, manifest)
    Synth(SynthArgs),
    /// Build manifest.json for a directory of packs + captions.jsonl
    Prepare(PrepareArgs),
    /// Train: word phase, meaning-head pretraining, then the mixed phase
    Train(TrainArgs),
    /// Greedy-decode captions for a split to JSONL
    Generate(GenerateArgs),
    /// Score a checkpoint on a split and write the report
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long, env = "VIDCAP_DATA_ROOT")]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    videos: usize,
    /// Number of latent caption events
    #[arg(long, default_value_t = 5)]
    events: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    d_vis: usize,
    #[arg(long, default_value_t = 0.0)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    test_fraction: f64,
}

#[derive(Args)]
struct PrepareArgs {
    /// Dataset root containing packs/<video_id>/ and captions.jsonl
    #[arg(long, env = "VIDCAP_DATA_ROOT")]
    data: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Phase {
    All,
    Word,
    Pretrain,
    Mixed,
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration (JSON; missing keys take defaults)
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = "VIDCAP_DATA_ROOT")]
    data: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Phase::All)]
    phase: Phase,
    /// Starting checkpoint (required for pretrain/mixed phases)
    #[arg(long)]
    from: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "VIDCAP_DATA_ROOT")]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Output JSONL; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "VIDCAP_DATA_ROOT")]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Report JSON output; the table always prints to stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a CSV next to --out (or print it when --out is absent)
    #[arg(long)]
    csv: bool,
    /// Model label used in the report rows
    #[arg(long, default_value = "model")]
    label: String,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("vidcap: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_videos: args.videos,
        vocab_events: args.events,
        seed: args.seed,
        d_vis: args.d_vis,
        val_fraction: args.val_fraction,
        test_fraction: args.test_fraction,
        ..Default::default()
    };
    let manifest = generate_synthetic_dataset(&args.out, &spec)?;
    println!("wrote {} videos to {}", manifest.entries.len(), args.out.display());
    Ok(())
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if !(0.0..=1.0).contains(&args.train_fraction)
        || !(0.0..=1.0).contains(&args.val_fraction)
        || args.train_fraction + args.val_fraction > 1.0
    {
        return Err(Error::Config("split fractions must be in [0,1] and sum to <= 1".into()));
    }
    let packs_dir = args.data.join("packs");
    let mut video_ids: Vec<String> = Vec::new();
    let dir = fs::read_dir(&packs_dir).map_err(|e| Error::io(&packs_dir, e))?;
    for entry in dir {
        let entry = entry.map_err(|e| Error::io(&packs_dir, e))?;
        if entry.path().join("meta.json").exists() {
            video_ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if video_ids.is_empty() {
        return Err(Error::Input(format!("no feature packs under {}", packs_dir.display())));
    }
    video_ids.sort();

    let raw = load_captions(&args.data.join("captions.jsonl"))?;

    let mut order: Vec<usize> = (0..video_ids.len()).collect();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(args.seed);
    order.shuffle(&mut rng);
    let n_train = (video_ids.len() as f64 * args.train_fraction).round() as usize;
    let n_val = (video_ids.len() as f64 * args.val_fraction).round() as usize;

    let mut entries = Vec::with_capacity(video_ids.len());
    for (rank, &idx) in order.iter().enumerate() {
        let video_id = &video_ids[idx];
        let captions = raw.get(video_id).cloned().unwrap_or_default();
        if captions.is_empty() {
            return Err(Error::Input(format!("video `{video_id}` has no captions")));
        }
        let split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        entries.push(ManifestEntry {
            video_id: video_id.clone(),
            pack: PathBuf::from("packs").join(video_id),
            split,
            captions,
        });
    }
    entries.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let manifest = DatasetManifest { root: args.data.clone(), entries };
    vidcap_core::data::write_manifest(&manifest)?;
    println!("wrote manifest for {} videos", manifest.entries.len());
    Ok(())
}

fn load_captions(path: &Path) -> Result<std::collections::BTreeMap<String, Vec<CaptionRecord>>> {
    use std::io::BufRead;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: std::collections::BTreeMap<String, Vec<CaptionRecord>> = Default::default();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        #[derive(serde::Deserialize)]
        struct Line {
            video_id: String,
            caption: String,
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        let tokens = tokenize(&parsed.caption);
        if tokens.is_empty() {
            return Err(Error::format(path, format!("caption: empty at line {}", lineno + 1)));
        }
        out.entry(parsed.video_id.clone())
            .or_default()
            .push(CaptionRecord { video_id: parsed.video_id, tokens });
    }
    Ok(out)
}

fn read_config(path: &Path, seed_override: Option<u64>) -> Result<TrainingConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut config: TrainingConfig =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = read_config(&args.config, args.seed)?;
    let manifest = load_manifest(&args.data)?;
    let hash = config.hash();
    let load_from = |path: &Option<PathBuf>, phase: &str| {
        let path = path.as_ref().ok_or_else(|| {
            Error::Input(format!("--from checkpoint is required for the {phase} phase"))
        })?;
        load_checkpoint(path, Some(&hash))
    };

    let final_ckpt = match args.phase {
        Phase::Word => train_word_phase(&config, &manifest)?,
        Phase::Pretrain => {
            let start = load_from(&args.from, "pretrain")?;
            pretrain_meaning(&config, &manifest, &start)?
        }
        Phase::Mixed => {
            let start = load_from(&args.from, "mixed")?;
            train_mixed_phase(&config, &manifest, &start)?
        }
        Phase::All => {
            let word = train_word_phase(&config, &manifest)?;
            println!("word phase done (epoch {})", word.epoch);
            let pre = pretrain_meaning(&config, &manifest, &word)?;
            println!("meaning pretraining done (step {})", pre.step);
            train_mixed_phase(&config, &manifest, &pre)?
        }
    };
    save_checkpoint(&args.out, &final_ckpt)?;
    println!(
        "saved checkpoint to {} (epoch {}, step {})",
        args.out.display(),
        final_ckpt.epoch,
        final_ckpt.step
    );
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    let manifest = load_manifest(&args.data)?;
    let captions = generate_captions(&ckpt, &manifest, args.split.into())?;
    let mut lines = String::new();
    for caption in &captions {
        let json = serde_json::to_string(caption)
            .map_err(|e| Error::json(args.out.clone().unwrap_or_default(), e))?;
        lines.push_str(&json);
        lines.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, lines).map_err(|e| Error::io(path, e))?,
        None => print!("{lines}"),
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    let manifest = load_manifest(&args.data)?;
    let report = evaluate_model(&ckpt, &manifest, args.split.into(), &args.label)?;
    print!("{}", report.to_table());
    if let Some(path) = &args.out {
        fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))?;
        if args.csv {
            let csv_path = path.with_extension("csv");
            fs::write(&csv_path, report.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        }
    } else if args.csv {
        print!("{}", report.to_csv());
    }
    Ok(())
}
