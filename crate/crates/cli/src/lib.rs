//! The `rolldiff` command line: dataset preparation, training, sampling and
//! evaluation, all driven by one flat [`RunConfig`].

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use rolldiff_core::chords::{extract_chords, ChordError, ChordSequence};
use rolldiff_core::dataset::{split_songs, DatasetError, Record, SegmentDataset, Split};
use rolldiff_core::diffusion::{sample, stream_rng, train_loop, LoopOutputs, Stream, Trainer, TrainingSet};
use rolldiff_core::eval::{evaluate, load_midi_dir, EvalError};
use rolldiff_core::midi::{parse_midi, write_midi, NoteEvent};
use rolldiff_core::pianoroll::{render_png, segment_song, Pianoroll, RollGeometry};
use rolldiff_core::unet::Denoiser;
use rolldiff_core::ModelError;
use rolldiff_nn::{Checkpoint, CheckpointError, ParamStore, Tensor};
use thiserror::Error;

pub use config::{ConfigError, Preset, RunConfig, KEYS};

/// Checkpoint entry holding the run config as `key = value` text, one byte
/// per element.
pub const CONFIG_ENTRY: &str = "meta.config";
/// Bars per training segment and the hop between segments.
pub const SEGMENT_BARS: usize = 8;
pub const SEGMENT_HOP_BARS: usize = 1;
/// Tempo of written MIDI files.
pub const OUTPUT_BPM: f64 = 120.0;
const PNG_SCALE: usize = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 2 for configuration errors, 3 for bad or missing data, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::OddSpatialDims { .. } => CliError::Config(ConfigError::Invalid(e.to_string())),
            ModelError::EmptyDataset | ModelError::Checkpoint(_) => CliError::Data(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(format!("dataset: {e}"))
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(format!("checkpoint: {e}"))
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(e) => CliError::Other(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

pub fn command() -> Command {
    let mut cmd = Command::new("rolldiff")
        .about("Chord-conditioned pianoroll diffusion")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("preset")
                .long("preset")
                .global(true)
                .value_name("NAME")
                .help("starting values: paper (default) or desk"),
        )
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("config file: TOML if it ends in .toml, key = value lines otherwise"),
        );
    for &(key, help) in KEYS {
        cmd = cmd.arg(Arg::new(key).long(key).global(true).value_name("VALUE").help(help).help_heading("Config"));
    }
    cmd.subcommand(
        Command::new("prepare")
            .about("Segment a directory of MIDI songs into a dataset file")
            .arg(Arg::new("midi_dir").required(true).value_name("MIDI_DIR")),
    )
    .subcommand(
        Command::new("train")
            .about("Train the denoiser on the training split")
            .arg(Arg::new("resume").long("resume").action(ArgAction::SetTrue).help("continue from the checkpoint file")),
    )
    .subcommand(
        Command::new("sample")
            .about("Generate pianorolls for target chords")
            .arg(Arg::new("chords").long("chords").value_name("FILE").help("chord text file").conflicts_with("from_dataset"))
            .arg(
                Arg::new("from_dataset")
                    .long("from-dataset")
                    .value_name("K")
                    .value_parser(clap::value_parser!(usize))
                    .help("use the chords of validation segment K"),
            )
            .arg(
                Arg::new("n")
                    .long("n")
                    .value_name("N")
                    .default_value("1")
                    .value_parser(clap::value_parser!(usize))
                    .help("samples per chord sequence"),
            )
            .arg(Arg::new("out_dir").long("out-dir").value_name("DIR").required(true)),
    )
    .subcommand(
        Command::new("eval")
            .about("Score generated MIDI against a reference set")
            .arg(Arg::new("generated").long("generated").value_name("DIR").required(true))
            .arg(
                Arg::new("reference")
                    .long("reference")
                    .value_name("PATH")
                    .required(true)
                    .help("directory of MIDI segments, or a dataset file (its validation split)"),
            )
            .arg(Arg::new("targets").long("targets").value_name("FILE").help("chord text file the samples were conditioned on"))
            .arg(Arg::new("out_dir").long("out-dir").value_name("DIR").required(true)),
    )
}

/// Applies the optional config file then every config flag given.
fn apply_sources(cfg: &mut RunConfig, m: &ArgMatches) -> Result<(), ConfigError> {
    if let Some(path) = m.get_one::<String>("config") {
        for (k, v) in config::read_config_file(Path::new(path))? {
            cfg.set(&k, &v)?;
        }
    }
    for &(key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(())
}

/// Preset, then config file, then flags.
pub fn resolve_config(m: &ArgMatches) -> Result<RunConfig, ConfigError> {
    let preset = m.get_one::<String>("preset").map_or(Ok(Preset::Paper), |s| s.parse())?;
    let mut cfg = RunConfig::preset(preset);
    apply_sources(&mut cfg, m)?;
    Ok(cfg)
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&m) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(m: &ArgMatches) -> Result<(), CliError> {
    let cfg = resolve_config(m)?;
    match m.subcommand() {
        Some(("prepare", sub)) => {
            cfg.validate()?;
            let dir = PathBuf::from(sub.get_one::<String>("midi_dir").expect("required"));
            let ds = cmd_prepare(&dir, cfg.split_seed)?;
            ds.save(&cfg.dataset)?;
            let train = ds.split(Split::Train).count();
            println!("wrote {} segments to {}", ds.len(), cfg.dataset.display());
            println!("train: {train}");
            println!("val: {}", ds.len() - train);
            Ok(())
        }
        Some(("train", sub)) => {
            cfg.validate()?;
            cmd_train(&cfg, sub.get_flag("resume"))
        }
        Some(("sample", sub)) => {
            let source = match (sub.get_one::<String>("chords"), sub.get_one::<usize>("from_dataset")) {
                (Some(f), _) => ChordSource::File(f.into()),
                (None, Some(&k)) => ChordSource::Dataset(k),
                (None, None) => {
                    return Err(ConfigError::Invalid("sample needs --chords FILE or --from-dataset K".into()).into())
                }
            };
            let n = *sub.get_one::<usize>("n").expect("defaulted");
            let out = PathBuf::from(sub.get_one::<String>("out_dir").expect("required"));
            cmd_sample(m, &cfg, &source, n, &out).map(|_| ())
        }
        Some(("eval", sub)) => {
            let get = |k: &str| sub.get_one::<String>(k).map(PathBuf::from);
            cmd_eval(&get("generated").expect("required"), &get("reference").expect("required"), get("targets").as_deref(), &get("out_dir").expect("required"))
        }
        _ => unreachable!("subcommand is required"),
    }
}

/// Every song of a directory cut into 8-bar windows with a 1-bar hop, each
/// window stored as a full-geometry roll with its chords. Songs are split
/// 90/10 at song level. Unreadable files are skipped with a warning.
pub fn cmd_prepare(dir: &Path, split_seed: u64) -> Result<SegmentDataset, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi")))
        .collect();
    paths.sort();
    let mut songs: Vec<Vec<(Pianoroll, ChordSequence)>> = Vec::new();
    for path in &paths {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        let parsed = match parse_midi(&bytes) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        if !parsed.is_four_four() {
            log::warn!("{}: not in 4/4, segmenting on a 4/4 grid anyway", path.display());
        }
        let mut segs = Vec::new();
        for notes in segment_song(&parsed.notes, SEGMENT_BARS, SEGMENT_HOP_BARS) {
            match Pianoroll::encode(&notes, RollGeometry::FULL) {
                Ok(roll) => {
                    let chords = extract_chords(&roll);
                    segs.push((roll, chords));
                }
                Err(e) => log::warn!("{}: dropping a segment: {e}", path.display()),
            }
        }
        if segs.is_empty() {
            log::warn!("{}: shorter than {SEGMENT_BARS} bars, skipped", path.display());
        } else {
            songs.push(segs);
        }
    }
    if songs.is_empty() {
        return Err(CliError::Data(format!("no valid songs in {}", dir.display())));
    }
    let splits = split_songs(songs.len(), split_seed);
    let records = songs
        .into_iter()
        .zip(splits)
        .flat_map(|(segs, split)| segs.into_iter().map(move |(roll, chords)| Record { roll, chords, split }))
        .collect();
    Ok(SegmentDataset { records })
}

/// File locations stay out of the checkpoint: they belong to the machine, not
/// the model, and would make identical runs in different directories differ.
const PATH_KEYS: [&str; 3] = ["dataset", "checkpoint", "metrics"];

fn config_tensor(cfg: &RunConfig) -> Tensor<f32> {
    let text: String = cfg
        .entries()
        .into_iter()
        .filter(|(k, _)| !PATH_KEYS.contains(k))
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
    Tensor::from_vec(&[bytes.len()], bytes).expect("1-D shape matches its data")
}

/// The config text stored in a checkpoint, if any.
pub fn stored_config(ck: &Checkpoint) -> Option<String> {
    let t = ck.get(CONFIG_ENTRY)?;
    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
    String::from_utf8(bytes).ok()
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let ds = SegmentDataset::load(&cfg.dataset)?;
    let data = TrainingSet::from_records(cfg.geometry, ds.split(Split::Train));
    if data.is_empty() {
        return Err(CliError::Data(format!("{} has no training segments", cfg.dataset.display())));
    }
    let t = &cfg.train;
    println!(
        "lr={} T={} p={} batch={} guidance={} wavelet_weight={} mamba={} wavelet_skips={}",
        t.lr, cfg.diffusion_steps, t.cond_dropout, t.batch_size, t.guidance, t.wavelet_weight, cfg.unet.enable_mamba, cfg.unet.enable_wavelet_skips
    );
    println!("training on {} segments at {}x{}", data.len(), cfg.geometry.pitches, cfg.geometry.frames());
    let mut trainer = Trainer::new(&cfg.unet_config(), cfg.geometry, cfg.schedule()?, cfg.train.clone())?;
    if resume {
        let ck = Checkpoint::load(&cfg.checkpoint)?;
        trainer.restore(&ck)?;
        println!("resumed at step {}", trainer.step);
    }
    let out = LoopOutputs {
        metrics: Some(&cfg.metrics),
        checkpoint: Some(&cfg.checkpoint),
        extra: vec![(CONFIG_ENTRY.to_string(), config_tensor(cfg))],
    };
    let history = train_loop(&mut trainer, &data, &out)?;
    if let Some(last) = history.last() {
        println!("step {} loss {:.5} wavelet {:.3e}", last.step, last.loss_diffusion, last.loss_wavelet);
    }
    println!("checkpoint: {}", cfg.checkpoint.display());
    Ok(())
}

pub enum ChordSource {
    File(PathBuf),
    /// Index into the validation split of the configured dataset.
    Dataset(usize),
}

/// Rebuilds the run config saved in the checkpoint, then reapplies the
/// config file and flags given on this command line.
fn sampling_config(m: &ArgMatches, cfg: &RunConfig, ck: &Checkpoint) -> Result<RunConfig, CliError> {
    let Some(text) = stored_config(ck) else { return Ok(cfg.clone()) };
    let preset = m.get_one::<String>("preset").map_or(Ok(Preset::Paper), |s| s.parse())?;
    let mut merged = RunConfig::preset(preset);
    merged.apply_text(&text, CONFIG_ENTRY)?;
    apply_sources(&mut merged, m)?;
    Ok(merged)
}

/// Writes `sample_XXX.mid` and `sample_XXX.png` for `n` samples and the
/// target chords as `chords.txt`. Returns the written paths.
pub fn cmd_sample(m: &ArgMatches, cfg: &RunConfig, source: &ChordSource, n: usize, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if n == 0 {
        return Err(ConfigError::Invalid("--n must be positive".into()).into());
    }
    let ck = Checkpoint::load(&cfg.checkpoint)?;
    let cfg = sampling_config(m, cfg, &ck)?;
    cfg.validate()?;
    let target = match source {
        ChordSource::File(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            ChordSequence::from_text(&text).map_err(|e: ChordError| CliError::Data(format!("{}: {e}", p.display())))?
        }
        ChordSource::Dataset(k) => {
            let ds = SegmentDataset::load(&cfg.dataset)?;
            let val: Vec<&Record> = ds.split(Split::Val).collect();
            val.get(*k)
                .map(|r| r.chords.clone())
                .ok_or_else(|| CliError::Data(format!("validation split has {} segments, asked for {k}", val.len())))?
        }
    };
    let mut store = ParamStore::<f32>::new();
    let mut init = stream_rng(cfg.train.seed, Stream::Init, 0);
    let model = Denoiser::new(&mut store, &cfg.unet_config(), (cfg.geometry.pitches, cfg.geometry.frames()), &mut init)?;
    ck.load_into(&mut store)?;
    let sched = cfg.schedule()?;
    let mut rng = stream_rng(cfg.train.seed, Stream::Sampling, 0);
    println!("sampling {n} with guidance {} over {} steps", cfg.train.guidance, sched.steps());
    let rolls = sample(&model, &store, &sched, &vec![target.clone(); n], cfg.train.guidance, &mut rng)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut written = Vec::new();
    for (i, roll) in rolls.iter().enumerate() {
        let mid = out_dir.join(format!("sample_{i:03}.mid"));
        fs::write(&mid, write_midi(&roll.decode(), OUTPUT_BPM)).map_err(|e| io_err(&mid, e))?;
        let png = out_dir.join(format!("sample_{i:03}.png"));
        render_png(roll, &png, PNG_SCALE).map_err(|e| CliError::Other(format!("{}: {e}", png.display())))?;
        written.push(mid);
        written.push(png);
    }
    let chords = out_dir.join("chords.txt");
    fs::write(&chords, target.to_text()).map_err(|e| io_err(&chords, e))?;
    written.push(chords);
    println!("wrote {} samples to {}", rolls.len(), out_dir.display());
    Ok(written)
}

/// Reference segments: every MIDI file of a directory, or the decoded
/// validation split of a dataset file.
fn load_reference(path: &Path) -> Result<Vec<Vec<NoteEvent>>, CliError> {
    if path.is_dir() {
        Ok(load_midi_dir(path)?.into_iter().map(|(_, n)| n).collect())
    } else {
        let ds = SegmentDataset::load(path)?;
        Ok(ds.split(Split::Val).map(|r| r.roll.decode()).collect())
    }
}

pub fn cmd_eval(generated: &Path, reference: &Path, targets: Option<&Path>, out_dir: &Path) -> Result<(), CliError> {
    let gen: Vec<Vec<NoteEvent>> = load_midi_dir(generated)?.into_iter().map(|(_, n)| n).collect();
    let refs = load_reference(reference)?;
    let targets = match targets {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let seq = ChordSequence::from_text(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Some(vec![seq; gen.len()])
        }
        None => None,
    };
    let (report, warnings) = evaluate(&gen, &refs, targets.as_deref())?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let csv = out_dir.join("report.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| io_err(&csv, e))?;
    let table = report.to_table();
    let txt = out_dir.join("report.txt");
    let mut body = table.clone();
    for w in &warnings {
        let _ = writeln!(body, "warning: {w}");
    }
    fs::write(&txt, body).map_err(|e| io_err(&txt, e))?;
    print!("{table}");
    Ok(())
}
