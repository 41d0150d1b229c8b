//! `comptrack`: data generation, training, tracking, evaluation, benchmarks and ablations.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use comptrack_core::bev::write_pgm;
use comptrack_core::error::{ConfigError, DataError, Error};
use comptrack_core::experiment::{
    evaluate, evaluate_tracks, run_ablation, stage_costs, uncompressed_twin, zero_offset_baseline, Dataset, StageCost,
    ABLATION_HEADER,
};
use comptrack_core::scene::{
    generate_sequence, list_sequence_dirs, read_boxes_csv, read_sequence_dir, write_boxes_csv, write_sequence_dir,
    Sequence,
};
use comptrack_core::tracker::{infer_sequence, train, Model};
use comptrack_core::{Config, ParamSet};

#[derive(Parser)]
#[command(name = "comptrack", version, about = "Foreground filtering and rank-guided token compression for 3D single-object tracking")]
struct Cli {
    /// Configuration file (`key = value` lines). Defaults to the desk-scale benchmark setting.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic sequences as `.bin` frames plus `gt.csv`.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Track one sequence and write predicted boxes.
    Track(TrackArgs),
    /// Score a checkpoint or prediction files against ground truth.
    Eval(EvalArgs),
    /// Per-stage MACs and wall time, compressed against uncompressed.
    Bench(BenchArgs),
    /// Train and evaluate the fusion × threshold × baseline matrix.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Seed of the first sequence; sequence `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of sequence folders; generated from the configuration when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "model.ctk")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One sequence folder.
    #[arg(long)]
    seq: PathBuf,
    #[arg(long, default_value = "pred.csv")]
    out: PathBuf,
    /// Write one PGM heatmap per tracked frame into this directory.
    #[arg(long)]
    dump_heatmaps: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of sequence folders with ground truth.
    #[arg(long)]
    data: PathBuf,
    /// Track with this checkpoint.
    #[arg(long, conflicts_with = "pred")]
    checkpoint: Option<PathBuf>,
    /// Directory with one `<sequence>.csv` of predicted boxes per sequence folder.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value = "report.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Uses freshly initialized weights when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Generated test split of the configuration when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "bench.json")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| DataError::io(path, e).into()
}

fn load_config(path: Option<&Path>) -> Result<Config, Error> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            Ok(Config::apply_str(Config::benchmark(), &text)?)
        }
        None => Ok(Config::benchmark()),
    }
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn load_model(checkpoint: &Path, fallback: &Config) -> Result<Model, Error> {
    let conf = sidecar(checkpoint, ".conf");
    let cfg = if conf.exists() {
        Config::apply_str(Config::benchmark(), &fs::read_to_string(&conf).map_err(io_err(&conf))?)?
    } else {
        fallback.clone()
    };
    Model::from_params(cfg.model, ParamSet::load(checkpoint)?)
}

fn read_split(dir: &Path, cfg: &Config) -> Result<(Vec<String>, Vec<Sequence>), Error> {
    let dirs = list_sequence_dirs(dir)?;
    if dirs.is_empty() {
        return Err(DataError::Invalid(format!("{}: no sequence folders", dir.display())).into());
    }
    let names = dirs
        .iter()
        .map(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let seqs = dirs
        .iter()
        .map(|d| read_sequence_dir(d, cfg.model.class))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((names, seqs))
}

fn generated(cfg: &Config, seeds: std::ops::Range<u64>) -> Result<Vec<Sequence>, Error> {
    seeds
        .map(|s| generate_sequence(&cfg.data.scene(s, cfg.model.class)).map_err(Error::from))
        .collect()
}

fn cmd_gen(cfg: &Config, a: &GenArgs) -> Result<(), Error> {
    let mut cfg = cfg.clone();
    if let Some(f) = a.frames {
        cfg.data.frames = f;
    }
    cfg.data.validate()?;
    for i in 0..a.n as u64 {
        let seed = a.seed + i;
        let seq = generate_sequence(&cfg.data.scene(seed, cfg.model.class))?;
        write_sequence_dir(&a.out.join(format!("seq_{seed:06}")), &seq)?;
    }
    Ok(())
}

fn cmd_train(cfg: &Config, a: &TrainArgs) -> Result<(), Error> {
    let mut cfg = cfg.clone();
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let data = match &a.data {
        Some(d) => read_split(d, &cfg)?.1,
        None => generated(&cfg, cfg.data.train_seeds())?,
    };
    let mut model = Model::new(cfg.model.clone())?;
    let log_path = sidecar(&a.out, ".log");
    let timing_path = sidecar(&a.out, ".timing.log");
    let mut log = String::from("epoch,lr,loss,pred,track,mean_K,mean_N\n");
    let mut timing = String::from("epoch,seconds\n");
    train(&mut model, &data, &cfg.train, |l, _| {
        log.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            l.epoch, l.lr, l.loss, l.pred, l.track, l.mean_k, l.mean_n
        ));
        timing.push_str(&format!("{},{:.3}\n", l.epoch, l.seconds));
        eprintln!("epoch {} loss {:.5} K {:.2} N {:.1} ({:.1}s)", l.epoch, l.loss, l.mean_k, l.mean_n, l.seconds);
    })?;
    model.params.save(&a.out)?;
    fs::write(sidecar(&a.out, ".conf"), cfg.to_text()).map_err(io_err(&a.out))?;
    fs::write(&log_path, log).map_err(io_err(&log_path))?;
    fs::write(&timing_path, timing).map_err(io_err(&timing_path))?;
    Ok(())
}

fn cmd_track(cfg: &Config, a: &TrackArgs) -> Result<(), Error> {
    let model = load_model(&a.checkpoint, cfg)?;
    let seq = read_sequence_dir(&a.seq, model.config.class)?;
    let result = infer_sequence(&model, &seq, a.dump_heatmaps.is_some())?;
    let rows: Vec<_> = result.boxes.iter().copied().enumerate().map(|(i, b)| (i + 1, b)).collect();
    write_boxes_csv(&a.out, &rows)?;
    if let Some(dir) = &a.dump_heatmaps {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let g = model.config.geometry();
        for (i, f) in result.frames.iter().enumerate() {
            if let Some(h) = &f.heatmap {
                write_pgm(&dir.join(format!("heatmap_{:06}.pgm", i + 1)), &h.values, g.h, g.w)?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SummaryLine {
    success: f64,
    precision: f64,
    #[serde(rename = "mean_K")]
    mean_k: Option<f64>,
    #[serde(rename = "mean_N")]
    mean_n: Option<f64>,
    entropy_before_sfp: Option<f64>,
    entropy_after_sfp: Option<f64>,
    zero_offset_success: f64,
    sequences: usize,
    frames: usize,
}

#[derive(Serialize)]
struct SequenceLine<'a> {
    sequence: &'a str,
    success: f64,
    precision: f64,
    #[serde(rename = "mean_K")]
    mean_k: Option<f64>,
    #[serde(rename = "mean_N")]
    mean_n: Option<f64>,
}

fn json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("plain structs serialize")
}

fn cmd_eval(cfg: &Config, a: &EvalArgs) -> Result<(), Error> {
    let (names, seqs) = read_split(&a.data, cfg)?;
    let baseline = zero_offset_baseline(&seqs)?;
    let mut out = String::new();
    match (&a.checkpoint, &a.pred) {
        (Some(ckpt), None) => {
            let model = load_model(ckpt, cfg)?;
            let s = evaluate(&model, &seqs)?;
            out.push_str(&json(&SummaryLine {
                success: s.report.success,
                precision: s.report.precision,
                mean_k: Some(s.mean_k),
                mean_n: Some(s.mean_n),
                entropy_before_sfp: Some(s.entropy_before),
                entropy_after_sfp: Some(s.entropy_after),
                zero_offset_success: baseline.success,
                sequences: seqs.len(),
                frames: s.report.frames.len(),
            }));
            out.push('\n');
            for (name, p) in names.iter().zip(&s.per_sequence) {
                out.push_str(&json(&SequenceLine {
                    sequence: name,
                    success: p.success,
                    precision: p.precision,
                    mean_k: Some(p.mean_k),
                    mean_n: Some(p.mean_n),
                }));
                out.push('\n');
            }
        }
        (None, Some(pred_dir)) => {
            let mut tracks = Vec::with_capacity(seqs.len());
            for (name, seq) in names.iter().zip(&seqs) {
                let path = pred_dir.join(format!("{name}.csv"));
                let rows = read_boxes_csv(&path)?;
                if rows.len() + 1 != seq.gt_boxes.len() || rows.iter().enumerate().any(|(i, (idx, _))| *idx != i + 1) {
                    return Err(DataError::format(&path, "expected one row per frame 1..T-1").into());
                }
                tracks.push(rows.into_iter().map(|(_, b)| b).collect::<Vec<_>>());
            }
            let report = evaluate_tracks(&tracks, &seqs)?;
            out.push_str(&json(&SummaryLine {
                success: report.success,
                precision: report.precision,
                mean_k: None,
                mean_n: None,
                entropy_before_sfp: None,
                entropy_after_sfp: None,
                zero_offset_success: baseline.success,
                sequences: seqs.len(),
                frames: report.frames.len(),
            }));
            out.push('\n');
            for ((name, t), seq) in names.iter().zip(&tracks).zip(&seqs) {
                let r = evaluate_tracks(std::slice::from_ref(t), std::slice::from_ref(seq))?;
                out.push_str(&json(&SequenceLine {
                    sequence: name,
                    success: r.success,
                    precision: r.precision,
                    mean_k: None,
                    mean_n: None,
                }));
                out.push('\n');
            }
        }
        _ => {
            return Err(ConfigError::Inconsistent("eval needs exactly one of --checkpoint or --pred".into()).into());
        }
    }
    fs::write(&a.out, out).map_err(io_err(&a.out))?;
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    compressed: StageCostJson,
    uncompressed: StageCostJson,
    mac_ratio: f64,
    time_ratio: f64,
}

#[derive(Serialize)]
struct StageCostJson {
    variant: String,
    frames: usize,
    #[serde(rename = "mean_K")]
    mean_k: f64,
    #[serde(rename = "mean_N")]
    mean_n: f64,
    backbone_macs: f64,
    compression_macs: f64,
    downstream_macs: f64,
    cross_attention_macs: f64,
    attention_head_macs: f64,
    backbone_ms: f64,
    routing_ms: f64,
    compression_ms: f64,
    downstream_ms: f64,
    attention_head_ms: f64,
}

impl From<&StageCost> for StageCostJson {
    fn from(c: &StageCost) -> Self {
        Self {
            variant: c.variant.clone(),
            frames: c.frames,
            mean_k: c.mean_k,
            mean_n: c.mean_n,
            backbone_macs: c.backbone_macs,
            compression_macs: c.compression_macs,
            downstream_macs: c.downstream_macs,
            cross_attention_macs: c.cross_attention_macs,
            attention_head_macs: c.attention_head_macs(),
            backbone_ms: c.backbone_ms,
            routing_ms: c.routing_ms,
            compression_ms: c.compression_ms,
            downstream_ms: c.downstream_ms,
            attention_head_ms: c.attention_head_ms(),
        }
    }
}

fn cmd_bench(cfg: &Config, a: &BenchArgs) -> Result<(), Error> {
    let model = match &a.checkpoint {
        Some(p) => load_model(p, cfg)?,
        None => Model::new(cfg.model.clone())?,
    };
    let seqs = match &a.data {
        Some(d) => read_split(d, cfg)?.1,
        None => generated(cfg, cfg.data.test_seeds())?,
    };
    let compressed = stage_costs(&model, &seqs)?;
    let uncompressed = stage_costs(&uncompressed_twin(&model), &seqs)?;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::NAN };
    let report = BenchReport {
        mac_ratio: ratio(uncompressed.attention_head_macs(), compressed.attention_head_macs()),
        time_ratio: ratio(uncompressed.attention_head_ms(), compressed.attention_head_ms()),
        compressed: (&compressed).into(),
        uncompressed: (&uncompressed).into(),
    };
    let text = serde_json::to_string_pretty(&report).expect("plain structs serialize");
    fs::write(&a.out, text + "\n").map_err(io_err(&a.out))?;
    Ok(())
}

fn cmd_ablate(cfg: &Config, a: &AblateArgs) -> Result<(), Error> {
    cfg.validate()?;
    let data = Dataset {
        train: match &a.train_data {
            Some(d) => read_split(d, cfg)?.1,
            None => generated(cfg, cfg.data.train_seeds())?,
        },
        test: match &a.test_data {
            Some(d) => read_split(d, cfg)?.1,
            None => generated(cfg, cfg.data.test_seeds())?,
        },
    };
    let mut file = fs::File::create(&a.out).map_err(io_err(&a.out))?;
    writeln!(file, "{ABLATION_HEADER}").map_err(io_err(&a.out))?;
    let mut write_err = None;
    run_ablation(cfg, &data, |row| {
        eprintln!("{}", row.to_csv());
        if let Err(e) = writeln!(file, "{}", row.to_csv()).and_then(|_| file.flush()) {
            write_err.get_or_insert(e);
        }
    });
    match write_err {
        Some(e) => Err(DataError::io(&a.out, e).into()),
        None => Ok(()),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Track(a) => cmd_track(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Bench(a) => cmd_bench(&cfg, a),
        Command::Ablate(a) => cmd_ablate(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
