//! Benchmark generation, evaluation, the stage-cost comparison and the ablation sweep.

use std::time::Instant;

use rayon::prelude::*;

use crate::config::Config;
use crate::error::{DataError, Error};
use crate::ibdtc::{cross_attention_macs, Compression, FusionMode};
use crate::metrics::{evaluate_ope, OpeReport};
use crate::scene::{generate_sequence, Box3D, Sequence};
use crate::tracker::{hold_first_box, infer_sequence, train, EpochLog, Model, StageStats};

/// Energy thresholds swept by the ablation.
pub const ABLATION_TAUS: [f64; 3] = [0.95, 0.99, 0.999];

pub struct Dataset {
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

fn generate_range(cfg: &Config, seeds: std::ops::Range<u64>) -> Result<Vec<Sequence>, DataError> {
    seeds
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&s| generate_sequence(&cfg.data.scene(s, cfg.model.class)))
        .collect()
}

pub fn generate_benchmark(cfg: &Config) -> Result<Dataset, Error> {
    cfg.validate()?;
    Ok(Dataset {
        train: generate_range(cfg, cfg.data.train_seeds())?,
        test: generate_range(cfg, cfg.data.test_seeds())?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSummary {
    pub seed: u64,
    pub success: f64,
    pub precision: f64,
    pub mean_k: f64,
    pub mean_n: f64,
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    /// Frames of all sequences pooled.
    pub report: OpeReport,
    pub mean_k: f64,
    pub mean_n: f64,
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub per_sequence: Vec<SequenceSummary>,
    /// Summed over every tracked frame.
    pub stats: StageStats,
    pub frames: usize,
    /// Mean wall time of one tracking step, in milliseconds.
    pub forward_ms: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Tracks every sequence with `model` and scores it against ground truth.
pub fn evaluate(model: &Model, seqs: &[Sequence]) -> Result<EvalSummary, Error> {
    let clock = Instant::now();
    let runs = seqs
        .iter()
        .map(|s| {
            let r = infer_sequence(model, s, false)?;
            let ope = evaluate_ope(&r.boxes, &s.gt_boxes[1..])?;
            Ok((r, ope))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let elapsed = clock.elapsed().as_secs_f64();
    let frames: Vec<_> = runs.iter().flat_map(|(r, _)| r.frames.iter()).collect();
    let mut stats = StageStats::default();
    for f in &frames {
        stats.accumulate(&f.stats);
    }
    let per_sequence = runs
        .iter()
        .zip(seqs)
        .map(|((r, ope), s)| SequenceSummary {
            seed: s.meta.seed,
            success: ope.success,
            precision: ope.precision,
            mean_k: mean(r.frames.iter().map(|f| f.k as f64)),
            mean_n: mean(r.frames.iter().map(|f| f.n_tokens as f64)),
        })
        .collect();
    let reports: Vec<OpeReport> = runs.iter().map(|(_, o)| o.clone()).collect();
    Ok(EvalSummary {
        report: OpeReport::pooled(&reports),
        mean_k: mean(frames.iter().map(|f| f.k as f64)),
        mean_n: mean(frames.iter().map(|f| f.n_tokens as f64)),
        entropy_before: mean(frames.iter().map(|f| f.entropy_before)),
        entropy_after: mean(frames.iter().map(|f| f.entropy_after)),
        per_sequence,
        stats,
        frames: frames.len(),
        forward_ms: if frames.is_empty() { 0.0 } else { 1e3 * elapsed / frames.len() as f64 },
    })
}

/// Scores externally produced tracks; `pred[i]` covers frames `1..` of `seqs[i]`.
pub fn evaluate_tracks(pred: &[Vec<Box3D>], seqs: &[Sequence]) -> Result<OpeReport, DataError> {
    if pred.len() != seqs.len() {
        return Err(DataError::Invalid(format!("{} tracks for {} sequences", pred.len(), seqs.len())));
    }
    let reports = pred
        .iter()
        .zip(seqs)
        .map(|(p, s)| evaluate_ope(p, &s.gt_boxes[1..]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(OpeReport::pooled(&reports))
}

/// The tracker that never moves the first box.
pub fn zero_offset_baseline(seqs: &[Sequence]) -> Result<OpeReport, DataError> {
    let tracks: Vec<Vec<Box3D>> = seqs.iter().map(hold_first_box).collect();
    evaluate_tracks(&tracks, seqs)
}

pub fn train_model(cfg: &Config, data: &[Sequence], on_epoch: impl FnMut(&EpochLog, &Model)) -> Result<(Model, Vec<EpochLog>), Error> {
    let mut model = Model::new(cfg.model.clone())?;
    let logs = train(&mut model, data, &cfg.train, on_epoch)?;
    Ok((model, logs))
}

/// Per-frame cost of one compression setting.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCost {
    pub variant: String,
    pub frames: usize,
    pub mean_k: f64,
    pub mean_n: f64,
    pub backbone_macs: f64,
    pub compression_macs: f64,
    pub downstream_macs: f64,
    /// Closed-form cross-attention count `K·C² + 2·N·C² + 2·K·N·C`, averaged per frame.
    pub cross_attention_macs: f64,
    pub backbone_ms: f64,
    pub routing_ms: f64,
    pub compression_ms: f64,
    pub downstream_ms: f64,
}

impl StageCost {
    /// Token reduction plus the downstream block and head.
    pub fn attention_head_macs(&self) -> f64 {
        self.compression_macs + self.downstream_macs
    }

    pub fn attention_head_ms(&self) -> f64 {
        self.compression_ms + self.downstream_ms
    }
}

/// Runs `model` over every frame of `seqs` and averages stage costs per tracked frame.
pub fn stage_costs(model: &Model, seqs: &[Sequence]) -> Result<StageCost, Error> {
    let c = model.config.channels;
    let mut stats = StageStats::default();
    let (mut frames, mut ksum, mut nsum, mut xmacs) = (0usize, 0.0, 0.0, 0.0);
    for s in seqs {
        let r = infer_sequence(model, s, false)?;
        for f in r.frames.iter().filter(|f| !f.held) {
            stats.accumulate(&f.stats);
            frames += 1;
            ksum += f.k as f64;
            nsum += f.n_tokens as f64;
            if model.config.compression.uses_rank() || model.config.compression == Compression::FixedK {
                xmacs += cross_attention_macs(f.k, f.n_tokens, c) as f64;
            }
        }
    }
    let per = |v: f64| if frames == 0 { 0.0 } else { v / frames as f64 };
    let ms = |d: std::time::Duration| per(d.as_secs_f64() * 1e3);
    Ok(StageCost {
        variant: model.config.compression.name().to_string(),
        frames,
        mean_k: per(ksum),
        mean_n: per(nsum),
        backbone_macs: per(stats.backbone_macs as f64),
        compression_macs: per(stats.compression_macs as f64),
        downstream_macs: per(stats.downstream_macs as f64),
        cross_attention_macs: per(xmacs),
        backbone_ms: ms(stats.backbone_time),
        routing_ms: ms(stats.routing_time),
        compression_ms: ms(stats.compression_time),
        downstream_ms: ms(stats.downstream_time),
    })
}

/// The same weights with the token reduction switched off.
pub fn uncompressed_twin(model: &Model) -> Model {
    let mut m = model.clone();
    m.config.compression = Compression::Uncompressed;
    m
}

/// One ablation cell: a compression setting at an energy threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationCell {
    pub compression: Compression,
    pub tau: f64,
}

/// Fusion modes × thresholds, then each baseline once at the configured threshold.
pub fn ablation_cells(base_tau: f64) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for mode in FusionMode::ALL {
        for tau in ABLATION_TAUS {
            cells.push(AblationCell {
                compression: Compression::Dynamic(mode),
                tau,
            });
        }
    }
    for b in Compression::BASELINES.into_iter().chain([Compression::Uncompressed]) {
        cells.push(AblationCell {
            compression: b,
            tau: base_tau,
        });
    }
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub tau: f64,
    pub mean_k: f64,
    pub success: f64,
    pub precision: f64,
    pub forward_ms: f64,
    /// Set when the cell failed; the numeric fields are then NaN.
    pub error: Option<String>,
}

pub const ABLATION_HEADER: &str = "variant,tau,mean_K,success,precision,forward_ms,error";

impl AblationRow {
    pub fn to_csv(&self) -> String {
        let err = self.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{}",
            self.variant, self.tau, self.mean_k, self.success, self.precision, self.forward_ms, err
        )
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// Trains and evaluates one cell. Failures become rows with an error message.
pub fn run_cell(base: &Config, data: &Dataset, cell: AblationCell) -> AblationRow {
    let mut cfg = base.with_compression(cell.compression);
    cfg.model.tau = cell.tau;
    let outcome = (|| -> Result<EvalSummary, Error> {
        let (model, _) = train_model(&cfg, &data.train, |_, _| {})?;
        evaluate(&model, &data.test)
    })();
    let variant = cell.compression.name().to_string();
    match outcome {
        Ok(s) => AblationRow {
            variant,
            tau: cell.tau,
            mean_k: s.mean_k,
            success: s.report.success,
            precision: s.report.precision,
            forward_ms: s.forward_ms,
            error: None,
        },
        Err(e) => AblationRow {
            variant,
            tau: cell.tau,
            mean_k: f64::NAN,
            success: f64::NAN,
            precision: f64::NAN,
            forward_ms: f64::NAN,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every cell in order; `on_row` sees each row as soon as it is done.
pub fn run_ablation(base: &Config, data: &Dataset, mut on_row: impl FnMut(&AblationRow)) -> Vec<AblationRow> {
    ablation_cells(base.model.tau)
        .into_iter()
        .map(|cell| {
            let row = run_cell(base, data, cell);
            on_row(&row);
            row
        })
        .collect()
}
