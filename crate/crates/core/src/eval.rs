//! Scoring of infilled regions: Top-N accuracy over occluded blocks,
//! single-direction versus ensemble comparison, and human session scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blm::{rotate_coord, Blm, ClassId, MaskRegion, Rotation};
use crate::error::{Error, Result};
use crate::model::BlockDistribution;
use crate::quadro::QuadroParams;
use crate::scalar::Scalar;

/// Images per batched infill pass.
const EVAL_CHUNK: usize = 32;

pub const MODEL_NAMES: [&str; 5] = [
    "gated_pixelcnn",
    "gated_pixelcnn_90",
    "gated_pixelcnn_180",
    "gated_pixelcnn_270",
    "4-directional",
];

/// Correct-in-top-`n` count and number of scored coordinates.
fn top_n_hits<T: Scalar>(dists: &BTreeMap<(usize, usize), BlockDistribution<T>>, truth: &Blm, n: usize) -> Result<usize> {
    let mut hits = 0;
    for (&(r, c), d) in dists {
        if r >= truth.rows() || c >= truth.cols() {
            return Err(Error::CoordMismatch(format!("({r}, {c}) outside the {}x{} truth grid", truth.rows(), truth.cols())));
        }
        let class = truth
            .get(r, c)
            .class()
            .ok_or_else(|| Error::CoordMismatch(format!("truth is Unknown at ({r}, {c})")))?;
        if d.num_classes() != truth.num_classes() {
            return Err(Error::ClassCountMismatch {
                expected: truth.num_classes(),
                found: d.num_classes(),
            });
        }
        if d.in_top_n(class, n) {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Percentage of coordinates whose true class ranks among the `n` most
/// probable; cutoff ties go to the smaller class id.
pub fn top_n_accuracy<T: Scalar>(dists: &BTreeMap<(usize, usize), BlockDistribution<T>>, truth: &Blm, n: usize) -> Result<f64> {
    if n == 0 || n > truth.num_classes() {
        return Err(Error::InvalidConfig(format!("n = {n} must lie in 1..={}", truth.num_classes())));
    }
    if dists.is_empty() {
        return Err(Error::CoordMismatch("no coordinates to score".into()));
    }
    Ok(100.0 * top_n_hits(dists, truth, n)? as f64 / dists.len() as f64)
}

/// Where the occluding rectangle goes on each test image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSpec {
    /// Uniformly random position per image, drawn from the eval seed.
    Random { height: usize, width: usize },
    Fixed(MaskRegion),
}

impl MaskSpec {
    pub fn dims(&self) -> (usize, usize) {
        match *self {
            MaskSpec::Random { height, width } => (height, width),
            MaskSpec::Fixed(r) => (r.height, r.width),
        }
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        let (h, w) = self.dims();
        if h == 0 || w == 0 {
            return Err(Error::InvalidConfig("mask must be at least 1x1".into()));
        }
        let (top, left) = match *self {
            MaskSpec::Random { .. } => (0, 0),
            MaskSpec::Fixed(r) => (r.top, r.left),
        };
        if top + h > rows || left + w > cols {
            return Err(Error::MaskTooLarge {
                mask_rows: top + h,
                mask_cols: left + w,
                rows,
                cols,
            });
        }
        Ok(())
    }

    /// One region per image, deterministic given `seed`.
    pub fn regions(&self, count: usize, rows: usize, cols: usize, seed: u64) -> Result<Vec<MaskRegion>> {
        self.check(rows, cols)?;
        Ok(match *self {
            MaskSpec::Fixed(r) => vec![r; count],
            MaskSpec::Random { height, width } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..count)
                    .map(|_| MaskRegion::new(rng.gen_range(0..=rows - height), rng.gen_range(0..=cols - width), height, width))
                    .collect()
            }
        })
    }

    fn describe(&self) -> String {
        match *self {
            MaskSpec::Random { height, width } => format!("{height}x{width} at random positions"),
            MaskSpec::Fixed(r) => format!("{}x{} at ({}, {})", r.height, r.width, r.top, r.left),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    /// Masked blocks per image.
    pub unknown_blocks: usize,
    pub mask_dims: (usize, usize),
    pub unknown_area_pct: f64,
    pub top5: f64,
    pub top3: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub mask: MaskSpec,
    pub seed: u64,
    pub images: usize,
    pub rows: Vec<EvalRow>,
}

/// Percentage rounded to two decimals.
pub fn area_pct(masked: usize, total: usize) -> f64 {
    (10_000.0 * masked as f64 / total as f64).round() / 100.0
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,unknown_blocks,unknown_area_pct,top5,top3,top1\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.2},{:.2},{:.2},{:.2}",
                r.model, r.unknown_blocks, r.unknown_area_pct, r.top5, r.top3, r.top1
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# dataset {} ({} images), mask {}, seed {}; accuracy pooled over all masked blocks",
            self.dataset,
            self.images,
            self.mask.describe(),
            self.seed
        );
        let header = ["Model", "Unknown blocks", "Unknown area (%)", "Top-5 acc (%)", "Top-3 acc (%)", "Top-1 acc (%)"];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    format!("{}x{}", r.mask_dims.0, r.mask_dims.1),
                    format!("{:.2}", r.unknown_area_pct),
                    format!("{:.2}", r.top5),
                    format!("{:.2}", r.top3),
                    format!("{:.2}", r.top1),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..6)
            .map(|i| cells.iter().map(|c| c[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut line = |fields: [&str; 6]| {
            let mut l = format!("{:<w$}", fields[0], w = widths[0]);
            for i in 1..6 {
                let _ = write!(l, "  {:>w$}", fields[i], w = widths[i]);
            }
            out.push_str(l.trim_end());
            out.push('\n');
        };
        line(header);
        for c in &cells {
            line([&c[0], &c[1], &c[2], &c[3], &c[4], &c[5]].map(|s| s.as_str()));
        }
        out
    }
}

/// Pooled Top-N tallies for one model.
#[derive(Default)]
struct Tally {
    total: usize,
    hits: [usize; 3],
}

impl Tally {
    fn add<T: Scalar>(&mut self, dists: &BTreeMap<(usize, usize), BlockDistribution<T>>, truth: &Blm) -> Result<()> {
        let nc = truth.num_classes();
        for (slot, n) in [5, 3, 1].into_iter().enumerate() {
            self.hits[slot] += top_n_hits(dists, truth, n.min(nc))?;
        }
        self.total += dists.len();
        Ok(())
    }

    fn pct(&self, slot: usize) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.hits[slot] as f64 / self.total as f64
        }
    }
}

/// Occludes every test grid, infills it with each sub-model in its own
/// orientation and with the ensemble, and pools Top-N accuracy per model.
pub fn run_eval<T: Scalar>(quadro: &QuadroParams<T>, testset: &[Blm], mask: MaskSpec, seed: u64, dataset: &str) -> Result<EvalReport> {
    let first = testset.first().ok_or(Error::EmptyDataset)?;
    let (rows, cols) = (first.rows(), first.cols());
    if let Some(b) = testset.iter().find(|b| (b.rows(), b.cols()) != (rows, cols)) {
        return Err(Error::ShapeMismatch(format!("test grids mix {rows}x{cols} and {}x{}", b.rows(), b.cols())));
    }
    if testset.iter().any(|b| !b.is_complete()) {
        return Err(Error::UnknownCellPresent);
    }
    let regions = mask.regions(testset.len(), rows, cols, seed)?;
    let masked: Vec<Blm> = testset.iter().zip(&regions).map(|(b, r)| b.apply_mask(r)).collect::<Result<_>>()?;
    let mut tallies: [Tally; 5] = Default::default();
    for (chunk, truth) in masked.chunks(EVAL_CHUNK).zip(testset.chunks(EVAL_CHUNK)) {
        for rot in Rotation::ALL {
            let rotated: Vec<Blm> = chunk.iter().map(|b| b.rotate(rot)).collect();
            let fills = quadro.sub_model(rot).infill_directional_batch(&rotated)?;
            for (fill, t) in fills.iter().zip(truth) {
                let dists = unrotate_dists(&fill.dists, rows, cols, rot)?;
                tallies[rot.quarter_turns() as usize].add(&dists, t)?;
            }
        }
        for (fill, t) in quadro.ensemble_infill_batch(chunk)?.iter().zip(truth) {
            tallies[4].add(&fill.dists, t)?;
        }
    }
    let (h, w) = mask.dims();
    let rows_out = MODEL_NAMES
        .iter()
        .zip(&tallies)
        .map(|(name, t)| EvalRow {
            model: name.to_string(),
            unknown_blocks: h * w,
            mask_dims: (h, w),
            unknown_area_pct: area_pct(h * w, rows * cols),
            top5: t.pct(0),
            top3: t.pct(1),
            top1: t.pct(2),
        })
        .collect();
    Ok(EvalReport {
        dataset: dataset.to_string(),
        mask,
        seed,
        images: testset.len(),
        rows: rows_out,
    })
}

/// Maps distributions recorded on a grid rotated by `rot` back to the
/// coordinates of the original `rows x cols` grid.
fn unrotate_dists<T: Scalar>(
    dists: &BTreeMap<(usize, usize), BlockDistribution<T>>,
    rows: usize,
    cols: usize,
    rot: Rotation,
) -> Result<BTreeMap<(usize, usize), BlockDistribution<T>>> {
    let (rr, rc) = rot.rotated_dims(rows, cols);
    dists
        .iter()
        .map(|(&(r, c), d)| Ok((rotate_coord(r, c, rr, rc, rot.inverse())?, d.clone())))
        .collect()
}

/// Outcome of one human-versus-model trial.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionScore {
    pub id: String,
    pub user_accuracy: f64,
    pub model_accuracy: f64,
    pub user_correct: BTreeMap<(usize, usize), bool>,
    pub model_correct: BTreeMap<(usize, usize), bool>,
}

/// Scores user labels and a model fill over exactly the masked cells.
pub fn score_session(
    id: &str,
    masked: &Blm,
    truth: &Blm,
    user_labels: &BTreeMap<(usize, usize), ClassId>,
    model_filled: &Blm,
) -> Result<SessionScore> {
    let shape = |b: &Blm| (b.rows(), b.cols(), b.num_classes());
    if shape(masked) != shape(truth) || shape(model_filled) != shape(truth) {
        return Err(Error::ShapeMismatch("session grids must share shape and vocabulary".into()));
    }
    let coords = masked.unknown_coords();
    if coords.is_empty() {
        return Err(Error::CoordMismatch("session has no masked cells".into()));
    }
    let missing: Vec<(usize, usize)> = coords.iter().copied().filter(|c| !user_labels.contains_key(c)).collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteLabels { missing });
    }
    let extra: Vec<(usize, usize)> = user_labels
        .keys()
        .copied()
        .filter(|&(r, c)| r >= masked.rows() || c >= masked.cols() || masked.get(r, c).is_known())
        .collect();
    if !extra.is_empty() {
        return Err(Error::UnexpectedLabels { extra });
    }
    let mut user_correct = BTreeMap::new();
    let mut model_correct = BTreeMap::new();
    for &(r, c) in &coords {
        let t = truth
            .get(r, c)
            .class()
            .ok_or_else(|| Error::CoordMismatch(format!("truth is Unknown at ({r}, {c})")))?;
        user_correct.insert((r, c), user_labels[&(r, c)] == t);
        model_correct.insert((r, c), model_filled.get(r, c).class() == Some(t));
    }
    let pct = |m: &BTreeMap<(usize, usize), bool>| 100.0 * m.values().filter(|&&ok| ok).count() as f64 / m.len() as f64;
    Ok(SessionScore {
        id: id.to_string(),
        user_accuracy: pct(&user_correct),
        model_accuracy: pct(&model_correct),
        user_correct,
        model_correct,
    })
}

/// Mean user and model accuracy over completed sessions.
pub fn session_averages(scores: &[SessionScore]) -> Option<(f64, f64)> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    Some((
        scores.iter().map(|s| s.user_accuracy).sum::<f64>() / n,
        scores.iter().map(|s| s.model_accuracy).sum::<f64>() / n,
    ))
}

/// Per-session rows followed by the average line.
pub fn format_session_table(scores: &[SessionScore]) -> String {
    let id_width = scores.iter().map(|s| s.id.len()).chain(["average".len(), "index".len()]).max().unwrap_or(7);
    let mut out = format!("{:<id_width$}  {:>12}  {:>13}\n", "index", "user's ACC/ %", "model's ACC/ %");
    for s in scores {
        let _ = writeln!(out, "{:<id_width$}  {:>13.2}  {:>14.2}", s.id, s.user_accuracy, s.model_accuracy);
    }
    if let Some((u, m)) = session_averages(scores) {
        let _ = writeln!(out, "{:<id_width$}  {:>13.2}  {:>14.2}", "average", u, m);
    }
    out
}
