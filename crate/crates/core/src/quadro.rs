//! Four-directional ensemble: one model per quarter-turn rotation of the
//! training data, combined per block at inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::blm::{rotate_coord, Blm, Cell, ClassId, Rotation};
use crate::error::{Error, Result};
use crate::model::{BlockDistribution, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::train::{train_in_frame, validate_dataset, TrainConfig};

/// How the four directional distributions are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CombineRule {
    #[default]
    ArithmeticMean,
    /// Normalized geometric mean.
    GeometricMean,
}

/// Combines four distributions of equal length.
pub fn combine_distributions<T: Scalar>(dists: [&BlockDistribution<T>; 4], rule: CombineRule) -> Result<BlockDistribution<T>> {
    let n = dists[0].num_classes();
    if dists.iter().any(|d| d.num_classes() != n) {
        return Err(Error::LengthMismatch(format!(
            "distributions have lengths {:?}",
            dists.map(|d| d.num_classes())
        )));
    }
    let quarter = T::of(0.25);
    let mut probs: Vec<T> = match rule {
        CombineRule::ArithmeticMean => (0..n).map(|i| dists.iter().map(|d| d.probs()[i]).sum::<T>() * quarter).collect(),
        CombineRule::GeometricMean => (0..n)
            .map(|i| (dists.iter().map(|d| d.probs()[i].ln()).sum::<T>() * quarter).exp())
            .collect(),
    };
    let total: T = probs.iter().copied().sum();
    if total > T::zero() {
        for p in &mut probs {
            *p /= total;
        }
    } else {
        // Every class was ruled out by some direction; fall back to uniform.
        probs.fill(T::one() / T::of(n as f64));
    }
    Ok(BlockDistribution::from_softmax(probs))
}

/// Four directional models sharing one configuration; index `k` was trained
/// on data rotated by `k` counterclockwise quarter turns.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadroParams<T> {
    sub_models: [ModelParams<T>; 4],
    combine_rule: CombineRule,
}

/// Ensemble fill with the per-direction distributions kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleInfill<T> {
    pub filled: Blm,
    pub dists: BTreeMap<(usize, usize), BlockDistribution<T>>,
    /// Distribution of each sub-model at every filled coordinate, indexed by
    /// quarter turns.
    pub directional: BTreeMap<(usize, usize), [BlockDistribution<T>; 4]>,
}

#[derive(Debug, Clone)]
pub struct QuadroTrainOutcome<T> {
    pub params: QuadroParams<T>,
    pub loss_curves: [Vec<T>; 4],
}

/// Trains sub-model `k` on the dataset rotated by `k` quarter turns, seeded
/// with `config.seed + k`.
pub fn train_quadro<T: Scalar>(config: &TrainConfig, model_config: ModelConfig, dataset: &[Blm]) -> Result<QuadroTrainOutcome<T>> {
    train_quadro_with_progress(config, model_config, dataset, |_, _, _| {})
}

/// [`train_quadro`] with a callback receiving `(direction, epoch, mean_loss)`.
pub fn train_quadro_with_progress<T: Scalar>(
    config: &TrainConfig,
    model_config: ModelConfig,
    dataset: &[Blm],
    mut on_epoch: impl FnMut(usize, usize, T),
) -> Result<QuadroTrainOutcome<T>> {
    config.validate()?;
    model_config.validate()?;
    validate_dataset(dataset, model_config.num_classes)?;
    let mut models = Vec::with_capacity(4);
    let mut curves = Vec::with_capacity(4);
    for rot in Rotation::ALL {
        let k = rot.quarter_turns() as usize;
        let rotated: Vec<Blm> = dataset.iter().map(|b| b.rotate(rot)).collect();
        let sub_config = TrainConfig {
            seed: config.seed.wrapping_add(k as u64),
            ..*config
        };
        let outcome = train_in_frame(&sub_config, model_config, &rotated, rot, |e, l| on_epoch(k, e, l))?;
        models.push(outcome.params);
        curves.push(outcome.loss_curve);
    }
    let params = QuadroParams::new(models.try_into().map_err(|_| Error::InvalidConfig("four sub-models".into()))?)?;
    let loss_curves = curves.try_into().map_err(|_| Error::InvalidConfig("four loss curves".into()))?;
    Ok(QuadroTrainOutcome { params, loss_curves })
}

impl<T: Scalar> QuadroParams<T> {
    pub fn new(sub_models: [ModelParams<T>; 4]) -> Result<Self> {
        let first = *sub_models[0].config();
        if let Some(other) = sub_models.iter().find(|m| *m.config() != first) {
            return Err(Error::ShapeMismatch(format!(
                "sub-model configurations differ: {first:?} vs {:?}",
                other.config()
            )));
        }
        Ok(Self {
            sub_models,
            combine_rule: CombineRule::ArithmeticMean,
        })
    }

    pub fn with_combine_rule(mut self, rule: CombineRule) -> Self {
        self.combine_rule = rule;
        self
    }

    pub fn combine_rule(&self) -> CombineRule {
        self.combine_rule
    }

    pub fn sub_models(&self) -> &[ModelParams<T>; 4] {
        &self.sub_models
    }

    pub fn sub_model(&self, rot: Rotation) -> &ModelParams<T> {
        &self.sub_models[rot.quarter_turns() as usize]
    }

    pub fn config(&self) -> &ModelConfig {
        self.sub_models[0].config()
    }

    pub fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn check_grids(&self, blms: &[Blm]) -> Result<()> {
        let Some(first) = blms.first() else {
            return Ok(());
        };
        for b in blms {
            if b.num_classes() != self.num_classes() {
                return Err(Error::ClassCountMismatch {
                    expected: self.num_classes(),
                    found: b.num_classes(),
                });
            }
            if (b.rows(), b.cols()) != (first.rows(), first.cols()) {
                return Err(Error::ShapeMismatch("grids in one batch must share a shape".into()));
            }
        }
        Ok(())
    }

    /// Each sub-model's distribution at `targets[i]` of `grids[i]`, queried in
    /// that sub-model's own orientation.
    fn directional_batch(&self, grids: &[&Blm], targets: &[(usize, usize)]) -> Result<Vec<[BlockDistribution<T>; 4]>> {
        let mut per_dir: Vec<Vec<BlockDistribution<T>>> = Vec::with_capacity(4);
        for rot in Rotation::ALL {
            let rotated: Vec<Blm> = grids.iter().map(|g| g.rotate(rot)).collect();
            let refs: Vec<&Blm> = rotated.iter().collect();
            let coords = grids
                .iter()
                .zip(targets)
                .map(|(g, t)| rotate_coord(t.0, t.1, g.rows(), g.cols(), rot))
                .collect::<Result<Vec<_>>>()?;
            per_dir.push(self.sub_model(rot).query_batch(&refs, &coords)?);
        }
        let mut iters: Vec<_> = per_dir.into_iter().map(Vec::into_iter).collect();
        Ok((0..grids.len())
            .map(|_| std::array::from_fn(|k| iters[k].next().expect("one per grid")))
            .collect())
    }

    /// The four directional distributions at `target` given `grid`.
    pub fn directional(&self, grid: &Blm, target: (usize, usize)) -> Result<[BlockDistribution<T>; 4]> {
        self.check_grids(std::slice::from_ref(grid))?;
        Ok(self.directional_batch(&[grid], &[target])?.pop().expect("one query"))
    }

    fn combine(&self, dists: &[BlockDistribution<T>; 4]) -> Result<BlockDistribution<T>> {
        combine_distributions([&dists[0], &dists[1], &dists[2], &dists[3]], self.combine_rule)
    }

    /// Fills Unknown cells in raster order of the original orientation using
    /// the combined distribution of all four directions.
    pub fn ensemble_infill(&self, blm: &Blm) -> Result<EnsembleInfill<T>> {
        Ok(self.ensemble_infill_batch(std::slice::from_ref(blm))?.pop().expect("one grid"))
    }

    /// [`QuadroParams::ensemble_infill`] over equally shaped grids in lockstep.
    pub fn ensemble_infill_batch(&self, blms: &[Blm]) -> Result<Vec<EnsembleInfill<T>>> {
        self.check_grids(blms)?;
        let coords: Vec<Vec<(usize, usize)>> = blms.iter().map(|b| b.unknown_coords()).collect();
        let mut out: Vec<EnsembleInfill<T>> = blms
            .iter()
            .map(|b| EnsembleInfill {
                filled: b.clone(),
                dists: BTreeMap::new(),
                directional: BTreeMap::new(),
            })
            .collect();
        let steps = coords.iter().map(Vec::len).max().unwrap_or(0);
        for step in 0..steps {
            let active: Vec<usize> = (0..blms.len()).filter(|&i| step < coords[i].len()).collect();
            let grids: Vec<&Blm> = active.iter().map(|&i| &out[i].filled).collect();
            let targets: Vec<(usize, usize)> = active.iter().map(|&i| coords[i][step]).collect();
            let directional = self.directional_batch(&grids, &targets)?;
            for ((&i, t), four) in active.iter().zip(targets).zip(directional) {
                let combined = self.combine(&four)?;
                out[i].filled.set(t.0, t.1, Cell::Known(combined.argmax()))?;
                out[i].dists.insert(t, combined);
                out[i].directional.insert(t, four);
            }
        }
        Ok(out)
    }

    /// Probability of `class` at every Unknown cell along the ensemble fill.
    pub fn probability_map(&self, blm: &Blm, class: ClassId) -> Result<ProbabilityMap<T>> {
        if class.0 >= self.num_classes() {
            return Err(Error::ClassCountMismatch {
                expected: self.num_classes(),
                found: class.0 + 1,
            });
        }
        let infill = self.ensemble_infill(blm)?;
        Ok(ProbabilityMap::from_dists(blm.rows(), blm.cols(), &infill.dists, class))
    }

    /// Teacher-forced bits/dim of the combined conditional: at each raster
    /// position of the original orientation, every later cell is Unknown and
    /// every earlier cell carries its true class.
    pub fn ensemble_bits_per_dim(&self, dataset: &[Blm]) -> Result<T> {
        let first = dataset.first().ok_or(Error::EmptyDataset)?;
        self.check_grids(dataset)?;
        if dataset.iter().any(|b| !b.is_complete()) {
            return Err(Error::UnknownCellPresent);
        }
        let (rows, cols) = (first.rows(), first.cols());
        let area = rows * cols;
        let lookup = DirectionalLookup::new(self, dataset)?;
        let mut per_image = vec![T::zero(); dataset.len()];
        for p in 0..area {
            let target = (p / cols, p % cols);
            let four = lookup.at(self, dataset, target)?;
            for (i, dists) in four.iter().enumerate() {
                let truth = dataset[i].get(target.0, target.1).class().expect("complete");
                let combined = self.combine(dists)?;
                per_image[i] -= combined.prob(truth).ln();
            }
        }
        let mean_nats = per_image.iter().map(|&s| s / T::of(area as f64)).sum::<T>() / T::of(dataset.len() as f64);
        Ok(mean_nats / T::of(std::f64::consts::LN_2))
    }

    /// Bits/dim of each sub-model on its own rotation of `dataset`.
    pub fn sub_model_bits_per_dim(&self, dataset: &[Blm]) -> Result<[T; 4]> {
        let mut out = [T::zero(); 4];
        for rot in Rotation::ALL {
            let rotated: Vec<Blm> = dataset.iter().map(|b| b.rotate(rot)).collect();
            out[rot.quarter_turns() as usize] = self.sub_model(rot).nll_bits_per_dim(&rotated)?;
        }
        Ok(out)
    }
}

/// Per-direction strategy for the teacher-forced evaluation. When every cell
/// a sub-model reads before the target is known (or every one is unknown),
/// one full-grid pass serves all positions.
struct DirectionalLookup<T> {
    truth: [Vec<Vec<BlockDistribution<T>>>; 4],
    blank: [Vec<BlockDistribution<T>>; 4],
}

impl<T: Scalar> DirectionalLookup<T> {
    fn new(quadro: &QuadroParams<T>, dataset: &[Blm]) -> Result<Self> {
        let first = &dataset[0];
        let blank = Blm::unknown(first.rows(), first.cols(), first.num_classes())?;
        let mut truth: [Vec<Vec<BlockDistribution<T>>>; 4] = Default::default();
        let mut blanks: [Vec<BlockDistribution<T>>; 4] = Default::default();
        for rot in Rotation::ALL {
            let k = rot.quarter_turns() as usize;
            let model = quadro.sub_model(rot);
            truth[k] = dataset.iter().map(|b| model.conditionals(&b.rotate(rot))).collect::<Result<_>>()?;
            blanks[k] = model.conditionals(&blank.rotate(rot))?;
        }
        Ok(Self { truth, blank: blanks })
    }

    /// Cells of the original grid that direction `rot` reads before `target`.
    fn context(rows: usize, cols: usize, rot: Rotation, target: (usize, usize)) -> impl Iterator<Item = usize> {
        let (_, rc) = rot.rotated_dims(rows, cols);
        let key = move |r: usize, c: usize| {
            let (a, b) = rotate_coord(r, c, rows, cols, rot).expect("in bounds");
            a * rc + b
        };
        let t = key(target.0, target.1);
        (0..rows * cols).filter(move |&p| key(p / cols, p % cols) < t)
    }

    fn at(&self, quadro: &QuadroParams<T>, dataset: &[Blm], target: (usize, usize)) -> Result<Vec<[BlockDistribution<T>; 4]>> {
        let (rows, cols) = (dataset[0].rows(), dataset[0].cols());
        let raster = target.0 * cols + target.1;
        let mut per_dir: Vec<Vec<BlockDistribution<T>>> = Vec::with_capacity(4);
        for rot in Rotation::ALL {
            let k = rot.quarter_turns() as usize;
            let (_, rc) = rot.rotated_dims(rows, cols);
            let (tr, tc) = rotate_coord(target.0, target.1, rows, cols, rot)?;
            let pos = tr * rc + tc;
            let ctx: Vec<usize> = Self::context(rows, cols, rot, target).collect();
            let dists = if ctx.iter().all(|&p| p < raster) {
                self.truth[k].iter().map(|c| c[pos].clone()).collect()
            } else if ctx.iter().all(|&p| p > raster) {
                vec![self.blank[k][pos].clone(); dataset.len()]
            } else {
                let mut out = Vec::with_capacity(dataset.len());
                for chunk in dataset.chunks(64) {
                    let grids: Vec<Blm> = chunk.iter().map(|b| forced_prefix(b, raster).rotate(rot)).collect();
                    let refs: Vec<&Blm> = grids.iter().collect();
                    out.extend(quadro.sub_model(rot).query_batch(&refs, &vec![(tr, tc); refs.len()])?);
                }
                out
            };
            per_dir.push(dists);
        }
        let mut iters: Vec<_> = per_dir.into_iter().map(Vec::into_iter).collect();
        Ok((0..dataset.len())
            .map(|_| std::array::from_fn(|k| iters[k].next().expect("one per grid")))
            .collect())
    }
}

/// `blm` with every cell at raster position `>= from` set Unknown.
fn forced_prefix(blm: &Blm, from: usize) -> Blm {
    let cells = blm
        .cells()
        .iter()
        .enumerate()
        .map(|(p, &c)| if p < from { c } else { Cell::Unknown })
        .collect();
    Blm::new(blm.rows(), blm.cols(), blm.num_classes(), cells).expect("same shape")
}

/// Probability of one class over a grid, defined only on filled cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap<T> {
    pub class_id: ClassId,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Option<T>>,
}

impl<T: Scalar> ProbabilityMap<T> {
    pub fn from_dists(rows: usize, cols: usize, dists: &BTreeMap<(usize, usize), BlockDistribution<T>>, class: ClassId) -> Self {
        let mut values = vec![None; rows * cols];
        for (&(r, c), d) in dists {
            values[r * cols + c] = Some(d.prob(class));
        }
        Self {
            class_id: class,
            rows,
            cols,
            values,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<T> {
        self.values[row * self.cols + col]
    }

    /// `row,col,prob` lines for the defined cells in raster order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,prob\n");
        for (p, v) in self.values.iter().enumerate() {
            if let Some(v) = v {
                let _ = writeln!(out, "{},{},{}", p / self.cols, p % self.cols, format_sig(v.as_f64(), 9));
            }
        }
        out
    }

    /// Binary grayscale image, one pixel per block; undefined cells are black.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.values.iter().map(|v| match v {
            Some(v) => (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8,
            None => 0,
        }));
        out
    }
}

/// Formats `x` with `digits` significant digits in the style of C's `%g`.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
