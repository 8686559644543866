//! Gradient-descent training of a directional model on fully known grids.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blm::{Blm, Cell, Rotation};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Random occlusion of training inputs. The loss is still taken against the
/// unoccluded grid, so the model learns to read Unknown cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occlusion {
    /// Chance that a given sample is occluded.
    pub probability: f64,
    pub max_height: usize,
    pub max_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub shuffle: bool,
    pub occlusion: Option<Occlusion>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            optimizer: Optimizer::adam(),
            seed: 0,
            shuffle: true,
            occlusion: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it is a useful no-op run.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be at least 1".into()));
        }
        if let Some(o) = self.occlusion {
            if !(0.0..=1.0).contains(&o.probability) || o.max_height == 0 || o.max_width == 0 {
                return Err(Error::InvalidConfig(format!("occlusion {o:?} needs a probability in [0, 1] and sizes >= 1")));
            }
        }
        Ok(())
    }
}

/// Trained parameters with the per-epoch mean NLL per block in nats.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub loss_curve: Vec<T>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn final_loss(&self) -> T {
        *self.loss_curve.last().expect("at least one epoch")
    }
}

/// Checks that a training set is nonempty, fully known and uniformly shaped.
pub fn validate_dataset(dataset: &[Blm], num_classes: usize) -> Result<()> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    for blm in dataset {
        if blm.num_classes() != num_classes {
            return Err(Error::ClassCountMismatch {
                expected: num_classes,
                found: blm.num_classes(),
            });
        }
        if (blm.rows(), blm.cols()) != (first.rows(), first.cols()) {
            return Err(Error::ShapeMismatch(format!(
                "dataset mixes {}x{} and {}x{} grids",
                first.rows(),
                first.cols(),
                blm.rows(),
                blm.cols()
            )));
        }
        if !blm.is_complete() {
            return Err(Error::UnknownCellPresent);
        }
    }
    Ok(())
}

struct OptimizerState<T> {
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: i32,
}

impl<T: Scalar> OptimizerState<T> {
    fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    fn apply(&mut self, optimizer: Optimizer, lr: T, params: &mut ModelParams<T>, grads: &ModelParams<T>) {
        self.step += 1;
        let grads = grads.tensors();
        for (i, tensor) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i].data();
            let w = tensor.data_mut();
            match optimizer {
                Optimizer::Sgd => {
                    for (w, &g) in w.iter_mut().zip(g) {
                        *w -= lr * g;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                    let c1 = T::one() - b1.powi(self.step);
                    let c2 = T::one() - b2.powi(self.step);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..w.len() {
                        m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                        v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        params.enforce_masks();
    }
}

/// Occludes a rectangle of the grid as seen in the fill frame, which is the
/// model's frame turned back by `frame`, leaving a random raster-order prefix
/// of the rectangle known. This mirrors a region part way through being
/// filled.
fn occlude(blm: &Blm, o: Occlusion, frame: Rotation, rng: &mut ChaCha8Rng) -> Result<Blm> {
    if !rng.gen_bool(o.probability) {
        return Ok(blm.clone());
    }
    let view = blm.rotate(frame.inverse());
    let h = rng.gen_range(1..=o.max_height.min(view.rows()));
    let w = rng.gen_range(1..=o.max_width.min(view.cols()));
    let top = rng.gen_range(0..=view.rows() - h);
    let left = rng.gen_range(0..=view.cols() - w);
    let known = rng.gen_range(0..h * w);
    let mut out = view;
    for i in known..h * w {
        out.set(top + i / w, left + i % w, Cell::Unknown)?;
    }
    Ok(out.rotate(frame))
}

/// Runs training from a fresh initialization seeded by `config.seed`.
pub fn train<T: Scalar>(config: &TrainConfig, model_config: ModelConfig, dataset: &[Blm]) -> Result<TrainOutcome<T>> {
    train_with_progress(config, model_config, dataset, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean_loss)` after each epoch.
pub fn train_with_progress<T: Scalar>(
    config: &TrainConfig,
    model_config: ModelConfig,
    dataset: &[Blm],
    on_epoch: impl FnMut(usize, T),
) -> Result<TrainOutcome<T>> {
    train_in_frame(config, model_config, dataset, Rotation::IDENTITY, on_epoch)
}

/// Training on data that is the fill frame rotated by `frame`; only
/// occlusion depends on it.
pub(crate) fn train_in_frame<T: Scalar>(
    config: &TrainConfig,
    model_config: ModelConfig,
    dataset: &[Blm],
    frame: Rotation,
    mut on_epoch: impl FnMut(usize, T),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    model_config.validate()?;
    validate_dataset(dataset, model_config.num_classes)?;
    let mut params = ModelParams::init(model_config, config.seed)?;
    let mut state = OptimizerState::new(&params);
    let mut shuffler = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5bd1_e995_9e37_79b9);
    let mut occluder = ChaCha8Rng::seed_from_u64(config.seed ^ 0x2545_f491_4f6c_dd1d);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let lr = T::of(config.learning_rate);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut shuffler);
        }
        let mut total = T::zero();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Blm> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = match config.occlusion {
                None => params.loss_and_grad(&batch)?,
                Some(o) => {
                    let inputs: Vec<Blm> = batch.iter().map(|b| occlude(b, o, frame, &mut occluder)).collect::<Result<_>>()?;
                    let refs: Vec<&Blm> = inputs.iter().collect();
                    params.occluded_loss_and_grad(&refs, &batch)?
                }
            };
            total += loss * T::of(chunk.len() as f64);
            state.apply(config.optimizer, lr, &mut params, &grads);
        }
        let mean = total / T::of(dataset.len() as f64);
        on_epoch(epoch, mean);
        loss_curve.push(mean);
    }
    Ok(TrainOutcome { params, loss_curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blm::ClassId;

    fn small_config(num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            num_layers: 2,
            features: 8,
            first_kernel: 3,
            hidden_kernel: 3,
            head_channels: 16,
        }
    }

    fn stripes(n: usize) -> Vec<Blm> {
        (0..n)
            .map(|i| {
                let classes: Vec<usize> = (0..25).map(|j| (j / 5 + i) % 3).collect();
                Blm::from_classes(5, 5, 3, &classes).unwrap()
            })
            .collect()
    }

    #[test]
    fn constant_dataset_is_learned_to_near_certainty() {
        let data = vec![Blm::filled(5, 5, 3, ClassId(2)).unwrap(); 8];
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 4,
            epochs: 40,
            ..TrainConfig::default()
        };
        let out = train::<f64>(&cfg, small_config(3), &data).unwrap();
        let bits = out.params.nll_bits_per_dim(&data).unwrap();
        assert!(bits < 0.05, "bits/dim {bits}");
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = stripes(6);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 4,
            epochs: 3,
            ..TrainConfig::default()
        };
        let out = train::<f64>(&cfg, small_config(3), &data).unwrap();
        assert_eq!(out.params, ModelParams::init(small_config(3), cfg.seed).unwrap());
        for l in &out.loss_curve {
            assert!((l - out.loss_curve[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn training_is_bit_reproducible_and_keeps_masks() {
        let data = stripes(10);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            batch_size: 3,
            epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train::<f64>(&cfg, small_config(3), &data).unwrap();
        let b = train::<f64>(&cfg, small_config(3), &data).unwrap();
        assert_eq!(a.params.to_flat(), b.params.to_flat());
        assert_eq!(a.loss_curve, b.loss_curve);
        assert!(a.loss_curve.last() < a.loss_curve.first());
        for layer in a.params.layers() {
            for k in [&layer.vertical, &layer.horizontal] {
                let (kr, kc) = (k.k_rows(), k.k_cols());
                for (idx, &w) in k.weights().data().iter().enumerate() {
                    let (ti, tj) = ((idx / kc) % kr, idx % kc);
                    if !k.is_allowed(ti, tj) {
                        assert_eq!(w.to_bits(), 0.0f64.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn sgd_also_descends() {
        let data = stripes(8);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            batch_size: 4,
            epochs: 5,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let out = train::<f64>(&cfg, small_config(3), &data).unwrap();
        assert!(out.loss_curve.last() < out.loss_curve.first());
    }

    #[test]
    fn invalid_inputs_rejected() {
        let cfg = TrainConfig::default();
        assert!(matches!(train::<f64>(&cfg, small_config(3), &[]), Err(Error::EmptyDataset)));
        let masked = Blm::filled(3, 3, 3, ClassId(0))
            .unwrap()
            .apply_mask(&crate::blm::MaskRegion::new(0, 0, 1, 1))
            .unwrap();
        assert!(matches!(train::<f64>(&cfg, small_config(3), &[masked]), Err(Error::UnknownCellPresent)));
        let mixed = vec![Blm::filled(3, 3, 3, ClassId(0)).unwrap(), Blm::filled(3, 4, 3, ClassId(0)).unwrap()];
        assert!(matches!(train::<f64>(&cfg, small_config(3), &mixed), Err(Error::ShapeMismatch(_))));
        let bad = TrainConfig {
            batch_size: 0,
            ..cfg
        };
        assert!(matches!(train::<f64>(&bad, small_config(3), &stripes(2)), Err(Error::InvalidConfig(_))));
    }
}
