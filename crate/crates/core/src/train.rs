//! Training loops for the conditional denoisers and the prior model, plus the
//! AdamW optimizer shared with the inversion engine.

use std::collections::HashMap;

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::autodiff::{mse, Arr, Tensor};
use crate::diffusion::{add_noise, sample_standard_normal};
use crate::error::{DiveError, Result};
use crate::labels::{embed, embed_graph, DetectionLabel, LayoutSequence, VocabSet};
use crate::models::{ClassCondModel, LayoutCondModel, PriorModel};
use crate::nn::Binding;

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: usize,
    state: HashMap<String, (Arr, Arr)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Begin one optimizer step (advances the bias-correction counter).
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut ArrayD<f64>, grad: &Arr) {
        debug_assert!(self.t > 0, "begin_step must run before update");
        let (m, v) = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| (Arr::zeros(param.raw_dim()), Arr::zeros(param.raw_dim())));
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (mi, vi)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Stddev of Gaussian smoothing noise added to conditioning embeddings
    /// during training. Keeps the loss informative between vocabulary entries,
    /// which gradient-based inversion relies on at this scale.
    pub cond_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { iterations: 4000, batch: 6, lr: 1e-4, weight_decay: 1e-4, cond_noise: 0.5, seed: 0 }
    }
}

/// Per-iteration loss history of one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the last `window` iterations (or all, if shorter).
    pub fn running_average(&self, window: usize) -> f64 {
        if self.losses.is_empty() {
            return f64::NAN;
        }
        let tail = &self.losses[self.losses.len().saturating_sub(window)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

fn merge_grads(per_sample: Vec<(f64, Vec<(String, Arr)>)>, batch: f64) -> (f64, HashMap<String, Arr>) {
    let mut total_loss = 0.0;
    let mut merged: HashMap<String, Arr> = HashMap::new();
    for (loss, grads) in per_sample {
        total_loss += loss;
        for (name, g) in grads {
            match merged.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    merged.insert(name, g);
                }
            }
        }
    }
    for g in merged.values_mut() {
        *g /= batch;
    }
    (total_loss / batch, merged)
}

fn check_finite(loss: f64, iteration: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(DiveError::NonFiniteLoss { iteration, value: loss });
    }
    Ok(())
}

/// Train the class-conditional denoiser on (image, class id) pairs. Images are
/// expected in [-1, 1] with shape (channels, R, R).
pub fn train_class_cond(
    model: &mut ClassCondModel,
    data: &[(ArrayD<f64>, usize)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(DiveError::EmptyDataset);
    }
    let sched = model.schedule()?;
    let img_shape = [model.cfg.img_channels, model.cfg.img_size, model.cfg.img_size];
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        // all randomness is drawn sequentially so batch parallelism cannot
        // perturb the stream
        let draws: Vec<(usize, usize, Arr, Arr)> = (0..cfg.batch)
            .map(|_| {
                let idx = rng.random_range(0..data.len());
                let t = rng.random_range(1..=sched.t_max());
                let eps = sample_standard_normal(&img_shape, &mut rng);
                let v_noise = sample_standard_normal(&[1, model.cfg.d], &mut rng) * cfg.cond_noise;
                (idx, t, eps, v_noise)
            })
            .collect();

        let per_sample: Vec<(f64, Vec<(String, Arr)>)> = draws
            .par_iter()
            .map(|(idx, t, eps, v_noise)| {
                let (img, class_id) = &data[*idx];
                let x_t = add_noise(img, *t, eps, &sched).expect("valid draw");
                let mut reg = Binding::new();
                let bound = model.bind(&mut reg, true);
                let token = class_id + 1; // [none] holds index 0
                let v = crate::autodiff::add(
                    &crate::autodiff::gather_rows(&bound.class_table, &[token]),
                    &Tensor::constant(v_noise.clone()),
                );
                let pred = bound.forward(&Tensor::constant(x_t), *t, &v);
                let loss = mse(&Tensor::constant(eps.clone()), &pred);
                loss.backward();
                (loss.scalar(), reg.grads())
            })
            .collect();

        let (loss, grads) = merge_grads(per_sample, cfg.batch as f64);
        check_finite(loss, it)?;
        losses.push(loss);

        opt.begin_step();
        model.visit_mut(&mut |name, p| {
            if let Some(g) = grads.get(name) {
                opt.update(name, p, g);
            }
        });
    }
    Ok(TrainReport { losses })
}

/// Train the layout-conditional denoiser on (image, detection label) pairs.
/// Object slots are shuffled every iteration.
pub fn train_layout_cond(
    model: &mut LayoutCondModel,
    data: &[(ArrayD<f64>, DetectionLabel)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(DiveError::EmptyDataset);
    }
    let sched = model.schedule()?;
    let vocabs = model.vocabs()?;
    let max_objects = model.cfg.max_objects;
    let img_shape = [model.cfg.img_channels, model.cfg.img_size, model.cfg.img_size];
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.iterations);

    // tokenized once; slot order varies per draw
    let sequences: Vec<LayoutSequence> = data
        .iter()
        .map(|(_, label)| LayoutSequence::from_label(label, max_objects, &vocabs))
        .collect::<Result<_>>()?;

    for it in 0..cfg.iterations {
        let draws: Vec<(usize, usize, Arr, Vec<usize>, Arr)> = (0..cfg.batch)
            .map(|_| {
                let idx = rng.random_range(0..data.len());
                let t = rng.random_range(1..=sched.t_max());
                let eps = sample_standard_normal(&img_shape, &mut rng);
                let perm = random_permutation(max_objects, &mut rng);
                let v_noise =
                    sample_standard_normal(&[model.cfg.seq_len(), model.cfg.d], &mut rng)
                        * cfg.cond_noise;
                (idx, t, eps, perm, v_noise)
            })
            .collect();

        let per_sample: Vec<(f64, Vec<(String, Arr)>)> = draws
            .par_iter()
            .map(|(idx, t, eps, perm, v_noise)| {
                let (img, _) = &data[*idx];
                let seq = sequences[*idx].permute_slots(perm);
                let x_t = add_noise(img, *t, eps, &sched).expect("valid draw");
                let mut reg = Binding::new();
                let bound = model.bind(&mut reg, true);
                let v = crate::autodiff::add(
                    &embed_graph(&seq, &bound.class_table, Some(&bound.coord_table)),
                    &Tensor::constant(v_noise.clone()),
                );
                let pred = bound.forward(&Tensor::constant(x_t), *t, &v);
                let loss = mse(&Tensor::constant(eps.clone()), &pred);
                loss.backward();
                (loss.scalar(), reg.grads())
            })
            .collect();

        let (loss, grads) = merge_grads(per_sample, cfg.batch as f64);
        check_finite(loss, it)?;
        losses.push(loss);

        opt.begin_step();
        model.visit_mut(&mut |name, p| {
            if let Some(g) = grads.get(name) {
                opt.update(name, p, g);
            }
        });
    }
    Ok(TrainReport { losses })
}

/// Train the prior denoiser on detection labels embedded with the frozen
/// vocabularies. `vocabs` must match the tables frozen into the model.
pub fn train_prior(
    model: &mut PriorModel,
    labels: &[DetectionLabel],
    vocabs: &VocabSet,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if labels.is_empty() {
        return Err(DiveError::EmptyDataset);
    }
    if model.vocabs()? != *vocabs {
        return Err(DiveError::IncompatibleModels(
            "prior model frozen vocabularies differ from the supplied set".into(),
        ));
    }
    let sched = model.schedule()?;
    let max_objects = model.cfg.max_objects;
    let d = model.cfg.d;
    let seq_len = model.cfg.seq_len();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.iterations);

    let sequences: Vec<LayoutSequence> = labels
        .iter()
        .map(|label| LayoutSequence::from_label(label, max_objects, vocabs))
        .collect::<Result<_>>()?;

    for it in 0..cfg.iterations {
        let draws: Vec<(usize, usize, Arr, Vec<usize>)> = (0..cfg.batch)
            .map(|_| {
                let idx = rng.random_range(0..labels.len());
                let t = rng.random_range(1..=sched.t_max());
                let eps = sample_standard_normal(&[seq_len, d], &mut rng);
                let perm = random_permutation(max_objects, &mut rng);
                (idx, t, eps, perm)
            })
            .collect();

        let per_sample: Vec<(f64, Vec<(String, Arr)>)> = draws
            .par_iter()
            .map(|(idx, t, eps, perm)| {
                let seq = sequences[*idx].permute_slots(perm);
                let v0 = embed(&seq, vocabs).into_dyn();
                let v_t = add_noise(&v0, *t, eps, &sched).expect("valid draw");
                let mut reg = Binding::new();
                let bound = model.bind(&mut reg, true);
                let pred = bound.forward(&Tensor::constant(v_t), *t);
                let loss = mse(&Tensor::constant(eps.clone()), &pred);
                loss.backward();
                (loss.scalar(), reg.grads())
            })
            .collect();

        let (loss, grads) = merge_grads(per_sample, cfg.batch as f64);
        check_finite(loss, it)?;
        losses.push(loss);

        opt.begin_step();
        model.visit_mut(&mut |name, p| {
            if let Some(g) = grads.get(name) {
                opt.update(name, p, g);
            }
        });
    }
    Ok(TrainReport { losses })
}

fn random_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{BBox, DetObject};
    use crate::models::{ModelConfig, PriorMode};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            feat: 4,
            num_classes: 2,
            img_size: 8,
            img_channels: 2,
            max_objects: 2,
            conv_blocks: 2,
            enc_blocks: 1,
            time_dim: 8,
            cross_dk: 4,
            t_max: 10,
            beta_min: 1e-3,
            beta_max: 0.02,
        }
    }

    fn tiny_class_data(cfg: &ModelConfig, n: usize) -> Vec<(ArrayD<f64>, usize)> {
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        (0..n)
            .map(|i| {
                let img = sample_standard_normal(
                    &[cfg.img_channels, cfg.img_size, cfg.img_size],
                    &mut rng,
                ) * 0.5;
                (img, i % cfg.num_classes)
            })
            .collect()
    }

    fn tiny_det_data(cfg: &ModelConfig, n: usize) -> Vec<(ArrayD<f64>, DetectionLabel)> {
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        (0..n)
            .map(|i| {
                let img = sample_standard_normal(
                    &[cfg.img_channels, cfg.img_size, cfg.img_size],
                    &mut rng,
                ) * 0.5;
                let label = DetectionLabel {
                    objects: vec![DetObject {
                        class: i % cfg.num_classes,
                        bbox: BBox { m_min: 1, n_min: 1, m_max: 5, n_max: 6 },
                    }],
                };
                (img, label)
            })
            .collect()
    }

    #[test]
    fn zero_iterations_leaves_model_unchanged() {
        let cfg = tiny_cfg();
        let mut m = ClassCondModel::new(cfg.clone(), 1);
        let before = m.param_hash();
        let data = tiny_class_data(&cfg, 4);
        let report =
            train_class_cond(&mut m, &data, &TrainConfig { iterations: 0, ..Default::default() })
                .unwrap();
        assert!(report.losses.is_empty());
        assert_eq!(before, m.param_hash());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let cfg = tiny_cfg();
        let mut m = ClassCondModel::new(cfg, 1);
        assert!(matches!(
            train_class_cond(&mut m, &[], &TrainConfig::default()),
            Err(DiveError::EmptyDataset)
        ));
    }

    #[test]
    fn same_seed_reproduces_loss_curve_and_weights() {
        let cfg = tiny_cfg();
        let data = tiny_class_data(&cfg, 4);
        let tc = TrainConfig { iterations: 5, batch: 3, lr: 1e-3, weight_decay: 0.0, cond_noise: 0.1, seed: 7 };
        let mut m1 = ClassCondModel::new(cfg.clone(), 1);
        let mut m2 = ClassCondModel::new(cfg.clone(), 1);
        let r1 = train_class_cond(&mut m1, &data, &tc).unwrap();
        let r2 = train_class_cond(&mut m2, &data, &tc).unwrap();
        assert_eq!(r1.losses, r2.losses);
        assert_eq!(m1.param_hash(), m2.param_hash());
    }

    #[test]
    fn training_reduces_loss_on_tiny_problem() {
        let cfg = tiny_cfg();
        let data = tiny_class_data(&cfg, 4);
        let tc = TrainConfig { iterations: 150, batch: 4, lr: 3e-3, weight_decay: 0.0, cond_noise: 0.1, seed: 3 };
        let mut m = ClassCondModel::new(cfg, 1);
        let report = train_class_cond(&mut m, &data, &tc).unwrap();
        let early: f64 = report.losses[..20].iter().sum::<f64>() / 20.0;
        let late = report.running_average(20);
        assert!(late < early, "loss did not decrease: {early} -> {late}");
    }

    #[test]
    fn layout_training_runs_and_is_seed_stable() {
        let cfg = tiny_cfg();
        let data = tiny_det_data(&cfg, 4);
        let tc = TrainConfig { iterations: 4, batch: 2, lr: 1e-3, weight_decay: 0.0, cond_noise: 0.1, seed: 9 };
        let mut m1 = LayoutCondModel::new(cfg.clone(), 2);
        let mut m2 = LayoutCondModel::new(cfg.clone(), 2);
        let r1 = train_layout_cond(&mut m1, &data, &tc).unwrap();
        let r2 = train_layout_cond(&mut m2, &data, &tc).unwrap();
        assert_eq!(r1.losses, r2.losses);
        assert_eq!(m1.param_hash(), m2.param_hash());
    }

    #[test]
    fn prior_training_never_touches_vocabularies() {
        let cfg = tiny_cfg();
        let layout_model = LayoutCondModel::new(cfg.clone(), 2);
        let vocabs = layout_model.vocabs().unwrap();
        let mut prior = PriorModel::new(cfg.clone(), PriorMode::Joint, &vocabs, 3);
        let vocab_hash_before = prior.frozen_vocab_hash();
        let labels: Vec<DetectionLabel> =
            tiny_det_data(&cfg, 4).into_iter().map(|(_, l)| l).collect();
        let tc = TrainConfig { iterations: 5, batch: 2, lr: 1e-3, weight_decay: 0.0, cond_noise: 0.0, seed: 11 };
        train_prior(&mut prior, &labels, &vocabs, &tc).unwrap();
        assert_eq!(vocab_hash_before, prior.frozen_vocab_hash());
    }

    #[test]
    fn prior_training_rejects_mismatched_vocabs() {
        let cfg = tiny_cfg();
        let vocabs = LayoutCondModel::new(cfg.clone(), 2).vocabs().unwrap();
        let other = LayoutCondModel::new(cfg.clone(), 99).vocabs().unwrap();
        let mut prior = PriorModel::new(cfg.clone(), PriorMode::Joint, &vocabs, 3);
        let labels: Vec<DetectionLabel> =
            tiny_det_data(&cfg, 2).into_iter().map(|(_, l)| l).collect();
        assert!(train_prior(&mut prior, &labels, &other, &TrainConfig::default()).is_err());
    }

    #[test]
    fn decoupled_prior_trains() {
        let cfg = tiny_cfg();
        let vocabs = LayoutCondModel::new(cfg.clone(), 2).vocabs().unwrap();
        let mut prior = PriorModel::new(cfg.clone(), PriorMode::Decoupled, &vocabs, 3);
        let labels: Vec<DetectionLabel> =
            tiny_det_data(&cfg, 4).into_iter().map(|(_, l)| l).collect();
        let tc = TrainConfig { iterations: 5, batch: 2, lr: 1e-3, weight_decay: 0.0, cond_noise: 0.0, seed: 13 };
        let report = train_prior(&mut prior, &labels, &vocabs, &tc).unwrap();
        assert_eq!(report.losses.len(), 5);
        assert!(report.losses.iter().all(|l| l.is_finite()));
    }
}
