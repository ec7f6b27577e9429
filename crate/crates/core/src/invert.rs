//! The inversion engine: optimize a conditioning embedding under the joint
//! posterior objective with straight-through projection, evaluate candidates
//! on fixed noise banks, select the argmin, and decode. Also hosts the
//! enumeration classifier baseline that shares the same scoring path.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::autodiff::{add, mse, scale, Arr, Tensor};
use crate::diffusion::{add_noise, make_timestep_set, sample_standard_normal, NoiseSchedule, TimestepSet};
use crate::error::{DiveError, Result};
use crate::labels::{
    class_embedding, decode, decode_class, nn_project, project_and_repad, straight_through,
    DetectionLabel, LearnableConditioning, Metric, SequenceLayout, VocabSet,
};
use crate::models::{ClassCondModel, LayoutCondModel, PriorModel};
use crate::nn::Binding;
use crate::train::AdamW;

/// The frozen conditional model being inverted.
#[derive(Clone, Copy)]
pub enum CondModel<'a> {
    Class(&'a ClassCondModel),
    Layout(&'a LayoutCondModel),
}

impl<'a> CondModel<'a> {
    pub fn vocabs(&self) -> Result<VocabSet> {
        match self {
            CondModel::Class(m) => m.vocabs(),
            CondModel::Layout(m) => m.vocabs(),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match self {
            CondModel::Class(m) => m.schedule(),
            CondModel::Layout(m) => m.schedule(),
        }
    }

    pub fn sequence_layout(&self) -> SequenceLayout {
        match self {
            CondModel::Class(_) => SequenceLayout::classification(),
            CondModel::Layout(m) => m.layout(),
        }
    }

    pub fn img_shape(&self) -> [usize; 3] {
        let cfg = match self {
            CondModel::Class(m) => &m.cfg,
            CondModel::Layout(m) => &m.cfg,
        };
        [cfg.img_channels, cfg.img_size, cfg.img_size]
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            CondModel::Class(m) => m.cfg.d,
            CondModel::Layout(m) => m.cfg.d,
        }
    }

    fn eps_pred(&self, x_t: Arr, t: usize, v: &Tensor) -> Tensor {
        let mut reg = Binding::new();
        match self {
            CondModel::Class(m) => m.bind(&mut reg, false).forward(&Tensor::constant(x_t), t, v),
            CondModel::Layout(m) => m.bind(&mut reg, false).forward(&Tensor::constant(x_t), t, v),
        }
    }
}

/// Frozen models taking part in one inversion.
#[derive(Clone, Copy)]
pub struct InversionModels<'a> {
    pub cond: CondModel<'a>,
    pub prior: Option<&'a PriorModel>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    /// Maximum optimization steps K.
    pub max_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// (timestep, noise) samples per optimizer step, realized by gradient
    /// accumulation over per-sample passes.
    pub batch: usize,
    /// Spacing of the inversion timestep set.
    pub timestep_interval: usize,
    /// Steps between monitor evaluations; 0 selects one pass over the
    /// distinct timestep set.
    pub monitor_frequency: usize,
    pub metric: Metric,
    pub use_prior: bool,
    /// Monitor evaluations without improvement before halting; 0 disables.
    pub early_stop_patience: usize,
    /// Eq. 6 in-vocabulary projection; disabled only for ablations.
    pub straight_through: bool,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            max_steps: 500,
            lr: 0.01,
            weight_decay: 0.0,
            batch: 2,
            timestep_interval: 5,
            monitor_frequency: 0,
            metric: Metric::Cosine,
            use_prior: true,
            early_stop_patience: 5,
            straight_through: true,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn resolved_monitor_frequency(&self, set_len: usize) -> usize {
        if self.monitor_frequency == 0 {
            set_len.max(1)
        } else {
            self.monitor_frequency
        }
    }
}

/// Pre-saved fixed noise banks plus the recorded evaluation history of one
/// inversion run. Banks are created once and never regenerated.
#[derive(Debug, Clone)]
pub struct MonitorState {
    pub timesteps: TimestepSet,
    pub image_noise: Vec<Arr>,
    pub seq_noise: Vec<Arr>,
    pub values: Vec<f64>,
    pub candidates: Vec<Array2<f64>>,
    pub eval_steps: Vec<usize>,
    pub object_counts: Vec<usize>,
}

impl MonitorState {
    /// Draw both banks from `rng`: per timestep one image-shaped and one
    /// sequence-shaped noise, in set order.
    pub fn create<R: Rng>(
        set: &TimestepSet,
        img_shape: &[usize],
        seq_shape: &[usize],
        rng: &mut R,
    ) -> MonitorState {
        let mut image_noise = Vec::with_capacity(set.len());
        let mut seq_noise = Vec::with_capacity(set.len());
        for _ in set.steps() {
            image_noise.push(sample_standard_normal(img_shape, rng));
            seq_noise.push(sample_standard_normal(seq_shape, rng));
        }
        MonitorState {
            timesteps: set.clone(),
            image_noise,
            seq_noise,
            values: Vec::new(),
            candidates: Vec::new(),
            eval_steps: Vec::new(),
            object_counts: Vec::new(),
        }
    }

    /// SHA-256 over both banks; used to assert bank identity across calls.
    pub fn bank_hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for a in self.image_noise.iter().chain(self.seq_noise.iter()) {
            for &v in a.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// v initialized to the [none] embeddings: length 1 for classification, 5L
/// for detection.
pub fn init_conditioning(layout: &SequenceLayout, vocabs: &VocabSet) -> LearnableConditioning {
    let d = vocabs.dim();
    let mut v = Array2::zeros((layout.len(), d));
    for (p, &kind) in layout.kinds().iter().enumerate() {
        let vocab = vocabs.vocab(kind);
        v.row_mut(p).assign(&vocab.entry(vocab.none_index()).expect("none entry"));
    }
    LearnableConditioning::new(v)
}

/// Joint loss of Eq. 5 for one (t, noise) draw, differentiable through `v_prime`.
fn joint_loss(
    models: &InversionModels<'_>,
    x: &Arr,
    v_prime: &Tensor,
    t: usize,
    eps_img: &Arr,
    eps_seq: &Arr,
    sched: &NoiseSchedule,
    use_prior: bool,
) -> Result<Tensor> {
    let x_t = add_noise(x, t, eps_img, sched)?;
    let pred = models.cond.eps_pred(x_t, t, v_prime);
    let image_term = mse(&Tensor::constant(eps_img.clone()), &pred);
    if !use_prior {
        return Ok(image_term);
    }
    let prior = models
        .prior
        .ok_or_else(|| DiveError::MissingInput("prior model required when use_prior is set".into()))?;
    let ab = sched.alpha_bar(t);
    let v_t = add(
        &scale(v_prime, ab.sqrt()),
        &Tensor::constant(eps_seq * (1.0 - ab).sqrt()),
    );
    let mut reg = Binding::new();
    let pred_seq = prior.bind(&mut reg, false).forward(&v_t, t);
    let prior_term = mse(&Tensor::constant(eps_seq.clone()), &pred_seq);
    Ok(add(&image_term, &prior_term))
}

/// One optimization step: sample fresh (t, noise) pairs, average the joint
/// loss, and update only `v`. Model parameters are never touched.
pub fn dive_step<R: Rng>(
    v: &mut LearnableConditioning,
    opt: &mut AdamW,
    x: &Arr,
    models: &InversionModels<'_>,
    cfg: &InversionConfig,
    ctx: &InversionContext,
    rng: &mut R,
) -> Result<f64> {
    let seq_shape = [v.v.nrows(), v.v.ncols()];
    let draws: Vec<(usize, Arr, Arr)> = (0..cfg.batch.max(1))
        .map(|_| {
            let t = crate::diffusion::sample_timestep(&ctx.set, rng);
            let eps_img = sample_standard_normal(&ctx.img_shape, rng);
            let eps_seq = sample_standard_normal(&seq_shape, rng);
            (t, eps_img, eps_seq)
        })
        .collect();

    let results: Vec<Result<(f64, Arr)>> = draws
        .par_iter()
        .map(|(t, eps_img, eps_seq)| {
            let leaf = Tensor::leaf(v.v.clone().into_dyn(), true);
            let v_prime = if cfg.straight_through {
                straight_through(&leaf, &ctx.layout, &ctx.vocabs, cfg.metric)?
            } else {
                leaf.clone()
            };
            let loss = joint_loss(models, x, &v_prime, *t, eps_img, eps_seq, &ctx.sched, cfg.use_prior)?;
            loss.backward();
            let grad = leaf.grad().expect("v gradient");
            Ok((loss.scalar(), grad))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut total_grad = Arr::zeros(ndarray::IxDyn(&[v.v.nrows(), v.v.ncols()]));
    let n = draws.len() as f64;
    for r in results {
        let (l, g) = r?;
        total_loss += l;
        total_grad += &g;
    }
    let loss = total_loss / n;
    if !loss.is_finite() {
        return Err(DiveError::NonFiniteLoss { iteration: opt_step_index(opt), value: loss });
    }
    total_grad /= n;

    v.grad.assign(
        &total_grad
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("v grad is 2-d"),
    );
    opt.begin_step();
    let mut v_dyn = v.v.clone().into_dyn();
    opt.update("v", &mut v_dyn, &total_grad);
    v.v = v_dyn.into_dimensionality::<ndarray::Ix2>().expect("v stays 2-d");
    Ok(loss)
}

fn opt_step_index(_opt: &AdamW) -> usize {
    0
}

/// Shared immutable pieces of one inversion run.
pub struct InversionContext {
    pub set: TimestepSet,
    pub sched: NoiseSchedule,
    pub layout: SequenceLayout,
    pub vocabs: VocabSet,
    pub img_shape: [usize; 3],
}

impl InversionContext {
    pub fn new(models: &InversionModels<'_>, cfg: &InversionConfig) -> Result<InversionContext> {
        let sched = models.cond.schedule()?;
        if let Some(prior) = models.prior {
            let prior_sched = prior.schedule()?;
            if prior_sched != sched {
                return Err(DiveError::IncompatibleModels(
                    "prior and conditional models use different noise schedules".into(),
                ));
            }
            if prior.vocabs()? != models.cond.vocabs()? {
                return Err(DiveError::IncompatibleModels(
                    "prior frozen vocabularies differ from the conditional model's".into(),
                ));
            }
        }
        let set = make_timestep_set(sched.t_max(), cfg.timestep_interval)?;
        Ok(InversionContext {
            set,
            sched,
            layout: models.cond.sequence_layout(),
            vocabs: models.cond.vocabs()?,
            img_shape: models.cond.img_shape(),
        })
    }
}

/// Alg. 1's eval: project v, drop none/illegal objects (re-padding the slots
/// with [none]), then average the joint loss over the whole timestep set
/// using the fixed banks. Deterministic given (v, banks).
pub fn monitor_eval(
    v: &Array2<f64>,
    x: &Arr,
    models: &InversionModels<'_>,
    monitor: &MonitorState,
    cfg: &InversionConfig,
    ctx: &InversionContext,
) -> Result<f64> {
    let v_eval = project_and_repad(v, &ctx.layout, &ctx.vocabs, cfg.metric)?;
    let per_t: Vec<Result<f64>> = monitor
        .timesteps
        .steps()
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let v_const = Tensor::constant(v_eval.clone().into_dyn());
            let loss = joint_loss(
                models,
                x,
                &v_const,
                t,
                &monitor.image_noise[i],
                &monitor.seq_noise[i],
                &ctx.sched,
                cfg.use_prior,
            )?;
            Ok(loss.scalar())
        })
        .collect();
    let mut total = 0.0;
    for r in per_t {
        total += r?;
    }
    Ok(total / monitor.timesteps.len() as f64)
}

/// A decoded prediction of either task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prediction {
    Detection(DetectionLabel),
    Class(usize),
}

#[derive(Debug, Clone)]
pub struct InversionOutcome {
    pub prediction: Prediction,
    pub trace: MonitorState,
    /// Optimization step count at the selected candidate (0 when K=0).
    pub convergence_step: usize,
    /// Steps actually executed (smaller than K under early stopping).
    pub steps_used: usize,
}

fn decode_prediction(
    v: &Array2<f64>,
    ctx: &InversionContext,
    metric: Metric,
) -> Result<Prediction> {
    if ctx.layout.is_detection() {
        Ok(Prediction::Detection(decode(v, &ctx.layout, &ctx.vocabs, metric)?))
    } else {
        Ok(Prediction::Class(decode_class(v, &ctx.vocabs, metric)?))
    }
}

fn decoded_object_count(v: &Array2<f64>, ctx: &InversionContext, metric: Metric) -> Result<usize> {
    if ctx.layout.is_detection() {
        Ok(decode(v, &ctx.layout, &ctx.vocabs, metric)?.objects.len())
    } else {
        let (_, idx) = nn_project(v, &ctx.layout, &ctx.vocabs, metric)?;
        Ok(usize::from(idx[0] != ctx.vocabs.class.none_index()))
    }
}

/// Run the full optimization loop of Alg. 1 on one image and decode the
/// candidate with the minimum monitor value.
pub fn invert(
    x: &Arr,
    models: &InversionModels<'_>,
    cfg: &InversionConfig,
) -> Result<InversionOutcome> {
    let ctx = InversionContext::new(models, cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let seq_shape = [ctx.layout.len(), models.cond.embedding_dim()];
    let mut monitor = MonitorState::create(&ctx.set, &ctx.img_shape, &seq_shape, &mut rng);
    let freq = cfg.resolved_monitor_frequency(ctx.set.len());

    let mut v = init_conditioning(&ctx.layout, &ctx.vocabs);
    let init_v = v.v.clone();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);

    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut steps_used = 0usize;

    for k in 0..cfg.max_steps {
        dive_step(&mut v, &mut opt, x, models, cfg, &ctx, &mut rng)?;
        steps_used = k + 1;
        if k % freq == 0 {
            let val = monitor_eval(&v.v, x, models, &monitor, cfg, &ctx)?;
            monitor.values.push(val);
            monitor.candidates.push(v.v.clone());
            monitor.eval_steps.push(k + 1);
            monitor.object_counts.push(decoded_object_count(&v.v, &ctx, cfg.metric)?);
            if cfg.early_stop_patience > 0 {
                if val < best {
                    best = val;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.early_stop_patience {
                        break;
                    }
                }
            }
        }
    }

    // argmin over recorded values, ties to the earliest evaluation
    let (selected_v, convergence_step) = if monitor.values.is_empty() {
        (&init_v, 0)
    } else {
        let mut arg = 0;
        for (i, &val) in monitor.values.iter().enumerate() {
            if val < monitor.values[arg] {
                arg = i;
            }
        }
        (&monitor.candidates[arg], monitor.eval_steps[arg])
    };
    let prediction = decode_prediction(selected_v, &ctx, cfg.metric)?;
    Ok(InversionOutcome { prediction, trace: monitor, convergence_step, steps_used })
}

/// The enumeration-based classifier baseline: score every class embedding on
/// the same fixed banks as `monitor_eval` and pick the argmin (ties to the
/// lowest class id). Returns the winner and all per-class scores.
pub fn enumerate_classify(
    x: &Arr,
    model: &ClassCondModel,
    monitor: &MonitorState,
    cfg: &InversionConfig,
) -> Result<(usize, Vec<f64>)> {
    let models = InversionModels { cond: CondModel::Class(model), prior: None };
    let mut cfg = cfg.clone();
    cfg.use_prior = false;
    let ctx = InversionContext::new(&models, &cfg)?;
    let num_classes = ctx.vocabs.num_classes();
    let mut scores = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let v = class_embedding(&ctx.vocabs, c)?;
        scores.push(monitor_eval(&v, x, &models, monitor, &cfg, &ctx)?);
    }
    let mut arg = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s < scores[arg] {
            arg = c;
        }
    }
    Ok((arg, scores))
}

/// Line-delimited trace export: {step, monitor_value, decoded_object_count}.
pub fn write_trace(monitor: &MonitorState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..monitor.values.len() {
        writeln!(
            f,
            "{}",
            serde_json::json!({
                "step": monitor.eval_steps[i],
                "monitor_value": monitor.values[i],
                "decoded_object_count": monitor.object_counts[i],
            })
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn tiny_inv_cfg() -> InversionConfig {
        InversionConfig {
            max_steps: 6,
            lr: 0.01,
            weight_decay: 0.0,
            batch: 2,
            timestep_interval: 2,
            monitor_frequency: 0,
            metric: Metric::Cosine,
            use_prior: true,
            early_stop_patience: 0,
            straight_through: true,
            seed: 4,
        }
    }

    fn tiny_x(cfg: &ModelConfig, seed: u64) -> Arr {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        sample_standard_normal(&[cfg.img_channels, cfg.img_size, cfg.img_size], &mut rng) * 0.5
    }

    #[test]
    fn init_is_all_none_and_decodes_empty() {
        let cfg = tiny_cfg();
        let m = LayoutCondModel::new(cfg.clone(), 1);
        let vocabs = m.vocabs().unwrap();
        let layout = m.layout();
        let v = init_conditioning(&layout, &vocabs);
        assert_eq!(v.v.nrows(), 10);
        for (p, &kind) in layout.kinds().iter().enumerate() {
            let vocab = vocabs.vocab(kind);
            assert_eq!(v.v.row(p), vocab.entry(vocab.none_index()).unwrap());
        }
        let decoded = decode(&v.v, &layout, &vocabs, Metric::Cosine).unwrap();
        assert!(decoded.objects.is_empty());

        let cm = ClassCondModel::new(cfg, 2);
        let cv = cm.vocabs().unwrap();
        let cl = SequenceLayout::classification();
        let vc = init_conditioning(&cl, &cv);
        assert_eq!(vc.v.nrows(), 1);
        assert_eq!(vc.v.row(0), cv.class.entry(0).unwrap());
    }

    #[test]
    fn k_zero_returns_initialization_decode() {
        let cfg = tiny_cfg();
        let m = LayoutCondModel::new(cfg.clone(), 1);
        let vocabs = m.vocabs().unwrap();
        let prior = PriorModel::new(cfg.clone(), PriorMode::Joint, &vocabs, 2);
        let models = InversionModels { cond: CondModel::Layout(&m), prior: Some(&prior) };
        let mut icfg = tiny_inv_cfg();
        icfg.max_steps = 0;
        let out = invert(&tiny_x(&cfg, 3), &models, &icfg).unwrap();
        assert_eq!(out.prediction, Prediction::Detection(DetectionLabel::default()));
        assert_eq!(out.convergence_step, 0);
        assert_eq!(out.steps_used, 0);
    }

    #[test]
    fn frozen_weights_unchanged_by_inversion() {
        let cfg = tiny_cfg();
        let m = LayoutCondModel::new(cfg.clone(), 1);
        let prior = PriorModel::new(cfg.clone(), PriorMode::Joint, &m.vocabs().unwrap(), 2);
        let (h1, h2) = (m.param_hash(), prior.param_hash());
        let models = InversionModels { cond: CondModel::Layout(&m), prior: Some(&prior) };
        invert(&tiny_x(&cfg, 5), &models, &tiny_inv_cfg()).unwrap();
        assert_eq!(h1, m.param_hash());
        assert_eq!(h2, prior.param_hash());
    }

    #[test]
    fn use_prior_false_drops_the_prior_term() {
        let cfg = tiny_cfg();
        let m = LayoutCondModel::new(cfg.clone(), 1);
        let models_no_prior = InversionModels { cond: CondModel::Layout(&m), prior: None };
        let mut icfg = tiny_inv_cfg();
        icfg.use_prior = false;
        let ctx = InversionContext::new(&models_no_prior, &icfg).unwrap();
        let x = tiny_x(&cfg, 6);
        let mut rng = ChaCha12Rng::seed_from_u64(icfg.seed);
        let monitor = MonitorState::create(&ctx.set, &ctx.img_shape, &[10, 8], &mut rng);
        let v = init_conditioning(&ctx.layout, &ctx.vocabs);

        // image term alone: computed directly from the fixed banks
        let v_eval = project_and_repad(&v.v, &ctx.layout, &ctx.vocabs, icfg.metric).unwrap();
        let mut expect = 0.0;
        for (i, &t) in monitor.timesteps.steps().iter().enumerate() {
            let x_t = add_noise(&x, t, &monitor.image_noise[i], &ctx.sched).unwrap();
            let pred = models_no_prior
                .cond
                .eps_pred(x_t, t, &Tensor::constant(v_eval.clone().into_dyn()));
            expect += crate::diffusion::eps_loss(&monitor.image_noise[i], pred.value()).unwrap();
        }
        expect /= monitor.timesteps.len() as f64;
        let got = monitor_eval(&v.v, &x, &models_no_prior, &monitor, &icfg, &ctx).unwrap();
        assert!((got - expect).abs() < 1e-12);

        // and with the prior the value strictly includes a second term
        let prior = PriorModel::new(cfg.clone(), PriorMode::Joint, &m.vocabs().unwrap(), 2);
        let models = InversionModels { cond: CondModel::Layout(&m), prior: Some(&prior) };
        let mut icfg2 = icfg.clone();
        icfg2.use_prior = true;
        let got2 = monitor_eval(&v.v, &x, &models, &monitor, &icfg2, &ctx).unwrap();
        assert!(got2 > got);
    }

    #[test]
    fn missing_prior_with_use_prior_is_an_error() {
        let cfg = tiny_cfg();
        let m = LayoutCondModel::new(cfg.clone(), 1);
        let models = InversionModels { cond: CondModel::Layout(&m), prior: None };
        let icfg = tiny_inv_cfg();
        assert!(matches!(
            invert(&tiny_x(&cfg, 7), &models, &icfg),
            Err(DiveError::MissingInput(_))
        ));
    }

    #[test]
    fn lr_zero_keeps_v_at_init_and_loss_finite() {
        let cfg = tiny_cfg();
        let m = LayoutCondModel::new(cfg.clone(), 1);
        let prior = PriorModel::new(cfg.clone(), PriorMode::Joint, &m.vocabs().unwrap(), 2);
        let models = InversionModels { cond: CondModel::Layout(&m), prior: Some(&prior) };
        let mut icfg = tiny_inv_cfg();
        icfg.lr = 0.0;
        let ctx = InversionContext::new(&models, &icfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(icfg.seed);
        let mut v = init_conditioning(&ctx.layout, &ctx.vocabs);
        let before = v.v.clone();
        let mut opt = AdamW::new(icfg.lr, icfg.weight_decay);
        let loss =
            dive_step(&mut v, &mut opt, &tiny_x(&cfg, 8), &models, &icfg, &ctx, &mut rng).unwrap();
        assert!(loss.is_finite());
        assert_eq!(v.v, before);
    }

    #[test]
    fn monitor_eval_is_deterministic_and_banks_stable() {
        let cfg = tiny_cfg();
        let m = LayoutCondModel::new(cfg.clone(), 1);
        let prior = PriorModel::new(cfg.clone(), PriorMode::Joint, &m.vocabs().unwrap(), 2);
        let models = InversionModels { cond: CondModel::Layout(&m), prior: Some(&prior) };
        let icfg = tiny_inv_cfg();
        let ctx = InversionContext::new(&models, &icfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(icfg.seed);
        let monitor = MonitorState::create(&ctx.set, &ctx.img_shape, &[10, 8], &mut rng);
        let x = tiny_x(&cfg, 9);
        let mut rng2 = ChaCha12Rng::seed_from_u64(77);
        let v = sample_standard_normal(&[10, 8], &mut rng2)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let h0 = monitor.bank_hash();
        let a = monitor_eval(&v, &x, &models, &monitor, &icfg, &ctx).unwrap();
        let b = monitor_eval(&v, &x, &models, &monitor, &icfg, &ctx).unwrap();
        assert_eq!(a, b);
        assert_eq!(h0, monitor.bank_hash());
    }

    #[test]
    fn enumeration_scores_bit_equal_monitor_eval() {
        let cfg = tiny_cfg();
        let m = ClassCondModel::new(cfg.clone(), 1);
        let models = InversionModels { cond: CondModel::Class(&m), prior: None };
        let mut icfg = tiny_inv_cfg();
        icfg.use_prior = false;
        let ctx = InversionContext::new(&models, &icfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(icfg.seed);
        let monitor = MonitorState::create(&ctx.set, &ctx.img_shape, &[1, 8], &mut rng);
        let x = tiny_x(&cfg, 10);
        let (winner, scores) = enumerate_classify(&x, &m, &monitor, &icfg).unwrap();
        assert_eq!(scores.len(), 2);
        for (c, &s) in scores.iter().enumerate() {
            let v = class_embedding(&ctx.vocabs, c).unwrap();
            let direct = monitor_eval(&v, &x, &models, &monitor, &icfg, &ctx).unwrap();
            assert_eq!(s, direct, "class {c} score differs");
        }
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(scores[winner], min);
    }

    #[test]
    fn selection_is_argmin_of_recorded_values() {
        let cfg = tiny_cfg();
        let m = LayoutCondModel::new(cfg.clone(), 1);
        let prior = PriorModel::new(cfg.clone(), PriorMode::Joint, &m.vocabs().unwrap(), 2);
        let models = InversionModels { cond: CondModel::Layout(&m), prior: Some(&prior) };
        let mut icfg = tiny_inv_cfg();
        icfg.max_steps = 8;
        icfg.monitor_frequency = 2;
        icfg.early_stop_patience = 3;
        let out = invert(&tiny_x(&cfg, 11), &models, &icfg).unwrap();
        let min = out.trace.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let arg = out.trace.values.iter().position(|&v| v == min).unwrap();
        assert_eq!(out.convergence_step, out.trace.eval_steps[arg]);
        let reproj = decode_prediction(&out.trace.candidates[arg], &InversionContext::new(&models, &icfg).unwrap(), icfg.metric).unwrap();
        assert_eq!(out.prediction, reproj);
    }

    #[test]
    fn inversion_is_seed_reproducible() {
        let cfg = tiny_cfg();
        let m = LayoutCondModel::new(cfg.clone(), 1);
        let prior = PriorModel::new(cfg.clone(), PriorMode::Joint, &m.vocabs().unwrap(), 2);
        let models = InversionModels { cond: CondModel::Layout(&m), prior: Some(&prior) };
        let icfg = tiny_inv_cfg();
        let x = tiny_x(&cfg, 12);
        let a = invert(&x, &models, &icfg).unwrap();
        let b = invert(&x, &models, &icfg).unwrap();
        assert_eq!(a.trace.values, b.trace.values);
        assert_eq!(a.prediction, b.prediction);
    }

    #[test]
    fn trace_export_writes_one_line_per_eval() {
        let cfg = tiny_cfg();
        let m = LayoutCondModel::new(cfg.clone(), 1);
        let prior = PriorModel::new(cfg.clone(), PriorMode::Joint, &m.vocabs().unwrap(), 2);
        let models = InversionModels { cond: CondModel::Layout(&m), prior: Some(&prior) };
        let mut icfg = tiny_inv_cfg();
        icfg.monitor_frequency = 2;
        let out = invert(&tiny_x(&cfg, 13), &models, &icfg).unwrap();
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("trace.jsonl");
        write_trace(&out.trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), out.trace.values.len());
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first.get("step").is_some());
        assert!(first.get("monitor_value").is_some());
        assert!(first.get("decoded_object_count").is_some());
    }

    #[test]
    fn straight_through_scaling_invariance_of_projection() {
        let cfg = tiny_cfg();
        let m = LayoutCondModel::new(cfg.clone(), 1);
        let vocabs = m.vocabs().unwrap();
        let layout = m.layout();
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let v = sample_standard_normal(&[10, 8], &mut rng)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let (_, idx1) = nn_project(&v, &layout, &vocabs, Metric::Cosine).unwrap();
        let scaled = &v * 3.0;
        let (_, idx2) = nn_project(&scaled, &layout, &vocabs, Metric::Cosine).unwrap();
        assert_eq!(idx1, idx2);
    }
}
