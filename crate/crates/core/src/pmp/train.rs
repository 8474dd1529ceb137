use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Conditioning, Params, PmpModel};
use super::PmpError;
use crate::motion::{motion_strength, MotionSequence};
use crate::perturb::{sample_perturbation, PerturbConfig, PerturbationKind};
use crate::rng;

/// One supervised pair: the model sees `input` and should produce `target`.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: MotionSequence,
    pub target: MotionSequence,
    pub cond: Conditioning,
}

/// A clean motion with its text tags (vocabulary words).
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub motion: MotionSequence,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Rescale the batch gradient when its L2 norm exceeds this.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub perturb: PerturbConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            learning_rate: 1e-3,
            momentum: 0.9,
            clip_norm: Some(1.0),
            perturb: PerturbConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings paired with [`super::PmpConfig::desk`]: a larger step and
    /// no clipping, which converge within the default 5000 steps.
    pub fn desk() -> Self {
        Self { learning_rate: 3e-2, clip_norm: None, ..Self::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    /// Batch loss before each step, indexed from step 1.
    pub losses: Vec<f64>,
}

impl TrainingLog {
    /// Mean loss over the `window` steps ending at `step` (1-based).
    pub fn smoothed(&self, step: usize, window: usize) -> Option<f64> {
        if step == 0 || step > self.losses.len() || window == 0 {
            return None;
        }
        let start = step.saturating_sub(window);
        let w = &self.losses[start..step];
        Some(w.iter().sum::<f64>() / w.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{:.17e}\n", i + 1, l));
        }
        s
    }
}

pub fn write_training_log(log: &TrainingLog, path: &Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(log.to_csv().as_bytes())
}

fn check_example(model: &PmpModel, ex: &Example) -> Result<(), PmpError> {
    if ex.input.len() != ex.target.len() || ex.input.pose_dim() != ex.target.pose_dim() {
        return Err(PmpError::ShapeMismatch(format!(
            "input {}x{} vs target {}x{}",
            ex.input.len(),
            ex.input.pose_dim(),
            ex.target.len(),
            ex.target.pose_dim()
        )));
    }
    model.check_inputs(ex.input.len(), ex.input.pose_dim(), &ex.cond)
}

/// Squared-error sum and gradient for one example, with the upstream
/// gradient scaled by `1 / count`.
fn example_grad(model: &PmpModel, ex: &Example, count: f64) -> (f64, Params) {
    let cache = model.forward(&ex.input.frames, &ex.cond);
    let f = ex.input.len();
    let p = ex.input.pose_dim();
    let mut d_out = Array2::<f64>::zeros((f, p));
    let mut sse = 0.0;
    for i in 0..f {
        for c in 0..p {
            let e = cache.output[i][c] - ex.target.frames[i][c];
            sse += e * e;
            d_out[[i, c]] = 2.0 * e / count;
        }
    }
    let mut grads = model.params.zeros_like();
    model.backward(&cache, &d_out, &mut grads);
    (sse, grads)
}

/// Mean squared error over every frame, un-padded channel and item, with
/// exact gradients for all parameters. Items are processed in parallel and
/// reduced in batch order.
pub fn pmp_loss(model: &PmpModel, batch: &[Example]) -> Result<(f64, Params), PmpError> {
    if batch.is_empty() {
        return Err(PmpError::EmptyBatch);
    }
    for ex in batch {
        check_example(model, ex)?;
    }
    let count: usize = batch.iter().map(|e| e.input.len() * e.input.pose_dim()).sum();
    let count = count as f64;
    let parts: Vec<(f64, Params)> = batch.par_iter().map(|ex| example_grad(model, ex, count)).collect();
    let mut iter = parts.into_iter();
    let (mut sse, mut grads) = iter.next().expect("non-empty batch");
    for (s, g) in iter {
        sse += s;
        grads.add_assign(&g);
    }
    Ok((sse / count, grads))
}

fn loss_only(model: &PmpModel, ex: &Example) -> f64 {
    let out = model.forward(&ex.input.frames, &ex.cond).output;
    let (sse, n) = crate::motion::sq_error_sum(&out, &ex.target.frames).expect("shapes checked");
    sse / n as f64
}

/// Number of parameters sampled by [`grad_check`].
pub const GRAD_CHECK_SAMPLES: usize = 200;

/// Worst relative error between analytic gradients and central differences
/// over [`GRAD_CHECK_SAMPLES`] parameters drawn uniformly across all tensors.
/// The denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(model: &PmpModel, example: &Example, epsilon: f64) -> Result<f64, PmpError> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(PmpError::InvalidConfig(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    check_example(model, example)?;
    let (_, analytic) = pmp_loss(model, std::slice::from_ref(example))?;
    let analytic: Vec<&Array2<f64>> = analytic.tensors();
    let sizes: Vec<usize> = analytic.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();

    let mut r = rng::seeded(0x6772_6164);
    let picks: Vec<(usize, usize)> = (0..GRAD_CHECK_SAMPLES)
        .map(|_| {
            let mut flat = r.random_range(0..total);
            let mut tensor = 0;
            while flat >= sizes[tensor] {
                flat -= sizes[tensor];
                tensor += 1;
            }
            (tensor, flat)
        })
        .collect();

    let errors: Vec<f64> = picks
        .par_iter()
        .map(|&(tensor, flat)| {
            let mut probe = model.clone();
            let bump = |m: &mut PmpModel, delta: f64| {
                let mut ts = m.params.tensors_mut();
                let t = &mut ts[tensor];
                let cols = t.ncols();
                t[[flat / cols, flat % cols]] += delta;
            };
            bump(&mut probe, epsilon);
            let plus = loss_only(&probe, example);
            bump(&mut probe, -2.0 * epsilon);
            let minus = loss_only(&probe, example);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let t = analytic[tensor];
            let a = t[[flat / t.ncols(), flat % t.ncols()]];
            (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8)
        })
        .collect();
    Ok(errors.into_iter().fold(0.0, f64::max))
}

/// Builds the conditioning for a clean sequence from its tags and strength.
pub fn conditioning_for(model: &PmpModel, clean: &MotionSequence, tags: &[String]) -> Result<Conditioning, PmpError> {
    Ok(Conditioning {
        tokens: model.config.encode_tokens(tags)?,
        strength: motion_strength(clean)?.mean,
        category: clean.category(),
    })
}

/// Draws one training example: a random crop of a corpus item (at most
/// `max_frames` long), perturbed once, conditioned on the clean crop.
pub fn draw_example(
    model: &PmpModel,
    corpus: &[CorpusItem],
    perturb: &PerturbConfig,
    seed: u64,
) -> Result<Example, PmpError> {
    let mut r = rng::seeded(seed);
    let item = &corpus[r.random_range(0..corpus.len())];
    let len = item.motion.len().min(model.config.max_frames);
    let start = r.random_range(0..=item.motion.len() - len);
    let clean = item.motion.with_frames(item.motion.frames[start..start + len].to_vec());
    let (input, _) = sample_perturbation(&clean, perturb, r.random())?;
    let cond = conditioning_for(model, &clean, &item.tags)?;
    Ok(Example { input, target: clean, cond })
}

/// SGD with momentum on perturbed corpus samples. Deterministic given
/// `seed`: each step's batch comes from its own derived stream and the
/// gradient reduction order is fixed.
pub fn pmp_train(
    mut model: PmpModel,
    corpus: &[CorpusItem],
    config: &TrainConfig,
    seed: u64,
) -> Result<(PmpModel, TrainingLog), PmpError> {
    if corpus.is_empty() {
        return Err(PmpError::EmptyCorpus);
    }
    if config.batch_size == 0 {
        return Err(PmpError::EmptyBatch);
    }
    config.perturb.validate()?;
    for item in corpus {
        item.motion.ensure_valid()?;
        if item.motion.len() < 2 {
            return Err(PmpError::ShapeMismatch("corpus motions need at least 2 frames".into()));
        }
        model.config.encode_tokens(&item.tags)?;
    }
    let mut velocity = model.params.zeros_like();
    let mut log = TrainingLog::default();
    for step in 0..config.steps {
        let step_seed = rng::derive(seed, step as u64);
        let batch = (0..config.batch_size)
            .map(|i| draw_example(&model, corpus, &config.perturb, rng::derive(step_seed, i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let (loss, mut grads) = pmp_loss(&model, &batch)?;
        if let Some(max) = config.clip_norm {
            let norm = grads.sq_norm().sqrt();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        velocity.scale(config.momentum);
        velocity.add_assign(&grads);
        for (w, v) in model.params.tensors_mut().into_iter().zip(velocity.tensors()) {
            w.scaled_add(-config.learning_rate, v);
        }
        log.losses.push(loss);
    }
    Ok((model, log))
}

/// Mean held-out MSE before and after refinement for one perturbation kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseScore {
    pub kind: PerturbationKind,
    pub perturbed_mse: f64,
    pub refined_mse: f64,
}

impl DenoiseScore {
    /// Relative reduction of the MSE, `1 - refined / perturbed`.
    pub fn improvement(&self) -> f64 {
        if self.perturbed_mse == 0.0 {
            0.0
        } else {
            1.0 - self.refined_mse / self.perturbed_mse
        }
    }
}

/// Perturbs every held-out item once per kind (kind only, default
/// parameter ranges; item `i` uses seed `derive(seed, i)`) and compares
/// the perturbed and refined sequences with the clean one. Conditioning
/// comes from the clean sequence, as in training.
pub fn evaluate_denoising(model: &PmpModel, held_out: &[CorpusItem], seed: u64) -> Result<Vec<DenoiseScore>, PmpError> {
    if held_out.is_empty() {
        return Err(PmpError::EmptyCorpus);
    }
    PerturbationKind::ALL
        .iter()
        .map(|&kind| {
            let config = PerturbConfig::only(kind);
            let (mut before, mut after) = (0.0, 0.0);
            for (i, item) in held_out.iter().enumerate() {
                let (input, _) = sample_perturbation(&item.motion, &config, rng::derive(seed, i as u64))?;
                let cond = conditioning_for(model, &item.motion, &item.tags)?;
                before += input.mse(&item.motion)?;
                after += model.refine(&input, &cond)?.mse(&item.motion)?;
            }
            let n = held_out.len() as f64;
            Ok(DenoiseScore { kind, perturbed_mse: before / n, refined_mse: after / n })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{Category, ParametricModelSpec};
    use crate::pmp::PmpConfig;

    fn tiny(layers: usize) -> PmpConfig {
        PmpConfig { layers, model_dim: 8, heads: 2, ffn_dim: 12, max_frames: 12, ..PmpConfig::default() }
    }

    fn wave(category: Category, frames: usize, phase: f64) -> MotionSequence {
        let model = ParametricModelSpec::preset(category);
        let rows = (0..frames)
            .map(|i| (0..model.pose_dim).map(|c| (0.3 * i as f64 + phase + c as f64).sin() * 0.5).collect())
            .collect();
        MotionSequence::new(model, 8.0, rows)
    }

    fn example(category: Category) -> Example {
        let target = wave(category, 6, 0.0);
        let input = wave(category, 6, 0.2);
        Example { input, target, cond: Conditioning { tokens: vec![0, 4], strength: 0.1, category } }
    }

    #[test]
    fn loss_zero_at_own_output() {
        let model = PmpModel::init(tiny(1), 1).unwrap();
        let mut ex = example(Category::Human);
        ex.target = model.refine(&ex.input, &ex.cond).unwrap();
        let (loss, grads) = pmp_loss(&model, &[ex]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.sq_norm(), 0.0);
    }

    #[test]
    fn duplicated_batch_has_same_loss() {
        let model = PmpModel::init(tiny(2), 1).unwrap();
        let batch = vec![example(Category::Human), example(Category::Animal)];
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).cloned().collect();
        let (a, ga) = pmp_loss(&model, &batch).unwrap();
        let (b, gb) = pmp_loss(&model, &doubled).unwrap();
        assert!((a - b).abs() < 1e-12 * a.max(1.0));
        assert!((ga.sq_norm() - gb.sq_norm()).abs() < 1e-9 * ga.sq_norm());
        assert!(matches!(pmp_loss(&model, &[]), Err(PmpError::EmptyBatch)));
    }

    #[test]
    fn single_weight_central_difference() {
        let model = PmpModel::init(tiny(2), 5).unwrap();
        let ex = example(Category::GenericObject);
        let (_, grads) = pmp_loss(&model, std::slice::from_ref(&ex)).unwrap();
        let h = 1e-5;
        for (ti, idx) in [(0usize, [3usize, 2usize]), (8, [1, 1]), (56, [2, 0])] {
            let mut plus = model.clone();
            plus.params.tensors_mut()[ti][idx] += h;
            let mut minus = model.clone();
            minus.params.tensors_mut()[ti][idx] -= h;
            let numeric = (loss_only(&plus, &ex) - loss_only(&minus, &ex)) / (2.0 * h);
            let analytic = grads.tensors()[ti][idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "tensor {ti}: analytic {analytic} numeric {numeric}");
        }
    }

    #[test]
    fn grad_check_all_categories_and_depths() {
        for layers in [1, 2, 4] {
            let model = PmpModel::init(tiny(layers), layers as u64).unwrap();
            for c in Category::ALL {
                let err = grad_check(&model, &example(c), 1e-5).unwrap();
                assert!(err < 1e-4, "layers {layers} {c:?}: {err}");
            }
        }
    }

    #[test]
    fn grad_check_degenerate_and_epsilon_stability() {
        let model = PmpModel::init(tiny(1), 2).unwrap();
        let spec = ParametricModelSpec::preset(Category::Human);
        let zero = MotionSequence::constant(spec, 8.0, &[0.0; 66], 4);
        let ex = Example {
            input: zero.clone(),
            target: zero,
            cond: Conditioning { tokens: vec![], strength: 0.0, category: Category::Human },
        };
        assert!(grad_check(&model, &ex, 1e-5).unwrap().is_finite());
        let ex = example(Category::Animal);
        let a = grad_check(&model, &ex, 1e-4).unwrap();
        let b = grad_check(&model, &ex, 5e-5).unwrap();
        assert!(b <= 10.0 * a.max(1e-12));
        assert!(grad_check(&model, &ex, 1e-2).is_err());
    }

    fn corpus() -> Vec<CorpusItem> {
        (0..4)
            .map(|i| CorpusItem { motion: wave(Category::ALL[i % 3], 10, i as f64), tags: vec!["walk".into()] })
            .collect()
    }

    #[test]
    fn zero_steps_and_determinism() {
        let model = PmpModel::init(tiny(1), 3).unwrap();
        let cfg = TrainConfig { steps: 0, batch_size: 2, ..TrainConfig::default() };
        let (same, log) = pmp_train(model.clone(), &corpus(), &cfg, 1).unwrap();
        assert_eq!(same, model);
        assert!(log.losses.is_empty());

        let cfg = TrainConfig { steps: 5, batch_size: 3, ..TrainConfig::default() };
        let (a, la) = pmp_train(model.clone(), &corpus(), &cfg, 7).unwrap();
        let (b, lb) = pmp_train(model.clone(), &corpus(), &cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_ne!(a, model);
        assert!(matches!(pmp_train(model, &[], &cfg, 7), Err(PmpError::EmptyCorpus)));
    }

    #[test]
    fn log_smoothing_and_csv() {
        let log = TrainingLog { losses: vec![4.0, 2.0, 1.0, 1.0] };
        assert_eq!(log.smoothed(2, 50), Some(3.0));
        assert_eq!(log.smoothed(4, 2), Some(1.0));
        assert_eq!(log.smoothed(5, 2), None);
        assert!(log.to_csv().starts_with("step,loss\n1,"));
    }
}
