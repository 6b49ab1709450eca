//! Two-stage optimization: stage 1 learns to separate blended sources,
//! stage 2 fine-tunes on clean images while squeezing the phantom branch
//! to silence. A plain single-stream trainer provides the comparison
//! baseline.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;

use crate::blend::{
    blend_batch_cm, blend_batch_cutmix, blend_batch_mixup, blend_fitted, crop_blended,
    plan_cc_indices, BlendConfig, BlendStrategy, BlendedSample,
};
use crate::cooccur::CooccurrenceMatrix;
use crate::dataset::{crop, unique_categories_with, CropMode, DatasetManifest, SegSample};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::derive_rng;

use super::loss::LossBreakdown;
use super::net::{backward, BindNetGrads, BindNetParams, StageTarget, DEFAULT_WIDTH};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Stage-2 starting rate.
    pub finetune_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Passes over the dataset when `max_iters` is not set.
    pub epochs: usize,
    pub poly_power: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Direct iteration budget; overrides the epoch-derived count.
    pub max_iters: Option<usize>,
    /// Square working resolution samples are cropped/padded to.
    pub crop_size: usize,
    /// Encoder channel width.
    pub width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 2.5e-4,
            finetune_lr: 2.5e-5,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 50,
            poly_power: 0.9,
            batch_size: 4,
            seed: 0,
            max_iters: None,
            crop_size: 32,
            width: DEFAULT_WIDTH,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.base_lr > 0.0) || !(self.finetune_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("momentum and weight decay must be non-negative".into());
        }
        if !(self.poly_power > 0.0) {
            return bad(format!("poly power must be positive, got {}", self.poly_power));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.crop_size == 0 || self.width == 0 {
            return bad("epochs, batch size, crop size, and width must be positive".into());
        }
        Ok(())
    }

    fn total_iters(&self, n_samples: usize) -> usize {
        self.max_iters
            .unwrap_or_else(|| self.epochs * n_samples.div_ceil(self.batch_size))
    }
}

/// Polynomial decay: `base · (1 − iter/max_iter)^power`.
pub fn poly_schedule(base: f64, power: f64, iter: usize, max_iter: usize) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::InvalidConfig("poly schedule needs max_iter > 0".into()));
    }
    if iter > max_iter {
        return Err(Error::InvalidConfig(format!(
            "iteration {iter} beyond max_iter {max_iter}"
        )));
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// The stage-1 rate at a given iteration.
pub fn poly_lr(config: &TrainConfig, iter: usize, max_iter: usize) -> Result<f64> {
    poly_schedule(config.base_lr, config.poly_power, iter, max_iter)
}

/// One SGD-with-momentum update:
/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
///
/// With `freeze_binding` the binding-head tensors are skipped entirely —
/// no update and no weight decay. A non-finite gradient anywhere aborts
/// the step.
pub fn sgd_step(
    params: &mut BindNetParams,
    grads: &BindNetGrads,
    velocity: &mut BindNetGrads,
    config: &TrainConfig,
    lr: f64,
    freeze_binding: bool,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { tensor: name });
        }
    }
    for (((name, p), (_, g)), (_, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        if freeze_binding && name.starts_with("fbh") {
            continue;
        }
        for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = config.momentum * *vv + gv + config.weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// A dataset held in memory, with the class layout needed to interpret
/// its labels. Training iterates over this; loading from disk happens
/// once up front.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub samples: Vec<SegSample>,
    pub n_classes: usize,
    pub background_index: u8,
    pub ignore_index: u8,
}

impl TrainSet {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        if manifest.entries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let samples = par::try_map_collect(&manifest.entries, |e| manifest.load_entry_sample(e))?;
        Ok(TrainSet {
            samples,
            n_classes: manifest.n_classes,
            background_index: manifest.background_index,
            ignore_index: manifest.ignore_index,
        })
    }

    pub fn from_samples(samples: Vec<SegSample>, n_classes: usize) -> Self {
        TrainSet {
            samples,
            n_classes,
            background_index: 0,
            ignore_index: crate::grid::IGNORE_INDEX,
        }
    }
}

/// Final parameters plus the per-iteration loss log.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: BindNetParams,
    pub trace: Vec<LossBreakdown>,
}

fn mean_loss(losses: &[LossBreakdown]) -> LossBreakdown {
    let n = losses.len().max(1) as f64;
    let mut acc = LossBreakdown {
        l_fb: 0.0,
        l_t: 0.0,
        l_p: 0.0,
        l_ppa: 0.0,
        total: 0.0,
        delta: 0.0,
    };
    for l in losses {
        acc.l_fb += l.l_fb;
        acc.l_t += l.l_t;
        acc.l_p += l.l_p;
        acc.l_ppa += l.l_ppa;
        acc.total += l.total;
        acc.delta += l.delta;
    }
    acc.l_fb /= n;
    acc.l_t /= n;
    acc.l_p /= n;
    acc.l_ppa /= n;
    acc.total /= n;
    acc.delta /= n;
    acc
}

/// Backward over a batch in parallel, then fold the per-sample gradients
/// in batch order so the sum is bit-identical regardless of scheduling.
fn batch_gradients<'a>(
    params: &BindNetParams,
    batch: impl Iterator<Item = (&'a crate::grid::ImageGrid, StageTarget<'a>)>,
    ignore_index: u8,
) -> Result<(LossBreakdown, BindNetGrads)> {
    let items: Vec<(&crate::grid::ImageGrid, StageTarget<'_>)> = batch.collect();
    let n = items.len();
    let results: Vec<(LossBreakdown, BindNetGrads)> = par::try_map_collect(&items, |(image, target)| {
        let target = match target {
            StageTarget::Stage1(s) => StageTarget::Stage1(s),
            StageTarget::Stage2(t) => StageTarget::Stage2(t),
            StageTarget::Plain(t) => StageTarget::Plain(t),
        };
        backward(params, image, target, ignore_index)
    })?;
    let mut grads = BindNetGrads::zeros_like(params);
    let mut losses = Vec::with_capacity(n);
    for (loss, g) in &results {
        grads.add_assign(g);
        losses.push(*loss);
    }
    grads.scale(1.0 / n as f64);
    Ok((mean_loss(&losses), grads))
}

fn draw_batch_indices(len: usize, batch_size: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    (0..batch_size).map(|_| rng.gen_range(0..len)).collect()
}

/// Stage 1: train from scratch on blended batches.
///
/// Each iteration draws a batch (with replacement), crops every sample to
/// the working size, blends per the configured strategy, and applies one
/// SGD step on the batch-mean gradient of the composite loss. The
/// co-occurrence strategy needs `matrix`; the cluster strategy
/// pre-generates its blend pool up front.
pub fn train_stage1(
    set: &TrainSet,
    matrix: Option<&CooccurrenceMatrix>,
    blend_config: &BlendConfig,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    blend_config.validate()?;
    if set.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if blend_config.strategy == BlendStrategy::Cm && matrix.is_none() {
        return Err(Error::InvalidConfig(
            "co-occurrence strategy needs a matrix".into(),
        ));
    }

    // Offline pool for the cluster strategy.
    let cc_pool: Vec<BlendedSample> = if blend_config.strategy == BlendStrategy::Cc {
        let cats: Vec<BTreeSet<u8>> = set
            .samples
            .iter()
            .map(|s| unique_categories_with(&s.label, set.background_index, set.ignore_index))
            .collect();
        let ids: Vec<&str> = set.samples.iter().map(|s| s.id.as_str()).collect();
        let plan = plan_cc_indices(&ids, &cats, &blend_config.delta_sampler, config.seed);
        if plan.is_empty() {
            return Err(Error::InvalidConfig(
                "cluster strategy produced no blend pairs (fewer than two category clusters)".into(),
            ));
        }
        par::try_map_collect(&plan, |&(dom, par, delta)| {
            blend_fitted(&set.samples[dom], &set.samples[par], delta)
        })?
    } else {
        Vec::new()
    };

    let mut params = BindNetParams::init(
        set.n_classes,
        config.width,
        &mut derive_rng(config.seed, &["init"]),
    );
    let mut velocity = BindNetGrads::zeros_like(&params);
    let total = config.total_iters(set.samples.len());
    let mut trace = Vec::with_capacity(total);

    for it in 0..total {
        let mut rng = derive_rng(config.seed, &["stage1", &it.to_string()]);
        let blended: Vec<BlendedSample> = match blend_config.strategy {
            BlendStrategy::Cc => {
                let indices = draw_batch_indices(cc_pool.len(), config.batch_size, &mut rng);
                indices
                    .iter()
                    .map(|&i| crop_blended(&cc_pool[i], config.crop_size, CropMode::Random, &mut rng))
                    .collect::<Result<_>>()?
            }
            strategy => {
                let indices = draw_batch_indices(set.samples.len(), config.batch_size, &mut rng);
                let batch: Vec<SegSample> = indices
                    .iter()
                    .map(|&i| crop(&set.samples[i], config.crop_size, CropMode::Random, &mut rng))
                    .collect::<Result<_>>()?;
                match strategy {
                    BlendStrategy::Cm => {
                        blend_batch_cm(&batch, matrix.expect("checked above"), blend_config, &mut rng)?
                    }
                    BlendStrategy::Mixup => blend_batch_mixup(&batch, blend_config, &mut rng)?,
                    BlendStrategy::Cutmix => blend_batch_cutmix(&batch, blend_config, &mut rng)?,
                    BlendStrategy::Cc => unreachable!(),
                }
            }
        };

        let (loss, grads) = batch_gradients(
            &params,
            blended
                .iter()
                .map(|s| (&s.image, StageTarget::Stage1(s))),
            set.ignore_index,
        )?;
        let lr = poly_lr(config, it, total)?;
        sgd_step(&mut params, &grads, &mut velocity, config, lr, false)?;
        trace.push(loss);
    }
    Ok(TrainOutput { params, trace })
}

/// Stage 2: fine-tune stage-1 parameters on clean samples with the
/// dominant-stream loss plus phantom suppression. The binding head is
/// frozen — its tensors receive neither gradient nor weight decay — and
/// the schedule restarts from `finetune_lr`.
pub fn train_stage2(
    params: BindNetParams,
    set: &TrainSet,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if set.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = params;
    let mut velocity = BindNetGrads::zeros_like(&params);
    let total = config.total_iters(set.samples.len());
    let mut trace = Vec::with_capacity(total);

    for it in 0..total {
        let mut rng = derive_rng(config.seed, &["stage2", &it.to_string()]);
        let indices = draw_batch_indices(set.samples.len(), config.batch_size, &mut rng);
        let batch: Vec<SegSample> = indices
            .iter()
            .map(|&i| crop(&set.samples[i], config.crop_size, CropMode::Random, &mut rng))
            .collect::<Result<_>>()?;
        let (loss, grads) = batch_gradients(
            &params,
            batch.iter().map(|s| (&s.image, StageTarget::Stage2(&s.label))),
            set.ignore_index,
        )?;
        let lr = poly_schedule(config.finetune_lr, config.poly_power, it, total)?;
        sgd_step(&mut params, &grads, &mut velocity, config, lr, true)?;
        trace.push(loss);
    }
    Ok(TrainOutput { params, trace })
}

/// Plain segmentation baseline: same architecture, trained from scratch
/// on clean samples with the dominant-stream loss only.
pub fn train_plain(set: &TrainSet, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    if set.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = BindNetParams::init(
        set.n_classes,
        config.width,
        &mut derive_rng(config.seed, &["init"]),
    );
    let mut velocity = BindNetGrads::zeros_like(&params);
    let total = config.total_iters(set.samples.len());
    let mut trace = Vec::with_capacity(total);

    for it in 0..total {
        let mut rng = derive_rng(config.seed, &["plain", &it.to_string()]);
        let indices = draw_batch_indices(set.samples.len(), config.batch_size, &mut rng);
        let batch: Vec<SegSample> = indices
            .iter()
            .map(|&i| crop(&set.samples[i], config.crop_size, CropMode::Random, &mut rng))
            .collect::<Result<_>>()?;
        let (loss, grads) = batch_gradients(
            &params,
            batch.iter().map(|s| (&s.image, StageTarget::Plain(&s.label))),
            set.ignore_index,
        )?;
        let lr = poly_lr(config, it, total)?;
        sgd_step(&mut params, &grads, &mut velocity, config, lr, false)?;
        trace.push(loss);
    }
    Ok(TrainOutput { params, trace })
}

/// Write a loss trace as TSV: `iter l_fb l_t l_p l_ppa total` per row.
pub fn write_trace(path: impl AsRef<Path>, trace: &[LossBreakdown]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "iter\tl_fb\tl_t\tl_p\tl_ppa\ttotal").map_err(|e| Error::io(path, e))?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(
            w,
            "{i}\t{}\t{}\t{}\t{}\t{}",
            l.l_fb, l.l_t, l.l_p, l.l_ppa, l.total
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
