//! Image-pair blending with four partner-selection strategies: offline
//! categorical clustering, online co-occurrence-driven matching, and the
//! random-partner baselines (whole-image mixing and rectangle pasting).

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::Distribution as _;

use crate::cooccur::{pair_similarity, CooccurrenceMatrix};
use crate::dataset::{
    crop_to, unique_categories_with, CropMode, DatasetManifest, SegSample,
};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelMap, CHANNELS, IGNORE_INDEX};
use crate::par;
use crate::rng::{derive_rng, Rng};

/// Distribution the per-blend mixing weight δ is drawn from.
///
/// `Uniform` keeps the dominant image's weight inside a chosen range
/// (default `[0.7, 1)`), which guarantees the dominant source stays the
/// stronger one. `Beta(α)` mirrors classic mixup; by convention `α = 0`
/// degenerates to δ = 1 (no blending). `Fixed` pins δ for reproducible
/// experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaSampler {
    Uniform { lo: f64, hi: f64 },
    Beta { alpha: f64 },
    Fixed(f64),
}

impl DeltaSampler {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match *self {
            DeltaSampler::Uniform { lo, hi } => {
                if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
                    return bad(format!("delta range [{lo}, {hi}] must lie in [0, 1]"));
                }
                if lo > hi {
                    return bad(format!("delta range lo {lo} exceeds hi {hi}"));
                }
            }
            DeltaSampler::Beta { alpha } => {
                if !(alpha >= 0.0) {
                    return bad(format!("beta alpha must be non-negative, got {alpha}"));
                }
            }
            DeltaSampler::Fixed(v) => {
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("fixed delta {v} must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            DeltaSampler::Uniform { lo, hi } => lo + (hi - lo) * rng.gen::<f64>(),
            DeltaSampler::Beta { alpha } => {
                if alpha > 0.0 {
                    rand_distr::Beta::new(alpha, alpha)
                        .expect("validated alpha")
                        .sample(rng)
                } else {
                    1.0
                }
            }
            DeltaSampler::Fixed(v) => v,
        }
    }
}

impl Default for DeltaSampler {
    fn default() -> Self {
        DeltaSampler::Uniform { lo: 0.7, hi: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendStrategy {
    /// Offline categorical-cluster generation.
    Cc,
    /// Online co-occurrence matching within a batch.
    Cm,
    /// Random partner, whole-image mix.
    Mixup,
    /// Random partner, rectangle paste.
    Cutmix,
}

impl fmt::Display for BlendStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BlendStrategy::Cc => "cc",
            BlendStrategy::Cm => "cm",
            BlendStrategy::Mixup => "mixup",
            BlendStrategy::Cutmix => "cutmix",
        };
        write!(f, "{s}")
    }
}

impl FromStr for BlendStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cc" => Ok(BlendStrategy::Cc),
            "cm" => Ok(BlendStrategy::Cm),
            "mixup" => Ok(BlendStrategy::Mixup),
            "cutmix" => Ok(BlendStrategy::Cutmix),
            other => Err(format!(
                "unknown blend strategy `{other}` (expected cc, cm, mixup or cutmix)"
            )),
        }
    }
}

/// Settings shared by all blending strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendConfig {
    pub delta_sampler: DeltaSampler,
    /// γ: when a pair's combined category count exceeds this, δ snaps to
    /// `delta_override` so the phantom stays faint in busy scenes.
    pub max_unique_categories: usize,
    pub delta_override: f64,
    pub strategy: BlendStrategy,
    /// Class layout for category-set computation.
    pub background_index: u8,
    pub ignore_index: u8,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            delta_sampler: DeltaSampler::default(),
            max_unique_categories: 4,
            delta_override: 0.9,
            strategy: BlendStrategy::Cm,
            background_index: 0,
            ignore_index: IGNORE_INDEX,
        }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        self.delta_sampler.validate()?;
        if self.max_unique_categories < 1 {
            return Err(Error::InvalidConfig(
                "max_unique_categories must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.delta_override) {
            return Err(Error::InvalidConfig(format!(
                "delta_override {} must lie in [0, 1]",
                self.delta_override
            )));
        }
        Ok(())
    }

    fn cats(&self, label: &LabelMap) -> BTreeSet<u8> {
        unique_categories_with(label, self.background_index, self.ignore_index)
    }
}

/// A blended image with the ground truths of both sources.
///
/// The dominant label and the phantom label are carried unmixed; training
/// supervises the dominant and phantom streams with their original maps.
#[derive(Debug, Clone)]
pub struct BlendedSample {
    pub image: ImageGrid,
    pub gt_dominant: LabelMap,
    pub gt_phantom: LabelMap,
    pub delta: f64,
    pub dominant_id: String,
    pub phantom_id: String,
}

impl BlendedSample {
    fn check(self) -> Result<Self> {
        if self.image.height() != self.gt_dominant.height()
            || self.image.width() != self.gt_dominant.width()
            || !self.gt_dominant.same_dims(&self.gt_phantom)
        {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "blended sample `{}`+`{}`",
                    self.dominant_id, self.phantom_id
                ),
                left_h: self.image.height(),
                left_w: self.image.width(),
                right_h: self.gt_dominant.height(),
                right_w: self.gt_dominant.width(),
            });
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidConfig(format!(
                "blend delta {} out of [0, 1]",
                self.delta
            )));
        }
        Ok(self)
    }
}

/// Mix two equally sized samples: `image = δ·a + (1−δ)·b`, labels carried
/// through unmixed. With δ = 1 the output image is bit-identical to `a`
/// (exact float identity, no special case needed).
pub fn blend_pair(a: &SegSample, b: &SegSample, delta: f64) -> Result<BlendedSample> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidConfig(format!(
            "blend delta {delta} out of [0, 1]"
        )));
    }
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::DimensionMismatch {
            context: format!("blend `{}` vs `{}`", a.id, b.id),
            left_h: a.height(),
            left_w: a.width(),
            right_h: b.height(),
            right_w: b.width(),
        });
    }
    let data: Vec<f64> = a
        .image
        .data()
        .iter()
        .zip(b.image.data())
        .map(|(&va, &vb)| delta * va + (1.0 - delta) * vb)
        .collect();
    let image = ImageGrid::from_data(a.height(), a.width(), data)?;
    BlendedSample {
        image,
        gt_dominant: a.label.clone(),
        gt_phantom: b.label.clone(),
        delta,
        dominant_id: a.id.clone(),
        phantom_id: b.id.clone(),
    }
    .check()
}

/// Crop or pad a blended sample to `size`x`size`, moving the image and
/// both ground-truth maps through the same window.
pub fn crop_blended(
    sample: &BlendedSample,
    size: usize,
    mode: CropMode,
    rng: &mut Rng,
) -> Result<BlendedSample> {
    if size == 0 {
        return Err(Error::InvalidConfig("crop size must be positive".into()));
    }
    let (src_y, dst_y, len_y) = crate::dataset::axis_window(sample.image.height(), size, mode, rng);
    let (src_x, dst_x, len_x) = crate::dataset::axis_window(sample.image.width(), size, mode, rng);
    let mut image = ImageGrid::zeros(size, size);
    let mut gt_dominant = LabelMap::filled(size, size, IGNORE_INDEX);
    let mut gt_phantom = LabelMap::filled(size, size, IGNORE_INDEX);
    for y in 0..len_y {
        for x in 0..len_x {
            for c in 0..CHANNELS {
                image.set(dst_y + y, dst_x + x, c, sample.image.get(src_y + y, src_x + x, c));
            }
            gt_dominant.set(dst_y + y, dst_x + x, sample.gt_dominant.get(src_y + y, src_x + x));
            gt_phantom.set(dst_y + y, dst_x + x, sample.gt_phantom.get(src_y + y, src_x + x));
        }
    }
    BlendedSample {
        image,
        gt_dominant,
        gt_phantom,
        delta: sample.delta,
        dominant_id: sample.dominant_id.clone(),
        phantom_id: sample.phantom_id.clone(),
    }
    .check()
}

fn pass_through(sample: &SegSample) -> BlendedSample {
    BlendedSample {
        image: sample.image.clone(),
        gt_dominant: sample.label.clone(),
        gt_phantom: sample.label.clone(),
        delta: 1.0,
        dominant_id: sample.id.clone(),
        phantom_id: sample.id.clone(),
    }
}

/// One planned offline blend: which pair, and with what weight.
#[derive(Debug, Clone, PartialEq)]
pub struct CcPlanEntry {
    pub dominant_id: String,
    pub phantom_id: String,
    pub delta: f64,
}

/// Plan the categorical-cluster dataset without touching image data.
///
/// Images are grouped into one cluster per foreground category (an image
/// joins every cluster whose category it contains). Each image is blended
/// once against every non-empty cluster of a category it does *not*
/// contain, with the partner drawn uniformly (with replacement) from that
/// cluster. Each (image, cluster) pair gets its own derived RNG stream, so
/// the plan is independent of evaluation order.
pub fn plan_cc_dataset(
    manifest: &DatasetManifest,
    config: &BlendConfig,
    seed: u64,
) -> Result<Vec<CcPlanEntry>> {
    config.validate()?;
    if manifest.entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cats_per_entry: Vec<BTreeSet<u8>> = par::try_map_collect(&manifest.entries, |entry| {
        let label = manifest.load_entry_label(entry)?;
        Ok(config.cats(&label))
    })?;
    let ids: Vec<&str> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
    Ok(plan_cc_indices(&ids, &cats_per_entry, &config.delta_sampler, seed)
        .into_iter()
        .map(|(dominant, partner, delta)| CcPlanEntry {
            dominant_id: ids[dominant].to_string(),
            phantom_id: ids[partner].to_string(),
            delta,
        })
        .collect())
}

/// Core of the cluster planner over pre-computed category sets. Returns
/// `(dominant index, partner index, delta)` triples.
pub(crate) fn plan_cc_indices(
    ids: &[&str],
    cats_per_entry: &[BTreeSet<u8>],
    sampler: &DeltaSampler,
    seed: u64,
) -> Vec<(usize, usize, f64)> {
    let mut clusters: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (idx, cats) in cats_per_entry.iter().enumerate() {
        for &c in cats {
            clusters.entry(c).or_default().push(idx);
        }
    }

    let mut plan = Vec::new();
    for (idx, cats) in cats_per_entry.iter().enumerate() {
        for (&cat, members) in &clusters {
            if cats.contains(&cat) {
                continue;
            }
            let mut rng = derive_rng(seed, &["cc", ids[idx], &cat.to_string()]);
            let partner = members[rng.gen_range(0..members.len())];
            let delta = sampler.sample(&mut rng);
            plan.push((idx, partner, delta));
        }
    }
    plan
}

/// Fit `phantom` to `dominant`'s dimensions by center crop/pad, then
/// blend.
pub fn blend_fitted(dominant: &SegSample, phantom: &SegSample, delta: f64) -> Result<BlendedSample> {
    if phantom.height() == dominant.height() && phantom.width() == dominant.width() {
        return blend_pair(dominant, phantom, delta);
    }
    // Center placement needs no randomness; keeps callers
    // schedule-independent.
    let mut rng = derive_rng(0, &["cc-fit"]);
    let fitted = crop_to(
        phantom,
        dominant.height(),
        dominant.width(),
        CropMode::Center,
        &mut rng,
    )?;
    blend_pair(dominant, &fitted, delta)
}

/// Materialize the planned offline blends. Partners that differ in size
/// are center-fitted to the dominant image's dimensions first.
pub fn generate_cc_dataset(
    manifest: &DatasetManifest,
    config: &BlendConfig,
    seed: u64,
) -> Result<Vec<BlendedSample>> {
    let plan = plan_cc_dataset(manifest, config, seed)?;
    materialize_cc_plan(manifest, &plan)
}

pub fn materialize_cc_plan(
    manifest: &DatasetManifest,
    plan: &[CcPlanEntry],
) -> Result<Vec<BlendedSample>> {
    par::try_map_collect(plan, |entry| {
        let dominant = manifest.load_entry_sample(manifest.entry(&entry.dominant_id)?)?;
        let phantom = manifest.load_entry_sample(manifest.entry(&entry.phantom_id)?)?;
        blend_fitted(&dominant, &phantom, entry.delta)
    })
}

/// Blend a batch by co-occurrence matching.
///
/// One δ is drawn up front for the whole batch. Each sample then picks the
/// partner with the highest total co-occurrence score between their
/// category sets (ties to the lowest index). Samples whose best score is
/// zero — including every sample with an empty category set — pass through
/// unblended with δ = 1. A matched pair whose combined categories exceed
/// `max_unique_categories` uses `delta_override` instead of the batch δ.
pub fn blend_batch_cm(
    batch: &[SegSample],
    matrix: &CooccurrenceMatrix,
    config: &BlendConfig,
    rng: &mut Rng,
) -> Result<Vec<BlendedSample>> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch_delta = config.delta_sampler.sample(rng);
    let cats: Vec<BTreeSet<u8>> = batch.iter().map(|s| config.cats(&s.label)).collect();

    let mut out = Vec::with_capacity(batch.len());
    for (k, sample) in batch.iter().enumerate() {
        let mut best: Option<(usize, u64)> = None;
        for (m, other_cats) in cats.iter().enumerate() {
            if m == k {
                continue;
            }
            let score = if cats[k].is_empty() || other_cats.is_empty() {
                0
            } else {
                pair_similarity(matrix, &cats[k], other_cats)?
            };
            // Strict > keeps the lowest index on ties.
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((m, score));
            }
        }
        match best {
            Some((m, score)) if score > 0 => {
                let union = cats[k].union(&cats[m]).count();
                let delta = if union > config.max_unique_categories {
                    config.delta_override
                } else {
                    batch_delta
                };
                out.push(blend_pair(sample, &batch[m], delta)?);
            }
            _ => out.push(pass_through(sample)),
        }
    }
    Ok(out)
}

/// Uniform partner index excluding `k`.
fn random_partner(k: usize, len: usize, rng: &mut Rng) -> usize {
    let r = rng.gen_range(0..len - 1);
    if r >= k {
        r + 1
    } else {
        r
    }
}

/// Blend a batch with uniformly random partners (whole-image mix). One δ
/// per batch; a batch of one passes through unblended.
pub fn blend_batch_mixup(
    batch: &[SegSample],
    config: &BlendConfig,
    rng: &mut Rng,
) -> Result<Vec<BlendedSample>> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch_delta = config.delta_sampler.sample(rng);
    let mut out = Vec::with_capacity(batch.len());
    for (k, sample) in batch.iter().enumerate() {
        if batch.len() == 1 {
            out.push(pass_through(sample));
            continue;
        }
        let m = random_partner(k, batch.len(), rng);
        out.push(blend_pair(sample, &batch[m], batch_delta)?);
    }
    Ok(out)
}

/// Blend a batch by pasting a rectangle of the partner into each sample.
///
/// The rectangle covers a `1 − δ` fraction of the area (side lengths
/// floored), positioned uniformly at random. Inside it, both the image and
/// the dominant ground truth take the partner's values; the phantom
/// ground truth is the partner's full label map.
pub fn blend_batch_cutmix(
    batch: &[SegSample],
    config: &BlendConfig,
    rng: &mut Rng,
) -> Result<Vec<BlendedSample>> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let batch_delta = config.delta_sampler.sample(rng);
    let mut out = Vec::with_capacity(batch.len());
    for (k, sample) in batch.iter().enumerate() {
        if batch.len() == 1 {
            out.push(pass_through(sample));
            continue;
        }
        let m = random_partner(k, batch.len(), rng);
        let partner = &batch[m];
        if sample.height() != partner.height() || sample.width() != partner.width() {
            return Err(Error::DimensionMismatch {
                context: format!("cutmix `{}` vs `{}`", sample.id, partner.id),
                left_h: sample.height(),
                left_w: sample.width(),
                right_h: partner.height(),
                right_w: partner.width(),
            });
        }
        let (h, w) = (sample.height(), sample.width());
        let frac = (1.0 - batch_delta).max(0.0).sqrt();
        let rect_h = ((h as f64) * frac).floor() as usize;
        let rect_w = ((w as f64) * frac).floor() as usize;
        let mut image = sample.image.clone();
        let mut gt_dominant = sample.label.clone();
        if rect_h > 0 && rect_w > 0 {
            let y0 = rng.gen_range(0..=h - rect_h);
            let x0 = rng.gen_range(0..=w - rect_w);
            for y in y0..y0 + rect_h {
                for x in x0..x0 + rect_w {
                    for c in 0..CHANNELS {
                        image.set(y, x, c, partner.image.get(y, x, c));
                    }
                    gt_dominant.set(y, x, partner.label.get(y, x));
                }
            }
        }
        out.push(
            BlendedSample {
                image,
                gt_dominant,
                gt_phantom: partner.label.clone(),
                delta: batch_delta,
                dominant_id: sample.id.clone(),
                phantom_id: partner.id.clone(),
            }
            .check()?,
        );
    }
    Ok(out)
}
