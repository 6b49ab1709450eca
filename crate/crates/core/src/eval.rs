//! Evaluation protocols: confusion-matrix mIoU, targeted subset selection
//! (unique classes, object count, occlusion, co-occurrence threshold), and
//! saliency scoring (max Fβ / MAE).

use std::collections::BTreeSet;
use std::path::Path;

use crate::bindnet::FeatMap;
use crate::cooccur::CooccurrenceMatrix;
use crate::dataset::{load_label_png, unique_categories, DatasetManifest};
use crate::error::{Error, Result};
use crate::grid::LabelMap;
use crate::par;

/// Pixel tallies with ground truth on rows and predictions on columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        assert!(gt < self.n && pred < self.n);
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one prediction/ground-truth pair; pixels whose ground truth
    /// is `ignore_index` are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore_index: u8) -> Result<()> {
        if !pred.same_dims(gt) {
            return Err(Error::DimensionMismatch {
                context: "confusion accumulate pred vs gt".into(),
                left_h: pred.height(),
                left_w: pred.width(),
                right_h: gt.height(),
                right_w: gt.width(),
            });
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == ignore_index {
                continue;
            }
            let (p, g) = (usize::from(p), usize::from(g));
            if g >= self.n || p >= self.n {
                return Err(Error::ClassOutOfRange {
                    index: g.max(p),
                    n: self.n,
                });
            }
            self.counts[g * self.n + p] += 1;
        }
        Ok(())
    }

    /// Entry-wise sum; shapes must match. Commutative, so per-image
    /// matrices can merge in any order.
    pub fn merge(mut self, other: ConfusionMatrix) -> Self {
        debug_assert_eq!(self.n, other.n);
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self
    }
}

/// Mean IoU plus the per-class values; classes absent from both the
/// prediction and the ground truth carry `None` and are excluded from
/// the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouResult {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<MiouResult> {
    let n = cm.n();
    let mut per_class = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..n {
        let tp = cm.get(c, c);
        let row: u64 = (0..n).map(|p| cm.get(c, p)).sum();
        let col: u64 = (0..n).map(|g| cm.get(g, c)).sum();
        let union = row + col - tp;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(MiouResult {
        miou: sum / present as f64,
        per_class,
    })
}

/// One row of a subset report.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetReport {
    pub name: String,
    pub n_images: usize,
    pub miou: f64,
}

/// Bucket for count-based subsets; `AtLeast` models the "≥ 4" tail
/// column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountBucket {
    Exact(usize),
    AtLeast(usize),
}

impl CountBucket {
    pub fn contains(&self, count: usize) -> bool {
        match *self {
            CountBucket::Exact(k) => count == k,
            CountBucket::AtLeast(k) => count >= k,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            CountBucket::Exact(k) => format!("{k}"),
            CountBucket::AtLeast(k) => format!("{k}+"),
        }
    }
}

fn filter_ids<F>(manifest: &DatasetManifest, keep: F) -> Result<Vec<String>>
where
    F: Fn(&crate::dataset::ManifestEntry) -> Result<bool> + Sync + Send,
{
    let kept = par::try_map_collect(&manifest.entries, |entry| {
        Ok((entry.id.clone(), keep(entry)?))
    })?;
    Ok(kept
        .into_iter()
        .filter_map(|(id, k)| if k { Some(id) } else { None })
        .collect())
}

/// Images whose number of distinct foreground classes falls in the
/// bucket.
pub fn subset_by_unique_count(
    manifest: &DatasetManifest,
    bucket: CountBucket,
) -> Result<Vec<String>> {
    filter_ids(manifest, |entry| {
        let label = manifest.load_entry_label(entry)?;
        Ok(bucket.contains(unique_categories(&label, manifest).len()))
    })
}

/// Load the instance map `<dir>/<id>.png`. Values 0 and 255 are treated
/// as background/void; every other value is one object instance.
fn load_instance_map(instance_dir: &Path, id: &str) -> Result<LabelMap> {
    let path = instance_dir.join(format!("{id}.png"));
    if !path.exists() {
        return Err(Error::MissingInstanceMap(id.to_string()));
    }
    load_label_png(&path)
}

fn instance_ids(map: &LabelMap) -> BTreeSet<u8> {
    map.data()
        .iter()
        .copied()
        .filter(|&v| v != 0 && v != 255)
        .collect()
}

/// Images whose object-instance count falls in the bucket; needs
/// per-image instance maps.
pub fn subset_by_object_count(
    manifest: &DatasetManifest,
    instance_dir: &Path,
    bucket: CountBucket,
) -> Result<Vec<String>> {
    filter_ids(manifest, |entry| {
        let map = load_instance_map(instance_dir, &entry.id)?;
        Ok(bucket.contains(instance_ids(&map).len()))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionMode {
    /// At least one object touches another.
    One,
    /// Every object touches some other object.
    All,
}

/// The set of instances whose mask is 4-adjacent to a different
/// instance's mask.
fn occluded_instances(map: &LabelMap) -> BTreeSet<u8> {
    let (h, w) = (map.height(), map.width());
    let mut occluded = BTreeSet::new();
    let mut consider = |a: u8, b: u8| {
        if a != b && a != 0 && a != 255 && b != 0 && b != 255 {
            occluded.insert(a);
            occluded.insert(b);
        }
    };
    for y in 0..h {
        for x in 0..w {
            let v = map.get(y, x);
            if x + 1 < w {
                consider(v, map.get(y, x + 1));
            }
            if y + 1 < h {
                consider(v, map.get(y + 1, x));
            }
        }
    }
    occluded
}

/// Images where touching objects occur: under `One` any pair suffices,
/// under `All` every instance must touch another. Single-instance images
/// are in neither subset.
pub fn subset_by_occlusion(
    manifest: &DatasetManifest,
    instance_dir: &Path,
    mode: OcclusionMode,
) -> Result<Vec<String>> {
    filter_ids(manifest, |entry| {
        let map = load_instance_map(instance_dir, &entry.id)?;
        let instances = instance_ids(&map);
        let occluded = occluded_instances(&map);
        Ok(match mode {
            OcclusionMode::One => !occluded.is_empty(),
            OcclusionMode::All => !instances.is_empty() && occluded.len() == instances.len(),
        })
    })
}

/// Images all of whose foreground class pairs co-occur fewer than `t`
/// times in the reference matrix. Images with at most one foreground
/// class are always kept.
pub fn subset_by_cooccurrence_threshold(
    manifest: &DatasetManifest,
    matrix: &CooccurrenceMatrix,
    t: u64,
) -> Result<Vec<String>> {
    filter_ids(manifest, |entry| {
        let label = manifest.load_entry_label(entry)?;
        let cats: Vec<u8> = unique_categories(&label, manifest).into_iter().collect();
        for (a, &i) in cats.iter().enumerate() {
            for &j in &cats[a + 1..] {
                let (i, j) = (usize::from(i), usize::from(j));
                if i >= matrix.n() || j >= matrix.n() {
                    return Err(Error::ClassOutOfRange {
                        index: i.max(j),
                        n: matrix.n(),
                    });
                }
                if matrix.get(i, j) >= t {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    })
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn predict_label(logits: &FeatMap) -> LabelMap {
    let (h, w) = (logits.height(), logits.width());
    let mut out = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let row = logits.pixel(y, x);
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            out.set(y, x, best as u8);
        }
    }
    out
}

pub const FBETA_SQ: f64 = 0.3;

/// Saliency scores for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaliencyScore {
    /// Best Fβ over 256 uniform thresholds (β² = 0.3); 0 when the ground
    /// truth has no positive pixel.
    pub max_fbeta: f64,
    /// Mean absolute error between prediction and binary ground truth.
    pub mae: f64,
    /// Set when the ground truth was empty, i.e. `max_fbeta` is a
    /// convention rather than a measurement.
    pub empty_gt: bool,
}

/// Score a saliency prediction in `[0,1]` against a binary mask.
///
/// The threshold sweep tests `pred ≥ i/255` for i = 0..=255, so any
/// strictly increasing rescaling of an 8-bit-quantized prediction leaves
/// `max_fbeta` unchanged.
pub fn saliency_metrics(pred: &[f64], gt: &[bool]) -> Result<SaliencyScore> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch {
            context: "saliency pred vs gt".into(),
            left_h: pred.len(),
            left_w: 1,
            right_h: gt.len(),
            right_w: 1,
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mae = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum::<f64>()
        / pred.len() as f64;

    let n_pos: usize = gt.iter().filter(|&&g| g).count();
    if n_pos == 0 {
        return Ok(SaliencyScore {
            max_fbeta: 0.0,
            mae,
            empty_gt: true,
        });
    }

    // Bucket pixels by the highest threshold they still pass:
    // pred ≥ i/255  ⇔  ⌊pred·255⌋ ≥ i.
    let mut pos = [0u64; 256];
    let mut neg = [0u64; 256];
    for (&p, &g) in pred.iter().zip(gt) {
        let level = (p.clamp(0.0, 1.0) * 255.0).floor() as usize;
        if g {
            pos[level] += 1;
        } else {
            neg[level] += 1;
        }
    }
    let mut best = 0.0f64;
    let mut tp = 0u64;
    let mut fp = 0u64;
    for i in (0..256).rev() {
        tp += pos[i];
        fp += neg[i];
        if tp + fp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_pos as f64;
        let denom = FBETA_SQ * precision + recall;
        if denom > 0.0 {
            let f = (1.0 + FBETA_SQ) * precision * recall / denom;
            best = best.max(f);
        }
    }
    Ok(SaliencyScore {
        max_fbeta: best,
        mae,
        empty_gt: false,
    })
}

/// Dataset-level aggregation: plain means, with empty-ground-truth images
/// contributing their conventional 0 to Fβ.
pub fn mean_saliency(scores: &[SaliencyScore]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let n = scores.len() as f64;
    let fbeta = scores.iter().map(|s| s.max_fbeta).sum::<f64>() / n;
    let mae = scores.iter().map(|s| s.mae).sum::<f64>() / n;
    Ok((fbeta, mae))
}
