//! Deterministic synthetic segmentation data: random circles, rectangles
//! and triangles on a dark background, one foreground class per shape
//! kind. Small enough to train the binding net in seconds, structured
//! enough (overlap, co-occurrence, instance maps) to exercise every
//! evaluation subset.

use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::dataset::{
    write_image_png, write_label_png, DatasetManifest, ManifestEntry, SegSample,
};
use crate::error::Result;
use crate::grid::{ImageGrid, LabelMap};
use crate::rng::{derive_rng, Rng};

/// Background plus circle/rectangle/triangle classes.
pub const SYNTH_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Shapes per image are drawn uniformly from `1..=max_shapes`.
    pub max_shapes: usize,
    /// Half-width of the uniform per-pixel colour noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            max_shapes: 3,
            noise: 0.02,
        }
    }
}

/// One generated image with its class labels and instance map
/// (instance ids 1..=k in draw order; later shapes occlude earlier ones).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample: SegSample,
    pub instances: LabelMap,
}

const BACKGROUND_COLOR: [f64; 3] = [0.2, 0.2, 0.2];
// All classes share one gray palette and differ only in stripe
// orientation, so class identity is carried by local texture rather than
// color. Blending two shapes then superimposes textures into genuinely
// ambiguous plaids instead of color mixtures that still sit nearest the
// dominant class.
const TEXTURE_BASE: f64 = 0.55;
const TEXTURE_AMP: f64 = 0.25;

/// ±1 square wave with period 4.
fn stripe(v: usize) -> f64 {
    if (v / 2) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Class textures: 1 = vertical stripes, 2 = horizontal stripes,
/// 3 = checkerboard; `phase` shifts the pattern per instance.
fn texture_value(class: u8, y: usize, x: usize, phase: (usize, usize)) -> f64 {
    let s = match class {
        1 => stripe(x + phase.1),
        2 => stripe(y + phase.0),
        _ => stripe(x + phase.1) * stripe(y + phase.0),
    };
    TEXTURE_BASE + TEXTURE_AMP * s
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    /// Isosceles, apex up: row t of `h` spans `±half·t/h` around the apex.
    Triangle { ay: usize, ax: f64, h: usize, half: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (yf, xf) = (y as f64, x as f64);
        match *self {
            Shape::Circle { cy, cx, r } => (yf - cy).powi(2) + (xf - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
            Shape::Triangle { ay, ax, h, half } => {
                if y < ay || y >= ay + h {
                    return false;
                }
                let spread = half * (y - ay + 1) as f64 / h as f64;
                (xf - ax).abs() <= spread
            }
        }
    }
}

fn sample_shape(class: u8, config: &SynthConfig, rng: &mut Rng) -> Shape {
    let (h, w) = (config.height as f64, config.width as f64);
    match class {
        1 => {
            let r = rng.gen_range(7.0..h.min(w) / 4.0);
            Shape::Circle {
                cy: rng.gen_range(r..h - r),
                cx: rng.gen_range(r..w - r),
                r,
            }
        }
        2 => {
            let rh = rng.gen_range(10..config.height / 2);
            let rw = rng.gen_range(10..config.width / 2);
            Shape::Rect {
                y0: rng.gen_range(0..config.height - rh),
                x0: rng.gen_range(0..config.width - rw),
                h: rh,
                w: rw,
            }
        }
        _ => {
            let th = rng.gen_range(14..config.height / 2);
            let half = rng.gen_range(7.0..w / 4.0);
            Shape::Triangle {
                ay: rng.gen_range(0..config.height - th),
                ax: rng.gen_range(half..w - half),
                h: th,
                half,
            }
        }
    }
}

/// Pick shape classes with a mild pairing bias (each class prefers a
/// fixed partner for the next draw) so the dataset's co-occurrence
/// matrix has usable structure.
fn sample_classes(n: usize, rng: &mut Rng) -> Vec<u8> {
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let class = if i == 0 || rng.gen_bool(0.4) {
            rng.gen_range(1..=3u8)
        } else {
            classes[i - 1] % 3 + 1
        };
        classes.push(class);
    }
    classes
}

/// Generate image `index` of a dataset. The RNG stream is derived from
/// `(seed, index)` alone, so any subset of a dataset can be produced in
/// any order.
pub fn generate_image(seed: u64, index: usize, config: &SynthConfig) -> SynthSample {
    let mut rng = derive_rng(seed, &["synth", &index.to_string()]);
    let (h, w) = (config.height, config.width);

    let n_shapes = rng.gen_range(1..=config.max_shapes.max(1));
    let classes = sample_classes(n_shapes, &mut rng);
    let shapes: Vec<(Shape, (usize, usize), f64)> = classes
        .iter()
        .map(|&class| {
            let shape = sample_shape(class, config, &mut rng);
            let phase = (rng.gen_range(0..4), rng.gen_range(0..4));
            let brightness = rng.gen_range(-0.05..0.05);
            (shape, phase, brightness)
        })
        .collect();

    let mut image = ImageGrid::zeros(h, w);
    let mut label = LabelMap::filled(h, w, 0);
    let mut instances = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let mut color = BACKGROUND_COLOR;
            for (k, (shape, phase, brightness)) in shapes.iter().enumerate() {
                if shape.contains(y, x) {
                    let v = texture_value(classes[k], y, x, *phase) + brightness;
                    color = [v, v, v];
                    label.set(y, x, classes[k]);
                    instances.set(y, x, (k + 1) as u8);
                }
            }
            for c in 0..3 {
                let noisy = (color[c] + rng.gen_range(-config.noise..=config.noise))
                    .clamp(0.0, 1.0);
                image.set(y, x, c, noisy);
            }
        }
    }

    let id = format!("img{index:05}");
    SynthSample {
        sample: SegSample::new(id, image, label).expect("matching dims by construction"),
        instances,
    }
}

pub fn generate_dataset(seed: u64, n_images: usize, config: &SynthConfig) -> Vec<SynthSample> {
    (0..n_images)
        .map(|i| generate_image(seed, i, config))
        .collect()
}

/// Write a generated dataset under `dir`: `images/`, `labels/`,
/// `instances/` and a `manifest.tsv` ready for the rest of the toolkit.
pub fn write_dataset(
    dir: &Path,
    seed: u64,
    n_images: usize,
    config: &SynthConfig,
) -> Result<DatasetManifest> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    let instances = dir.join("instances");
    for sub in [&images, &labels, &instances] {
        std::fs::create_dir_all(sub).map_err(|e| crate::error::Error::io(sub, e))?;
    }
    let mut entries = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let generated = generate_image(seed, i, config);
        let id = generated.sample.id.clone();
        write_image_png(&images.join(format!("{id}.png")), &generated.sample.image)?;
        write_label_png(&labels.join(format!("{id}.png")), &generated.sample.label)?;
        write_label_png(&instances.join(format!("{id}.png")), &generated.instances)?;
        // Paths in the manifest are relative to the manifest file itself, so
        // the dataset directory can be moved or read from any working dir.
        entries.push(ManifestEntry {
            id: id.clone(),
            image_path: PathBuf::from("images").join(format!("{id}.png")),
            label_path: PathBuf::from("labels").join(format!("{id}.png")),
        });
    }
    let manifest = DatasetManifest::new(entries, SYNTH_CLASSES);
    manifest.save(&dir.join("manifest.tsv"))?;
    DatasetManifest::load(&dir.join("manifest.tsv"))
}
