//! Dataset loading and preparation: manifests, image/label PNG decoding,
//! per-image category sets, and crop/pad to a working size.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelMap, CHANNELS, IGNORE_INDEX};
use crate::rng::Rng;

/// One record of a [`DatasetManifest`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
}

/// Index of a dataset on disk: sample ids with their image/label files plus
/// the class-layout header.
///
/// The on-disk form is a TSV with a header record:
///
/// ```text
/// #classes=21 background=0 ignore=255
/// 2007_000032<TAB>images/2007_000032.png<TAB>labels/2007_000032.png
/// ```
///
/// Relative paths are resolved against the directory containing the
/// manifest file.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub n_classes: usize,
    pub background_index: u8,
    pub ignore_index: u8,
    /// Directory relative paths resolve against; `None` for in-memory
    /// manifests.
    pub base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    /// In-memory manifest; `validate` is still the caller's job if entries
    /// came from untrusted input.
    pub fn new(entries: Vec<ManifestEntry>, n_classes: usize) -> Self {
        DatasetManifest {
            entries,
            n_classes,
            background_index: 0,
            ignore_index: IGNORE_INDEX,
            base_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if usize::from(self.background_index) >= self.n_classes {
            return Err(Error::InvalidConfig(format!(
                "background index {} not below n_classes {}",
                self.background_index, self.n_classes
            )));
        }
        let mut seen = BTreeSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.id.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate sample id `{}`",
                    entry.id
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let malformed = |msg: String| Error::MalformedManifest {
            path: path.to_path_buf(),
            msg,
        };

        let mut header: Option<(usize, u8, u8)> = None;
        let mut entries = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if header.is_some() {
                    return Err(malformed("duplicate header record".into()));
                }
                header = Some(parse_header(rest).map_err(&malformed)?);
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(malformed(format!(
                    "line {}: expected 3 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                image_path: PathBuf::from(fields[1]),
                label_path: PathBuf::from(fields[2]),
            });
        }
        let (n_classes, background_index, ignore_index) =
            header.ok_or_else(|| malformed("missing `#classes=...` header record".into()))?;
        let manifest = DatasetManifest {
            entries,
            n_classes,
            background_index,
            ignore_index,
            base_dir: path.parent().map(Path::to_path_buf),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(
            w,
            "#classes={} background={} ignore={}",
            self.n_classes, self.background_index, self.ignore_index
        )
        .map_err(|e| Error::io(path, e))?;
        for entry in &self.entries {
            writeln!(
                w,
                "{}\t{}\t{}",
                entry.id,
                entry.image_path.display(),
                entry.label_path.display()
            )
            .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        match (&self.base_dir, p.is_relative()) {
            (Some(base), true) => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Load and validate the label map of one entry without touching the
    /// image file. Statistics passes (co-occurrence, subset selection) use
    /// this to avoid decoding full RGB data.
    pub fn load_entry_label(&self, entry: &ManifestEntry) -> Result<LabelMap> {
        let label = load_label_png(&self.resolve(&entry.label_path))?;
        label.validate(self.n_classes, self.ignore_index, &entry.id)?;
        Ok(label)
    }

    pub fn load_entry_sample(&self, entry: &ManifestEntry) -> Result<SegSample> {
        let image = load_image_png(&self.resolve(&entry.image_path))?;
        let label = self.load_entry_label(entry)?;
        SegSample::new(entry.id.clone(), image, label)
    }
}

/// A validated image/label pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: ImageGrid,
    pub label: LabelMap,
}

impl SegSample {
    pub fn new(id: String, image: ImageGrid, label: LabelMap) -> Result<Self> {
        if image.height() != label.height() || image.width() != label.width() {
            return Err(Error::DimensionMismatch {
                context: format!("sample `{id}`: image vs label"),
                left_h: image.height(),
                left_w: image.width(),
                right_h: label.height(),
                right_w: label.width(),
            });
        }
        Ok(SegSample { id, image, label })
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Load a sample by id, checking label values against the manifest's class
/// count and the image/label dimensions against each other.
pub fn load_sample(manifest: &DatasetManifest, id: &str) -> Result<SegSample> {
    let entry = manifest.entry(id)?;
    manifest.load_entry_sample(entry)
}

/// Distinct label values excluding the background and ignore indices.
pub fn unique_categories(label: &LabelMap, manifest: &DatasetManifest) -> BTreeSet<u8> {
    unique_categories_with(label, manifest.background_index, manifest.ignore_index)
}

pub fn unique_categories_with(label: &LabelMap, background: u8, ignore: u8) -> BTreeSet<u8> {
    let hist = label.histogram();
    hist.iter()
        .enumerate()
        .filter(|&(v, &count)| count > 0 && v != usize::from(background) && v != usize::from(ignore))
        .map(|(v, _)| v as u8)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    Center,
    Random,
}

/// Crop or pad a sample to `size`x`size`.
///
/// Each axis is handled independently: when the input is larger the window
/// is cut at the center or at a seeded random offset; when it is smaller
/// the content is padded out with image value 0.0 and label value
/// [`IGNORE_INDEX`] (centered in `Center` mode, randomly placed in
/// `Random` mode). Padded pixels therefore never contribute to losses or
/// metrics.
pub fn crop(sample: &SegSample, size: usize, mode: CropMode, rng: &mut Rng) -> Result<SegSample> {
    crop_to(sample, size, size, mode, rng)
}

/// [`crop`] with independent target height and width.
pub fn crop_to(
    sample: &SegSample,
    height: usize,
    width: usize,
    mode: CropMode,
    rng: &mut Rng,
) -> Result<SegSample> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig("crop size must be positive".into()));
    }
    let (src_y, dst_y, len_y) = axis_window(sample.height(), height, mode, rng);
    let (src_x, dst_x, len_x) = axis_window(sample.width(), width, mode, rng);

    let mut image = ImageGrid::zeros(height, width);
    let mut label = LabelMap::filled(height, width, IGNORE_INDEX);
    for y in 0..len_y {
        for x in 0..len_x {
            for c in 0..CHANNELS {
                image.set(
                    dst_y + y,
                    dst_x + x,
                    c,
                    sample.image.get(src_y + y, src_x + x, c),
                );
            }
            label.set(dst_y + y, dst_x + x, sample.label.get(src_y + y, src_x + x));
        }
    }
    SegSample::new(sample.id.clone(), image, label)
}

/// Returns `(src_offset, dst_offset, copy_len)` for one axis.
pub(crate) fn axis_window(
    in_dim: usize,
    size: usize,
    mode: CropMode,
    rng: &mut Rng,
) -> (usize, usize, usize) {
    if in_dim >= size {
        let slack = in_dim - size;
        let off = match mode {
            CropMode::Center => slack / 2,
            CropMode::Random => rng.gen_range(0..=slack),
        };
        (off, 0, size)
    } else {
        let slack = size - in_dim;
        let off = match mode {
            CropMode::Center => slack / 2,
            CropMode::Random => rng.gen_range(0..=slack),
        };
        (0, off, in_dim)
    }
}

/// Decode an RGB PNG into `[0,1]` floats (8-bit values divided by 255
/// exactly once).
pub fn load_image_png(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::ImageDecode {
            path: path.to_path_buf(),
            source: other,
        },
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|b| f64::from(b) / 255.0)
        .collect();
    ImageGrid::from_data(h, w, data)
}

/// Write an image as 8-bit RGB PNG, rounding `v * 255`.
pub fn write_image_png(path: &Path, image: &ImageGrid) -> Result<()> {
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .expect("raw buffer matches dimensions");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::ImageDecode {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

/// Decode a label raster: an 8-bit single-channel PNG, either grayscale or
/// palette-indexed. Palette entries are ignored; the raw indices are the
/// class values.
pub fn load_label_png(path: &Path) -> Result<LabelMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    // Keep palette indices as stored instead of expanding to RGB.
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::PngDecode {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::PngDecode {
        path: path.to_path_buf(),
        source: e,
    })?;
    let malformed = |msg: String| Error::MalformedManifest {
        path: path.to_path_buf(),
        msg,
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(malformed(format!(
            "label png must be 8-bit, got {:?}",
            info.bit_depth
        )));
    }
    match info.color_type {
        png::ColorType::Grayscale | png::ColorType::Indexed => {}
        other => {
            return Err(malformed(format!(
                "label png must be grayscale or indexed, got {other:?}"
            )));
        }
    }
    buf.truncate(info.buffer_size());
    LabelMap::from_data(info.height as usize, info.width as usize, buf)
}

/// Write a label map as an 8-bit grayscale PNG.
pub fn write_label_png(path: &Path, label: &LabelMap) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        label.width() as u32,
        label.height() as u32,
    );
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::PngEncode {
        path: path.to_path_buf(),
        source: e,
    })?;
    writer
        .write_image_data(label.data())
        .map_err(|e| Error::PngEncode {
            path: path.to_path_buf(),
            source: e,
        })
}

fn parse_header(rest: &str) -> std::result::Result<(usize, u8, u8), String> {
    let mut n_classes = None;
    let mut background = 0u8;
    let mut ignore = IGNORE_INDEX;
    for token in rest.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| format!("bad header token `{token}`"))?;
        match key {
            "classes" => {
                n_classes = Some(
                    value
                        .parse::<usize>()
                        .map_err(|_| format!("bad classes value `{value}`"))?,
                );
            }
            "background" => {
                background = value
                    .parse::<u8>()
                    .map_err(|_| format!("bad background value `{value}`"))?;
            }
            "ignore" => {
                ignore = value
                    .parse::<u8>()
                    .map_err(|_| format!("bad ignore value `{value}`"))?;
            }
            other => return Err(format!("unknown header key `{other}`")),
        }
    }
    let n_classes = n_classes.ok_or_else(|| "header missing `classes=`".to_string())?;
    Ok((n_classes, background, ignore))
}
