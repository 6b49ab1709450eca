//! Category co-occurrence statistics over a training set, and the
//! pair-scoring query used to pick blend partners.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::dataset::{unique_categories_with, DatasetManifest};
use crate::error::{Error, Result};
use crate::par;

/// How co-occurrence is counted.
///
/// `ImageCount` increments a pair once per image containing both
/// categories; `PixelWeighted` counts, for entry `(i, j)`, every pixel
/// labeled `i` across all images that contain `j`. The second reading
/// weights large objects more and is generally asymmetric; image counting
/// is the default and is what partner selection uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CooccurrenceMode {
    ImageCount,
    PixelWeighted,
}

impl fmt::Display for CooccurrenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CooccurrenceMode::ImageCount => write!(f, "image-count"),
            CooccurrenceMode::PixelWeighted => write!(f, "pixel-weighted"),
        }
    }
}

impl FromStr for CooccurrenceMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "image-count" => Ok(CooccurrenceMode::ImageCount),
            "pixel-weighted" => Ok(CooccurrenceMode::PixelWeighted),
            other => Err(format!(
                "unknown co-occurrence mode `{other}` (expected image-count or pixel-weighted)"
            )),
        }
    }
}

/// Symmetric-or-not n×n table of co-occurrence counts. Background and
/// ignore rows stay zero because per-image category sets exclude them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceMatrix {
    n: usize,
    mode: CooccurrenceMode,
    counts: Vec<u64>,
}

impl CooccurrenceMatrix {
    pub fn zeros(n: usize, mode: CooccurrenceMode) -> Self {
        CooccurrenceMatrix {
            n,
            mode,
            counts: vec![0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> CooccurrenceMode {
        self.mode
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        assert!(i < self.n && j < self.n, "index out of range");
        self.counts[i * self.n + j]
    }

    pub fn add(&mut self, i: usize, j: usize, amount: u64) {
        assert!(i < self.n && j < self.n, "index out of range");
        self.counts[i * self.n + j] += amount;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Entry-wise sum; both operands must share shape and mode.
    /// Entry-wise sum; commutative, so parallel reductions may merge in
    /// any order.
    pub fn merge(mut self, other: CooccurrenceMatrix) -> Self {
        debug_assert_eq!(self.n, other.n);
        debug_assert_eq!(self.mode, other.mode);
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self
    }

    /// Off-diagonal entries sorted by count descending, then by index;
    /// zero-count pairs are skipped. Used for reporting.
    pub fn top_pairs(&self, k: usize) -> Vec<(usize, usize, u64)> {
        let mut pairs = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let c = self.get(i, j).max(self.get(j, i));
                if c > 0 {
                    pairs.push((i, j, c));
                }
            }
        }
        pairs.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        pairs.truncate(k);
        pairs
    }
}

/// Count category co-occurrence across every image in the manifest.
///
/// Images are processed in parallel; the entry-wise integer merge is
/// commutative, so the result does not depend on scheduling.
pub fn compute_cooccurrence(
    manifest: &DatasetManifest,
    mode: CooccurrenceMode,
) -> Result<CooccurrenceMatrix> {
    if manifest.entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = manifest.n_classes;
    par::try_map_merge(
        &manifest.entries,
        || CooccurrenceMatrix::zeros(n, mode),
        |entry| {
            let label = manifest.load_entry_label(entry)?;
            let hist = label.histogram();
            let cats =
                unique_categories_with(&label, manifest.background_index, manifest.ignore_index);
            let mut partial = CooccurrenceMatrix::zeros(n, mode);
            accumulate_image(&mut partial, &cats, &hist);
            Ok(partial)
        },
        |a, b| a.merge(b),
    )
}

/// Fold one image's category set (and pixel histogram) into the matrix.
pub fn accumulate_image(matrix: &mut CooccurrenceMatrix, cats: &BTreeSet<u8>, hist: &[u64; 256]) {
    match matrix.mode {
        CooccurrenceMode::ImageCount => {
            for &i in cats {
                for &j in cats {
                    matrix.add(usize::from(i), usize::from(j), 1);
                }
            }
        }
        CooccurrenceMode::PixelWeighted => {
            // counts[i][j] += pixels labeled i, for every j present.
            for &j in cats {
                for &i in cats {
                    matrix.add(usize::from(i), usize::from(j), hist[usize::from(i)]);
                }
            }
        }
    }
}

/// Total co-occurrence score between two category sets:
/// `Σ_{i∈cats_m} Σ_{j∈cats_k} counts[i][j]`. Zero when either set is
/// empty.
pub fn pair_similarity(
    matrix: &CooccurrenceMatrix,
    cats_k: &BTreeSet<u8>,
    cats_m: &BTreeSet<u8>,
) -> Result<u64> {
    let mut score = 0u64;
    for &i in cats_m {
        for &j in cats_k {
            let (i, j) = (usize::from(i), usize::from(j));
            if i >= matrix.n || j >= matrix.n {
                return Err(Error::ClassOutOfRange {
                    index: i.max(j),
                    n: matrix.n,
                });
            }
            score += matrix.get(i, j);
        }
    }
    Ok(score)
}

pub fn save_matrix(matrix: &CooccurrenceMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "n={} mode={}", matrix.n, matrix.mode).map_err(|e| Error::io(path, e))?;
    for i in 0..matrix.n {
        let row: Vec<String> = (0..matrix.n)
            .map(|j| matrix.get(i, j).to_string())
            .collect();
        writeln!(w, "{}", row.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<CooccurrenceMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let malformed = |msg: String| Error::MalformedMatrix {
        path: path.to_path_buf(),
        msg,
    };

    let header = lines
        .next()
        .ok_or_else(|| malformed("empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let mut n = None;
    let mut mode = None;
    for token in header.split_whitespace() {
        match token.split_once('=') {
            Some(("n", v)) => {
                n = Some(
                    v.parse::<usize>()
                        .map_err(|_| malformed(format!("bad n value `{v}`")))?,
                )
            }
            Some(("mode", v)) => {
                mode = Some(CooccurrenceMode::from_str(v).map_err(malformed)?);
            }
            _ => return Err(malformed(format!("bad header token `{token}`"))),
        }
    }
    let n = n.ok_or_else(|| malformed("header missing `n=`".into()))?;
    let mode = mode.ok_or_else(|| malformed("header missing `mode=`".into()))?;

    let mut matrix = CooccurrenceMatrix::zeros(n, mode);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| malformed(format!("expected {n} rows, got {i}")))?
            .map_err(|e| Error::io(path, e))?;
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != n {
            return Err(malformed(format!(
                "row {i}: expected {n} entries, got {}",
                values.len()
            )));
        }
        for (j, v) in values.iter().enumerate() {
            // u64 parsing rejects negative entries outright.
            matrix.counts[i * n + j] = v
                .parse::<u64>()
                .map_err(|_| malformed(format!("row {i}: bad count `{v}`")))?;
        }
    }
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{write_label_png, DatasetManifest, ManifestEntry};
    use crate::grid::LabelMap;
    use std::path::PathBuf;
    use tempfile::TempDir;

    /// Build an on-disk dataset from per-image label rasters.
    fn dataset_from_labels(dir: &Path, labels: &[Vec<u8>], w: usize, n: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for (idx, data) in labels.iter().enumerate() {
            let h = data.len() / w;
            let label = LabelMap::from_data(h, w, data.clone()).unwrap();
            let path = dir.join(format!("{idx}.png"));
            write_label_png(&path, &label).unwrap();
            entries.push(ManifestEntry {
                id: format!("{idx}"),
                image_path: PathBuf::from("unused.png"),
                label_path: path,
            });
        }
        DatasetManifest::new(entries, n)
    }

    /// Brute-force image-count oracle: for each class pair, scan every
    /// image for joint presence. No histogram sharing with the
    /// implementation under test.
    fn brute_force_image_count(manifest: &DatasetManifest) -> CooccurrenceMatrix {
        let n = manifest.n_classes;
        let mut m = CooccurrenceMatrix::zeros(n, CooccurrenceMode::ImageCount);
        let labels: Vec<LabelMap> = manifest
            .entries
            .iter()
            .map(|e| manifest.load_entry_label(e).unwrap())
            .collect();
        for i in 0..n {
            for j in 0..n {
                if i == usize::from(manifest.background_index)
                    || j == usize::from(manifest.background_index)
                    || i == usize::from(manifest.ignore_index)
                    || j == usize::from(manifest.ignore_index)
                {
                    continue;
                }
                for label in &labels {
                    let has_i = label.data().iter().any(|&v| usize::from(v) == i);
                    let has_j = label.data().iter().any(|&v| usize::from(v) == j);
                    if has_i && has_j {
                        m.add(i, j, 1);
                    }
                }
            }
        }
        m
    }

    /// Sets {1,2}, {1}, {2,3} as 1×2 / 1×1-padded rasters.
    fn three_image_manifest(dir: &Path) -> DatasetManifest {
        dataset_from_labels(
            dir,
            &[vec![1, 2], vec![1, 0], vec![2, 3]],
            2,
            4,
        )
    }

    #[test]
    fn three_image_example_image_count() {
        let dir = TempDir::new().unwrap();
        let manifest = three_image_manifest(dir.path());
        let m = compute_cooccurrence(&manifest, CooccurrenceMode::ImageCount).unwrap();
        assert_eq!(m.get(1, 2), 1);
        assert_eq!(m.get(2, 3), 1);
        assert_eq!(m.get(1, 3), 0);
        assert_eq!(m.get(1, 1), 2);
        assert_eq!(m.get(2, 2), 2);
        assert_eq!(m.get(3, 3), 1);
        // Background row/column untouched.
        for k in 0..4 {
            assert_eq!(m.get(0, k), 0);
            assert_eq!(m.get(k, 0), 0);
        }
        assert_eq!(m, brute_force_image_count(&manifest));
    }

    #[test]
    fn single_image_single_class_has_no_pairs() {
        let dir = TempDir::new().unwrap();
        let manifest = dataset_from_labels(dir.path(), &[vec![1, 1, 1, 0]], 2, 4);
        let m = compute_cooccurrence(&manifest, CooccurrenceMode::ImageCount).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(m.get(i, j), 0, "({i},{j})");
                }
            }
        }
        assert_eq!(m.get(1, 1), 1);
    }

    #[test]
    fn pixel_weighted_hand_oracle() {
        let dir = TempDir::new().unwrap();
        // img0: three 1s, two 2s; img1: four 1s; img2: one 2, five 3s.
        let manifest = dataset_from_labels(
            dir.path(),
            &[
                vec![1, 1, 1, 2, 2, 0],
                vec![1, 1, 1, 1, 0, 0],
                vec![2, 3, 3, 3, 3, 3],
            ],
            6,
            4,
        );
        let m = compute_cooccurrence(&manifest, CooccurrenceMode::PixelWeighted).unwrap();
        // counts[i][j] = pixels labeled i across images containing j.
        assert_eq!(m.get(1, 2), 3); // 1-pixels in img0 only
        assert_eq!(m.get(2, 1), 2); // 2-pixels in img0 only
        assert_eq!(m.get(1, 1), 7); // img0 + img1
        assert_eq!(m.get(2, 2), 3); // img0 + img2
        assert_eq!(m.get(3, 2), 5);
        assert_eq!(m.get(2, 3), 1);
        assert_eq!(m.get(3, 3), 5);
        assert_eq!(m.get(1, 3), 0);
        // The literal-equation mode is asymmetric, unlike image counting.
        assert_ne!(m.get(1, 2), m.get(2, 1));
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let manifest = DatasetManifest::new(vec![], 4);
        assert!(matches!(
            compute_cooccurrence(&manifest, CooccurrenceMode::ImageCount),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn manifest_order_does_not_matter() {
        let dir = TempDir::new().unwrap();
        let mut manifest = dataset_from_labels(
            dir.path(),
            &[vec![1, 2], vec![1, 0], vec![2, 3], vec![3, 1]],
            2,
            5,
        );
        let a = compute_cooccurrence(&manifest, CooccurrenceMode::ImageCount).unwrap();
        manifest.entries.reverse();
        let b = compute_cooccurrence(&manifest, CooccurrenceMode::ImageCount).unwrap();
        assert_eq!(a, b);
        let c = compute_cooccurrence(&manifest, CooccurrenceMode::PixelWeighted).unwrap();
        manifest.entries.swap(0, 2);
        let d = compute_cooccurrence(&manifest, CooccurrenceMode::PixelWeighted).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn pair_similarity_examples() {
        let dir = TempDir::new().unwrap();
        let manifest = three_image_manifest(dir.path());
        let m = compute_cooccurrence(&manifest, CooccurrenceMode::ImageCount).unwrap();

        let mut simple = CooccurrenceMatrix::zeros(4, CooccurrenceMode::ImageCount);
        simple.add(2, 1, 5);
        assert_eq!(
            pair_similarity(&simple, &BTreeSet::from([1]), &BTreeSet::from([2])).unwrap(),
            5
        );

        assert_eq!(
            pair_similarity(&m, &BTreeSet::new(), &BTreeSet::from([1, 2])).unwrap(),
            0
        );
        assert_eq!(
            pair_similarity(&m, &BTreeSet::from([1, 2]), &BTreeSet::new()).unwrap(),
            0
        );

        // Σ_{i∈{1,3}} Σ_{j∈{1,2}}: counts[1][1]+counts[1][2]+counts[3][1]+counts[3][2]
        assert_eq!(
            pair_similarity(&m, &BTreeSet::from([1, 2]), &BTreeSet::from([1, 3])).unwrap(),
            2 + 1 + 0 + 1
        );

        assert!(matches!(
            pair_similarity(&m, &BTreeSet::from([9]), &BTreeSet::from([1])),
            Err(Error::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn matrix_round_trip() {
        let dir = TempDir::new().unwrap();
        let manifest = three_image_manifest(dir.path());
        let m = compute_cooccurrence(&manifest, CooccurrenceMode::ImageCount).unwrap();
        let path = dir.path().join("m.txt");
        save_matrix(&m, &path).unwrap();
        assert_eq!(load_matrix(&path).unwrap(), m);

        // 21×21 with deterministic but scattered entries.
        let mut big = CooccurrenceMatrix::zeros(21, CooccurrenceMode::PixelWeighted);
        for i in 0..21 {
            for j in 0..21 {
                big.add(i, j, ((i * 31 + j * 17) % 97) as u64);
            }
        }
        let path = dir.path().join("big.txt");
        save_matrix(&big, &path).unwrap();
        let loaded = load_matrix(&path).unwrap();
        assert_eq!(loaded.counts(), big.counts());
        assert_eq!(loaded.mode(), CooccurrenceMode::PixelWeighted);
    }

    #[test]
    fn malformed_matrix_files_are_rejected() {
        let dir = TempDir::new().unwrap();
        let neg = dir.path().join("neg.txt");
        std::fs::write(&neg, "n=2 mode=image-count\n0 1\n-3 0\n").unwrap();
        assert!(matches!(
            load_matrix(&neg),
            Err(Error::MalformedMatrix { .. })
        ));

        let short = dir.path().join("short.txt");
        std::fs::write(&short, "n=3 mode=image-count\n0 0 0\n").unwrap();
        assert!(load_matrix(&short).is_err());

        let badmode = dir.path().join("badmode.txt");
        std::fs::write(&badmode, "n=1 mode=banana\n0\n").unwrap();
        assert!(load_matrix(&badmode).is_err());
    }

    #[test]
    fn random_datasets_match_brute_force() {
        use rand::Rng as _;
        let dir = TempDir::new().unwrap();
        let mut rng = crate::rng::rng_from_seed(77);
        for trial in 0..10 {
            let sub = dir.path().join(format!("t{trial}"));
            std::fs::create_dir(&sub).unwrap();
            let n_classes = rng.gen_range(2..=8);
            let n_images = rng.gen_range(1..=10);
            let labels: Vec<Vec<u8>> = (0..n_images)
                .map(|_| {
                    (0..24)
                        .map(|_| {
                            if rng.gen_bool(0.1) {
                                255
                            } else {
                                rng.gen_range(0..n_classes as u8)
                            }
                        })
                        .collect()
                })
                .collect();
            let manifest = dataset_from_labels(&sub, &labels, 6, n_classes);
            let m = compute_cooccurrence(&manifest, CooccurrenceMode::ImageCount).unwrap();
            assert_eq!(m, brute_force_image_count(&manifest), "trial {trial}");
            // Symmetry of image counting.
            for i in 0..n_classes {
                for j in 0..n_classes {
                    assert_eq!(m.get(i, j), m.get(j, i));
                }
            }
        }
    }

    #[test]
    fn top_pairs_orders_by_count() {
        let mut m = CooccurrenceMatrix::zeros(4, CooccurrenceMode::ImageCount);
        m.add(1, 2, 3);
        m.add(2, 1, 3);
        m.add(1, 3, 7);
        m.add(3, 1, 7);
        let top = m.top_pairs(10);
        assert_eq!(top, vec![(1, 3, 7), (1, 2, 3)]);
        assert_eq!(m.top_pairs(1).len(), 1);
    }
}
