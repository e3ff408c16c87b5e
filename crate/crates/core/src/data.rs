//! Seeded synthetic multi-label images and the on-disk dataset format.
//!
//! Every image is Gaussian background noise plus one fixed per-class stamp
//! for each positive class, each stamp in its own grid cell. Cells never
//! overlap, so co-occurrence is the only interaction between classes.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.txt
//! train/0000.sample
//! test/0000.sample
//! ```
//!
//! A `.sample` file is `image_side²` little-endian `f64` pixels (row-major)
//! followed by one byte (0 or 1) per class. `manifest.txt` is plain text:
//!
//! ```text
//! p2lca-dataset 1
//! image_side 16
//! classes 12
//! train 600
//! test 300
//! spec_hash <hex | external>
//! content_hash <hex>            (optional; checked when present)
//! class <id> <name> <train positives> <test positives>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::p2l::SemanticInit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub image_side: usize,
    /// Stamp and grid-cell side in pixels.
    pub cell_side: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    /// Seeds the per-class stamp patterns (the "domain" of the classes).
    pub stamp_seed: u64,
    pub stamp_amplitude: f64,
    pub noise_sigma: f64,
    /// Each class needs at least this many positives in both splits.
    pub min_positive: usize,
    pub max_attempts: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 12,
            image_side: 16,
            cell_side: 4,
            n_train: 600,
            n_test: 300,
            min_labels: 1,
            max_labels: 3,
            stamp_seed: 7,
            stamp_amplitude: 1.0,
            noise_sigma: 0.3,
            min_positive: 20,
            max_attempts: 32,
        }
    }
}

impl SyntheticSpec {
    pub fn cells(&self) -> usize {
        let g = self.image_side / self.cell_side.max(1);
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 || self.image_side == 0 || self.cell_side == 0 {
            return fail("n_classes, image_side and cell_side must be positive".into());
        }
        if self.image_side % self.cell_side != 0 {
            return fail("image_side must be a multiple of cell_side".into());
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels {
            return fail("labels per image must satisfy 1 <= min <= max".into());
        }
        if self.max_labels > self.cells() {
            return fail(format!(
                "{} stamps per image exceed grid capacity {}",
                self.max_labels,
                self.cells()
            ));
        }
        if self.max_labels > self.n_classes {
            return fail("max_labels exceeds n_classes".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be >= 0".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the spec together with the generation seed.
    pub fn hash(&self, seed: u64) -> String {
        let json = serde_json::to_string(&(self, seed)).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// The fixed `cell_side²` pattern of every class, entries `±amplitude`.
    pub fn stamps(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.stamp_seed);
        let len = self.cell_side * self.cell_side;
        (0..self.n_classes)
            .map(|_| {
                (0..len)
                    .map(|_| if rng.random::<bool>() { self.stamp_amplitude } else { -self.stamp_amplitude })
                    .collect()
            })
            .collect()
    }
}

/// Stand-in class embeddings: each class's clean stamp, flattened. They
/// play the role of precomputed text features for semantic prompt
/// initialization.
pub fn stamp_embeddings(spec: &SyntheticSpec) -> Result<SemanticInit> {
    SemanticInit::new(spec.stamps().into_iter().enumerate().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Vec<f64>,
    /// One entry per class id, 0 or 1.
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 1)
            .map(|(c, _)| c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Class names; index is the class id, names ascend lexicographically.
    pub class_names: Vec<String>,
    pub image_side: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Generation provenance, or `"external"`.
    pub spec_hash: String,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for s in self.split(split) {
            for c in s.positives() {
                counts[c] += 1;
            }
        }
        counts
    }

    /// Positives per class in both splits, one line per class.
    pub fn histogram(&self) -> String {
        let (tr, te) = (self.class_counts(Split::Train), self.class_counts(Split::Test));
        let mut out = String::new();
        for (c, name) in self.class_names.iter().enumerate() {
            let _ = writeln!(out, "{c:>3} {name:<16} train {:>5} test {:>5}", tr[c], te[c]);
        }
        out
    }

    fn sample_bytes(s: &Sample) -> Vec<u8> {
        let mut out = Vec::with_capacity(s.image.len() * 8 + s.labels.len());
        for v in &s.image {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.labels);
        out
    }

    /// Provenance hash of this dataset after `shift`.
    pub fn spec_hash_with_shift(&self, shift: &DomainShift) -> String {
        let json = serde_json::to_string(&(&self.spec_hash, shift)).expect("shift serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Hex SHA-256 over every sample file's bytes, train then test.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in self.train.iter().chain(&self.test) {
            h.update(Self::sample_bytes(s));
        }
        hex::encode(h.finalize())
    }
}

fn class_name(c: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(2);
    format!("class_{c:0width$}")
}

fn generate_split(
    spec: &SyntheticSpec,
    stamps: &[Vec<f64>],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    let side = spec.image_side;
    let cs = spec.cell_side;
    let grid = side / cs;
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    (0..count)
        .map(|_| {
            let mut image: Vec<f64> = (0..side * side).map(|_| noise.sample(rng)).collect();
            let k = rng.random_range(spec.min_labels..=spec.max_labels);
            let classes = sample_indices(rng, spec.n_classes, k).into_vec();
            let cells = sample_indices(rng, spec.cells(), k).into_vec();
            let mut labels = vec![0u8; spec.n_classes];
            for (&c, &cell) in classes.iter().zip(&cells) {
                labels[c] = 1;
                let (gy, gx) = (cell / grid, cell % grid);
                for y in 0..cs {
                    for x in 0..cs {
                        image[(gy * cs + y) * side + gx * cs + x] += stamps[c][y * cs + x];
                    }
                }
            }
            Sample { image, labels }
        })
        .collect()
}

/// Generates both splits, redrawing until every class reaches
/// `min_positive` positives in each split.
pub fn generate_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let stamps = spec.stamps();
    for attempt in 0..spec.max_attempts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt as u64));
        let train = generate_split(spec, &stamps, spec.n_train, &mut rng);
        let test = generate_split(spec, &stamps, spec.n_test, &mut rng);
        let ds = Dataset {
            class_names: (0..spec.n_classes).map(|c| class_name(c, spec.n_classes)).collect(),
            image_side: spec.image_side,
            train,
            test,
            spec_hash: spec.hash(seed),
        };
        let enough = |split| ds.class_counts(split).iter().all(|&n| n >= spec.min_positive);
        if enough(Split::Train) && enough(Split::Test) {
            return Ok(ds);
        }
    }
    Err(Error::Config(format!(
        "could not reach {} positives per class in {} attempts",
        spec.min_positive, spec.max_attempts
    )))
}

/// Affine intensity change plus a fixed shuffle of pixel positions inside
/// every `cell_side × cell_side` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub contrast: f64,
    pub offset: f64,
    pub cell_side: usize,
    /// Seed of the in-cell pixel permutation; `None` keeps pixel positions.
    pub permutation_seed: Option<u64>,
}

impl DomainShift {
    pub fn identity(cell_side: usize) -> Self {
        Self {
            contrast: 1.0,
            offset: 0.0,
            cell_side,
            permutation_seed: None,
        }
    }

    fn permutation(&self) -> Vec<usize> {
        let len = self.cell_side * self.cell_side;
        let mut perm: Vec<usize> = (0..len).collect();
        if let Some(seed) = self.permutation_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..len).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
        }
        perm
    }

    fn permute_cells(&self, image: &[f64], side: usize, perm: &[usize]) -> Vec<f64> {
        let cs = self.cell_side;
        let mut out = vec![0.0; image.len()];
        for gy in 0..side / cs {
            for gx in 0..side / cs {
                for (dst, &src) in perm.iter().enumerate() {
                    let at = |i: usize| (gy * cs + i / cs) * side + gx * cs + i % cs;
                    out[at(dst)] = image[at(src)];
                }
            }
        }
        out
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        self.check(ds)?;
        let perm = self.permutation();
        Ok(self.map_images(ds, |img| {
            self.permute_cells(img, ds.image_side, &perm)
                .into_iter()
                .map(|v| self.contrast * v + self.offset)
                .collect()
        }))
    }

    pub fn invert(&self, ds: &Dataset) -> Result<Dataset> {
        self.check(ds)?;
        let perm = self.permutation();
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.map_images(ds, |img| {
            let unscaled: Vec<f64> = img.iter().map(|v| (v - self.offset) / self.contrast).collect();
            self.permute_cells(&unscaled, ds.image_side, &inverse)
        }))
    }

    fn check(&self, ds: &Dataset) -> Result<()> {
        if self.cell_side == 0 || ds.image_side % self.cell_side != 0 {
            return Err(Error::Config("shift cell_side must divide image_side".into()));
        }
        if self.contrast == 0.0 {
            return Err(Error::Config("shift contrast must be non-zero".into()));
        }
        Ok(())
    }

    fn map_images(&self, ds: &Dataset, f: impl Fn(&[f64]) -> Vec<f64>) -> Dataset {
        let map = |samples: &[Sample]| {
            samples
                .iter()
                .map(|s| Sample {
                    image: f(&s.image),
                    labels: s.labels.clone(),
                })
                .collect()
        };
        Dataset {
            train: map(&ds.train),
            test: map(&ds.test),
            ..ds.clone()
        }
    }
}

fn sample_path(dir: &Path, split: Split, i: usize) -> PathBuf {
    dir.join(split.dir()).join(format!("{i:04}.sample"))
}

pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for split in [Split::Train, Split::Test] {
        let sub = dir.join(split.dir());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, s) in ds.split(split).iter().enumerate() {
            let path = sample_path(dir, split, i);
            fs::write(&path, Dataset::sample_bytes(s)).map_err(|e| Error::io(&path, e))?;
        }
    }
    let (tr, te) = (ds.class_counts(Split::Train), ds.class_counts(Split::Test));
    let mut m = String::new();
    let _ = writeln!(m, "p2lca-dataset 1");
    let _ = writeln!(m, "image_side {}", ds.image_side);
    let _ = writeln!(m, "classes {}", ds.n_classes());
    let _ = writeln!(m, "train {}", ds.train.len());
    let _ = writeln!(m, "test {}", ds.test.len());
    let _ = writeln!(m, "spec_hash {}", ds.spec_hash);
    let _ = writeln!(m, "content_hash {}", ds.content_hash());
    for (c, name) in ds.class_names.iter().enumerate() {
        let _ = writeln!(m, "class {c} {name} {} {}", tr[c], te[c]);
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, m).map_err(|e| Error::io(&path, e))
}

struct Manifest {
    image_side: usize,
    classes: Vec<(usize, String, usize, usize)>,
    train: usize,
    test: usize,
    spec_hash: String,
    content_hash: Option<String>,
}

fn parse_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "p2lca-dataset 1" => {}
        _ => return Err(err(1, "expected header `p2lca-dataset 1`".into())),
    }
    let (mut side, mut n_classes, mut train, mut test) = (None, None, None, None);
    let mut spec_hash = None;
    let mut content_hash = None;
    let mut classes = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        let num = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| err(line_no, format!("bad number {s:?}")))
        };
        match fields.as_slice() {
            [] => {}
            ["image_side", v] => side = Some(num(v)?),
            ["classes", v] => n_classes = Some(num(v)?),
            ["train", v] => train = Some(num(v)?),
            ["test", v] => test = Some(num(v)?),
            ["spec_hash", v] => spec_hash = Some(v.to_string()),
            ["content_hash", v] => content_hash = Some(v.to_string()),
            ["class", id, name, tr, te] => {
                classes.push((num(id)?, name.to_string(), num(tr)?, num(te)?));
            }
            _ => return Err(err(line_no, format!("unrecognized line {raw:?}"))),
        }
    }
    let need = |v: Option<usize>, key: &str| v.ok_or_else(|| err(0, format!("missing `{key}`")));
    let n_classes = need(n_classes, "classes")?;
    if classes.len() != n_classes {
        return Err(err(0, format!("{} class lines for {n_classes} classes", classes.len())));
    }
    let mut ids: Vec<usize> = classes.iter().map(|c| c.0).collect();
    ids.sort_unstable();
    if ids != (0..n_classes).collect::<Vec<_>>() {
        return Err(err(0, "class ids must be 0..classes-1 without gaps".into()));
    }
    classes.sort_by_key(|c| c.0);
    Ok(Manifest {
        image_side: need(side, "image_side")?,
        classes,
        train: need(train, "train")?,
        test: need(test, "test")?,
        spec_hash: spec_hash.unwrap_or_else(|| "external".into()),
        content_hash,
    })
}

fn read_split(dir: &Path, split: Split, m: &Manifest) -> Result<Vec<Sample>> {
    let expected = match split {
        Split::Train => m.train,
        Split::Test => m.test,
    };
    let sub = dir.join(split.dir());
    let on_disk = fs::read_dir(&sub)
        .map_err(|e| Error::io(&sub, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "sample"))
        .count();
    if on_disk != expected {
        return Err(Error::Dataset {
            path: sub,
            msg: format!("manifest lists {expected} samples, found {on_disk}"),
        });
    }
    let pixels = m.image_side * m.image_side;
    let n = m.classes.len();
    (0..expected)
        .map(|i| {
            let path = sample_path(dir, split, i);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != pixels * 8 + n {
                return Err(Error::Dataset {
                    path,
                    msg: format!("expected {} bytes, found {}", pixels * 8 + n, bytes.len()),
                });
            }
            let image = bytes[..pixels * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let labels = bytes[pixels * 8..].to_vec();
            if labels.iter().any(|&l| l > 1) {
                return Err(Error::Dataset {
                    path,
                    msg: "label bytes must be 0 or 1".into(),
                });
            }
            Ok(Sample { image, labels })
        })
        .collect()
}

/// Loads a dataset directory, validating counts and (when present) the
/// content hash. Classes are re-indexed in lexicographic name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m = parse_manifest(&text, &mpath)?;
    let train = read_split(dir, Split::Train, &m)?;
    let test = read_split(dir, Split::Test, &m)?;
    let mut ds = Dataset {
        class_names: m.classes.iter().map(|c| c.1.clone()).collect(),
        image_side: m.image_side,
        train,
        test,
        spec_hash: m.spec_hash.clone(),
    };
    if let Some(expected) = &m.content_hash {
        let actual = ds.content_hash();
        if &actual != expected {
            return Err(Error::Dataset {
                path: dir.to_path_buf(),
                msg: format!("content hash mismatch: manifest {expected}, files {actual}"),
            });
        }
    }
    let (tr, te) = (ds.class_counts(Split::Train), ds.class_counts(Split::Test));
    for (c, name, mtr, mte) in &m.classes {
        if tr[*c] != *mtr || te[*c] != *mte {
            return Err(Error::Dataset {
                path: mpath.clone(),
                msg: format!(
                    "class {name}: manifest counts {mtr}/{mte}, files {}/{}",
                    tr[*c], te[*c]
                ),
            });
        }
    }
    sort_classes_by_name(&mut ds);
    Ok(ds)
}

fn sort_classes_by_name(ds: &mut Dataset) {
    let mut order: Vec<usize> = (0..ds.n_classes()).collect();
    order.sort_by(|&a, &b| ds.class_names[a].cmp(&ds.class_names[b]));
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return;
    }
    ds.class_names = order.iter().map(|&o| ds.class_names[o].clone()).collect();
    for s in ds.train.iter_mut().chain(ds.test.iter_mut()) {
        s.labels = order.iter().map(|&o| s.labels[o]).collect();
    }
}
