//! Seeded synthetic segmentation data.
//!
//! Each image is a grid split into Voronoi regions; every region belongs to
//! one class and draws its pixels around a region-specific mode near the
//! class centre. Class centres sit on scaled basis vectors so any two are
//! `cluster_separation · cluster_width` apart.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::tensor::{child_rng, FeatureMatrix, GridShape, LabelMap, Matrix, ProbMatrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub grid: GridShape,
    /// Width of the raw per-pixel input vector.
    pub raw_dim: usize,
    pub train_images: usize,
    pub val_images: usize,
    /// Voronoi sites per image.
    pub regions: usize,
    /// Distance between class centres, in cluster widths.
    pub cluster_separation: f64,
    /// Full width of a cluster, spanning one standard deviation either side
    /// of its mode.
    pub cluster_width: f64,
    /// Std of region modes around their class centre, in pixel-noise stds.
    pub region_jitter: f64,
    /// Std of region modes along a class-specific direction that leans
    /// towards the next class while leaving the class-centre plane, in
    /// pixel-noise stds. Needs `raw_dim >= 2 · classes` when positive.
    pub class_spread: f64,
    /// Fraction of harness pixels given a wrong pseudo-label.
    pub noise_rate: f64,
    /// Fraction of training images that carry ground truth.
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            grid: GridShape {
                height: 16,
                width: 16,
                classes: 3,
                embed_dim: 16,
            },
            raw_dim: 8,
            train_images: 40,
            val_images: 10,
            regions: 6,
            cluster_separation: 4.0,
            cluster_width: 1.0,
            region_jitter: 1.5,
            class_spread: 0.0,
            noise_rate: 0.1,
            labeled_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::Param(format!("noise_rate {} outside [0, 0.5)", self.noise_rate)));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Param(format!(
                "labeled_fraction {} outside (0, 1]",
                self.labeled_fraction
            )));
        }
        if self.raw_dim < self.grid.classes {
            return Err(Error::Param(format!(
                "raw_dim {} cannot hold {} separated class centres",
                self.raw_dim, self.grid.classes
            )));
        }
        if self.regions == 0 || self.regions > self.grid.pixels() || self.grid.classes > self.grid.pixels() {
            return Err(Error::Param(format!(
                "{} regions / {} classes do not fit in {} pixels",
                self.regions,
                self.grid.classes,
                self.grid.pixels()
            )));
        }
        if self.train_images == 0 {
            return Err(Error::Param("train_images must be positive".into()));
        }
        if self.class_spread > 0.0 && self.raw_dim < 2 * self.grid.classes {
            return Err(Error::Param(format!(
                "class_spread needs raw_dim >= {}",
                2 * self.grid.classes
            )));
        }
        if !(self.cluster_separation >= 0.0
            && self.cluster_width > 0.0
            && self.region_jitter >= 0.0
            && self.class_spread >= 0.0)
        {
            return Err(Error::Param("cluster geometry must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn class_means(&self) -> Matrix {
        let r = self.cluster_separation * self.cluster_width / std::f64::consts::SQRT_2;
        Matrix::from_fn(self.grid.classes, self.raw_dim, |c, d| if c == d { r } else { 0.0 })
    }

    /// Unit direction along which regions of class `c` spread.
    pub fn spread_direction(&self, c: usize) -> Vec<f64> {
        let k = self.grid.classes;
        let mut u = vec![0.0; self.raw_dim];
        if k > 1 {
            u[(c + 1) % k] += 0.5;
            u[c] -= 0.5;
        }
        if self.raw_dim >= 2 * k {
            u[k + c] = std::f64::consts::FRAC_1_SQRT_2;
        }
        let n = crate::tensor::norm(&u);
        if n > 0.0 {
            u.iter_mut().for_each(|v| *v /= n);
        }
        u
    }

    pub fn labeled_count(&self) -> usize {
        ((self.labeled_fraction * self.train_images as f64).round() as usize).clamp(1, self.train_images)
    }
}

/// One image: raw pixel inputs in row-major grid order plus ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthBatch {
    pub images: Matrix,
    pub gt: LabelMap,
    pub is_labeled: bool,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub train: Vec<SynthBatch>,
    pub val: Vec<SynthBatch>,
}

impl SynthDataset {
    pub fn labeled(&self) -> impl Iterator<Item = &SynthBatch> {
        self.train.iter().filter(|b| b.is_labeled)
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &SynthBatch> {
        self.train.iter().filter(|b| !b.is_labeled)
    }
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn generate_image(spec: &SynthSpec, means: &Matrix, rng: &mut Rng) -> (Matrix, LabelMap) {
    let (h, w, c) = (spec.grid.height, spec.grid.width, spec.grid.classes);
    let sites: Vec<(f64, f64)> = (0..spec.regions)
        .map(|_| (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64))
        .collect();
    let mut site_class: Vec<usize> = (0..spec.regions).map(|_| rng.random_range(0..c)).collect();
    // Every class shows up when there are enough sites.
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(rng);
    for (s, &k) in site_class.iter_mut().zip(&perm) {
        *s = k;
    }
    let sd = spec.cluster_width / 2.0;
    let modes: Vec<Vec<f64>> = site_class
        .iter()
        .map(|&k| {
            let t = spec.class_spread * sd * gaussian(rng);
            let u = spec.spread_direction(k);
            means
                .row(k)
                .iter()
                .zip(&u)
                .map(|(&m, &ud)| m + t * ud + spec.region_jitter * sd * gaussian(rng))
                .collect()
        })
        .collect();

    let mut labels = Vec::with_capacity(h * w);
    let mut x = Matrix::zeros(h * w, spec.raw_dim);
    for r in 0..h {
        for col in 0..w {
            let (pr, pc) = (r as f64 + 0.5, col as f64 + 0.5);
            let site = (0..sites.len())
                .min_by(|&a, &b| {
                    let da = (sites[a].0 - pr).powi(2) + (sites[a].1 - pc).powi(2);
                    let db = (sites[b].0 - pr).powi(2) + (sites[b].1 - pc).powi(2);
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .expect("at least one site");
            let i = r * w + col;
            labels.push(site_class[site] as i64);
            for (d, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = modes[site][d] + sd * gaussian(rng);
            }
        }
    }
    (x, LabelMap::new(labels, c).expect("labels drawn in range"))
}

/// Deterministic dataset for `spec`: training images (a seeded subset of
/// which is labelled) and a validation split.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let means = spec.class_means();
    let mut rng = child_rng(spec.seed, 1);
    let mk = |rng: &mut Rng, labeled: bool| {
        let (images, gt) = generate_image(spec, &means, rng);
        SynthBatch {
            images,
            gt,
            is_labeled: labeled,
            height: spec.grid.height,
            width: spec.grid.width,
        }
    };
    let mut order: Vec<usize> = (0..spec.train_images).collect();
    order.shuffle(&mut child_rng(spec.seed, 2));
    let labeled: Vec<bool> = {
        let mut v = vec![false; spec.train_images];
        for &i in &order[..spec.labeled_count()] {
            v[i] = true;
        }
        v
    };
    let train = labeled.iter().map(|&l| mk(&mut rng, l)).collect();
    let mut vrng = child_rng(spec.seed, 3);
    let val = (0..spec.val_images).map(|_| mk(&mut vrng, true)).collect();
    Ok(SynthDataset {
        spec: spec.clone(),
        train,
        val,
    })
}

/// `n` points split evenly over the classes of `spec`, each drawn around
/// its class centre with the pixel noise of `spec` and no spatial layout.
pub fn gaussian_clusters(spec: &SynthSpec, n: usize, rng: &mut Rng) -> Result<(Matrix, LabelMap)> {
    spec.validate()?;
    let c = spec.grid.classes;
    let means = spec.class_means();
    let sd = spec.cluster_width / 2.0;
    let labels: Vec<usize> = (0..n).map(|i| i * c / n.max(1)).collect();
    let x = Matrix::from_fn(n, spec.raw_dim, |i, d| means[(labels[i], d)] + sd * gaussian(rng));
    Ok((x, LabelMap::from_classes(&labels, c)?))
}

/// Random refinement inputs of a given size: clustered features and
/// softmax probabilities that lean towards each point's cluster.
pub fn refine_instance(n: usize, dim: usize, classes: usize, seed: u64) -> Result<(FeatureMatrix, ProbMatrix)> {
    if n == 0 || dim == 0 || classes < 2 {
        return Err(Error::Param(format!(
            "refine instance needs n > 0, dim > 0 and two classes (got n={n}, dim={dim}, classes={classes})"
        )));
    }
    let mut rng = child_rng(seed, 0x4245_4e43);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let x = Matrix::from_fn(n, dim, |i, d| {
        let centre = if d == labels[i] % dim { 3.0 } else { 0.0 };
        centre + gaussian(&mut rng)
    });
    let mut p = Matrix::from_fn(n, classes, |i, k| {
        let logit = if k == labels[i] { 2.0 } else { 0.0 };
        logit + gaussian(&mut rng)
    });
    for i in 0..n {
        let row = p.row_mut(i);
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - top).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok((FeatureMatrix::new(x)?, ProbMatrix::new(p)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Gaussian noise std, in cluster widths.
    pub noise: f64,
    pub flip_prob: f64,
    /// Per-channel scale drawn from `[1 − s, 1 + s]`.
    pub scale_jitter: f64,
    /// Largest cutout area as a fraction of the image.
    pub cutout_max_frac: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            noise: 0.05,
            flip_prob: 0.5,
            scale_jitter: 0.3,
            cutout_max_frac: 0.25,
        }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        AugmentParams {
            noise: 0.0,
            flip_prob: 0.0,
            scale_jitter: 0.0,
            cutout_max_frac: 0.0,
        }
    }
}

/// Mirrors the grid left to right.
pub fn hflip(batch: &SynthBatch) -> SynthBatch {
    let (h, w) = (batch.height, batch.width);
    let src = |i: usize| {
        let (r, c) = (i / w, i % w);
        r * w + (w - 1 - c)
    };
    let idx: Vec<usize> = (0..h * w).map(src).collect();
    let labels: Vec<i64> = idx.iter().map(|&i| batch.gt.raw()[i]).collect();
    SynthBatch {
        images: batch.images.select_rows(&idx),
        gt: LabelMap::new(labels, batch.gt.classes()).expect("permutation of valid labels"),
        ..batch.clone()
    }
}

/// Gaussian jitter plus a random horizontal flip.
pub fn weak_augment(batch: &SynthBatch, params: &AugmentParams, width: f64, rng: &mut Rng) -> SynthBatch {
    let flip = rng.random::<f64>() < params.flip_prob;
    let mut out = if flip { hflip(batch) } else { batch.clone() };
    if params.noise > 0.0 {
        let s = params.noise * width;
        for v in out.images.as_mut_slice() {
            *v += s * gaussian(rng);
        }
    }
    out
}

/// Pixel rectangle `[row0, row1) × [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row0..self.row1).contains(&r) && (self.col0..self.col1).contains(&c)
    }
}

/// Zeroes the raw inputs inside `rect`.
pub fn cutout(batch: &SynthBatch, rect: Rect) -> SynthBatch {
    let mut out = batch.clone();
    for r in rect.row0..rect.row1.min(batch.height) {
        for c in rect.col0..rect.col1.min(batch.width) {
            out.images.row_mut(r * batch.width + c).fill(0.0);
        }
    }
    out
}

/// Photometric and occlusion perturbations applied on top of a weak view.
pub fn strong_extras(batch: &SynthBatch, params: &AugmentParams, rng: &mut Rng) -> SynthBatch {
    let mut out = batch.clone();
    if params.scale_jitter > 0.0 {
        let s = params.scale_jitter;
        let scales: Vec<f64> = (0..out.images.cols())
            .map(|_| 1.0 - s + 2.0 * s * rng.random::<f64>())
            .collect();
        for i in 0..out.images.rows() {
            out.images.row_mut(i).iter_mut().zip(&scales).for_each(|(v, k)| *v *= k);
        }
    }
    if params.cutout_max_frac > 0.0 {
        let (h, w) = (out.height, out.width);
        let area = (rng.random::<f64>() * params.cutout_max_frac * (h * w) as f64).floor() as usize;
        let rh = ((area as f64).sqrt().round() as usize).clamp(0, h);
        let rw = if rh == 0 { 0 } else { (area / rh).min(w) };
        if rh > 0 && rw > 0 {
            let row0 = rng.random_range(0..=h - rh);
            let col0 = rng.random_range(0..=w - rw);
            out = cutout(
                &out,
                Rect {
                    row0,
                    row1: row0 + rh,
                    col0,
                    col1: col0 + rw,
                },
            );
        }
    }
    out
}

/// Weak augmentation followed by per-channel scaling and a cutout.
pub fn strong_augment(batch: &SynthBatch, params: &AugmentParams, width: f64, rng: &mut Rng) -> SynthBatch {
    let weak = weak_augment(batch, params, width, rng);
    strong_extras(&weak, params, rng)
}

/// Flips exactly `⌊rate · n⌋` uniformly chosen pixels to a uniformly chosen
/// different class. Returns the noisy labels and the flipped indices (sorted).
pub fn inject_label_noise(labels: &LabelMap, rate: f64, rng: &mut Rng) -> Result<(LabelMap, Vec<usize>)> {
    let candidates: Vec<usize> = (0..labels.len()).filter(|&i| labels.get(i).is_some()).collect();
    inject_among(labels, rate, &candidates, rng)
}

fn inject_among(
    labels: &LabelMap,
    rate: f64,
    candidates: &[usize],
    rng: &mut Rng,
) -> Result<(LabelMap, Vec<usize>)> {
    if !(0.0..0.5).contains(&rate) {
        return Err(Error::Param(format!("noise rate {rate} outside [0, 0.5)")));
    }
    let count = ((rate * labels.len() as f64).floor() as usize).min(candidates.len());
    if count > 0 && labels.classes() < 2 {
        return Err(Error::Param("cannot flip labels with a single class".into()));
    }
    let mut flips: Vec<usize> = candidates.choose_multiple(rng, count).copied().collect();
    flips.sort_unstable();
    let mut noisy = labels.clone();
    let c = labels.classes();
    for &i in &flips {
        let old = labels.get(i).expect("candidates are labelled");
        let mut new = rng.random_range(0..c - 1);
        if new >= old {
            new += 1;
        }
        noisy.labels_mut()[i] = new as i64;
    }
    Ok((noisy, flips))
}

/// Confidence model for the noisy pseudo-label harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSpec {
    pub noise_rate: f64,
    /// Flips are drawn from this fraction of pixels closest to their class mean.
    pub interior_fraction: f64,
    /// Confidence range of correctly labelled pixels.
    pub clean_conf: (f64, f64),
    /// Confidence range of flipped pixels.
    pub flip_conf: (f64, f64),
}

impl Default for HarnessSpec {
    fn default() -> Self {
        HarnessSpec {
            noise_rate: 0.1,
            interior_fraction: 0.5,
            clean_conf: (0.96, 0.995),
            flip_conf: (0.55, 0.8),
        }
    }
}

/// Pseudo-labels with known injected errors.
#[derive(Clone, Debug)]
pub struct NoisyHarness {
    pub features: Matrix,
    pub gt: LabelMap,
    pub noisy: LabelMap,
    pub probs: ProbMatrix,
    pub flips: Vec<usize>,
}

/// Flips interior pixels of `gt` and turns the noisy labels into probability
/// rows: the labelled class gets a drawn confidence and the rest is spread
/// evenly.
pub fn noisy_harness(features: &Matrix, gt: &LabelMap, spec: &HarnessSpec, rng: &mut Rng) -> Result<NoisyHarness> {
    let n = gt.len();
    if features.rows() != n {
        return Err(Error::Dimension(format!("{} feature rows vs {n} labels", features.rows())));
    }
    let c = gt.classes();
    if c < 2 {
        return Err(Error::Param("harness needs at least two classes".into()));
    }
    let protos = crate::losses::compute_prototypes(features, gt)?;
    let mut by_dist: Vec<(usize, f64)> = (0..n)
        .filter_map(|i| {
            gt.get(i).map(|y| {
                let d: f64 = features
                    .row(i)
                    .iter()
                    .zip(protos.means.row(y))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                (i, d)
            })
        })
        .collect();
    by_dist.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let keep = ((spec.interior_fraction * by_dist.len() as f64).ceil() as usize).min(by_dist.len());
    let mut candidates: Vec<usize> = by_dist[..keep].iter().map(|&(i, _)| i).collect();
    candidates.sort_unstable();
    let (noisy, flips) = inject_among(gt, spec.noise_rate, &candidates, rng)?;

    let mut is_flip = vec![false; n];
    flips.iter().for_each(|&i| is_flip[i] = true);
    let draw = |rng: &mut Rng, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    let mut p = Matrix::zeros(n, c);
    for i in 0..n {
        let y = noisy.get(i).unwrap_or(0);
        let conf = draw(rng, if is_flip[i] { spec.flip_conf } else { spec.clean_conf });
        let rest = (1.0 - conf) / (c - 1) as f64;
        for k in 0..c {
            p[(i, k)] = if k == y { conf } else { rest };
        }
    }
    Ok(NoisyHarness {
        features: features.clone(),
        gt: gt.clone(),
        noisy,
        probs: ProbMatrix::new(p)?,
        flips,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleEntry {
    pub role: String,
    pub split: String,
    pub index: usize,
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labeled: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BundleManifest {
    pub spec: SynthSpec,
    pub seed: u64,
    pub harness: HarnessSpec,
    pub files: Vec<BundleEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes every image as `<split>_<idx>_{x,y}.npy` plus the noisy harness
/// built from the first training image, and a JSON manifest.
pub fn write_bundle(ds: &SynthDataset, harness: &HarnessSpec, dir: &Path) -> Result<BundleManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut put = |role: &str, split: &str, index: usize, name: String, labeled: Option<bool>| {
        files.push(BundleEntry {
            role: role.into(),
            split: split.into(),
            index,
            path: name,
            labeled,
        });
    };
    for (split, batches) in [("train", &ds.train), ("val", &ds.val)] {
        for (i, b) in batches.iter().enumerate() {
            let x = format!("{split}_{i:03}_x.npy");
            let y = format!("{split}_{i:03}_y.npy");
            npy::save_matrix(dir.join(&x), &b.images)?;
            npy::save_labels(dir.join(&y), &b.gt)?;
            put("inputs", split, i, x, Some(b.is_labeled));
            put("labels", split, i, y, None);
        }
    }
    let first = &ds.train[0];
    let h = noisy_harness(&first.images, &first.gt, harness, &mut child_rng(ds.spec.seed, 4))?;
    npy::save_matrix(dir.join("harness_features.npy"), &h.features)?;
    npy::save_matrix(dir.join("harness_probs.npy"), h.probs.matrix())?;
    npy::save_labels(dir.join("harness_gt.npy"), &h.gt)?;
    npy::save_labels(dir.join("harness_noisy.npy"), &h.noisy)?;
    npy::write(
        dir.join("harness_flips.npy"),
        &npy::NpyArray {
            shape: vec![h.flips.len()],
            data: npy::NpyData::I64(h.flips.iter().map(|&i| i as i64).collect()),
        },
    )?;
    for role in ["features", "probs", "gt", "noisy", "flips"] {
        put(&format!("harness_{role}"), "harness", 0, format!("harness_{role}.npy"), None);
    }
    let manifest = BundleManifest {
        spec: ds.spec.clone(),
        seed: ds.spec.seed,
        harness: harness.clone(),
        files,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a bundle written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<SynthDataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BundleManifest = serde_json::from_str(&text)?;
    let spec = manifest.spec.clone();
    let c = spec.grid.classes;
    let find = |split: &str, role: &str, i: usize| -> Result<&BundleEntry> {
        manifest
            .files
            .iter()
            .find(|e| e.split == split && e.role == role && e.index == i)
            .ok_or_else(|| Error::Format(format!("manifest lacks {split}/{role}/{i}")))
    };
    let load = |split: &str, count: usize| -> Result<Vec<SynthBatch>> {
        (0..count)
            .map(|i| {
                let x = find(split, "inputs", i)?;
                let y = find(split, "labels", i)?;
                Ok(SynthBatch {
                    images: npy::load_matrix(dir.join(&x.path))?,
                    gt: npy::load_labels(dir.join(&y.path), c)?,
                    is_labeled: x.labeled.unwrap_or(false),
                    height: spec.grid.height,
                    width: spec.grid.width,
                })
            })
            .collect()
    };
    Ok(SynthDataset {
        train: load("train", spec.train_images)?,
        val: load("val", spec.val_images)?,
        spec,
    })
}

pub fn harness_paths(dir: &Path) -> [PathBuf; 5] {
    ["features", "probs", "gt", "noisy", "flips"].map(|r| dir.join(format!("harness_{r}.npy")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn small(classes: usize) -> SynthSpec {
        SynthSpec {
            grid: GridShape { height: 10, width: 20, classes, embed_dim: 4 },
            raw_dim: 4,
            train_images: 3,
            val_images: 1,
            ..Default::default()
        }
    }

    #[test]
    fn single_class_is_uniform() {
        let ds = generate(&small(1)).unwrap();
        assert!(ds.train.iter().all(|b| b.gt.raw().iter().all(|&l| l == 0)));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a.train, b.train);
        let c = generate(&SynthSpec { seed: 9, ..small(3) }).unwrap();
        assert_ne!(a.train[0].images, c.train[0].images);
    }

    #[test]
    fn zero_separation_overlaps() {
        let spec = SynthSpec { cluster_separation: 0.0, ..small(2) };
        assert!(spec.class_means().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearest_centroid_separates_at_four_widths() {
        let spec = SynthSpec {
            grid: GridShape { height: 20, width: 20, classes: 2, embed_dim: 4 },
            raw_dim: 4,
            train_images: 1,
            val_images: 0,
            region_jitter: 0.0,
            ..Default::default()
        };
        let ds = generate(&spec).unwrap();
        let b = &ds.train[0];
        let p = crate::losses::compute_prototypes(&b.images, &b.gt).unwrap();
        let correct = (0..b.gt.len())
            .filter(|&i| {
                let d = |c: usize| -> f64 {
                    b.images.row(i).iter().zip(p.means.row(c)).map(|(a, m)| (a - m).powi(2)).sum()
                };
                let pred = if d(0) <= d(1) { 0 } else { 1 };
                b.gt.get(i) == Some(pred)
            })
            .count();
        assert!(correct as f64 / 400.0 >= 0.99, "{correct}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate(&SynthSpec { noise_rate: 0.9, ..small(2) }).is_err());
        assert!(generate(&SynthSpec { regions: 1000, ..small(2) }).is_err());
        assert!(generate(&SynthSpec { labeled_fraction: 0.0, ..small(2) }).is_err());
    }

    #[test]
    fn null_augmentation_is_identity() {
        let ds = generate(&small(2)).unwrap();
        let b = &ds.train[0];
        let mut rng = seeded_rng(1);
        assert_eq!(&weak_augment(b, &AugmentParams::none(), 1.0, &mut rng), b);
        assert_eq!(&strong_augment(b, &AugmentParams::none(), 1.0, &mut rng), b);
    }

    #[test]
    fn double_flip_restores() {
        let ds = generate(&small(3)).unwrap();
        let b = &ds.train[1];
        assert_eq!(&hflip(&hflip(b)), b);
        assert_ne!(&hflip(b), b);
    }

    #[test]
    fn cutout_zeroes_exact_rectangle() {
        let ds = generate(&small(2)).unwrap();
        let b = &ds.train[0];
        let rect = Rect { row0: 2, row1: 5, col0: 3, col1: 9 };
        let out = cutout(b, rect);
        for r in 0..b.height {
            for c in 0..b.width {
                let i = r * b.width + c;
                if rect.contains(r, c) {
                    assert!(out.images.row(i).iter().all(|&v| v == 0.0));
                } else {
                    assert_eq!(out.images.row(i), b.images.row(i));
                }
            }
        }
    }

    #[test]
    fn noise_injection_counts() {
        let l = LabelMap::from_classes(&(0..200).map(|i| i % 3).collect::<Vec<_>>(), 3).unwrap();
        let mut rng = seeded_rng(3);
        let (same, none) = inject_label_noise(&l, 0.0, &mut rng).unwrap();
        assert_eq!(same, l);
        assert!(none.is_empty());

        let (noisy, flips) = inject_label_noise(&l, 0.1, &mut rng).unwrap();
        assert_eq!(flips.len(), 20);
        let diff: Vec<usize> = (0..200).filter(|&i| noisy.raw()[i] != l.raw()[i]).collect();
        assert_eq!(diff, flips);
        assert!(inject_label_noise(&l, 0.5, &mut rng).is_err());
    }

    #[test]
    fn harness_rows_are_probabilities() {
        let ds = generate(&small(2)).unwrap();
        let b = &ds.train[0];
        let h = noisy_harness(&b.images, &b.gt, &HarnessSpec::default(), &mut seeded_rng(5)).unwrap();
        assert_eq!(h.flips.len(), 20);
        assert_eq!(h.probs.argmax_rows().iter().map(|&c| c as i64).collect::<Vec<_>>(), h.noisy.raw());
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(2)).unwrap();
        write_bundle(&ds, &HarnessSpec::default(), dir.path()).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.train, ds.train);
        assert_eq!(back.val, ds.val);
        assert_eq!(back.spec, ds.spec);
    }
}
