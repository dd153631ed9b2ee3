//! Synthetic phantoms, dataset splits and the on-disk formats.
//!
//! A phantom is a 2D slice with one rotated liver ellipse, a few circular
//! tumors clipped to the liver, and optional liver-free distractor ellipses
//! in the background. Everything is a pure function of `(spec, index)`.

mod checkpoint;
mod pgm;

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_network, save_checkpoint,
    save_network, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use pgm::{
    decode_image_pgm, decode_label_pgm, decode_pgm, encode_image_pgm, encode_label_pgm,
    load_image_pgm, load_label_pgm, save_image_pgm, save_label_pgm, RawPgm,
};

use crate::error::{Error, Result};
use crate::image::{Image, Label, LabelMap};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intensity {
    pub mean: f64,
    pub sigma: f64,
}

impl Intensity {
    pub const fn new(mean: f64, sigma: f64) -> Self {
        Intensity { mean, sigma }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    /// Liver semi-axes as fractions of `size`.
    pub liver_radius_range: (f64, f64),
    pub tumor_count_range: (u32, u32),
    pub tumor_radius_range: (f64, f64),
    pub distractor_count_range: (u32, u32),
    pub distractor_radius_range: (f64, f64),
    pub background: Intensity,
    pub liver: Intensity,
    pub tumor: Intensity,
    /// Background-labelled blobs, brighter than background but darker than
    /// liver.
    pub distractor: Intensity,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 64,
            liver_radius_range: (0.18, 0.32),
            tumor_count_range: (0, 3),
            tumor_radius_range: (0.04, 0.09),
            distractor_count_range: (0, 2),
            distractor_radius_range: (0.05, 0.12),
            background: Intensity::new(0.15, 0.05),
            liver: Intensity::new(0.55, 0.05),
            tumor: Intensity::new(0.85, 0.05),
            distractor: Intensity::new(0.35, 0.05),
            seed: 42,
        }
    }
}

fn check_fraction_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi < 0.5) {
        return Err(Error::InvalidConfig(format!(
            "{name} must satisfy 0 < low <= high < 0.5, got ({lo}, {hi})"
        )));
    }
    Ok(())
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::InvalidConfig(format!(
                "phantom size must be at least 8, got {}",
                self.size
            )));
        }
        check_fraction_range("liver_radius_range", self.liver_radius_range)?;
        check_fraction_range("tumor_radius_range", self.tumor_radius_range)?;
        check_fraction_range("distractor_radius_range", self.distractor_radius_range)?;
        for (name, (lo, hi)) in [
            ("tumor_count_range", self.tumor_count_range),
            ("distractor_count_range", self.distractor_count_range),
        ] {
            if lo > hi {
                return Err(Error::InvalidConfig(format!(
                    "{name} low {lo} exceeds high {hi}"
                )));
            }
        }
        if self.tumor_radius_range.1 >= self.liver_radius_range.0 {
            return Err(Error::InvalidConfig(
                "tumor radii must stay below the smallest liver radius".into(),
            ));
        }
        let regions = [
            ("background", self.background),
            ("liver", self.liver),
            ("tumor", self.tumor),
            ("distractor", self.distractor),
        ];
        for (name, r) in regions {
            if !(r.mean.is_finite() && r.sigma.is_finite() && r.sigma >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} intensity needs finite mean and sigma >= 0"
                )));
            }
        }
        for (i, (na, a)) in regions[..3].iter().enumerate() {
            for (nb, b) in &regions[i + 1..3] {
                let gap = (a.mean - b.mean).abs();
                if gap < 2.0 * a.sigma.max(b.sigma) {
                    return Err(Error::InvalidConfig(format!(
                        "{na} and {nb} means are only {gap} apart, need 2 sigma"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rotated ellipse in unit coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Strict interior test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v < 1.0
    }

    fn bound(&self) -> f64 {
        self.rx.max(self.ry)
    }
}

/// Geometry of one phantom, kept for analytic checks.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomLayout {
    pub liver: Ellipse,
    /// Tumor discs `(cx, cy, r)`; rendered only where they meet the liver.
    pub tumors: Vec<(f64, f64, f64)>,
    pub distractors: Vec<Ellipse>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
}

/// Pixel `(x, y)` center in unit coordinates.
fn pixel_center(i: usize, size: usize) -> f64 {
    (i as f64 + 0.5) / size as f64
}

fn layout(spec: &PhantomSpec, rng: &mut SeededRng) -> PhantomLayout {
    let (lr0, lr1) = spec.liver_radius_range;
    let rx = rng.uniform_in(lr0, lr1);
    let ry = rng.uniform_in(lr0, lr1);
    let margin = rx.max(ry);
    let liver = Ellipse {
        cx: rng.uniform_in(margin, 1.0 - margin),
        cy: rng.uniform_in(margin, 1.0 - margin),
        rx,
        ry,
        angle: rng.uniform_in(0.0, PI),
    };

    let n_tumors = rng.int_in(spec.tumor_count_range.0, spec.tumor_count_range.1);
    let (s, c) = liver.angle.sin_cos();
    let tumors = (0..n_tumors)
        .map(|_| {
            // Uniform point in the liver shrunk to 60 %.
            let rho = 0.6 * rng.uniform().sqrt();
            let phi = rng.uniform_in(0.0, 2.0 * PI);
            let (u, v) = (rho * phi.cos() * liver.rx, rho * phi.sin() * liver.ry);
            let r = rng.uniform_in(spec.tumor_radius_range.0, spec.tumor_radius_range.1);
            (liver.cx + u * c - v * s, liver.cy + u * s + v * c, r)
        })
        .collect();

    let n_distractors = rng.int_in(spec.distractor_count_range.0, spec.distractor_count_range.1);
    let (dr0, dr1) = spec.distractor_radius_range;
    let mut distractors = Vec::new();
    for _ in 0..n_distractors {
        for _attempt in 0..32 {
            let rx = rng.uniform_in(dr0, dr1);
            let ry = rng.uniform_in(dr0, dr1);
            let m = rx.max(ry);
            let d = Ellipse {
                cx: rng.uniform_in(m, 1.0 - m),
                cy: rng.uniform_in(m, 1.0 - m),
                rx,
                ry,
                angle: rng.uniform_in(0.0, PI),
            };
            let dist = (d.cx - liver.cx).hypot(d.cy - liver.cy);
            if dist > d.bound() + liver.bound() {
                distractors.push(d);
                break;
            }
        }
    }
    PhantomLayout {
        liver,
        tumors,
        distractors,
    }
}

/// The layout `generate_phantom` renders for `index`.
pub fn phantom_layout(spec: &PhantomSpec, index: u64) -> Result<PhantomLayout> {
    spec.validate()?;
    Ok(layout(spec, &mut SeededRng::new(spec.seed, index)))
}

pub fn generate_phantom(spec: &PhantomSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed, index);
    let geo = layout(spec, &mut rng);
    let n = spec.size;

    let mut labels = Vec::with_capacity(n * n);
    let mut pixels = Vec::with_capacity(n * n);
    for yi in 0..n {
        let y = pixel_center(yi, n);
        for xi in 0..n {
            let x = pixel_center(xi, n);
            let (label, region) = if geo.liver.contains(x, y) {
                let in_tumor = geo
                    .tumors
                    .iter()
                    .any(|&(cx, cy, r)| (x - cx).hypot(y - cy) < r);
                if in_tumor {
                    (Label::Tumor, spec.tumor)
                } else {
                    (Label::Liver, spec.liver)
                }
            } else if geo.distractors.iter().any(|d| d.contains(x, y)) {
                (Label::Background, spec.distractor)
            } else {
                (Label::Background, spec.background)
            };
            labels.push(label);
            pixels.push((region.mean + region.sigma * rng.normal()).clamp(0.0, 1.0));
        }
    }
    Ok(Sample {
        image: Image::new(n, n, pixels)?,
        labels: LabelMap::new(n, n, labels)?,
    })
}

/// Affine min-max rescale onto `[0, 1]`. A constant image maps to zeros.
pub fn normalize_intensity(image: &Image) -> Image {
    let (lo, hi) = image
        .pixels()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi > lo {
        image.map(|v| (v - lo) / (hi - lo))
    } else {
        image.map(|_| 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 256,
            val: 32,
            test: 32,
        }
    }
}

/// Train takes indices `0..n_train`, validation the next `n_val`, test the
/// rest.
pub fn make_dataset(spec: &PhantomSpec, sizes: SplitSizes) -> Result<Dataset> {
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::InvalidConfig(format!(
            "every split needs at least one sample, got {sizes:?}"
        )));
    }
    spec.validate()?;
    let range = |start: usize, len: usize| -> Result<Vec<Sample>> {
        (start..start + len)
            .map(|i| generate_phantom(spec, i as u64))
            .collect()
    };
    Ok(Dataset {
        train: range(0, sizes.train)?,
        val: range(sizes.train, sizes.val)?,
        test: range(sizes.train + sizes.val, sizes.test)?,
    })
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `<root>/<split>/{img,lbl}/NNNN.pgm`.
pub fn write_split(root: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    let img_dir = root.join(split).join("img");
    let lbl_dir = root.join(split).join("lbl");
    create_dir(&img_dir)?;
    create_dir(&lbl_dir)?;
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:04}.pgm");
        save_image_pgm(&s.image, img_dir.join(&name))?;
        save_label_pgm(&s.labels, lbl_dir.join(&name))?;
    }
    Ok(())
}

pub fn write_dataset(root: &Path, data: &Dataset) -> Result<()> {
    write_split(root, "train", &data.train)?;
    write_split(root, "val", &data.val)?;
    write_split(root, "test", &data.test)
}

/// Sorted `.pgm` files in a directory.
pub fn list_pgm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let img_dir = root.join(split).join("img");
    let lbl_dir = root.join(split).join("lbl");
    let mut out = Vec::new();
    for img_path in list_pgm(&img_dir)? {
        let name = img_path.file_name().expect("listed file has a name");
        let image = load_image_pgm(&img_path)?;
        let labels = load_label_pgm(lbl_dir.join(name))?;
        image.same_dims(&labels, "image vs label file")?;
        out.push(Sample { image, labels });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: read_split(root, "train")?,
        val: read_split(root, "val")?,
        test: read_split(root, "test")?,
    })
}
