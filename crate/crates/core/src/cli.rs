//! The `cascade-seg` command line: `gen-data`, `train`, `predict`, `eval`.
//!
//! Every command reads an optional flat `key = value` configuration file,
//! applies flag overrides and the `CASCADE_SEG_SEED` environment variable,
//! and writes the effective configuration to `config.resolved` in its output
//! directory. A failed command leaves a `.partial` marker there.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};

use crate::data_io::{
    self, list_pgm, load_image_pgm, load_label_pgm, load_network, make_dataset, save_image_pgm,
    save_label_pgm, save_network, write_dataset, Intensity, PhantomSpec, SplitSizes,
};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image, LabelMap, ProbabilityMap};
use crate::losses::BalanceMode;
use crate::metrics::{
    self, evaluate_model, probability_histogram, restricted_roc, Aggregation, Band, RocCurve,
};
use crate::network::{Network, UNetConfig};
use crate::pipeline::{
    derive_masks, one_step_predict_batch, sequential_predict_batch, CascadeThresholds, WindowSpec,
};
use crate::train::{
    init_network, select_tumor_threshold, train_one_step, train_sequential, write_epochs_csv,
    MaskSource, NetRole, TrainConfig, TrainReport,
};

pub const SEED_ENV: &str = "CASCADE_SEG_SEED";
pub const RESOLVED_NAME: &str = "config.resolved";
pub const PARTIAL_MARKER: &str = ".partial";

/// Tumor threshold: fixed, or chosen on the validation split after training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TumorThreshold {
    Auto,
    Fixed(f64),
}

/// Everything a run can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub splits: SplitSizes,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub liver_threshold: f64,
    pub tumor_threshold: TumorThreshold,
    pub window: WindowSpec,
    pub band: Band,
    pub histogram_bins: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 42;
        RunConfig {
            phantom: PhantomSpec {
                seed,
                ..PhantomSpec::default()
            },
            splits: SplitSizes::default(),
            unet: UNetConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            liver_threshold: 0.5,
            tumor_threshold: TumorThreshold::Auto,
            window: WindowSpec::default(),
            band: Band::default(),
            histogram_bins: metrics::DEFAULT_HISTOGRAM_BINS,
            aggregation: Aggregation::Pooled,
            seed,
            data_dir: None,
            model_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = seed;
        self.train.seed = seed;
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        let p = &mut self.phantom;
        let t = &mut self.train;
        match key {
            "seed" => self.set_seed(parse(key, v)?),
            "size" => p.size = parse(key, v)?,
            "liver_radius_min" => p.liver_radius_range.0 = parse(key, v)?,
            "liver_radius_max" => p.liver_radius_range.1 = parse(key, v)?,
            "tumor_count_min" => p.tumor_count_range.0 = parse(key, v)?,
            "tumor_count_max" => p.tumor_count_range.1 = parse(key, v)?,
            "tumor_radius_min" => p.tumor_radius_range.0 = parse(key, v)?,
            "tumor_radius_max" => p.tumor_radius_range.1 = parse(key, v)?,
            "distractor_count_min" => p.distractor_count_range.0 = parse(key, v)?,
            "distractor_count_max" => p.distractor_count_range.1 = parse(key, v)?,
            "distractor_radius_min" => p.distractor_radius_range.0 = parse(key, v)?,
            "distractor_radius_max" => p.distractor_radius_range.1 = parse(key, v)?,
            "background_mean" => p.background.mean = parse(key, v)?,
            "background_sigma" => p.background.sigma = parse(key, v)?,
            "liver_mean" => p.liver.mean = parse(key, v)?,
            "liver_sigma" => p.liver.sigma = parse(key, v)?,
            "tumor_mean" => p.tumor.mean = parse(key, v)?,
            "tumor_sigma" => p.tumor.sigma = parse(key, v)?,
            "distractor_mean" => p.distractor.mean = parse(key, v)?,
            "distractor_sigma" => p.distractor.sigma = parse(key, v)?,
            "n_train" => self.splits.train = parse(key, v)?,
            "n_val" => self.splits.val = parse(key, v)?,
            "n_test" => self.splits.test = parse(key, v)?,
            "input_size" => self.unet.input_size = parse(key, v)?,
            "depth" => self.unet.depth = parse(key, v)?,
            "base_channels" => self.unet.base_channels = parse(key, v)?,
            "dropout_rate" => self.unet.dropout_rate = parse(key, v)?,
            "lr_initial" => t.lr_initial = parse(key, v)?,
            "lr_finetune" => t.lr_finetune = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "epochs_main" => t.epochs_main = parse(key, v)?,
            "epochs_finetune" => t.epochs_finetune = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "loss_mode" => t.loss_mode = v.parse()?,
            "balance_mode" => {
                t.balance_mode = match v {
                    "inverse_frequency" => BalanceMode::InverseFrequency,
                    "literal" => BalanceMode::Literal,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "`balance_mode`: expected inverse_frequency or literal, got `{v}`"
                        )))
                    }
                }
            }
            "joint_c" => {
                t.joint_c = if v == "none" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "mask_source" => {
                t.mask_source = match v {
                    "trained" => MaskSource::Trained,
                    "ground_truth" => MaskSource::GroundTruth,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "`mask_source`: expected trained or ground_truth, got `{v}`"
                        )))
                    }
                }
            }
            "liver_threshold" => self.liver_threshold = parse(key, v)?,
            "tumor_threshold" => {
                self.tumor_threshold = if v == "auto" {
                    TumorThreshold::Auto
                } else {
                    TumorThreshold::Fixed(parse(key, v)?)
                }
            }
            "window_lo" => self.window = WindowSpec::new(parse(key, v)?, self.window.hi())?,
            "window_hi" => self.window = WindowSpec::new(self.window.lo(), parse(key, v)?)?,
            "band_lo" => self.band = Band::new(parse(key, v)?, self.band.hi())?,
            "band_hi" => self.band = Band::new(self.band.lo(), parse(key, v)?)?,
            "histogram_bins" => self.histogram_bins = parse(key, v)?,
            "aggregation" => {
                self.aggregation = match v {
                    "pooled" => Aggregation::Pooled,
                    "per_image" => Aggregation::PerImage,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "`aggregation`: expected pooled or per_image, got `{v}`"
                        )))
                    }
                }
            }
            "data_dir" => self.data_dir = (v != "none").then(|| PathBuf::from(v)),
            "model_dir" => self.model_dir = (v != "none").then(|| PathBuf::from(v)),
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are ignored; a key may appear only once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), n + 1) {
                return Err(Error::InvalidConfig(format!(
                    "line {}: `{key}` already set on line {prev}",
                    n + 1
                )));
            }
            self.set(key, value)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.unet.validate()?;
        self.train.validate()?;
        CascadeThresholds::new(self.liver_threshold, 0.5)?;
        if let TumorThreshold::Fixed(t) = self.tumor_threshold {
            CascadeThresholds::new(0.5, t)?;
        }
        if self.histogram_bins == 0 {
            return Err(Error::InvalidConfig(
                "histogram_bins must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_text(&self) -> String {
        let p = &self.phantom;
        let t = &self.train;
        let i = |x: &Intensity| (x.mean, x.sigma);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("size", p.size.to_string());
        kv("liver_radius_min", p.liver_radius_range.0.to_string());
        kv("liver_radius_max", p.liver_radius_range.1.to_string());
        kv("tumor_count_min", p.tumor_count_range.0.to_string());
        kv("tumor_count_max", p.tumor_count_range.1.to_string());
        kv("tumor_radius_min", p.tumor_radius_range.0.to_string());
        kv("tumor_radius_max", p.tumor_radius_range.1.to_string());
        kv(
            "distractor_count_min",
            p.distractor_count_range.0.to_string(),
        );
        kv(
            "distractor_count_max",
            p.distractor_count_range.1.to_string(),
        );
        kv(
            "distractor_radius_min",
            p.distractor_radius_range.0.to_string(),
        );
        kv(
            "distractor_radius_max",
            p.distractor_radius_range.1.to_string(),
        );
        for (name, r) in [
            ("background", &p.background),
            ("liver", &p.liver),
            ("tumor", &p.tumor),
            ("distractor", &p.distractor),
        ] {
            let (m, s) = i(r);
            kv(&format!("{name}_mean"), m.to_string());
            kv(&format!("{name}_sigma"), s.to_string());
        }
        kv("n_train", self.splits.train.to_string());
        kv("n_val", self.splits.val.to_string());
        kv("n_test", self.splits.test.to_string());
        kv("input_size", self.unet.input_size.to_string());
        kv("depth", self.unet.depth.to_string());
        kv("base_channels", self.unet.base_channels.to_string());
        kv("dropout_rate", self.unet.dropout_rate.to_string());
        kv("lr_initial", t.lr_initial.to_string());
        kv("lr_finetune", t.lr_finetune.to_string());
        kv("momentum", t.momentum.to_string());
        kv("epochs_main", t.epochs_main.to_string());
        kv("epochs_finetune", t.epochs_finetune.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("loss_mode", t.loss_mode.to_string());
        kv(
            "balance_mode",
            match t.balance_mode {
                BalanceMode::InverseFrequency => "inverse_frequency",
                BalanceMode::Literal => "literal",
            }
            .into(),
        );
        kv(
            "joint_c",
            t.joint_c.map_or("none".into(), |c| c.to_string()),
        );
        kv(
            "mask_source",
            match t.mask_source {
                MaskSource::Trained => "trained",
                MaskSource::GroundTruth => "ground_truth",
            }
            .into(),
        );
        kv("liver_threshold", self.liver_threshold.to_string());
        kv(
            "tumor_threshold",
            match self.tumor_threshold {
                TumorThreshold::Auto => "auto".into(),
                TumorThreshold::Fixed(t) => t.to_string(),
            },
        );
        kv("window_lo", self.window.lo().to_string());
        kv("window_hi", self.window.hi().to_string());
        kv("band_lo", self.band.lo().to_string());
        kv("band_hi", self.band.hi().to_string());
        kv("histogram_bins", self.histogram_bins.to_string());
        kv(
            "aggregation",
            match self.aggregation {
                Aggregation::Pooled => "pooled",
                Aggregation::PerImage => "per_image",
            }
            .into(),
        );
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or("none".into(), |p| p.display().to_string())
        };
        kv("data_dir", path(&self.data_dir));
        kv("model_dir", path(&self.model_dir));
        out
    }

    /// Thresholds for inference. `Auto` that was never resolved falls back
    /// to 0.5.
    pub fn thresholds(&self) -> Result<CascadeThresholds> {
        let t = match self.tumor_threshold {
            TumorThreshold::Auto => 0.5,
            TumorThreshold::Fixed(t) => t,
        };
        CascadeThresholds::new(self.liver_threshold, t)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "cascade-seg",
    version,
    about = "Liver and tumor segmentation with one-step and cascaded U-Nets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Sequential,
    OneStep,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Train the sequential pair or the one-step network.
    Train {
        #[arg(long, value_enum, default_value = "sequential")]
        model: ModelKind,
        /// Defaults to `data_dir` from the configuration.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs_main: Option<usize>,
        #[arg(long)]
        epochs_finetune: Option<usize>,
    },
    /// Segment one image or a directory of images.
    Predict {
        /// Directory holding the checkpoints written by `train`.
        #[arg(long)]
        model_dir: PathBuf,
        /// A PGM file, a directory of PGM files, or a split directory with `img/`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `config.resolved` in the model directory.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        /// Output directory of `predict`, or a directory of label maps.
        #[arg(long)]
        predictions: PathBuf,
        /// Split directory with `lbl/` (and `img/` for sweeps), or a label directory.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        band_lo: Option<f64>,
        #[arg(long)]
        band_hi: Option<f64>,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        per_image: bool,
        /// Model directories to re-evaluate on the truth split, one ROC each.
        #[arg(long)]
        sweep: Vec<PathBuf>,
    },
}

impl Command {
    fn out_dir(&self) -> &Path {
        match self {
            Command::GenData { out, .. }
            | Command::Train { out, .. }
            | Command::Predict { out, .. }
            | Command::Eval { out, .. } => out,
        }
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(raw) = std::env::var_os(SEED_ENV) {
        let s = raw.to_string_lossy();
        let seed = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}=`{s}` is not a u64")))?;
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_resolved(out: &Path, cfg: &RunConfig) -> Result<()> {
    let path = out.join(RESOLVED_NAME);
    fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    create_dir(out)?;
    let data = make_dataset(&cfg.phantom, cfg.splits)?;
    write_dataset(out, &data)?;
    write_resolved(out, cfg)
}

pub fn cmd_train(cfg: &mut RunConfig, model: ModelKind, data_dir: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let data = data_io::read_dataset(data_dir)?;
    create_dir(out)?;
    let reports: Vec<TrainReport> = match model {
        ModelKind::Sequential => {
            let mut a = init_network::<f32>(NetRole::Liver, cfg.unet, cfg.seed)?;
            let mut b = init_network::<f32>(NetRole::Tumor, cfg.unet, cfg.seed)?;
            let thresholds = cfg.thresholds()?;
            let outcome =
                train_sequential(&mut a, &mut b, &data, &cfg.train, thresholds, cfg.window)?;
            if cfg.tumor_threshold == TumorThreshold::Auto {
                let t =
                    select_tumor_threshold(&a, &b, &data.val, thresholds, cfg.window, cfg.band)?
                        .unwrap_or(0.5);
                cfg.tumor_threshold = TumorThreshold::Fixed(t);
            }
            save_network(&a, out.join("modelA.segc"))?;
            save_network(&b, out.join("modelB.segc"))?;
            if let Some(j) = outcome.joint_objective {
                let path = out.join("joint_objective.txt");
                fs::write(&path, format!("{j}\n")).map_err(|e| Error::io(&path, e))?;
            }
            vec![outcome.liver, outcome.tumor]
        }
        ModelKind::OneStep => {
            let mut c = init_network::<f32>(NetRole::OneStep, cfg.unet, cfg.seed)?;
            let report = train_one_step(&mut c, &data, &cfg.train)?;
            save_network(&c, out.join("modelC.segc"))?;
            vec![report]
        }
    };
    write_file(&out.join("epochs.csv"), |w| write_epochs_csv(w, &reports))?;
    write_resolved(out, cfg)
}

/// Loaded model directory: the cascade pair or the one-step network.
pub enum Model {
    Sequential {
        liver: Network<f32>,
        tumor: Network<f32>,
    },
    OneStep(Network<f32>),
}

impl Model {
    pub fn load(dir: &Path) -> Result<Self> {
        let a = dir.join("modelA.segc");
        let c = dir.join("modelC.segc");
        if a.exists() {
            Ok(Model::Sequential {
                liver: load_network(a)?,
                tumor: load_network(dir.join("modelB.segc"))?,
            })
        } else if c.exists() {
            Ok(Model::OneStep(load_network(c)?))
        } else {
            Err(Error::InvalidArgument(format!(
                "{} holds neither modelA.segc nor modelC.segc",
                dir.display()
            )))
        }
    }

    fn input_size(&self) -> usize {
        match self {
            Model::Sequential { liver, .. } => liver.config().input_size,
            Model::OneStep(c) => c.config().input_size,
        }
    }

    /// `(labels, liver_probs, tumor_probs)` per image.
    pub fn predict(
        &self,
        images: &[&Image],
        thresholds: CascadeThresholds,
        window: WindowSpec,
    ) -> Result<Vec<(LabelMap, ProbabilityMap, ProbabilityMap)>> {
        let s = self.input_size();
        for img in images {
            if img.dims() != (s, s) {
                return Err(Error::InvalidArgument(format!(
                    "image is {}x{} but the network expects {s}x{s}",
                    img.width(),
                    img.height()
                )));
            }
        }
        Ok(match self {
            Model::Sequential { liver, tumor } => {
                sequential_predict_batch(liver, tumor, images, thresholds, window)?
                    .into_iter()
                    .map(|o| (o.labels, o.liver_probs, o.tumor_probs))
                    .collect()
            }
            Model::OneStep(c) => one_step_predict_batch(c, images)?
                .into_iter()
                .map(|o| {
                    let liver = o.liver_or_tumor_probs().map(|v| v.clamp(0.0, 1.0));
                    let [tumor, _, _] = o.probs;
                    (o.labels, liver, tumor)
                })
                .collect(),
        })
    }
}

/// Input images as `(file name, path)` pairs.
fn input_images(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    let paths = if input.is_file() {
        vec![input.to_path_buf()]
    } else if input.join("img").is_dir() {
        list_pgm(&input.join("img"))?
    } else {
        list_pgm(input)?
    };
    if paths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(paths
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect())
}

pub fn cmd_predict(cfg: &RunConfig, model_dir: &Path, input: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let model = Model::load(model_dir)?;
    let inputs = input_images(input)?;
    let images = inputs
        .iter()
        .map(|(_, p)| load_image_pgm(p))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Image> = images.iter().collect();
    let results = model.predict(&refs, cfg.thresholds()?, cfg.window)?;
    for sub in ["label", "liver", "tumor"] {
        create_dir(&out.join(sub))?;
    }
    for ((name, _), (labels, liver, tumor)) in inputs.iter().zip(&results) {
        save_label_pgm(labels, out.join("label").join(name))?;
        save_image_pgm(liver, out.join("liver").join(name))?;
        save_image_pgm(tumor, out.join("tumor").join(name))?;
    }
    write_resolved(out, cfg)
}

fn label_dir(truth: &Path) -> PathBuf {
    if truth.join("lbl").is_dir() {
        truth.join("lbl")
    } else {
        truth.to_path_buf()
    }
}

/// Loads predicted labels, tumor probabilities and truth, matched by file
/// name.
fn load_eval_set(
    predictions: &Path,
    truth: &Path,
) -> Result<(Vec<LabelMap>, Option<Vec<ProbabilityMap>>, Vec<LabelMap>)> {
    let pred_dir = if predictions.join("label").is_dir() {
        predictions.join("label")
    } else {
        label_dir(predictions)
    };
    let pred_files = list_pgm(&pred_dir)?;
    let truth_files = list_pgm(&label_dir(truth))?;
    let names = |v: &[PathBuf]| -> Vec<String> {
        v.iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect()
    };
    let (pn, tn) = (names(&pred_files), names(&truth_files));
    let missing_truth: Vec<&String> = pn.iter().filter(|n| !tn.contains(n)).collect();
    let missing_pred: Vec<&String> = tn.iter().filter(|n| !pn.contains(n)).collect();
    if !missing_truth.is_empty() || !missing_pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "unpaired files: no truth for {missing_truth:?}, no prediction for {missing_pred:?}"
        )));
    }
    if pn.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prob_dir = predictions.join("tumor");
    let mut preds = Vec::new();
    let mut probs = Vec::new();
    let mut truths = Vec::new();
    for (name, tp) in pn.iter().zip(&truth_files) {
        preds.push(load_label_pgm(pred_dir.join(name))?);
        if prob_dir.is_dir() {
            probs.push(load_image_pgm(prob_dir.join(name))?);
        }
        truths.push(load_label_pgm(tp)?);
    }
    let probs = prob_dir.is_dir().then_some(probs);
    Ok((preds, probs, truths))
}

fn write_roc(path: &Path, roc: Option<&RocCurve>) -> Result<()> {
    write_file(path, |w| metrics::write_roc_csv(w, roc))
}

pub fn cmd_eval(
    cfg: &RunConfig,
    predictions: &Path,
    truth: &Path,
    out: &Path,
    sweep: &[PathBuf],
) -> Result<()> {
    cfg.validate()?;
    let (preds, probs, truths) = load_eval_set(predictions, truth)?;
    let p: Vec<&LabelMap> = preds.iter().collect();
    let t: Vec<&LabelMap> = truths.iter().collect();
    let pr: Option<Vec<&ProbabilityMap>> = probs.as_ref().map(|v| v.iter().collect());
    let report = evaluate_model(&p, &t, pr.as_deref(), cfg.band, cfg.aggregation)?;
    let hist = match &pr {
        Some(pr) => probability_histogram(pr, cfg.band, cfg.histogram_bins)?,
        None => Vec::new(),
    };
    create_dir(out)?;
    write_file(&out.join("report.csv"), |w| {
        metrics::write_report_csv(w, &report)
    })?;
    write_roc(&out.join("roc_tumor.csv"), report.roc.as_ref())?;
    write_file(&out.join("hist_tumor.csv"), |w| {
        metrics::write_histogram_csv(w, &hist)
    })?;

    if !sweep.is_empty() {
        let img_dir = truth.join("img");
        let files = list_pgm(&img_dir)?;
        let images = files
            .iter()
            .map(load_image_pgm)
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = images.iter().collect();
        let tumor_truth: Vec<BinaryMask> = files
            .iter()
            .map(|f| {
                load_label_pgm(label_dir(truth).join(f.file_name().unwrap()))
                    .map(|l| derive_masks(&l).tumor)
            })
            .collect::<Result<_>>()?;
        let tt: Vec<&BinaryMask> = tumor_truth.iter().collect();
        let mut summary = String::from("index,model,rauc,threshold\n");
        for (i, dir) in sweep.iter().enumerate() {
            let model = Model::load(dir)?;
            let results = model.predict(&refs, cfg.thresholds()?, cfg.window)?;
            let tp: Vec<&ProbabilityMap> = results.iter().map(|r| &r.2).collect();
            let roc = restricted_roc(&tp, &tt, cfg.band)?;
            write_roc(&out.join(format!("roc_sweep_{i:02}.csv")), roc.as_ref())?;
            let na = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
            let _ = writeln!(
                summary,
                "{i},{},{},{}",
                dir.display(),
                na(roc.as_ref().map(RocCurve::auc)),
                na(roc.as_ref().map(RocCurve::best_threshold))
            );
        }
        let path = out.join("sweep.csv");
        fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    }
    write_resolved(out, cfg)
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            config,
            seed,
            n_train,
            n_val,
            n_test,
        } => {
            let mut cfg = base_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.set_seed(*s);
            }
            if let Some(n) = n_train {
                cfg.splits.train = *n;
            }
            if let Some(n) = n_val {
                cfg.splits.val = *n;
            }
            if let Some(n) = n_test {
                cfg.splits.test = *n;
            }
            cfg.data_dir = Some(out.clone());
            cmd_gen_data(&cfg, out)
        }
        Command::Train {
            model,
            data,
            out,
            config,
            seed,
            epochs_main,
            epochs_finetune,
        } => {
            let mut cfg = base_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.set_seed(*s);
            }
            if let Some(n) = epochs_main {
                cfg.train.epochs_main = *n;
            }
            if let Some(n) = epochs_finetune {
                cfg.train.epochs_finetune = *n;
            }
            if let Some(d) = data {
                cfg.data_dir = Some(d.clone());
            }
            let data = cfg.data_dir.clone().ok_or_else(|| {
                Error::InvalidArgument("no --data flag and no data_dir in the configuration".into())
            })?;
            cfg.model_dir = Some(out.clone());
            cmd_train(&mut cfg, *model, &data, out)
        }
        Command::Predict {
            model_dir,
            input,
            out,
            config,
        } => {
            let resolved = model_dir.join(RESOLVED_NAME);
            let path = config
                .clone()
                .or_else(|| resolved.exists().then_some(resolved));
            let cfg = base_config(path.as_deref())?;
            cmd_predict(&cfg, model_dir, input, out)
        }
        Command::Eval {
            predictions,
            truth,
            out,
            config,
            band_lo,
            band_hi,
            bins,
            per_image,
            sweep,
        } => {
            let mut cfg = base_config(config.as_deref())?;
            cfg.band = Band::new(
                band_lo.unwrap_or(cfg.band.lo()),
                band_hi.unwrap_or(cfg.band.hi()),
            )?;
            if let Some(b) = bins {
                cfg.histogram_bins = *b;
            }
            if *per_image {
                cfg.aggregation = Aggregation::PerImage;
            }
            cmd_eval(&cfg, predictions, truth, out, sweep)
        }
    }
}

/// Runs a parsed command, maintaining the `.partial` marker in its output
/// directory.
pub fn run(cli: &Cli) -> Result<()> {
    let out = cli.command.out_dir();
    let marker = out.join(PARTIAL_MARKER);
    let result = dispatch(&cli.command);
    match &result {
        Ok(()) => {
            if marker.exists() {
                fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            }
        }
        Err(e) => {
            if fs::create_dir_all(out).is_ok() {
                let _ = fs::write(&marker, format!("{e}\n"));
            }
        }
    }
    result
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
