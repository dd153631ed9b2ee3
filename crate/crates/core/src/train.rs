//! Training schedules.
//!
//! *One-step*: plain categorical cross-entropy, then a fine-tune with
//! per-sample balanced class weights at the lower learning rate.
//!
//! *Sequential*: the liver network trains on `(X, A)` with binary
//! cross-entropy. It is then frozen, its thresholded output `M` builds the
//! tumor network's data `(w(M·X), M·B)`, and the tumor network trains with
//! plain binary cross-entropy followed by a weighted refinement.
//!
//! Every source of randomness is a [`SeededRng`] stream derived from the
//! configured seed, so a run is a pure function of its configuration.

use std::io::{self, Write};
use std::time::{Duration, Instant};

use crate::autodiff::{SgdMomentum, Tape};
use crate::data_io::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image, LabelMap, ProbabilityMap};
use crate::losses::{
    balanced_class_weights, binary_ce_weighted, categorical_cross_entropy_grad, joint_loss,
    BalanceMode, BinaryWeights, LossEval,
};
use crate::metrics::{self, Aggregation, Band};
use crate::network::{build_unet, Head, Network, UNetConfig};
use crate::pipeline::{
    derive_masks, final_classify, images_to_batch, masked_input, one_step_predict_batch,
    predict_binary, sequential_predict_batch, threshold, CascadeThresholds, WindowSpec,
};
use crate::rng::{streams, SeededRng};
use crate::tensor::Real;

/// Loss used in the second (lower learning rate) phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossMode {
    Plain,
    /// Binary heads only.
    FixedAlpha(f64),
    Balanced,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossMode::Plain => f.write_str("plain"),
            LossMode::FixedAlpha(a) => write!(f, "fixed_alpha({a})"),
            LossMode::Balanced => f.write_str("balanced"),
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "plain" => return Ok(LossMode::Plain),
            "balanced" => return Ok(LossMode::Balanced),
            _ => {}
        }
        let inner = s
            .strip_prefix("fixed_alpha(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "loss mode `{s}` is not plain, balanced or fixed_alpha(<a>)"
                ))
            })?;
        let a: f64 = inner
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad alpha in `{s}`")))?;
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {a} not in (0, 1)")));
        }
        Ok(LossMode::FixedAlpha(a))
    }
}

/// Where the stage-two liver mask comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskSource {
    /// Thresholded output of the trained liver network.
    #[default]
    Trained,
    /// The ground-truth liver-or-tumor mask.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_finetune: f64,
    pub momentum: f64,
    /// Liver network epochs, and tumor / one-step epochs before fine-tuning.
    pub epochs_main: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    pub balance_mode: BalanceMode,
    /// When set, the sequential run also reports the joint objective on the
    /// validation split.
    pub joint_c: Option<f64>,
    pub mask_source: MaskSource,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_initial: 0.001,
            lr_finetune: 0.0001,
            momentum: 0.9,
            epochs_main: 50,
            epochs_finetune: 20,
            batch_size: 4,
            loss_mode: LossMode::Balanced,
            balance_mode: BalanceMode::default(),
            joint_c: None,
            mask_source: MaskSource::Trained,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr_initial >= 0.0 && self.lr_initial.is_finite()) {
            return bad(format!("lr_initial must be >= 0, got {}", self.lr_initial));
        }
        if !(self.lr_finetune >= 0.0 && self.lr_finetune <= self.lr_initial) {
            return bad(format!(
                "lr_finetune must lie in [0, lr_initial], got {}",
                self.lr_finetune
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.epochs_main == 0 || self.epochs_finetune == 0 || self.batch_size == 0 {
            return bad("epoch counts and batch_size must be at least 1".into());
        }
        if let Some(c) = self.joint_c {
            if !(0.0..=1.0).contains(&c) {
                return bad(format!("joint_c must lie in [0, 1], got {c}"));
            }
        }
        Ok(())
    }
}

/// Which network a run belongs to. Each has its own initialization stream
/// and training streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetRole {
    Liver,
    Tumor,
    OneStep,
}

impl NetRole {
    fn offset(self) -> u64 {
        match self {
            NetRole::Liver => 0,
            NetRole::Tumor => 1,
            NetRole::OneStep => 2,
        }
    }

    pub fn head(self) -> Head {
        match self {
            NetRole::OneStep => Head::Softmax3,
            _ => Head::BinarySigmoid,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NetRole::Liver => "A",
            NetRole::Tumor => "B",
            NetRole::OneStep => "C",
        }
    }
}

/// Freshly initialized network for `role`, with the role's head.
pub fn init_network<T: Real>(role: NetRole, config: UNetConfig, seed: u64) -> Result<Network<T>> {
    let stream = [streams::INIT_A, streams::INIT_B, streams::INIT_C][role.offset() as usize];
    build_unet(
        config.with_head(role.head()),
        &mut SeededRng::new(seed, stream),
    )
}

/// Shuffle and dropout generators of one network's training.
#[derive(Clone, Debug)]
pub struct TrainRngs {
    pub shuffle: SeededRng,
    pub dropout: SeededRng,
}

impl TrainRngs {
    pub fn new(seed: u64, role: NetRole) -> Self {
        TrainRngs {
            shuffle: SeededRng::new(seed, streams::SHUFFLE + role.offset()),
            dropout: SeededRng::new(seed, streams::DROPOUT + role.offset()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Liver,
    Tumor,
    TumorRefine,
    OneStep,
    OneStepFinetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Liver => "liver",
            Phase::Tumor => "tumor",
            Phase::TumorRefine => "tumor_refine",
            Phase::OneStep => "one_step",
            Phase::OneStepFinetune => "one_step_finetune",
        }
    }
}

/// Validation snapshot after an epoch. For the liver phase the pixel
/// accuracy is that of the binary liver mask and there is no tumor IoU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValSnapshot {
    pub pixel_acc: f64,
    pub iou_liver: f64,
    pub iou_tumor: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based, counted across the phases of one network.
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    pub val: Option<ValSnapshot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub role: NetRole,
    pub epochs: Vec<EpochRecord>,
    pub wall_time: Duration,
}

impl TrainReport {
    fn new(role: NetRole) -> Self {
        TrainReport {
            role,
            epochs: Vec::new(),
            wall_time: Duration::ZERO,
        }
    }
}

/// Per-sample binary loss weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryLoss {
    Plain,
    Alpha(f64),
    Balanced(BalanceMode),
}

impl BinaryLoss {
    pub fn from_mode(mode: LossMode, balance: BalanceMode) -> Self {
        match mode {
            LossMode::Plain => BinaryLoss::Plain,
            LossMode::FixedAlpha(a) => BinaryLoss::Alpha(a),
            LossMode::Balanced => BinaryLoss::Balanced(balance),
        }
    }

    pub fn weights(self, target: &BinaryMask) -> BinaryWeights {
        match self {
            BinaryLoss::Plain => BinaryWeights::UNIFORM,
            BinaryLoss::Alpha(a) => BinaryWeights::from_alpha(a),
            BinaryLoss::Balanced(mode) => BinaryWeights::from_alpha(mode.alpha(target)),
        }
    }

    pub fn eval<T: Real>(self, pred: &[T], target: &BinaryMask) -> Result<LossEval> {
        binary_ce_weighted(pred, target, self.weights(target))
    }
}

/// One SGD step on a batch. `loss(k, probs_k)` scores sample `k` of the
/// batch; the batch loss is the mean over samples. Returns that mean.
pub fn train_step<T: Real>(
    net: &mut Network<T>,
    opt: &mut SgdMomentum<T>,
    inputs: &[&Image],
    lr: f64,
    dropout_rng: &mut SeededRng,
    mut loss: impl FnMut(usize, &[T]) -> Result<LossEval>,
) -> Result<f64> {
    let batch = images_to_batch::<T>(inputs)?;
    let mut tape = Tape::<T>::new();
    let x = tape.constant(batch.shape().to_vec(), batch.into_data())?;
    let rec = net.record(&mut tape, x, true, dropout_rng)?;
    let n = inputs.len();
    let out = tape.value(rec.output);
    let per = out.len() / n;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(out.len());
    for k in 0..n {
        let e = loss(k, &out[k * per..(k + 1) * per])?;
        value += e.value;
        grad.extend(e.grad.iter().map(|&g| T::from_f64(g / n as f64)));
    }
    value /= n as f64;
    if !value.is_finite() {
        return Err(Error::invalid(format!("non-finite training loss {value}")));
    }
    let l = tape.scalar_fn(rec.output, T::from_f64(value), grad)?;
    let grads = tape.backward(l)?;
    net.params_mut().zero_grad();
    net.accumulate_grads(&grads, &rec)?;
    opt.step(net.params_mut().tensors_mut(), lr)?;
    Ok(value)
}

/// Runs `epochs` epochs over `inputs`, shuffling the order each epoch.
#[allow(clippy::too_many_arguments)]
fn run_epochs<T: Real>(
    net: &mut Network<T>,
    inputs: &[&Image],
    epochs: usize,
    lr: f64,
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
    phase: Phase,
    report: &mut TrainReport,
    mut loss: impl FnMut(usize, &[T]) -> Result<LossEval>,
    mut validate: impl FnMut(&Network<T>) -> Result<Option<ValSnapshot>>,
) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = SgdMomentum::new(cfg.momentum)?;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..epochs {
        rngs.shuffle.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Image> = chunk.iter().map(|&i| inputs[i]).collect();
            let mean = train_step(net, &mut opt, &batch, lr, &mut rngs.dropout, |k, p| {
                loss(chunk[k], p)
            })?;
            total += mean * chunk.len() as f64;
        }
        report.epochs.push(EpochRecord {
            epoch: report.epochs.len() + 1,
            phase,
            mean_loss: total / inputs.len() as f64,
            val: validate(net)?,
        });
    }
    Ok(())
}

fn binary_snapshot(pred: &[BinaryMask], truth: &[BinaryMask]) -> Result<ValSnapshot> {
    let mut c = metrics::ConfusionCounts::default();
    for (p, t) in pred.iter().zip(truth) {
        c = c.merge(metrics::confusion(p, t)?);
    }
    Ok(ValSnapshot {
        pixel_acc: metrics::pixel_accuracy(&c),
        iou_liver: metrics::iou(&c),
        iou_tumor: None,
    })
}

/// Label-level snapshot: pixel accuracy over the three labels, pooled IoUs.
pub fn label_snapshot(pred: &[LabelMap], truth: &[LabelMap]) -> Result<ValSnapshot> {
    let p: Vec<&LabelMap> = pred.iter().collect();
    let t: Vec<&LabelMap> = truth.iter().collect();
    let r = metrics::evaluate_model(&p, &t, None, Band::default(), Aggregation::Pooled)?;
    let (mut hit, mut all) = (0usize, 0usize);
    for (a, b) in pred.iter().zip(truth) {
        hit += a
            .pixels()
            .iter()
            .zip(b.pixels())
            .filter(|(x, y)| x == y)
            .count();
        all += a.len();
    }
    Ok(ValSnapshot {
        pixel_acc: hit as f64 / all as f64,
        iou_liver: r.liver.iou,
        iou_tumor: Some(r.tumor.iou),
    })
}

/// Trains the liver network on `(X, A)` with plain binary cross-entropy.
pub fn train_liver_net<T: Real>(
    net: &mut Network<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut report = TrainReport::new(NetRole::Liver);
    let inputs: Vec<&Image> = data.train.iter().map(|s| &s.image).collect();
    let targets: Vec<BinaryMask> = data
        .train
        .iter()
        .map(|s| derive_masks(&s.labels).liver_or_tumor)
        .collect();
    let val_inputs: Vec<&Image> = data.val.iter().map(|s| &s.image).collect();
    let val_truth: Vec<BinaryMask> = data
        .val
        .iter()
        .map(|s| derive_masks(&s.labels).liver_or_tumor)
        .collect();
    let validate = |net: &Network<T>| -> Result<Option<ValSnapshot>> {
        if val_inputs.is_empty() {
            return Ok(None);
        }
        let pred = predict_binary(net, &val_inputs)?
            .iter()
            .map(|p| threshold(p, 0.5))
            .collect::<Result<Vec<_>>>()?;
        binary_snapshot(&pred, &val_truth).map(Some)
    };
    run_epochs(
        net,
        &inputs,
        cfg.epochs_main,
        cfg.lr_initial,
        cfg,
        rngs,
        Phase::Liver,
        &mut report,
        |k, p| BinaryLoss::Plain.eval(p, &targets[k]),
        validate,
    )?;
    report.wall_time = start.elapsed();
    Ok(report)
}

/// Stage-two data: `X̄ = w(M·X)`, `B̄ = M·B`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTwoSet {
    pub inputs: Vec<Image>,
    pub targets: Vec<BinaryMask>,
    pub liver_masks: Vec<BinaryMask>,
    pub labels: Vec<LabelMap>,
}

pub fn materialize_stage_two<T: Real>(
    liver_net: Option<&Network<T>>,
    samples: &[Sample],
    source: MaskSource,
    thresholds: CascadeThresholds,
    window: WindowSpec,
) -> Result<StageTwoSet> {
    let liver_masks: Vec<BinaryMask> = match source {
        MaskSource::GroundTruth => samples
            .iter()
            .map(|s| derive_masks(&s.labels).liver_or_tumor)
            .collect(),
        MaskSource::Trained => {
            let net = liver_net
                .ok_or_else(|| Error::invalid("trained mask source needs a liver network"))?;
            let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
            predict_binary(net, &images)?
                .iter()
                .map(|p| threshold(p, thresholds.liver()))
                .collect::<Result<_>>()?
        }
    };
    let mut inputs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for (s, m) in samples.iter().zip(&liver_masks) {
        inputs.push(masked_input(&s.image, m, window)?);
        targets.push(m.and(&derive_masks(&s.labels).tumor)?);
    }
    Ok(StageTwoSet {
        inputs,
        targets,
        liver_masks,
        labels: samples.iter().map(|s| s.labels.clone()).collect(),
    })
}

/// Everything the tumor phases need: training data and the frozen liver
/// masks of the validation split.
#[derive(Clone, Debug)]
pub struct TumorStage {
    pub train: StageTwoSet,
    pub val: StageTwoSet,
    pub thresholds: CascadeThresholds,
}

impl TumorStage {
    pub fn build<T: Real>(
        liver_net: &Network<T>,
        data: &Dataset,
        cfg: &TrainConfig,
        thresholds: CascadeThresholds,
        window: WindowSpec,
    ) -> Result<Self> {
        Ok(TumorStage {
            train: materialize_stage_two(
                Some(liver_net),
                &data.train,
                cfg.mask_source,
                thresholds,
                window,
            )?,
            // Validation always sees the trained mask, as inference does.
            val: materialize_stage_two(
                Some(liver_net),
                &data.val,
                MaskSource::Trained,
                thresholds,
                window,
            )?,
            thresholds,
        })
    }

    fn validate<T: Real>(&self, net: &Network<T>) -> Result<Option<ValSnapshot>> {
        if self.val.inputs.is_empty() {
            return Ok(None);
        }
        let inputs: Vec<&Image> = self.val.inputs.iter().collect();
        let probs = predict_binary(net, &inputs)?;
        let mut pred = Vec::with_capacity(probs.len());
        for (p, m) in probs.iter().zip(&self.val.liver_masks) {
            let t = threshold(p, self.thresholds.tumor())?.and(m)?;
            pred.push(final_classify(m, &t)?);
        }
        label_snapshot(&pred, &self.val.labels).map(Some)
    }

    fn run<T: Real>(
        &self,
        net: &mut Network<T>,
        epochs: usize,
        lr: f64,
        loss: BinaryLoss,
        phase: Phase,
        cfg: &TrainConfig,
        rngs: &mut TrainRngs,
        report: &mut TrainReport,
    ) -> Result<()> {
        let start = Instant::now();
        let inputs: Vec<&Image> = self.train.inputs.iter().collect();
        let targets = &self.train.targets;
        run_epochs(
            net,
            &inputs,
            epochs,
            lr,
            cfg,
            rngs,
            phase,
            report,
            |k, p| loss.eval(p, &targets[k]),
            |n| self.validate(n),
        )?;
        report.wall_time += start.elapsed();
        Ok(())
    }

    /// Main tumor phase: plain binary cross-entropy at `lr_initial`.
    pub fn train_main<T: Real>(
        &self,
        net: &mut Network<T>,
        cfg: &TrainConfig,
        rngs: &mut TrainRngs,
        report: &mut TrainReport,
    ) -> Result<()> {
        cfg.validate()?;
        self.run(
            net,
            cfg.epochs_main,
            cfg.lr_initial,
            BinaryLoss::Plain,
            Phase::Tumor,
            cfg,
            rngs,
            report,
        )
    }

    /// Refinement at `lr_finetune` with the configured loss mode, continuing
    /// from the current weights.
    pub fn refine<T: Real>(
        &self,
        net: &mut Network<T>,
        cfg: &TrainConfig,
        rngs: &mut TrainRngs,
        report: &mut TrainReport,
    ) -> Result<()> {
        cfg.validate()?;
        let loss = BinaryLoss::from_mode(cfg.loss_mode, cfg.balance_mode);
        self.run(
            net,
            cfg.epochs_finetune,
            cfg.lr_finetune,
            loss,
            Phase::TumorRefine,
            cfg,
            rngs,
            report,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequentialOutcome {
    pub liver: TrainReport,
    pub tumor: TrainReport,
    /// Joint objective on the validation split when `joint_c` is set.
    pub joint_objective: Option<f64>,
}

pub fn train_sequential<T: Real>(
    liver_net: &mut Network<T>,
    tumor_net: &mut Network<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    thresholds: CascadeThresholds,
    window: WindowSpec,
) -> Result<SequentialOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let liver = train_liver_net(
        liver_net,
        data,
        cfg,
        &mut TrainRngs::new(cfg.seed, NetRole::Liver),
    )?;
    let stage = TumorStage::build(liver_net, data, cfg, thresholds, window)?;
    let mut rngs = TrainRngs::new(cfg.seed, NetRole::Tumor);
    let mut tumor = TrainReport::new(NetRole::Tumor);
    stage.train_main(tumor_net, cfg, &mut rngs, &mut tumor)?;
    stage.refine(tumor_net, cfg, &mut rngs, &mut tumor)?;
    let joint_objective = match cfg.joint_c {
        Some(c) if !data.val.is_empty() => Some(evaluate_joint_objective(
            liver_net, tumor_net, &data.val, c, thresholds, window,
        )?),
        _ => None,
    };
    Ok(SequentialOutcome {
        liver,
        tumor,
        joint_objective,
    })
}

pub fn train_one_step<T: Real>(
    net: &mut Network<T>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if net.config().head != Head::Softmax3 {
        return Err(Error::invalid("one-step training needs a softmax3 network"));
    }
    let weighted = match cfg.loss_mode {
        LossMode::Plain => false,
        LossMode::Balanced => true,
        LossMode::FixedAlpha(_) => {
            return Err(Error::InvalidConfig(
                "fixed_alpha weighting applies to binary networks only".into(),
            ))
        }
    };
    let start = Instant::now();
    let mut report = TrainReport::new(NetRole::OneStep);
    let mut rngs = TrainRngs::new(cfg.seed, NetRole::OneStep);
    let inputs: Vec<&Image> = data.train.iter().map(|s| &s.image).collect();
    let masks: Vec<_> = data.train.iter().map(|s| derive_masks(&s.labels)).collect();
    let class_weights: Vec<[f64; 3]> = masks
        .iter()
        .map(|m| {
            let [t, l, o] = m.one_hot();
            balanced_class_weights(t, l, o)
        })
        .collect::<Result<_>>()?;
    let val_inputs: Vec<&Image> = data.val.iter().map(|s| &s.image).collect();
    let val_truth: Vec<LabelMap> = data.val.iter().map(|s| s.labels.clone()).collect();
    let validate = |net: &Network<T>| -> Result<Option<ValSnapshot>> {
        if val_inputs.is_empty() {
            return Ok(None);
        }
        let pred: Vec<LabelMap> = one_step_predict_batch(net, &val_inputs)?
            .into_iter()
            .map(|o| o.labels)
            .collect();
        label_snapshot(&pred, &val_truth).map(Some)
    };
    run_epochs(
        net,
        &inputs,
        cfg.epochs_main,
        cfg.lr_initial,
        cfg,
        &mut rngs,
        Phase::OneStep,
        &mut report,
        |k, p| categorical_cross_entropy_grad(p, masks[k].one_hot(), None),
        validate,
    )?;
    run_epochs(
        net,
        &inputs,
        cfg.epochs_finetune,
        cfg.lr_finetune,
        cfg,
        &mut rngs,
        Phase::OneStepFinetune,
        &mut report,
        |k, p| {
            let w = weighted.then_some(class_weights[k]);
            categorical_cross_entropy_grad(p, masks[k].one_hot(), w)
        },
        validate,
    )?;
    report.wall_time = start.elapsed();
    Ok(report)
}

/// Joint cascade objective over `samples`, evaluated without dropout:
/// `c` times the mean liver loss plus `1 − c` times the mean tumor loss on
/// the masked data. The binary mask blocks gradients, so this is evaluation
/// only.
pub fn evaluate_joint_objective<T: Real>(
    liver_net: &Network<T>,
    tumor_net: &Network<T>,
    samples: &[Sample],
    c: f64,
    thresholds: CascadeThresholds,
    window: WindowSpec,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let liver_probs: Vec<ProbabilityMap> = predict_binary(liver_net, &images)?;
    let liver_masks = liver_probs
        .iter()
        .map(|p| threshold(p, thresholds.liver()))
        .collect::<Result<Vec<_>>>()?;
    let masked = images
        .iter()
        .zip(&liver_masks)
        .map(|(x, m)| masked_input(x, m, window))
        .collect::<Result<Vec<_>>>()?;
    let masked_refs: Vec<&Image> = masked.iter().collect();
    let tumor_probs = predict_binary(tumor_net, &masked_refs)?;
    let derived: Vec<_> = samples.iter().map(|s| derive_masks(&s.labels)).collect();
    let a: Vec<BinaryMask> = derived.iter().map(|d| d.liver_or_tumor.clone()).collect();
    let b: Vec<BinaryMask> = derived.iter().map(|d| d.tumor.clone()).collect();
    joint_loss(&liver_probs, &tumor_probs, &a, &b, &liver_masks, c)
}

/// Tumor threshold at the Youden point of the restricted ROC of the
/// cascade's tumor probabilities on `samples`. `None` when either class is
/// absent from the band.
pub fn select_tumor_threshold<T: Real>(
    liver_net: &Network<T>,
    tumor_net: &Network<T>,
    samples: &[Sample],
    thresholds: CascadeThresholds,
    window: WindowSpec,
    band: Band,
) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let outs = sequential_predict_batch(liver_net, tumor_net, &images, thresholds, window)?;
    let probs: Vec<&ProbabilityMap> = outs.iter().map(|o| &o.tumor_probs).collect();
    let truth: Vec<BinaryMask> = samples
        .iter()
        .map(|s| derive_masks(&s.labels).tumor)
        .collect();
    let truth: Vec<&BinaryMask> = truth.iter().collect();
    Ok(metrics::restricted_roc(&probs, &truth, band)?.map(|roc| roc.best_threshold()))
}

pub fn write_epochs_csv<'a>(
    w: &mut impl Write,
    reports: impl IntoIterator<Item = &'a TrainReport>,
) -> io::Result<()> {
    writeln!(
        w,
        "epoch,phase,mean_loss,val_pixel_acc,val_iou_liver,val_iou_tumor"
    )?;
    let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
    for r in reports {
        for e in &r.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.epoch,
                e.phase.as_str(),
                e.mean_loss,
                na(e.val.map(|v| v.pixel_acc)),
                na(e.val.map(|v| v.iou_liver)),
                na(e.val.and_then(|v| v.iou_tumor)),
            )?;
        }
    }
    Ok(())
}
