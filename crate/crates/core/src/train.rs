//! Desk-scale semi-supervised training on synthetic pixel grids.
//!
//! The model is a one-layer backbone feeding a classification head and an
//! embedding head, followed by the refinement layers. A mean teacher sees a
//! weakly augmented view of every unlabelled image; its refined output gives
//! the pseudo-labels and prototype targets. The student sees a strongly
//! augmented view of the same pixels and is trained through its own
//! refinement.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    clg_weighted_ce, compute_prototypes, slg_contrastive_loss, supervised_ce, total_loss, total_unsup_loss,
    LossConfig, PairSampling, PrototypeBank,
};
use crate::metrics::{confusion, miou, pseudo_label_accuracy, ConfusionMatrix};
use crate::nn::{Activation, ForwardCache, MlpGrads, MlpParams, OptimizerState, Sgd, TeacherState};
use crate::npy;
use crate::refine::{refine, refine_traced, RefineConfig, RefineLayers};
use crate::synth::{strong_extras, weak_augment, AugmentParams, SynthBatch, SynthDataset};
use crate::tensor::{child_rng, FeatureMatrix, LabelMap, Matrix, ProbMatrix, Rng, IGNORE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Dual-graph refinement with contrastive and weighted class losses.
    Mllc,
    /// Labelled images only.
    SupervisedOnly,
    /// Teacher argmax above the fixed threshold `sigma`, no graphs.
    SelfTraining,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Images per step, split evenly between labelled and unlabelled.
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub teacher_decay: f64,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub mode: TrainMode,
    pub hidden: usize,
    pub train_backbone: bool,
    pub train_refine: bool,
    /// Leading epochs trained on labelled images only.
    pub warmup_epochs: usize,
    /// Report the teacher rather than the student in evaluations.
    pub eval_teacher: bool,
    pub augment: AugmentParams,
    pub refine: RefineConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            base_lr: 0.05,
            momentum: 0.9,
            seed: 0,
            teacher_decay: 0.99,
            eval_interval: 0,
            mode: TrainMode::Mllc,
            hidden: 32,
            train_backbone: true,
            train_refine: true,
            warmup_epochs: 5,
            eval_teacher: true,
            augment: AugmentParams::default(),
            refine: RefineConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be positive".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Param(format!(
                "batch_size {} must be even and at least 2",
                self.batch_size
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Param("hidden width must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher_decay) {
            return Err(Error::Param(format!("teacher_decay {} outside [0, 1]", self.teacher_decay)));
        }
        self.refine.validate()?;
        self.loss.validate()
    }

    pub fn per_side(&self) -> usize {
        self.batch_size / 2
    }
}

const LAYER_NAMES: [&str; 3] = ["backbone", "cls_head", "emb_head"];

/// Backbone, heads and refinement layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: MlpParams,
    pub cls: MlpParams,
    pub emb: MlpParams,
    pub refine: RefineLayers,
}

pub struct HeadCache {
    backbone: ForwardCache,
    cls: ForwardCache,
    emb: ForwardCache,
}

impl Model {
    pub fn init(raw_dim: usize, hidden: usize, classes: usize, embed_dim: usize, rounds: usize, seed: u64) -> Self {
        let mut rng = child_rng(seed, 0x4d4f_4445);
        let mut backbone = MlpParams::random(hidden, raw_dim, Activation::LeakyRelu, 2f64.sqrt(), &mut rng);
        // Nonzero biases keep embeddings of zeroed (cut out) pixels away from the origin.
        for b in &mut backbone.bias {
            *b = 0.1 * (2.0 * rng.random::<f64>() - 1.0);
        }
        let cls = MlpParams::random(classes, hidden, Activation::SoftmaxRows, 1.0, &mut rng);
        let mut emb = MlpParams::random(embed_dim, hidden, Activation::Identity, 1.0, &mut rng);
        for b in &mut emb.bias {
            *b = 0.1 * (2.0 * rng.random::<f64>() - 1.0);
        }
        Model {
            backbone,
            cls,
            emb,
            refine: RefineLayers::identity_averaging(rounds, classes, embed_dim),
        }
    }

    pub fn classes(&self) -> usize {
        self.cls.out_dim()
    }

    pub fn layers(&self) -> Vec<&MlpParams> {
        let mut v = vec![&self.backbone, &self.cls, &self.emb];
        v.extend(self.refine.all());
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut MlpParams> {
        let mut v = vec![&mut self.backbone, &mut self.cls, &mut self.emb];
        v.extend(self.refine.all_mut());
        v
    }

    pub fn layer_names(&self) -> Vec<String> {
        let r = self.refine.rounds();
        LAYER_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain((0..r).map(|k| format!("clg_{k}")))
            .chain((0..r).map(|k| format!("slg_{k}")))
            .collect()
    }

    /// Inverse of [`Model::layers`].
    pub fn from_layers(mut layers: Vec<MlpParams>) -> Result<Self> {
        if layers.len() < 5 || (layers.len() - 3) % 2 != 0 {
            return Err(Error::Format(format!("{} layers do not form a model", layers.len())));
        }
        let r = (layers.len() - 3) / 2;
        let slg = layers.split_off(3 + r);
        let clg = layers.split_off(3);
        let mut it = layers.into_iter();
        let (backbone, cls, emb) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        if cls.in_dim() != backbone.out_dim() || emb.in_dim() != backbone.out_dim() {
            return Err(Error::Dimension("head widths do not match the backbone".into()));
        }
        Ok(Model {
            backbone,
            cls,
            emb,
            refine: RefineLayers { clg, slg },
        })
    }

    pub fn heads(&self, x: &Matrix) -> Result<(ProbMatrix, FeatureMatrix, HeadCache)> {
        let (z, backbone) = self.backbone.forward(x)?;
        let (p, cls) = self.cls.forward(&z)?;
        let (f, emb) = self.emb.forward(&z)?;
        let probs = ProbMatrix::from_trusted(p);
        let feats = FeatureMatrix::new(f)?;
        Ok((probs, feats, HeadCache { backbone, cls, emb }))
    }

    /// Gradients for backbone, classification head and embedding head.
    pub fn heads_backward(
        &self,
        cache: &HeadCache,
        g_probs: Option<&Matrix>,
        g_feats: Option<&Matrix>,
    ) -> Result<[MlpGrads; 3]> {
        let n = cache.backbone.output().rows();
        let mut g_z = Matrix::zeros(n, self.backbone.out_dim());
        let mut cls = MlpGrads::zeros_like(&self.cls);
        let mut emb = MlpGrads::zeros_like(&self.emb);
        if let Some(g) = g_probs {
            let (gl, gi) = self.cls.backward(&cache.cls, g)?;
            cls = gl;
            g_z.axpy(1.0, &gi);
        }
        if let Some(g) = g_feats {
            let (gl, gi) = self.emb.backward(&cache.emb, g)?;
            emb = gl;
            g_z.axpy(1.0, &gi);
        }
        let (backbone, _) = self.backbone.backward(&cache.backbone, &g_z)?;
        Ok([backbone, cls, emb])
    }

    pub fn predict(&self, x: &Matrix) -> Result<LabelMap> {
        Ok(self.heads(x)?.0.to_labels())
    }

    /// Pseudo-labels this model would train on: refined when `refine_cfg` is
    /// given, plain argmax otherwise.
    pub fn pseudo_labels(&self, x: &Matrix, refine_cfg: Option<&RefineConfig>) -> Result<LabelMap> {
        let (p, f, _) = self.heads(x)?;
        match refine_cfg {
            Some(cfg) => Ok(refine(&f, &p, &p, cfg, &self.refine)?.pseudo_labels()),
            None => Ok(p.to_labels()),
        }
    }
}

fn zero_grads(model: &Model) -> Vec<MlpGrads> {
    model.layers().into_iter().map(MlpGrads::zeros_like).collect()
}

/// Scalars of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub slg_loss: f64,
    pub clg_loss: f64,
    pub total_loss: f64,
    /// Unlabelled pixels carrying a pseudo-label this step.
    pub pseudo_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Accuracy of the pseudo-labels on the unlabelled training images.
    pub pseudo_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: usize,
    pub elapsed_s: f64,
}

/// Student, teacher and the per-round prototype banks.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: Model,
    pub teacher: TeacherState,
    pub banks: Vec<PrototypeBank>,
    pub sgd: Sgd,
    pub step: usize,
}

impl TrainState {
    pub fn new(ds: &SynthDataset, cfg: &TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let g = &ds.spec.grid;
        let student = Model::init(ds.spec.raw_dim, cfg.hidden, g.classes, g.embed_dim, cfg.refine.rounds, cfg.seed);
        let teacher = TeacherState::new(&student.layers(), cfg.teacher_decay)?;
        let banks = (0..cfg.refine.rounds)
            .map(|_| {
                let mut b = PrototypeBank::new(g.classes, g.embed_dim, cfg.loss.proto_beta);
                b.literal_ema = cfg.loss.literal_ema;
                b
            })
            .collect();
        let sgd = Sgd::new(OptimizerState {
            base_lr: cfg.base_lr,
            iter: 0,
            total_iter: total_steps.max(1),
            momentum: cfg.momentum,
        })?;
        Ok(TrainState {
            student,
            teacher,
            banks,
            sgd,
            step: 0,
        })
    }

    pub fn teacher_model(&self) -> Model {
        Model::from_layers(self.teacher.shadow.clone()).expect("teacher mirrors the student")
    }
}

struct ImageGrads {
    grads: Vec<MlpGrads>,
    sup: f64,
    slg: Vec<f64>,
    clg: Vec<f64>,
    st: f64,
    pseudo_pixels: usize,
    /// Teacher features per round with their pseudo-labels, for the banks.
    proto_inputs: Vec<(Matrix, LabelMap)>,
}

fn add_head_grads(into: &mut [MlpGrads], heads: [MlpGrads; 3]) {
    for (a, b) in into.iter_mut().zip(heads.iter()) {
        a.accumulate(b);
    }
}

fn labelled_grads(student: &Model, batch: &SynthBatch, cfg: &TrainConfig, width: f64, rng: &mut Rng, scale: f64) -> Result<ImageGrads> {
    let view = weak_augment(batch, &cfg.augment, width, rng);
    let (p, _, cache) = student.heads(&view.images)?;
    let ce = supervised_ce(&p, &view.gt)?;
    let mut grads = zero_grads(student);
    add_head_grads(&mut grads, student.heads_backward(&cache, Some(&ce.grad.scale(scale)), None)?);
    Ok(ImageGrads {
        grads,
        sup: ce.loss,
        slg: vec![],
        clg: vec![],
        st: 0.0,
        pseudo_pixels: 0,
        proto_inputs: vec![],
    })
}

#[allow(clippy::too_many_arguments)]
fn unlabelled_grads(
    student: &Model,
    teacher: &Model,
    banks: &[PrototypeBank],
    batch: &SynthBatch,
    cfg: &TrainConfig,
    width: f64,
    rng: &mut Rng,
    scale: f64,
    pair_seed: u64,
) -> Result<ImageGrads> {
    let weak = weak_augment(batch, &cfg.augment, width, rng);
    let strong = strong_extras(&weak, &cfg.augment, rng);
    let (pt, ft, _) = teacher.heads(&weak.images)?;
    let (ps, fs, cache) = student.heads(&strong.images)?;
    let mut grads = zero_grads(student);
    let backprop = cfg.loss.lambda_unsup != 0.0;

    match cfg.mode {
        TrainMode::SupervisedOnly => unreachable!("no unlabelled pass without unlabelled losses"),
        TrainMode::SelfTraining => {
            let sigma = cfg.refine.sigma;
            let labels: Vec<i64> = pt
                .matrix()
                .row_iter()
                .map(|r| {
                    let c = crate::tensor::argmax(r);
                    if r[c] >= sigma {
                        c as i64
                    } else {
                        IGNORE
                    }
                })
                .collect();
            let pseudo = LabelMap::new(labels, pt.classes())?;
            let ce = supervised_ce(&ps, &pseudo)?;
            // Mean over every pixel, masked ones counting as zero.
            let coverage = pseudo.valid_count() as f64 / pseudo.len() as f64;
            if backprop {
                let g = ce.grad.scale(scale * cfg.loss.lambda_unsup * coverage);
                add_head_grads(&mut grads, student.heads_backward(&cache, Some(&g), None)?);
            }
            Ok(ImageGrads {
                grads,
                sup: 0.0,
                slg: vec![],
                clg: vec![],
                st: ce.loss * coverage,
                pseudo_pixels: pseudo.valid_count(),
                proto_inputs: vec![],
            })
        }
        TrainMode::Mllc => {
            let rcfg = &cfg.refine;
            let tout = refine(&ft, &pt, &pt, rcfg, &teacher.refine)?;
            let pseudo = tout.pseudo_labels();
            let (sout, trace) = refine_traced(&fs, &ps, &ps, rcfg, &student.refine)?;
            let clg = clg_weighted_ce(&sout.per_round_probs, &pseudo, cfg.loss.dynamic_weight)?;
            let rounds = rcfg.rounds;
            let mut slg = vec![0.0; rounds];
            let mut g_feats = vec![None; rounds];
            for k in 0..rounds {
                if !banks[k].any_initialized() {
                    continue;
                }
                let sampling = PairSampling::from_config(&cfg.loss, pair_seed.wrapping_add(k as u64));
                let out = slg_contrastive_loss(sout.per_round_features[k].matrix(), &pseudo, &banks[k], &cfg.loss, sampling)?;
                slg[k] = out.loss;
                g_feats[k] = Some(out.grad.scale(scale * cfg.loss.lambda_unsup * cfg.loss.lambda_slg));
            }
            if backprop {
                let g_probs: Vec<Option<Matrix>> = clg
                    .grads
                    .iter()
                    .map(|g| Some(g.scale(scale * cfg.loss.lambda_unsup * cfg.loss.lambda_clg)))
                    .collect();
                let rg = trace.backward(&student.refine, &g_probs, &g_feats)?;
                add_head_grads(&mut grads, student.heads_backward(&cache, Some(&rg.probs), Some(&rg.features))?);
                for (dst, src) in grads[3..].iter_mut().zip(rg.clg.iter().chain(&rg.slg)) {
                    dst.accumulate(src);
                }
            }
            let proto_inputs = tout
                .per_round_features
                .iter()
                .map(|f| (f.matrix().clone(), pseudo.clone()))
                .collect();
            Ok(ImageGrads {
                grads,
                sup: 0.0,
                slg,
                clg: clg.per_round,
                st: 0.0,
                pseudo_pixels: pseudo.valid_count(),
                proto_inputs,
            })
        }
    }
}

const LABELLED_STREAM: u64 = 0x4c41_4245_0000_0000;
const UNLABELLED_STREAM: u64 = 0x554e_4c41_0000_0000;

fn image_rng(seed: u64, base: u64, step: usize, slot: usize) -> Rng {
    child_rng(seed, base | ((step as u64) << 16) | slot as u64)
}

/// One optimisation step on `labelled` and `unlabelled` images.
pub fn train_step(
    state: &mut TrainState,
    labelled: &[&SynthBatch],
    unlabelled: &[&SynthBatch],
    cfg: &TrainConfig,
    width: f64,
    epoch: usize,
) -> Result<StepRecord> {
    let step = state.step;
    let teacher = state.teacher_model();
    let student = &state.student;
    let banks = &state.banks;

    let l_scale = 1.0 / labelled.len().max(1) as f64;
    let sup_parts: Vec<ImageGrads> = labelled
        .par_iter()
        .enumerate()
        .map(|(j, b)| {
            let mut rng = image_rng(cfg.seed, LABELLED_STREAM, step, j);
            labelled_grads(student, b, cfg, width, &mut rng, l_scale)
        })
        .collect::<Result<_>>()?;

    let use_unlabelled = cfg.mode != TrainMode::SupervisedOnly && epoch >= cfg.warmup_epochs;
    let u_scale = 1.0 / unlabelled.len().max(1) as f64;
    let unsup_parts: Vec<ImageGrads> = if use_unlabelled {
        unlabelled
            .par_iter()
            .enumerate()
            .map(|(j, b)| {
                let mut rng = image_rng(cfg.seed, UNLABELLED_STREAM, step, j);
                let pair_seed = cfg.seed ^ ((step as u64) << 20) ^ ((j as u64) << 8);
                unlabelled_grads(student, &teacher, banks, b, cfg, width, &mut rng, u_scale, pair_seed)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut grads = zero_grads(student);
    let mut sup = 0.0;
    for part in &sup_parts {
        sup += part.sup * l_scale;
        grads.iter_mut().zip(&part.grads).for_each(|(a, b)| a.accumulate(b));
    }
    let rounds = cfg.refine.rounds;
    let (mut slg, mut clg) = (vec![0.0; rounds], vec![0.0; rounds]);
    let mut st = 0.0;
    let mut pseudo_pixels = 0;
    for part in &unsup_parts {
        grads.iter_mut().zip(&part.grads).for_each(|(a, b)| a.accumulate(b));
        for k in 0..part.slg.len() {
            slg[k] += part.slg[k] * u_scale;
            clg[k] += part.clg[k] * u_scale;
        }
        st += part.st * u_scale;
        pseudo_pixels += part.pseudo_pixels;
    }
    let unsup = match cfg.mode {
        _ if !use_unlabelled => 0.0,
        TrainMode::Mllc => total_unsup_loss(&slg, &clg, &cfg.loss)?,
        TrainMode::SelfTraining => st,
        TrainMode::SupervisedOnly => 0.0,
    };
    let total = total_loss(sup, unsup, &cfg.loss);
    if !total.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss at step {step} (seed {}, sup {sup}, unsup {unsup})",
            cfg.seed
        )));
    }
    if !cfg.train_backbone {
        grads[0] = MlpGrads::zeros_like(&student.backbone);
    }
    if !cfg.train_refine {
        for (g, l) in grads[3..].iter_mut().zip(student.refine.all()) {
            *g = MlpGrads::zeros_like(l);
        }
    }

    let lr = state.sgd.state.lr();
    {
        let mut layers = state.student.layers_mut();
        state.sgd.step(&mut layers, &grads).map_err(|e| match e {
            Error::Divergence(msg) => Error::Divergence(format!("{msg} (seed {})", cfg.seed)),
            other => other,
        })?;
    }
    state.teacher.update_ramped(&state.student.layers(), step)?;

    if cfg.mode == TrainMode::Mllc && use_unlabelled {
        for k in 0..rounds {
            let feats: Vec<&Matrix> = unsup_parts.iter().map(|p| &p.proto_inputs[k].0).collect();
            if feats.is_empty() {
                continue;
            }
            let labels: Vec<i64> = unsup_parts
                .iter()
                .flat_map(|p| p.proto_inputs[k].1.raw().iter().copied())
                .collect();
            let labels = LabelMap::new(labels, student_classes(&state.student))?;
            let protos = compute_prototypes(&Matrix::vstack(&feats)?, &labels)?;
            state.banks[k].ema_update(&protos)?;
        }
    }
    state.step += 1;
    Ok(StepRecord {
        step,
        epoch,
        lr,
        sup_loss: sup,
        unsup_loss: unsup,
        slg_loss: slg.iter().sum(),
        clg_loss: clg.iter().sum(),
        total_loss: total,
        pseudo_pixels,
    })
}

fn student_classes(m: &Model) -> usize {
    m.classes()
}

/// mIoU on `val` and pseudo-label accuracy on `unlabelled`.
pub fn evaluate(
    model: &Model,
    val: &[SynthBatch],
    unlabelled: &[SynthBatch],
    refine_cfg: Option<&RefineConfig>,
    step: usize,
) -> Result<EvalRecord> {
    if val.is_empty() {
        return Err(Error::Contract("evaluation needs a nonempty validation split".into()));
    }
    let cms: Vec<ConfusionMatrix> = val
        .par_iter()
        .map(|b| confusion(&model.predict(&b.images)?, &b.gt))
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(model.classes());
    cms.iter().for_each(|c| cm.merge(c));
    let report = miou(&cm)?;

    let pseudo_accuracy = if unlabelled.is_empty() {
        None
    } else {
        let hits: Vec<(f64, usize)> = unlabelled
            .par_iter()
            .map(|b| {
                let pl = model.pseudo_labels(&b.images, refine_cfg)?;
                let acc = pseudo_label_accuracy(&pl, &b.gt, None)?;
                Ok((acc.accuracy * b.gt.len() as f64, b.gt.len()))
            })
            .collect::<Result<_>>()?;
        let (num, den) = hits.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
        Some(num / den as f64)
    };
    Ok(EvalRecord {
        step,
        miou: report.miou,
        per_class_iou: report.per_class,
        pseudo_accuracy,
    })
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<TrainRecord>,
    pub timing: Vec<TimingRecord>,
    pub final_eval: EvalRecord,
}

pub fn steps_per_epoch(ds: &SynthDataset, cfg: &TrainConfig) -> usize {
    let unlabelled = ds.unlabeled().count().max(1);
    unlabelled.div_ceil(cfg.per_side())
}

fn eval_model(state: &TrainState, cfg: &TrainConfig) -> Model {
    if cfg.eval_teacher {
        state.teacher_model()
    } else {
        state.student.clone()
    }
}

/// Full training run. `on_record` sees every record as it is produced.
pub fn train(
    ds: &SynthDataset,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labelled: Vec<&SynthBatch> = ds.labeled().collect();
    let unlabelled: Vec<&SynthBatch> = ds.unlabeled().collect();
    if labelled.is_empty() {
        return Err(Error::Param("dataset has no labelled image".into()));
    }
    let per_epoch = steps_per_epoch(ds, cfg);
    let total = per_epoch * cfg.epochs;
    let mut state = TrainState::new(ds, cfg, total)?;
    let width = ds.spec.cluster_width;
    let side = cfg.per_side();
    let unlabelled_owned: Vec<SynthBatch> = unlabelled.iter().map(|b| (*b).clone()).collect();
    let eval_refine = (cfg.mode == TrainMode::Mllc).then_some(&cfg.refine);

    let mut l_rng = child_rng(cfg.seed, 0x5341_4d4c);
    let mut u_rng = child_rng(cfg.seed, 0x5341_4d55);
    let mut l_order: Vec<usize> = Vec::new();
    let mut records = Vec::new();
    let mut timing = Vec::new();
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut u_order: Vec<usize> = (0..unlabelled.len()).collect();
        u_order.shuffle(&mut u_rng);
        for s in 0..per_epoch {
            let mut lb = Vec::with_capacity(side);
            while lb.len() < side {
                if l_order.is_empty() {
                    l_order = (0..labelled.len()).collect();
                    l_order.shuffle(&mut l_rng);
                }
                lb.push(labelled[l_order.pop().unwrap()]);
            }
            let ub: Vec<&SynthBatch> = if unlabelled.is_empty() {
                Vec::new()
            } else {
                (0..side)
                    .map(|j| unlabelled[u_order[(s * side + j) % u_order.len()]])
                    .collect()
            };
            let rec = train_step(&mut state, &lb, &ub, cfg, width, epoch)?;
            let rec = TrainRecord::Step(rec);
            on_record(&rec);
            records.push(rec);
            timing.push(TimingRecord {
                step: state.step - 1,
                elapsed_s: start.elapsed().as_secs_f64(),
            });
            if cfg.eval_interval > 0 && state.step % cfg.eval_interval == 0 && state.step < total {
                let e = evaluate(&eval_model(&state, cfg), &ds.val, &unlabelled_owned, eval_refine, state.step)?;
                let rec = TrainRecord::Eval(e);
                on_record(&rec);
                records.push(rec);
            }
        }
    }
    let final_eval = evaluate(&eval_model(&state, cfg), &ds.val, &unlabelled_owned, eval_refine, state.step)?;
    let rec = TrainRecord::Eval(final_eval.clone());
    on_record(&rec);
    records.push(rec);
    Ok(TrainOutcome {
        state,
        records,
        timing,
        final_eval,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub activation: Activation,
    pub weight: String,
    pub bias: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: usize,
    pub rounds: usize,
    pub student: Vec<LayerEntry>,
    pub teacher: Vec<LayerEntry>,
    pub config: serde_json::Value,
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

fn save_layers(dir: &Path, prefix: &str, model: &Model) -> Result<Vec<LayerEntry>> {
    model
        .layers()
        .into_iter()
        .zip(model.layer_names())
        .map(|(l, name)| {
            let weight = format!("{prefix}_{name}_w.npy");
            let bias = format!("{prefix}_{name}_b.npy");
            npy::save_matrix(dir.join(&weight), &l.weight)?;
            npy::write(
                dir.join(&bias),
                &npy::NpyArray {
                    shape: vec![l.bias.len()],
                    data: npy::NpyData::F64(l.bias.clone()),
                },
            )?;
            Ok(LayerEntry {
                name,
                activation: l.activation,
                weight,
                bias,
            })
        })
        .collect()
}

fn load_layers(dir: &Path, entries: &[LayerEntry]) -> Result<Model> {
    let layers = entries
        .iter()
        .map(|e| {
            let w = npy::load_matrix(dir.join(&e.weight))?;
            let b = npy::load_matrix(dir.join(&e.bias))?.into_vec();
            MlpParams::new(w, b, e.activation)
        })
        .collect::<Result<Vec<_>>>()?;
    Model::from_layers(layers)
}

/// Writes student and teacher layers as NPY files plus a JSON manifest.
pub fn save_checkpoint(dir: &Path, state: &TrainState, config: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        step: state.step,
        rounds: state.student.refine.rounds(),
        student: save_layers(dir, "student", &state.student)?,
        teacher: save_layers(dir, "teacher", &state.teacher_model())?,
        config,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub struct Checkpoint {
    pub step: usize,
    pub student: Model,
    pub teacher: Model,
    pub config: serde_json::Value,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    Ok(Checkpoint {
        step: m.step,
        student: load_layers(dir, &m.student)?,
        teacher: load_layers(dir, &m.teacher)?,
        config: m.config,
    })
}
