//! Training stages: supervised pretraining of the single-phase network,
//! joint co-heterogeneous/adversarial training, and finetuning with
//! hole pseudo-labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ada::{
    adversarial_loss, disc_logits, discriminator_loss, init_discriminator, region, DiscConfig, ForwardCounter, Side,
    DISC_PREFIX,
};
use crate::augment::{augment, augment_with_fill, AugmentParams, Slice2d};
use crate::backbone::{
    init_backbone, prevalence_weights, staged_seg_loss, supervised_loss, BackboneConfig, Binder, LabeledSlice,
    SEG_PREFIX,
};
use crate::consistency::cons_loss_batch;
use crate::error::{Error, Result};
use crate::evaluation::dsc;
use crate::heterofusion::{enumerate_views, hetero_forward_batch, widen_from_single, HeteroRequest, ViewCombo};
use crate::model::{Checkpoint, Model, ModelKind, CHECKPOINT_VERSION};
use crate::nn::{poly_decay, Adam, Graph, ParamStore, PlateauSchedule, Sgd, Tensor};
use crate::pseudolabel::{seg_loss_with_pseudo, HolesRecord, HolesTerm};
use crate::synthdata::{mix_seed, rng_for, PhaseId, Study, IGNORE};

const TAG_PRETRAIN: u64 = 0x7072;
const TAG_CHASE: u64 = 0x6368;
const TAG_HOLES: u64 = 0x686f;
const TAG_INIT: u64 = 0x696e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,

    pub channels: [usize; 5],
    pub downsample: [usize; 5],
    pub convs_per_stage: usize,
    pub disc_features: usize,

    pub pretrain_epochs: usize,
    pub pretrain_steps_per_epoch: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,

    pub chase_epochs: usize,
    pub steps_per_epoch: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub combos_per_step: usize,
    pub seg_lr: f64,
    pub seg_momentum: f64,
    pub disc_lr: f64,
    pub disc_poly_power: f64,
    pub lambda_adv: f64,
    pub detach_consensus: bool,

    pub finetune_epochs: usize,
    pub holes_batch: usize,
    pub lambda_h: f64,
    pub min_hole_voxels: usize,

    pub augment: bool,
    /// Rotation is drawn from `[-aug_rotation_deg, aug_rotation_deg]`.
    pub aug_rotation_deg: f64,
    /// Scale is drawn from `[1 - aug_scale, 1 + aug_scale]`.
    pub aug_scale: f64,
    /// Gamma is drawn from `[1 / (1 + aug_gamma), 1 + aug_gamma]`.
    pub aug_gamma: f64,
    pub aug_elastic_alpha: f64,
    pub aug_elastic_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self {
            seed: 7,
            channels: b.channels,
            downsample: b.downsample,
            convs_per_stage: b.convs_per_stage,
            disc_features: DiscConfig::default().features,
            pretrain_epochs: 20,
            pretrain_steps_per_epoch: 30,
            pretrain_batch: 8,
            pretrain_lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            plateau_patience: 10,
            plateau_factor: 0.1,
            chase_epochs: 3,
            steps_per_epoch: 50,
            labeled_batch: 8,
            unlabeled_batch: 8,
            combos_per_step: 4,
            seg_lr: 3e-4,
            seg_momentum: 0.9,
            disc_lr: 3e-4,
            disc_poly_power: 0.9,
            lambda_adv: 0.001,
            detach_consensus: false,
            finetune_epochs: 1,
            holes_batch: 2,
            lambda_h: 0.01,
            min_hole_voxels: 100,
            augment: true,
            aug_rotation_deg: 10.0,
            aug_scale: 0.1,
            aug_gamma: 0.2,
            aug_elastic_alpha: 1.0,
            aug_elastic_sigma: 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        let positive = [
            ("pretrain_steps_per_epoch", self.pretrain_steps_per_epoch),
            ("pretrain_batch", self.pretrain_batch),
            ("steps_per_epoch", self.steps_per_epoch),
            ("labeled_batch", self.labeled_batch),
            ("unlabeled_batch", self.unlabeled_batch),
            ("combos_per_step", self.combos_per_step),
            ("plateau_patience", self.plateau_patience),
            ("disc_features", self.disc_features),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be >= 1")));
        }
        let nonneg = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_h", self.lambda_h),
            ("seg_lr", self.seg_lr),
            ("disc_lr", self.disc_lr),
            ("pretrain_lr", self.pretrain_lr),
            ("aug_rotation_deg", self.aug_rotation_deg),
            ("aug_scale", self.aug_scale),
            ("aug_gamma", self.aug_gamma),
            ("aug_elastic_alpha", self.aug_elastic_alpha),
        ];
        if let Some((k, _)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("{k} must be a finite value >= 0")));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config("plateau_factor must be in (0, 1]".into()));
        }
        if self.aug_scale >= 1.0 || self.aug_elastic_sigma <= 0.0 {
            return Err(Error::Config("aug_scale must be < 1 and aug_elastic_sigma > 0".into()));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            channels: self.channels,
            downsample: self.downsample,
            convs_per_stage: self.convs_per_stage,
            ..BackboneConfig::default()
        }
    }

    pub fn disc(&self) -> DiscConfig {
        DiscConfig {
            features: self.disc_features,
        }
    }

    pub fn augment_params(&self) -> AugmentParams {
        if !self.augment {
            return AugmentParams::identity();
        }
        AugmentParams {
            rotation_deg: (-self.aug_rotation_deg, self.aug_rotation_deg),
            scale: (1.0 - self.aug_scale, 1.0 + self.aug_scale),
            gamma: (1.0 / (1.0 + self.aug_gamma), 1.0 + self.aug_gamma),
            elastic_alpha: self.aug_elastic_alpha,
            elastic_sigma: self.aug_elastic_sigma,
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn finite(step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            step,
            what: what.to_string(),
        })
    }
}

/// Axial slice `z` as a `[1, 1, H, W]` tensor.
pub fn slice_tensor(study: &Study, phase: PhaseId, z: usize) -> Tensor {
    let v = &study.phases[&phase];
    Tensor::image(v.shape[1], v.shape[2], v.slice(z))
}

fn augmented(t: Tensor, params: &AugmentParams, seed: u64) -> Tensor {
    let [_, _, h, w] = t.shape();
    let (out, _) = augment(&Slice2d::new(h, w, t.into_data()), None, params, seed);
    Tensor::image(h, w, out.data)
}

/// Up to `k` combinations drawn uniformly without replacement, returned in
/// canonical order.
pub fn sample_combos(available: &[PhaseId], k: usize, rng: &mut impl Rng) -> Result<Vec<ViewCombo>> {
    let all = enumerate_views(available)?;
    let take = k.min(all.len());
    let mut idx = sample(rng, all.len(), take).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| all[i].clone()).collect())
}

/// A labelled source slice with augmentation applied to image and mask.
pub fn labeled_item(study: &Study, z: usize, params: &AugmentParams, seed: u64) -> Result<LabeledSlice> {
    let mask = study
        .mask
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("study {} has no mask", study.id)))?;
    let img = slice_tensor(study, PhaseId::V, z);
    let [_, _, h, w] = img.shape();
    let (im, lab) = augment(&Slice2d::new(h, w, img.into_data()), Some(mask.slice(z)), params, seed);
    Ok(LabeledSlice {
        image: Tensor::image(h, w, im.data),
        labels: lab.expect("mask passed"),
    })
}

/// Unlabelled multi-phase slice; every phase gets the same draw.
#[derive(Clone, Debug)]
pub struct UnlabeledItem {
    pub images: BTreeMap<PhaseId, Tensor>,
    pub combos: Vec<ViewCombo>,
}

#[derive(Clone, Debug)]
pub struct HolesItem {
    pub images: BTreeMap<PhaseId, Tensor>,
    pub labels: Vec<u8>,
    pub combos: Vec<ViewCombo>,
}

fn phase_images(study: &Study, z: usize, params: &AugmentParams, seed: u64) -> BTreeMap<PhaseId, Tensor> {
    study
        .phases
        .keys()
        .map(|&p| (p, augmented(slice_tensor(study, p, z), params, seed)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_dsc: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_val_dsc: f64,
}

/// Mean liver-region DSC of a model over studies for one combination.
pub fn mean_region_dsc(model: &Model, studies: &[Study], combo: &ViewCombo) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in studies {
        if !combo.is_subset_of(&s.available()) {
            continue;
        }
        let gt = s.mask.as_ref().unwrap_or(&s.reference);
        let pred = model.predict_labels(s, combo)?;
        total += dsc(&pred.region(), &gt.region())?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract(format!("no study has the phases for {combo}")));
    }
    Ok(total / n as f64)
}

fn all_slices(studies: &[Study]) -> Vec<(usize, usize)> {
    studies
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.depth()).map(move |z| (i, z)))
        .collect()
}

/// Supervised pretraining of the single-phase network on the labelled
/// source studies. Keeps the parameters with the best validation
/// liver-region DSC.
pub fn pretrain(
    tc: &TrainConfig,
    labeled: &[Study],
    val: &[Study],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    tc.validate()?;
    if labeled.is_empty() || val.is_empty() {
        return Err(Error::Contract("pretraining needs labelled and validation studies".into()));
    }
    let cfg = tc.backbone();
    let weights = prevalence_weights(labeled.iter().filter_map(|s| s.mask.as_ref()));
    let mut params = init_backbone(&cfg, mix_seed(&[tc.seed, TAG_INIT]))?;
    let mut opt = Adam::new(tc.pretrain_lr, tc.adam_beta1, tc.adam_beta2);
    let mut plateau = PlateauSchedule::new(tc.plateau_patience, tc.plateau_factor);
    let slices = all_slices(labeled);
    let aug = tc.augment_params();
    let v_only = ViewCombo::single(PhaseId::V);

    let mut best = (f64::NEG_INFINITY, params.clone(), 0usize);
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..tc.pretrain_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..tc.pretrain_steps_per_epoch {
            let mut rng = rng_for(&[tc.seed, TAG_PRETRAIN, step as u64]);
            let batch = (0..tc.pretrain_batch)
                .map(|_| {
                    let (si, z) = slices[rng.random_range(0..slices.len())];
                    labeled_item(&labeled[si], z, &aug, rng.random())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let (loss, _) = supervised_loss(&mut g, &Binder::trainable(&params), &cfg, &batch, weights)?;
            let lv = finite(step, "L_seg", g.value(loss).item_scalar())?;
            let grads = g.backward(loss);
            opt.update(&mut params, grads.params());
            loss_sum += lv;
            step += 1;
        }
        let model = Model {
            kind: ModelKind::Single,
            cfg: cfg.clone(),
            params: params.clone(),
        };
        let val_dsc = mean_region_dsc(&model, val, &v_only)?;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / tc.pretrain_steps_per_epoch as f64,
            val_dsc,
            lr: opt.lr,
        };
        on_epoch(&entry);
        log.push(entry);
        let (factor, improved) = plateau.observe(val_dsc);
        if improved {
            best = (val_dsc, params.clone(), step);
        }
        opt.lr *= factor;
    }
    let (best_val_dsc, params, best_step) = best;
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        kind: ModelKind::Single,
        stage: "pretrain".into(),
        step: best_step,
        backbone: cfg,
        disc: None,
        params,
        meta: BTreeMap::from([("val_dsc".into(), format!("{best_val_dsc:.6}"))]),
    };
    Ok(PretrainOutcome {
        checkpoint,
        log,
        best_val_dsc,
    })
}

/// Hetero network whose every stem copies the pretrained stages 1-2, whose
/// trunk copies stages 3-5 (variance half of the widened input zeroed), and
/// a freshly initialised discriminator.
pub fn init_cohetero_from_pretrained(ck: &Checkpoint, disc: &DiscConfig, seed: u64) -> Result<Checkpoint> {
    if ck.kind != ModelKind::Single {
        return Err(Error::Config("expected a single-phase checkpoint".into()));
    }
    let mut params = widen_from_single(&ck.seg_params(), &ck.backbone)?;
    params.extend(init_discriminator(disc, mix_seed(&[seed, TAG_INIT, 0xd15c]))?);
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        kind: ModelKind::Hetero,
        stage: "init".into(),
        step: 0,
        backbone: ck.backbone.clone(),
        disc: Some(disc.clone()),
        params,
        meta: BTreeMap::new(),
    })
}

/// Losses of one joint step. `l_seg` includes the holes term when present.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub l_seg: f64,
    pub l_cons: f64,
    pub l_adv: f64,
    pub l_d: f64,
    pub total: f64,
}

pub struct ChaseGrads {
    pub seg: BTreeMap<String, Tensor>,
    pub disc: BTreeMap<String, Tensor>,
    pub losses: StepLosses,
}

pub struct StepBatch {
    pub labeled: Vec<LabeledSlice>,
    pub unlabeled: Vec<UnlabeledItem>,
    pub holes: Vec<HolesItem>,
}

fn to_request(g: &mut Graph, images: &BTreeMap<PhaseId, Tensor>, combos: &[ViewCombo]) -> HeteroRequest {
    HeteroRequest {
        images: images.iter().map(|(&p, t)| (p, g.input(t.clone()))).collect(),
        combos: combos.to_vec(),
    }
}

/// Builds the joint objective for one step and returns gradients of
/// `L_seg + L_cons + lambda_adv * L_adv` for the segmentation parameters and
/// of `L_d` for the discriminator. The discriminator sees the target side
/// exactly once, as a single batch of consensus maps.
#[allow(clippy::too_many_arguments)]
pub fn chase_gradients(
    params: &ParamStore,
    cfg: &BackboneConfig,
    tc: &TrainConfig,
    weights: [f64; 3],
    batch: &StepBatch,
    step: usize,
    counter: &ForwardCounter,
) -> Result<ChaseGrads> {
    if batch.labeled.is_empty() || batch.unlabeled.is_empty() {
        return Err(Error::Contract("a joint step needs labelled and unlabelled items".into()));
    }
    let mut g = Graph::new();
    let p = Binder::trainable(params);

    // labelled: singleton {V} through the hetero network
    let images: Vec<&Tensor> = batch.labeled.iter().map(|s| &s.image).collect();
    let x = g.input(Tensor::stack(&images));
    let labels: Vec<u8> = batch.labeled.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let req = HeteroRequest {
        images: BTreeMap::from([(PhaseId::V, x)]),
        combos: vec![ViewCombo::single(PhaseId::V)],
    };
    let src = hetero_forward_batch(&mut g, &p, cfg, &[req])?.remove(0).remove(0);
    let l_sup = staged_seg_loss(&mut g, &src, &labels, weights);

    let holes_reqs: Vec<HeteroRequest> = batch
        .holes
        .iter()
        .map(|h| to_request(&mut g, &h.images, &h.combos))
        .collect();
    let holes_outs = if holes_reqs.is_empty() {
        Vec::new()
    } else {
        hetero_forward_batch(&mut g, &p, cfg, &holes_reqs)?
    };
    let terms: Vec<HolesTerm> = holes_outs
        .into_iter()
        .zip(&batch.holes)
        .map(|(outputs, h)| HolesTerm {
            outputs,
            labels: &h.labels,
        })
        .collect();
    let l_seg = seg_loss_with_pseudo(&mut g, l_sup, &terms, weights, tc.lambda_h)?;

    let reqs: Vec<HeteroRequest> = batch
        .unlabeled
        .iter()
        .map(|u| to_request(&mut g, &u.images, &u.combos))
        .collect();
    let cons = cons_loss_batch(&mut g, &p, cfg, &reqs, tc.detach_consensus)?;
    let m = if cons.consensus.len() == 1 {
        cons.consensus[0]
    } else {
        g.stack(&cons.consensus)
    };
    let target_region = region(&mut g, m);
    let zt = disc_logits(&mut g, &p, target_region, Side::Target, counter);
    let source_region = region(&mut g, src.final_probs());
    let zs = disc_logits(&mut g, &p, source_region, Side::Source, counter);

    let l_adv = adversarial_loss(&mut g, zt);
    let l_d = discriminator_loss(&mut g, zs, zt);
    let total = g.lin(&[(l_seg, 1.0), (cons.loss, 1.0), (l_adv, tc.lambda_adv)]);

    let losses = StepLosses {
        step,
        l_seg: finite(step, "L_seg", g.value(l_seg).item_scalar())?,
        l_cons: finite(step, "L_cons", g.value(cons.loss).item_scalar())?,
        l_adv: finite(step, "L_adv", g.value(l_adv).item_scalar())?,
        l_d: finite(step, "L_d", g.value(l_d).item_scalar())?,
        total: finite(step, "total loss", g.value(total).item_scalar())?,
    };
    let seg = g.backward_filtered(total, |n| n.starts_with(SEG_PREFIX)).into_params();
    let disc = g.backward_filtered(l_d, |n| n.starts_with(DISC_PREFIX)).into_params();
    for (name, t) in seg.iter().chain(&disc) {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step,
                what: format!("gradient of {name}"),
            });
        }
    }
    Ok(ChaseGrads { seg, disc, losses })
}

/// Parameters and optimiser state of the joint stage.
pub struct ChaseState {
    pub cfg: BackboneConfig,
    pub params: ParamStore,
    pub seg_opt: Sgd,
    pub disc_opt: Adam,
    pub step: usize,
}

impl ChaseState {
    pub fn new(ck: &Checkpoint, tc: &TrainConfig) -> Result<Self> {
        if ck.kind != ModelKind::Hetero {
            return Err(Error::Config("joint training needs a hetero checkpoint".into()));
        }
        Ok(Self {
            cfg: ck.backbone.clone(),
            params: ck.params.clone(),
            seg_opt: Sgd::new(tc.seg_lr, tc.seg_momentum),
            disc_opt: Adam::new(tc.disc_lr, tc.adam_beta1, tc.adam_beta2),
            step: ck.step,
        })
    }

    /// Segmentation update; discriminator parameters are untouched.
    pub fn apply_seg(&mut self, grads: &BTreeMap<String, Tensor>) {
        debug_assert!(grads.keys().all(|k| k.starts_with(SEG_PREFIX)));
        self.seg_opt.update(&mut self.params, grads);
    }

    /// Discriminator update at learning rate `lr`; segmentation untouched.
    pub fn apply_disc(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) {
        debug_assert!(grads.keys().all(|k| k.starts_with(DISC_PREFIX)));
        self.disc_opt.lr = lr;
        self.disc_opt.update(&mut self.params, grads);
    }

    pub fn model(&self) -> Model {
        Model {
            kind: ModelKind::Hetero,
            cfg: self.cfg.clone(),
            params: self.params.subset(SEG_PREFIX),
        }
    }

    pub fn checkpoint(&self, stage: &str, disc: &DiscConfig) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: ModelKind::Hetero,
            stage: stage.to_string(),
            step: self.step,
            backbone: self.cfg.clone(),
            disc: Some(disc.clone()),
            params: self.params.clone(),
            meta: BTreeMap::new(),
        }
    }
}

/// One joint step: gradients, segmentation update, then discriminator
/// update with polynomially decayed learning rate.
pub fn chase_step(
    state: &mut ChaseState,
    tc: &TrainConfig,
    weights: [f64; 3],
    batch: &StepBatch,
    progress: (usize, usize),
    counter: &ForwardCounter,
) -> Result<StepLosses> {
    let grads = chase_gradients(&state.params, &state.cfg, tc, weights, batch, state.step, counter)?;
    state.apply_seg(&grads.seg);
    let lr = poly_decay(tc.disc_lr, progress.0, progress.1, tc.disc_poly_power);
    state.apply_disc(&grads.disc, lr);
    state.step += 1;
    Ok(grads.losses)
}

/// Axial slices whose prediction (all available phases) contains liver, per
/// study. Studies with no predicted liver keep every slice.
pub fn liver_slice_ranges(model: &Model, studies: &[Study]) -> Result<Vec<Vec<usize>>> {
    use rayon::prelude::*;
    studies
        .par_iter()
        .map(|s| {
            let pred = model.predict_labels(s, &ViewCombo::new(s.available())?)?;
            let r = pred.region();
            let plane = pred.slice_len();
            let zs: Vec<usize> = (0..s.depth()).filter(|&z| r[z * plane..(z + 1) * plane].iter().any(|&b| b)).collect();
            Ok(if zs.is_empty() { (0..s.depth()).collect() } else { zs })
        })
        .collect()
}

pub struct ChaseOutcome {
    pub state: ChaseState,
    pub losses: Vec<StepLosses>,
}

/// Sampler state shared by the joint and finetune loops.
struct Sampler<'a> {
    tc: &'a TrainConfig,
    labeled: &'a [Study],
    labeled_slices: Vec<(usize, usize)>,
    unlabeled: &'a [Study],
    ranges: Vec<Vec<usize>>,
    holes: Vec<(&'a HolesRecord, &'a Study, Vec<usize>)>,
    aug: AugmentParams,
}

impl Sampler<'_> {
    fn batch(&self, step: usize) -> Result<StepBatch> {
        let tc = self.tc;
        let mut rng: ChaCha8Rng = rng_for(&[tc.seed, TAG_CHASE, step as u64]);
        let labeled = (0..tc.labeled_batch)
            .map(|_| {
                let (si, z) = self.labeled_slices[rng.random_range(0..self.labeled_slices.len())];
                labeled_item(&self.labeled[si], z, &self.aug, rng.random())
            })
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = (0..tc.unlabeled_batch)
            .map(|_| {
                let si = rng.random_range(0..self.unlabeled.len());
                let zs = &self.ranges[si];
                let z = zs[rng.random_range(0..zs.len())];
                let study = &self.unlabeled[si];
                let combos = sample_combos(&study.available(), tc.combos_per_step, &mut rng)?;
                Ok(UnlabeledItem {
                    images: phase_images(study, z, &self.aug, rng.random()),
                    combos,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut holes = Vec::new();
        if !self.holes.is_empty() && tc.lambda_h > 0.0 {
            let mut hr: ChaCha8Rng = rng_for(&[tc.seed, TAG_HOLES, step as u64]);
            for _ in 0..tc.holes_batch {
                let (rec, study, zs) = &self.holes[hr.random_range(0..self.holes.len())];
                let z = zs[hr.random_range(0..zs.len())];
                let seed: u64 = hr.random();
                let imgs = study.phases.keys().map(|&p| slice_tensor(study, p, z)).collect::<Vec<_>>();
                let [_, _, h, w] = imgs[0].shape();
                let (mut images, mut labels) = (BTreeMap::new(), Vec::new());
                for (&p, t) in study.phases.keys().zip(imgs) {
                    let (im, lab) = augment_with_fill(
                        &Slice2d::new(h, w, t.into_data()),
                        Some(rec.pseudo.slice(z)),
                        &self.aug,
                        seed,
                        IGNORE,
                    );
                    images.insert(p, Tensor::image(h, w, im.data));
                    labels = lab.expect("mask passed");
                }
                let combos = sample_combos(&study.available(), tc.combos_per_step, &mut hr)?;
                holes.push(HolesItem { images, labels, combos });
            }
        }
        Ok(StepBatch {
            labeled,
            unlabeled,
            holes,
        })
    }
}

/// The joint loop. With a non-empty `holes` set the segmentation loss is
/// replaced by its holes-augmented form.
#[allow(clippy::too_many_arguments)]
pub fn run_chase(
    tc: &TrainConfig,
    init: &Checkpoint,
    labeled: &[Study],
    unlabeled: &[Study],
    holes: &[HolesRecord],
    epochs: usize,
    counter: &ForwardCounter,
    mut on_step: impl FnMut(&StepLosses),
) -> Result<ChaseOutcome> {
    tc.validate()?;
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::Contract("joint training needs labelled and unlabelled studies".into()));
    }
    let weights = prevalence_weights(labeled.iter().filter_map(|s| s.mask.as_ref()));
    let mut state = ChaseState::new(init, tc)?;
    let by_id: BTreeMap<&str, &Study> = unlabeled.iter().map(|s| (s.id.as_str(), s)).collect();
    let holes = holes
        .iter()
        .filter_map(|r| {
            let zs = r.labelled_slices();
            by_id.get(r.id.as_str()).map(|s| (r, *s, zs))
        })
        .filter(|(_, _, zs)| !zs.is_empty())
        .collect();
    let mut sampler = Sampler {
        tc,
        labeled,
        labeled_slices: all_slices(labeled),
        unlabeled,
        ranges: Vec::new(),
        holes,
        aug: tc.augment_params(),
    };
    let total = epochs * tc.steps_per_epoch;
    let mut losses = Vec::with_capacity(total);
    for epoch in 0..epochs {
        sampler.ranges = liver_slice_ranges(&state.model(), unlabeled)?;
        for k in 0..tc.steps_per_epoch {
            let batch = sampler.batch(state.step)?;
            let l = chase_step(&mut state, tc, weights, &batch, (epoch * tc.steps_per_epoch + k, total), counter)?;
            on_step(&l);
            losses.push(l);
        }
    }
    Ok(ChaseOutcome { state, losses })
}

pub const LOSS_CSV_HEADER: &str = "step,L_seg,L_cons,L_adv,L_d,total";

pub fn loss_csv(losses: &[StepLosses]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for l in losses {
        writeln!(s, "{},{},{},{},{},{}", l.step, l.l_seg, l.l_cons, l.l_adv, l.l_d, l.total).expect("string write");
    }
    s
}

pub fn pretrain_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,val_dsc,lr\n");
    for e in log {
        writeln!(s, "{},{},{},{}", e.epoch, e.loss, e.val_dsc, e.lr).expect("string write");
    }
    s
}

/// A run directory: config snapshot, `checkpoints/`, and loss logs.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, tc: &TrainConfig) -> Result<Self> {
        let ck = root.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        let dir = Self {
            root: root.to_path_buf(),
        };
        dir.write("config.toml", &tc.to_toml())?;
        Ok(dir)
    }

    pub fn checkpoint_path(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.json"))
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.root.join(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let tc = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&tc.to_toml()).unwrap(), tc);
        assert!(TrainConfig::from_toml("lambda_adv = 0.5\nseed = 3").is_ok());
        assert!(TrainConfig::from_toml("no_such_key = 1").is_err());
        assert!(TrainConfig::from_toml("lambda_h = -1.0").is_err());
        assert!(TrainConfig::from_toml("plateau_patience = 0").is_err());
    }

    #[test]
    fn combo_sampling_counts() {
        let mut rng = rng_for(&[1]);
        assert_eq!(sample_combos(&[PhaseId::A, PhaseId::V], 4, &mut rng).unwrap().len(), 3);
        assert_eq!(sample_combos(&PhaseId::ALL, 4, &mut rng).unwrap().len(), 4);
        assert_eq!(sample_combos(&[PhaseId::D], 4, &mut rng).unwrap().len(), 1);
        let mut a = rng_for(&[9]);
        let mut b = rng_for(&[9]);
        assert_eq!(
            sample_combos(&PhaseId::ALL, 4, &mut a).unwrap(),
            sample_combos(&PhaseId::ALL, 4, &mut b).unwrap()
        );
    }
}
