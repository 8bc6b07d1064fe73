//! Progressive holistically-nested network (PHNN): a five-stage conv stack
//! with a 1x1 score head per stage. Each head's map is upsampled to the
//! input size and added to the running logit accumulator, and every stage's
//! softmax is supervised with a weight that grows with depth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::softmax_channels;
use crate::nn::params::{he_normal, scaled_normal};
use crate::nn::{ConvGeom, CustomOp, Graph, ParamStore, Tensor, Var};
use crate::synthdata::{LabelMask, BACKGROUND, IGNORE, LESION, LIVER};

pub const NUM_CLASSES: usize = 3;
pub const NUM_STAGES: usize = 5;
/// Stages owned by the phase-specific stems; the rest form the shared trunk.
pub const STEM_STAGES: usize = 2;
/// Floor applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

const CONV3: ConvGeom = ConvGeom {
    kernel: 3,
    dilation: 1,
};
const CONV1: ConvGeom = ConvGeom {
    kernel: 1,
    dilation: 1,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub channels: [usize; NUM_STAGES],
    /// Pooling factor applied after each stage (1 or 2).
    pub downsample: [usize; NUM_STAGES],
    pub convs_per_stage: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 64, 64],
            downsample: [2, 2, 2, 2, 1],
            convs_per_stage: 2,
            in_channels: 1,
            num_classes: NUM_CLASSES,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("stage channels must be > 0".into()));
        }
        if self.downsample.iter().any(|&d| d != 1 && d != 2) {
            return Err(Error::Config("downsampling factors must be 1 or 2".into()));
        }
        if self.convs_per_stage == 0 {
            return Err(Error::Config("convs_per_stage must be >= 1".into()));
        }
        if self.in_channels != 1 || self.num_classes != NUM_CLASSES {
            return Err(Error::Config("backbone expects 1 input channel and 3 classes".into()));
        }
        Ok(())
    }

    /// Product of all pooling factors; input sides must be multiples of it.
    pub fn total_stride(&self) -> usize {
        self.downsample.iter().product()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.total_stride();
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::Contract(format!(
                "input {h}x{w} is not divisible by the network stride {s}"
            )));
        }
        Ok(())
    }

    fn stage_in(&self, stage: usize) -> usize {
        if stage == 0 {
            self.in_channels
        } else {
            self.channels[stage - 1]
        }
    }
}

/// Parameter name for stage `stage` (0-based) under `prefix`.
pub fn conv_name(prefix: &str, stage: usize, conv: usize, part: &str) -> String {
    format!("{prefix}s{}.c{conv}.{part}", stage + 1)
}

pub fn head_name(prefix: &str, stage: usize, part: &str) -> String {
    format!("{prefix}s{}.head.{part}", stage + 1)
}

/// Initialises the parameters of stages `range` under `prefix`.
pub fn init_stages(
    cfg: &BackboneConfig,
    prefix: &str,
    range: std::ops::Range<usize>,
    rng: &mut ChaCha8Rng,
) -> ParamStore {
    let mut store = ParamStore::new();
    for s in range {
        let out = cfg.channels[s];
        for c in 0..cfg.convs_per_stage {
            let cin = if c == 0 { cfg.stage_in(s) } else { out };
            store.insert(conv_name(prefix, s, c, "w"), he_normal([out, cin, 3, 3], rng));
            store.insert(conv_name(prefix, s, c, "b"), Tensor::zeros([out, 1, 1, 1]));
        }
        store.insert(
            head_name(prefix, s, "w"),
            scaled_normal([cfg.num_classes, out, 1, 1], 0.05, rng),
        );
        store.insert(head_name(prefix, s, "b"), Tensor::zeros([cfg.num_classes, 1, 1, 1]));
    }
    store
}

pub const SEG_PREFIX: &str = "seg.";
pub const STEM_PREFIX: &str = "seg.stem.";
pub const TRUNK_PREFIX: &str = "seg.trunk.";

/// Single-phase PHNN parameters: `seg.stem.*` for stages 1-2 and
/// `seg.trunk.*` for stages 3-5.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = init_stages(cfg, STEM_PREFIX, 0..STEM_STAGES, &mut rng);
    store.extend(init_stages(cfg, TRUNK_PREFIX, STEM_STAGES..NUM_STAGES, &mut rng));
    Ok(store)
}

/// Sets every score-head weight and bias to zero.
pub fn zero_heads(store: &mut ParamStore) {
    let names: Vec<String> = store.names().filter(|n| n.contains(".head.")).cloned().collect();
    for n in names {
        let t = store.get_mut(&n).expect("listed name");
        t.data_mut().fill(0.0);
    }
}

/// Read access to parameters while building a graph.
#[derive(Clone, Copy, Debug)]
pub struct Binder<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
        }
    }

    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: true,
        }
    }

    pub fn get(&self, g: &mut Graph, name: &str) -> Var {
        g.param(self.store, name, self.trainable)
    }
}

/// One stage: its conv block, its upsampled score map, and the (possibly
/// pooled) activation handed to the next stage.
pub struct StageStep {
    pub score: Var,
    pub next: Var,
}

pub fn stage_forward(
    g: &mut Graph,
    p: &Binder,
    cfg: &BackboneConfig,
    prefix: &str,
    stage: usize,
    x: Var,
    out_hw: (usize, usize),
) -> StageStep {
    let mut h = x;
    for c in 0..cfg.convs_per_stage {
        let w = p.get(g, &conv_name(prefix, stage, c, "w"));
        let b = p.get(g, &conv_name(prefix, stage, c, "b"));
        let conv = g.conv2d(h, w, b, CONV3);
        h = g.relu(conv);
    }
    let hw = p.get(g, &head_name(prefix, stage, "w"));
    let hb = p.get(g, &head_name(prefix, stage, "b"));
    let raw = g.conv2d(h, hw, hb, CONV1);
    let score = g.resize(raw, out_hw.0, out_hw.1);
    let next = if cfg.downsample[stage] == 2 {
        g.maxpool2(h)
    } else {
        h
    };
    StageStep { score, next }
}

/// Per-stage accumulated logits and their softmax, all at input resolution.
/// `probs[4]` is the network's prediction.
#[derive(Clone, Copy, Debug)]
pub struct StageOutputs {
    pub logits: [Var; NUM_STAGES],
    pub probs: [Var; NUM_STAGES],
}

impl StageOutputs {
    pub fn final_probs(&self) -> Var {
        self.probs[NUM_STAGES - 1]
    }
}

/// Output of the stem stages for one input.
#[derive(Clone, Copy, Debug)]
pub struct StemOutput {
    /// Activation entering stage 3.
    pub features: Var,
    /// Accumulated logits after stages 1 and 2.
    pub logits: [Var; STEM_STAGES],
}

pub fn stem_forward(
    g: &mut Graph,
    p: &Binder,
    cfg: &BackboneConfig,
    prefix: &str,
    image: Var,
) -> Result<StemOutput> {
    let [_, c, h, w] = g.value(image).shape();
    if c != cfg.in_channels {
        return Err(Error::Contract(format!("expected {} input channel(s), got {c}", cfg.in_channels)));
    }
    cfg.check_input(h, w)?;
    let s1 = stage_forward(g, p, cfg, prefix, 0, image, (h, w));
    let s2 = stage_forward(g, p, cfg, prefix, 1, s1.next, (h, w));
    let acc2 = g.add(s2.score, s1.score);
    Ok(StemOutput {
        features: s2.next,
        logits: [s1.score, acc2],
    })
}

/// Trunk stages 3-5. `acc` is the logit accumulator after stage 2.
pub fn trunk_forward(
    g: &mut Graph,
    p: &Binder,
    cfg: &BackboneConfig,
    features: Var,
    acc: Var,
    out_hw: (usize, usize),
) -> [Var; NUM_STAGES - STEM_STAGES] {
    let mut x = features;
    let mut acc = acc;
    let mut out = [acc; NUM_STAGES - STEM_STAGES];
    for (slot, stage) in out.iter_mut().zip(STEM_STAGES..NUM_STAGES) {
        let step = stage_forward(g, p, cfg, TRUNK_PREFIX, stage, x, out_hw);
        acc = g.add(step.score, acc);
        *slot = acc;
        x = step.next;
    }
    out
}

/// Single-phase PHNN forward pass over a `[N, 1, H, W]` batch.
pub fn phnn_forward(g: &mut Graph, p: &Binder, cfg: &BackboneConfig, image: Var) -> Result<StageOutputs> {
    let [_, _, h, w] = g.value(image).shape();
    let stem = stem_forward(g, p, cfg, STEM_PREFIX, image)?;
    let tail = trunk_forward(g, p, cfg, stem.features, stem.logits[1], (h, w));
    let logits = [stem.logits[0], stem.logits[1], tail[0], tail[1], tail[2]];
    let probs = logits.map(|l| g.softmax(l));
    Ok(StageOutputs { logits, probs })
}

/// Stage weights `m / 5` for m = 1..5.
pub fn stage_weights() -> [f64; NUM_STAGES] {
    std::array::from_fn(|m| (m + 1) as f64 / NUM_STAGES as f64)
}

/// Weighted pixel-wise cross-entropy on probabilities. Each batch item is
/// averaged over its non-IGNORE pixels, then items are averaged. Items with
/// no valid pixel contribute zero.
pub fn cross_entropy_value(probs: &Tensor, labels: &[u8], weights: [f64; 3]) -> f64 {
    let [n, c, h, w] = probs.shape();
    assert_eq!(c, NUM_CLASSES);
    let hw = h * w;
    assert_eq!(labels.len(), n * hw, "label count does not match predictions");
    let mut total = 0.0;
    for i in 0..n {
        let p = probs.item(i);
        let lab = &labels[i * hw..(i + 1) * hw];
        let mut sum = 0.0;
        let mut count = 0usize;
        for (k, &l) in lab.iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let y = l as usize;
            sum += -weights[y] * p[y * hw + k].max(PROB_EPS).ln();
            count += 1;
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    total / n as f64
}

struct WeightedCrossEntropy {
    labels: Vec<u8>,
    weights: [f64; 3],
}

impl CustomOp for WeightedCrossEntropy {
    fn name(&self) -> &'static str {
        "weighted_cross_entropy"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        Tensor::scalar(cross_entropy_value(inputs[0], &self.labels, self.weights))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let probs = inputs[0];
        let [n, _, h, w] = probs.shape();
        let hw = h * w;
        let scale = grad.item_scalar() / n as f64;
        let mut d = Tensor::zeros(probs.shape());
        for i in 0..n {
            let lab = &self.labels[i * hw..(i + 1) * hw];
            let count = lab.iter().filter(|&&l| l != IGNORE).count();
            if count == 0 {
                continue;
            }
            let p = probs.item(i).to_vec();
            let di = d.item_mut(i);
            for (k, &l) in lab.iter().enumerate() {
                if l == IGNORE {
                    continue;
                }
                let y = l as usize;
                let pv = p[y * hw + k];
                if pv > PROB_EPS {
                    di[y * hw + k] = -scale * self.weights[y] / (count as f64 * pv);
                }
            }
        }
        vec![Some(d)]
    }
}

/// Weighted cross-entropy as a graph op.
pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &[u8], weights: [f64; 3]) -> Var {
    g.custom(
        Box::new(WeightedCrossEntropy {
            labels: labels.to_vec(),
            weights,
        }),
        &[probs],
    )
}

/// `sum_m (m/5) * CE(Y^(m), y)` as a graph op.
pub fn staged_seg_loss(g: &mut Graph, outs: &StageOutputs, labels: &[u8], weights: [f64; 3]) -> Var {
    let terms: Vec<(Var, f64)> = outs
        .probs
        .iter()
        .zip(stage_weights())
        .map(|(&p, sw)| (cross_entropy(g, p, labels, weights), sw))
        .collect();
    g.lin(&terms)
}

/// Value-only form of [`staged_seg_loss`] for already computed stage
/// probabilities.
pub fn staged_seg_loss_value(probs: &[Tensor; NUM_STAGES], labels: &[u8], weights: [f64; 3]) -> f64 {
    probs
        .iter()
        .zip(stage_weights())
        .map(|(p, sw)| sw * cross_entropy_value(p, labels, weights))
        .sum()
}

/// Softmax of accumulated logits; exposed for tests and tools that build
/// stage outputs by hand.
pub fn probs_from_logits(logits: &Tensor) -> Tensor {
    softmax_channels(logits)
}

/// A labelled 2-D training example.
#[derive(Clone, Debug)]
pub struct LabeledSlice {
    /// `[1, 1, H, W]`
    pub image: Tensor,
    pub labels: Vec<u8>,
}

/// Supervised loss over a batch: the mean of the staged loss of every
/// item, computed as one batched forward pass.
pub fn supervised_loss(
    g: &mut Graph,
    p: &Binder,
    cfg: &BackboneConfig,
    batch: &[LabeledSlice],
    weights: [f64; 3],
) -> Result<(Var, StageOutputs)> {
    if batch.is_empty() {
        return Err(Error::Contract("supervised loss needs a non-empty batch".into()));
    }
    let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
    let x = g.input(Tensor::stack(&images));
    let labels: Vec<u8> = batch.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let outs = phnn_forward(g, p, cfg, x)?;
    Ok((staged_seg_loss(g, &outs, &labels, weights), outs))
}

/// Inverse class frequency over the given masks, normalised to mean 1.
/// IGNORE voxels are skipped; absent classes count as one voxel.
pub fn prevalence_weights<'a>(masks: impl IntoIterator<Item = &'a LabelMask>) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for m in masks {
        for &l in &m.labels {
            match l {
                BACKGROUND | LIVER | LESION => counts[l as usize] += 1,
                _ => {}
            }
        }
    }
    let inv = counts.map(|c| 1.0 / c.max(1) as f64);
    let mean = inv.iter().sum::<f64>() / 3.0;
    inv.map(|v| v / mean)
}

/// Per-pixel argmax over classes of a `[N, 3, H, W]` tensor.
pub fn argmax_labels(probs: &Tensor) -> Vec<u8> {
    let [n, c, h, w] = probs.shape();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        let p = probs.item(i);
        for k in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if p[ch * hw + k] > p[best * hw + k] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            channels: [2, 2, 2, 2, 2],
            downsample: [2, 2, 1, 1, 1],
            convs_per_stage: 1,
            ..BackboneConfig::default()
        }
    }

    fn image(h: usize, w: usize, seed: f64) -> Tensor {
        Tensor::image(h, w, (0..h * w).map(|i| ((i as f64 + seed) * 0.31).sin()).collect())
    }

    #[test]
    fn zero_heads_give_uniform_predictions() {
        let cfg = BackboneConfig::default();
        let mut store = init_backbone(&cfg, 1).unwrap();
        zero_heads(&mut store);
        let mut g = Graph::new();
        let x = g.input(image(32, 32, 0.0));
        let outs = phnn_forward(&mut g, &Binder::frozen(&store), &cfg, x).unwrap();
        for p in outs.probs {
            assert!(g.value(p).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn stage_probabilities_are_normalised() {
        let cfg = BackboneConfig::default();
        let store = init_backbone(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::stack(&[&image(32, 32, 0.0), &image(32, 32, 5.0)]));
        let outs = phnn_forward(&mut g, &Binder::frozen(&store), &cfg, x).unwrap();
        for p in outs.probs {
            let t = g.value(p);
            assert_eq!(t.shape(), [2, 3, 32, 32]);
            for i in 0..2 {
                let item = t.item(i);
                for k in 0..1024 {
                    let s = item[k] + item[1024 + k] + item[2048 + k];
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn accumulator_carries_earlier_logits() {
        // a1 has +10 on class 1 at one pixel and a2 = 0 there: Y2 == Y1.
        let mut a1 = Tensor::zeros([1, 3, 2, 2]);
        a1.set(0, 1, 0, 0, 10.0);
        let a2 = Tensor::zeros([1, 3, 2, 2]);
        let mut acc2 = a1.clone();
        acc2.add_assign(&a2);
        let (p1, p2) = (probs_from_logits(&a1), probs_from_logits(&acc2));
        for c in 0..3 {
            assert!((p1.at(0, c, 0, 0) - p2.at(0, c, 0, 0)).abs() < 1e-15);
        }
        assert!(p2.at(0, 1, 0, 0) > 0.9999);
    }

    #[test]
    fn phnn_rejects_bad_shapes() {
        let cfg = BackboneConfig::default();
        let store = init_backbone(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let x = g.input(image(30, 32, 0.0));
        assert!(matches!(
            phnn_forward(&mut g, &Binder::frozen(&store), &cfg, x),
            Err(Error::Contract(_))
        ));
    }

    fn one_hot(labels: &[u8], h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros([1, 3, h, w]);
        for (k, &l) in labels.iter().enumerate() {
            t.set(0, l as usize, k / w, k % w, 1.0);
        }
        t
    }

    #[test]
    fn staged_loss_closed_forms() {
        let labels = vec![0, 1, 2, 1, 0, 0];
        let perfect: [Tensor; 5] = std::array::from_fn(|_| one_hot(&labels, 2, 3));
        assert_eq!(staged_seg_loss_value(&perfect, &labels, [1.0; 3]), 0.0);

        let uniform: [Tensor; 5] = std::array::from_fn(|_| Tensor::full([1, 3, 2, 3], 1.0 / 3.0));
        let v = staged_seg_loss_value(&uniform, &labels, [1.0; 3]);
        assert!((v - 3.0 * 3f64.ln()).abs() < 1e-12, "{v}");
        assert!((v - 3.296).abs() < 1e-3);
    }

    #[test]
    fn class_weight_scales_its_own_pixels() {
        let labels = vec![0, 2, 2, 1];
        let probs = Tensor::from_vec(
            [1, 3, 2, 2],
            vec![0.5, 0.2, 0.1, 0.3, 0.3, 0.3, 0.2, 0.6, 0.2, 0.5, 0.7, 0.1],
        );
        let base = cross_entropy_value(&probs, &labels, [1.0, 1.0, 1.0]);
        let doubled = cross_entropy_value(&probs, &labels, [1.0, 1.0, 2.0]);
        let lesion_part = -(0.5f64.ln() + 0.7f64.ln()) / 4.0;
        assert!((doubled - base - lesion_part).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_equal_plain_cross_entropy_bitwise() {
        let labels = vec![0, 2, 1, 1];
        let probs = Tensor::from_vec(
            [1, 3, 2, 2],
            vec![0.5, 0.2, 0.1, 0.3, 0.3, 0.3, 0.2, 0.6, 0.2, 0.5, 0.7, 0.1],
        );
        let mut plain = 0.0;
        for (k, &l) in labels.iter().enumerate() {
            plain += -probs.data()[l as usize * 4 + k].max(PROB_EPS).ln();
        }
        plain /= 4.0;
        assert_eq!(cross_entropy_value(&probs, &labels, [1.0; 3]).to_bits(), plain.to_bits());
    }

    #[test]
    fn ignore_pixels_are_excluded() {
        let probs = Tensor::full([1, 3, 1, 3], 1.0 / 3.0);
        assert_eq!(cross_entropy_value(&probs, &[IGNORE; 3], [1.0; 3]), 0.0);
        let one = cross_entropy_value(&probs, &[IGNORE, 2, IGNORE], [1.0; 3]);
        assert!((one - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zeroing_last_stage_removes_its_weighted_term() {
        let labels = vec![0, 1, 2, 1];
        let mk = |s: f64| {
            probs_from_logits(&Tensor::from_vec(
                [1, 3, 2, 2],
                (0..12).map(|i| ((i as f64 + s) * 0.9).cos()).collect(),
            ))
        };
        let probs: [Tensor; 5] = std::array::from_fn(|m| mk(m as f64));
        let full = staged_seg_loss_value(&probs, &labels, [1.0; 3]);
        let partial: f64 = (0..4)
            .map(|m| (m + 1) as f64 / 5.0 * cross_entropy_value(&probs[m], &labels, [1.0; 3]))
            .sum();
        let last = cross_entropy_value(&probs[4], &labels, [1.0; 3]);
        assert!((full - partial - last).abs() < 1e-12);
    }

    #[test]
    fn supervised_loss_is_a_batch_mean() {
        let cfg = tiny();
        let store = init_backbone(&cfg, 4).unwrap();
        let p = Binder::frozen(&store);
        let mk = |seed: f64| LabeledSlice {
            image: image(8, 8, seed),
            labels: (0..64).map(|i| ((i as f64 + seed) as usize % 3) as u8).collect(),
        };
        let (a, b) = (mk(0.0), mk(7.0));
        let w = [0.5, 1.0, 1.5];
        let eval = |batch: &[LabeledSlice]| {
            let mut g = Graph::new();
            let (l, _) = supervised_loss(&mut g, &p, &cfg, batch, w).unwrap();
            g.value(l).item_scalar()
        };
        let (la, lb) = (eval(std::slice::from_ref(&a)), eval(std::slice::from_ref(&b)));
        assert!((eval(&[a.clone(), b.clone()]) - (la + lb) / 2.0).abs() < 1e-12);
        assert!((eval(&[a.clone(), a.clone()]) - la).abs() < 1e-12);
        let mut g = Graph::new();
        assert!(supervised_loss(&mut g, &p, &cfg, &[], w).is_err());
    }

    #[test]
    fn prevalence_weights_have_unit_mean() {
        let m = LabelMask::new([1, 1, 8], [1.0; 3], vec![0, 0, 0, 0, 1, 1, 2, 255]).unwrap();
        let w = prevalence_weights([&m]);
        assert!((w.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!((w[1] / w[0] - 2.0).abs() < 1e-12);
        assert!((w[2] / w[0] - 4.0).abs() < 1e-12);
    }
}
