//! Output-space adversarial adaptation. A small ASPP discriminator looks at
//! liver-region probability maps and learns to tell labelled-domain
//! predictions from unlabelled-domain consensus predictions.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Binder, PROB_EPS};
use crate::error::{Error, Result};
use crate::nn::graph::sigmoid;
use crate::nn::params::{he_normal, scaled_normal};
use crate::nn::{ConvGeom, CustomOp, Graph, ParamStore, Tensor, Var};
use crate::synthdata::{LESION, LIVER};

pub const DISC_PREFIX: &str = "disc.";
pub const DILATIONS: [usize; 4] = [1, 2, 3, 4];
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    pub features: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { features: 16 }
    }
}

pub fn init_discriminator(cfg: &DiscConfig, seed: u64) -> Result<ParamStore> {
    if cfg.features == 0 {
        return Err(Error::Config("discriminator features must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for d in DILATIONS {
        store.insert(format!("{DISC_PREFIX}aspp{d}.w"), he_normal([cfg.features, 1, 3, 3], &mut rng));
        store.insert(format!("{DISC_PREFIX}aspp{d}.b"), Tensor::zeros([cfg.features, 1, 1, 1]));
    }
    store.insert(
        format!("{DISC_PREFIX}out.w"),
        scaled_normal([1, cfg.features, 1, 1], 0.1, &mut rng),
    );
    store.insert(format!("{DISC_PREFIX}out.b"), Tensor::zeros([1, 1, 1, 1]));
    Ok(store)
}

/// Probability of the liver region (liver or lesion) per pixel.
pub fn liver_region_map(pred: &Tensor) -> Tensor {
    let [n, c, h, w] = pred.shape();
    assert_eq!(c, 3, "expected 3-class probabilities");
    let hw = h * w;
    let mut out = Tensor::zeros([n, 1, h, w]);
    for i in 0..n {
        let p = pred.item(i);
        let o = out.item_mut(i);
        for k in 0..hw {
            o[k] = p[LIVER as usize * hw + k] + p[LESION as usize * hw + k];
        }
    }
    out
}

pub fn region(g: &mut Graph, pred: Var) -> Var {
    g.channel_sum(pred, &[LIVER as usize, LESION as usize])
}

/// Which domain a discriminator input comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Counts discriminator evaluations per side.
#[derive(Debug, Default)]
pub struct ForwardCounter {
    source: AtomicUsize,
    target: AtomicUsize,
}

impl ForwardCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, side: Side) {
        match side {
            Side::Source => self.source.fetch_add(1, Ordering::Relaxed),
            Side::Target => self.target.fetch_add(1, Ordering::Relaxed),
        };
    }

    pub fn source(&self) -> usize {
        self.source.load(Ordering::Relaxed)
    }

    pub fn target(&self) -> usize {
        self.target.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.source.store(0, Ordering::Relaxed);
        self.target.store(0, Ordering::Relaxed);
    }
}

/// Discriminator logits for a `[N, 1, H, W]` region map: summed dilated
/// 3x3 branches, leaky ReLU, then a 1x1 conv to one channel.
pub fn disc_logits(g: &mut Graph, p: &Binder, region: Var, side: Side, counter: &ForwardCounter) -> Var {
    counter.record(side);
    let mut branches = Vec::with_capacity(DILATIONS.len());
    for d in DILATIONS {
        let w = p.get(g, &format!("{DISC_PREFIX}aspp{d}.w"));
        let b = p.get(g, &format!("{DISC_PREFIX}aspp{d}.b"));
        branches.push((g.conv2d(region, w, b, ConvGeom { kernel: 3, dilation: d }), 1.0));
    }
    let sum = g.lin(&branches);
    let act = g.leaky_relu(sum, LEAKY_SLOPE);
    let w = p.get(g, &format!("{DISC_PREFIX}out.w"));
    let b = p.get(g, &format!("{DISC_PREFIX}out.b"));
    g.conv2d(act, w, b, ConvGeom { kernel: 1, dilation: 1 })
}

/// Discriminator output in (0, 1).
pub fn discriminate(g: &mut Graph, p: &Binder, region: Var, side: Side, counter: &ForwardCounter) -> Var {
    let z = disc_logits(g, p, region, side, counter);
    g.sigmoid(z)
}

fn clamped(z: f64) -> f64 {
    sigmoid(z).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean binary cross-entropy of `sigmoid(z)` against a constant label,
/// with the probability clamped to `[eps, 1 - eps]`.
pub fn bce_value(logits: &Tensor, label: f64) -> f64 {
    let total: f64 = logits
        .data()
        .iter()
        .map(|&z| {
            let s = clamped(z);
            -(label * s.ln() + (1.0 - label) * (1.0 - s).ln())
        })
        .sum();
    total / logits.len() as f64
}

struct Bce {
    label: f64,
}

impl CustomOp for Bce {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        Tensor::scalar(bce_value(inputs[0], self.label))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let scale = grad.item_scalar() / z.len() as f64;
        let d = z.map(|v| {
            let s = sigmoid(v);
            if (PROB_EPS..=1.0 - PROB_EPS).contains(&s) {
                scale * (s - self.label)
            } else {
                0.0
            }
        });
        vec![Some(d)]
    }
}

pub fn bce(g: &mut Graph, logits: Var, label: f64) -> Var {
    g.custom(Box::new(Bce { label }), &[logits])
}

/// `L_d` from already computed discriminator logits: source labelled 1,
/// target labelled 0.
pub fn discriminator_loss(g: &mut Graph, source_logits: Var, target_logits: Var) -> Var {
    let s = bce(g, source_logits, 1.0);
    let t = bce(g, target_logits, 0.0);
    g.add(s, t)
}

/// `L_adv`: the target side with its label flipped to 1.
pub fn adversarial_loss(g: &mut Graph, target_logits: Var) -> Var {
    bce(g, target_logits, 1.0)
}

/// Value-only `L_d` for probability maps.
pub fn discriminator_loss_value(disc: &ParamStore, source_pred: &Tensor, target_consensus: &Tensor) -> f64 {
    let counter = ForwardCounter::new();
    let mut g = Graph::new();
    let p = Binder::frozen(disc);
    let rs = g.input(liver_region_map(source_pred));
    let rt = g.input(liver_region_map(target_consensus));
    let zs = disc_logits(&mut g, &p, rs, Side::Source, &counter);
    let zt = disc_logits(&mut g, &p, rt, Side::Target, &counter);
    bce_value(g.value(zs), 1.0) + bce_value(g.value(zt), 0.0)
}

/// Value-only `L_adv` for a consensus probability map.
pub fn adversarial_loss_value(disc: &ParamStore, target_consensus: &Tensor) -> f64 {
    let counter = ForwardCounter::new();
    let mut g = Graph::new();
    let rt = g.input(liver_region_map(target_consensus));
    let zt = disc_logits(&mut g, &Binder::frozen(disc), rt, Side::Target, &counter);
    bce_value(g.value(zt), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_examples() {
        let p = Tensor::from_vec([1, 3, 1, 2], vec![0.2, 1.0, 0.5, 0.0, 0.3, 0.0]);
        let r = liver_region_map(&p);
        assert!((r.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(r.data()[1], 0.0);
    }

    fn zero_disc() -> ParamStore {
        let mut d = init_discriminator(&DiscConfig::default(), 1).unwrap();
        d.get_mut("disc.out.w").unwrap().data_mut().fill(0.0);
        d
    }

    #[test]
    fn half_output_closed_forms() {
        let d = zero_disc();
        let p = Tensor::full([2, 3, 4, 4], 1.0 / 3.0);
        assert!((discriminator_loss_value(&d, &p, &p) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((adversarial_loss_value(&d, &p) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_saturates_and_is_symmetric() {
        let big = Tensor::full([1, 1, 2, 2], 40.0);
        assert!(bce_value(&big, 1.0) < 1e-6);
        let z = Tensor::from_vec([1, 1, 1, 3], vec![-1.5, 0.2, 2.0]);
        let neg = z.map(|v| -v);
        assert!((bce_value(&z, 1.0) - bce_value(&neg, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn output_in_open_unit_interval() {
        let d = init_discriminator(&DiscConfig::default(), 3).unwrap();
        let counter = ForwardCounter::new();
        let mut g = Graph::new();
        let r = g.input(Tensor::from_vec([1, 1, 4, 4], (0..16).map(|i| (i as f64 * 0.9).sin().abs()).collect()));
        let out = discriminate(&mut g, &Binder::frozen(&d), r, Side::Target, &counter);
        assert_eq!(g.value(out).shape(), [1, 1, 4, 4]);
        assert!(g.value(out).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!((counter.source(), counter.target()), (0, 1));
    }
}
