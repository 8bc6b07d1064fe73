//! Hetero-phase network: one stem per contrast phase, a shared trunk, and
//! mean/variance feature fusion so any non-empty subset of phases can be
//! segmented.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    conv_name, stem_forward, trunk_forward, BackboneConfig, Binder, StageOutputs, StemOutput, NUM_STAGES,
    STEM_PREFIX, STEM_STAGES, TRUNK_PREFIX,
};
use crate::error::{Error, Result};
use crate::nn::graph::fuse_stats_forward;
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::synthdata::PhaseId;

/// A non-empty set of phases, kept in canonical NC < A < V < D order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViewCombo(Vec<PhaseId>);

impl ViewCombo {
    pub fn new(phases: impl IntoIterator<Item = PhaseId>) -> Result<Self> {
        let mut v: Vec<PhaseId> = phases.into_iter().collect();
        v.sort();
        v.dedup();
        if v.is_empty() {
            return Err(Error::Contract("a view combination needs at least one phase".into()));
        }
        Ok(Self(v))
    }

    pub fn single(p: PhaseId) -> Self {
        Self(vec![p])
    }

    pub fn phases(&self) -> &[PhaseId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, p: PhaseId) -> bool {
        self.0.contains(&p)
    }

    pub fn is_subset_of(&self, available: &[PhaseId]) -> bool {
        self.0.iter().all(|p| available.contains(p))
    }
}

impl fmt::Display for ViewCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|p| p.name()).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for ViewCombo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let phases = s
            .split('+')
            .map(|p| p.trim().parse::<PhaseId>())
            .collect::<Result<Vec<_>>>()?;
        ViewCombo::new(phases)
    }
}

/// All non-empty subsets of `available`, ordered by size and then
/// lexicographically in canonical phase order.
pub fn enumerate_views(available: &[PhaseId]) -> Result<Vec<ViewCombo>> {
    let mut phases = available.to_vec();
    phases.sort();
    phases.dedup();
    if phases.is_empty() {
        return Err(Error::Contract("no phases available".into()));
    }
    let n = phases.len();
    let mut out: Vec<ViewCombo> = (1u32..(1 << n))
        .map(|mask| ViewCombo((0..n).filter(|i| mask & (1 << i) != 0).map(|i| phases[i]).collect()))
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// `concat(mean, population variance)` across the phase feature maps.
pub fn fuse_features(features: &BTreeMap<PhaseId, Tensor>) -> Result<Tensor> {
    let parts: Vec<&Tensor> = features.values().collect();
    let Some(first) = parts.first() else {
        return Err(Error::Contract("feature fusion needs at least one phase".into()));
    };
    if parts.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::Contract("phase feature maps differ in shape".into()));
    }
    Ok(fuse_stats_forward(&parts))
}

/// Arithmetic mean of probability maps.
pub fn fuse_intermediate_predictions(maps: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = maps.first() else {
        return Err(Error::Contract("no predictions to fuse".into()));
    };
    if maps.iter().any(|m| m.shape() != first.shape()) {
        return Err(Error::Contract("prediction maps differ in shape".into()));
    }
    let mut out = Tensor::zeros(first.shape());
    for m in maps {
        out.add_assign(m);
    }
    let k = maps.len() as f64;
    out.data_mut().iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

pub fn stem_prefix(phase: PhaseId) -> String {
    format!("{STEM_PREFIX}{}.", phase.name())
}

/// Builds hetero-network parameters from single-phase ones: every phase
/// stem is a copy of the single stem, and the first trunk convolution is
/// widened to take `mean || variance` with the variance half zeroed.
pub fn widen_from_single(single: &ParamStore, cfg: &BackboneConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut out = ParamStore::new();
    let mut stem_count = 0;
    for (name, t) in single.iter() {
        if let Some(rest) = name.strip_prefix(STEM_PREFIX) {
            stem_count += 1;
            for p in PhaseId::ALL {
                out.insert(format!("{}{rest}", stem_prefix(p)), t.clone());
            }
        } else if name.starts_with(TRUNK_PREFIX) {
            out.insert(name.clone(), t.clone());
        }
    }
    if stem_count == 0 {
        return Err(Error::Config("single-phase parameters contain no stem".into()));
    }
    let first = conv_name(TRUNK_PREFIX, STEM_STAGES, 0, "w");
    let w = out
        .get(&first)
        .ok_or_else(|| Error::Config(format!("missing parameter `{first}`")))?;
    let [co, ci, kh, kw] = w.shape();
    if ci != cfg.channels[STEM_STAGES - 1] {
        return Err(Error::Config(format!(
            "`{first}` takes {ci} channels; config says {}",
            cfg.channels[STEM_STAGES - 1]
        )));
    }
    let mut wide = Tensor::zeros([co, 2 * ci, kh, kw]);
    let block = ci * kh * kw;
    for o in 0..co {
        let src = &w.item(o)[..block];
        wide.item_mut(o)[..block].copy_from_slice(src);
    }
    out.insert(first, wide);
    Ok(out)
}

/// The rows of the widened first trunk kernel that read variance features.
pub fn variance_half(params: &ParamStore, cfg: &BackboneConfig) -> Vec<f64> {
    let w = params
        .get(&conv_name(TRUNK_PREFIX, STEM_STAGES, 0, "w"))
        .expect("hetero trunk present");
    let [co, ci2, kh, kw] = w.shape();
    let block = (ci2 / 2) * kh * kw;
    debug_assert_eq!(ci2 / 2, cfg.channels[STEM_STAGES - 1]);
    (0..co).flat_map(|o| w.item(o)[block..].to_vec()).collect()
}

/// One study's inputs for a batched hetero forward: a `[n, 1, H, W]` image
/// per available phase and the combinations to predict.
#[derive(Clone, Debug)]
pub struct HeteroRequest {
    pub images: BTreeMap<PhaseId, Var>,
    pub combos: Vec<ViewCombo>,
}

/// Runs each needed stem once per request, fuses per combination, and
/// pushes every fused input through a single batched trunk pass. Returns
/// one [`StageOutputs`] per (request, combo), in order.
pub fn hetero_forward_batch(
    g: &mut Graph,
    p: &Binder,
    cfg: &BackboneConfig,
    requests: &[HeteroRequest],
) -> Result<Vec<Vec<StageOutputs>>> {
    struct Pending {
        len: usize,
        probs12: [Var; STEM_STAGES],
        logits12: [Var; STEM_STAGES],
    }
    let mut fused = Vec::new();
    let mut accs = Vec::new();
    let mut pending: Vec<Vec<Pending>> = Vec::with_capacity(requests.len());
    let mut out_hw = None;

    for req in requests {
        let mut stems: BTreeMap<PhaseId, (StemOutput, [Var; STEM_STAGES])> = BTreeMap::new();
        let mut per_req = Vec::with_capacity(req.combos.len());
        for combo in &req.combos {
            for &ph in combo.phases() {
                if stems.contains_key(&ph) {
                    continue;
                }
                let img = *req.images.get(&ph).ok_or_else(|| {
                    Error::Contract(format!("combination {combo} needs phase {ph}, which is missing"))
                })?;
                let [_, _, h, w] = g.value(img).shape();
                match out_hw {
                    None => out_hw = Some((h, w)),
                    Some(hw) if hw != (h, w) => {
                        return Err(Error::Contract("phase images differ in size".into()));
                    }
                    _ => {}
                }
                let s = stem_forward(g, p, cfg, &stem_prefix(ph), img)?;
                let probs = s.logits.map(|l| g.softmax(l));
                stems.insert(ph, (s, probs));
            }
            let parts: Vec<&(StemOutput, [Var; STEM_STAGES])> =
                combo.phases().iter().map(|ph| &stems[ph]).collect();
            let feats: Vec<Var> = parts.iter().map(|(s, _)| s.features).collect();
            fused.push(g.fuse_stats(&feats));
            let mean = |g: &mut Graph, xs: Vec<Var>| if xs.len() == 1 { xs[0] } else { g.mean_list(&xs) };
            let logits12: [Var; STEM_STAGES] =
                std::array::from_fn(|m| parts.iter().map(|(s, _)| s.logits[m]).collect::<Vec<_>>())
                    .map(|xs| mean(g, xs));
            let probs12: [Var; STEM_STAGES] =
                std::array::from_fn(|m| parts.iter().map(|(_, pr)| pr[m]).collect::<Vec<_>>()).map(|xs| mean(g, xs));
            accs.push(logits12[STEM_STAGES - 1]);
            let len = g.value(feats[0]).n();
            per_req.push(Pending {
                len,
                probs12,
                logits12,
            });
        }
        pending.push(per_req);
    }
    let Some(out_hw) = out_hw else {
        return Ok(pending.iter().map(|_| Vec::new()).collect());
    };

    let (x, acc) = if fused.len() == 1 {
        (fused[0], accs[0])
    } else {
        (g.stack(&fused), g.stack(&accs))
    };
    let tail = trunk_forward(g, p, cfg, x, acc, out_hw);
    let single = fused.len() == 1;
    let tail_probs = tail.map(|l| g.softmax(l));

    let mut offset = 0;
    let mut out = Vec::with_capacity(pending.len());
    for per_req in pending {
        let mut outs = Vec::with_capacity(per_req.len());
        for pd in per_req {
            let mut cut = |v: Var| if single { v } else { g.narrow(v, offset, pd.len) };
            let tl = tail.map(&mut cut);
            let tp = tail_probs.map(&mut cut);
            let mut logits = [pd.logits12[0]; NUM_STAGES];
            let mut probs = [pd.probs12[0]; NUM_STAGES];
            logits[..STEM_STAGES].copy_from_slice(&pd.logits12);
            probs[..STEM_STAGES].copy_from_slice(&pd.probs12);
            logits[STEM_STAGES..].copy_from_slice(&tl);
            probs[STEM_STAGES..].copy_from_slice(&tp);
            outs.push(StageOutputs { logits, probs });
            offset += pd.len;
        }
        out.push(outs);
    }
    Ok(out)
}

/// Hetero forward for one combination.
pub fn hetero_forward(
    g: &mut Graph,
    p: &Binder,
    cfg: &BackboneConfig,
    images: &BTreeMap<PhaseId, Var>,
    combo: &ViewCombo,
) -> Result<StageOutputs> {
    let req = HeteroRequest {
        images: images.clone(),
        combos: vec![combo.clone()],
    };
    Ok(hetero_forward_batch(g, p, cfg, &[req])?.remove(0).remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, phnn_forward};
    use PhaseId::*;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            channels: [3, 4, 4, 4, 4],
            downsample: [2, 2, 1, 1, 1],
            convs_per_stage: 1,
            ..BackboneConfig::default()
        }
    }

    fn image(seed: f64) -> Tensor {
        Tensor::image(8, 8, (0..64).map(|i| ((i as f64 * 0.37 + seed) * 1.3).sin()).collect())
    }

    #[test]
    fn view_counts() {
        assert_eq!(enumerate_views(&PhaseId::ALL).unwrap().len(), 15);
        assert_eq!(enumerate_views(&[V]).unwrap(), vec![ViewCombo::single(V)]);
        assert_eq!(enumerate_views(&[NC, A, V]).unwrap().len(), 7);
        assert!(enumerate_views(&[]).is_err());
        let v = enumerate_views(&[D, NC]).unwrap();
        let names: Vec<String> = v.iter().map(|c| c.to_string()).collect();
        assert_eq!(names, ["NC", "D", "NC+D"]);
        assert_eq!("V+A".parse::<ViewCombo>().unwrap().to_string(), "A+V");
    }

    #[test]
    fn fusion_examples() {
        let f = Tensor::from_vec([1, 2, 1, 1], vec![1.0, -4.0]);
        let one = fuse_features(&BTreeMap::from([(V, f.clone())])).unwrap();
        assert_eq!(one.data(), &[1.0, -4.0, 0.0, 0.0]);
        let same = fuse_features(&BTreeMap::from([(V, f.clone()), (A, f.clone())])).unwrap();
        assert_eq!(same.data(), &[1.0, -4.0, 0.0, 0.0]);
        let a = Tensor::from_vec([1, 1, 1, 1], vec![1.0]);
        let b = Tensor::from_vec([1, 1, 1, 1], vec![3.0]);
        let mv = fuse_features(&BTreeMap::from([(NC, a), (D, b)])).unwrap();
        assert_eq!(mv.data(), &[2.0, 1.0]);
        let bad = fuse_features(&BTreeMap::from([(NC, f), (D, Tensor::zeros([1, 1, 1, 1]))]));
        assert!(bad.is_err());
    }

    #[test]
    fn intermediate_mean() {
        let p = Tensor::from_vec([1, 3, 1, 1], vec![1.0, 0.0, 0.0]);
        let q = Tensor::from_vec([1, 3, 1, 1], vec![0.0, 1.0, 0.0]);
        assert_eq!(fuse_intermediate_predictions(&[&p]).unwrap(), p);
        assert_eq!(fuse_intermediate_predictions(&[&p, &q]).unwrap().data(), &[0.5, 0.5, 0.0]);
    }

    fn run(params: &ParamStore, images: &BTreeMap<PhaseId, Tensor>, combo: &str) -> Vec<Tensor> {
        let mut g = Graph::new();
        let vars = images.iter().map(|(&p, t)| (p, g.input(t.clone()))).collect();
        let outs = hetero_forward(&mut g, &Binder::frozen(params), &cfg(), &vars, &combo.parse().unwrap()).unwrap();
        outs.probs.iter().map(|&v| g.value(v).clone()).collect()
    }

    #[test]
    fn singleton_matches_single_phase_network() {
        let single = init_backbone(&cfg(), 5).unwrap();
        let hetero = widen_from_single(&single, &cfg()).unwrap();
        assert!(variance_half(&hetero, &cfg()).iter().all(|&v| v == 0.0));
        let img = image(0.2);
        let mut g = Graph::new();
        let x = g.input(img.clone());
        let base = phnn_forward(&mut g, &Binder::frozen(&single), &cfg(), x).unwrap();
        let got = run(&hetero, &BTreeMap::from([(V, img)]), "V");
        for (m, t) in got.iter().enumerate() {
            assert!(t.max_abs_diff(g.value(base.probs[m])) <= 1e-12);
        }
    }

    #[test]
    fn identical_phases_reduce_to_one() {
        let hetero = widen_from_single(&init_backbone(&cfg(), 6).unwrap(), &cfg()).unwrap();
        let img = image(1.0);
        let images: BTreeMap<_, _> = PhaseId::ALL.iter().map(|&p| (p, img.clone())).collect();
        let all = run(&hetero, &images, "NC+A+V+D");
        let nc = run(&hetero, &images, "NC");
        for (a, b) in all.iter().zip(&nc) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn batched_equals_separate_and_is_order_free() {
        let mut hetero = widen_from_single(&init_backbone(&cfg(), 7).unwrap(), &cfg()).unwrap();
        // break stem symmetry and make the variance path live
        for (k, name) in hetero.names().cloned().collect::<Vec<_>>().iter().enumerate() {
            let t = hetero.get_mut(name).unwrap();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.05 * ((i + 13 * k) as f64).sin();
            }
        }
        let images: BTreeMap<_, _> = PhaseId::ALL.iter().map(|&p| (p, image(p.index() as f64))).collect();
        let combos: Vec<ViewCombo> = ["A+V", "NC", "NC+A+D"].iter().map(|s| s.parse().unwrap()).collect();
        let mut g = Graph::new();
        let vars: BTreeMap<_, _> = images.iter().map(|(&p, t)| (p, g.input(t.clone()))).collect();
        let req = HeteroRequest {
            images: vars.clone(),
            combos: combos.clone(),
        };
        let batched = hetero_forward_batch(&mut g, &Binder::frozen(&hetero), &cfg(), &[req.clone(), req]).unwrap();
        for (i, combo) in combos.iter().enumerate() {
            let sep = run(&hetero, &images, &combo.to_string());
            for r in 0..2 {
                for m in 0..NUM_STAGES {
                    assert!(g.value(batched[r][i].probs[m]).max_abs_diff(&sep[m]) < 1e-12);
                }
            }
        }
        let av = run(&hetero, &images, "A+V");
        let va = run(&hetero, &images, "V+A");
        assert_eq!(av, va);
    }

    #[test]
    fn missing_phase_is_rejected() {
        let hetero = widen_from_single(&init_backbone(&cfg(), 8).unwrap(), &cfg()).unwrap();
        let mut g = Graph::new();
        let x = g.input(image(0.0));
        let r = hetero_forward(&mut g, &Binder::frozen(&hetero), &cfg(), &BTreeMap::from([(V, x)]), &"A+V".parse().unwrap());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
