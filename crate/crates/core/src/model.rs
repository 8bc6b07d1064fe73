//! Checkpoints and whole-study inference.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ada::{DiscConfig, DISC_PREFIX};
use crate::backbone::{argmax_labels, phnn_forward, BackboneConfig, Binder, SEG_PREFIX};
use crate::error::{Error, Result};
use crate::evaluation::{majority_vote, stack_slices};
use crate::heterofusion::{hetero_forward_batch, HeteroRequest, ViewCombo};
use crate::nn::{Graph, ParamStore, Tensor};
use crate::synthdata::{LabelMask, PhaseId, Study, Volume};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// One network applied to a single phase at a time.
    Single,
    /// Phase-specific stems with feature fusion.
    Hetero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    /// Training stage that produced it: pretrain, chase or finetune.
    pub stage: String,
    pub step: usize,
    pub backbone: BackboneConfig,
    pub disc: Option<DiscConfig>,
    pub params: ParamStore,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.backbone.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn seg_params(&self) -> ParamStore {
        self.params.subset(SEG_PREFIX)
    }

    pub fn disc_params(&self) -> ParamStore {
        self.params.subset(DISC_PREFIX)
    }

    pub fn model(&self) -> Model {
        Model {
            kind: self.kind,
            cfg: self.backbone.clone(),
            params: self.seg_params(),
        }
    }
}

/// A segmentation network ready for inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub cfg: BackboneConfig,
    pub params: ParamStore,
}

/// All axial slices of a volume as a `[D, 1, H, W]` batch.
pub fn volume_batch(vol: &Volume) -> Tensor {
    let [d, h, w] = vol.shape;
    Tensor::from_vec([d, 1, h, w], vol.voxels.iter().map(|&v| v as f64).collect())
}

fn labels_to_mask(probs: &Tensor, spacing: [f64; 3]) -> Result<LabelMask> {
    let [_, _, h, w] = probs.shape();
    let flat = argmax_labels(probs);
    let slices: Vec<Vec<u8>> = flat.chunks(h * w).map(<[u8]>::to_vec).collect();
    stack_slices(&slices, h, w, spacing)
}

impl Model {
    /// Final-stage probabilities of the single-phase network on one volume.
    pub fn single_probs(&self, vol: &Volume) -> Result<Tensor> {
        if self.kind != ModelKind::Single {
            return Err(Error::Contract("single-phase inference needs a single-phase model".into()));
        }
        let mut g = Graph::new();
        let x = g.input(volume_batch(vol));
        let outs = phnn_forward(&mut g, &Binder::frozen(&self.params), &self.cfg, x)?;
        Ok(g.value(outs.final_probs()).clone())
    }

    /// Final-stage probabilities of the hetero network for each combination.
    pub fn hetero_probs(&self, study: &Study, combos: &[ViewCombo]) -> Result<Vec<Tensor>> {
        if self.kind != ModelKind::Hetero {
            return Err(Error::Contract("combination inference needs a hetero model".into()));
        }
        let mut g = Graph::new();
        let needed: Vec<PhaseId> = PhaseId::ALL
            .into_iter()
            .filter(|p| combos.iter().any(|c| c.contains(*p)))
            .collect();
        let mut images = BTreeMap::new();
        for p in needed {
            let vol = study
                .phases
                .get(&p)
                .ok_or_else(|| Error::Contract(format!("study {} has no phase {p}", study.id)))?;
            images.insert(p, g.input(volume_batch(vol)));
        }
        let req = HeteroRequest {
            images,
            combos: combos.to_vec(),
        };
        let outs = hetero_forward_batch(&mut g, &Binder::frozen(&self.params), &self.cfg, &[req])?;
        Ok(outs[0].iter().map(|o| g.value(o.final_probs()).clone()).collect())
    }

    /// Label volume for one combination. Single-phase models predict each
    /// phase separately and combine by majority vote over the liver region.
    pub fn predict_labels(&self, study: &Study, combo: &ViewCombo) -> Result<LabelMask> {
        Ok(self.predict_many(study, std::slice::from_ref(combo))?.remove(0))
    }

    /// Label volumes for several combinations, sharing per-phase work.
    pub fn predict_many(&self, study: &Study, combos: &[ViewCombo]) -> Result<Vec<LabelMask>> {
        let available = study.available();
        if let Some(c) = combos.iter().find(|c| !c.is_subset_of(&available)) {
            return Err(Error::Contract(format!("study {} lacks phases for {c}", study.id)));
        }
        let spacing = study.spacing();
        match self.kind {
            ModelKind::Hetero => self
                .hetero_probs(study, combos)?
                .iter()
                .map(|p| labels_to_mask(p, spacing))
                .collect(),
            ModelKind::Single => {
                let mut per_phase: BTreeMap<PhaseId, LabelMask> = BTreeMap::new();
                for c in combos {
                    for &p in c.phases() {
                        if !per_phase.contains_key(&p) {
                            let probs = self.single_probs(&study.phases[&p])?;
                            per_phase.insert(p, labels_to_mask(&probs, spacing)?);
                        }
                    }
                }
                combos
                    .iter()
                    .map(|c| {
                        if c.len() == 1 {
                            return Ok(per_phase[&c.phases()[0]].clone());
                        }
                        let regions: Vec<Vec<bool>> = c.phases().iter().map(|p| per_phase[p].region()).collect();
                        let refs: Vec<&[bool]> = regions.iter().map(Vec::as_slice).collect();
                        let voted = majority_vote(&refs)?;
                        let first = &per_phase[&c.phases()[0]];
                        let labels = voted.iter().map(|&on| on as u8).collect();
                        LabelMask::new(first.shape, spacing, labels)
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_backbone;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = BackboneConfig::default();
        let mut params = init_backbone(&cfg, 3).unwrap();
        params.insert("seg.extra", Tensor::from_vec([1, 1, 1, 3], vec![0.1, 1e-300, -2.0 / 3.0]));
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: ModelKind::Single,
            stage: "pretrain".into(),
            step: 42,
            backbone: cfg,
            disc: None,
            params,
            meta: BTreeMap::from([("val_dsc".into(), "0.9".into())]),
        };
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params.digest(""), ck.params.digest(""));
        let bad = ck.to_json().replace("\"version\":1", "\"version\":9");
        assert!(matches!(Checkpoint::from_json(&bad), Err(Error::Checkpoint(_))));
    }
}
