//! Hole-based pseudo-labels: enclosed cavities in the predicted liver
//! region are taken as missed lesions, and everything else is ignored.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::backbone::{staged_seg_loss, StageOutputs};
use crate::error::{Error, Result};
use crate::heterofusion::ViewCombo;
use crate::model::Model;
use crate::nn::{Graph, Var};
use crate::synthdata::{Domain, LabelMask, Split, Study, IGNORE, LESION};
use crate::volume_io::{read_manifest, read_volume, write_labels, write_manifest, ManifestRecord, VolumeFile};

pub const MIN_HOLE_VOXELS: usize = 100;

/// 6-connected components of `!region`, each with its voxel list and
/// whether it touches the volume border.
fn complement_components(region: &[bool], shape: [usize; 3]) -> Vec<(Vec<usize>, bool)> {
    let [d, h, w] = shape;
    assert_eq!(region.len(), d * h * w, "region does not match shape");
    let mut seen = region.to_vec();
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..region.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        let mut border = false;
        while let Some(i) = queue.pop_front() {
            voxels.push(i);
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            border |= z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
            let mut visit = |j: usize| {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        comps.push((voxels, border));
    }
    comps
}

/// Enclosed background components larger than `min_size` voxels.
pub fn extract_holes(region: &[bool], shape: [usize; 3], min_size: usize) -> Vec<bool> {
    let mut out = vec![false; region.len()];
    for (voxels, border) in complement_components(region, shape) {
        if !border && voxels.len() > min_size {
            for i in voxels {
                out[i] = true;
            }
        }
    }
    out
}

/// Sizes of the holes [`extract_holes`] would keep, in discovery order.
pub fn hole_sizes(region: &[bool], shape: [usize; 3], min_size: usize) -> Vec<usize> {
    complement_components(region, shape)
        .into_iter()
        .filter(|(v, border)| !border && v.len() > min_size)
        .map(|(v, _)| v.len())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HolesRecord {
    pub id: String,
    /// LESION inside holes, IGNORE everywhere else.
    pub pseudo: LabelMask,
    pub hole_sizes: Vec<usize>,
}

impl HolesRecord {
    pub fn hole_voxels(&self) -> usize {
        self.hole_sizes.iter().sum()
    }

    /// Axial slices that carry at least one pseudo-label.
    pub fn labelled_slices(&self) -> Vec<usize> {
        (0..self.pseudo.shape[0])
            .filter(|&z| self.pseudo.slice(z).iter().any(|&l| l != IGNORE))
            .collect()
    }
}

/// Pseudo-labels from the all-available-phases prediction of every study.
/// Studies without holes are left out.
pub fn build_holes_dataset(model: &Model, unlabeled: &[Study], min_size: usize) -> Result<Vec<HolesRecord>> {
    let found: Vec<Option<HolesRecord>> = unlabeled
        .par_iter()
        .map(|study| -> Result<Option<HolesRecord>> {
            let combo = ViewCombo::new(study.available())?;
            let pred = model.predict_labels(study, &combo)?;
            let region = pred.region();
            let holes = extract_holes(&region, pred.shape, min_size);
            if !holes.iter().any(|&b| b) {
                return Ok(None);
            }
            let labels = holes.iter().map(|&h| if h { LESION } else { IGNORE }).collect();
            Ok(Some(HolesRecord {
                id: study.id.clone(),
                pseudo: LabelMask::new(pred.shape, pred.spacing, labels)?,
                hole_sizes: hole_sizes(&region, pred.shape, min_size),
            }))
        })
        .collect::<Result<_>>()?;
    Ok(found.into_iter().flatten().collect())
}

pub const HOLES_MANIFEST: &str = "holes.tsv";

/// Writes pseudo masks under `root/<id>/pseudo.raw` plus a manifest whose
/// records carry domain=target and split=holes.
pub fn write_holes(root: &Path, records: &[HolesRecord]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = Vec::with_capacity(records.len());
    for r in records {
        let dir = root.join(&r.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rel = format!("{}/pseudo.raw", r.id);
        write_labels(&root.join(&rel), &r.pseudo)?;
        manifest.push(ManifestRecord {
            id: r.id.clone(),
            domain: Domain::Target,
            split: Split::Holes,
            phases: Vec::new(),
            files: BTreeMap::from([("pseudo".to_string(), rel)]),
            cavities: r.hole_sizes.len(),
        });
    }
    write_manifest(&root.join(HOLES_MANIFEST), &manifest)
}

pub fn read_holes(root: &Path) -> Result<Vec<HolesRecord>> {
    read_manifest(&root.join(HOLES_MANIFEST))?
        .into_iter()
        .map(|rec| {
            let rel = rec
                .files
                .get("pseudo")
                .ok_or_else(|| Error::Config(format!("{}: no pseudo mask listed", rec.id)))?;
            let pseudo = match read_volume(&root.join(rel))? {
                VolumeFile::Labels(m) => m,
                VolumeFile::Intensity(_) => return Err(Error::Config(format!("{rel} is not a label file"))),
            };
            let holes: Vec<bool> = pseudo.labels.iter().map(|&l| l == LESION).collect();
            let region: Vec<bool> = holes.iter().map(|&h| !h).collect();
            let sizes = hole_sizes(&region, pseudo.shape, 0);
            Ok(HolesRecord {
                id: rec.id,
                pseudo,
                hole_sizes: sizes,
            })
        })
        .collect()
}

/// One pseudo-labelled slice and the stage outputs of its sampled combos.
pub struct HolesTerm<'a> {
    pub outputs: Vec<StageOutputs>,
    pub labels: &'a [u8],
}

/// `L_seg + lambda_h * mean_items mean_combos staged_loss(f(X), Y_h)`.
/// With no items or `lambda_h == 0` this is `l_seg` itself.
pub fn seg_loss_with_pseudo(
    g: &mut Graph,
    l_seg: Var,
    holes: &[HolesTerm],
    weights: [f64; 3],
    lambda_h: f64,
) -> Result<Var> {
    if holes.is_empty() || lambda_h == 0.0 {
        return Ok(l_seg);
    }
    let mut terms = vec![(l_seg, 1.0)];
    let per_item = lambda_h / holes.len() as f64;
    for item in holes {
        if item.outputs.is_empty() {
            return Err(Error::Contract("holes item without any combination".into()));
        }
        let w = per_item / item.outputs.len() as f64;
        for outs in &item.outputs {
            terms.push((staged_seg_loss(g, outs, item.labels, weights), w));
        }
    }
    Ok(g.lin(&terms))
}
