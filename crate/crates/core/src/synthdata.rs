//! Deterministic synthetic multi-phase "CT" studies.
//!
//! Each study is an ellipsoidal liver with spherical lesions inside a
//! textured body ellipse. Phases differ by their contrast curves. The
//! labelled source domain only ever contains the venous phase; the
//! unlabelled target domain carries up to four phases, a global intensity
//! bias, larger organs, and a fraction of necrotic "cavity" lesions that
//! are as dark as air and therefore absent from anything the source domain
//! can teach.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contrast phase of a dynamic CT acquisition. Ordered NC < A < V < D.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PhaseId {
    NC,
    A,
    V,
    D,
}

impl PhaseId {
    pub const ALL: [PhaseId; 4] = [PhaseId::NC, PhaseId::A, PhaseId::V, PhaseId::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PhaseId::NC => "NC",
            PhaseId::A => "A",
            PhaseId::V => "V",
            PhaseId::D => "D",
        }
    }
}

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhaseId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "NC" => Ok(PhaseId::NC),
            "A" => Ok(PhaseId::A),
            "V" => Ok(PhaseId::V),
            "D" => Ok(PhaseId::D),
            other => Err(Error::Config(format!("unknown phase `{other}`"))),
        }
    }
}

pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const LESION: u8 = 2;
/// Pseudo-label value excluded from every loss.
pub const IGNORE: u8 = 255;

/// Scalar intensity volume, `(z, y, x)` in C order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        check_geometry(shape, spacing, voxels.len())?;
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("volume intensities must be finite".into()));
        }
        Ok(Self {
            shape,
            spacing,
            voxels,
        })
    }

    pub fn slice_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    /// Axial slice `z` as `f64` values.
    pub fn slice(&self, z: usize) -> Vec<f64> {
        let len = self.slice_len();
        self.voxels[z * len..(z + 1) * len]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }
}

/// Per-voxel labels over {0, 1, 2, IGNORE}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        check_geometry(shape, spacing, labels.len())?;
        if let Some(bad) = labels
            .iter()
            .find(|&&l| !matches!(l, BACKGROUND | LIVER | LESION | IGNORE))
        {
            return Err(Error::Contract(format!("label value {bad} is not permitted")));
        }
        Ok(Self {
            shape,
            spacing,
            labels,
        })
    }

    pub fn slice_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let len = self.slice_len();
        &self.labels[z * len..(z + 1) * len]
    }

    /// Liver region (liver or lesion) as a binary mask.
    pub fn region(&self) -> Vec<bool> {
        self.labels
            .iter()
            .map(|&l| l == LIVER || l == LESION)
            .collect()
    }

    pub fn has_ignore(&self) -> bool {
        self.labels.contains(&IGNORE)
    }
}

fn check_geometry(shape: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Contract(format!("volume dimensions must be >= 1, got {shape:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Contract(format!("spacing must be positive, got {spacing:?}")));
    }
    if shape.iter().product::<usize>() != len {
        return Err(Error::Contract(format!(
            "shape {shape:?} does not match {len} values"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Domain::Source => 0x5eed_0001,
            Domain::Target => 0x5eed_0002,
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

/// One patient case.
///
/// `mask` is what training may see: always present for source studies,
/// present for labelled target evaluation splits, absent for the unlabelled
/// target pool. `reference` always holds the generator's ground truth and is
/// only read by evaluation code.
#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub id: String,
    pub domain: Domain,
    pub phases: BTreeMap<PhaseId, Volume>,
    pub mask: Option<LabelMask>,
    pub reference: LabelMask,
    /// Number of cavity lesions rendered into this study.
    pub cavities: usize,
}

impl Study {
    pub fn shape(&self) -> [usize; 3] {
        self.reference.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.reference.spacing
    }

    pub fn available(&self) -> Vec<PhaseId> {
        self.phases.keys().copied().collect()
    }

    pub fn depth(&self) -> usize {
        self.shape()[0]
    }

    /// Checks the structural invariants of a study.
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Contract(format!("study {} has no phases", self.id)));
        }
        let shape = self.shape();
        for (p, v) in &self.phases {
            if v.shape != shape || v.spacing != self.spacing() {
                return Err(Error::Contract(format!(
                    "study {}: phase {p} geometry differs",
                    self.id
                )));
            }
        }
        if let Some(m) = &self.mask {
            if m.shape != shape {
                return Err(Error::Contract(format!("study {}: mask shape differs", self.id)));
            }
            if self.domain == Domain::Source && m.has_ignore() {
                return Err(Error::Contract(format!(
                    "study {}: source masks cannot contain IGNORE",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Mean intensities of the three tissue classes in one phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseContrast {
    pub body: f64,
    pub liver: f64,
    pub lesion: f64,
}

impl PhaseContrast {
    const fn new(body: f64, liver: f64, lesion: f64) -> Self {
        Self {
            body,
            liver,
            lesion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub source_train: usize,
    pub source_val: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub target_test: usize,
    /// `(depth, height, width)`; height and width must be multiples of 16.
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub noise_sigma: f64,
    pub texture_amplitude: f64,
    pub air: f64,
    /// Venous contrast of the source domain.
    pub source_venous: PhaseContrast,
    /// Target contrast per phase, in NC, A, V, D order.
    pub target_phases: [PhaseContrast; 4],
    /// Added to every target intensity.
    pub target_bias: f64,
    /// Multiplies target liver radii.
    pub target_organ_scale: f64,
    /// Probability that a target study carries a cavity lesion.
    pub cavity_prob: f64,
    pub cavity_intensity: f64,
    /// Probability that a target study misses at least one phase.
    pub missing_phase_prob: f64,
    pub max_lesions: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            source_train: 60,
            source_val: 10,
            source_test: 10,
            target_train: 120,
            target_val: 10,
            target_test: 30,
            shape: [16, 48, 48],
            spacing: [2.0, 1.0, 1.0],
            noise_sigma: 0.03,
            texture_amplitude: 0.04,
            air: 0.02,
            source_venous: PhaseContrast::new(0.30, 0.62, 0.48),
            target_phases: [
                PhaseContrast::new(0.30, 0.33, 0.30),
                PhaseContrast::new(0.30, 0.50, 0.74),
                PhaseContrast::new(0.30, 0.62, 0.48),
                PhaseContrast::new(0.30, 0.35, 0.30),
            ],
            target_bias: 0.04,
            target_organ_scale: 1.1,
            cavity_prob: 0.3,
            cavity_intensity: 0.05,
            missing_phase_prob: 0.3,
            max_lesions: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.source_train,
            self.source_val,
            self.source_test,
            self.target_train,
            self.target_val,
            self.target_test,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("every split count must be >= 1".into()));
        }
        for (name, p) in [
            ("cavity_prob", self.cavity_prob),
            ("missing_phase_prob", self.missing_phase_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let [d, h, w] = self.shape;
        if d < 8 || h < 16 || w < 16 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "shape {:?} must have depth >= 8 and in-plane sizes that are multiples of 16",
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("spacing must be positive".into()));
        }
        if self.noise_sigma < 0.0 || self.texture_amplitude < 0.0 {
            return Err(Error::Config("noise and texture amplitudes must be >= 0".into()));
        }
        if self.target_organ_scale <= 0.0 || self.target_organ_scale > 1.4 {
            return Err(Error::Config("target_organ_scale must lie in (0, 1.4]".into()));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn count(&self, domain: Domain) -> usize {
        match domain {
            Domain::Source => self.source_train + self.source_val + self.source_test,
            Domain::Target => self.target_train + self.target_val + self.target_test,
        }
    }
}

/// SplitMix64 finaliser; turns structured tags into well-spread seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// In-plane rotation.
    angle: f64,
}

impl Ellipsoid {
    /// Normalised squared distance; <= 1 inside.
    fn level(&self, z: f64, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dz = z - self.center[0];
        let dy = y - self.center[1];
        let dx = x - self.center[2];
        let u = c * dy + s * dx;
        let v = -s * dy + c * dx;
        (dz / self.radii[0]).powi(2) + (u / self.radii[1]).powi(2) + (v / self.radii[2]).powi(2)
    }
}

/// Smooth periodic texture field.
struct Texture {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl Texture {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..4)
            .map(|_| {
                let k = [
                    rng.random_range(0.1..0.5),
                    rng.random_range(0.2..0.9),
                    rng.random_range(0.2..0.9),
                ];
                (k, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, z: f64, y: f64, x: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|(_, _, a)| a).sum();
        self.waves
            .iter()
            .map(|(k, phase, a)| a * (k[0] * z + k[1] * y + k[2] * x + phase).sin())
            .sum::<f64>()
            / total
    }
}

/// Generates study `index` of `domain`. A pure function of
/// `(cfg.seed, domain, index)` and the config's rendering parameters.
pub fn generate_study(cfg: &SynthConfig, domain: Domain, index: usize) -> Result<Study> {
    cfg.validate()?;
    if index >= cfg.count(domain) {
        return Err(Error::Contract(format!(
            "index {index} out of range for {} domain ({} studies)",
            domain.name(),
            cfg.count(domain)
        )));
    }
    let mut rng = rng_for(&[cfg.seed, domain.tag(), index as u64]);
    let [depth, height, width] = cfg.shape;
    let (d, h, w) = (depth as f64, height as f64, width as f64);

    let body = Ellipsoid {
        center: [d / 2.0, h / 2.0 + rng.random_range(-1.0..1.0), w / 2.0 + rng.random_range(-1.0..1.0)],
        radii: [1e9, h * rng.random_range(0.42..0.47), w * rng.random_range(0.44..0.48)],
        angle: 0.0,
    };

    let scale = match domain {
        Domain::Source => 1.0,
        Domain::Target => cfg.target_organ_scale,
    } * rng.random_range(0.92..1.08);
    let liver = Ellipsoid {
        center: [
            (d - 1.0) / 2.0 + rng.random_range(-0.8..0.8),
            h / 2.0 + rng.random_range(-0.06..0.06) * h,
            w / 2.0 + rng.random_range(-0.06..0.06) * w,
        ],
        radii: [
            (d * 0.36 * scale).min(d / 2.0 - 1.0),
            (h * 0.27 * scale).min(h * 0.36),
            (w * 0.32 * scale).min(w * 0.38),
        ],
        angle: rng.random_range(-0.5..0.5),
    };

    let mut lesions = Vec::new();
    let n_lesions = rng.random_range(0..=cfg.max_lesions);
    for _ in 0..n_lesions {
        let r = rng.random_range(2.4..4.0) * h / 32.0;
        lesions.push(place_inside(&liver, [r * 0.7, r, r], 0.55, &mut rng));
    }
    let mut cavities = Vec::new();
    if domain == Domain::Target && rng.random_bool(cfg.cavity_prob) {
        let r = rng.random_range(3.6..4.2);
        cavities.push(place_inside(&liver, [3.2, r, r], 0.25, &mut rng));
    }

    let phases: Vec<PhaseId> = match domain {
        Domain::Source => vec![PhaseId::V],
        Domain::Target => {
            let mut all = PhaseId::ALL.to_vec();
            if rng.random_bool(cfg.missing_phase_prob) {
                let missing = rng.random_range(1..=3);
                all.shuffle(&mut rng);
                all.truncate(4 - missing);
                all.sort();
            }
            all
        }
    };

    let texture = Texture::sample(&mut rng);
    let mut labels = vec![BACKGROUND; depth * height * width];
    let mut inside_body = vec![false; labels.len()];
    let mut tex = vec![0.0; labels.len()];
    for z in 0..depth {
        for y in 0..height {
            for x in 0..width {
                let i = (z * height + y) * width + x;
                let (zf, yf, xf) = (z as f64, y as f64, x as f64);
                inside_body[i] = body.level(zf, yf, xf) <= 1.0;
                tex[i] = texture.at(zf, yf, xf);
                if liver.level(zf, yf, xf) <= 1.0 {
                    labels[i] = LIVER;
                    if lesions.iter().chain(&cavities).any(|l| l.level(zf, yf, xf) <= 1.0) {
                        labels[i] = LESION;
                    }
                }
            }
        }
    }
    let in_cavity: Vec<bool> = if cavities.is_empty() {
        vec![false; labels.len()]
    } else {
        (0..labels.len())
            .map(|i| {
                let z = i / (height * width);
                let y = (i / width) % height;
                let x = i % width;
                cavities
                    .iter()
                    .any(|c| c.level(z as f64, y as f64, x as f64) <= 1.0)
                    && labels[i] == LESION
            })
            .collect()
    };

    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-12)).expect("valid sigma");
    let bias = match domain {
        Domain::Source => 0.0,
        Domain::Target => cfg.target_bias,
    };
    let mut volumes = BTreeMap::new();
    for &p in &phases {
        let contrast = match domain {
            Domain::Source => cfg.source_venous,
            Domain::Target => cfg.target_phases[p.index()],
        };
        let mut phase_rng = rng_for(&[cfg.seed, domain.tag(), index as u64, 0xfa5e + p.index() as u64]);
        let voxels: Vec<f32> = (0..labels.len())
            .map(|i| {
                let base = if in_cavity[i] {
                    cfg.cavity_intensity
                } else {
                    match labels[i] {
                        LIVER => contrast.liver + 0.3 * cfg.texture_amplitude * tex[i],
                        LESION => contrast.lesion,
                        _ if inside_body[i] => contrast.body + cfg.texture_amplitude * tex[i],
                        _ => cfg.air,
                    }
                };
                let n = if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut phase_rng)
                } else {
                    0.0
                };
                (base + bias + n) as f32
            })
            .collect();
        volumes.insert(p, Volume::new(cfg.shape, cfg.spacing, voxels)?);
    }

    let reference = LabelMask::new(cfg.shape, cfg.spacing, labels)?;
    let prefix = match domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    let study = Study {
        id: format!("{prefix}-{index:04}"),
        domain,
        phases: volumes,
        mask: match domain {
            Domain::Source => Some(reference.clone()),
            Domain::Target => None,
        },
        reference,
        cavities: cavities.len(),
    };
    study.validate()?;
    Ok(study)
}

/// Places an ellipsoid with the given radii so its centre lies within the
/// inner `reach` fraction of `outer`.
fn place_inside(outer: &Ellipsoid, radii: [f64; 3], reach: f64, rng: &mut ChaCha8Rng) -> Ellipsoid {
    loop {
        let u = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0f64),
        ];
        if u.iter().map(|v| v * v).sum::<f64>() > 1.0 {
            continue;
        }
        let (s, c) = outer.angle.sin_cos();
        let du = u[1] * outer.radii[1] * reach;
        let dv = u[2] * outer.radii[2] * reach;
        return Ellipsoid {
            center: [
                outer.center[0] + u[0] * outer.radii[0] * reach * 0.5,
                outer.center[1] + c * du - s * dv,
                outer.center[2] + s * du + c * dv,
            ],
            radii,
            angle: 0.0,
        };
    }
}

/// Which part of an experiment a study belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Holes,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Holes => "holes",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "holes" => Ok(Split::Holes),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// All splits of one synthetic experiment.
#[derive(Clone, Debug, Default)]
pub struct Datasets {
    /// Labelled source training studies.
    pub labeled: Vec<Study>,
    pub source_val: Vec<Study>,
    pub source_test: Vec<Study>,
    /// Unlabelled target training studies.
    pub unlabeled: Vec<Study>,
    /// Labelled target validation studies.
    pub target_val: Vec<Study>,
    /// Labelled, held-out target test studies.
    pub target_test: Vec<Study>,
}

impl Datasets {
    pub fn all(&self) -> impl Iterator<Item = (&Study, Split)> {
        self.labeled
            .iter()
            .map(|s| (s, Split::Train))
            .chain(self.source_val.iter().map(|s| (s, Split::Val)))
            .chain(self.source_test.iter().map(|s| (s, Split::Test)))
            .chain(self.unlabeled.iter().map(|s| (s, Split::Train)))
            .chain(self.target_val.iter().map(|s| (s, Split::Val)))
            .chain(self.target_test.iter().map(|s| (s, Split::Test)))
    }
}

/// Builds every split. Studies are generated in parallel; the output is
/// identical to serial generation because each study owns its RNG stream.
pub fn generate_datasets(cfg: &SynthConfig) -> Result<Datasets> {
    cfg.validate()?;
    let build = |domain: Domain, range: std::ops::Range<usize>, labelled: bool| -> Result<Vec<Study>> {
        range
            .into_par_iter()
            .map(|i| {
                let mut s = generate_study(cfg, domain, i)?;
                if labelled && s.mask.is_none() {
                    s.mask = Some(s.reference.clone());
                }
                Ok(s)
            })
            .collect()
    };
    let (a, b) = (cfg.source_train, cfg.source_train + cfg.source_val);
    let c = b + cfg.source_test;
    let (p, q) = (cfg.target_train, cfg.target_train + cfg.target_val);
    let r = q + cfg.target_test;
    Ok(Datasets {
        labeled: build(Domain::Source, 0..a, true)?,
        source_val: build(Domain::Source, a..b, true)?,
        source_test: build(Domain::Source, b..c, true)?,
        unlabeled: build(Domain::Target, 0..p, false)?,
        target_val: build(Domain::Target, p..q, true)?,
        target_test: build(Domain::Target, q..r, true)?,
    })
}
