//! On-disk volumes: a little-endian C-order payload (`*.raw`) next to a
//! plain-text header (`*.hdr`), plus a tab-separated dataset manifest.
//!
//! Header layout, one `key value...` pair per line:
//!
//! ```text
//! chase-volume 1
//! kind intensity            # or `labels`
//! dtype f32                 # `u8` for labels
//! shape 16 32 32            # z y x
//! spacing 2.0 1.0 1.0       # z y x, physical units per voxel
//! labels 0=background 1=liver 2=lesion 255=ignore   # labels only
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::synthdata::{Datasets, Domain, LabelMask, PhaseId, Split, Study, Volume};

const MAGIC: &str = "chase-volume 1";
const LABEL_SEMANTICS: &str = "0=background 1=liver 2=lesion 255=ignore";

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    Intensity(Volume),
    Labels(LabelMask),
}

/// Header path for a payload path: `a/b.raw` -> `a/b.hdr`.
pub fn header_path(path: &Path) -> PathBuf {
    path.with_extension("hdr")
}

fn write_header(path: &Path, kind: &str, dtype: &str, shape: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    let mut text = format!(
        "{MAGIC}\nkind {kind}\ndtype {dtype}\nshape {} {} {}\nspacing {:?} {:?} {:?}\n",
        shape[0], shape[1], shape[2], spacing[0], spacing[1], spacing[2]
    );
    if kind == "labels" {
        text.push_str(&format!("labels {LABEL_SEMANTICS}\n"));
    }
    let hdr = header_path(path);
    fs::write(&hdr, text).map_err(|e| Error::io(hdr, e))
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    write_header(path, "intensity", "f32", volume.shape, volume.spacing)?;
    let bytes: Vec<u8> = volume.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, mask: &LabelMask) -> Result<()> {
    write_header(path, "labels", "u8", mask.shape, mask.spacing)?;
    fs::write(path, &mask.labels).map_err(|e| Error::io(path, e))
}

struct Header {
    kind: String,
    dtype: String,
    shape: [usize; 3],
    spacing: [f64; 3],
}

fn parse_header(path: &Path) -> Result<Header> {
    let hdr = header_path(path);
    let text = fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
    let bad = |reason: String| Error::Header {
        path: hdr.clone(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MAGIC) {
        return Err(bad(format!("first line must be `{MAGIC}`")));
    }
    let mut fields = BTreeMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .trim()
            .split_once(' ')
            .ok_or_else(|| bad(format!("line `{line}` has no value")))?;
        fields.insert(key.to_string(), value.trim().to_string());
    }
    let field = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing `{k}`")));
    let triple = |k: &str| -> Result<Vec<String>> {
        let parts: Vec<String> = field(k)?.split_whitespace().map(String::from).collect();
        if parts.len() != 3 {
            return Err(bad(format!("`{k}` needs three values")));
        }
        Ok(parts)
    };
    let mut shape = [0usize; 3];
    for (slot, s) in shape.iter_mut().zip(triple("shape")?) {
        *slot = s.parse().map_err(|_| bad(format!("bad shape value `{s}`")))?;
    }
    let mut spacing = [0f64; 3];
    for (slot, s) in spacing.iter_mut().zip(triple("spacing")?) {
        *slot = s.parse().map_err(|_| bad(format!("bad spacing value `{s}`")))?;
    }
    Ok(Header {
        kind: field("kind")?.clone(),
        dtype: field("dtype")?.clone(),
        shape,
        spacing,
    })
}

pub fn read_volume(path: &Path) -> Result<VolumeFile> {
    let header = parse_header(path)?;
    let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
    let count: usize = header.shape.iter().product();
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "u8" => 1,
        other => {
            return Err(Error::Header {
                path: header_path(path),
                reason: format!("unsupported dtype `{other}`"),
            })
        }
    };
    if payload.len() != count * width {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected: count * width,
            found: payload.len(),
        });
    }
    let malformed = |e: Error| match e {
        Error::Contract(reason) => Error::Header {
            path: header_path(path),
            reason,
        },
        other => other,
    };
    match (header.kind.as_str(), width) {
        ("intensity", 4) => {
            let voxels = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Volume::new(header.shape, header.spacing, voxels)
                .map(VolumeFile::Intensity)
                .map_err(malformed)
        }
        ("labels", 1) => LabelMask::new(header.shape, header.spacing, payload)
            .map(VolumeFile::Labels)
            .map_err(malformed),
        (kind, _) => Err(Error::Header {
            path: header_path(path),
            reason: format!("kind `{kind}` does not match dtype `{}`", header.dtype),
        }),
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub domain: Domain,
    pub split: Split,
    pub phases: Vec<PhaseId>,
    /// `key -> relative path`; keys are phase names, `mask`, `reference`,
    /// or `pseudo`.
    pub files: BTreeMap<String, String>,
    pub cavities: usize,
}

pub const MANIFEST_HEADER: &str = "# id\tdomain\tsplit\tphases\tfiles\tcavities";

impl ManifestRecord {
    pub fn to_line(&self) -> String {
        let phases: Vec<&str> = self.phases.iter().map(|p| p.name()).collect();
        let files: Vec<String> = self.files.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.id,
            self.domain.name(),
            self.split.name(),
            phases.join(","),
            files.join(","),
            self.cavities
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::Config(format!("manifest line needs 6 columns: `{line}`")));
        }
        let phases = if cols[3].is_empty() {
            Vec::new()
        } else {
            cols[3].split(',').map(str::parse).collect::<Result<Vec<_>>>()?
        };
        let mut files = BTreeMap::new();
        for entry in cols[4].split(',').filter(|e| !e.is_empty()) {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad file entry `{entry}`")))?;
            files.insert(k.to_string(), v.to_string());
        }
        Ok(Self {
            id: cols[0].to_string(),
            domain: cols[1].parse()?,
            split: cols[2].parse()?,
            phases,
            files,
            cavities: cols[5]
                .parse()
                .map_err(|_| Error::Config(format!("bad cavity count `{}`", cols[5])))?,
        })
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(ManifestRecord::parse)
        .collect()
}

/// Writes one study under `root/<id>/` and returns its manifest record.
pub fn write_study(root: &Path, study: &Study, split: Split) -> Result<ManifestRecord> {
    let dir = root.join(&study.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = BTreeMap::new();
    for (p, v) in &study.phases {
        let rel = format!("{}/{}.raw", study.id, p.name());
        write_volume(&root.join(&rel), v)?;
        files.insert(p.name().to_string(), rel);
    }
    if let Some(m) = &study.mask {
        let rel = format!("{}/mask.raw", study.id);
        write_labels(&root.join(&rel), m)?;
        files.insert("mask".into(), rel);
    }
    let rel = format!("{}/reference.raw", study.id);
    write_labels(&root.join(&rel), &study.reference)?;
    files.insert("reference".into(), rel);
    Ok(ManifestRecord {
        id: study.id.clone(),
        domain: study.domain,
        split,
        phases: study.available(),
        files,
        cavities: study.cavities,
    })
}

pub fn read_study(root: &Path, record: &ManifestRecord) -> Result<Study> {
    let labels = |key: &str| -> Result<Option<LabelMask>> {
        match record.files.get(key) {
            None => Ok(None),
            Some(rel) => match read_volume(&root.join(rel))? {
                VolumeFile::Labels(m) => Ok(Some(m)),
                VolumeFile::Intensity(_) => Err(Error::Config(format!("{rel} is not a label file"))),
            },
        }
    };
    let mut phases = BTreeMap::new();
    for &p in &record.phases {
        let rel = record
            .files
            .get(p.name())
            .ok_or_else(|| Error::Config(format!("{}: no file for phase {p}", record.id)))?;
        match read_volume(&root.join(rel))? {
            VolumeFile::Intensity(v) => {
                phases.insert(p, v);
            }
            VolumeFile::Labels(_) => {
                return Err(Error::Config(format!("{rel} is not an intensity file")))
            }
        }
    }
    let reference = labels("reference")?
        .ok_or_else(|| Error::Config(format!("{}: missing reference labels", record.id)))?;
    let study = Study {
        id: record.id.clone(),
        domain: record.domain,
        phases,
        mask: labels("mask")?,
        reference,
        cavities: record.cavities,
    };
    study.validate()?;
    Ok(study)
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes every split under `root` with a `manifest.tsv` index.
pub fn write_datasets(root: &Path, data: &Datasets) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let records = data
        .all()
        .map(|(s, split)| write_study(root, s, split))
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&root.join(MANIFEST_NAME), &records)?;
    Ok(records)
}

/// Inverse of [`write_datasets`].
pub fn read_datasets(root: &Path) -> Result<Datasets> {
    let records = read_manifest(&root.join(MANIFEST_NAME))?;
    let mut data = Datasets::default();
    for r in &records {
        let s = read_study(root, r)?;
        let bucket = match (r.domain, r.split) {
            (Domain::Source, Split::Train) => &mut data.labeled,
            (Domain::Source, Split::Val) => &mut data.source_val,
            (Domain::Source, Split::Test) => &mut data.source_test,
            (Domain::Target, Split::Train) => &mut data.unlabeled,
            (Domain::Target, Split::Val) => &mut data.target_val,
            (Domain::Target, Split::Test) => &mut data.target_test,
            (_, Split::Holes) => continue,
        };
        bucket.push(s);
    }
    Ok(data)
}
