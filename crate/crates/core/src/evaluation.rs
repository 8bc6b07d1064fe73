//! Volume metrics, majority voting and metric reports.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::heterofusion::{enumerate_views, ViewCombo};
use crate::model::Model;
use crate::synthdata::{LabelMask, PhaseId, Study};

fn check_same(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("mask sizes differ: {a} vs {b}")));
    }
    Ok(())
}

/// Dice coefficient `2|P & G| / (|P| + |G|)`; two empty masks score 1.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_same(pred.len(), gt.len())?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Foreground voxels with at least one 6-neighbour outside the mask
/// (positions outside the volume count as background).
pub fn surface(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = shape;
    assert_eq!(mask.len(), d * h * w);
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                out[(z * h + y) * w + x] = edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
            }
        }
    }
    out
}

/// Lower envelope of parabolas along one line; `f` holds squared distances
/// (infinite where unknown), `step` the physical sample spacing.
fn dt_line(f: &mut [f64], step: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |i: usize| i as f64 * step;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else { break };
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().expect("boundary per vertex") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        out.push(d * d + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Squared physical distance from every voxel to the nearest `true` voxel.
pub fn squared_edt(features: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut f: Vec<f64> = features.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    // x axis: contiguous rows
    for row in f.chunks_mut(w) {
        dt_line(row, spacing[2], &mut v, &mut z, &mut out);
    }
    for zz in 0..d {
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| f[(zz * h + y) * w + x]));
            dt_line(&mut line, spacing[1], &mut v, &mut z, &mut out);
            for y in 0..h {
                f[(zz * h + y) * w + x] = line[y];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            line.clear();
            line.extend((0..d).map(|zz| f[(zz * h + y) * w + x]));
            dt_line(&mut line, spacing[0], &mut v, &mut z, &mut out);
            for zz in 0..d {
                f[(zz * h + y) * w + x] = line[zz];
            }
        }
    }
    f
}

/// Average symmetric surface distance in physical units, or `None` when
/// either mask is empty.
pub fn assd(pred: &[bool], gt: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Result<Option<f64>> {
    check_same(pred.len(), gt.len())?;
    check_same(pred.len(), shape.iter().product())?;
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Contract("spacing must be positive".into()));
    }
    if !pred.iter().any(|&b| b) || !gt.iter().any(|&b| b) {
        return Ok(None);
    }
    let sp = surface(pred, shape);
    let sg = surface(gt, shape);
    let to_g = squared_edt(&sg, shape, spacing);
    let to_p = squared_edt(&sp, shape, spacing);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if sp[i] {
            total += to_g[i].sqrt();
            count += 1;
        }
        if sg[i] {
            total += to_p[i].sqrt();
            count += 1;
        }
    }
    Ok(Some(total / count as f64))
}

/// Stacks axial label maps into a volume.
pub fn stack_slices(slices: &[Vec<u8>], h: usize, w: usize, spacing: [f64; 3]) -> Result<LabelMask> {
    if slices.is_empty() {
        return Err(Error::Contract("no slices to stack".into()));
    }
    if let Some(bad) = slices.iter().position(|s| s.len() != h * w) {
        return Err(Error::Contract(format!("slice {bad} is not {h}x{w}")));
    }
    LabelMask::new([slices.len(), h, w], spacing, slices.concat())
}

/// Voxel is on when strictly more than half of the masks agree.
pub fn majority_vote(masks: &[&[bool]]) -> Result<Vec<bool>> {
    let Some(first) = masks.first() else {
        return Err(Error::Contract("majority vote of zero masks".into()));
    };
    for m in masks {
        check_same(first.len(), m.len())?;
    }
    let n = masks.len();
    Ok((0..first.len())
        .map(|i| 2 * masks.iter().filter(|m| m[i]).count() > n)
        .collect())
}

/// Liver region (liver or lesion) of a label mask.
pub fn region_of(mask: &LabelMask) -> Vec<bool> {
    mask.region()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub model: String,
    pub combo: String,
    pub study: String,
    pub dsc: f64,
    pub assd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedRow {
    pub model: String,
    pub combo: String,
    pub study: String,
    pub reason: String,
}

/// Five-number summary plus mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            count: s.len(),
            mean,
            std: var.sqrt(),
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
        })
    }
}

/// Every scored or skipped (model, combo, study) triple.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub skipped: Vec<SkippedRow>,
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

impl MetricReport {
    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
        self.skipped.extend(other.skipped);
    }

    /// Rows grouped by (model, combo), in first-appearance order.
    pub fn groups(&self) -> Vec<((String, String), Vec<&MetricRow>)> {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut map: BTreeMap<(String, String), Vec<&MetricRow>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.model.clone(), r.combo.clone());
            if !map.contains_key(&key) {
                order.push(key.clone());
            }
            map.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|k| {
                let v = map.remove(&k).expect("grouped key");
                (k, v)
            })
            .collect()
    }

    pub fn mean_dsc(&self, model: &str, combo: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.model == model && r.combo == combo)
            .map(|r| r.dsc)
            .collect();
        Summary::of(&v).map(|s| s.mean)
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("model,combo,study,dsc,assd\n");
        for r in &self.rows {
            let assd = r.assd.map_or_else(|| "NA".to_string(), num);
            writeln!(s, "{},{},{},{},{}", r.model, r.combo, r.study, num(r.dsc), assd).expect("string write");
        }
        s
    }

    pub fn skipped_csv(&self) -> String {
        let mut s = String::from("model,combo,study,reason\n");
        for r in &self.skipped {
            writeln!(s, "{},{},{},{}", r.model, r.combo, r.study, r.reason).expect("string write");
        }
        s
    }

    /// Parses the output of [`MetricReport::rows_csv`] and, optionally,
    /// [`MetricReport::skipped_csv`].
    pub fn from_csv(rows: &str, skipped: Option<&str>) -> Result<Self> {
        fn body(text: &str, header: &str) -> Result<Vec<Vec<String>>> {
            let mut lines = text.lines();
            if lines.next().map(str::trim) != Some(header) {
                return Err(Error::Config(format!("expected header `{header}`")));
            }
            let want = header.split(',').count();
            lines
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    let f: Vec<String> = l.split(',').map(str::to_string).collect();
                    if f.len() != want {
                        return Err(Error::Config(format!("bad metrics line `{l}`")));
                    }
                    Ok(f)
                })
                .collect()
        }
        let parse = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("bad number `{v}`")))
        };
        let mut report = MetricReport::default();
        for f in body(rows, "model,combo,study,dsc,assd")? {
            report.rows.push(MetricRow {
                model: f[0].clone(),
                combo: f[1].clone(),
                study: f[2].clone(),
                dsc: parse(&f[3])?,
                assd: if f[4] == "NA" { None } else { Some(parse(&f[4])?) },
            });
        }
        if let Some(text) = skipped {
            for f in body(text, "model,combo,study,reason")? {
                report.skipped.push(SkippedRow {
                    model: f[0].clone(),
                    combo: f[1].clone(),
                    study: f[2].clone(),
                    reason: f[3].clone(),
                });
            }
        }
        Ok(report)
    }

    /// Per-group means and spreads.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("model,combo,n,dsc_mean,dsc_std,assd_mean,assd_std,assd_n\n");
        for ((model, combo), rows) in self.groups() {
            let d: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
            let a: Vec<f64> = rows.iter().filter_map(|r| r.assd).collect();
            let ds = Summary::of(&d).expect("non-empty group");
            let (am, asd) = Summary::of(&a).map_or(("NA".into(), "NA".into()), |x| (num(x.mean), num(x.std)));
            writeln!(
                s,
                "{model},{combo},{},{},{},{am},{asd},{}",
                ds.count,
                num(ds.mean),
                num(ds.std),
                a.len()
            )
            .expect("string write");
        }
        s
    }

    /// Box-whisker statistics of DSC and ASSD per group.
    pub fn boxplot_csv(&self) -> String {
        let mut s = String::from("model,combo,metric,min,q1,median,q3,max\n");
        for ((model, combo), rows) in self.groups() {
            let d: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
            let a: Vec<f64> = rows.iter().filter_map(|r| r.assd).collect();
            for (name, vals) in [("dsc", d), ("assd", a)] {
                if let Some(x) = Summary::of(&vals) {
                    writeln!(
                        s,
                        "{model},{combo},{name},{},{},{},{},{}",
                        num(x.min),
                        num(x.q1),
                        num(x.median),
                        num(x.q3),
                        num(x.max)
                    )
                    .expect("string write");
                }
            }
        }
        s
    }

    /// Plain-text table of mean DSC and ASSD per group.
    pub fn text_summary(&self) -> String {
        let mut s = format!("{:<16} {:<10} {:>4} {:>9} {:>9}\n", "model", "combo", "n", "DSC", "ASSD");
        for ((model, combo), rows) in self.groups() {
            let d: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
            let a: Vec<f64> = rows.iter().filter_map(|r| r.assd).collect();
            let dm = Summary::of(&d).expect("non-empty group").mean;
            let am = Summary::of(&a).map_or("NA".to_string(), |x| format!("{:.3}", x.mean));
            writeln!(s, "{model:<16} {combo:<10} {:>4} {:>9.4} {am:>9}", rows.len(), dm).expect("string write");
        }
        if !self.skipped.is_empty() {
            writeln!(s, "skipped: {}", self.skipped.len()).expect("string write");
        }
        s
    }
}

/// Which inputs a model is scored on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// One phase only.
    Single(PhaseId),
    /// Every phase the study has.
    AllAvailable,
    /// Each of the 15 combinations of the four phases.
    AllCombos,
}

impl EvalMode {
    pub fn standard() -> Vec<EvalMode> {
        let mut v: Vec<EvalMode> = PhaseId::ALL.iter().map(|&p| EvalMode::Single(p)).collect();
        v.push(EvalMode::AllAvailable);
        v
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Single(p) => write!(f, "{p}"),
            EvalMode::AllAvailable => f.write_str("all"),
            EvalMode::AllCombos => f.write_str("combos"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(EvalMode::AllAvailable),
            "combos" => Ok(EvalMode::AllCombos),
            other => other
                .to_ascii_uppercase()
                .parse()
                .map(EvalMode::Single)
                .map_err(|_| Error::Config(format!("unknown evaluation mode `{other}` (NC, A, V, D, all, combos)"))),
        }
    }
}

/// Scores `model` on every study for every requested mode. Combinations a
/// study cannot provide are listed as skipped.
pub fn evaluate(model: &Model, name: &str, studies: &[Study], modes: &[EvalMode]) -> Result<MetricReport> {
    let per_study: Vec<MetricReport> = studies
        .par_iter()
        .map(|study| -> Result<MetricReport> {
            let available = study.available();
            let mut wanted: Vec<(String, ViewCombo)> = Vec::new();
            let mut report = MetricReport::default();
            let mut skip = |combo: String, reason: String| {
                report.skipped.push(SkippedRow {
                    model: name.to_string(),
                    combo,
                    study: study.id.clone(),
                    reason,
                })
            };
            for mode in modes {
                match mode {
                    EvalMode::Single(p) => {
                        if available.contains(p) {
                            wanted.push((p.to_string(), ViewCombo::single(*p)));
                        } else {
                            skip(p.to_string(), format!("phase {p} missing"));
                        }
                    }
                    EvalMode::AllAvailable => wanted.push(("all".into(), ViewCombo::new(available.clone())?)),
                    EvalMode::AllCombos => {
                        for c in enumerate_views(&PhaseId::ALL)? {
                            if c.is_subset_of(&available) {
                                wanted.push((c.to_string(), c));
                            } else {
                                skip(c.to_string(), "phases missing".into());
                            }
                        }
                    }
                }
            }
            let gt = study.mask.as_ref().unwrap_or(&study.reference);
            let gt_region = gt.region();
            let combos: Vec<ViewCombo> = wanted.iter().map(|(_, c)| c.clone()).collect();
            let preds = if combos.is_empty() {
                Vec::new()
            } else {
                model.predict_many(study, &combos)?
            };
            for ((label, _), pred) in wanted.into_iter().zip(preds) {
                let region = pred.region();
                report.rows.push(MetricRow {
                    model: name.to_string(),
                    combo: label,
                    study: study.id.clone(),
                    dsc: dsc(&region, &gt_region)?,
                    assd: assd(&region, &gt_region, gt.shape, gt.spacing)?,
                });
            }
            Ok(report)
        })
        .collect::<Result<_>>()?;
    let mut out = MetricReport::default();
    for r in per_study {
        out.extend(r);
    }
    Ok(out)
}

/// Mean DSC of one (model, combo) group restricted to the given studies.
pub fn mean_dsc_over(report: &MetricReport, model: &str, combo: &str, studies: &[&str]) -> Option<f64> {
    let v: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.model == model && r.combo == combo && studies.contains(&r.study.as_str()))
        .map(|r| r.dsc)
        .collect();
    Summary::of(&v).map(|s| s.mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(shape: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Vec<bool> {
        let [d, h, w] = shape;
        let mut m = vec![false; d * h * w];
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    m[(z * h + y) * w + x] = true;
                }
            }
        }
        m
    }

    fn brute_assd(a: &[bool], b: &[bool], shape: [usize; 3], sp: [f64; 3]) -> f64 {
        let pts = |m: &[bool]| -> Vec<[f64; 3]> {
            let s = surface(m, shape);
            let [_, h, w] = shape;
            s.iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| [(i / (h * w)) as f64 * sp[0], ((i / w) % h) as f64 * sp[1], (i % w) as f64 * sp[2]])
                .collect()
        };
        let (pa, pb) = (pts(a), pts(b));
        let near = |p: &[f64; 3], set: &[[f64; 3]]| {
            set.iter()
                .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        let total: f64 = pa.iter().map(|p| near(p, &pb)).sum::<f64>() + pb.iter().map(|p| near(p, &pa)).sum::<f64>();
        total / (pa.len() + pb.len()) as f64
    }

    #[test]
    fn dsc_examples() {
        let a = cube([1, 10, 10], [0, 0, 0], [1, 10, 10]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let none = vec![false; 100];
        assert_eq!(dsc(&none, &none).unwrap(), 1.0);
        assert_eq!(dsc(&a, &none).unwrap(), 0.0);
        let p = cube([1, 10, 10], [0, 0, 0], [1, 10, 10]);
        let mut g = vec![false; 200];
        g[50..150].fill(true);
        let mut p2 = p.clone();
        p2.extend(vec![false; 100]);
        assert_eq!(dsc(&p2, &g).unwrap(), 0.5);
        assert!(dsc(&a, &g).is_err());
    }

    #[test]
    fn assd_examples() {
        let shape = [8, 8, 8];
        let a = cube(shape, [2, 2, 2], [5, 5, 5]);
        assert_eq!(assd(&a, &a, shape, [2.0, 1.0, 1.0]).unwrap(), Some(0.0));
        let b = cube(shape, [3, 2, 2], [6, 5, 5]);
        let sp = [2.0, 1.0, 1.0];
        let got = assd(&a, &b, shape, sp).unwrap().unwrap();
        assert!((got - brute_assd(&a, &b, shape, sp)).abs() < 1e-9);
        assert_eq!(assd(&a, &b, shape, sp).unwrap(), assd(&b, &a, shape, sp).unwrap());
        assert_eq!(assd(&a, &vec![false; 512], shape, sp).unwrap(), None);
    }

    #[test]
    fn edt_matches_brute_force() {
        let shape = [5, 6, 7];
        let n = 5 * 6 * 7;
        let f: Vec<bool> = (0..n).map(|i| (i * 7919) % 23 == 0).collect();
        let sp = [2.5, 1.0, 0.7];
        let got = squared_edt(&f, shape, sp);
        for i in 0..n {
            let (z, y, x) = (i / 42, (i / 7) % 6, i % 7);
            let mut best = f64::INFINITY;
            for j in 0..n {
                if f[j] {
                    let (zz, yy, xx) = (j / 42, (j / 7) % 6, j % 7);
                    let d = ((z as f64 - zz as f64) * sp[0]).powi(2)
                        + ((y as f64 - yy as f64) * sp[1]).powi(2)
                        + ((x as f64 - xx as f64) * sp[2]).powi(2);
                    best = best.min(d);
                }
            }
            assert!((got[i] - best).abs() < 1e-9, "{i}: {} vs {best}", got[i]);
        }
    }

    #[test]
    fn stacking() {
        let s = vec![vec![0, 1, 2, 1]];
        let m = stack_slices(&s, 2, 2, [1.0; 3]).unwrap();
        assert_eq!(m.shape, [1, 2, 2]);
        let many = vec![vec![0, 1, 2, 1], vec![1, 1, 0, 0], vec![2, 2, 2, 2]];
        let m = stack_slices(&many, 2, 2, [1.0; 3]).unwrap();
        assert_eq!(m.shape[0], 3);
        for (z, s) in many.iter().enumerate() {
            assert_eq!(m.slice(z), s.as_slice());
        }
        assert!(stack_slices(&[vec![0; 4], vec![0; 3]], 2, 2, [1.0; 3]).is_err());
    }

    #[test]
    fn voting() {
        let a = [true, false, true, true];
        let b = [true, true, false, false];
        let c = [false, true, true, false];
        assert_eq!(majority_vote(&[&a]).unwrap(), a);
        assert_eq!(majority_vote(&[&a, &b, &c]).unwrap(), [true, true, true, false]);
        let d = [false, false, false, true];
        assert_eq!(majority_vote(&[&a, &b, &c, &d]).unwrap(), [false, false, false, false]);
        assert_eq!(majority_vote(&[&a, &a, &a]).unwrap(), a);
    }

    #[test]
    fn summary_quartiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
    }
}
