//! Regression metrics, brain-age-gap cohort labelling, 2×2 association
//! statistics, embedding similarity and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::regressor::Prediction;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either vector is constant.
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
    /// `None` when the targets are constant.
    pub r2: Option<f64>,
    pub n: usize,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation, or `None` if either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn compute_metrics(preds: &[f64], targets: &[f64]) -> Result<MetricsReport> {
    if preds.len() != targets.len() {
        return Err(shape_err(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let n = preds.len();
    if n < 2 {
        return Err(invalid("metrics need at least two predictions"));
    }
    if preds.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(invalid("metrics inputs must be finite"));
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        abs += (p - t).abs();
        sq += (p - t).powi(2);
    }
    let mt = mean(targets);
    let ss_tot: f64 = targets.iter().map(|t| (t - mt).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - sq / ss_tot);
    Ok(MetricsReport {
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        pearson_r: pearson(preds, targets),
        spearman_rho: spearman(preds, targets),
        r2,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extreme {
    Pos,
    Neg,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagRecord {
    pub subject_id: String,
    pub bag: f64,
    pub cohort_label: u8,
    pub extreme: Extreme,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BagCohort {
    pub records: Vec<BagRecord>,
    /// Sample (n−1) standard deviation of the BAGs.
    pub sd: f64,
    pub threshold_sd: f64,
}

/// Labels each subject as an extreme ager when |BAG| exceeds
/// `threshold_sd` sample SDs. Input is `(subject_id, bag, cohort_label)`.
pub fn bag_cohort(items: &[(String, f64, u8)], threshold_sd: f64) -> Result<BagCohort> {
    if items.len() < 2 {
        return Err(invalid("BAG analysis needs at least two predictions"));
    }
    if !(threshold_sd >= 0.0) {
        return Err(invalid("threshold_sd must be non-negative"));
    }
    let bags: Vec<f64> = items.iter().map(|i| i.1).collect();
    let m = mean(&bags);
    let sd = (bags.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (bags.len() - 1) as f64).sqrt();
    let zero_var = sd == 0.0;
    if zero_var {
        log::warn!("all brain-age gaps are equal; no extreme agers");
    }
    let cut = threshold_sd * sd;
    let records = items
        .iter()
        .map(|(id, bag, cohort)| BagRecord {
            subject_id: id.clone(),
            bag: *bag,
            cohort_label: *cohort,
            extreme: if zero_var {
                Extreme::None
            } else if *bag > cut {
                Extreme::Pos
            } else if *bag < -cut {
                Extreme::Neg
            } else {
                Extreme::None
            },
        })
        .collect();
    Ok(BagCohort {
        records,
        sd,
        threshold_sd,
    })
}

/// Counts: exposed-case, exposed-control, unexposed-case, unexposed-control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        ContingencyTable { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn swap_rows(&self) -> Self {
        ContingencyTable::new(self.c, self.d, self.a, self.b)
    }
}

/// Which extreme-ager split defines exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exposure {
    /// Extreme-positive vs everyone else.
    PositiveVsRest,
    /// Extreme-positive vs extreme-negative; non-extremes are dropped.
    PositiveVsNegative,
}

/// Cross-tabulates extreme ageing against case status (`cohort_label == case_label`).
pub fn contingency_table(records: &[BagRecord], case_label: u8, exposure: Exposure) -> ContingencyTable {
    let mut t = ContingencyTable::new(0, 0, 0, 0);
    for r in records {
        let exposed = match (exposure, r.extreme) {
            (_, Extreme::Pos) => true,
            (Exposure::PositiveVsRest, _) | (Exposure::PositiveVsNegative, Extreme::Neg) => false,
            (Exposure::PositiveVsNegative, Extreme::None) => continue,
        };
        let case = r.cohort_label == case_label;
        match (exposed, case) {
            (true, true) => t.a += 1,
            (true, false) => t.b += 1,
            (false, true) => t.c += 1,
            (false, false) => t.d += 1,
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationStats {
    pub table: ContingencyTable,
    pub or: Estimate,
    pub rr: Estimate,
    pub p: f64,
    pub methods: BTreeMap<String, String>,
}

impl AssociationStats {
    pub fn corrected(&self) -> bool {
        self.methods.contains_key("zero_cell_correction")
    }
}

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut t = Vec::with_capacity(n as usize + 1);
    t.push(0.0);
    let mut acc = 0.0;
    for k in 1..=n {
        acc += (k as f64).ln();
        t.push(acc);
    }
    t
}

/// Two-sided Fisher exact p: total probability of tables with the observed
/// margins that are no more likely than the observed one.
pub fn fisher_exact(t: &ContingencyTable) -> f64 {
    let (r1, r2) = (t.a + t.b, t.c + t.d);
    let c1 = t.a + t.c;
    let n = t.total();
    let lf = ln_factorials(n);
    let ln_p = |x: u64| -> f64 {
        let (a, b, c) = (x, r1 - x, c1 - x);
        let d = r2 - c;
        lf[r1 as usize] + lf[r2 as usize] + lf[c1 as usize] + lf[(n - c1) as usize]
            - lf[n as usize]
            - lf[a as usize]
            - lf[b as usize]
            - lf[c as usize]
            - lf[d as usize]
    };
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let observed = ln_p(t.a);
    let tol = 1e-7;
    let mut p = 0.0;
    for x in lo..=hi {
        let lp = ln_p(x);
        if lp <= observed + tol {
            p += lp.exp();
        }
    }
    p.min(1.0)
}

/// Odds ratio (Woolf CI), relative risk (Katz CI) and Fisher exact p.
/// Any zero cell triggers a +0.5 correction for OR and RR, flagged in `methods`.
pub fn association(t: &ContingencyTable) -> Result<AssociationStats> {
    if t.total() == 0 {
        return Err(invalid("contingency table is empty"));
    }
    let mut methods = BTreeMap::new();
    methods.insert("or".to_string(), "woolf log 95% CI".to_string());
    methods.insert("rr".to_string(), "katz log 95% CI".to_string());
    methods.insert("p".to_string(), "fisher exact, two-sided".to_string());
    let zero = t.a == 0 || t.b == 0 || t.c == 0 || t.d == 0;
    let k = if zero {
        methods.insert("zero_cell_correction".to_string(), "haldane-anscombe +0.5".to_string());
        0.5
    } else {
        0.0
    };
    let (a, b, c, d) = (t.a as f64 + k, t.b as f64 + k, t.c as f64 + k, t.d as f64 + k);
    let or = a * d / (b * c);
    let se_or = (1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d).sqrt();
    let rr = (a / (a + b)) / (c / (c + d));
    let se_rr = (1.0 / a - 1.0 / (a + b) + 1.0 / c - 1.0 / (c + d)).sqrt();
    let ci = |point: f64, se: f64| Estimate {
        point,
        lo: (point.ln() - Z_95 * se).exp(),
        hi: (point.ln() + Z_95 * se).exp(),
    };
    Ok(AssociationStats {
        table: *t,
        or: ci(or, se_or),
        rr: ci(rr, se_rr),
        p: fisher_exact(t),
        methods,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub m: Array2<f64>,
    pub subjects: usize,
    /// All-zero embedding rows seen; their similarities are defined as 0.
    pub zero_rows: usize,
}

/// Per-subject slice-by-slice cosine similarity, averaged over subjects.
pub fn cosine_similarity_matrix(maps: &[ArrayView2<f64>]) -> Result<SimilarityMatrix> {
    let first = maps.first().ok_or_else(|| invalid("no feature maps"))?;
    let dim = first.dim();
    let s = dim.0;
    let mut sum = Array2::<f64>::zeros((s, s));
    let mut zero_rows = 0;
    for z in maps {
        if z.dim() != dim {
            return Err(shape_err(format!("feature map {:?} does not match {:?}", z.dim(), dim)));
        }
        let norms: Vec<f64> = z.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
        zero_rows += norms.iter().filter(|&&n| n == 0.0).count();
        for i in 0..s {
            for j in i + 1..s {
                let c = if norms[i] == 0.0 || norms[j] == 0.0 {
                    0.0
                } else {
                    (z.row(i).dot(&z.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                };
                sum[[i, j]] += c;
            }
        }
    }
    if zero_rows > 0 {
        log::warn!("{zero_rows} all-zero embedding rows; their similarities are set to 0");
    }
    let n = maps.len() as f64;
    let mut m = Array2::zeros((s, s));
    for i in 0..s {
        m[[i, i]] = 1.0;
        for j in i + 1..s {
            let v = sum[[i, j]] / n;
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    Ok(SimilarityMatrix {
        m,
        subjects: maps.len(),
        zero_rows,
    })
}

pub fn write_matrix_csv(m: &Array2<f64>, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m.outer_iter() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean of `M[i, S−1−i]` over interior slices, skipping `margin` at each end.
pub fn anti_diagonal_mean(m: &Array2<f64>, margin: usize) -> Option<f64> {
    let s = m.nrows();
    let vals: Vec<f64> = (margin..s.saturating_sub(margin))
        .filter(|&i| i != s - 1 - i)
        .map(|i| m[[i, s - 1 - i]])
        .collect();
    (!vals.is_empty()).then(|| mean(&vals))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn nice_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

/// Predicted vs chronological age, one circle per prediction.
pub fn scatter_svg(preds: &[Prediction]) -> String {
    let (size, margin) = (400.0, 40.0);
    let (lo, hi) = nice_range(preds.iter().flat_map(|p| [p.age, p.predicted_age]));
    let map = |v: f64| margin + (v - lo) / (hi - lo) * (size - 2.0 * margin);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    let (x0, x1) = (map(lo), map(hi));
    let _ = writeln!(
        svg,
        r#"<line x1="{x0:.2}" y1="{:.2}" x2="{x1:.2}" y2="{:.2}" stroke="grey" stroke-dasharray="4"/>"#,
        size - x0,
        size - x1
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">chronological age</text>"#,
        size / 2.0,
        size - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {})">predicted age</text>"#,
        size / 2.0,
        size / 2.0
    );
    for p in preds {
        let colour = if p.sex == 0 { "steelblue" } else { "indianred" };
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{colour}" fill-opacity="0.7"/>"#,
            map(p.age),
            size - map(p.predicted_age)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Histogram of brain-age gaps with dashed lines at ±threshold.
pub fn bag_histogram_svg(bags: &[f64], threshold: Option<f64>) -> String {
    let (w, h, margin) = (400.0, 240.0, 30.0);
    let bins = ((bags.len() as f64).log2().ceil() as usize + 1).clamp(1, 40);
    let (lo, hi) = nice_range(bags.iter().copied());
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &b in bags {
        let k = (((b - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let bar_w = (w - 2.0 * margin) / bins as f64;
    let x_of = |v: f64| margin + (v - lo) / (hi - lo) * (w - 2.0 * margin);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (k, &c) in counts.iter().enumerate() {
        let bh = c as f64 / top * (h - 2.0 * margin);
        let _ = writeln!(
            svg,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="slategray" stroke="white"/>"#,
            margin + k as f64 * bar_w,
            h - margin - bh,
            bar_w
        );
    }
    if let Some(t) = threshold.filter(|t| *t > 0.0) {
        for v in [-t, t] {
            if v > lo && v < hi {
                let x = x_of(v);
                let _ = writeln!(
                    svg,
                    r#"<line x1="{x:.2}" y1="{margin}" x2="{x:.2}" y2="{}" stroke="crimson" stroke-dasharray="4"/>"#,
                    h - margin
                );
            }
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">brain-age gap (years)</text>"#,
        w / 2.0,
        h - 8.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Writes metrics.json, association.json (when given), scatter.svg and
/// bag_hist.svg into `out_dir`.
pub fn write_report(
    metrics: &MetricsReport,
    stats: Option<&AssociationStats>,
    preds: &[Prediction],
    bag_threshold: Option<f64>,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(metrics, &out_dir.join("metrics.json"))?;
    if let Some(s) = stats {
        write_json(s, &out_dir.join("association.json"))?;
    }
    let scatter = out_dir.join("scatter.svg");
    fs::write(&scatter, scatter_svg(preds)).map_err(|e| Error::io(&scatter, e))?;
    let hist = out_dir.join("bag_hist.svg");
    let bags: Vec<f64> = preds.iter().map(|p| p.bag).collect();
    fs::write(&hist, bag_histogram_svg(&bags, bag_threshold)).map_err(|e| Error::io(&hist, e))?;
    Ok(())
}

pub fn write_bag_records(records: &[BagRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject_id", "bag", "cohort_label", "extreme"])?;
    for r in records {
        let e = match r.extreme {
            Extreme::Pos => "pos",
            Extreme::Neg => "neg",
            Extreme::None => "none",
        };
        w.write_record([r.subject_id.clone(), r.bag.to_string(), r.cohort_label.to_string(), e.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_json(value, path)
}
