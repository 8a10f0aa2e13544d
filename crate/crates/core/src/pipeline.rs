//! File-based pipeline stages. Every stage reads its inputs from and writes
//! its outputs to the run directory, so running stages one at a time gives
//! the same artifacts as `pipeline`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::config::{RunConfig, SplitSel};
use crate::error::{Error, Result};
use crate::eval::{
    association, bag_cohort, compute_metrics, contingency_table, cosine_similarity_matrix, anti_diagonal_mean,
    save_json, write_bag_records, write_matrix_csv, write_report, Exposure,
};
use crate::interpret::{aggregate_by_band, montage_svg, roi_scores, subject_heatmaps, synthetic_atlas, write_roi_csv, AtlasVolume};
use crate::params::file_checksum;
use crate::regressor::{predict_features, read_predictions, train_regressor, write_predictions, RegressorParams};
use crate::volume::{generate_synthetic_cohort, save_volume, CohortManifest, ManifestRow, Split};
use crate::vit::{build_feature_map, train_vit, write_log, EmbeddingMatrix, ViTParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Pretrain,
    Extract,
    Train,
    Predict,
    Interpret,
    Evaluate,
    BagAnalyze,
    Simcheck,
    Pipeline,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Pretrain,
        Stage::Extract,
        Stage::Train,
        Stage::Predict,
        Stage::Interpret,
        Stage::Evaluate,
        Stage::BagAnalyze,
        Stage::Simcheck,
        Stage::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Pretrain => "pretrain",
            Stage::Extract => "extract",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Interpret => "interpret",
            Stage::Evaluate => "evaluate",
            Stage::BagAnalyze => "bag-analyze",
            Stage::Simcheck => "simcheck",
            Stage::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subcommand `{s}`")))
    }
}

/// Artifact locations inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Layout { out: out.into() }
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.out.join("cohort")
    }
    pub fn synthetic_manifest(&self) -> PathBuf {
        self.cohort_dir().join("manifest.csv")
    }
    pub fn vit(&self) -> PathBuf {
        self.out.join("vit.brvt")
    }
    pub fn vit_log(&self) -> PathBuf {
        self.out.join("vit_log.jsonl")
    }
    pub fn vit_classes(&self) -> PathBuf {
        self.out.join("vit_classes.json")
    }
    pub fn features_dir(&self) -> PathBuf {
        self.out.join("features")
    }
    pub fn features_manifest(&self) -> PathBuf {
        self.features_dir().join("manifest.csv")
    }
    pub fn regressor(&self) -> PathBuf {
        self.out.join("regressor.brvt")
    }
    pub fn train_report(&self) -> PathBuf {
        self.out.join("train_report.json")
    }
    pub fn predictions(&self) -> PathBuf {
        self.out.join("predictions.csv")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }
    pub fn interpret_dir(&self) -> PathBuf {
        self.out.join("interpret")
    }
    pub fn provenance(&self, stage: Stage) -> PathBuf {
        self.out.join("provenance").join(format!("{}.json", stage.name()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Artifact path (relative to the run directory) → SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn cohort_manifest_path(cfg: &RunConfig, layout: &Layout) -> PathBuf {
    cfg.cohort.clone().unwrap_or_else(|| layout.synthetic_manifest())
}

fn select<'a>(m: &'a CohortManifest, sel: SplitSel) -> Vec<&'a ManifestRow> {
    m.rows.iter().filter(|r| sel.contains(r.split)).collect()
}

fn load_features(m: &CohortManifest, rows: &[&ManifestRow]) -> Result<Vec<EmbeddingMatrix>> {
    rows.iter()
        .map(|r| EmbeddingMatrix::from_volume(&m.load_volume(r)?))
        .collect()
}

fn stage_synth(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let dir = layout.cohort_dir();
    let m = generate_synthetic_cohort(&cfg.synth, &dir)?;
    let mut out = vec![layout.synthetic_manifest()];
    out.extend(m.rows.iter().map(|r| m.resolve(r)));
    Ok(out)
}

fn stage_pretrain(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let m = CohortManifest::load(&cohort_manifest_path(cfg, layout))?;
    let outcome = train_vit(&m, &cfg.vit)?;
    mkdir(&layout.out)?;
    outcome.params.save(&layout.vit())?;
    write_log(&outcome.log, &layout.vit_log())?;
    let labels: Vec<String> = outcome.classes.classes.iter().map(|c| c.label()).collect();
    save_json(&labels, &layout.vit_classes())?;
    Ok(vec![layout.vit(), layout.vit_log(), layout.vit_classes()])
}

fn stage_extract(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let vit = ViTParams::load(&layout.vit())?;
    let m = CohortManifest::load(&cohort_manifest_path(cfg, layout))?;
    let dir = layout.features_dir();
    mkdir(&dir)?;
    let mut rows = Vec::with_capacity(m.rows.len());
    let mut out = vec![layout.features_manifest()];
    for r in &m.rows {
        let v = m.load_volume(r)?;
        let f = build_feature_map(&v, &vit)?;
        let file = format!("{}.brv", r.subject_id);
        save_volume(&f.to_volume(r.cohort)?, &dir.join(&file))?;
        out.push(dir.join(&file));
        rows.push(ManifestRow {
            path: PathBuf::from(file),
            ..r.clone()
        });
    }
    let fm = CohortManifest { rows, base_dir: dir };
    fm.save(&layout.features_manifest())?;
    Ok(out)
}

fn stage_train(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let fm = CohortManifest::load(&layout.features_manifest())?;
    let train = load_features(&fm, &select(&fm, SplitSel::One(Split::Train)))?;
    let val = load_features(&fm, &select(&fm, SplitSel::One(Split::Val)))?;
    let (params, report) = train_regressor(&train, &val, &cfg.regressor)?;
    params.save(&layout.regressor())?;
    save_json(&report, &layout.train_report())?;
    Ok(vec![layout.regressor(), layout.train_report()])
}

fn stage_predict(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let reg = RegressorParams::load(&layout.regressor())?;
    let fm = CohortManifest::load(&layout.features_manifest())?;
    let rows = select(&fm, cfg.eval.split);
    let preds = rows
        .iter()
        .map(|r| predict_features(&EmbeddingMatrix::from_volume(&fm.load_volume(r)?)?, &reg))
        .collect::<Result<Vec<_>>>()?;
    write_predictions(&preds, &layout.predictions())?;
    Ok(vec![layout.predictions()])
}

#[derive(Serialize)]
struct BandSummary {
    lo: f64,
    hi: f64,
    subjects: usize,
    file: String,
}

#[derive(Serialize)]
struct InterpretSummary {
    subjects: usize,
    atlas: String,
    atlas_resampled: bool,
    bands: Vec<BandSummary>,
}

fn stage_interpret(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let vit = ViTParams::load(&layout.vit())?;
    let reg = RegressorParams::load(&layout.regressor())?;
    let m = CohortManifest::load(&cohort_manifest_path(cfg, layout))?;
    let mut rows = select(&m, cfg.interpret.split);
    if cfg.interpret.max_subjects > 0 {
        rows.truncate(cfg.interpret.max_subjects);
    }
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("no subjects in split {}", cfg.interpret.split)))?;
    let dims = m.load_volume(first)?.dims;
    let ages: Vec<f64> = rows.iter().map(|r| r.age).collect();
    let (global, bands) = aggregate_by_band(&ages, &cfg.interpret.band_edges, (dims[0], dims[1], dims[2]), |i| {
        subject_heatmaps(&m.load_volume(rows[i])?, &vit, &reg)
    })?;

    let dir = layout.interpret_dir();
    mkdir(&dir)?;
    let mut out = Vec::new();
    let attention = dir.join("attention.brv");
    global.save(&attention)?;
    out.push(attention);
    let montage = dir.join("montage.svg");
    fs::write(&montage, montage_svg(&global, cfg.interpret.montage_panels, 48)).map_err(|e| Error::io(&montage, e))?;
    out.push(montage);

    let mut band_summaries = Vec::new();
    for b in &bands {
        let file = format!("attention_{}-{}.brv", b.lo, b.hi);
        b.volume.save(&dir.join(&file))?;
        out.push(dir.join(&file));
        band_summaries.push(BandSummary {
            lo: b.lo,
            hi: b.hi,
            subjects: b.volume.subjects,
            file,
        });
    }

    let (atlas, atlas_name) = match (&cfg.interpret.atlas, &cfg.interpret.atlas_labels) {
        (Some(a), Some(l)) => (AtlasVolume::load(a, l)?, a.display().to_string()),
        _ => {
            let atlas = synthetic_atlas(dims);
            let (a, l) = (dir.join("atlas.brv"), dir.join("atlas.csv"));
            atlas.save(&a, &l)?;
            out.push(a);
            out.push(l);
            (atlas, "synthetic".to_string())
        }
    };
    let (scores, resampled) = roi_scores(&global, &atlas)?;
    let roi = dir.join("roi.csv");
    write_roi_csv(&scores, &roi)?;
    out.push(roi);
    let summary = dir.join("interpret.json");
    save_json(
        &InterpretSummary {
            subjects: global.subjects,
            atlas: atlas_name,
            atlas_resampled: resampled,
            bands: band_summaries,
        },
        &summary,
    )?;
    out.push(summary);
    Ok(out)
}

fn stage_evaluate(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let preds = read_predictions(&layout.predictions())?;
    let ages: Vec<f64> = preds.iter().map(|p| p.age).collect();
    let est: Vec<f64> = preds.iter().map(|p| p.predicted_age).collect();
    let metrics = compute_metrics(&est, &ages)?;
    let items: Vec<_> = preds.iter().map(|p| (p.subject_id.clone(), p.bag, 0u8)).collect();
    let threshold = bag_cohort(&items, cfg.eval.threshold_sd).ok().map(|c| c.sd * c.threshold_sd);
    let dir = layout.report_dir();
    write_report(&metrics, None, &preds, threshold, &dir)?;
    Ok(["metrics.json", "scatter.svg", "bag_hist.svg"].iter().map(|f| dir.join(f)).collect())
}

fn stage_bag_analyze(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let preds = read_predictions(&layout.predictions())?;
    let m = CohortManifest::load(&cohort_manifest_path(cfg, layout))?;
    let cohort: BTreeMap<&str, u8> = m.rows.iter().map(|r| (r.subject_id.as_str(), r.cohort)).collect();
    let items = preds
        .iter()
        .map(|p| {
            cohort
                .get(p.subject_id.as_str())
                .map(|&c| (p.subject_id.clone(), p.bag, c))
                .ok_or_else(|| Error::Format(format!("{} is not in the cohort manifest", p.subject_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let bags = bag_cohort(&items, cfg.eval.threshold_sd)?;
    let dir = layout.report_dir();
    mkdir(&dir)?;
    let mut out = Vec::new();
    let records = dir.join("bags.csv");
    write_bag_records(&bags.records, &records)?;
    out.push(records);
    for (exposure, file) in [
        (Exposure::PositiveVsRest, "association.json"),
        (Exposure::PositiveVsNegative, "association_pos_vs_neg.json"),
    ] {
        let table = contingency_table(&bags.records, cfg.eval.case_label, exposure);
        let path = dir.join(file);
        if table.total() == 0 {
            log::warn!("no subjects for {file}; skipped");
            if path.exists() {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
            continue;
        }
        let mut stats = association(&table)?;
        stats
            .methods
            .insert("bag_threshold".into(), format!("{} x sample (n-1) SD = {}", bags.threshold_sd, bags.sd));
        save_json(&stats, &path)?;
        out.push(path);
    }
    Ok(out)
}

#[derive(Serialize)]
struct SimSummary {
    subjects: usize,
    slices: usize,
    zero_rows: usize,
    anti_diagonal_mean: Option<f64>,
}

fn stage_simcheck(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let fm = CohortManifest::load(&layout.features_manifest())?;
    let feats = load_features(&fm, &select(&fm, cfg.eval.split))?;
    let views: Vec<_> = feats.iter().map(|f| f.z.view()).collect();
    let sim = cosine_similarity_matrix(&views)?;
    let dir = layout.report_dir();
    mkdir(&dir)?;
    let csv = dir.join("similarity.csv");
    write_matrix_csv(&sim.m, &csv)?;
    let s = sim.m.nrows();
    let json = dir.join("simcheck.json");
    save_json(
        &SimSummary {
            subjects: sim.subjects,
            slices: s,
            zero_rows: sim.zero_rows,
            anti_diagonal_mean: anti_diagonal_mean(&sim.m, s / 8),
        },
        &json,
    )?;
    Ok(vec![csv, json])
}

fn run_one(stage: Stage, cfg: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    log::info!("running {stage}");
    match stage {
        Stage::Synth => stage_synth(cfg, layout),
        Stage::Pretrain => stage_pretrain(cfg, layout),
        Stage::Extract => stage_extract(cfg, layout),
        Stage::Train => stage_train(cfg, layout),
        Stage::Predict => stage_predict(cfg, layout),
        Stage::Interpret => stage_interpret(cfg, layout),
        Stage::Evaluate => stage_evaluate(cfg, layout),
        Stage::BagAnalyze => stage_bag_analyze(cfg, layout),
        Stage::Simcheck => stage_simcheck(cfg, layout),
        Stage::Pipeline => {
            let mut all = Vec::new();
            let first = if cfg.cohort.is_some() { 1 } else { 0 };
            for st in &PIPELINE_ORDER[first..] {
                let arts = run_one(*st, cfg, layout)?;
                write_provenance(*st, cfg, layout, &arts)?;
                all.extend(arts);
            }
            Ok(all)
        }
    }
}

/// Stage order used by `pipeline`.
pub const PIPELINE_ORDER: [Stage; 9] = [
    Stage::Synth,
    Stage::Pretrain,
    Stage::Extract,
    Stage::Train,
    Stage::Predict,
    Stage::Evaluate,
    Stage::BagAnalyze,
    Stage::Simcheck,
    Stage::Interpret,
];

fn write_provenance(stage: Stage, cfg: &RunConfig, layout: &Layout, artifacts: &[PathBuf]) -> Result<Provenance> {
    let mut sums = BTreeMap::new();
    for a in artifacts {
        let key = a.strip_prefix(&layout.out).unwrap_or(a).display().to_string();
        sums.insert(key, file_checksum(a)?);
    }
    let prov = Provenance {
        subcommand: stage.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg.entries(),
        artifacts: sums,
    };
    let path = layout.provenance(stage);
    mkdir(path.parent().expect("provenance dir"))?;
    save_json(&prov, &path)?;
    Ok(prov)
}

/// Runs one subcommand and writes its provenance record.
pub fn run(stage: Stage, cfg: &RunConfig) -> Result<Provenance> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out);
    mkdir(&layout.out)?;
    let artifacts = run_one(stage, cfg, &layout)?;
    write_provenance(stage, cfg, &layout, &artifacts)
}
