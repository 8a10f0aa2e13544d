//! Volumes, the `.brv` file format, sagittal slicing, and the synthetic
//! cohort generator.
//!
//! `.brv` layout (little-endian): magic `BRVV`, u32 version = 1, u32 S,
//! u32 H, u32 W, f32 age, u8 sex, u8 cohort_label, u16 id length, UTF-8
//! subject id, then S·H·W f32 voxels, slice-major.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{rng_for, sigmoid};

pub const VOLUME_MAGIC: &[u8; 4] = b"BRVV";
pub const FORMAT_VERSION: u32 = 1;
/// Bytes before the subject id: magic, version, dims, age, sex, cohort, id length.
pub const FIXED_HEADER_BYTES: usize = 4 + 4 + 12 + 4 + 1 + 1 + 2;

/// Volume header shared by intensity (`BRVV`) and label (`BRVA`) files.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Header {
    pub dims: [usize; 3],
    pub age: f32,
    pub sex: u8,
    pub cohort: u8,
    pub subject_id: String,
}

impl Header {
    pub(crate) fn voxel_count(&self) -> Result<usize> {
        let [s, h, w] = self.dims;
        s.checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .filter(|v| v.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format(format!("dimension overflow: {s}x{h}x{w}")))
    }

    pub(crate) fn write<W: Write>(&self, w: &mut W, magic: &[u8; 4]) -> std::io::Result<()> {
        let id = self.subject_id.as_bytes();
        w.write_all(magic)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for d in self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&self.age.to_le_bytes())?;
        w.write_all(&[self.sex, self.cohort])?;
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id)
    }

    pub(crate) fn read<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Self> {
        let mut fixed = [0u8; FIXED_HEADER_BYTES];
        read_exact(r, &mut fixed)?;
        if &fixed[0..4] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {}",
                &fixed[0..4],
                String::from_utf8_lossy(magic)
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes([fixed[o], fixed[o + 1], fixed[o + 2], fixed[o + 3]]);
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let age = f32::from_le_bytes([fixed[20], fixed[21], fixed[22], fixed[23]]);
        let sex = fixed[24];
        let cohort = fixed[25];
        let id_len = u16::from_le_bytes([fixed[26], fixed[27]]) as usize;
        let mut id = vec![0u8; id_len];
        read_exact(r, &mut id)?;
        let subject_id =
            String::from_utf8(id).map_err(|_| Error::Format("subject id is not UTF-8".into()))?;
        let header = Header {
            dims,
            age,
            sex,
            cohort,
            subject_id,
        };
        header.voxel_count()?;
        Ok(header)
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated payload".into())
        } else {
            Error::io("<stream>", e)
        }
    })
}

/// A 3D scalar field of shape S×H×W (sagittal-slice-major) with subject metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub subject_id: String,
    pub dims: [usize; 3],
    pub voxels: Vec<f32>,
    pub age: f32,
    /// 0 = male, 1 = female.
    pub sex: u8,
    /// 0 = control, 1 = case.
    pub cohort_label: u8,
}

impl Volume {
    pub fn new(
        subject_id: impl Into<String>,
        dims: [usize; 3],
        voxels: Vec<f32>,
        age: f32,
        sex: u8,
        cohort_label: u8,
    ) -> Result<Self> {
        let v = Volume {
            subject_id: subject_id.into(),
            dims,
            voxels,
            age,
            sex,
            cohort_label,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let [s, h, w] = self.dims;
        if s == 0 || h == 0 || w == 0 {
            return Err(invalid(format!("volume dims must be positive, got {s}x{h}x{w}")));
        }
        if self.voxels.len() != s * h * w {
            return Err(Error::Shape(format!(
                "{} voxels for dims {s}x{h}x{w}",
                self.voxels.len()
            )));
        }
        if !self.voxels.iter().all(|v| v.is_finite()) {
            return Err(invalid("volume contains non-finite voxels"));
        }
        if !(self.age >= 0.0 && self.age.is_finite()) {
            return Err(invalid(format!("age must be non-negative, got {}", self.age)));
        }
        if self.sex > 1 || self.cohort_label > 1 {
            return Err(invalid("sex and cohort_label must be 0 or 1"));
        }
        if self.subject_id.len() > u16::MAX as usize {
            return Err(invalid("subject id longer than 65535 bytes"));
        }
        Ok(())
    }

    pub fn slices(&self) -> usize {
        self.dims[0]
    }

    /// Raw voxels of sagittal slice `i` (H·W values, row-major).
    pub fn slice(&self, i: usize) -> &[f32] {
        let plane = self.dims[1] * self.dims[2];
        &self.voxels[i * plane..(i + 1) * plane]
    }

    /// Sum of all voxel intensities.
    pub fn mass(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum()
    }

    fn header(&self) -> Header {
        Header {
            dims: self.dims,
            age: self.age,
            sex: self.sex,
            cohort: self.cohort_label,
            subject_id: self.subject_id.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.validate()?;
        let io = |e| Error::io("<volume>", e);
        self.header().write(w, VOLUME_MAGIC).map_err(io)?;
        let mut buf = Vec::with_capacity(self.voxels.len() * 4);
        for v in &self.voxels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let header = Header::read(r, VOLUME_MAGIC)?;
        let n = header.voxel_count()?;
        let mut raw = vec![0u8; n * 4];
        read_exact(r, &mut raw)?;
        let voxels = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let v = Volume {
            subject_id: header.subject_id,
            dims: header.dims,
            voxels,
            age: header.age,
            sex: header.sex,
            cohort_label: header.cohort,
        };
        v.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(v)
    }
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    volume.write_to(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Volume::read_from(&mut BufReader::new(file))
}

/// Ordered, z-scored sagittal slices of one volume.
#[derive(Debug, Clone)]
pub struct SliceStack {
    pub subject_id: String,
    pub slices: Vec<Array2<f64>>,
}

impl SliceStack {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Z-scores one slice with the population standard deviation. Constant
/// slices map to zeros.
pub fn zscore(values: &[f32], h: usize, w: usize) -> Array2<f64> {
    let min = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if min == max {
        return Array2::zeros((h, w));
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    Array2::from_shape_fn((h, w), |(y, x)| (values[y * w + x] as f64 - mean) / sd)
}

pub fn extract_slices(volume: &Volume) -> SliceStack {
    let [s, h, w] = volume.dims;
    let slices = (0..s).map(|i| zscore(volume.slice(i), h, w)).collect();
    SliceStack {
        subject_id: volume.subject_id.clone(),
        slices,
    }
}

/// `floor(k·S/n)` for `k = 0..n`.
pub fn even_indices(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(invalid(format!(
            "slice count {n} out of range 1..={total}"
        )));
    }
    Ok((0..n).map(|k| k * total / n).collect())
}

pub fn sample_even_slices(stack: &SliceStack, n: usize) -> Result<(Vec<usize>, Vec<Array2<f64>>)> {
    let idx = even_indices(stack.len(), n)?;
    let slices = idx.iter().map(|&i| stack.slices[i].clone()).collect();
    Ok((idx, slices))
}

/// Parameters of the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub dims: [usize; 3],
    pub age_range: [f64; 2],
    pub case_fraction: f64,
    /// Extra apparent years of atrophy for cases.
    pub case_atrophy_boost: f64,
    pub noise_sigma: f64,
    /// Relative radius change of the left hemisphere, signed by sex.
    pub sex_asymmetry: f64,
    /// Extra apparent years of atrophy for females.
    pub sex_age_offset: f64,
    /// Half-width of the uniform per-subject head size jitter.
    pub size_jitter: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            count: 64,
            dims: [160, 224, 224],
            age_range: [20.0, 80.0],
            case_fraction: 0.3,
            case_atrophy_boost: 5.0,
            noise_sigma: 0.02,
            sex_asymmetry: 0.04,
            sex_age_offset: 0.0,
            size_jitter: 0.02,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.count < 1 {
            return bad("synth.count must be at least 1".into());
        }
        if self.dims.iter().any(|&d| d == 0) {
            return bad(format!("synth.dims must be positive, got {:?}", self.dims));
        }
        let [lo, hi] = self.age_range;
        if !(lo >= 0.0 && lo < hi) {
            return bad(format!("synth age range must satisfy 0 <= min < max, got [{lo}, {hi}]"));
        }
        if !(0.0..=1.0).contains(&self.case_fraction) {
            return bad("synth.case_fraction must lie in [0,1]".into());
        }
        if self.case_atrophy_boost < 0.0 || self.noise_sigma < 0.0 || self.size_jitter < 0.0 {
            return bad("synth boost, noise and jitter must be non-negative".into());
        }
        if self.sex_asymmetry.abs() >= 0.5 {
            return bad("synth.sex_asymmetry must lie in (-0.5, 0.5)".into());
        }
        if self.val_fraction < 0.0 || self.test_fraction < 0.0 || self.val_fraction + self.test_fraction >= 1.0 {
            return bad("synth val/test fractions must be non-negative and sum below 1".into());
        }
        Ok(())
    }
}

/// Per-subject inputs to the closed-form phenotype model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phenotype {
    /// Apparent age in years driving atrophy.
    pub effective_age: f64,
    /// Signed left-hemisphere radius change; zero gives exact mirror symmetry.
    pub asymmetry: f64,
    /// Multiplicative head size factor.
    pub size: f64,
}

const EDGE_SHARPNESS: f64 = 25.0;

fn axis_coord(i: usize, n: usize) -> f64 {
    // i - (n-1)/2 is exact in f64, so mirrored indices give exactly negated coordinates.
    (i as f64 - (n as f64 - 1.0) / 2.0) / (n as f64 / 2.0)
}

/// Renders the noise-free phenotype. Every voxel intensity is non-increasing
/// in `effective_age`.
pub fn render_phenotype(dims: [usize; 3], p: &Phenotype) -> Vec<f32> {
    let [s, h, w] = dims;
    let t = (p.effective_age / 100.0).clamp(0.0, 1.0);
    let r_out = (0.88 - 0.18 * t) * p.size;
    let r_cav = 0.08 + 0.22 * t;
    let mut out = vec![0.0f32; s * h * w];
    for si in 0..s {
        let u = axis_coord(si, s);
        let r_hemi = if u < 0.0 { r_out * (1.0 + p.asymmetry) } else { r_out };
        for yi in 0..h {
            let v = axis_coord(yi, h);
            for xi in 0..w {
                let x = axis_coord(xi, w);
                let rho = ((u / 0.80).powi(2) + (v / 0.95).powi(2) + (x / 0.90).powi(2)).sqrt();
                let inside = sigmoid((r_hemi - rho) * EDGE_SHARPNESS);
                let cortex = sigmoid((rho - 0.82 * r_hemi) * EDGE_SHARPNESS);
                let tissue = 1.0 - 0.35 * cortex;
                // Two lateral ventricles placed symmetrically about the mid-plane.
                let vent = |cu: f64| {
                    let rc = (((u - cu) / 0.45).powi(2) + ((v + 0.05) / 0.7).powi(2) + (x / 0.55).powi(2)).sqrt();
                    sigmoid((rc - r_cav) * EDGE_SHARPNESS)
                };
                let cavity = vent(-0.18) * vent(0.18);
                let value = inside * tissue * (0.15 + 0.85 * cavity);
                out[(si * h + yi) * w + xi] = value as f32;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub path: PathBuf,
    pub age: f64,
    pub sex: u8,
    pub cohort: u8,
    pub split: Split,
}

/// Subject table; relative paths resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CohortManifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

impl CohortManifest {
    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.subject_id.as_str()) {
                return Err(Error::Format(format!("duplicate subject id {}", r.subject_id)));
            }
            if r.sex > 1 || r.cohort > 1 {
                return Err(Error::Format(format!("bad sex/cohort for {}", r.subject_id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["subject_id", "path", "age", "sex", "cohort", "split"])?;
        for r in &self.rows {
            w.write_record([
                r.subject_id.clone(),
                r.path.display().to_string(),
                r.age.to_string(),
                r.sex.to_string(),
                r.cohort.to_string(),
                r.split.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let expected = ["subject_id", "path", "age", "sex", "cohort", "split"];
        if headers.iter().ne(expected.iter().copied()) {
            return Err(Error::Format(format!("unexpected manifest header {headers:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number `{}` in manifest", &rec[i])))
            };
            rows.push(ManifestRow {
                subject_id: rec[0].to_string(),
                path: PathBuf::from(&rec[1]),
                age: num(2)?,
                sex: num(3)? as u8,
                cohort: num(4)? as u8,
                split: rec[5].parse()?,
            });
        }
        let manifest = CohortManifest {
            rows,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load_volume(&self, row: &ManifestRow) -> Result<Volume> {
        load_volume(&self.resolve(row))
    }
}

struct SubjectDraw {
    age: f32,
    sex: u8,
    cohort: u8,
    size: f64,
}

/// Builds one synthetic subject's volume.
fn synth_volume(config: &SynthConfig, index: usize, draw: &SubjectDraw) -> Volume {
    let sex_sign = if draw.sex == 1 { 1.0 } else { -1.0 };
    let phenotype = Phenotype {
        effective_age: draw.age as f64
            + config.case_atrophy_boost * draw.cohort as f64
            + config.sex_age_offset * draw.sex as f64,
        asymmetry: config.sex_asymmetry * sex_sign,
        size: draw.size,
    };
    let mut voxels = render_phenotype(config.dims, &phenotype);
    if config.noise_sigma > 0.0 {
        let mut rng = rng_for(config.seed, 1 + index as u64);
        for v in voxels.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += (config.noise_sigma * n) as f32;
        }
    }
    Volume {
        subject_id: subject_name(index),
        dims: config.dims,
        voxels,
        age: draw.age,
        sex: draw.sex,
        cohort_label: draw.cohort,
    }
}

pub fn subject_name(index: usize) -> String {
    format!("sub-{index:05}")
}

/// Generates `config.count` subjects into `out_dir` and writes `manifest.csv`.
pub fn generate_synthetic_cohort(config: &SynthConfig, out_dir: &Path) -> Result<CohortManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rng = rng_for(config.seed, 0);
    let [lo, hi] = config.age_range;
    let draws: Vec<SubjectDraw> = (0..config.count)
        .map(|_| SubjectDraw {
            age: rng.gen_range(lo..hi) as f32,
            sex: rng.gen_range(0..2u8),
            cohort: u8::from(rng.gen_bool(config.case_fraction)),
            size: 1.0 + config.size_jitter * rng.gen_range(-1.0..=1.0),
        })
        .collect();

    let mut order: Vec<usize> = (0..config.count).collect();
    order.shuffle(&mut rng);
    let n_test = (config.count as f64 * config.test_fraction).round() as usize;
    let n_val = (config.count as f64 * config.val_fraction).round() as usize;
    let mut splits = vec![Split::Train; config.count];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_test {
            splits[i] = Split::Test;
        } else if rank < n_test + n_val {
            splits[i] = Split::Val;
        }
    }

    let rows = draws
        .par_iter()
        .enumerate()
        .map(|(i, draw)| {
            let vol = synth_volume(config, i, draw);
            let file = format!("{}.brv", vol.subject_id);
            save_volume(&vol, &out_dir.join(&file))?;
            Ok(ManifestRow {
                subject_id: vol.subject_id,
                path: PathBuf::from(file),
                age: draw.age as f64,
                sex: draw.sex,
                cohort: draw.cohort,
                split: splits[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = CohortManifest {
        rows,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product();
        let voxels = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
        Volume::new("s1", dims, voxels, 54.5, 1, 0).unwrap()
    }

    #[test]
    fn round_trip_small_volume() {
        let v = tiny([4, 4, 4]);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let back = Volume::read_from(&mut &buf[..]).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut buf = Vec::new();
        tiny([2, 2, 2]).write_to(&mut buf).unwrap();
        buf[..4].copy_from_slice(b"NOPE");
        assert!(matches!(Volume::read_from(&mut &buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let mut buf = Vec::new();
        tiny([2, 2, 2]).write_to(&mut buf).unwrap();
        buf.pop();
        let err = Volume::read_from(&mut &buf[..]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn oversized_dims_are_rejected() {
        let h = Header {
            dims: [u32::MAX as usize, u32::MAX as usize, u32::MAX as usize],
            age: 0.0,
            sex: 0,
            cohort: 0,
            subject_id: "x".into(),
        };
        let mut buf = Vec::new();
        h.write(&mut buf, VOLUME_MAGIC).unwrap();
        let err = Volume::read_from(&mut &buf[..]).unwrap_err();
        assert!(err.to_string().contains("overflow"), "{err}");
    }

    #[test]
    fn default_dims_payload_size() {
        // 160·224·224 voxels at 4 bytes each, plus the fixed header and the id.
        let h = Header {
            dims: [160, 224, 224],
            age: 30.0,
            sex: 0,
            cohort: 0,
            subject_id: "sub-00000".into(),
        };
        let mut buf = Vec::new();
        h.write(&mut buf, VOLUME_MAGIC).unwrap();
        assert_eq!(buf.len(), FIXED_HEADER_BYTES + 9);
        assert_eq!(h.voxel_count().unwrap() * 4, 32_112_640);
    }

    #[test]
    fn constant_slice_maps_to_zeros() {
        let mut v = tiny([3, 4, 5]);
        v.voxels[20..40].iter_mut().for_each(|x| *x = 7.25);
        let stack = extract_slices(&v);
        assert!(stack.slices[1].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zscore_is_affine_invariant() {
        let a: Vec<f32> = (0..30).map(|i| ((i * 7) % 11) as f32 - 3.0).collect();
        let b: Vec<f32> = a.iter().map(|x| 2.0 * x + 5.0).collect();
        let za = zscore(&a, 5, 6);
        let zb = zscore(&b, 5, 6);
        for (x, y) in za.iter().zip(zb.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn even_indices_examples() {
        let idx = even_indices(160, 32).unwrap();
        assert_eq!(idx, (0..32).map(|k| 5 * k).collect::<Vec<_>>());
        assert_eq!(even_indices(160, 160).unwrap(), (0..160).collect::<Vec<_>>());
        assert_eq!(even_indices(7, 3).unwrap(), vec![0, 2, 4]);
        assert!(even_indices(7, 0).is_err());
        assert!(even_indices(7, 8).is_err());
    }

    #[test]
    fn older_phenotype_has_less_mass() {
        let dims = [24, 24, 24];
        let mass = |age: f64| -> f64 {
            render_phenotype(dims, &Phenotype { effective_age: age, asymmetry: 0.0, size: 1.0 })
                .iter()
                .map(|&v| v as f64)
                .sum()
        };
        assert!(mass(80.0) < mass(20.0));
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let row = ManifestRow {
            subject_id: "a".into(),
            path: "a.brv".into(),
            age: 1.0,
            sex: 0,
            cohort: 0,
            split: Split::Train,
        };
        let m = CohortManifest { rows: vec![row.clone(), row], base_dir: PathBuf::new() };
        assert!(m.validate().is_err());
    }
}
