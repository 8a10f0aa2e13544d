//! Guided-backprop saliency projected onto ViT patches, fused with CLS
//! attention, aggregated into a 3D attention volume and scored over an atlas.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Dimension};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, shape_err, Error, Result};
use crate::regressor::{backward, forward_cached, Backprop, Mode, RegressorParams};
use crate::volume::{extract_slices, load_volume, read_exact, save_volume, Header, Volume};
use crate::vit::{cls_attention_from_trace, trace_slice, ViTParams};

pub const ATLAS_MAGIC: &[u8; 4] = b"BRVA";
pub const ATTENTION_ID: &str = "ATTENTION";

/// Min-max scaling to [0,1]; constant input maps to zeros.
pub fn normalize01<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if x.is_empty() || !(hi > lo) {
        return Array::zeros(x.raw_dim());
    }
    let span = hi - lo;
    x.mapv(|v| (v - lo) / span)
}

/// Raw gradient of the predicted age with respect to Z (eval mode).
pub fn input_gradient(
    z: ArrayView2<f64>,
    sex: u8,
    params: &RegressorParams,
    mode: Backprop,
) -> Result<(Array2<f64>, usize)> {
    let (_, cache) = forward_cached(z, sex, params, 0.0, Mode::Eval)?;
    let g = backward(&cache, 1.0, 0.0, params, mode);
    Ok((g.input, g.gated_sites))
}

/// Guided-backprop saliency G over Z, normalized to [0,1].
pub fn guided_backprop(z: ArrayView2<f64>, sex: u8, params: &RegressorParams) -> Result<Array2<f64>> {
    Ok(normalize01(&input_gradient(z, sex, params, Backprop::Guided)?.0))
}

/// Patch scores `s = P·g` for N_p×d patch embeddings and a d-vector.
pub fn patch_importance(patches: ArrayView2<f64>, g: ArrayView1<f64>) -> Result<Array1<f64>> {
    if patches.ncols() != g.len() {
        return Err(shape_err(format!(
            "patch width {} does not match gradient width {}",
            patches.ncols(),
            g.len()
        )));
    }
    Ok(patches.dot(&g))
}

pub fn fuse_maps(scores: ArrayView1<f64>, alpha: ArrayView1<f64>) -> Result<Array1<f64>> {
    if scores.len() != alpha.len() {
        return Err(shape_err(format!(
            "cannot fuse {} scores with {} attention weights",
            scores.len(),
            alpha.len()
        )));
    }
    Ok(&scores * &alpha)
}

/// Corner-aligned bilinear upsampling of a patch grid, then min-max normalized.
pub fn upsample_heatmap(grid: ArrayView2<f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    Ok(normalize01(&bilinear_resize(grid, target)?))
}

/// Corner-aligned bilinear resize without normalization.
pub fn bilinear_resize(grid: ArrayView2<f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    let (gh, gw) = grid.dim();
    let (h, w) = target;
    if gh == 0 || gw == 0 || h == 0 || w == 0 {
        return Err(invalid("bilinear resize needs non-empty grid and target"));
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let ys: Vec<_> = (0..h).map(|y| coord(y, h, gh)).collect();
    let xs: Vec<_> = (0..w).map(|x| coord(x, w, gw)).collect();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1, ty) = ys[y];
        let (x0, x1, tx) = xs[x];
        let top = grid[[y0, x0]] * (1.0 - tx) + grid[[y0, x1]] * tx;
        let bottom = grid[[y1, x0]] * (1.0 - tx) + grid[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    }))
}

/// Normalized S×H×W heatmap stack for one subject.
pub fn subject_heatmaps(volume: &Volume, vit: &ViTParams, reg: &RegressorParams) -> Result<Array3<f64>> {
    let [s, h, w] = volume.dims;
    let stack = extract_slices(volume);
    let traces = stack
        .slices
        .par_iter()
        .map(|sl| trace_slice(sl.view(), vit))
        .collect::<Result<Vec<_>>>()?;
    let d = vit.arch.embed_dim;
    let mut z = Array2::zeros((s, d));
    for (i, t) in traces.iter().enumerate() {
        z.row_mut(i).assign(&t.output.row(0));
    }
    let g = guided_backprop(z.view(), volume.sex, reg)?;
    let (gh, gw) = vit.arch.grid();
    let maps = traces
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let scores = normalize01(&patch_importance(t.patch_tokens(), g.row(i))?);
            let alpha = normalize01(&cls_attention_from_trace(t)?.alpha);
            let fused = fuse_maps(scores.view(), alpha.view())?;
            let grid = fused
                .into_shape_with_order((gh, gw))
                .map_err(|e| shape_err(e.to_string()))?;
            upsample_heatmap(grid.view(), (h, w))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array3::zeros((s, h, w));
    for (i, m) in maps.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&m);
    }
    Ok(out)
}

/// Cross-subject mean of normalized heatmap stacks, normalized to [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionVolume {
    pub a: Array3<f64>,
    pub subjects: usize,
}

impl AttentionVolume {
    pub fn to_volume(&self) -> Result<Volume> {
        let (s, h, w) = self.a.dim();
        Volume::new(
            ATTENTION_ID,
            [s, h, w],
            self.a.iter().map(|&v| v as f32).collect(),
            0.0,
            0,
            0,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_volume(&self.to_volume()?, path)
    }

    /// Loads the field; the subject count is not stored and reads back as 0.
    pub fn load(path: &Path) -> Result<Self> {
        let v = load_volume(path)?;
        let [s, h, w] = v.dims;
        let a = Array3::from_shape_vec((s, h, w), v.voxels.iter().map(|&x| x as f64).collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(AttentionVolume { a, subjects: 0 })
    }
}

/// Running sum of heatmap stacks, finalized once into an [`AttentionVolume`].
#[derive(Debug, Clone)]
pub struct AttentionAccumulator {
    sum: Array3<f64>,
    count: usize,
}

impl AttentionAccumulator {
    pub fn new(dims: (usize, usize, usize)) -> Self {
        AttentionAccumulator {
            sum: Array3::zeros(dims),
            count: 0,
        }
    }

    pub fn add(&mut self, stack: ArrayView3<f64>) -> Result<()> {
        if stack.dim() != self.sum.dim() {
            return Err(shape_err(format!(
                "heatmap stack {:?} does not match {:?}",
                stack.dim(),
                self.sum.dim()
            )));
        }
        self.sum += &stack;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finalize(self) -> Result<AttentionVolume> {
        if self.count == 0 {
            return Err(invalid("no subjects to aggregate"));
        }
        let mean = self.sum / self.count as f64;
        Ok(AttentionVolume {
            a: normalize01(&mean),
            subjects: self.count,
        })
    }
}

pub fn aggregate_attention(stacks: &[Array3<f64>]) -> Result<AttentionVolume> {
    let first = stacks.first().ok_or_else(|| invalid("no subjects to aggregate"))?;
    let mut acc = AttentionAccumulator::new(first.dim());
    for s in stacks {
        acc.add(s.view())?;
    }
    acc.finalize()
}

/// Attention over subjects whose age lies in `[lo, hi)` (the last band is closed).
#[derive(Debug, Clone, PartialEq)]
pub struct BandAttention {
    pub lo: f64,
    pub hi: f64,
    pub volume: AttentionVolume,
}

/// Index of the band holding `age`, or `None` if it lies outside every band.
pub fn band_index(age: f64, edges: &[f64]) -> Option<usize> {
    let k = edges.len().checked_sub(1)?;
    (0..k).find(|&b| age >= edges[b] && (age < edges[b + 1] || (b + 1 == k && age == edges[k])))
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("band edges must be at least two strictly increasing values"));
    }
    Ok(())
}

/// Global and per-band aggregation. `heatmaps(i)` computes subject i's stack;
/// subjects are processed in parallel chunks and summed in index order.
pub fn aggregate_by_band<F>(
    ages: &[f64],
    edges: &[f64],
    dims: (usize, usize, usize),
    heatmaps: F,
) -> Result<(AttentionVolume, Vec<BandAttention>)>
where
    F: Fn(usize) -> Result<Array3<f64>> + Sync,
{
    check_edges(edges)?;
    let bands = ages
        .iter()
        .map(|&a| {
            band_index(a, edges).ok_or_else(|| {
                invalid(format!(
                    "age {a} lies outside the band edges {}..{}",
                    edges[0],
                    edges[edges.len() - 1]
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut global = AttentionAccumulator::new(dims);
    let mut per_band: Vec<_> = (0..edges.len() - 1).map(|_| AttentionAccumulator::new(dims)).collect();
    let chunk = rayon::current_num_threads().max(1);
    let indices: Vec<usize> = (0..ages.len()).collect();
    for group in indices.chunks(chunk) {
        let stacks = group.par_iter().map(|&i| heatmaps(i)).collect::<Result<Vec<_>>>()?;
        for (&i, s) in group.iter().zip(&stacks) {
            global.add(s.view())?;
            per_band[bands[i]].add(s.view())?;
        }
    }
    let global = global.finalize()?;
    let mut out = Vec::new();
    for (b, acc) in per_band.into_iter().enumerate() {
        let (lo, hi) = (edges[b], edges[b + 1]);
        if acc.count() == 0 {
            log::warn!("age band {lo}-{hi} has no subjects, skipping");
            continue;
        }
        out.push(BandAttention {
            lo,
            hi,
            volume: acc.finalize()?,
        });
    }
    Ok((global, out))
}

/// Per-band aggregation of precomputed heatmap stacks.
pub fn age_band_attention(ages: &[f64], stacks: &[Array3<f64>], edges: &[f64]) -> Result<Vec<BandAttention>> {
    if ages.len() != stacks.len() {
        return Err(invalid("one age per heatmap stack is required"));
    }
    let first = stacks.first().ok_or_else(|| invalid("no subjects to aggregate"))?;
    Ok(aggregate_by_band(ages, edges, first.dim(), |i| Ok(stacks[i].clone()))?.1)
}

/// Integer label volume with region names and region groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasVolume {
    pub dims: [usize; 3],
    pub labels: Vec<i32>,
    /// label → (region, group)
    pub regions: BTreeMap<i32, (String, String)>,
}

impl AtlasVolume {
    pub fn new(dims: [usize; 3], labels: Vec<i32>, regions: BTreeMap<i32, (String, String)>) -> Result<Self> {
        let atlas = AtlasVolume { dims, labels, regions };
        atlas.validate()?;
        Ok(atlas)
    }

    pub fn validate(&self) -> Result<()> {
        let [s, h, w] = self.dims;
        if self.labels.len() != s * h * w {
            return Err(shape_err(format!(
                "atlas has {} labels for dims {s}x{h}x{w}",
                self.labels.len()
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l != 0 && !self.regions.contains_key(&l)) {
            return Err(Error::Format(format!("atlas label {l} has no region name")));
        }
        Ok(())
    }

    /// Nearest-neighbour resample onto another grid (`src = floor(dst·in/out)`).
    pub fn resample(&self, dims: [usize; 3]) -> AtlasVolume {
        let [s0, h0, w0] = self.dims;
        let [s, h, w] = dims;
        let mut labels = Vec::with_capacity(s * h * w);
        for i in 0..s {
            for j in 0..h {
                for k in 0..w {
                    let (si, hj, wk) = (i * s0 / s, j * h0 / h, k * w0 / w);
                    labels.push(self.labels[(si * h0 + hj) * w0 + wk]);
                }
            }
        }
        AtlasVolume {
            dims,
            labels,
            regions: self.regions.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            dims: self.dims,
            age: 0.0,
            sex: 0,
            cohort: 0,
            subject_id: "ATLAS".into(),
        };
        let io = |e| Error::io("<atlas>", e);
        header.write(w, ATLAS_MAGIC).map_err(io)?;
        let mut buf = Vec::with_capacity(self.labels.len() * 4);
        for l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)
    }

    /// Reads the label volume; region names come from the CSV sidecar.
    pub fn read_labels<R: Read>(r: &mut R) -> Result<([usize; 3], Vec<i32>)> {
        let header = Header::read(r, ATLAS_MAGIC)?;
        let n = header.voxel_count()?;
        let mut buf = vec![0u8; n * 4];
        read_exact(r, &mut buf)?;
        let labels = buf
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((header.dims, labels))
    }

    pub fn save(&self, labels_path: &Path, csv_path: &Path) -> Result<()> {
        let f = File::create(labels_path).map_err(|e| Error::io(labels_path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(labels_path, e))?;
        let mut c = csv::Writer::from_path(csv_path)?;
        c.write_record(["label", "region", "group"])?;
        for (label, (region, group)) in &self.regions {
            c.write_record([label.to_string(), region.clone(), group.clone()])?;
        }
        c.flush().map_err(|e| Error::io(csv_path, e))
    }

    pub fn load(labels_path: &Path, csv_path: &Path) -> Result<Self> {
        for p in [labels_path, csv_path] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
        }
        let f = File::open(labels_path).map_err(|e| Error::io(labels_path, e))?;
        let (dims, labels) = Self::read_labels(&mut BufReader::new(f))?;
        let mut regions = BTreeMap::new();
        let mut r = csv::Reader::from_path(csv_path)?;
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Format("atlas CSV rows need label,region,group".into()));
            }
            let label: i32 = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad atlas label `{}`", &rec[0])))?;
            regions.insert(label, (rec[1].to_string(), rec[2].to_string()));
        }
        Self::new(dims, labels, regions)
    }
}

/// Box-partition atlas for synthetic cohorts: hemisphere × three
/// anterior-posterior lobes × superior/inferior, inside an inscribed ellipsoid.
pub fn synthetic_atlas(dims: [usize; 3]) -> AtlasVolume {
    let [s, h, w] = dims;
    let lobes = ["frontal", "central", "occipital"];
    let mut regions = BTreeMap::new();
    for (hi, hemi) in ["L", "R"].iter().enumerate() {
        for (li, lobe) in lobes.iter().enumerate() {
            for (vi, vert) in ["sup", "inf"].iter().enumerate() {
                let label = (hi * 6 + li * 2 + vi + 1) as i32;
                regions.insert(label, (format!("{hemi}_{lobe}_{vert}"), lobe.to_string()));
            }
        }
    }
    let mut labels = Vec::with_capacity(s * h * w);
    let centre = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    for i in 0..s {
        for j in 0..h {
            for k in 0..w {
                let (u, v, t) = (centre(i, s), centre(j, h), centre(k, w));
                if u * u + v * v + t * t > 1.0 {
                    labels.push(0);
                    continue;
                }
                let hemi = usize::from(u >= 0.0);
                let lobe = ((k * 3) / w).min(2);
                let vert = usize::from(v >= 0.0);
                labels.push((hemi * 6 + lobe * 2 + vert + 1) as i32);
            }
        }
    }
    AtlasVolume { dims, labels, regions }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoiScore {
    pub group: String,
    pub mean_intensity: f64,
    pub voxel_count: usize,
}

/// Group scores sorted by descending intensity, plus whether the atlas had to
/// be resampled onto the attention grid.
pub fn roi_scores(volume: &AttentionVolume, atlas: &AtlasVolume) -> Result<(Vec<RoiScore>, bool)> {
    atlas.validate()?;
    let (s, h, w) = volume.a.dim();
    let resampled = atlas.dims != [s, h, w];
    let owned;
    let atlas = if resampled {
        log::info!("resampling atlas {:?} onto attention grid {:?}", atlas.dims, [s, h, w]);
        owned = atlas.resample([s, h, w]);
        &owned
    } else {
        atlas
    };
    let mut region_sums: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for (&label, &v) in atlas.labels.iter().zip(volume.a.iter()) {
        if label != 0 {
            let e = region_sums.entry(label).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    if region_sums.is_empty() {
        return Err(invalid("atlas has no nonzero labels on the attention grid"));
    }
    let mut groups: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (label, (sum, count)) in &region_sums {
        let mean = sum / *count as f64;
        let group = atlas.regions[label].1.as_str();
        let e = groups.entry(group).or_insert((0.0, 0));
        e.0 += mean * *count as f64;
        e.1 += count;
    }
    let mut scores: Vec<RoiScore> = groups
        .into_iter()
        .map(|(g, (weighted, count))| RoiScore {
            group: g.to_string(),
            mean_intensity: weighted / count as f64,
            voxel_count: count,
        })
        .collect();
    scores.sort_by(|a, b| b.mean_intensity.total_cmp(&a.mean_intensity).then_with(|| a.group.cmp(&b.group)));
    Ok((scores, resampled))
}

pub fn write_roi_csv(scores: &[RoiScore], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "mean_intensity", "voxel_count"])?;
    for s in scores {
        w.write_record([s.group.clone(), s.mean_intensity.to_string(), s.voxel_count.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn heat_colour(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(0.0, 1.0);
    let r = (v * 2.0).min(1.0);
    let g = (v * 2.0 - 1.0).clamp(0.0, 1.0);
    ((r * 255.0).round() as u8, (g * 255.0).round() as u8, (g * 64.0).round() as u8)
}

/// SVG montage of `panels` evenly spaced slices, block-averaged to at most
/// `max_cells` cells per side.
pub fn montage_svg(volume: &AttentionVolume, panels: usize, max_cells: usize) -> String {
    let (s, h, w) = volume.a.dim();
    let panels = panels.clamp(1, s.max(1));
    let step_h = h.div_ceil(max_cells.max(1)).max(1);
    let step_w = w.div_ceil(max_cells.max(1)).max(1);
    let (ch, cw) = (h.div_ceil(step_h), w.div_ceil(step_w));
    let cell = 4;
    let pad = 8;
    let width = panels * (cw * cell + pad) + pad;
    let height = ch * cell + 2 * pad + 14;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="black"/>"#);
    for p in 0..panels {
        let slice = if panels == 1 { s / 2 } else { p * (s - 1) / (panels - 1) };
        let x0 = pad + p * (cw * cell + pad);
        let _ = writeln!(
            svg,
            r#"<text x="{x0}" y="{}" fill="white" font-size="10" font-family="monospace">slice {slice}</text>"#,
            pad + 8
        );
        let plane = volume.a.index_axis(Axis(0), slice);
        for by in 0..ch {
            for bx in 0..cw {
                let block = plane.slice(ndarray::s![
                    by * step_h..((by + 1) * step_h).min(h),
                    bx * step_w..((bx + 1) * step_w).min(w)
                ]);
                let (r, g, b) = heat_colour(block.mean().unwrap_or(0.0));
                let _ = writeln!(
                    svg,
                    r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})"/>"#,
                    x0 + bx * cell,
                    pad + 14 + by * cell
                );
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize01(&array![2.0, 4.0, 6.0]), array![0.0, 0.5, 1.0]);
        assert_eq!(normalize01(&array![3.0, 3.0]), array![0.0, 0.0]);
        let x = array![0.0, 0.3, 1.0];
        assert_eq!(normalize01(&x), x);
    }

    #[test]
    fn bilinear_midpoint() {
        let g = array![[0.0, 1.0], [1.0, 0.0]];
        let up = bilinear_resize(g.view(), (3, 3)).unwrap();
        assert!((up[[1, 1]] - 0.5).abs() < 1e-12);
        assert_eq!(bilinear_resize(g.view(), (2, 2)).unwrap(), g);
        let flat = upsample_heatmap(Array2::from_elem((2, 2), 0.7).view(), (5, 5)).unwrap();
        assert!(flat.iter().all(|&v| v == 0.0));
        assert!(bilinear_resize(Array2::zeros((0, 2)).view(), (2, 2)).is_err());
    }

    #[test]
    fn patch_importance_basis_case() {
        let p = Array2::eye(4);
        let g = array![0.0, 0.0, 1.0, 0.0];
        assert_eq!(patch_importance(p.view(), g.view()).unwrap(), g);
        assert!(patch_importance(p.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn fuse_identity_and_annihilator() {
        let a = array![0.1, 0.9, 0.4];
        assert_eq!(fuse_maps(Array1::ones(3).view(), a.view()).unwrap(), a);
        assert!(fuse_maps(Array1::zeros(3).view(), a.view()).unwrap().iter().all(|&v| v == 0.0));
        assert!(fuse_maps(a.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn roi_weighted_group() {
        let mut regions = BTreeMap::new();
        regions.insert(1, ("a".to_string(), "g".to_string()));
        regions.insert(2, ("b".to_string(), "g".to_string()));
        let labels: Vec<i32> = (0..400).map(|i| if i < 100 { 1 } else { 2 }).collect();
        let atlas = AtlasVolume::new([1, 20, 20], labels, regions).unwrap();
        let a = Array3::from_shape_fn((1, 20, 20), |(_, y, x)| if y * 20 + x < 100 { 1.0 } else { 0.0 });
        let (scores, resampled) = roi_scores(&AttentionVolume { a, subjects: 1 }, &atlas).unwrap();
        assert!(!resampled);
        assert_eq!(scores.len(), 1);
        assert!((scores[0].mean_intensity - 0.25).abs() < 1e-12);
        assert_eq!(scores[0].voxel_count, 400);
    }

    #[test]
    fn empty_atlas_is_an_error() {
        let atlas = AtlasVolume::new([1, 2, 2], vec![0; 4], BTreeMap::new()).unwrap();
        let vol = AttentionVolume { a: Array3::zeros((1, 2, 2)), subjects: 1 };
        assert!(roi_scores(&vol, &atlas).is_err());
    }

    #[test]
    fn band_assignment() {
        let edges: Vec<f64> = (1..=9).map(|k| k as f64 * 10.0).collect();
        assert_eq!(band_index(10.0, &edges), Some(0));
        assert_eq!(band_index(19.99, &edges), Some(0));
        assert_eq!(band_index(20.0, &edges), Some(1));
        assert_eq!(band_index(90.0, &edges), Some(7));
        assert_eq!(band_index(90.5, &edges), None);
        assert_eq!(band_index(5.0, &edges), None);
    }

    #[test]
    fn synthetic_atlas_labels_are_named() {
        let atlas = synthetic_atlas([8, 12, 12]);
        atlas.validate().unwrap();
        assert!(atlas.labels.iter().any(|&l| l == 0));
        assert_eq!(atlas.regions.len(), 12);
    }

    #[test]
    fn montage_is_svg() {
        let vol = AttentionVolume { a: Array3::from_elem((4, 6, 6), 0.5), subjects: 1 };
        let svg = montage_svg(&vol, 3, 32);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
