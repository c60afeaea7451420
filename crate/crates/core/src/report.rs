//! Evaluation of run artifacts against ground truth, and heatmap rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::metrics::{auroc, average_precision, f1_max, pixel_metrics, ScoredMask};
use crate::pipeline::{PipelineError, RunSummary, ScoresFile, MAPS_DIR, PLOTS_DIR};
use crate::tensor_io::{load_tensor, DatasetManifest, Label, TensorFile};

pub const PRO_LIMIT: f64 = 0.30;

/// Metric names, in report order.
pub const METRIC_NAMES: [&str; 7] = [
    "AUROC-cls",
    "F1-max-cls",
    "AP-cls",
    "AUROC-seg",
    "F1-max-seg",
    "AP-seg",
    "PRO@30%",
];

/// One sample's score, label and (optionally) dense map with mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub label: bool,
    pub score: f64,
    pub map: Option<Vec<f64>>,
    pub mask: Option<Vec<bool>>,
    pub height: usize,
    pub width: usize,
}

/// Every metric that is defined on `samples`; undefined ones are omitted.
pub fn compute_metrics(samples: &[EvalSample]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let mut put = |name: &str, v: Result<f64, crate::metrics::MetricError>| match v {
        Ok(v) => {
            out.insert(name.to_string(), v);
        }
        Err(e) => log::warn!("{name} undefined: {e}"),
    };
    put("AUROC-cls", auroc(&scores, &labels));
    put("F1-max-cls", f1_max(&scores, &labels));
    put("AP-cls", average_precision(&scores, &labels));
    let dense: Vec<ScoredMask<'_>> = samples
        .iter()
        .filter_map(|s| match (&s.map, &s.mask) {
            (Some(map), Some(mask)) if map.len() == mask.len() => Some(ScoredMask {
                scores: map,
                mask,
                height: s.height,
                width: s.width,
            }),
            _ => None,
        })
        .collect();
    if dense.is_empty() {
        log::warn!("no pixel maps with masks; segmentation metrics skipped");
        return out;
    }
    match pixel_metrics(&dense, PRO_LIMIT) {
        Ok(m) => {
            out.insert("AUROC-seg".into(), m.auroc);
            out.insert("F1-max-seg".into(), m.f1_max);
            out.insert("AP-seg".into(), m.ap);
            out.insert("PRO@30%".into(), m.pro);
        }
        Err(e) => log::warn!("segmentation metrics undefined: {e}"),
    }
    out
}

fn load_mask(manifest: &DatasetManifest, path: &Path) -> Result<(Vec<bool>, usize, usize), PipelineError> {
    let t = load_tensor(manifest.resolve(path))?;
    let shape = t.shape().to_vec();
    if shape.len() != 2 {
        return Err(PipelineError::MissingArtifacts(format!("mask {} is not H x W", path.display())));
    }
    Ok((t.as_u8()?.iter().map(|&v| v != 0).collect(), shape[0], shape[1]))
}

/// Pairs a run's scores and maps with the dataset's labels and masks.
pub fn load_eval_samples(run_dir: &Path, manifest: &DatasetManifest) -> Result<Vec<EvalSample>, PipelineError> {
    let scores_path = run_dir.join("scores.json");
    let text = fs::read_to_string(&scores_path)
        .map_err(|_| PipelineError::MissingArtifacts(format!("{} not found", scores_path.display())))?;
    let scores: ScoresFile = serde_json::from_str(&text)?;
    let mut out = Vec::with_capacity(scores.samples.len());
    for rec in &scores.samples {
        let entry = manifest
            .samples
            .iter()
            .find(|s| s.sample_id == rec.sample_id)
            .ok_or_else(|| PipelineError::MissingArtifacts(format!("sample {} not in dataset", rec.sample_id)))?;
        let mask = entry.mask_path.as_ref().map(|p| load_mask(manifest, p)).transpose()?;
        let label = match entry.label {
            Label::Anomalous => true,
            Label::Normal => false,
            Label::Unknown => mask.as_ref().is_some_and(|(m, _, _)| m.iter().any(|&v| v)),
        };
        let map_path = run_dir.join(MAPS_DIR).join(format!("{}.mt", rec.sample_id));
        let map = load_tensor(&map_path)
            .map_err(|_| PipelineError::MissingArtifacts(format!("{} not found", map_path.display())))?;
        let (map, height, width) = match (map.shape(), &mask) {
            ([h, w], Some((_, mh, mw))) if (h, w) == (mh, mw) => {
                (Some(map.as_f32()?.iter().map(|&v| v as f64).collect()), *h, *w)
            }
            _ => (None, 0, 0),
        };
        out.push(EvalSample {
            label,
            score: rec.c_hat,
            map,
            mask: mask.map(|(m, _, _)| m),
            height,
            width,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub modality: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
}

/// Mean and sample standard deviation of every metric over several runs.
pub fn aggregate_runs(dataset: &str, modality: &str, runs: &[BTreeMap<String, f64>]) -> Vec<MetricRow> {
    METRIC_NAMES
        .iter()
        .filter_map(|&name| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.get(name).copied()).collect();
            if vals.is_empty() {
                return None;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Some(MetricRow {
                dataset: dataset.to_string(),
                modality: modality.to_string(),
                metric: name.to_string(),
                mean,
                std,
                n_runs: vals.len(),
            })
        })
        .collect()
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("dataset,modality,metric,mean,std,n_runs\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{:.6},{}", r.dataset, r.modality, r.metric, r.mean, r.std, r.n_runs);
    }
    s
}

/// Evaluates one or more run directories over the same dataset.
pub fn evaluate_runs(run_dirs: &[PathBuf], manifest: &DatasetManifest) -> Result<Vec<MetricRow>, PipelineError> {
    if run_dirs.is_empty() {
        return Err(PipelineError::MissingArtifacts("no run directories given".into()));
    }
    let mut runs = Vec::with_capacity(run_dirs.len());
    let mut modality = String::from("unknown");
    for dir in run_dirs {
        if let Ok(text) = fs::read_to_string(dir.join("summary.json")) {
            if let Ok(summary) = serde_json::from_str::<RunSummary>(&text) {
                modality = summary.modality;
            }
        }
        runs.push(compute_metrics(&load_eval_samples(dir, manifest)?));
    }
    let name = if manifest.name.is_empty() { "dataset" } else { &manifest.name };
    Ok(aggregate_runs(name, &modality, &runs))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    #[default]
    Turbo,
    Gray,
}

impl std::str::FromStr for Colormap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "turbo" => Ok(Self::Turbo),
            "gray" => Ok(Self::Gray),
            other => Err(format!("unknown colormap {other:?} (expected turbo or gray)")),
        }
    }
}

/// Polynomial fit of the Turbo colormap.
fn turbo(x: f64) -> [u8; 3] {
    let x = x.clamp(0.0, 1.0);
    let r = 0.13572138 + x * (4.61539260 + x * (-42.66032258 + x * (132.13108234 + x * (-152.94239396 + x * 59.28637943))));
    let g = 0.09140261 + x * (2.19418839 + x * (4.84296658 + x * (-14.18503333 + x * (4.27729857 + x * 2.82956604))));
    let b = 0.10667330 + x * (12.64194608 + x * (-60.58204836 + x * (110.36276771 + x * (-89.90310912 + x * 27.34824973))));
    [r, g, b].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Min-max normalized heatmap; mask boundary pixels are drawn white.
pub fn heatmap_png(values: &[f32], height: usize, width: usize, cmap: Colormap, contour: Option<&[bool]>) -> RgbImage {
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo) as f64;
    let mut img = RgbImage::new(width as u32, height as u32);
    for (i, &v) in values.iter().enumerate() {
        let x = if span > 0.0 { (v - lo) as f64 / span } else { 0.0 };
        let px = match cmap {
            Colormap::Turbo => turbo(x),
            Colormap::Gray => [(x * 255.0).round() as u8; 3],
        };
        img.put_pixel((i % width) as u32, (i / width) as u32, Rgb(px));
    }
    if let Some(mask) = contour.filter(|m| m.len() == height * width) {
        for i in 0..mask.len() {
            let (r, c) = (i / width, i % width);
            let inside = |rr: isize, cc: isize| {
                rr >= 0 && cc >= 0 && (rr as usize) < height && (cc as usize) < width && mask[rr as usize * width + cc as usize]
            };
            let (ri, ci) = (r as isize, c as isize);
            if mask[i] && !(inside(ri - 1, ci) && inside(ri + 1, ci) && inside(ri, ci - 1) && inside(ri, ci + 1)) {
                img.put_pixel(c as u32, r as u32, Rgb([255, 255, 255]));
            }
        }
    }
    img
}

/// Renders every pixel-space map of a run to `plots/<id>.png`.
pub fn plot_run(run_dir: &Path, manifest: Option<&DatasetManifest>, cmap: Colormap) -> Result<Vec<PathBuf>, PipelineError> {
    let maps_dir = run_dir.join(MAPS_DIR);
    let mut entries: Vec<PathBuf> = fs::read_dir(&maps_dir)
        .map_err(|_| PipelineError::MissingArtifacts(format!("{} not found", maps_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mt"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(PipelineError::MissingArtifacts(format!("no maps in {}", maps_dir.display())));
    }
    let out_dir = run_dir.join(PLOTS_DIR);
    fs::create_dir_all(&out_dir)?;
    let mut written = Vec::new();
    for path in entries {
        let t: TensorFile = load_tensor(&path)?;
        let [h, w] = *t.shape() else {
            log::warn!("{} is not a pixel map; skipped", path.display());
            continue;
        };
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mask = manifest
            .and_then(|m| m.samples.iter().find(|s| s.sample_id == id).map(|s| (m, s)))
            .and_then(|(m, s)| s.mask_path.as_ref().map(|p| load_mask(m, p)))
            .transpose()?
            .map(|(m, _, _)| m);
        let img = heatmap_png(t.as_f32()?, h, w, cmap, mask.as_deref());
        let out = out_dir.join(format!("{id}.png"));
        img.save(&out).map_err(|e| PipelineError::Io(std::io::Error::other(e)))?;
        written.push(out);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_uniform() {
        let img = heatmap_png(&[0.4; 12], 3, 4, Colormap::Turbo, None);
        let first = *img.get_pixel(0, 0);
        assert!(img.pixels().all(|p| *p == first));
        assert_eq!(img.dimensions(), (4, 3));
    }

    #[test]
    fn spike_is_single_bright_pixel() {
        let mut v = vec![0.0f32; 25];
        v[12] = 1.0;
        let img = heatmap_png(&v, 5, 5, Colormap::Gray, None);
        let bright: Vec<_> = img.enumerate_pixels().filter(|(_, _, p)| p.0[0] > 0).collect();
        assert_eq!(bright.len(), 1);
        assert_eq!((bright[0].0, bright[0].1), (2, 2));
    }

    #[test]
    fn contour_outlines_mask() {
        let mask: Vec<bool> = (0..25).map(|i| (1..4).contains(&(i / 5)) && (1..4).contains(&(i % 5))).collect();
        let img = heatmap_png(&[0.0; 25], 5, 5, Colormap::Gray, Some(&mask));
        assert_eq!(img.get_pixel(1, 1).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(2, 2).0, [0, 0, 0]);
    }

    fn blob_samples(n: usize, seed: u64) -> Vec<EvalSample> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let side = 32;
        (0..n)
            .map(|i| {
                let anomalous = i % 2 == 0;
                let (r0, c0) = (rng.random_range(0..side - 4), rng.random_range(0..side - 4));
                let mask: Vec<bool> = (0..side * side)
                    .map(|p| anomalous && (r0..r0 + 4).contains(&(p / side)) && (c0..c0 + 4).contains(&(p % side)))
                    .collect();
                let map: Vec<f64> = mask.iter().map(|&m| rng.random_range(0.0..0.5) + if m { 1.0 } else { 0.0 }).collect();
                EvalSample {
                    label: anomalous,
                    score: map.iter().cloned().fold(0.0, f64::max),
                    map: Some(map),
                    mask: Some(mask),
                    height: side,
                    width: side,
                }
            })
            .collect()
    }

    #[test]
    fn perfect_run_scores_one() {
        let m = compute_metrics(&blob_samples(10, 1));
        assert_eq!(m.len(), METRIC_NAMES.len());
        for (name, v) in &m {
            assert!((v - 1.0).abs() < 1e-12, "{name} = {v}");
        }
    }

    #[test]
    fn shuffled_maps_are_near_chance() {
        let mut samples = blob_samples(40, 2);
        let maps: Vec<_> = samples.iter().map(|s| s.map.clone()).collect();
        for (i, s) in samples.iter_mut().enumerate() {
            s.map = maps[(i + 7) % maps.len()].clone();
        }
        let auroc = compute_metrics(&samples)["AUROC-seg"];
        assert!((auroc - 0.5).abs() <= 0.05, "{auroc}");
    }

    #[test]
    fn aggregate_mean_std() {
        let runs: Vec<BTreeMap<String, f64>> = [0.8, 0.9, 1.0]
            .iter()
            .map(|&v| BTreeMap::from([("AUROC-cls".to_string(), v)]))
            .collect();
        let rows = aggregate_runs("d", "2d", &runs);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mean - 0.9).abs() < 1e-12);
        assert!((rows[0].std - 0.1).abs() < 1e-12);
        assert!(metrics_csv(&rows).starts_with("dataset,modality,metric,mean,std,n_runs\nd,2d,AUROC-cls,0.900000"));
    }
}
