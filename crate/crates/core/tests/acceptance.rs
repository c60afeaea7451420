//! Acceptance criteria, each printed as one PASS/FAIL line.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use musc_core::anomaly_maps::{idw_interpolate, IdwParams};
use musc_core::geometry3d::{
    build_groups, farthest_point_sample, ipg_regroup, knn_group, lexicographic_seed, GroupParams, PointCloud,
};
use musc_core::metrics::{auroc, average_precision, f1_max, pro_at_fpr, RegionSet, ScoredMask};
use musc_core::msm::{cae_enhance, interval_average, mutual_score, partition_subsets, rescale_to_range, ScoreSet};
use musc_core::pipeline::{self, prepare, score_partition, PairCache, PipelineConfig, Prepared, SampleResult};
use musc_core::rescon::{combine_features, rescon, rescore, similarity_graph, window_mask, WindowMask};
use musc_core::snamd::{aggregate_stack, mean_pool, neighborhood_2d, swpool, PatchFeatureStack};
use musc_core::synth_bench::{generate_synthetic_dataset, SynthConfig};
use musc_core::tensor_io::{load_tensor, DatasetManifest};
use musc_core::Matrix;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud<f64> {
    PointCloud::new((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn by_distance(points: &[[f64; 3]], q: &[f64; 3]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| d2(&points[a], q).total_cmp(&d2(&points[b], q)).then(a.cmp(&b)));
    idx
}

fn oracle_knn(points: &[[f64; 3]], center: usize, k: usize) -> Vec<usize> {
    let mut out = vec![center];
    out.extend(by_distance(points, &points[center]).into_iter().filter(|&i| i != center).take(k - 1));
    out
}

fn oracle_fps(points: &[[f64; 3]], m: usize) -> Vec<usize> {
    let seed = (0..points.len())
        .min_by(|&a, &b| {
            let (p, q) = (points[a], points[b]);
            p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1])).then(p[2].total_cmp(&q[2])).then(a.cmp(&b))
        })
        .unwrap();
    let mut chosen = vec![seed];
    while chosen.len() < m {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| d2(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

fn oracle_ipg(points: &[[f64; 3]], center: usize, k_p: usize, k_iter: usize) -> Vec<usize> {
    let mut members = oracle_knn(points, center, k_iter);
    while members.len() < k_p {
        let mut cand: Vec<(f64, usize)> = (0..points.len())
            .filter(|i| !members.contains(i))
            .map(|i| (members.iter().map(|&m| d2(&points[i], &points[m])).fold(f64::INFINITY, f64::min), i))
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let take = k_iter.min(k_p - members.len());
        members.extend(cand[..take].iter().map(|c| c.1));
    }
    members
}

fn oracle_idw(centers: &[[f64; 3]], scores: &[f64], q: &[f64; 3], p: IdwParams) -> f64 {
    let near: Vec<usize> = by_distance(centers, q).into_iter().take(p.k_nn).collect();
    if let Some(&hit) = near.iter().find(|&&c| d2(&centers[c], q) == 0.0) {
        return scores[hit];
    }
    let w: Vec<f64> = near.iter().map(|&c| 1.0 / (d2(&centers[c], q).sqrt().powf(p.power) + p.epsilon)).collect();
    let v = near.iter().zip(&w).map(|(&c, w)| w * scores[c]).sum::<f64>() / w.iter().sum::<f64>();
    let lo = near.iter().map(|&c| scores[c]).fold(f64::INFINITY, f64::min);
    let hi = near.iter().map(|&c| scores[c]).fold(f64::NEG_INFINITY, f64::max);
    v.clamp(lo, hi)
}

fn oracle_swpool_stack(feat: &Matrix<f64>, side: usize, degrees: &[usize]) -> Vec<Vec<f64>> {
    let c = feat.cols();
    (0..side * side)
        .map(|p| {
            let (pr, pc) = ((p / side) as i64, (p % side) as i64);
            let mut out = vec![0.0; c];
            for &r in degrees {
                let h = (r / 2) as i64;
                let mut acc = vec![0.0; c];
                let mut count = 0.0;
                for q in 0..side * side {
                    let (qr, qc) = ((q / side) as i64, (q % side) as i64);
                    if (qr - pr).abs() > h || (qc - pc).abs() > h {
                        continue;
                    }
                    let dist = (0..c).map(|k| (feat.get(q, k) - feat.get(p, k)).powi(2)).sum::<f64>().sqrt();
                    let w = (-dist).exp();
                    for k in 0..c {
                        acc[k] += w * feat.get(q, k);
                    }
                    count += 1.0;
                }
                for k in 0..c {
                    out[k] += acc[k] / count / degrees.len() as f64;
                }
            }
            out
        })
        .collect()
}

fn oracle_rescore(c: &[f64], w: &Matrix<f64>, k: usize) -> Vec<f64> {
    let n = c.len();
    (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| w.get(i, b).total_cmp(&w.get(i, a)).then(a.cmp(&b)));
            others.truncate(k);
            let mass: f64 = others.iter().map(|&j| w.get(i, j)).sum();
            if mass <= 0.0 {
                return c[i];
            }
            let neigh: f64 = others.iter().map(|&j| w.get(i, j) * c[j]).sum::<f64>() / mass;
            0.5 * (c[i] + neigh)
        })
        .collect()
}

fn nonneg_similarity(n: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let mut w = Matrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            // a share of exact zeros exercises isolated rows
            let v = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) };
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    w
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reps = 100;
    let mut checked = 0usize;

    for t in 0..reps {
        let side = rng.random_range(2..=5);
        let channels = rng.random_range(1..=16);
        let stages = rng.random_range(1..=3);
        let stack = |rng: &mut ChaCha8Rng| {
            PatchFeatureStack::image((0..stages).map(|_| random_matrix(side * side, channels, rng).cast::<f32>()).collect())
                .unwrap()
        };
        let query = stack(&mut rng);
        let gallery: Vec<PatchFeatureStack<f32>> = (0..rng.random_range(1..=5)).map(|_| stack(&mut rng)).collect();
        let refs: Vec<(usize, &PatchFeatureStack<f32>)> = gallery.iter().enumerate().map(|(j, g)| (j * 3, g)).collect();
        let sets = mutual_score(&query, &refs).map_err(|e| e.to_string())?;
        for s in 0..stages {
            for m in 0..side * side {
                for (j, g) in gallery.iter().enumerate() {
                    let want = (0..side * side)
                        .map(|q| {
                            (0..channels)
                                .map(|c| (query.stages[s].get(m, c) as f64 - g.stages[s].get(q, c) as f64).powi(2))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min);
                    let got = sets.set(s, m)[j] as f64;
                    ensure(rel_close(got, want, 1e-5), || format!("mutual_score #{t}: {got} vs {want}"))?;
                }
            }
        }
        checked += 1;
    }

    for t in 0..reps {
        let n = rng.random_range(1..=32);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0f64) * 8.0).round() / 8.0).collect();
        let sources: Vec<usize> = {
            let mut s: Vec<usize> = (0..n).map(|i| i * 7 % 97).collect();
            s.reverse();
            s
        };
        let x: u32 = rng.random_range(1..=100);
        let got = interval_average(&ScoreSet::new(sources.clone(), scores.clone()).unwrap(), x as f64).unwrap();
        let k = ((x as usize * n) / 100).max(1);
        let mut pairs: Vec<(f64, usize)> = scores.into_iter().zip(sources).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let want = pairs[..k].iter().map(|p| p.0).sum::<f64>() / k as f64;
        ensure(rel_close(got, want, 1e-5), || format!("interval_average #{t}: {got} vs {want}"))?;
        checked += 1;
    }

    for t in 0..reps {
        let n = rng.random_range(1..=32);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..5.0)).collect();
        let got = cae_enhance(&a, &rescale_to_range(&raw, &a)).unwrap();
        let (amin, amax) = a.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let (rmin, rmax) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let p: Vec<f64> = raw
            .iter()
            .map(|&v| if rmax > rmin { amin + (v - rmin) / (rmax - rmin) * (amax - amin) } else { amin })
            .collect();
        let mean = p.iter().sum::<f64>() / n as f64;
        let std = (p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let lambda = (1.0 - std).clamp(0.0, 1.0);
        for i in 0..n {
            let want = a[i] + lambda * p[i].max(a[i]);
            ensure(rel_close(got[i], want, 1e-5), || format!("cae_enhance #{t}[{i}]: {} vs {want}", got[i]))?;
        }
        checked += 1;
    }

    for t in 0..reps {
        let n = rng.random_range(2..=32);
        let w = nonneg_similarity(n, &mut rng);
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let k = rng.random_range(1..n);
        let got = rescore(&c, &w, &window_mask(&w, k).unwrap()).unwrap().scores;
        let want = oracle_rescore(&c, &w, k);
        for i in 0..n {
            ensure(rel_close(got[i], want[i], 1e-5), || format!("rescore #{t}[{i}]: {} vs {}", got[i], want[i]))?;
        }
        checked += 1;
    }

    for t in 0..reps {
        let side = rng.random_range(1..=5);
        let channels = rng.random_range(1..=16);
        let feat = random_matrix(side * side, channels, &mut rng);
        let degrees: &[usize] = [&[1usize][..], &[1, 3], &[1, 5], &[1, 3, 5]][t % 4];
        let got = aggregate_stack(&PatchFeatureStack::image(vec![feat.clone()]).unwrap(), degrees).unwrap();
        let want = oracle_swpool_stack(&feat, side, degrees);
        for (p, row) in want.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let g = got.stages[0].get(p, c);
                ensure(rel_close(g, v, 1e-5), || format!("swpool #{t} patch {p}: {g} vs {v}"))?;
            }
        }
        checked += 1;
    }

    for t in 0..reps {
        let n = rng.random_range(12..=64);
        let cloud = random_cloud(n, &mut rng);
        let pts = cloud.points();
        let k_iter = rng.random_range(1..=8);
        let k_p = rng.random_range(k_iter + 1..=n.min(32));
        let center = rng.random_range(0..n);
        let got = ipg_regroup(&cloud, center, k_p, k_iter).unwrap().member_indices;
        let want = oracle_ipg(pts, center, k_p, k_iter);
        ensure(got == want, || format!("ipg_regroup #{t}: {got:?} vs {want:?}"))?;

        let m = rng.random_range(1..=n.min(32));
        let got = farthest_point_sample(&cloud, m, lexicographic_seed(&cloud)).unwrap();
        let want = oracle_fps(pts, m);
        ensure(got == want, || format!("FPS #{t}: {got:?} vs {want:?}"))?;

        let k = rng.random_range(1..=n);
        let got = knn_group(&cloud, center, k).unwrap();
        let want = oracle_knn(pts, center, k);
        ensure(got == want, || format!("KNN #{t}: {got:?} vs {want:?}"))?;

        let g = rng.random_range(1..=n.min(32));
        let centers: Vec<[f64; 3]> = pts[..g].to_vec();
        let scores: Vec<f64> = (0..g).map(|_| rng.random_range(0.0..2.0)).collect();
        let params = IdwParams::default();
        let got = idw_interpolate(&centers, &scores, pts, params).unwrap();
        for (i, q) in pts.iter().enumerate() {
            let want = oracle_idw(&centers, &scores, q, params);
            ensure(rel_close(got[i], want, 1e-5), || format!("IDW #{t} point {i}: {} vs {want}", got[i]))?;
        }
        checked += 4;
    }

    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{checked} instances across 9 kernels in {secs:.2}s"))
}

fn matrix_vs_expansion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for t in 0..1000 {
        let n = rng.random_range(2..=50);
        let dim = rng.random_range(2..=12);
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| combine_features(&[(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()]))
            .collect();
        let w = similarity_graph(&Matrix::from_rows(&feats).unwrap()).unwrap();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mask = if t % 5 == 0 {
            WindowMask::full(n)
        } else {
            window_mask(&w, rng.random_range(1..n)).unwrap()
        };
        let got = rescore(&c, &w, &mask).unwrap().scores;
        for i in 0..n {
            let mass: f64 = mask.neighbors[i].iter().map(|&j| w.get(i, j)).sum();
            let want = if mass > 0.0 {
                c[i] / 2.0 + mask.neighbors[i].iter().map(|&j| w.get(i, j) / mass * c[j]).sum::<f64>() / 2.0
            } else {
                c[i]
            };
            let err = (got[i] - want).abs();
            worst = worst.max(err);
            ensure(err <= 1e-9, || format!("instance {t} sample {i}: {} vs {want}", got[i]))?;
        }
    }
    Ok(format!("1000 instances, max |diff| {worst:.1e}"))
}

fn surface_separation() -> Outcome {
    let side = 24;
    let gap = 3.0;
    let mut points = Vec::new();
    for z in [0.0, gap] {
        for r in 0..side {
            for c in 0..side {
                points.push([c as f64, r as f64, z]);
            }
        }
    }
    let surface = |i: usize| i / (side * side);
    let cloud = PointCloud::new(points).unwrap();
    let params = GroupParams {
        num_groups: 32,
        group_size: 64,
        k_iter: 6,
        curvature_threshold: 0.01,
    };
    let groups = build_groups(&cloud, params).map_err(|e| e.to_string())?;
    let mixed_knn = groups
        .groups
        .iter()
        .filter(|g| {
            let knn = knn_group(&cloud, g.center_index, params.group_size).unwrap();
            knn.iter().any(|&i| surface(i) != surface(g.center_index))
        })
        .count();
    ensure(mixed_knn > 0, || "no KNN group crosses surfaces".into())?;
    let off_surface: usize = groups
        .groups
        .iter()
        .map(|g| g.member_indices.iter().filter(|&&i| surface(i) != surface(g.center_index)).count())
        .sum();
    ensure(off_surface == 0, || format!("{off_surface} off-surface points in output groups"))?;
    Ok(format!("{mixed_knn}/{} KNN groups mix surfaces, 0 off-surface points after regrouping", groups.groups.len()))
}

fn anti_dilution() -> Outcome {
    let side = 7;
    let center = side * side / 2;
    let prototype = [1.0f64, 0.0];
    let feats: Vec<[f64; 2]> = (0..side * side).map(|p| if p == center { [1.0, 5.0] } else { prototype }).collect();
    let dist = |v: &[f64]| ((v[0] - prototype[0]).powi(2) + (v[1] - prototype[1]).powi(2)).sqrt();
    let mut parts = Vec::new();
    for r in [3, 5] {
        let window = neighborhood_2d(side, center, r).unwrap();
        let sw = swpool(&feats[center], window.iter().map(|&q| &feats[q][..]));
        let avg = mean_pool(window.iter().map(|&q| &feats[q][..]), 2);
        let (d_sw, d_avg) = (dist(&sw), dist(&avg));
        ensure(d_sw > d_avg, || format!("r={r}: swpool {d_sw} <= average {d_avg}"))?;
        parts.push(format!("r={r}: {d_sw:.3} > {d_avg:.3}"));
    }
    Ok(parts.join(", "))
}

fn load_masks(manifest: &DatasetManifest) -> Vec<Vec<bool>> {
    manifest
        .samples
        .iter()
        .map(|s| {
            let t = load_tensor(manifest.resolve(s.mask_path.as_ref().unwrap())).unwrap();
            t.as_u8().unwrap().iter().map(|&v| v != 0).collect()
        })
        .collect()
}

fn seg_auroc(results: &[SampleResult], masks: &[Vec<bool>], keep: impl Fn(usize) -> bool) -> f64 {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in results.iter().filter(|r| keep(r.index)) {
        scores.extend(r.map.values().iter().map(|&v| v as f64));
        labels.extend_from_slice(&masks[r.index]);
    }
    auroc(&scores, &labels).unwrap()
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let (manifest, _) = generate_synthetic_dataset(&cfg, dir.path()).map_err(|e| e.to_string())?;
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    let start = Instant::now();
    pipeline::run(dir.path(), &PipelineConfig::default(), &out, 1).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let samples = musc_core::report::load_eval_samples(&out, &manifest).map_err(|e| e.to_string())?;
    let m = musc_core::report::compute_metrics(&samples);
    let (seg, cls) = (m["AUROC-seg"], m["AUROC-cls"]);
    ensure(seg >= 0.95 && cls >= 0.90 && secs < 300.0, || {
        format!("AUROC-seg {seg:.4}, AUROC-cls {cls:.4}, {secs:.1}s")
    })?;
    Ok(format!("AUROC-seg {seg:.4}, AUROC-cls {cls:.4}, {secs:.1}s on one worker"))
}

fn prepared_synthetic(cfg: &SynthConfig, dir: &Path) -> (Prepared, Vec<Vec<bool>>, PipelineConfig) {
    let (manifest, _) = generate_synthetic_dataset(cfg, dir).unwrap();
    let pcfg = PipelineConfig::default();
    let prepared = prepare(&manifest, &pcfg).unwrap();
    (prepared, load_masks(&manifest), pcfg)
}

fn subset_robustness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        num_samples: 60,
        seed: 6,
        ..SynthConfig::default()
    };
    let (prepared, masks, pcfg) = prepared_synthetic(&cfg, dir.path());
    let cache = PairCache::new(prepared.len());
    let n = prepared.len();
    let auroc_for = |subsets: &[Vec<usize>]| -> f64 {
        let res = score_partition(&prepared, subsets, &pcfg, &cache).unwrap();
        seg_auroc(&res.samples, &masks, |_| true)
    };
    let base = auroc_for(&[(0..n).collect()]);
    let mut parts = vec![format!("g=1 {base:.4}")];
    for g in [2, 3] {
        let mean = (0..10u64).map(|seed| auroc_for(&partition_subsets(n, g, seed).unwrap())).sum::<f64>() / 10.0;
        let drop = base - mean;
        ensure(drop <= 0.02, || format!("g={g}: mean {mean:.4} drops {:.2}pp from {base:.4}", drop * 100.0))?;
        parts.push(format!("g={g} mean {mean:.4}"));
    }
    Ok(parts.join(", "))
}

fn normal_ratio_robustness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        num_samples: 40,
        anomaly_rate: 0.25,
        seed: 8,
        ..SynthConfig::default()
    };
    let (prepared, masks, pcfg) = prepared_synthetic(&cfg, dir.path());
    let anomalous: Vec<usize> = (0..prepared.len()).filter(|&i| masks[i].iter().any(|&m| m)).collect();
    let is_anomalous = |i: usize| anomalous.binary_search(&i).is_ok();
    let cache = PairCache::new(prepared.len());
    let full = score_partition(&prepared, &[(0..prepared.len()).collect()], &pcfg, &cache).unwrap();
    let only = score_partition(&prepared, &[anomalous.clone()], &pcfg, &cache).unwrap();
    let (a, b) = (seg_auroc(&full.samples, &masks, is_anomalous), seg_auroc(&only.samples, &masks, is_anomalous));
    ensure((a - b).abs() <= 0.03, || format!("with normals {a:.4}, without {b:.4}"))?;
    Ok(format!(
        "AUROC-seg on {} anomalous samples: {a:.4} with normals, {b:.4} without",
        anomalous.len()
    ))
}

fn rescon_direction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dim = 8;
    let mut feats = Vec::new();
    let mut c = Vec::new();
    let mut labels = Vec::new();
    let jitter = |base: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        combine_features(&[base.iter().map(|&v| v + rng.random_range(-0.05..0.05)).collect()])
    };
    let mut e1 = vec![0.0; dim];
    e1[0] = 1.0;
    let mut anomaly_dir = vec![0.0; dim];
    anomaly_dir[0] = 0.35;
    anomaly_dir[1] = (1.0f64 - 0.35 * 0.35).sqrt();
    for i in 0..20 {
        feats.push(jitter(&e1, &mut rng));
        // three noisy normals score like anomalies
        c.push(if i % 7 == 3 { 0.65 } else { rng.random_range(0.05..0.2) });
        labels.push(false);
    }
    for score in [0.85, 0.85, 0.45, 0.45] {
        feats.push(jitter(&anomaly_dir, &mut rng));
        c.push(score);
        labels.push(true);
    }
    let features = Matrix::from_rows(&feats).unwrap();
    let before = auroc(&c, &labels).unwrap();
    let masked = rescon(&features, &c, 7).unwrap().scores;
    let after = auroc(&masked, &labels).unwrap();
    let w = similarity_graph(&features).unwrap();
    let unmasked = rescore(&c, &w, &WindowMask::full(c.len())).unwrap().scores;
    let full = auroc(&unmasked, &labels).unwrap();
    ensure(after >= before, || format!("AUROC fell from {before:.4} to {after:.4}"))?;
    ensure(full < after, || format!("all-neighbor AUROC {full:.4} not below k=7 {after:.4}"))?;
    Ok(format!("AUROC {before:.4} -> {after:.4} with k=7, {full:.4} with all neighbors"))
}

fn exhaustive_thresholds(scores: &[f64]) -> Vec<f64> {
    let set: BTreeSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
    let mut t: Vec<f64> = set.into_iter().map(f64::from_bits).collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t
}

fn components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = Vec::new();
        let mut stack = vec![start];
        label[start] = id;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (r, c) = (p / w, p % w);
            let mut nb = Vec::new();
            if r > 0 {
                nb.push(p - w);
            }
            if r + 1 < h {
                nb.push(p + w);
            }
            if c > 0 {
                nb.push(p - 1);
            }
            if c + 1 < w {
                nb.push(p + 1);
            }
            for q in nb {
                if mask[q] && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            }
        }
        out.push(comp);
    }
    out
}

fn metric_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (h, w) = (32, 32);
    let limit = 0.3;
    let instances = 20;
    for t in 0..instances {
        let levels = [4.0, 16.0, 1000.0][t % 3];
        let mut mask = vec![false; h * w];
        for _ in 0..rng.random_range(1..=4) {
            let (r0, c0) = (rng.random_range(0..h - 2), rng.random_range(0..w - 2));
            let (rh, rw) = (rng.random_range(1..=6), rng.random_range(1..=6));
            for r in r0..(r0 + rh).min(h) {
                for c in c0..(c0 + rw).min(w) {
                    mask[r * w + c] = true;
                }
            }
        }
        let scores: Vec<f64> = mask
            .iter()
            .map(|&m| ((rng.random_range(0.0..1.0f64) + if m { 0.4 } else { 0.0 }) * levels).round() / levels)
            .collect();
        let pos: Vec<f64> = scores.iter().zip(&mask).filter(|p| *p.1).map(|p| *p.0).collect();
        let neg: Vec<f64> = scores.iter().zip(&mask).filter(|p| !*p.1).map(|p| *p.0).collect();
        let (np, nn) = (pos.len() as f64, neg.len() as f64);

        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        let want_auroc = wins / (np * nn);

        let regions = components(&mask, h, w);
        let mut want_ap = 0.0;
        let mut want_f1 = 0.0f64;
        let mut prev_recall = 0.0;
        let mut curve = vec![(0.0f64, 0.0f64)];
        for th in exhaustive_thresholds(&scores) {
            let tp = pos.iter().filter(|&&s| s >= th).count() as f64;
            let fp = neg.iter().filter(|&&s| s >= th).count() as f64;
            let (precision, recall) = (tp / (tp + fp), tp / np);
            want_ap += (recall - prev_recall) * precision;
            prev_recall = recall;
            if tp > 0.0 {
                want_f1 = want_f1.max(2.0 * precision * recall / (precision + recall));
            }
            let overlap = regions
                .iter()
                .map(|r| r.iter().filter(|&&p| scores[p] >= th).count() as f64 / r.len() as f64)
                .sum::<f64>()
                / regions.len() as f64;
            curve.push((fp / nn, overlap));
        }
        let mut want_pro = 0.0;
        for win in curve.windows(2) {
            let ((x0, y0), (x1, y1)) = (win[0], win[1]);
            if x0 >= limit {
                break;
            }
            if x1 > limit {
                let y = y0 + (limit - x0) / (x1 - x0) * (y1 - y0);
                want_pro += (limit - x0) * (y0 + y) / 2.0;
                break;
            }
            want_pro += (x1 - x0) * (y0 + y1) / 2.0;
        }
        want_pro /= limit;

        let got_pro = pro_at_fpr(
            &RegionSet::from_samples(&[ScoredMask {
                scores: &scores,
                mask: &mask,
                height: h,
                width: w,
            }])
            .unwrap(),
            limit,
        )
        .unwrap();
        for (name, got, want) in [
            ("AUROC", auroc(&scores, &mask).unwrap(), want_auroc),
            ("AP", average_precision(&scores, &mask).unwrap(), want_ap),
            ("F1-max", f1_max(&scores, &mask).unwrap(), want_f1),
            ("PRO", got_pro, want_pro),
        ] {
            ensure((got - want).abs() <= 1e-6, || format!("instance {t} {name}: {got} vs {want}"))?;
        }
    }
    let ap = average_precision(&[0.9, 0.8, 0.7], &[false, true, true]).unwrap();
    ensure((ap - 7.0 / 12.0).abs() <= 1e-9, || format!("hand AP {ap}"))?;
    Ok(format!("{instances} random 32x32 instances, hand AP = {ap:.9}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        num_samples: 10,
        grid_side: 10,
        anomaly_rate: 0.2,
        seed: 4,
        ..SynthConfig::default()
    };
    generate_synthetic_dataset(&cfg, dir.path()).map_err(|e| e.to_string())?;
    let pcfg = PipelineConfig {
        num_groups: 128,
        group_size: 32,
        k_iter: 16,
        ..PipelineConfig::default()
    };
    let mut reference: Option<Vec<(String, Vec<u8>)>> = None;
    for workers in [1, 4, 8] {
        let out = dir.path().join(format!("run_{workers}"));
        fs::create_dir_all(&out).unwrap();
        pipeline::run(dir.path(), &pcfg, &out, workers).map_err(|e| e.to_string())?;
        let mut maps: Vec<(String, Vec<u8>)> = fs::read_dir(out.join(pipeline::MAPS_DIR))
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
            })
            .collect();
        maps.sort();
        match &reference {
            None => reference = Some(maps),
            Some(r) => ensure(*r == maps, || format!("maps with {workers} workers differ from 1 worker"))?,
        }
    }
    Ok(format!("{} map tensors byte-identical for 1, 4 and 8 workers", reference.unwrap().len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("matrix rescore vs per-sample expansion", matrix_vs_expansion),
        ("IPG surface separation", surface_separation),
        ("SWPooling anti-dilution", anti_dilution),
        ("end-to-end synthetic detection", end_to_end),
        ("subset robustness", subset_robustness),
        ("normal-ratio robustness", normal_ratio_robustness),
        ("RsCon direction", rescon_direction),
        ("metric self-consistency", metric_consistency),
        ("determinism across worker counts", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  criterion {:>2}  {name}: {detail} [{:.1}s]", i + 1, t.elapsed().as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {:>2}  {name}: {detail} [{:.1}s]", i + 1, t.elapsed().as_secs_f64());
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
