//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use pfa_cli::config::image_seed;
use pfa_cli::corpus::{image_id, write_corpus, CorpusSpec};
use pfa_cli::PipelineConfig;
use pfa_core::io::{load_label_map, load_scribbles};
use pfa_core::probmap::{read_probability_map, write_probability_map};
use pfa_core::regularizers::potts_map_with_weights;
use pfa_core::synth::{synth_image, SynthConfig};
use pfa_core::types::simplex_violation;
use pfa_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Criterion = fn() -> Result<String>;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 10] = [
        ("gap arithmetic", gap_arithmetic),
        ("potts oracle", potts_oracle),
        ("mean-field oracle", mean_field_oracle),
        ("kernel arithmetic", kernel_arithmetic),
        ("forest properties", forest_properties),
        ("combination ordering", combination_ordering),
        ("curation", curation),
        ("simplex fuzzing", simplex_fuzzing),
        ("determinism", determinism),
        ("miou oracle", miou_oracle),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let n = k + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(anyhow::anyhow!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} ({secs:.1}s)"),
            Err(e) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {e:#} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_probs(g: PixelGrid, c: usize, rng: &mut ChaCha8Rng) -> ProbabilityMap {
    ProbabilityMap::new(g, c, (0..g.len() * c).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap()
}

fn random_image(g: PixelGrid, palette: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let colors: Vec<[f32; 3]> = (0..palette).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let picks: Vec<usize> = (0..g.len()).map(|_| rng.random_range(0..palette)).collect();
    RgbImage::new(g, picks.iter().map(|&k| colors[k]).collect()).unwrap()
}

fn labels_of(field: &impl ClassField) -> Vec<usize> {
    extract_pfa(field).labels().iter().map(|&l| l as usize).collect()
}

// 1 ------------------------------------------------------------------------

fn gap_arithmetic() -> Result<String> {
    // Rounding slack on top of the half-unit of the last printed digit.
    const TOL: f64 = 0.05 + 1e-9;
    let mut cells = 0;
    let mut bad = Vec::new();
    let mut check = |what: String, got: f64, printed: f64| {
        cells += 1;
        if (got - printed).abs() > TOL {
            bad.push(format!("{what}: printed {printed}, computed {got:.2}"));
        }
    };
    // (weak, strategy, printed full gap, printed remaining gap, printed reduction), full = 71.5.
    let breakdown = [
        ("curated local", 67.1, 61.0, 4.4, 10.5, -138.6),
        ("curated local+potts", 67.1, 63.3, 4.4, 8.2, -70.4),
        ("curated global+potts", 67.1, 67.8, 4.4, 3.7, 15.9),
        ("curated global+crf", 67.1, 68.2, 4.4, 3.3, 25.0),
        ("curated comb", 67.1, 69.2, 4.4, 2.3, 47.7),
        ("curated comb+potts", 67.1, 69.7, 4.4, 1.8, 59.1),
        ("curated comb+crf", 67.1, 70.0, 4.4, 1.5, 65.9),
        ("original comb+potts", 64.3, 68.8, 7.2, 2.7, 62.5),
        ("original comb+crf", 64.3, 69.1, 7.2, 2.4, 66.7),
    ];
    for (row, weak, strategy, full_gap, remaining, reduction) in breakdown {
        let g = gap_report(71.5, weak, strategy)?;
        check(format!("{row} full gap"), g.full_gap, full_gap);
        check(format!("{row} remaining gap"), g.remaining_gap, remaining);
        check(format!("{row} reduction"), g.reduction_pct.context("zero full gap")?, reduction);
    }
    // (full, weak baseline, strategy, printed reduction)
    let comparison = [
        (71.5, 64.3, 69.1, 66.7),
        (76.6, 67.8, 73.0, 59.1),
        (77.0, 69.3, 74.4, 66.2),
        (73.4, 66.4, 70.5, 58.6),
        (77.2, 69.2, 73.5, 53.8),
        (77.5, 70.7, 74.7, 58.8),
        (68.8, 60.4, 62.4, 23.8),
        (68.8, 60.4, 64.4, 47.6),
        (68.8, 60.4, 64.8, 52.4),
        (73.7, 65.6, 70.8, 64.2),
        (75.6, 69.5, 72.8, 54.1),
        (75.6, 69.5, 72.9, 55.7),
        (75.6, 69.5, 73.0, 57.4),
        (77.6, 69.5, 74.5, 62.7),
        (79.2, 71.3, 75.6, 54.4),
        (71.5, 64.3, 65.2, 12.5),
        (71.5, 64.3, 66.4, 29.2),
        (71.5, 64.3, 66.7, 33.3),
        (75.1, 67.6, 72.1, 60.0),
        (76.8, 72.8, 74.5, 42.5),
        (76.8, 72.8, 75.0, 55.0),
        (76.8, 72.8, 75.0, 55.0),
        (77.8, 69.9, 74.6, 59.5),
        (79.4, 71.8, 75.7, 51.3),
    ];
    for (k, (full, weak, strategy, reduction)) in comparison.into_iter().enumerate() {
        let g = gap_report(full, weak, strategy)?;
        check(format!("comparison row {} reduction", k + 1), g.reduction_pct.context("zero full gap")?, reduction);
    }
    ensure!(bad.is_empty(), "{} of {cells} cells off by more than 0.05: {}", bad.len(), bad.join("; "));
    Ok(format!("{cells} cells within 0.05"))
}

// 2 ------------------------------------------------------------------------

/// Discrete Potts energy with unit edge weights, written out per pixel and class.
fn potts_discrete_energy(labels: &[usize], p: &ProbabilityMap, lambda: f64) -> f64 {
    let g = p.grid();
    let (h, w, c) = (g.height(), g.width(), p.num_classes());
    let mut e = 0.0;
    for r in 0..h {
        for col in 0..w {
            let i = r * w + col;
            e -= p.pixel(i)[labels[i]].max(1e-9).ln();
            for k in 0..c {
                let v = (labels[i] == k) as u8 as f64;
                let dx = if col + 1 < w { (labels[i + 1] == k) as u8 as f64 - v } else { 0.0 };
                let dy = if r + 1 < h { (labels[i + w] == k) as u8 as f64 - v } else { 0.0 };
                e += lambda * (dx * dx + dy * dy).sqrt();
            }
        }
    }
    e
}

fn potts_optimum(p: &ProbabilityMap, lambda: f64) -> f64 {
    let (n, c) = (p.grid().len(), p.num_classes());
    let mut labels = vec![0; n];
    (0..c.pow(n as u32))
        .map(|code| {
            let mut x = code;
            for l in labels.iter_mut() {
                *l = x % c;
                x /= c;
            }
            potts_discrete_energy(&labels, p, lambda)
        })
        .fold(f64::INFINITY, f64::min)
}

fn potts_oracle() -> Result<String> {
    let mut rng = rng(2);
    let g = PixelGrid::new(3, 3)?;
    let params = PottsParams::default();
    let instances = 60;
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let p = random_probs(g, 3, &mut rng);
        for lambda in [0.2, 0.5, 1.0] {
            let (m, _) = potts_map_with_weights(&p, &[1.0; 9], lambda, &params)?;
            let got = potts_discrete_energy(&labels_of(&m), &p, lambda);
            let opt = potts_optimum(&p, lambda);
            let excess = (got - opt) / opt;
            worst = worst.max(excess);
            ensure!(got <= opt * 1.02 + 1e-12, "instance {inst}, lambda {lambda}: energy {got} vs optimum {opt}");
        }
        let (m, _) = potts_map_with_weights(&p, &[1.0; 9], 0.0, &params)?;
        ensure!(extract_pfa(&m) == extract_pfa(&p), "instance {inst}: lambda 0 differs from the argmax");
    }
    Ok(format!("{instances} instances x 3 lambdas, worst excess {:.3}%; lambda 0 equals argmax", 100.0 * worst))
}

// 3 ------------------------------------------------------------------------

/// Mean-field updates from `Q = P` with an all-pairs double loop.
fn mean_field_oracle_step(p: &ProbabilityMap, img: &RgbImage, prm: &DenseCrfParams, iters: usize) -> Vec<f64> {
    let g = p.grid();
    let (n, c) = (g.len(), p.num_classes());
    let mut q = p.values().to_vec();
    for _ in 0..iters {
        let mut next = vec![0.0; n * c];
        for i in 0..n {
            let (ri, ci) = g.coords(i);
            let a = img.rgb255(i);
            let mut logits: Vec<f64> = (0..c).map(|k| p.pixel(i)[k].max(prm.eps).ln()).collect();
            for j in 0..n {
                if j == i {
                    continue;
                }
                let (rj, cj) = g.coords(j);
                let d2 = (ri as f64 - rj as f64).powi(2) + (ci as f64 - cj as f64).powi(2);
                let b = img.rgb255(j);
                let c2: f64 = (0..3).map(|t| (a[t] - b[t]).powi(2)).sum();
                let k = prm.w1 * (-d2 / (2.0 * prm.sigma_alpha.powi(2)) - c2 / (2.0 * prm.sigma_beta.powi(2))).exp()
                    + prm.w2 * (-d2 / (2.0 * prm.sigma_gamma.powi(2))).exp();
                for (l, logit) in logits.iter_mut().enumerate() {
                    *logit += k * q[j * c + l];
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            for l in 0..c {
                next[i * c + l] = (logits[l] - max).exp() / z;
            }
        }
        q = next;
    }
    q
}

fn mean_field_oracle() -> Result<String> {
    let mut rng = rng(3);
    let g = PixelGrid::new(4, 4)?;
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for inst in 0..20 {
        let c = 2 + inst % 2;
        let p = random_probs(g, c, &mut rng);
        let img = random_image(g, 3, &mut rng);
        let variants = [
            DenseCrfParams::default(),
            DenseCrfParams {
                sigma_beta: 60.0,
                w1: rng.random_range(0.5..4.0),
                w2: rng.random_range(0.5..4.0),
                ..Default::default()
            },
        ];
        for base in variants {
            let prm = DenseCrfParams { n_iters: 1, tol: 0.0, ..base };
            let (q, _) = crf_mean_field(&p, &img, &prm)?;
            let want = mean_field_oracle_step(&p, &img, &prm, 1);
            let diff = q.values().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff);
            ensure!(diff <= 1e-6, "instance {inst}: max entry difference {diff:e}");
            runs += 1;
        }
        let zero = DenseCrfParams { w1: 0.0, w2: 0.0, ..Default::default() };
        let (q, _) = crf_mean_field(&p, &img, &zero)?;
        ensure!(q.values() == p.values(), "instance {inst}: zero weights changed the map");
    }
    Ok(format!("{runs} single-iteration runs, max deviation {worst:.1e}; zero weights return P exactly"))
}

// 4 ------------------------------------------------------------------------

fn kernel_arithmetic() -> Result<String> {
    let g = PixelGrid::new(1, 2)?;
    let img = RgbImage::constant(g, [0.4, 0.5, 0.6])?;
    let p = ProbabilityMap::new(g, 2, vec![1.0, 0.0, 0.0, 1.0])?;
    let q = SoftMask::from_labels(&LabelMap::new(g, vec![0, 1])?, 2)?;
    let prm = DenseCrfParams { w1: 3.0, sigma_alpha: 30.0, w2: 5.0, sigma_gamma: 2.0, ..Default::default() };
    let got = crf_energy(&q, &p, &img, &prm)?;
    let want = 3.0 * (-1.0f64 / 1800.0).exp() + 5.0 * (-1.0f64 / 8.0).exp();
    ensure!((got - want).abs() <= 1e-6, "energy {got} vs {want}");
    Ok(format!("energy {got:.7}, expected {want:.7}"))
}

// 5 ------------------------------------------------------------------------

/// `n` samples on an n x 1 grid; `f` yields each sample's features and class.
fn samples(
    n: usize,
    depth: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
    f: impl Fn(usize, &mut ChaCha8Rng) -> (Vec<f32>, u8),
) -> Result<(FeatureStack, ScribbleSet)> {
    let grid = PixelGrid::new(n, 1)?;
    let mut data = Vec::with_capacity(n * depth);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = f(i, rng);
        data.extend(x);
        entries.push((i, y));
    }
    Ok((FeatureStack::new(grid, depth, data)?, ScribbleSet::new(grid, &ClassSet::new(classes)?, entries)?))
}

fn forest_properties() -> Result<String> {
    // Separable scribbles over classes 0 and 2 of 3; class 1 is never scribbled.
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let (fs, wa) = samples(300, 5, 3, &mut r, |i, rng| {
            let y = (i % 2) as u8 * 2;
            let informative = if y == 0 { rng.random_range(-3.0..-0.2) } else { rng.random_range(0.2..3.0) };
            (vec![rng.random(), rng.random(), informative, rng.random(), rng.random()], y)
        })?;
        let forest =
            train_forest(&fs, &wa, &ForestConfig { n_trees: 50, n_selected_features: 5, seed, ..Default::default() })?;
        let p = predict_local(&forest, &fs)?;
        let correct = wa.entries().iter().filter(|&&(i, y)| fusion::argmax(p.pixel(i)) == y as usize).count();
        ensure!(correct == wa.len(), "seed {seed}: training accuracy {correct}/{}", wa.len());
        ensure!(p.values().chunks_exact(3).all(|px| px[1] == 0.0), "seed {seed}: unscribbled class has mass");
    }
    let mut first = 0;
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let informative = (seed % 10) as usize;
        let (fs, wa) = samples(200, 10, 2, &mut r, |_, rng| {
            let x: Vec<f32> = (0..10).map(|_| rng.random()).collect();
            let y = (x[informative] > 0.5) as u8;
            (x, y)
        })?;
        let forest =
            train_forest(&fs, &wa, &ForestConfig { n_trees: 30, n_selected_features: 10, seed, ..Default::default() })?;
        let imp = gini_importance(&forest);
        let top = imp.scores[informative];
        if imp.scores.iter().enumerate().all(|(k, &s)| k == informative || s < top) {
            first += 1;
        }
    }
    ensure!(first >= 95, "informative feature ranked first in {first}/100 seeds");
    Ok(format!("accuracy 1.0 on 5 separable sets, unseen class mass exactly 0, informative first in {first}/100 seeds"))
}

// 6 ------------------------------------------------------------------------

fn combination_ordering() -> Result<String> {
    let synth = SynthConfig::default();
    let c = synth.num_classes;
    let variants = [
        (PamSource::Global, Regularizer::None),
        (PamSource::Combined, Regularizer::None),
        (PamSource::Combined, Regularizer::Potts(PottsParams::default())),
    ];
    let (mut both, mut comb_wins, mut potts_wins, mut potts_vs_global) = (0, 0, 0, 0);
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let bank = synthetic_filter_bank(seed);
        let per_image: Vec<Vec<ConfusionMatrix>> = (0..20)
            .into_par_iter()
            .map(|k| -> Result<Vec<ConfusionMatrix>> {
                let s = image_seed(seed, &image_id(k));
                let img = synth_image(&synth, s)?;
                let f = extract_features(&img.image, &bank);
                let forest = select_and_retrain(&f, &img.scribbles, &ForestConfig { seed: s, ..Default::default() })?;
                let local = predict_local(&forest, &f)?;
                variants
                    .iter()
                    .map(|(src, reg)| {
                        let out = pfa_variant(Some(&local), Some(&img.global), &img.image, *src, reg, 0.5)?;
                        let mut conf = ConfusionMatrix::new(c);
                        accumulate_confusion(&out.labels, &img.gt, &mut conf)?;
                        Ok(conf)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let mut totals = vec![ConfusionMatrix::new(c); variants.len()];
        for confs in &per_image {
            for (t, conf) in totals.iter_mut().zip(confs) {
                t.merge(conf)?;
            }
        }
        let m: Vec<f64> = totals.iter().map(|t| miou(t).map(|r| r.miou)).collect::<pfa_core::Result<_>>()?;
        comb_wins += (m[1] > m[0]) as u32;
        potts_wins += (m[2] > m[1]) as u32;
        potts_vs_global += (m[2] >= m[0]) as u32;
        both += (m[1] > m[0] && m[2] > m[1]) as u32;
        lines.push(format!("seed {seed}: global {:.2}, comb {:.2}, comb+potts {:.2}", m[0], m[1], m[2]));
    }
    for l in &lines {
        eprintln!("  {l}");
    }
    ensure!(
        both >= 8,
        "both orderings held on {both}/10 seeds (comb > global {comb_wins}/10, comb+potts > comb {potts_wins}/10)"
    );
    Ok(format!(
        "both orderings on {both}/10 seeds (comb > global {comb_wins}/10, comb+potts > comb {potts_wins}/10, comb+potts >= global {potts_vs_global}/10)"
    ))
}

// 7 ------------------------------------------------------------------------

fn curation() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let spec = CorpusSpec { images: 12, seed: 7, deficient: 3, swap_rate: 0.1, ..Default::default() };
    let manifest = write_corpus(&dir.path().join("corpus"), &spec)?;
    let out = dir.path().join("curated");
    let summary = pfa_cli::curate::curate(&manifest, spec.synth.num_classes, &out)?;
    let dropped: Vec<&str> = summary.dropped.iter().map(|d| d.id.as_str()).collect();
    let expected: Vec<String> = (0..spec.deficient).map(image_id).collect();
    ensure!(dropped == expected, "dropped {dropped:?}, expected {expected:?}");
    ensure!(summary.kept == spec.images - spec.deficient, "kept {} of {}", summary.kept, summary.total);
    ensure!(summary.relabeled_pixels > 0, "no swapped pixels were relabeled");
    let classes = ClassSet::new(spec.synth.num_classes)?;
    let (mut agree, mut total) = (0usize, 0usize);
    for k in spec.deficient..spec.images {
        let id = image_id(k);
        let gt = load_label_map(&dir.path().join("corpus/gt").join(format!("{id}.png")), None)?;
        let wa = load_scribbles(&out.join("scribbles").join(format!("{id}.txt")), gt.grid(), &classes)?;
        total += wa.len();
        agree += wa.entries().iter().filter(|&&(i, y)| gt.get(i) == y).count();
        ensure!(wa.annotated_classes() == &gt.classes_present(), "{id}: curated scribbles miss a class");
    }
    ensure!(agree == total && total > 0, "{agree}/{total} curated scribble pixels agree with ground truth");
    Ok(format!(
        "{}/{} kept, dropped {dropped:?}, {} swapped pixels relabeled, {total}/{total} curated pixels agree",
        summary.kept, summary.total, summary.relabeled_pixels
    ))
}

// 8 ------------------------------------------------------------------------

fn simplex_fuzzing() -> Result<String> {
    const TOL: f64 = 1e-6;
    let mut rng = rng(8);
    let mut pixels = 0usize;
    let mut worst: f64 = 0.0;
    let mut check = |what: &str, field: &dyn Fn() -> f64, n: usize| -> Result<()> {
        let v = field();
        worst = worst.max(v);
        pixels += n;
        ensure!(v <= TOL, "{what}: simplex violation {v:e}");
        Ok(())
    };
    for round in 0..6 {
        let (h, w) = [(50, 50), (37, 61), (64, 80), (1, 90), (90, 1), (71, 71)][round];
        let c = rng.random_range(2..7);
        let g = PixelGrid::new(h, w)?;
        let n = g.len();
        // Raw inputs of wildly different scales, including exact zeros.
        let mut raw: Vec<f64> = (0..n * c)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => rng.random_range(0.0..1e-12),
                2 => rng.random_range(0.0..1e6),
                _ => rng.random(),
            })
            .collect();
        for px in raw.chunks_exact_mut(c) {
            if px.iter().all(|&v| v == 0.0) {
                px[0] = 1.0;
            }
        }
        let p = ProbabilityMap::new(g, c, raw)?;
        check("renormalized input", &|| simplex_violation(&p), n)?;
        let q = random_probs(g, c, &mut rng);
        let comb = combine(&p, &q, rng.random())?;
        check("combine", &|| simplex_violation(&comb), n)?;

        let mut bytes = Vec::new();
        write_probability_map(&mut bytes, &comb)?;
        let back = read_probability_map(bytes.as_slice())?;
        check("PAM round trip", &|| simplex_violation(&back), n)?;

        let labels = LabelMap::new(g, (0..n).map(|_| rng.random_range(0..c as u8)).collect())?;
        let onehot = labelmap_to_onehot(&labels, &ClassSet::new(c)?, rng.random_range(0.0..0.1))?;
        check("labelmap_to_onehot", &|| simplex_violation(&onehot), n)?;
        let mask = SoftMask::from_labels(&labels, c)?;
        check("SoftMask::from_labels", &|| simplex_violation(&mask), n)?;

        let img = random_image(g, 6, &mut rng);
        let potts = PottsParams { lambda: Some(rng.random_range(0.0..20.0)), max_iters: 100, ..Default::default() };
        let (m, _) = potts_map(&comb, &img, &potts)?;
        check("potts_map", &|| simplex_violation(&m), n)?;
        let (cq, _) = crf_mean_field(&comb, &img, &DenseCrfParams { n_iters: 5, ..Default::default() })?;
        check("crf_mean_field", &|| simplex_violation(&cq), n)?;

        let features = extract_features(&img, &synthetic_filter_bank(round as u64));
        let entries: Vec<(usize, u8)> = (0..n).step_by(7).map(|i| (i, labels.get(i))).collect();
        let wa = ScribbleSet::new(g, &ClassSet::new(c)?, entries)?;
        let forest =
            train_forest(&features, &wa, &ForestConfig { n_trees: 10, seed: round as u64, ..Default::default() })?;
        let local = predict_local(&forest, &features)?;
        check("predict_local", &|| simplex_violation(&local), n)?;
    }
    // An image above the exact-kernel cap exercises the approximate CRF path.
    let g = PixelGrid::new(80, 80)?;
    let p = random_probs(g, 4, &mut rng);
    let img = random_image(g, 5, &mut rng);
    let (cq, _) = crf_mean_field(&p, &img, &DenseCrfParams::default())?;
    check("crf_mean_field (approximate)", &|| simplex_violation(&cq), g.len())?;
    ensure!(pixels >= 10_000, "only {pixels} pixels checked");
    Ok(format!("{pixels} pixel checks across 9 operations, worst violation {worst:.1e}"))
}

// 9 ------------------------------------------------------------------------

fn snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root)?.to_path_buf(), std::fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let corpus = dir.path().join("corpus");
    write_corpus(&corpus, &CorpusSpec { images: 20, seed: 9, ..Default::default() })?;
    let cfg = PipelineConfig::load(&corpus.join("config.toml"))?;
    let mut snaps = Vec::new();
    for _ in 0..2 {
        if cfg.run.output_dir.exists() {
            std::fs::remove_dir_all(&cfg.run.output_dir)?;
        }
        let summary = pfa_cli::pipeline::promote(&cfg)?;
        ensure!(summary.all_ok() && summary.num_cached == 0, "run failed or reused cached state");
        snaps.push(snapshot(&cfg.run.output_dir)?);
    }
    let (a, b) = (&snaps[0], &snaps[1]);
    if a != b {
        let differing: Vec<_> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).collect();
        bail!("output trees differ at {differing:?}");
    }
    let bytes: usize = a.values().map(Vec::len).sum();
    Ok(format!("{} files, {bytes} bytes identical across two runs", a.len()))
}

// 10 -----------------------------------------------------------------------

fn miou_of(pairs: &[(LabelMap, LabelMap)], c: usize) -> Result<EvalReport> {
    let mut conf = ConfusionMatrix::new(c);
    for (pred, gt) in pairs {
        accumulate_confusion(pred, gt, &mut conf)?;
    }
    Ok(miou(&conf)?)
}

fn miou_oracle() -> Result<String> {
    let g = PixelGrid::new(2, 2)?;
    let hand = miou_of(&[(LabelMap::new(g, vec![0, 1, 1, 1])?, LabelMap::new(g, vec![0, 0, 1, 1])?)], 2)?;
    ensure!((hand.miou - 58.33).abs() <= 0.01, "hand case mIoU {}", hand.miou);

    let mut rng = rng(10);
    let trials = 200;
    for t in 0..trials {
        let c = rng.random_range(2..8usize);
        let images: Vec<(LabelMap, LabelMap)> = (0..rng.random_range(1..5))
            .map(|_| {
                let g = PixelGrid::new(rng.random_range(1..12), rng.random_range(1..12)).unwrap();
                let mut draw = |void: bool| {
                    let v = (0..g.len())
                        .map(|_| if void && rng.random_bool(0.1) { UNLABELED } else { rng.random_range(0..c as u8) })
                        .collect();
                    LabelMap::new(g, v).unwrap()
                };
                (draw(false), draw(true))
            })
            .collect();
        if images.iter().all(|(_, gt)| gt.labels().iter().all(|&l| l == UNLABELED)) {
            continue;
        }
        let base = miou_of(&images, c)?;

        let mut perm: Vec<u8> = (0..c as u8).collect();
        for k in (1..c).rev() {
            perm.swap(k, rng.random_range(0..=k));
        }
        let relabel = |lm: &LabelMap| {
            let v = lm.labels().iter().map(|&l| if l == UNLABELED { l } else { perm[l as usize] }).collect();
            LabelMap::new(lm.grid(), v).unwrap()
        };
        let permuted: Vec<_> = images.iter().map(|(p, gt)| (relabel(p), relabel(gt))).collect();
        let pr = miou_of(&permuted, c)?;
        ensure!((pr.miou - base.miou).abs() < 1e-9, "trial {t}: permutation changed mIoU");
        for (k, &to) in perm.iter().enumerate() {
            ensure!(pr.per_class_iou[to as usize] == base.per_class_iou[k], "trial {t}: IoUs not permuted");
        }

        // Merging per-image matrices in any order equals one pass over all pixels.
        let mut merged = ConfusionMatrix::new(c);
        for (pred, gt) in images.iter().rev() {
            let mut one = ConfusionMatrix::new(c);
            accumulate_confusion(pred, gt, &mut one)?;
            merged.merge(&one)?;
        }
        ensure!(merged == base.confusion, "trial {t}: merged confusion differs");
        ensure!(miou(&merged)?.miou == base.miou, "trial {t}: merged mIoU differs");
    }
    Ok(format!("hand case {:.2}; permutation and aggregation hold over {trials} random corpora", hand.miou))
}
