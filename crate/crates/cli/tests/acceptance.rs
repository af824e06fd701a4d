//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use serde_json::Value;

use cosmos_core::calibration::{compute_ece, grid_search_temperature, CalibrationProfile, TemperatureGrid};
use cosmos_core::clustering::{adjusted_rand_index, kmeans, ClusterConfig};
use cosmos_core::data::{GroupVector, LabelVector, LogitMatrix, NamedLogits};
use cosmos_core::evaluation::{build_mixture, mixture_counts, DEFAULT_MIXTURES};
use cosmos_core::rng::{rng_from_seed, uniform, CosmosRng};
use cosmos_core::selection::ensemble_logits;

type Outcome = Result<(bool, String), String>;

const SEEDS: u64 = 5;

fn cosmos(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cosmos"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "cosmos {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn read_json(p: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

/// synth + calibrate into `dir`; returns (test manifest, profile).
fn prepare(dir: &Path, preset: &str, seed: u64) -> Result<(PathBuf, PathBuf), String> {
    let data = dir.join("data");
    cosmos(&["synth", "--preset", preset, "--seed", &seed.to_string(), "--out-dir", s(&data)])?;
    let profile = dir.join("profile.json");
    cosmos(&["calibrate", "--manifest", s(&data.join("source.json")), "--out", s(&profile)])?;
    Ok((data.join("test.json"), profile))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn normal(rng: &mut CosmosRng) -> f64 {
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn criterion_1(tmp: &Path) -> Outcome {
    let (test, profile) = prepare(tmp, "two-model-tradeoff", 1)?;
    let run = |mode: &str, extra: &[&str], out: &str| -> Result<Vec<u8>, String> {
        let dir = tmp.join(out);
        let mut args = vec!["select", "--manifest", s(&test), "--profile", s(&profile), "--mode", mode, "--out-dir", s(&dir)];
        args.extend_from_slice(extra);
        cosmos(&args)?;
        fs::read(dir.join("predictions.csv")).map_err(|e| e.to_string())
    };
    let a = run("cluster", &["--points-per-cluster", "1"], "n1")?;
    let b = run("input-dep", &[], "dep")?;
    Ok((a == b, format!("{} bytes each, identical = {}", a.len(), a == b)))
}

struct TradeoffRun {
    m100: f64,
    m0: f64,
    regret: Value,
}

fn tradeoff_runs(tmp: &Path) -> Result<Vec<TradeoffRun>, String> {
    (0..SEEDS)
        .map(|seed| {
            let dir = tmp.join(format!("tradeoff{seed}"));
            let (test, profile) = prepare(&dir, "two-model-tradeoff", seed)?;
            let report = dir.join("report.json");
            cosmos(&[
                "evaluate", "--manifest", s(&test), "--profile", s(&profile),
                "--methods", "cluster,input-dep,robust,shortcut",
                "--seed", &seed.to_string(), "--out", s(&report),
            ])?;
            let r = read_json(&report)?;
            let acc = |name: &str| {
                r["test_sets"]
                    .as_array()
                    .and_then(|sets| sets.iter().find(|t| t["name"] == name))
                    .and_then(|t| t["accuracy"]["cluster"].as_f64())
                    .ok_or_else(|| format!("missing {name}"))
            };
            Ok(TradeoffRun {
                m100: acc("m=100")?,
                m0: acc("m=0")?,
                regret: r["summary"].clone(),
            })
        })
        .collect()
}

fn regret(runs: &[TradeoffRun], method: &str) -> f64 {
    median(runs.iter().map(|r| r.regret[method]["avg_regret"].as_f64().unwrap()).collect())
}

fn criterion_2(runs: &[TradeoffRun]) -> Outcome {
    let m100 = median(runs.iter().map(|r| r.m100).collect());
    let m0 = median(runs.iter().map(|r| r.m0).collect());
    let reg = regret(runs, "cluster");
    let pass = m100 >= 0.955 && m0 >= 0.82 && reg >= -0.02;
    Ok((pass, format!("median m=100 {m100:.4} (>=0.955), m=0 {m0:.4} (>=0.82), avg regret {reg:.4} (>=-0.02)")))
}

fn criterion_3(runs: &[TradeoffRun]) -> Outcome {
    let cl = regret(runs, "cluster");
    let dep = regret(runs, "input-dep");
    let rob = regret(runs, "robust");
    let sh = regret(runs, "shortcut");
    let pass = cl >= dep && dep >= rob - 0.005 && dep >= sh - 0.005;
    Ok((pass, format!("median regret cluster {cl:.4} >= input-dep {dep:.4} >= robust {rob:.4} / shortcut {sh:.4} (-0.005)")))
}

/// Binary logits `[0, scale * z]` with labels drawn from sigmoid(z).
fn bernoulli_logits(seed: u64, n: usize, scale: f64) -> (LogitMatrix, LabelVector) {
    let mut rng = rng_from_seed(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let z = 10.0 * uniform(&mut rng) - 5.0;
        let p = 1.0 / (1.0 + (-z).exp());
        labels.push(usize::from(uniform(&mut rng) < p));
        rows.push(vec![0.0, scale * z]);
    }
    (LogitMatrix::from_rows(&rows).unwrap(), LabelVector::new(labels, 2).unwrap())
}

fn criterion_4() -> Outcome {
    let grid = TemperatureGrid::default();
    let trials = 100;
    let (mut scaled_ok, mut calibrated_ok) = (0, 0);
    let mut alphas = Vec::new();
    for seed in 0..trials {
        let (l4, y4) = bernoulli_logits(seed, 5000, 4.0);
        let search = grid_search_temperature(&l4, &y4, &grid, 10).map_err(|e| e.to_string())?;
        let before = compute_ece(&l4, &y4, 1.0, 10).map_err(|e| e.to_string())?.total;
        alphas.push(search.alpha_star);
        if (3.5..=4.5).contains(&search.alpha_star) && search.ece_star < before {
            scaled_ok += 1;
        }
        let (l1, y1) = bernoulli_logits(1_000 + seed, 5000, 1.0);
        if compute_ece(&l1, &y1, 1.0, 10).map_err(|e| e.to_string())?.total < 0.03 {
            calibrated_ok += 1;
        }
    }
    let pass = scaled_ok * 100 >= 99 * trials && calibrated_ok * 100 >= 99 * trials;
    let lo = alphas.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = alphas.iter().cloned().fold(0.0, f64::max);
    Ok((pass, format!(
        "x4 logits: alpha* in [3.5,4.5] and ECE reduced on {scaled_ok}/{trials} (alpha* range {lo}..{hi}); true log-odds ECE<0.03 on {calibrated_ok}/{trials}"
    )))
}

fn criterion_5() -> Outcome {
    let confs: [f64; 4] = [0.95, 0.95, 0.65, 0.65];
    let rows: Vec<Vec<f64>> = confs.iter().map(|c| vec![0.0, (c / (1.0 - c)).ln()]).collect();
    let logits = LogitMatrix::from_rows(&rows).unwrap();
    let labels = LabelVector::new(vec![1, 1, 1, 0], 2).unwrap();
    let e = compute_ece(&logits, &labels, 1.0, 10).map_err(|e| e.to_string())?.total;
    Ok(((e - 0.10).abs() <= 1e-12, format!("ECE {e:.15}")))
}

fn criterion_6() -> Outcome {
    let mut rng = rng_from_seed(6);
    let mut mismatches = 0;
    let instances = 1000;
    for _ in 0..instances {
        let n = 1 + (uniform(&mut rng) * 20.0) as usize;
        let k = 1 + (uniform(&mut rng) * 4.0) as usize;
        let c = 2 + (uniform(&mut rng) * 4.0) as usize;
        let mut models = Vec::new();
        let mut raw = Vec::new();
        let mut alphas = Vec::new();
        for i in 0..k {
            let l = Array2::from_shape_fn((n, c), |_| 10.0 * uniform(&mut rng) - 5.0);
            raw.push(l.clone());
            alphas.push(0.25 * (1 + (uniform(&mut rng) * 60.0) as usize) as f64);
            models.push(NamedLogits { name: format!("m{i}"), logits: LogitMatrix::new(l).unwrap() });
        }
        let profile = CalibrationProfile {
            target_ece: 0.0,
            models: CalibrationProfile::uncalibrated(models.iter().map(|m| m.name.as_str()))
                .models
                .into_iter()
                .zip(&alphas)
                .map(|(mut m, &a)| {
                    m.alpha = a;
                    m
                })
                .collect(),
        };
        let got = ensemble_logits(&models, &profile, false).map_err(|e| e.to_string())?.labels;
        for x in 0..n {
            let mean: Vec<f64> = (0..c)
                .map(|j| (0..k).map(|i| raw[i][[x, j]] / alphas[i]).sum::<f64>() / k as f64)
                .collect();
            let mut best = 0;
            for j in 1..c {
                if mean[j] > mean[best] {
                    best = j;
                }
            }
            mismatches += usize::from(got[x] != best);
        }
    }
    Ok((mismatches == 0, format!("{instances} instances, {mismatches} mismatched rows")))
}

fn criterion_7() -> Outcome {
    let mut rng = rng_from_seed(7);
    let mut monotone = 0;
    for t in 0..100u64 {
        let n = 20 + (uniform(&mut rng) * 300.0) as usize;
        let d = 1 + (uniform(&mut rng) * 5.0) as usize;
        let k = 1 + (uniform(&mut rng) * 10.0) as usize;
        let x = Array2::from_shape_fn((n, d), |_| normal(&mut rng) * 3.0);
        let cfg = ClusterConfig { seed: t, ..ClusterConfig::default() };
        let r = kmeans(x.view(), k.min(n), &cfg).map_err(|e| e.to_string())?;
        if r.wcss_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)) {
            monotone += 1;
        }
    }
    let n = 1000;
    let truth: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Array2::from_shape_fn((n, 2), |(i, j)| {
        let shift = if j == 0 { 6.0 * truth[i] as f64 } else { 0.0 };
        shift + normal(&mut rng)
    });
    let r = kmeans(x.view(), 2, &ClusterConfig { seed: 3, ..ClusterConfig::default() }).map_err(|e| e.to_string())?;
    let ari = adjusted_rand_index(&r.labels, &truth);

    let big = Array2::from_shape_fn((4000, 6), |_| normal(&mut rng));
    let cfg = ClusterConfig { seed: 11, ..ClusterConfig::default() };
    let mut runs = Vec::new();
    for threads in 1..=8 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        let r = pool.install(|| kmeans(big.view(), 80, &cfg)).map_err(|e| e.to_string())?;
        let bits: Vec<u64> = r.centroids.iter().map(|v| v.to_bits()).collect();
        runs.push((r.labels, bits, r.wcss.to_bits()));
    }
    let identical = runs.windows(2).all(|w| w[0] == w[1]);
    let pass = monotone == 100 && ari >= 0.95 && identical;
    Ok((pass, format!(
        "WCSS monotone on {monotone}/100; ARI {ari:.4} (>=0.95); bit-identical across 1-8 threads = {identical}"
    )))
}

fn criterion_8() -> Outcome {
    let expected = [(0, 0, 100), (10, 11, 100), (30, 43, 99), (50, 100, 100), (70, 99, 43), (90, 100, 11), (100, 100, 0)];
    let mut z = vec![0usize; 100];
    z.extend(vec![1; 100]);
    let groups = GroupVector::new(z, vec![true, false]).unwrap();
    let mut ok = true;
    let mut cells = Vec::new();
    for (&m, &(em, emaj, emin)) in DEFAULT_MIXTURES.iter().zip(&expected) {
        assert_eq!(m, em);
        let (maj, min) = mixture_counts(100, 100, m).map_err(|e| e.to_string())?;
        let idx = build_mixture(&groups, m, 8).map_err(|e| e.to_string())?;
        let mut dedup = idx.clone();
        dedup.dedup();
        let drawn_maj = idx.iter().filter(|&&i| i < 100).count();
        ok &= (maj, min) == (emaj, emin) && dedup.len() == idx.len() && drawn_maj == maj && idx.len() == maj + min;
        cells.push(format!("m={m}:{maj}+{min}"));
    }
    Ok((ok, cells.join(" ")))
}

fn criterion_9(tmp: &Path) -> Outcome {
    let mut hits = 0;
    let mut misses = Vec::new();
    for seed in 0..SEEDS {
        let dir = tmp.join(format!("sweep{seed}"));
        let (test, profile) = prepare(&dir, "six-model-sweep", seed)?;
        let oracle = read_json(&dir.join("data").join("oracle.json"))?;
        let models = oracle["models"].as_array().ok_or("oracle has no models")?;
        let group_acc = |i: usize, g: usize| models[i]["groups"][g]["accuracy"].as_f64().unwrap();
        for m in [0u32, 50, 100] {
            let out = dir.join(format!("rank{m}.json"));
            cosmos(&[
                "tune", "--manifest", s(&test), "--profile", s(&profile),
                "--mixture", &m.to_string(), "--seed", &seed.to_string(), "--out", s(&out),
            ])?;
            let ranking = read_json(&out)?;
            let rec = ranking["recommended"].as_str().ok_or("no recommendation")?;
            let (maj, min) = mixture_counts(2000, 2000, m).map_err(|e| e.to_string())?;
            let f = maj as f64 / (maj + min) as f64;
            let acc: Vec<f64> = (0..models.len()).map(|i| f * group_acc(i, 0) + (1.0 - f) * group_acc(i, 1)).collect();
            let best = acc.iter().cloned().fold(0.0, f64::max);
            let pick = models.iter().position(|v| v["name"] == rec).ok_or("unknown model")?;
            if best - acc[pick] <= 0.01 {
                hits += 1;
            } else {
                misses.push(format!("seed {seed} m={m}: {rec} {:.4} vs {best:.4}", acc[pick]));
            }
        }
    }
    let total = 3 * SEEDS as usize;
    Ok((hits == total, format!("rank-1 within 0.01 of best oracle on {hits}/{total} {}", misses.join("; "))))
}

fn criterion_10(tmp: &Path) -> Outcome {
    let mut n1 = Vec::new();
    let mut n50 = Vec::new();
    let mut reports = 0;
    for seed in 0..SEEDS {
        let dir = tmp.join(format!("tradeoff{seed}"));
        let out = dir.join("ablation");
        cosmos(&[
            "ablate", "--manifest", s(&dir.join("data").join("test.json")), "--profile", s(&dir.join("profile.json")),
            "--seed", &seed.to_string(), "--out-dir", s(&out),
        ])?;
        let table = fs::read_to_string(out.join("ablation.csv")).map_err(|e| e.to_string())?;
        let mut lines = table.lines();
        if lines.next() != Some("N,avg_acc,avg_regret") {
            return Ok((false, "unexpected ablation table header".into()));
        }
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            let r: f64 = cols[2].parse().map_err(|_| "bad regret cell")?;
            match cols[0] {
                "1" => n1.push(r),
                "50" => n50.push(r),
                _ => {}
            }
        }
        reports += fs::read_dir(&out).map_err(|e| e.to_string())?.filter(|e| {
            e.as_ref().is_ok_and(|e| e.file_name().to_string_lossy().starts_with("report_N"))
        }).count();
    }
    let (a, b) = (median(n50), median(n1));
    let pass = a >= b && reports == 7 * SEEDS as usize;
    Ok((pass, format!("median avg regret N=50 {a:.4} >= N=1 {b:.4}; {reports} reports")))
}

fn criterion_11(tmp: &Path) -> Outcome {
    let run = |name: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let dir = tmp.join(name);
        let (test, profile) = prepare(&dir, "two-model-tradeoff", 42)?;
        let sel = dir.join("sel");
        cosmos(&["select", "--manifest", s(&test), "--profile", s(&profile), "--seed", "42", "--out-dir", s(&sel)])?;
        let report = dir.join("report.json");
        cosmos(&["evaluate", "--manifest", s(&test), "--profile", s(&profile), "--seed", "42", "--out", s(&report)])?;
        let r = fs::read(&report).map_err(|e| e.to_string())?;
        let p = fs::read(sel.join("predictions.csv")).map_err(|e| e.to_string())?;
        Ok((r, p))
    };
    let a = run("det_a")?;
    let b = run("det_b")?;
    Ok((a == b, format!("report JSON {} bytes; reports and predictions identical = {}", a.0.len(), a == b)))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let mut failed = Vec::new();
    let mut report = |id: u32, title: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (pass, detail) = match outcome {
            Ok((p, d)) => (p, d),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = limit.is_none_or(|l| took <= l);
        let pass = pass && in_time;
        let limit_note = limit.map_or(String::new(), |l| format!(" limit {:.0}s", l.as_secs_f64()));
        println!(
            "criterion {id:>2} {} [{:.2}s{limit_note}] {title}: {detail}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    };

    report(1, "singleton-cluster equivalence", Some(Duration::from_secs(5)), &mut || criterion_1(&root.join("c1")));
    let mut runs = Vec::new();
    report(2, "tradeoff routing", Some(Duration::from_secs(30)), &mut || {
        runs = tradeoff_runs(root)?;
        criterion_2(&runs)
    });
    report(3, "baseline ordering", None, &mut || {
        if runs.is_empty() {
            return Err("tradeoff runs unavailable".into());
        }
        criterion_3(&runs)
    });
    report(4, "calibration recovery", None, &mut criterion_4);
    report(5, "ECE hand oracle", None, &mut criterion_5);
    report(6, "ensemble oracle equivalence", None, &mut criterion_6);
    report(7, "k-means properties", None, &mut criterion_7);
    report(8, "mixture construction", None, &mut criterion_8);
    report(9, "hyperparameter tuning", None, &mut || criterion_9(root));
    report(10, "ablation harness", Some(Duration::from_secs(180)), &mut || criterion_10(root));
    report(11, "determinism", None, &mut || criterion_11(root));

    if failed.is_empty() {
        println!("acceptance: all 11 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
