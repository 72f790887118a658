//! Operating criteria for the whole pipeline, one test per criterion, using
//! the bundled configs under configs/. These are end-to-end runs: the
//! training criteria take tens of minutes each at their stated budgets.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use ndarray::Axis;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_str()
        .unwrap()
        .into()
}

fn poumor(args: &[&str]) -> Duration {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_poumor"))
        .args(args)
        .output()
        .expect("spawn poumor");
    assert!(
        out.status.success(),
        "poumor {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    t0.elapsed()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap())
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// "shell,energy" csv back into a dense vector.
fn spectrum(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

fn spearman(xs: &[f64]) -> f64 {
    let n = xs.len();
    let rank = |v: f64| xs.iter().filter(|&&w| w < v).count() as f64;
    let d2: f64 = xs
        .iter()
        .enumerate()
        .map(|(t, &v)| (rank(v) - t as f64).powi(2))
        .sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1)) as f64
}

struct Dirs {
    _keep: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    eval: PathBuf,
}

fn dirs() -> Dirs {
    let keep = tempfile::tempdir().unwrap();
    Dirs {
        data: keep.path().join("data"),
        run: keep.path().join("run"),
        eval: keep.path().join("eval"),
        _keep: keep,
    }
}

#[test]
fn criterion_1_disk_operator_fit() {
    let d = dirs();
    let cfg = config("disk.toml");
    poumor(&["gen-data", "--config", &cfg, "--out", d.data.to_str().unwrap()]);
    let spent = poumor(&[
        "train",
        "--config",
        &cfg,
        "--data",
        d.data.to_str().unwrap(),
        "--out",
        d.run.to_str().unwrap(),
    ]);
    assert!(
        spent <= Duration::from_secs(30 * 60),
        "disk training exceeded its budget: {spent:?}"
    );
    poumor(&[
        "eval",
        "--data",
        d.data.to_str().unwrap(),
        "--checkpoint",
        d.run.join("checkpoint.pouf").to_str().unwrap(),
        "--out",
        d.eval.to_str().unwrap(),
    ]);
    let r2 = json(&d.eval.join("metrics.json"))["r2"].as_f64().unwrap();

    // zero expert (third lane) averaged over the band 1 < ‖x‖ < 1.1
    let gates = poumor_io_read(&d.eval.join("gates.pouf"));
    let n = gates.shape()[0];
    let h = 2.5 / n as f64;
    let (mut acc, mut cnt) = (0.0, 0usize);
    for ((i, j), w) in gates
        .index_axis(Axis(2), 2)
        .indexed_iter()
        .map(|(idx, w)| ((idx[0], idx[1]), *w))
    {
        let r = ((i as f64 * h - 1.25).powi(2) + (j as f64 * h - 1.25).powi(2)).sqrt();
        if r > 1.0 && r < 1.1 {
            acc += w;
            cnt += 1;
        }
    }
    let band = acc / cnt as f64;

    println!(
        "criterion 1 (disk exemplar): r2={r2:.4} band_zero_gate={band:.3} train={}s",
        spent.as_secs()
    );
    assert!(r2 >= 0.99, "validation R² {r2:.4} < 0.99");
    assert!(band > 0.9, "band zero-gate {band:.3} <= 0.9");
}

#[test]
fn criterion_2_wedge_fixed_gates() {
    let d = dirs();
    let cfg = config("wedge.toml");
    poumor(&["gen-data", "--config", &cfg, "--out", d.data.to_str().unwrap()]);
    let spent = poumor(&[
        "train",
        "--config",
        &cfg,
        "--data",
        d.data.to_str().unwrap(),
        "--out",
        d.run.to_str().unwrap(),
    ]);
    assert!(
        spent <= Duration::from_secs(60 * 60),
        "wedge training exceeded its budget: {spent:?}"
    );
    poumor(&[
        "eval",
        "--data",
        d.data.to_str().unwrap(),
        "--checkpoint",
        d.run.join("checkpoint.pouf").to_str().unwrap(),
        "--out",
        d.eval.to_str().unwrap(),
    ]);
    let rel = json(&d.eval.join("metrics.json"))["rel_rmse"]
        .as_f64()
        .unwrap();
    println!(
        "criterion 2 (quarter-disk poisson): rel_rmse={rel:.4} train={}s",
        spent.as_secs()
    );
    assert!(rel <= 0.05, "relative RMSE {rel:.4} > 5%");
}

#[test]
fn criterion_3_smooth_extension() {
    let d = dirs();
    poumor(&[
        "gen-data",
        "--out",
        d.data.to_str().unwrap(),
        "--kind",
        "quarter-disk-poisson",
        "--n",
        "64",
        "--count",
        "10",
        "--val-count",
        "10",
        "--seed",
        "31",
    ]);
    let mut separated = 0;
    let mut worst_constraint = 0.0f64;
    for (split, count) in [("train", 10), ("val", 10)] {
        for i in 0..count {
            let out = d.run.join(format!("{split}{i}"));
            poumor(&[
                "extend",
                "--data",
                d.data.to_str().unwrap(),
                "--split",
                split,
                "--index",
                &i.to_string(),
                "--out",
                out.to_str().unwrap(),
                "--precondition",
                "--cg-tol",
                "1e-7",
                "--max-iters",
                "100000",
            ]);
            let g = json(&out.join("gibbs.json"));
            if g["smooth"].as_f64().unwrap() < g["padded"].as_f64().unwrap() {
                separated += 1;
            }
            let c = json(&out.join("diagnostics.json"))["constraint_residual"]
                .as_f64()
                .unwrap();
            worst_constraint = worst_constraint.max(c);
        }
    }
    let dense = common::kkt::check_dense_oracle();
    println!(
        "criterion 3 (smooth extension): gibbs {separated}/20, worst constraint {worst_constraint:.2e}, dense oracle {}",
        if dense.is_ok() { "ok" } else { "FAILED" }
    );
    assert!(separated >= 19, "gibbs separation only {separated}/20");
    assert!(worst_constraint <= 1e-6);
    dense.unwrap();
}

#[test]
fn criterion_4_property_suite() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    for (name, check) in common::property_suite() {
        if let Err(e) = check() {
            failures.push(format!("{name}: {e}"));
        }
    }
    let spent = t0.elapsed();
    println!(
        "criterion 4 (property suite): {}/11 in {:.1}s",
        11 - failures.len(),
        spent.as_secs_f64()
    );
    assert!(failures.is_empty(), "{}", failures.join("\n"));
    assert!(
        spent <= Duration::from_secs(5 * 60),
        "property suite exceeded 5 minutes: {spent:?}"
    );
}

#[test]
fn criterion_5_burgers_closure_mfvi() {
    let d = dirs();
    let cfg = config("closure.toml");
    let mut spent = poumor(&["gen-data", "--config", &cfg, "--out", d.data.to_str().unwrap()]);
    spent += poumor(&[
        "train",
        "--config",
        &cfg,
        "--data",
        d.data.to_str().unwrap(),
        "--out",
        d.run.to_str().unwrap(),
    ]);
    spent += poumor(&[
        "rollout",
        "--config",
        &cfg,
        "--data",
        d.data.to_str().unwrap(),
        "--checkpoint",
        d.run.join("checkpoint.pouf").to_str().unwrap(),
        "--out",
        d.eval.to_str().unwrap(),
    ]);
    assert!(
        spent <= Duration::from_secs(2 * 60 * 60),
        "closure pipeline exceeded its budget: {spent:?}"
    );

    // (a) rollout spectrum within 3x of filtered DNS on shells 1..=16
    // (lowest half of the 32 retained shells; shell 0 is the conserved,
    // vanishing mean) for at least 8 of 10 posterior samples
    let mut within = 0;
    for s in 0..10 {
        let dir = d.eval.join(format!("sample{s:04}"));
        let got = spectrum(&dir.join("spectra.csv"));
        let want = spectrum(&dir.join("reference_spectra.csv"));
        let ok = (1..=16).all(|k| {
            let ratio = got[k] / want[k];
            (1.0 / 3.0..=3.0).contains(&ratio)
        });
        if ok {
            within += 1;
        }
    }

    // (b) mean predicted sigma non-decreasing over the rollout
    let var = poumor_io_read(&d.eval.join("sample0000/var.pouf"));
    let sigmas: Vec<f64> = (1..var.shape()[0])
        .map(|t| {
            let v = var.index_axis(Axis(0), t);
            v.iter().map(|&x| x.max(0.0).sqrt()).sum::<f64>() / v.len() as f64
        })
        .collect();
    let rho = spearman(&sigmas);

    // (c) unfiltered IC flagged by elevated sigma
    let ood = json(&d.eval.join("ood_report.json"));
    let ratio = ood["ratio"].as_f64().unwrap();

    println!(
        "criterion 5 (burgers closure MFVI): spectra {within}/10, sigma rank corr {rho:.3}, ood ratio {ratio:.2} ({}s)",
        spent.as_secs()
    );
    assert!(within >= 8, "only {within}/10 posterior spectra within 3x");
    assert!(rho > 0.8, "sigma rank correlation {rho:.3} <= 0.8");
    assert!(ratio >= 2.0, "ood sigma ratio {ratio:.2} < 2");
}

#[test]
fn criterion_6_determinism() {
    let d = dirs();
    let cfg = config("disk.toml");
    poumor(&["gen-data", "--config", &cfg, "--out", d.data.to_str().unwrap()]);
    for run in ["a", "b"] {
        poumor(&[
            "train",
            "--config",
            &cfg,
            "--data",
            d.data.to_str().unwrap(),
            "--out",
            d.run.join(run).to_str().unwrap(),
            "--max-steps",
            "60",
        ]);
    }
    let a = fs::read(d.run.join("a/metrics.csv")).unwrap();
    let b = fs::read(d.run.join("b/metrics.csv")).unwrap();
    println!(
        "criterion 6 (determinism): {} byte-identical metric rows",
        a.iter().filter(|&&c| c == b'\n').count()
    );
    assert_eq!(a, b, "metrics.csv differs between identical runs");
}

fn poumor_io_read(path: &Path) -> ndarray::ArrayD<f64> {
    poumor::io::read_array(path).unwrap()
}
