use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use multimed_core::simulation::{CorrCase, InteractionCase, Scenario};
use multimed_cli::simulate::write_synthetic;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_multimed"));
    c.env("MULTIMED_THREADS", "1");
    c
}

/// A 50-unit synthetic dataset and a config running 200 iterations.
fn setup(dir: &Path, extra: &str) -> PathBuf {
    let sc = Scenario::new(CorrCase::Uncorrelated, InteractionCase::Single);
    write_synthetic(&sc, 50, 11, &dir.join("sim")).unwrap();
    let cfg = dir.join("run.toml");
    let text = format!(
        r#"seed = 21
[data]
path = "sim/dataset.csv"
schema = "sim/dataset_schema.toml"
[chain]
n_iter = 200
n_burn = 100
thin = 2
[effects]
n_mc = 8
[cep]
grid_size = 4
draw_stride = 25
[diagnostics]
n_rep = 10
parametric_draws = 50
{extra}
"#
    );
    std::fs::write(&cfg, text).unwrap();
    cfg
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().iter().map(str::to_string).collect();
    (h, r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect())
}

#[test]
fn fit_is_reproducible_and_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "");
    let cfg_s = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(run(&["fit", "-c", cfg_s, "--out", a.to_str().unwrap()]).0, 0);
    assert_eq!(run(&["fit", "-c", cfg_s, "--out", b.to_str().unwrap()]).0, 0);
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    assert!(!fa.contains_key("sensitivity.csv"));

    // The identity holds draw by draw in the written table.
    let (h, rows) = csv_rows(&a.join("effects.csv"));
    let col = |n: &str| h.iter().position(|x| x == n).unwrap();
    assert_eq!(rows.len(), 50);
    for r in &rows {
        let v = |n: &str| r[col(n)].parse::<f64>().unwrap();
        assert_eq!(v("TE"), v("NDE") + v("JNIE_all"));
    }

    // Every table leads with the run seed and hash.
    let meta: toml::Table = toml::from_str(std::str::from_utf8(&fa["run_metadata.toml"]).unwrap()).unwrap();
    let hash = meta["config_hash"].as_str().unwrap();
    for (name, _) in fa.iter().filter(|(n, _)| n.ends_with(".csv")) {
        let (h, rows) = csv_rows(&a.join(name));
        assert_eq!(&h[..2], ["seed", "config_hash"], "{name}");
        assert!(rows.iter().all(|r| r[0] == "21" && r[1] == hash), "{name}");
    }
    assert_eq!(meta["switches"]["prior_mode"].as_str(), Some("rho_constrained"));
}

#[test]
fn stages_rerun_from_the_archive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "[output]\ndir = \"out\"");
    let cfg_s = cfg.to_str().unwrap();
    assert_eq!(run(&["fit", "-c", cfg_s]).0, 0);
    let out = tmp.path().join("out");
    let before = files(&out);
    for cmd in ["effects", "diagnose"] {
        assert_eq!(run(&[cmd, "-c", cfg_s]).0, 0, "{cmd}");
    }
    let after = files(&out);
    for name in ["effects.csv", "principal.csv", "strata_cross.csv", "cep_surface_2.csv", "diagnostics.csv", "predictive.csv"] {
        if name == "diagnostics.csv" {
            // Acceptance rates are only known while sampling.
            let strip = |b: &[u8]| String::from_utf8_lossy(b).lines().filter(|l| !l.contains(",acceptance,")).collect::<Vec<_>>().join("\n");
            assert_eq!(strip(&before[name]), strip(&after[name]));
        } else {
            assert_eq!(before[name], after[name], "{name}");
        }
    }

    assert_eq!(run(&["sensitivity", "-c", cfg_s]).0, 0);
    assert!(!out.join("sensitivity.csv").exists());
}

#[test]
fn sensitivity_grid_is_long_format() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = "[sensitivity]\nchis = [[1.0, 1.0, 1.0], [2.0, 1.0, 1.0]]\nepsilons = [1.0, 2.0]\nn_mc = 4\ndraw_stride = 25\ncov_samples = 300\n[output]\ndir = \"out\"";
    let cfg = setup(tmp.path(), extra);
    assert_eq!(run(&["fit", "-c", cfg.to_str().unwrap()]).0, 0);
    let out = tmp.path().join("out");
    let (h, rows) = csv_rows(&out.join("sensitivity.csv"));
    assert_eq!(&h[2..5], ["epsilon", "chi", "estimand"]);
    assert_eq!(rows.len(), 2 * 2 * 12);
    // No unit is tilted when every χ is 1.
    let share = h.iter().position(|x| x == "tilted_share").unwrap();
    let untilted: Vec<&Vec<String>> = rows.iter().filter(|r| r[3] == "1;1;1").collect();
    assert_eq!(untilted.len(), 2 * 12);
    assert!(untilted.iter().all(|r| r[share] == "0"));
    assert!(rows.iter().all(|r| r[h.iter().position(|x| x == "mean").unwrap()].parse::<f64>().unwrap().is_finite()));
    let (_, brows) = csv_rows(&out.join("sensitivity_bounds.csv"));
    assert_eq!(brows.len(), 2);
}

#[test]
fn export_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "[output]\ndir = \"out\"");
    assert_eq!(run(&["fit", "-c", cfg.to_str().unwrap()]).0, 0);
    let out = tmp.path().join("out");
    let o = out.to_str().unwrap();
    assert_eq!(run(&["export", "--dir", o, "--format", "csv"]).0, 0);
    let (_, rows) = csv_rows(&out.join("report_effects.csv"));
    assert_eq!(rows.len(), 12);
    let (h, rows) = csv_rows(&out.join("report_principal.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(h.len() - 3, 7);
    assert_eq!(&h[3..], ["1", "2", "3", "12", "13", "23", "123"]);

    let (code, err) = run(&["export", "--dir", o]);
    assert_eq!(code, 0);
    assert!(err.contains("no sensitivity grid"));
    let text = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(text.contains("not computed"));
    assert!(text.contains("JNIE_all"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "[output]\ndir = \"out\"");
    let cfg_s = cfg.to_str().unwrap();

    // Nothing fitted yet.
    let (code, err) = run(&["effects", "-c", cfg_s]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("missing artifact"));
    let (code, _) = run(&["export", "--dir", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(code, 1);

    assert_eq!(run(&["fit", "-c", cfg_s, "--n-burn", "500"]).0, 1);
    assert_eq!(run(&["fit", "-c", cfg_s, "--prior-mode", "flat"]).0, 1);
    assert_eq!(run(&["fit", "--bogus"]).0, 1);

    let bad = tmp.path().join("sim/dataset.csv");
    let text = std::fs::read_to_string(&bad).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[3] = lines[3].replacen(',', ",x", 2);
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let (code, err) = run(&["fit", "-c", cfg_s]);
    assert_eq!(code, 1);
    assert!(err.contains("line 4"), "{err}");

    // A corrupted archive is a runtime failure.
    std::fs::write(&bad, text).unwrap();
    std::fs::create_dir_all(tmp.path().join("out")).unwrap();
    std::fs::write(tmp.path().join("out/draws.bin"), b"MMDRAWS\0garbage").unwrap();
    let (code, err) = run(&["effects", "-c", cfg_s]);
    assert_eq!(code, 2, "{err}");

    let (code, _) = bin().args(["fit", "-c", cfg_s]).env("MULTIMED_THREADS", "zero").output().map(|o| (o.status.code().unwrap(), ())).unwrap();
    assert_eq!(code, 1);
}
