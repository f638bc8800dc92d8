use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use photocount::detector::EfficiencyGrid;
use photocount::ingest::{synthesize_spectrum, SpectrumSettings};
use photocount::sampler::{derive_seed, load_counts};
use photocount::states::coherent;

fn photocount(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_photocount"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

const SMALL: &str = r#"
name = "small"
truncation = 10
efficiencies = 6
eta_max = 0.5
counting_capabilities = [1, 2]
runs_per_eta = 1000
replicas = 3
seed = 4

[state]
family = "coherent"
mean = 2.0

[stopping]
max_iterations = 200
extension_limit = 0
"#;

#[test]
fn simulate_writes_outputs_and_respects_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "small.toml", SMALL);
    let out = photocount(&["simulate", "--config", "small.toml", "--out", "a"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("M=2"));
    for file in ["summary.json", "rho_final.csv", "traces.csv"] {
        assert!(dir.path().join("a/small").join(file).exists(), "{file}");
    }
    let rho = fs::read_to_string(dir.path().join("a/small/rho_final.csv")).unwrap();
    assert_eq!(rho.lines().next().unwrap(), "n,rho_true,rho_M1,rho_M2");
    assert_eq!(rho.lines().count(), 12);

    let same = photocount(&["simulate", "-c", "small.toml", "--out", "b", "--threads", "1"], dir.path());
    assert!(same.status.success());
    let other = photocount(&["simulate", "-c", "small.toml", "--out", "c", "--seed", "5"], dir.path());
    assert!(other.status.success());
    let read = |d: &str| fs::read(dir.path().join(d).join("small/rho_final.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.toml", &SMALL.replace("counting_capabilities = [1, 2]", "counting_capabilities = [11]"));
    let out = photocount(&["simulate", "-c", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("counting capability"));
    assert!(!dir.path().join("out").exists(), "nothing may be written on validation failure");

    write(dir.path(), "typo.toml", "nmae = \"x\"\n");
    assert_eq!(photocount(&["simulate", "-c", "typo.toml"], dir.path()).status.code(), Some(1));
    assert_eq!(photocount(&["simulate"], dir.path()).status.code(), Some(1));
    assert_eq!(photocount(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(photocount(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cfg.toml", "name = \"r\"\n");
    let out = photocount(&["reconstruct", "-c", "cfg.toml", "--counts", "missing.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    // A featureless spectrum has no peaks to fit.
    fs::write(dir.path().join("flat.txt"), "0 5\n1 5\n2 5\n3 5\n4 5\n5 5\n").unwrap();
    fs::write(dir.path().join("manifest.csv"), "file,eta\nflat.txt,0.5\n").unwrap();
    write(dir.path(), "ing.toml", "name = \"i\"\n[ingest]\ncounting_capability = 1\n");
    let out = photocount(&["ingest", "-c", "ing.toml", "--manifest", "manifest.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ingest_then_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let rho = coherent(2.0, 20).unwrap();
    let grid = EfficiencyGrid::uniform(6, 0.5).unwrap();
    let mut manifest = String::from("file,eta\n");
    for (nu, &eta) in grid.etas().iter().enumerate() {
        let h = synthesize_spectrum(&rho, eta, SpectrumSettings::default(), 5000, derive_seed(1, nu as u64)).unwrap();
        let mut text = String::from("# charge,count\n");
        for (x, c) in h.centers().zip(h.counts()) {
            text += &format!("{x},{c}\n");
        }
        let name = format!("spectrum_{nu}.txt");
        fs::create_dir_all(dir.path().join("spectra")).unwrap();
        fs::write(dir.path().join("spectra").join(&name), text).unwrap();
        manifest += &format!("{name},{eta}\n");
    }
    fs::write(dir.path().join("spectra/manifest.csv"), manifest).unwrap();
    write(
        dir.path(),
        "ingest.toml",
        "name = \"lab\"\ntruncation = 20\ncounting_capabilities = [1, 2]\n\
         [state]\nfamily = \"coherent\"\nmean = 2.0\n\
         [ingest]\ncounting_capability = 2\nnum_peaks = 4\n\
         [stopping]\nmax_iterations = 5000\nextension_limit = 0\n",
    );
    let out = photocount(&["ingest", "-c", "ingest.toml", "--manifest", "spectra/manifest.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let counts_path = dir.path().join("out/lab/counts.csv");
    let counts = load_counts(&counts_path).unwrap();
    assert_eq!(counts.counting_capability(), 2);
    assert_eq!(counts.runs_per_eta(), 5000);
    assert!(dir.path().join("out/lab/fits.json").exists());

    let out = photocount(
        &["reconstruct", "-c", "ingest.toml", "--counts", counts_path.to_str().unwrap(), "--out", "rec"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("rec/lab/summary.json")).unwrap()).unwrap();
    let results = summary["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    // Only six efficiencies: a loose sanity bound on the plumbing.
    for r in results {
        assert!(r["final_fidelity"].as_f64().unwrap() > 0.95, "{r}");
    }
}

#[test]
fn sweep_and_baseline_commands() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "sweep.toml",
        &format!(
            "{}\n[sweep]\nfamilies = [\"coherent\", \"fock\"]\nmeans = [1, 2]\neta_max = [0.3, 0.6]\n",
            SMALL.replace("name = \"small\"", "name = \"sw\"")
        ),
    );
    let out = photocount(&["sweep", "-c", "sweep.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(dir.path().join("out/sw/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 2 * 2 * 2);
    for panel in ["panel_coherent_eta0.3.csv", "panel_fock_eta0.6.csv"] {
        let text = fs::read_to_string(dir.path().join("out/sw").join(panel)).unwrap();
        assert_eq!(text.lines().next().unwrap(), "mean,G_M1,std_M1,G_M2,std_M2");
        assert_eq!(text.lines().count(), 3);
    }

    let out = photocount(&["baseline", "-c", "sweep.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/sw/baseline.json").exists());
    assert!(dir.path().join("out/sw/baseline.csv").exists());
}
