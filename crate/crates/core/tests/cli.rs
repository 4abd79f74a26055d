use std::path::Path;
use std::process::{Command, Output};

fn bayesrom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bayesrom"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&bayesrom(dir.path(), &[])), 1);
    assert_eq!(code(&bayesrom(dir.path(), &["train", "--no-such-flag"])), 1);
    assert_eq!(code(&bayesrom(dir.path(), &["train", "--rank", "0"])), 1);
    assert_eq!(code(&bayesrom(dir.path(), &["generate", "--noise-level", "-1"])), 1);

    std::fs::write(dir.path().join("bad.toml"), "[model]\nrnak = 3\n").unwrap();
    let out = bayesrom(dir.path(), &["-c", "bad.toml", "train"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn help_and_schema_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&bayesrom(dir.path(), &["--help"])), 0);
    let out = bayesrom(dir.path(), &["--print-schema"]);
    assert_eq!(code(&out), 0);
    let schema = String::from_utf8(out.stdout).unwrap();
    // The printed schema is itself a valid configuration.
    std::fs::write(dir.path().join("schema.toml"), &schema).unwrap();
    let out = bayesrom(dir.path(), &["-c", "schema.toml", "--print-schema"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = bayesrom(dir.path(), &["train"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = bayesrom(dir.path(), &["predict"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn corrupt_import_fails_without_writing_a_posterior() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("snap.csv"), "variable,index,0,1e-3\nu,0,1.0,abc\n").unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "output_dir = \"out\"\n[dataset]\nsource = \"import\"\ntraining_path = \"snap.csv\"\n",
    )
    .unwrap();
    let out = bayesrom(dir.path(), &["-c", "run.toml", "generate"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("abc"));
    let out = bayesrom(dir.path(), &["-c", "run.toml", "train"]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("out/model/posterior.json").exists());
}

#[test]
fn one_sample_ensemble_has_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--output-dir", "out", "--initial-conditions", "0,1,2,3,4,5,6,7", "--samples", "1"];
    for cmd in ["generate", "train", "predict"] {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        let out = bayesrom(dir.path(), &args);
        assert_eq!(code(&out), 0, "{cmd}: {}", stderr(&out));
    }
    let pred = dir.path().join("out/predict");
    let mut checked = 0;
    for entry in std::fs::read_dir(&pred).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if !name.ends_with(".csv") {
            continue;
        }
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let headers = rdr.headers().unwrap().clone();
        let std_cols: Vec<usize> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with("std_"))
            .map(|(i, _)| i)
            .collect();
        for rec in rdr.records() {
            let rec = rec.unwrap();
            for &c in &std_cols {
                assert_eq!(rec[c].parse::<f64>().unwrap(), 0.0, "{name} column {}", &headers[c]);
                checked += 1;
            }
        }
    }
    assert!(checked > 0, "no std columns found in {}", pred.display());
}
