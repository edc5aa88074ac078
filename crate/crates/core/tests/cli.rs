use std::path::Path;
use std::process::Command;

use jointqr::mal_dist::{build_spec, sample_mal};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

fn jointqr(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_jointqr")).args(args).output().unwrap()
}

/// Two responses and eight covariates, 2020 rows.
fn write_firm_shaped_csv(path: &Path) {
    let (n, k, p) = (2020, 9, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    let spec = build_spec(&[0.75, 0.25]).unwrap();
    let beta = DMatrix::from_fn(p, k, |_, s| if s % 3 == 2 { 0.0 } else { rng.random_range(-1.0..1.0) });
    let x = DMatrix::from_fn(n, k, |_, s| if s == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
    let psi = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
    let eps = sample_mal(&spec, &[0.0, 0.0], &DVector::from_vec(vec![0.3, 0.5]), &psi, &mut rng, n)
        .unwrap()
        .draws;
    let y = &x * beta.transpose() + eps;
    let mut text = String::from("growth,leverage");
    for s in 1..k {
        text += &format!(",x{s}");
    }
    text.push('\n');
    for i in 0..n {
        let mut row: Vec<String> = (0..p).map(|j| format!("{}", y[(i, j)])).collect();
        row.extend((1..k).map(|s| format!("{}", x[(i, s)])));
        text += &row.join(",");
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_and_lasso_on_firm_shaped_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_firm_shaped_csv(&data);
    let d = data.to_str().unwrap();

    let fit_out = dir.path().join("fit.json");
    let o = jointqr(&["fit", "--data", d, "--responses", "2", "--tau", "0.75,0.25", "--out", fit_out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let fit = read_json(&fit_out);
    assert_eq!(fit["beta"].as_array().unwrap().len(), 2);
    assert_eq!(fit["beta"][0].as_array().unwrap().len(), 9);
    assert_eq!(fit["design_names"][0], "(intercept)");
    assert_eq!(fit["response_names"][1], "leverage");
    assert_eq!(fit["converged"], true);

    let lasso_out = dir.path().join("lasso.json");
    let o = jointqr(&[
        "lasso", "--data", d, "--responses", "2", "--tau", "0.75,0.25", "--folds", "5", "--grid-size", "15",
        "--seed", "3", "--out", lasso_out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lasso = read_json(&lasso_out);
    assert_eq!(lasso["lambdas"].as_array().unwrap().len(), 15);
    assert_eq!(lasso["folds"], 5);
    let chosen = lasso["chosen_index"].as_u64().unwrap() as usize;
    assert_eq!(lasso["chosen_lambda"], lasso["lambdas"][chosen]);

    let o = jointqr(&["fit", "--data", d, "--responses", "2", "--tau", "0.75,0.25", "--format", "text"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("growth (tau = 0.75)") && text.contains("x8"), "{text}");
}

#[test]
fn malformed_csv_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "y1,y2,x\n1,2,3\n4,5,6\n7,oops,9\n").unwrap();
    let o = jointqr(&["fit", "--data", path.to_str().unwrap(), "--responses", "2", "--tau", "0.5,0.5"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4"), "{err}");

    let o = jointqr(&["fit", "--data", "/nonexistent.csv", "--responses", "1", "--tau", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = jointqr(&["simulate", "--preset", "table9-panelZ"]);
    assert_eq!(o.status.code(), Some(2));
    let o = jointqr(&["fit", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn harness_commands_are_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, args: &[&str]| {
        let out = dir.path().join(name);
        let mut all: Vec<&str> = args.to_vec();
        all.extend(["--out", out.to_str().unwrap()]);
        let o = jointqr(&all);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let sim = ["simulate", "--preset", "table1-panelB", "--reps", "3", "--n", "300", "--seed", "7"];
    let a = run("a.json", &sim);
    assert_eq!(a, run("b.json", &sim));
    let mc: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(mc["replications"], 3);
    assert_eq!(mc["coefficients"].as_array().unwrap().len(), 9);
    assert_eq!(mc["config"]["seed"], 7);

    let tpr = [
        "tpr-study", "--preset", "table3-panelA-t", "--reps", "2", "--n", "200", "--folds", "3", "--grid-size", "6",
        "--ratio", "0.01", "--seed", "4",
    ];
    assert_eq!(run("c.json", &tpr), run("d.json", &tpr));

    let data = dir.path().join("boot.csv");
    std::fs::write(
        &data,
        (0..80)
            .map(|i| {
                let x = (i as f64 * 0.37).sin();
                format!("{},{},{x}\n", 1.0 + x + 0.3 * (i as f64 * 1.3).cos(), -x + 0.2 * (i as f64 * 0.7).sin())
            })
            .fold(String::from("a,b,x\n"), |acc, l| acc + &l),
    )
    .unwrap();
    let boot = [
        "bootstrap", "--data", data.to_str().unwrap(), "--responses", "2", "--tau", "0.3,0.6", "--resamples", "5",
        "--seed", "9",
    ];
    let e = run("e.json", &boot);
    assert_eq!(e, run("f.json", &boot));
    let b: Value = serde_json::from_slice(&e).unwrap();
    assert_eq!(b["bootstrap"]["b"], 5);
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("mc.json");
    std::fs::write(
        &cfg,
        format!(r#"{{"preset": "table1-panelA", "reps": 2, "n": 200, "seed": 5, "out": {:?}}}"#, out.to_str().unwrap()),
    )
    .unwrap();
    let o = jointqr(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mc = read_json(&out);
    assert_eq!(mc["replications"], 2);
    assert_eq!(mc["config"]["n"], 200);
    assert_eq!(mc["config"]["seed"], 6);
}
