use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use otdepth_core::io::{read_dten, write_dten};
use otdepth_core::losses::evaluate;
use otdepth_core::Tensor;

fn otdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otdepth"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn write(dir: &Path, name: &str, t: &Tensor) -> String {
    let path: PathBuf = dir.join(name);
    write_dten(&path, t).unwrap();
    path.display().to_string()
}

#[test]
fn eval_prints_the_library_report() {
    let (pred, gt) = (fixture("ramp_pred.dten"), fixture("ramp_gt.dten"));
    let expected = evaluate(&read_dten(&pred).unwrap(), &read_dten(&gt).unwrap(), None)
        .unwrap()
        .to_csv();
    assert_eq!(stdout(&otdepth(&["eval", &pred, &gt])), expected);
}

#[test]
fn eval_of_a_uniformly_scaled_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let gt = Tensor::from_fn(&[1, 6, 6], |i| 1.0 + (i[1] * 6 + i[2]) as f64 / 10.0);
    let pred = gt.map(|v| 1.25 * v);
    let (p, g) = (
        write(dir.path(), "p.dten", &pred),
        write(dir.path(), "g.dten", &gt),
    );
    let text = stdout(&otdepth(&["eval", &p, &g]));
    let row: Vec<f64> = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert!((row[0] - 0.25).abs() < 1e-12, "abs_rel {}", row[0]);
    assert!((row[2] - 1.25f64.log10()).abs() < 1e-12, "log10 {}", row[2]);
    assert_eq!(row[3], 1.0);
}

#[test]
fn otdl_of_constant_maps_is_the_squared_gap() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "p.dten", &Tensor::full(&[1, 4, 4], 2.0));
    let g = write(dir.path(), "g.dten", &Tensor::full(&[1, 4, 4], 5.0));
    let grid = ["--d-min", "-0.5", "--d-max", "9.5", "--bins", "10"];
    for solver in ["exact1d", "lp"] {
        let mut args = vec!["otdl", &p, &g, "--solver", solver];
        args.extend(grid);
        assert_eq!(stdout(&otdepth(&args)).trim(), "9.0");
    }
    let same = stdout(&otdepth(&["otdl", &p, &p]));
    assert_eq!(same.trim().parse::<f64>().unwrap(), 0.0);
}

#[test]
fn exact_and_linear_program_agree_on_fixtures() {
    for (pred, gt) in [
        ("ramp_pred.dten", "ramp_gt.dten"),
        ("box_pred.dten", "box_gt.dten"),
    ] {
        let (p, g) = (fixture(pred), fixture(gt));
        let exact: f64 = stdout(&otdepth(&["otdl", &p, &g, "--solver", "exact1d"]))
            .trim()
            .parse()
            .unwrap();
        let linear: f64 = stdout(&otdepth(&["otdl", &p, &g, "--solver", "lp"]))
            .trim()
            .parse()
            .unwrap();
        assert!((exact - linear).abs() <= 1e-9, "{exact} vs {linear}");
        assert!(exact > 0.0);
    }
}

#[test]
fn otdl_writes_a_plan_with_the_right_marginals() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.dten");
    let (p, g) = (fixture("box_pred.dten"), fixture("box_gt.dten"));
    let plan_arg = plan.display().to_string();
    stdout(&otdepth(&[
        "otdl", &p, &g, "--bins", "16", "--plan", &plan_arg,
    ]));
    let t = read_dten(&plan).unwrap();
    assert_eq!(t.shape(), &[16, 16]);
    assert!((t.sum() - 1.0).abs() < 1e-12);
    assert!(t.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn malformed_and_mismatched_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.dten");
    std::fs::write(&junk, b"DTEN\x01garbage").unwrap();
    let junk = junk.display().to_string();
    let gt = fixture("ramp_gt.dten");
    let out = otdepth(&["eval", &junk, &gt]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.lines()
            .any(|l| l.starts_with("error:") && l.contains("offset")),
        "{err}"
    );

    let small = write(dir.path(), "small.dten", &Tensor::ones(&[1, 3, 3]));
    let out = otdepth(&["eval", &small, &gt]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape mismatch"));

    let out = otdepth(&["otdl", &gt, &gt, "--solver", "simplex"]);
    assert!(!out.status.success());
}

#[test]
fn config_files_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.run");
    std::fs::write(&cfg, "scope = tensor\nstepz = 3\n").unwrap();
    let cfg = cfg.display().to_string();
    let out = otdepth(&[
        "gradcheck",
        "--config",
        &cfg,
        "--out",
        &dir.path().display().to_string(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn unweighted_mask_keeps_every_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    let args = [
        "masksweep",
        "--predictor",
        "attn_toy",
        "--lambdas",
        "0",
        "--steps",
        "5",
        "--out",
        &out_dir,
    ];
    stdout(&otdepth(&args));
    let csv = std::fs::read_to_string(dir.path().join("masksweep_attn_toy.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    let sparseness: f64 = rows[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!(sparseness > 0.9, "{sparseness}");
}
