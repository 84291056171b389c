use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 9] =
    ["gen-data", "train", "eval", "gradcheck", "bias-init", "bench-shard", "ablate", "noise", "plot-data"];

fn sf2(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sf2")).current_dir(dir).args(args).output().expect("spawn sf2")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Data rows of a `#`-headed CSV, split into cells.
fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

const SMALL: &[&str] = &["--K", "6", "--per_class", "8", "--test_per_class", "6", "--n_pos", "40", "--n_neg", "60", "--epochs", "3"];

#[test]
fn bias_init_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let o = sf2(dir.path(), &["bias-init", "--lambda", "0.7", "--K", "10", "--r", "30", "--m", "0.4", "--t", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("# lambda,K,r,m,t,b,b_direct,residual"));
    let row = &rows(&out)[0];
    let b: f64 = row[5].parse().unwrap();
    let residual: f64 = row[7].parse().unwrap();
    assert!((b + 13.0498).abs() < 5e-5, "b = {b}");
    assert!(residual <= 1e-10);
    assert!(dir.path().join("out/bias_init.csv").exists());
}

#[test]
fn gradcheck_final_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = sf2(dir.path(), &["gradcheck", "--loss", "final", "--trials", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row = &rows(&stdout(&o))[0];
    assert_eq!(row[0], "final");
    assert_eq!(row[5], "PASS");
    assert!(row[3].parse::<f64>().unwrap() <= 1e-5);
}

#[test]
fn gradcheck_with_a_coarse_step_fails_with_an_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = sf2(dir.path(), &["gradcheck", "--loss", "final", "--trials", "3", "--step", "0.3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    assert!(stderr(&o).starts_with("error,check,"));
}

#[test]
fn unknown_and_malformed_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = sf2(dir.path(), &["train", "--no_such_key", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error,config,"));

    std::fs::write(dir.path().join("bad.txt"), "epochs = 2\nwidth = 3\n").unwrap();
    let o = sf2(dir.path(), &["train", "--config", "bad.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2: unknown key 'width'"), "{}", stderr(&o));

    let o = sf2(dir.path(), &["bias-init", "--lambda", "high"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_every_key_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    let keys = ["seed", "out", "K", "lambda", "r", "m", "t", "lr", "momentum", "bias_init", "far", "curve", "s"];
    for cmd in SUBCOMMANDS {
        let o = sf2(dir.path(), &[cmd, "--help"]);
        assert!(o.status.success());
        let help = stdout(&o);
        for k in keys {
            assert!(help.lines().any(|l| l.trim_start().starts_with(&format!("{k} ")) && l.contains("[default: ")), "{cmd}: {k}");
        }
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.txt"), "# bias grid point\nlambda = 0.5\nK = 1000 # many classes\nt = 5\n").unwrap();
    let o = sf2(dir.path(), &["bias-init", "--config", "c.txt", "--K", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row = &rows(&stdout(&o))[0];
    assert_eq!(&row[..5], ["0.5", "10", "30", "0.4", "5"]);
}

#[test]
fn easyhard_curve_matches_the_softmax_formula() {
    let dir = tempfile::tempdir().unwrap();
    let o = sf2(dir.path(), &["plot-data", "--curve", "easyhard", "--s", "4,8,16", "--points", "21"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("# cos_y,s_4,s_8,s_16\n"));
    let table = rows(&out);
    assert_eq!(table.len(), 21);
    for row in &table {
        let c: f64 = row[0].parse().unwrap();
        for (j, s) in [4.0f64, 8.0, 16.0].iter().enumerate() {
            let want = -((s * c).exp() / ((s * c).exp() + 3.0 * (s * 0.2).exp())).ln();
            let got: f64 = row[j + 1].parse().unwrap();
            assert!((got - want).abs() < 1e-12, "cos {c} s {s}: {got} vs {want}");
        }
    }
    // harder samples cost more at larger scale
    assert!(table[0][3].parse::<f64>().unwrap() > table[0][1].parse::<f64>().unwrap());
}

#[test]
fn other_curves_have_their_headers() {
    let dir = tempfile::tempdir().unwrap();
    for (curve, header) in [
        ("curvature", "# cos_y,r_4,r_8,r_16"),
        ("simadjust", "# z,t_1,t_2,t_3,t_5"),
        ("margin", "# theta,none,sf2_c,sf2_a,sf2_m"),
    ] {
        let o = sf2(dir.path(), &["plot-data", "--curve", curve, "--points", "11"]);
        assert!(o.status.success(), "{curve}: {}", stderr(&o));
        assert!(stdout(&o).starts_with(header), "{curve}");
        assert_eq!(rows(&stdout(&o)).len(), 11);
    }
}

#[test]
fn train_eval_and_histogram_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    let o = sf2(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(rows(&stdout(&o)).len(), 3);
    let out = dir.path().join("out");
    for f in ["model.json", "history.csv", "features.csv", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let features = std::fs::read_to_string(out.join("features.csv")).unwrap();
    assert!(features.starts_with("# K=6 D_feat=64 r=30 m=0.4 lambda=0.7 t=3 b="));

    let mut args = vec!["eval", "--far", "0.1,0.5"];
    args.extend_from_slice(SMALL);
    let o = sf2(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = stdout(&o);
    assert!(metrics.starts_with("# metric,param,value\n"));
    let acc: f64 = rows(&metrics)[0][2].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(metrics.contains("tar,far=0.5,"));

    let o = sf2(dir.path(), &["plot-data", "--curve", "histogram", "--bins", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hist = rows(&stdout(&o));
    assert_eq!(hist.len(), 20);
    let pos: f64 = hist.iter().map(|r| r[2].parse::<f64>().unwrap()).sum();
    assert!((pos - 1.0).abs() < 1e-9);
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let mut args = vec!["train", "--out", out];
        args.extend_from_slice(SMALL);
        assert!(sf2(dir.path(), &args).status.success());
        assert!(sf2(dir.path(), &["gen-data", "--out", out, "--K", "4", "--per_class", "3"]).status.success());
    }
    for f in ["model.json", "history.csv", "features.csv", "train.csv", "test.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn generated_data_can_be_trained_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let o = sf2(dir.path(), &["gen-data", "--K", "3", "--per_class", "5", "--out", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = sf2(dir.path(), &["train", "--data_dir", "data", "--epochs", "2", "--n_pos", "10", "--n_neg", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = sf2(dir.path(), &["train", "--data_dir", "missing"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error,io,"));
}

#[test]
fn small_ablation_noise_and_bench_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate"];
    args.extend_from_slice(SMALL);
    let o = sf2(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let labels: Vec<String> = rows(&stdout(&o)).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(labels, ["none", "PN", "PN+EH", "PN+EH+AM", "PN+EH+AM+SA"]);

    let mut args = vec!["noise", "--rates", "0,0.4"];
    args.extend_from_slice(SMALL);
    let o = sf2(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(rows(&stdout(&o)).len(), 4);

    let o = sf2(dir.path(), &["bench-shard", "--bench_K", "256", "--bench_D", "8", "--shards", "1,2", "--reps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = rows(&stdout(&o));
    assert_eq!(table.len(), 4);
    assert!(table.iter().filter(|r| r[0] == "sphereface2").all(|r| r[6] == "0"));
}
