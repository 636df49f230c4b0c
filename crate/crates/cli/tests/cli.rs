use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rada(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rada"))
        .args(args)
        .env("RADA_THREADS", "1")
        .output()
        .expect("spawn rada")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen-synth", "--out", dir.to_str().unwrap(), "--classes", "4", "--dim", "8"];
    args.extend_from_slice(extra);
    rada(&args)
}

#[test]
fn gen_synth_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(gen(&a, &["--stream", "5"]).status.success());
    assert!(gen(&b, &["--stream", "5"]).status.success());
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn different_seed_changes_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, &[]);
    gen(&b, &["--seed", "1"]);
    assert_ne!(fs::read(a.join("base_test.rda")).unwrap(), fs::read(b.join("base_test.rda")).unwrap());
}

#[test]
fn resolved_config_is_printed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stdout(&gen(&tmp.path().join("d"), &[]));
    assert!(out.contains("config seed=0"));
    assert!(out.contains("config sigma=0.35"));
}

#[test]
fn train_eval_and_mask_stats_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let e = tmp.path().join("e");
    let m = tmp.path().join("m");
    gen(&d, &[]);
    let o = rada(&["train-eft", "--data", d.to_str().unwrap(), "--out", e.to_str().unwrap(), "--epochs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["history.csv", "report.txt", "adapter.rdam"] {
        assert!(e.join(f).exists(), "{f}");
    }
    let adapter = e.join("adapter.rdam");
    let o = rada(&["eval", "--data", d.to_str().unwrap(), "--adapter", adapter.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("hm="));
    let o = rada(&[
        "mask-stats",
        "--data",
        d.to_str().unwrap(),
        "--adapter",
        adapter.to_str().unwrap(),
        "--out",
        m.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let hist = fs::read_to_string(m.join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 65);
    for f in ["summary.txt", "mask.csv", "rational.csv", "masked_rational.csv"] {
        assert!(m.join(f).exists(), "{f}");
    }
}

#[test]
fn ttt_writes_per_sample_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let t = tmp.path().join("t");
    gen(&d, &["--stream", "4"]);
    let o = rada(&[
        "ttt",
        "--stream",
        d.join("ttt_stream.rda").to_str().unwrap(),
        "--classes",
        d.join("base_classes.rda").to_str().unwrap(),
        "--out",
        t.to_str().unwrap(),
        "--views",
        "15",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(t.join("ttt.csv")).unwrap();
    assert!(csv.starts_with("sample_id,zero_shot_pred,adapted_pred,label,entropy_step0,entropy_step3"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn missing_input_exits_with_io_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rada(&["eval", "--data", tmp.path().join("nope").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn contract_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    gen(&d, &[]);
    let o = rada(&[
        "train-fft-lite",
        "--data",
        d.to_str().unwrap(),
        "--out",
        tmp.path().join("f").to_str().unwrap(),
        "--stage2-reg",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("regularizer"));
    let o = rada(&["gen-synth", "--out", tmp.path().join("x").to_str().unwrap(), "--classes", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn corrupted_file_is_a_contract_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    gen(&d, &[]);
    let p = d.join("base_test.rda");
    let mut bytes = fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&p, bytes).unwrap();
    let o = rada(&["eval", "--data", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}

#[test]
fn help_lists_every_subcommand() {
    let o = rada(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for cmd in ["gen-synth", "train-eft", "train-fft-lite", "ttt", "eval", "gradcheck", "mi-verify", "mask-stats"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn bad_flag_values_are_rejected() {
    let o = rada(&["gradcheck", "--layers", "x"]);
    assert_eq!(o.status.code(), Some(1));
    let o = rada(&["ttt", "--rounding", "up"]);
    assert_eq!(o.status.code(), Some(1));
    let o = rada(&["mi-verify", "--ensembles", "3"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().filter(|l| l.contains("lemma=1")).count(), 3);
}
