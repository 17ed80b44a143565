use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stn-icnn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, count: &str, test: &str) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen-synth", "--out", p(&data), "--count", count, "--test", test, "--size", "96x96", "--seed", "3"]);
    data
}

#[test]
fn gen_synth_writes_the_dataset_layout() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "5", "2");
    assert_eq!(fs::read_to_string(data.join("exemplars.txt")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_to_string(data.join("testing.txt")).unwrap().lines().count(), 2);
    assert!(data.join("images/synth_00000.png").exists());
    assert!(data.join("labels/synth_00000/synth_00000_lbl10.png").exists());
    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("command = gen-synth\n"));

    let again = dir.path().join("again");
    ok(&["gen-synth", "--out", p(&again), "--count", "5", "--test", "2", "--size", "96x96", "--seed", "3"]);
    for f in ["images/synth_00004.png", "labels/synth_00004/synth_00004_lbl05.png", "synth_truth.txt"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    assert_eq!(code(&run(&["gen-synth", "--out", p(&again), "--size", "96by96"])), 1);
    assert_eq!(code(&run(&["gen-synth", "--out", p(&again), "--size", "60x60"])), 1);
}

#[test]
fn oracle_eval_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "4", "2");
    let report = dir.path().join("r/report.txt");
    let out = ok(&["eval", "--data", p(&data), "--oracle", "--report", p(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(out, text);
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["model", "eyes", "brows", "nose", "I-mouth", "U-lip", "L-lip", "mouth", "overall"]);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row[0], "oracle");
    assert!(row[1..].iter().all(|v| v.parse::<f64>().unwrap() == 1.0), "{row:?}");
}

#[test]
fn crop_compare_windows() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "6", "6");
    let out = dir.path().join("crop");
    let text = ok(&["crop-compare", "--data", p(&data), "--out", p(&out), "--window", "41"]);
    assert!(text.contains("summary parts 36 missing 0 max_abs_diff 0.00000000 above_1e-3 0"), "{text}");
    assert!(out.join("summary.txt").exists());
    assert!(out.join("synth_00000_nose.png").exists());

    let even = run(&["crop-compare", "--data", p(&data), "--out", p(&out), "--window", "40"]);
    assert_eq!(code(&even), 1);
    assert!(stderr(&even).contains("--allow-even"));
    let text = ok(&["crop-compare", "--data", p(&data), "--out", p(&out), "--window", "40", "--allow-even"]);
    assert!(text.contains("above_1e-3 36"), "{text}");

    let text = ok(&["crop-compare", "--data", p(&data), "--out", p(&out), "--window", "41", "--occlude", "nose"]);
    assert!(text.contains("missing 6 "), "{text}");
    assert_eq!(code(&run(&["crop-compare", "--data", p(&data), "--out", p(&out), "--occlude", "ear"])), 1);
}

#[test]
fn grad_check_suites_and_corruption() {
    let o = run(&["grad-check", "--suite", "losses"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("bce_with_logits"));
    let o = run(&["grad-check", "--suite", "losses", "--corrupt", "smooth_l1"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(code(&run(&["grad-check", "--suite", "nothing"])), 1);
    assert_eq!(code(&run(&["grad-check", "--corrupt", "nothing"])), 1);
}

#[test]
fn config_files_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "3", "1");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epoch = 2\n").unwrap();
    let out = dir.path().join("c");
    let o = run(&["pretrain-coarse", "--data", p(&data), "--out", p(&out), "--config", p(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown config key"));

    fs::write(&cfg, "lr_new = 0.001\nlr_pretrained = 0.01\n").unwrap();
    assert_eq!(code(&run(&["pretrain-coarse", "--data", p(&data), "--out", p(&out), "--config", p(&cfg)])), 1);
    fs::write(&cfg, "targets = sideways\n").unwrap();
    assert_eq!(code(&run(&["pretrain-coarse", "--data", p(&data), "--out", p(&out), "--config", p(&cfg)])), 1);

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    fs::write(empty.join("exemplars.txt"), "").unwrap();
    assert_eq!(code(&run(&["pretrain-coarse", "--data", p(&empty), "--out", p(&out), "--epochs", "1"])), 2);
}

fn train(phase: &str, data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![phase, "--data", p(data), "--out", p(out), "--batch-size", "2", "--eval-split", "none"];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn training_commands_chain_resume_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "5", "1");
    let d = dir.path();
    let ck = |name: &str| d.join(name).join("model.ckpt");
    let ckpt = |name: &str| ck(name).to_str().unwrap().to_string();

    train("pretrain-coarse", &data, &d.join("c1"), &["--epochs", "2"]);
    train("pretrain-coarse", &data, &d.join("c2"), &["--epochs", "2"]);
    assert_eq!(fs::read(d.join("c1/train.log")).unwrap(), fs::read(d.join("c2/train.log")).unwrap());
    assert_eq!(fs::read(ck("c1")).unwrap(), fs::read(ck("c2")).unwrap());
    let manifest = fs::read_to_string(d.join("c1/manifest.txt")).unwrap();
    assert!(manifest.contains("command = pretrain-coarse\n") && manifest.contains("lr_new = 0.2\n"));

    train("pretrain-coarse", &data, &d.join("c3"), &["--epochs", "1"]);
    train("pretrain-coarse", &data, &d.join("c3"), &["--epochs", "2", "--resume", &ckpt("c3")]);
    assert_eq!(fs::read(d.join("c1/train.log")).unwrap(), fs::read(d.join("c3/train.log")).unwrap());
    assert_eq!(fs::read(ck("c1")).unwrap(), fs::read(ck("c3")).unwrap());

    let o = run(&["pretrain-loc", "--data", p(&data), "--out", p(&d.join("l")), "--epochs", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("coarse checkpoint required"));
    let o = run(&["train-e2e", "--data", p(&data), "--out", p(&d.join("e")), "--from", &ckpt("c1")]);
    assert_eq!(code(&o), 1);

    let log = train("pretrain-loc", &data, &d.join("l"), &["--epochs", "1", "--from", &ckpt("c1")]);
    assert!(log.starts_with("epoch 1 phase locnet loss "));
    let log = train("train-e2e", &data, &d.join("e"), &["--epochs", "1", "--from", &ckpt("l")]);
    assert!(log.starts_with("epoch 1 phase e2e loss "));

    let report = d.join("eval/report.txt");
    let o = run(&["eval", "--data", p(&data), "--ckpt", &ckpt("l"), "--report", p(&report)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("incomplete checkpoint"));
    let labels = d.join("eval/labels");
    let text = ok(&["eval", "--data", p(&data), "--ckpt", &ckpt("e"), "--report", p(&report), "--labels-out", p(&labels)]);
    assert!(text.lines().nth(1).unwrap().starts_with("stn-icnn"));
    let png = image::open(labels.join("synth_00004.png")).unwrap();
    assert_eq!((png.width(), png.height()), (96, 96));

    let mut bytes = fs::read(ck("e")).unwrap();
    bytes.truncate(bytes.len() / 2);
    let broken = d.join("broken.ckpt");
    fs::write(&broken, bytes).unwrap();
    assert_eq!(code(&run(&["eval", "--data", p(&data), "--ckpt", p(&broken), "--report", p(&report)])), 2);
}
