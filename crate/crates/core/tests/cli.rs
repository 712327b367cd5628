use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_advnmt");

/// Small enough for debug builds.
const TINY: [&str; 10] = [
    "--preset",
    "reverse-tiny",
    "--set",
    "train_size=40",
    "--set",
    "dev_size=6",
    "--set",
    "mle_epochs=1",
    "--set",
    "d_epochs=1",
];

fn advnmt(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("ADVNMT_OUT_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = advnmt(args);
    assert!(
        out.status.success(),
        "advnmt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_tiny<'a>(cmd: &'a str, out_dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(&TINY);
    v.extend_from_slice(&["--out-dir", out_dir]);
    v.extend_from_slice(extra);
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(advnmt(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(advnmt(&["pretrain-mle", "--preset", "reverse-huge"]).status.code(), Some(1));
    let out = advnmt(&["pretrain-mle", "--preset", "copy-tiny", "--set", "no_such_key=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    assert_eq!(advnmt(&["translate", "--beam", "4"]).status.code(), Some(1));
}

#[test]
fn help_and_presets_succeed() {
    assert_eq!(advnmt(&["--help"]).status.code(), Some(0));
    let presets = ok(&["presets"]);
    for name in ["copy-tiny", "reverse-small", "shift-medium"] {
        assert!(presets.lines().any(|l| l == name), "{presets}");
    }
}

#[test]
fn grad_check_passes_and_fault_injection_fails() {
    let out = ok(&["grad-check", "--seed", "3"]);
    assert!(out.contains("max_rel_err="), "{out}");
    let bad = advnmt(&["grad-check", "--scope", "generator", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(advnmt(&["grad-check", "--scope", "decoder"]).status.code(), Some(1));
}

#[test]
fn evaluate_reports_bleu_and_names_mismatched_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    fs::write(&a, "the cat sat on the mat\na b c d e\n").unwrap();
    fs::write(&b, "the cat sat on the mat\n").unwrap();
    assert!(ok(&["evaluate", "--hyp", s(&a), "--ref", s(&a)]).starts_with("BLEU=100.00"));
    let out = advnmt(&["evaluate", "--hyp", s(&a), "--ref", s(&b)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("a.txt") && err.contains("b.txt"), "{err}");
}

#[test]
fn mle_pretraining_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (one, two) = (dir.path().join("one"), dir.path().join("two"));
    let out = ok(&with_tiny("pretrain-mle", s(&one), &[]));
    assert!(out.contains("final dev_loss="), "{out}");
    ok(&with_tiny("pretrain-mle", s(&two), &[]));
    let bytes = |d: &Path| fs::read(d.join("generator.ckpt")).unwrap();
    assert_eq!(bytes(&one), bytes(&two));
    assert_eq!(
        fs::read_to_string(one.join("metrics.log")).unwrap(),
        fs::read_to_string(two.join("metrics.log")).unwrap()
    );
    let three = dir.path().join("three");
    ok(&with_tiny("pretrain-mle", s(&three), &["--seed", "9"]));
    assert_ne!(bytes(&one), bytes(&three));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (mle, d, adv, data) = (root.join("mle"), root.join("d"), root.join("adv"), root.join("data"));
    ok(&with_tiny("gen-data", s(&data), &[]));
    let dev_lines = fs::read_to_string(data.join("dev.src")).unwrap().lines().count();
    assert_eq!(dev_lines, 6);

    ok(&with_tiny("pretrain-mle", s(&mle), &[]));
    let g = mle.join("generator.ckpt");
    let out = ok(&with_tiny("pretrain-d", s(&d), &["--generator", s(&g)]));
    assert!(out.contains("heldout_accuracy="), "{out}");
    let a = d.join("adversary.ckpt");

    // fraction 0: every joint iteration is an MLE step, one log line each
    let out = ok(&with_tiny(
        "train-adv",
        s(&adv),
        &["--generator", s(&g), "--adversary", s(&a), "--set", "adv_fraction=0.0", "--set", "adv_epochs=1"],
    ));
    let iterations: usize = out
        .split_whitespace()
        .find_map(|w| w.strip_prefix("iterations="))
        .unwrap()
        .parse()
        .unwrap();
    let log = fs::read_to_string(adv.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), iterations);
    assert!(log.lines().all(|l| l.contains("kind=mle")), "{log}");
    assert!(adv.join("epoch-001/state.toml").exists());

    // an empty input line gives an empty output line
    let input = root.join("in.txt");
    let src = fs::read_to_string(data.join("dev.src")).unwrap();
    let first = src.lines().next().unwrap();
    fs::write(&input, format!("{first}\n\n{first}\n")).unwrap();
    let (beam1, beam4) = (root.join("b1.txt"), root.join("b4.txt"));
    let trained = adv.join("generator.ckpt");
    let (sv, tv) = (mle.join("src.vocab"), mle.join("tgt.vocab"));
    let vocab = ["--src-vocab", s(&sv), "--tgt-vocab", s(&tv)];
    let mut args = vec!["translate", "--generator", s(&trained), "--input", s(&input), "--output", s(&beam1)];
    args.extend_from_slice(&vocab);
    ok(&[&args[..], &["--beam", "1"]].concat());
    let lines: Vec<String> = fs::read_to_string(&beam1).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].is_empty());
    assert_eq!(lines[0], lines[2]);
    let mut args4 = args.clone();
    args4[6] = s(&beam4);
    ok(&[&args4[..], &["--beam", "4", "--unk-replace"]].concat());
    assert_eq!(fs::read_to_string(&beam4).unwrap().lines().count(), 3);

    let report = root.join("cases.tsv");
    let (dev_src, dev_tgt) = (data.join("dev.src"), data.join("dev.tgt"));
    let mut case = vec![
        "case-report",
        "--generator",
        s(&trained),
        "--adversary",
        s(&a),
        "--source",
        s(&dev_src),
        "--ref",
        s(&dev_tgt),
        "--output",
        s(&report),
    ];
    case.extend_from_slice(&vocab);
    ok(&case);
    assert!(fs::read_to_string(&report).unwrap().lines().count() >= 6);

    // a generator of another size is refused with both dims named
    let other = root.join("other");
    ok(&with_tiny("pretrain-mle", s(&other), &["--set", "emb_dim=5"]));
    let out = advnmt(&with_tiny(
        "train-adv",
        s(&root.join("bad")),
        &["--generator", s(&other.join("generator.ckpt")), "--adversary", s(&a)],
    ));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('5') && err.contains('8'), "{err}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mle = root.join("mle");
    ok(&with_tiny("pretrain-mle", s(&mle), &[]));
    let g = mle.join("generator.ckpt");
    ok(&with_tiny("pretrain-d", s(&root.join("d")), &["--generator", s(&g)]));
    let a = root.join("d").join("adversary.ckpt");
    let models = ["--generator", s(&g), "--adversary", s(&a)];

    let (full, split) = (root.join("full"), root.join("split"));
    ok(&with_tiny("train-adv", s(&full), &[&models[..], &["--set", "adv_epochs=2"]].concat()));
    ok(&with_tiny("train-adv", s(&split), &[&models[..], &["--set", "adv_epochs=1"]].concat()));
    ok(&with_tiny("train-adv", s(&split), &["--resume", "--set", "adv_epochs=2"]));
    for f in ["generator.ckpt", "adversary.ckpt", "metrics.log"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f} differs");
    }
}
