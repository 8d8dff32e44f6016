use std::path::Path;
use std::process::Command;

fn tapkit(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tapkit")).args(args).output().expect("spawn tapkit")
}

fn code(args: &[&str]) -> i32 {
    tapkit(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = ["--set", "frames=6", "--set", "height=24", "--set", "width=24"];
const FAST: [&str; 8] = ["--set", "sup_batch=2", "--set", "ssl_batch=1", "--set", "queries_per_video=4", "--set", "warmup=1"];

fn gen(dir: &Path, domain: &str, clips: &str, extra: &[&str]) {
    let mut args = vec!["gen", "--domain", domain, "--clips", clips, "--out", s(dir)];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    let out = tapkit(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = walkdir::WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file() && e.file_name() != "manifest.json")
        .map(|e| (e.path().strip_prefix(root).unwrap().display().to_string(), std::fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn exit_codes() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["gen", "--domain", "A", "--clips", "1", "--out", "/tmp/x", "--bogus"]), 1);
    assert_eq!(code(&["eval", "--checkpoint", "/nonexistent/ck.btap", "--data", "/nonexistent"]), 2);
    assert_eq!(code(&["gradcheck", "--scope", "op"]), 0);
    assert_eq!(code(&["gradcheck", "--scope", "model", "--inject-fault", "conv-kernel-grad"]), 3);
    assert_eq!(code(&["gradcheck", "--scope", "nope"]), 1);
}

#[test]
fn gen_is_deterministic_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "A", "1", &["--seed", "5"]);
    gen(&b, "A", "1", &["--seed", "5"]);
    assert_eq!(files(&a), files(&b));

    let mut args = vec!["gen", "--domain", "A", "--clips", "1", "--out", s(&a)];
    args.extend_from_slice(&SMALL);
    assert_eq!(code(&args), 2);
    args.push("--force");
    assert_eq!(code(&args), 0);
    assert_eq!(code(&["gen", "--domain", "A", "--clips", "1", "--out", s(&tmp.path().join("c")), "--set", "nope=1"]), 1);
}

#[test]
fn domain_b_training_split_is_unlabeled() {
    let tmp = tempfile::tempdir().unwrap();
    let b = tmp.path().join("b");
    gen(&b, "B", "2", &["--eval-clips", "1"]);
    let train: Vec<_> = files(&b.join("train")).into_iter().map(|f| f.0).collect();
    assert!(!train.is_empty() && train.iter().all(|f| !f.ends_with("tracks.json")), "{train:?}");
    assert!(files(&b.join("eval")).iter().any(|f| f.0.ends_with("tracks.json")));
    assert!(b.join("manifest.json").exists());
}

#[test]
fn pipeline_end_to_end_and_eval_is_bit_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n).display().to_string();
    gen(Path::new(&p("A")), "A", "3", &[]);
    gen(Path::new(&p("B")), "B", "2", &["--eval-clips", "2"]);
    let (a, pre, b_train, b_eval) = (p("A/train"), p("pre"), p("B/train"), p("B/eval"));

    let mut train = vec!["train", "--labeled", &a, "--out", &pre, "--steps", "3"];
    train.extend_from_slice(&FAST);
    assert_eq!(code(&train), 0);
    let ck = p("pre/final.btap");
    for f in ["config.kv", "log.jsonl", "manifest.json", "summary.json"] {
        assert!(Path::new(&pre).join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(p("pre/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);

    let ev = |out: &str| {
        let o = tapkit(&["eval", "--checkpoint", &ck, "--data", &b_eval, "--out", &p(out)]);
        assert!(o.status.success());
        o.stdout
    };
    assert_eq!(ev("e1"), ev("e2"));
    assert!(Path::new(&p("e1/per_video.csv")).exists());

    let boot_out = p("boot");
    let boot = |ablation: &str| {
        let mut args = vec![
            "bootstrap", "--init", &ck, "--labeled", &a, "--unlabeled", &b_train, "--eval", &b_eval,
            "--out", &boot_out, "--steps", "2", "--ablation", ablation, "--ablation", "SIAMESE",
        ];
        args.extend_from_slice(&FAST);
        tapkit(&args)
    };
    let o = boot("BASE-no-affine");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let kv = std::fs::read_to_string(p("boot/no-affine/config.kv")).unwrap();
    assert!(kv.contains("use_affine = false"));
    assert!(Path::new(&p("boot/siamese/final.btap")).exists());
    assert_eq!(boot("BASE-nonsense").status.code(), Some(1));

    let clip = p("B/train/clip_00000");
    assert_eq!(code(&["render", "--checkpoint", &ck, "--clip", &clip, "--out", &p("r"), "--max-tracks", "4"]), 0);
    let pngs = std::fs::read_dir(p("r")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 6);
    assert_eq!(code(&["render", "--checkpoint", &ck, "--clip", &p("missing"), "--out", &p("r2")]), 2);
}
