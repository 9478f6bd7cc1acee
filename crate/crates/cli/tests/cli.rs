use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vfi_core::video::{load_video, VideoManifest, MANIFEST_FILE};

/// Overrides shrinking every stage to a few seconds.
const TINY: &[&str] = &[
    "data.train_count=2",
    "data.eval_count=1",
    "data.frames=9",
    "data.height=16",
    "data.width=16",
    "codec.latent_channels=2",
    "codec.base_width=4",
    "tiles.tile=8",
    "tiles.stride=4",
    "chunks.len=4",
    "denoiser.model_dim=8",
    "denoiser.head_count=2",
    "denoiser.layer_count=1",
    "denoiser.token_patch=1",
    "denoiser.spatial_chunk=2",
    "denoiser.latent_channels=2",
    "denoiser.cond_channels=4",
    "training.vae.steps=2",
    "training.vae.batch=2",
    "training.vae.crop=16",
    "training.dit.steps=2",
    "training.dit.batch=2",
    "inference.steps=2",
];

fn vfi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfi")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn tiny(cmd: &str, rest: &[&str]) -> Output {
    let mut args = vec![cmd];
    for o in TINY {
        args.extend(["--set", o]);
    }
    args.extend(rest);
    vfi(&args)
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> VideoManifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

/// Relative path and bytes of every file under `root`.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_the_requested_clips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    ok(vfi(&["gen-data", "--set", "data.train_count=16", "--set", "data.eval_count=2", "--out", s(&out)]));
    let mut clips: Vec<_> = fs::read_dir(out.join("train")).unwrap().map(|e| e.unwrap().path()).collect();
    clips.sort();
    assert_eq!(clips.len(), 16);
    for clip in &clips {
        let m = manifest(clip);
        assert_eq!((m.frame_count, m.height, m.width), (33, 64, 64));
        assert_eq!(m.frame_files.len(), 33);
    }
    assert_eq!(fs::read_dir(out.join("eval")).unwrap().count(), 2);
    let train_seeds: Vec<_> = clips.iter().map(|c| manifest(c).generator_seed.unwrap()).collect();
    let eval_seed = manifest(&out.join("eval/clip_0000")).generator_seed.unwrap();
    assert!(!train_seeds.contains(&eval_seed));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(tiny("gen-data", &["--out", s(&a)]));
    ok(tiny("gen-data", &["--out", s(&b)]));
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn empty_corpus_warns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let res = ok(vfi(&["gen-data", "--set", "data.train_count=0", "--out", s(&out)]));
    assert_eq!(fs::read_dir(out.join("train")).unwrap().count(), 0);
    assert!(String::from_utf8_lossy(&res.stderr).contains("empty"));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(vfi(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(vfi(&["gen-data", "--set", "data.nope=1", "--out", s(&out)]).status.code(), Some(1));
    let bad = vfi(&["gen-data", "--set", "tiles.stride=5", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("tiles"));
    assert_eq!(vfi(&["plan", "--chunks", "0"]).status.code(), Some(1));
    assert_eq!(vfi(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(tiny("gen-data", &["--out", s(&corpus)]));
    let missing = dir.path().join("nothing");
    let res = tiny(
        "interpolate",
        &["--input", s(&corpus.join("eval/clip_0000")), "--vae", s(&missing), "--dit", s(&missing), "--out", s(&dir.path().join("o"))],
    );
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("checkpoint"));
}

#[test]
fn plan_and_error_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ok(vfi(&["plan", "--chunks", "5"]));
    let json: serde_json::Value = serde_json::from_slice(&plan.stdout).unwrap();
    let kinds: Vec<&str> = json.as_array().unwrap().iter().map(|step| step["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, vec!["skip", "skip", "concatenate", "skip", "concatenate"]);
    let res = ok(vfi(&["simulate-error", "--chunks", "16", "--transfer", "0.5", "--out", s(dir.path())]));
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.contains("skip_concat: max error 1.5"), "{text}");
    let causal = fs::read_to_string(dir.path().join("causal.csv")).unwrap();
    assert!(causal.starts_with("chunk_id,kind,error\n"));
    assert_eq!(causal.lines().count(), 17);
}

#[test]
fn full_lifecycle_on_a_tiny_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    ok(tiny("gen-data", &["--out", s(&p("corpus"))]));
    ok(tiny("train-vae", &["--corpus", s(&p("corpus")), "--out", s(&p("vae"))]));
    assert!(fs::read_to_string(p("vae/vae_trace.csv")).unwrap().lines().count() == 3);
    ok(tiny("train-dit", &["--corpus", s(&p("corpus")), "--vae", s(&p("vae/vae")), "--out", s(&p("dit"))]));
    assert!(fs::read_to_string(p("dit/dit_trace.csv")).unwrap().starts_with("step,loss\n"));

    let gt = p("corpus/eval/clip_0000");
    ok(vfi(&["downsample", "--input", s(&gt), "--s", "2", "--out", s(&p("lq"))]));
    assert_eq!(manifest(&p("lq")).frame_count, 5);

    let mut lengths = Vec::new();
    for mode in ["causal", "skip-concat", "skip-concat"] {
        let out = p(&format!("out_{}", lengths.len()));
        ok(tiny(
            "interpolate",
            &[
                "--input", s(&p("lq")), "--vae", s(&p("vae/vae")), "--dit", s(&p("dit/dit")),
                "--out", s(&out), "--gt", s(&gt), "--mode", mode, "--seed", "3",
            ],
        ));
        let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(report["frame_count"], 2 * (5 - 1) + 1);
        assert_eq!(report["seed"], 3);
        assert_eq!(report["per_frame_psnr"].as_array().unwrap().len(), 9);
        assert!(out.join("timing.json").is_file());
        lengths.push(load_video(&out.join(MANIFEST_FILE)).unwrap().len());
    }
    assert_eq!(lengths, vec![9, 9, 9]);
    // Same seed and mode give identical bytes, timing aside.
    let strip = |t: Vec<(PathBuf, Vec<u8>)>| t.into_iter().filter(|e| e.0 != Path::new("timing.json")).collect::<Vec<_>>();
    assert_eq!(strip(tree(&p("out_1"))), strip(tree(&p("out_2"))));

    ok(tiny(
        "ablate",
        &["--corpus", s(&p("corpus")), "--vae", s(&p("vae/vae")), "--dit", s(&p("dit/dit")), "--out", s(&p("ablation.csv"))],
    ));
    let csv = fs::read_to_string(p("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, vec!["row", "causal/uncond", "skip_concat/uncond", "skip_concat/cond", "zero_pad", "nearest"]);
}
