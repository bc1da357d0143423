use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use boxdet::data::{
    generate_synthetic_scene, label_path, label_text, AnnotatedImage, Dataset, DatasetManifest,
    SyntheticSceneSpec,
};
use boxdet::data::image::save_png;
use boxdet::eval::{detect_all, evaluate, probability_gap_analysis, true_positives, EvalOptions, EVAL_FLOOR};
use boxdet::network::NetworkConfig;
use boxdet::train::{checkpoint_name, select_best_checkpoint, CheckpointRecord};
use boxdet::transfer::{estimate_anchors, load_weights, save_weights};
use boxdet::{mix_seed, Exec};
use tempfile::TempDir;

const WIDTHS: &str = "4,4,8,8,16,16";

fn boxdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxdet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", s(dir), "--size", "64", "--seed", "5"];
    args.extend_from_slice(extra);
    boxdet(&args)
}

/// A generic one-class dataset, a network description fitted to it and a
/// short training run with eight checkpoints.
struct Trained {
    dir: TempDir,
}

impl Trained {
    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    fn manifest(&self) -> PathBuf {
        self.data().join("train.txt")
    }

    fn network(&self) -> PathBuf {
        self.dir.path().join("net.cfg")
    }

    fn run(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn final_weights(&self) -> PathBuf {
        self.run().join("final.ylw")
    }
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Trained {
            dir: tempfile::tempdir().unwrap(),
        };
        let out = synth(&t.data(), &["--classes", "1", "--train-per-class", "24", "--generic"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = boxdet(&[
            "anchors",
            "--manifest",
            s(&t.manifest()),
            "--k",
            "2",
            "--input",
            "64",
            "--widths",
            WIDTHS,
            "--network-out",
            s(&t.network()),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = train_args(&t, &t.run(), 200, &["--set", "train.checkpoints=25,50,75,100,125,150,175,200", "--set", "train.stop_on_loss=false"]);
        assert_eq!(code(&out), 1, "{}", stderr(&out));
        t
    })
}

fn train_args(t: &Trained, out_dir: &Path, iterations: usize, extra: &[&str]) -> Output {
    let iterations = iterations.to_string();
    let (manifest, network) = (t.manifest(), t.network());
    let mut args = vec![
        "train",
        "--manifest",
        s(&manifest),
        "--network",
        s(&network),
        "--out",
        s(out_dir),
        "--max-iterations",
        &iterations,
        "--seed",
        "3",
        "--set",
        "train.batch_size=4",
        "--set",
        "train.warmup_iterations=0",
        "--set",
        "train.learning_rate=0.003",
    ];
    args.extend_from_slice(extra);
    boxdet(&args)
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_path_buf();
                let bytes = std::fs::read(&p).unwrap();
                let bytes = String::from_utf8(bytes.clone())
                    .map(|text| text.replace(s(dir), "").into_bytes())
                    .unwrap_or(bytes);
                out.push((rel, bytes));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_rejects_zero_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth(dir.path(), &["--classes", "0", "--train-per-class", "3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("classes"));
}

#[test]
fn synth_counts_and_is_repeatable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let flags = ["--classes", "3", "--train-per-class", "4", "--val-per-class", "2", "--hard-negatives", "2"];
    let out = synth(a.path(), &flags);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        stdout(&out),
        "class,train,validation\nbrand00,4,2\nbrand01,4,2\nbrand02,4,2\nhard_negative,2,0\n"
    );
    assert_eq!(code(&synth(b.path(), &flags)), 0);
    let fa = files_under(a.path());
    assert_eq!(fa.iter().filter(|f| f.0.extension().is_some_and(|e| e == "png")).count(), 20);
    assert_eq!(fa, files_under(b.path()));
    let train = DatasetManifest::load(a.path().join("train.txt")).unwrap();
    assert_eq!(train.images.len(), 14);
    assert_eq!(train.class_names, ["brand00", "brand01", "brand02"]);
}

#[test]
fn anchors_match_library() {
    let t = trained();
    let out = boxdet(&["anchors", "--manifest", s(&t.manifest()), "--k", "2", "--seed", "9", "--input", "64"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let shapes = Dataset::new(DatasetManifest::load(t.manifest()).unwrap().load_samples(Exec::Sequential).unwrap())
        .box_shapes();
    let expected: String = estimate_anchors(&shapes, 2, 2.0, 9)
        .unwrap()
        .iter()
        .map(|(w, h)| format!("{w},{h}\n"))
        .collect();
    assert_eq!(stdout(&out), format!("w,h\n{expected}"));
}

#[test]
fn surgery_reports_filter_change() {
    let dir = tempfile::tempdir().unwrap();
    let anchors = "1,1,2,2,3,3,4,4,5,5";
    let src_cfg = NetworkConfig::compact(
        64,
        [4, 4, 8, 8, 16, 16],
        boxdet::network::RegionHeadSpec::new(20, boxdet::network::parse_anchor_list(anchors).unwrap()),
    );
    let cfg_path = dir.path().join("src.cfg");
    let weights = dir.path().join("src.ylw");
    src_cfg.save(&cfg_path).unwrap();
    save_weights(&boxdet::network::build_network(&src_cfg, 1).unwrap(), &weights).unwrap();
    let target = dir.path().join("dst.ylw");
    let out = boxdet(&[
        "surgery",
        "--weights",
        s(&weights),
        "--config",
        s(&cfg_path),
        "--classes",
        "14",
        "--anchors",
        "5",
        "--out",
        s(&target),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("final filters 125 → 95"), "{}", stderr(&out));
    let dst_cfg = NetworkConfig::load(target.with_extension("cfg")).unwrap();
    assert_eq!(dst_cfg.head.required_filters(), 95);
    load_weights(&target, &dst_cfg).unwrap();

    let out = boxdet(&[
        "surgery",
        "--weights",
        s(&weights),
        "--config",
        s(&cfg_path),
        "--classes",
        "14",
        "--anchors",
        "3",
        "--out",
        s(&target),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn zero_iterations_exit_cleanly() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = train_args(t, dir.path(), 0, &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let state = std::fs::read_to_string(dir.path().join("state.txt")).unwrap();
    assert!(state.contains("stop=iteration_budget"), "{state}");
}

#[test]
fn scheduled_checkpoints_written() {
    let t = trained();
    let mut names: Vec<String> = std::fs::read_dir(t.run())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ylw"))
        .collect();
    names.sort();
    let mut expected: Vec<String> = (1..=8).map(|i| checkpoint_name(25 * i)).collect();
    expected.push("final.ylw".into());
    expected.sort();
    assert_eq!(names, expected);
}

#[test]
fn lr_spike_takes_divergence_exit() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = train_args(t, dir.path(), 300, &["--lr-spike", "20:280:100000", "--set", "train.max_backoffs=1"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn run_log_replays_the_run() {
    let t = trained();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let out = train_args(t, first.path(), 20, &["--set", "train.checkpoints=10"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let log = first.path().join("run.log");
    let out = boxdet(&["train", "--config", s(&log), "--out", s(second.path())]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    for name in ["model_10.ylw", "final.ylw", "state.txt"] {
        assert_eq!(
            std::fs::read(first.path().join(name)).unwrap(),
            std::fs::read(second.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = train_args(t, dir.path(), 5, &["--set", "train.learning_rat=1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_manifest_is_a_data_error() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = boxdet(&["eval", "--weights", s(&t.final_weights()), "--manifest", s(&missing)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn detect_at_threshold_one_is_silent() {
    let t = trained();
    let manifest = DatasetManifest::load(t.manifest()).unwrap();
    let image = &manifest.images[0];
    let out = boxdet(&["detect", "--weights", s(&t.final_weights()), "--image", s(image), "--prob-threshold", "1.0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out.stdout.is_empty());
}

#[test]
fn eval_prints_library_ap() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let val = t.data().join("val.txt");
    let out = boxdet(&[
        "eval",
        "--weights",
        s(&t.final_weights()),
        "--manifest",
        s(&val),
        "--report",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = NetworkConfig::load(t.run().join("network.cfg")).unwrap();
    let net = load_weights(t.final_weights(), &cfg).unwrap();
    let m = DatasetManifest::load(&val).unwrap();
    let r = evaluate(&net, &m.load_samples(Exec::Sequential).unwrap(), &m.class_names, &EvalOptions::default()).unwrap();
    assert_eq!(stdout(&out), r.ap_csv());
}

/// Renames the run's checkpoints so validation AP rises, drops, then
/// climbs above the first peak; the selection must stop before the drop.
#[test]
fn select_prints_pre_drop_checkpoint() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetworkConfig::load(t.run().join("network.cfg")).unwrap();
    let val = t.data().join("val.txt");
    let m = DatasetManifest::load(&val).unwrap();
    let samples = m.load_samples(Exec::Sequential).unwrap();
    let mut scored: Vec<(f64, PathBuf)> = (1..=8)
        .map(|i| {
            let p = t.run().join(checkpoint_name(25 * i));
            let net = load_weights(&p, &cfg).unwrap();
            let ap = evaluate(&net, &samples, &m.class_names, &EvalOptions::default())
                .unwrap()
                .combined_ap()
                .unwrap_or(0.0);
            (ap, p)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    scored.dedup_by(|a, b| a.0 == b.0);
    assert!(scored.len() >= 4, "fewer than four distinct APs: {scored:?}");
    // AP order low → high: 1, 2, 0, 3
    let order = [1, 2, 0, 3];
    let iterations = [1000, 5000, 10_000, 15_000];
    let mut records = Vec::new();
    for (&rank, &iteration) in order.iter().zip(&iterations) {
        let dst = dir.path().join(checkpoint_name(iteration));
        std::fs::copy(&scored[rank].1, &dst).unwrap();
        records.push(CheckpointRecord {
            iteration,
            path: dst,
            validation_ap: Some(scored[rank].0),
        });
    }
    cfg.save(dir.path().join("network.cfg")).unwrap();
    let expected = select_best_checkpoint(&records).unwrap().iteration;
    assert_eq!(expected, 5000);
    let out = boxdet(&["select", "--checkpoints", s(dir.path()), "--manifest", s(&val)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let selected: Vec<&str> = text
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",1"))
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(selected, ["5000"]);
}

fn write_manifest(dir: &Path, name: &str, samples: &[AnnotatedImage]) -> PathBuf {
    let images: Vec<PathBuf> = samples
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            let path = dir.join(format!("{name}_{i:03}.png"));
            save_png(&sample.pixels, &path).unwrap();
            std::fs::write(label_path(&path), label_text(&sample.boxes)).unwrap();
            path
        })
        .collect();
    let path = dir.join(format!("{name}.txt"));
    DatasetManifest {
        images,
        class_names: vec!["box".into()],
    }
    .save(&path)
    .unwrap();
    path
}

#[test]
fn gap_matches_library() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let unknown: Vec<AnnotatedImage> = (0..6)
        .map(|i| {
            let mut spec = SyntheticSceneSpec::new(64, 64, mix_seed(77, i));
            spec.distractors = 2;
            generate_synthetic_scene(&spec)
        })
        .collect();
    let unknown_manifest = write_manifest(dir.path(), "unknown", &unknown);
    let known_manifest = t.data().join("val.txt");
    let report = dir.path().join("gap");
    let out = boxdet(&[
        "gap",
        "--weights",
        s(&t.final_weights()),
        "--known",
        s(&known_manifest),
        "--unknown",
        s(&unknown_manifest),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let cfg = NetworkConfig::load(t.run().join("network.cfg")).unwrap();
    let net = load_weights(t.final_weights(), &cfg).unwrap();
    let known = DatasetManifest::load(&known_manifest).unwrap().load_samples(Exec::Sequential).unwrap();
    let truths: Vec<&[_]> = known.iter().map(|k| k.boxes.as_slice()).collect();
    let tps = true_positives(&detect_all(&net, &known, EVAL_FLOOR).unwrap(), &truths, 0.5);
    let ud: Vec<_> = detect_all(&net, &unknown, EVAL_FLOOR).unwrap().concat();
    let gap = probability_gap_analysis(&tps, &ud).unwrap();

    let mut expected = String::from("class,min,q1,median,q3,max\n");
    let rows = gap
        .per_class.values().map(|st| ("box", st))
        .chain(gap.unknown.as_ref().map(|u| ("unknown", u)));
    for (name, st) in rows {
        expected.push_str(&format!("{name},{},{},{},{},{}\n", st.min, st.q1, st.median, st.q3, st.max));
    }
    assert_eq!(stdout(&out), expected);
    let verdict = std::fs::read_to_string(report.join("threshold.txt")).unwrap();
    match gap.threshold {
        Some(th) => assert_eq!(verdict, format!("threshold={th}\n")),
        None => assert_eq!(verdict, "threshold=none\n"),
    }
    assert!(report.join("gap.csv").is_file() && report.join("gap.svg").is_file());
}
