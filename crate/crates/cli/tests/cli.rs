use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_atlasforge"));
    c.env_remove("ATLASFORGE_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small cohort: 4 atlases, 2 cases.
fn cohort(dir: &Path) -> PathBuf {
    let d = dir.join("cohort");
    ok(&[
        "phantom",
        "--n",
        "4",
        "--cases",
        "2",
        "--small",
        "--seed",
        "7",
        "--out",
        p(&d),
    ]);
    d
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn phantom_segment_evaluate_validate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = cohort(tmp.path());
    let out = tmp.path().join("seg");
    let (atlas, case0) = (d.join("atlas.json"), d.join("case0.json"));
    ok(&[
        "segment",
        "--atlases",
        p(&atlas),
        "--case",
        p(&case0),
        "--out",
        p(&out),
    ]);
    for f in [
        "case00/ed_slice0.hdr",
        "case00/es_slice0.hdr",
        "case00/report.json",
        "config.json",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("case00/report.json")).unwrap()).unwrap();
    assert_eq!(report["ef_available"], true);
    assert!(report["volumes"]["ed_endo_ml"].as_f64().unwrap() > 0.0);

    let eval = tmp.path().join("eval");
    let stdout = ok(&[
        "evaluate",
        "--case",
        p(&case0),
        "--pred",
        p(&out),
        "--out",
        p(&eval),
    ]);
    assert!(stdout.contains("dice_ED_endocardium"));
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("case,phase,slice,structure,dice,hausdorff_mm")
    );
    assert_eq!(csv.lines().count(), 5);

    // validate accepts everything the other commands wrote
    let mut artifacts: Vec<PathBuf> = Vec::new();
    for root in [&d, &out, &eval] {
        artifacts.extend(
            files(root)
                .into_keys()
                .filter(|f| f.extension().is_some_and(|e| e != "raw"))
                .map(|f| root.join(f)),
        );
    }
    let args: Vec<&str> = std::iter::once("validate")
        .chain(artifacts.iter().map(|a| p(a)))
        .collect();
    let stdout = ok(&args);
    assert_eq!(stdout.lines().count(), artifacts.len());
}

#[test]
fn outputs_are_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = cohort(tmp.path());
    let mut runs = Vec::new();
    for jobs in ["1", "2", "8"] {
        let out = tmp.path().join(format!("seg{jobs}"));
        ok(&[
            "segment",
            "--atlases",
            p(&d.join("atlas.json")),
            "--case",
            p(&d.join("case0.json")),
            "--case",
            p(&d.join("case1.json")),
            "--out",
            p(&out),
            "--jobs",
            jobs,
        ]);
        let mut f = files(&out);
        f.retain(|k, _| !k.ends_with("timings.json"));
        runs.push(f);
    }
    assert!(runs[0].len() >= 10);
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn phantom_is_reproducible_under_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "phantom",
            "--n",
            "3",
            "--cases",
            "1",
            "--small",
            "--seed",
            "3",
            "--out",
            p(d),
            "--jobs",
            "2",
        ]);
    }
    assert_eq!(files(&a), files(&b));
    let c = tmp.path().join("c");
    ok(&[
        "phantom",
        "--n",
        "3",
        "--cases",
        "1",
        "--small",
        "--seed",
        "4",
        "--out",
        p(&c),
    ]);
    assert_ne!(files(&a), files(&c));
}

#[test]
fn majority_fusion_of_identical_maps_is_the_map() {
    let tmp = tempfile::tempdir().unwrap();
    let d = cohort(tmp.path());
    let labels = d.join("atlases/atlas00_s0_ed_labels.hdr");
    let out = tmp.path().join("fused.hdr");
    ok(&[
        "fuse",
        "--labels",
        p(&labels),
        p(&labels),
        p(&labels),
        "--method",
        "majority",
        "--out",
        p(&out),
    ]);
    assert_eq!(
        fs::read(out.with_extension("raw")).unwrap(),
        fs::read(labels.with_extension("raw")).unwrap()
    );
    let st = tmp.path().join("staple.hdr");
    ok(&[
        "fuse",
        "--labels",
        p(&labels),
        p(&labels),
        "--method",
        "staple",
        "--out",
        p(&st),
    ]);
    assert_eq!(
        fs::read(st.with_extension("raw")).unwrap(),
        fs::read(labels.with_extension("raw")).unwrap()
    );

    let image = d.join("atlases/atlas00_s0_ed.hdr");
    let steps = tmp.path().join("steps.hdr");
    ok(&[
        "fuse",
        "--labels",
        p(&labels),
        p(&labels),
        "--images",
        p(&image),
        p(&image),
        "--target",
        p(&image),
        "--method",
        "steps-local",
        "--out",
        p(&steps),
    ]);
    assert_eq!(
        fs::read(steps.with_extension("raw")).unwrap(),
        fs::read(labels.with_extension("raw")).unwrap()
    );
}

#[test]
fn evaluate_with_truth_as_prediction_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = cohort(tmp.path());
    let case: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("case1.json")).unwrap()).unwrap();
    let pred = tmp.path().join("pred");
    fs::create_dir_all(pred.join("case01")).unwrap();
    for phase in ["ED", "ES"] {
        let truth = d.join(
            case["phases"][phase]["slices"][0]["truth"]
                .as_str()
                .unwrap(),
        );
        let dst = pred.join(format!("case01/{}_slice0.hdr", phase.to_lowercase()));
        let raw = fs::read(truth.with_extension("raw")).unwrap();
        fs::write(dst.with_extension("raw"), raw).unwrap();
        let header = fs::read_to_string(&truth).unwrap();
        let header: String = header
            .lines()
            .map(|l| {
                if l.starts_with("data ") {
                    format!("data {}_slice0.raw", phase.to_lowercase())
                } else {
                    l.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        fs::write(&dst, header + "\n").unwrap();
    }
    let eval = tmp.path().join("eval");
    ok(&[
        "evaluate",
        "--case",
        p(&d.join("case1.json")),
        "--pred",
        p(&pred),
        "--out",
        p(&eval),
    ]);
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    for row in csv.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[4], "1.000000", "{row}");
        assert_eq!(cols[5], "0.000000", "{row}");
    }
}

#[test]
fn register_writes_transform_and_warped_images() {
    let tmp = tempfile::tempdir().unwrap();
    let d = cohort(tmp.path());
    let (fixed, moving) = (
        d.join("atlases/atlas00_s0_ed.hdr"),
        d.join("atlases/atlas01_s0_ed.hdr"),
    );
    let out = tmp.path().join("reg");
    ok(&[
        "register",
        "--fixed",
        p(&fixed),
        "--moving",
        p(&moving),
        "--moving-labels",
        p(&d.join("atlases/atlas01_s0_ed_labels.hdr")),
        "--model",
        "ffd",
        "--out",
        p(&out),
    ]);
    for f in [
        "transform.txt",
        "ffd.txt",
        "warped.hdr",
        "warped_labels.hdr",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    ok(&[
        "validate",
        p(&out.join("transform.txt")),
        p(&out.join("ffd.txt")),
        p(&out.join("warped.hdr")),
    ]);
    let rigid = tmp.path().join("rigid");
    ok(&[
        "register",
        "--fixed",
        p(&fixed),
        "--moving",
        p(&fixed),
        "--model",
        "rigid",
        "--out",
        p(&rigid),
    ]);
    let text = fs::read_to_string(rigid.join("transform.txt")).unwrap();
    assert!(text.starts_with("rigid"), "{text}");
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = cohort(tmp.path());
    let cfg = tmp.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"pipeline": {"fusion": {"mrf_beta": 0.3, "top_fraction": 0.5}}, "atlases": "cohort/atlas.json", "cases": ["cohort/case0.json"], "out": "seg"}"#,
    )
    .unwrap();
    ok(&[
        "--config",
        p(&cfg),
        "segment",
        "--mrf-beta",
        "0.7",
        "--phase2-model",
        "rigid",
    ]);
    let used: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("seg/config.json")).unwrap()).unwrap();
    assert_eq!(used["fusion"]["mrf_beta"], 0.7);
    assert_eq!(used["fusion"]["top_fraction"], 0.5);
    assert_eq!(used["phase2_model"], "rigid");
    assert!(d.join("atlas.json").is_file());
    ok(&["validate", p(&cfg)]);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = cohort(tmp.path());
    let code = |args: &[&str]| run(args).status.code().unwrap();
    assert_eq!(code(&["frobnicate"]), 2);
    let (atlas, case0) = (d.join("atlas.json"), d.join("case0.json"));
    let out = tmp.path().join("o");
    assert_eq!(
        code(&[
            "segment",
            "--atlases",
            p(&atlas),
            "--case",
            p(&case0),
            "--out",
            p(&out),
            "--top-fraction",
            "2"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "segment",
            "--atlases",
            p(&atlas),
            "--case",
            p(&case0),
            "--out",
            p(&out),
            "--jobs",
            "0"
        ]),
        2
    );
    assert_eq!(
        code(&[
            "segment",
            "--atlases",
            "/nonexistent/atlas.json",
            "--case",
            p(&case0),
            "--out",
            p(&out)
        ]),
        3
    );
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&["--config", p(&bad), "validate", p(&case0)]), 2);
    let broken = tmp.path().join("broken.hdr");
    fs::write(
        &broken,
        "width 4\nheight 4\nspacing 1 1\ndtype f32\ndata missing.raw\n",
    )
    .unwrap();
    assert_eq!(code(&["validate", p(&broken)]), 3);

    // a flat image has no informative blocks, so registration cannot run
    let flat = tmp.path().join("flat.hdr");
    fs::write(
        &flat,
        "width 32\nheight 32\nspacing 1 1\ndtype u8\ndata flat.raw\n",
    )
    .unwrap();
    fs::write(tmp.path().join("flat.raw"), vec![9u8; 32 * 32]).unwrap();
    let out = run(&[
        "register",
        "--fixed",
        p(&flat),
        "--moving",
        p(&flat),
        "--out",
        p(&tmp.path().join("r")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("atlasforge: "));
}
