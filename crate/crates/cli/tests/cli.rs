use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Runs the binary from the workspace root so fixture paths stay relative.
fn run_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_poseopt"));
    cmd.current_dir(root()).args(args).env_remove("POSEOPT_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run poseopt")
}

fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

fn report(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}, stderr={}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

fn stripped(out: &Output) -> Value {
    let mut v = report(out);
    v.as_object_mut().unwrap().remove("timings");
    v
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("stderr has an error line");
    serde_json::from_str(last).expect("last stderr line is JSON")
}

fn sha256_file(p: &Path) -> String {
    Sha256::digest(fs::read(p).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_matches_golden_report() {
    let got = stripped(&run(&["analyze", "fixtures/toy_pose.graph.json"]));
    let want: Value =
        serde_json::from_str(&fs::read_to_string(root().join("fixtures/golden/analyze_toy_pose.json")).unwrap()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn analyze_lightweight_openpose_counts() {
    let v = report(&run(&["analyze", "fixtures/lwop.graph.json", "--input", "3x368x368"]));
    let params = v["results"]["totals"]["params"].as_f64().unwrap();
    assert!((params / 4.1e6 - 1.0).abs() <= 0.15, "params {params}");
    assert_eq!(v["tool"]["name"], "poseopt");
    assert_eq!(v["command"], "analyze");
    assert_eq!(v["requires_retraining"], false);
    assert!(v["timings"]["total_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn reports_are_reproducible_modulo_timings() {
    let args = ["e2e", "--graph", "fixtures/lwop.graph.json", "--target-speedup", "1.3", "--persons", "2", "--seed", "9"];
    let a = stripped(&run(&args));
    let b = stripped(&run_env(&args, &[("POSEOPT_THREADS", "1")]));
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn e2e_report_is_consistent() {
    let v = report(&run(&[
        "e2e",
        "--graph",
        "fixtures/lwop.graph.json",
        "--target-speedup",
        "1.3",
        "--persons",
        "3",
        "--seed",
        "2",
    ]));
    let r = &v["results"];
    let lat = &r["latency"];
    let (dense, planned) = (lat["dense_total"].as_f64().unwrap(), lat["planned_total"].as_f64().unwrap());
    assert_eq!(lat["predicted_speedup"].as_f64().unwrap(), dense / planned);
    assert!(dense / planned >= 1.3 - 1e-12);
    assert_eq!(r["plan"]["predicted_planned_latency"].as_f64().unwrap(), planned);
    assert!(!r["rewrite_log"]["entries"].as_array().unwrap().is_empty());
    assert_eq!(r["match"]["exact"], true);
    assert_eq!(r["decode"]["poses"].as_array().unwrap().len(), 3);
    assert_eq!(v["requires_retraining"], true);
}

#[test]
fn e2e_writes_listed_artifacts() {
    let dir = tmp();
    let v = report(&run(&[
        "e2e",
        "--graph",
        "fixtures/toy_pose.graph.json",
        "--target-speedup",
        "1.3",
        "--persons",
        "1",
        "--seed",
        "0",
        "--out-dir",
        s(dir.path()),
    ]));
    let files = v["files"].as_array().unwrap();
    assert_eq!(files.len(), 5);
    for f in files {
        let p = PathBuf::from(f["path"].as_str().unwrap());
        assert_eq!(f["sha256"].as_str().unwrap(), sha256_file(&p));
    }
}

#[test]
fn synth_reproduces_pinned_scenes() {
    let scenes = root().join("fixtures/scenes");
    let mut seen = 0;
    for entry in fs::read_dir(&scenes).unwrap() {
        let pinned = entry.unwrap().path();
        let sums: Value = serde_json::from_str(&fs::read_to_string(pinned.join("checksums.json")).unwrap()).unwrap();
        let mut args: Vec<String> = vec!["synth".into()];
        args.extend(sums["args"].as_array().unwrap().iter().map(|a| a.as_str().unwrap().to_string()));
        let dir = tmp();
        args.extend(["-o".to_string(), s(dir.path()).to_string()]);
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        report(&run(&argv));
        for (name, want) in sums["sha256"].as_object().unwrap() {
            assert_eq!(&sha256_file(&dir.path().join(name)), want, "{}/{name}", pinned.display());
        }
        assert_eq!(
            fs::read(dir.path().join("scene.json")).unwrap(),
            fs::read(pinned.join("scene.json")).unwrap()
        );
        seen += 1;
    }
    assert!(seen >= 3);
}

#[test]
fn synth_then_decode_recovers_the_scene() {
    let dir = tmp();
    let v = report(&run(&["synth", "--persons", "2", "--seed", "5", "-o", s(dir.path())]));
    let truth = v["results"]["poses"].as_array().unwrap().clone();
    let heat = dir.path().join("heat.tnsr");
    let paf = dir.path().join("paf.tnsr");
    let d = report(&run(&[
        "decode",
        "--heat",
        s(&heat),
        "--paf",
        s(&paf),
        "--skeleton",
        "fixtures/skeleton_coco18.json",
        "--config",
        "fixtures/decode_default.json",
    ]));
    let poses = d["results"]["poses"].as_array().unwrap();
    assert_eq!(poses.len(), truth.len());
    for p in poses {
        let joints = p["joints"].as_array().unwrap();
        let nose = &joints[0];
        let (x, y) = (nose["x"].as_f64().unwrap(), nose["y"].as_f64().unwrap());
        let hit = truth.iter().any(|t| {
            let j = &t["joints"][0];
            (j[0].as_f64().unwrap() - x).hypot(j[1].as_f64().unwrap() - y) < 1.5
        });
        assert!(hit, "nose at ({x}, {y}) matches no ground-truth person");
    }
}

#[test]
fn decode_rejects_mismatched_paf_channels() {
    let dir = tmp();
    report(&run(&["synth", "--persons", "1", "--seed", "1", "--size", "184x184", "-o", s(dir.path())]));
    let mut skel: Value = serde_json::from_str(&fs::read_to_string(root().join("fixtures/skeleton_coco18.json")).unwrap()).unwrap();
    skel["limbs"].as_array_mut().unwrap().pop();
    let skel_path = dir.path().join("skel17.json");
    fs::write(&skel_path, skel.to_string()).unwrap();
    let out = run(&[
        "decode",
        "--heat",
        s(&dir.path().join("heat.tnsr")),
        "--paf",
        s(&dir.path().join("paf.tnsr")),
        "--skeleton",
        s(&skel_path),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "decode");
    assert_eq!(e["error"]["exit_code"], 2);
    assert!(out.stdout.is_empty());
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
    let out = run(&["prune-plan", "fixtures/toy_pose.graph.json", "--calib", "fixtures/calib_default.json"]);
    assert_eq!(out.status.code(), Some(1), "a target is required");
    let out = run(&["optimize", "fixtures/toy_pose.graph.json", "--replace-act", "swish", "-o", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn unreadable_or_invalid_inputs_exit_two() {
    let out = run(&["analyze", "fixtures/does_not_exist.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "io");
    let out = run(&["analyze", "fixtures/calib_default.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "graph");
    let out = run_env(&["analyze", "fixtures/toy_pose.graph.json"], &[("POSEOPT_THREADS", "many")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_target_exits_three() {
    let out = run(&[
        "prune-plan",
        "fixtures/lwop.graph.json",
        "--calib",
        "fixtures/calib_default.json",
        "--target-speedup",
        "100",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "target_unreachable");
    let best = e["error"]["best_achievable_speedup"].as_f64().unwrap();
    assert!(best > 1.0 && best < 100.0);
}

#[test]
fn prune_plan_respects_the_policy_file() {
    let dir = tmp();
    let policy = dir.path().join("policy.json");
    fs::write(&policy, r#"{"max_ratio": {"PafBranch": 0.0}}"#).unwrap();
    let v = report(&run(&[
        "prune-plan",
        "fixtures/lwop.graph.json",
        "--calib",
        "fixtures/calib_default.json",
        "--policy",
        s(&policy),
        "--target-speedup",
        "1.2",
    ]));
    let plan = &v["results"]["plan"];
    assert!(plan["predicted_speedup"].as_f64().unwrap() >= 1.2);
    let g: Value = serde_json::from_str(&fs::read_to_string(root().join("fixtures/lwop.graph.json")).unwrap()).unwrap();
    for d in plan["decisions"].as_array().unwrap() {
        let node = g["nodes"].as_array().unwrap().iter().find(|n| n["id"] == d["node"]).unwrap();
        assert_ne!(node["block_tag"], "PafBranch");
    }
    assert_eq!(v["config"]["policy"]["max_ratio"]["Backbone"], 0.9);
}

#[test]
fn weights_round_trip_through_pruning() {
    let dir = tmp();
    let wdir = dir.path().join("w");
    let pdir = dir.path().join("pruned");
    let init = report(&run(&["init-weights", "fixtures/toy_pose.graph.json", "--seed", "3", "-o", s(&wdir)]));
    assert_eq!(init["results"]["nodes_with_weights"], 8);
    let v = report(&run(&[
        "prune-plan",
        "fixtures/toy_pose.graph.json",
        "--calib",
        "fixtures/calib_default.json",
        "--max-distortion",
        "0.5",
        "--weights",
        s(&wdir),
        "--pruned-weights-out",
        s(&pdir),
    ]));
    let d = v["results"]["plan"]["predicted_distortion"].as_f64().unwrap();
    assert!((0.0..=0.5).contains(&d));
    for f in v["files"].as_array().unwrap() {
        assert_eq!(f["sha256"].as_str().unwrap(), sha256_file(Path::new(f["path"].as_str().unwrap())));
    }
    let out = run(&[
        "prune-plan",
        "fixtures/toy_pose.graph.json",
        "--calib",
        "fixtures/calib_default.json",
        "--max-distortion",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(2), "a distortion budget needs weights");
}

#[test]
fn optimize_rewrites_without_touching_the_input() {
    let dir = tmp();
    let input = root().join("fixtures/openpose_vgg.graph.json");
    let before = sha256_file(&input);
    let out_path = dir.path().join("opt.json");
    let v = report(&run(&[
        "optimize",
        "fixtures/openpose_vgg.graph.json",
        "--replace-large-kernels",
        "-o",
        s(&out_path),
    ]));
    assert_eq!(sha256_file(&input), before);
    let entries = v["results"]["rewrite_log"]["entries"].as_array().unwrap();
    assert!(!entries.is_empty());
    for e in entries {
        assert_eq!(e["rf_before"], e["rf_after"]);
        assert_eq!(e["replacement_node_ids"].as_array().unwrap().len(), 3);
    }
    assert_eq!(v["requires_retraining"], true);
    assert_eq!(v["files"][0]["sha256"].as_str().unwrap(), sha256_file(&out_path));
    let g = poseopt::graph::parse_graph(&fs::read_to_string(&out_path).unwrap()).unwrap();
    assert!(g.conv_nodes().all(|(_, a)| a.kernel_h <= 3));

    let out = run(&["optimize", "fixtures/toy_pose.graph.json", "--dedilate", "-o", "fixtures/toy_pose.graph.json"]);
    assert_eq!(out.status.code(), Some(2), "must refuse to overwrite its input");
}

#[test]
fn optimize_depth_rescales_a_stage_spec() {
    let dir = tmp();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"stages": [{"num_blocks": 2, "width": 64, "block_kind": "plain3x3", "stride_first": 1}]}"#,
    )
    .unwrap();
    let out_path = dir.path().join("spec2.json");
    let v = report(&run(&["optimize", s(&spec), "--depth-rescale", "2", "-o", s(&out_path)]));
    assert_eq!(v["results"]["spec_after"]["stages"][0]["num_blocks"], 4);
    assert_eq!(v["results"]["spec_after"]["stages"][0]["width"], 48);
    let ratio = v["results"]["flops_ratio"].as_f64().unwrap();
    assert!((ratio - 1.0).abs() <= 0.15);

    let out = run(&["optimize", s(&spec), "--depth-rescale", "2", "--rounding-multiple", "64", "-o", s(&out_path)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn calibrate_recovers_known_parameters() {
    let dir = tmp();
    let m = dir.path().join("m.json");
    let (t, o, e, so) = (2e-11, 3e-5, 1.5, 4e-5);
    let dense: Vec<Value> = [1e6, 5e6, 2e7, 8e7]
        .iter()
        .map(|&macs: &f64| serde_json::json!({ "macs": macs as u64, "seconds": macs * t + o }))
        .collect();
    let sparse: Vec<Value> = [(2e7, 0.5), (8e7, 0.8), (5e6, 0.9)]
        .iter()
        .map(|&(macs, p): &(f64, f64)| {
            serde_json::json!({ "macs": macs as u64, "ratio": p, "seconds": macs * (1.0 - p) * t * e + o + so })
        })
        .collect();
    fs::write(&m, serde_json::json!({ "dense": dense, "sparse": sparse }).to_string()).unwrap();
    let out = dir.path().join("calib.json");
    let v = report(&run(&["calibrate", s(&m), "--base", "fixtures/calib_default.json", "-o", s(&out)]));
    let c = &v["results"]["calib"];
    let close = |k: &str, want: f64| (c[k].as_f64().unwrap() / want - 1.0).abs() < 1e-6;
    assert!(close("time_per_mac", t) && close("per_node_overhead", o));
    assert!(close("sparse_inefficiency", e) && close("sparse_overhead", so));
    assert_eq!(c["unfriendly_op_penalty"]["swish"], 4e-4);
    let a = report(&run(&["analyze", "fixtures/toy_pose.graph.json", "--calib", s(&out)]));
    assert_eq!(a["config"]["calib"]["time_per_mac"], c["time_per_mac"]);
}

#[test]
fn report_can_go_to_a_file() {
    let dir = tmp();
    let path = dir.path().join("r.json");
    let out = run(&["analyze", "fixtures/toy_pose.graph.json", "--out", s(&path)]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["results"]["graph"], "toy_pose");
}
