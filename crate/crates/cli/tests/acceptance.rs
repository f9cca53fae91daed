//! Acceptance criteria 1-8, one PASS/FAIL line each.
//!
//! Run with `cargo test -p poseopt-cli --test acceptance`. The process exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use serde_json::Value;

use poseopt::cost::{graph_cost, receptive_field};
use poseopt::exec;
use poseopt::graph::{
    build_backbone, infer_shapes, parse_graph, BlockKind, BlockTag, Conv2dAttrs, Graph, GraphInput, Op, OpNode,
    StageSpec, StageSpecEntry, TensorShape,
};
use poseopt::latency::{breakeven_ratio, graph_latency, layer_latency, Breakeven, LatencyParams};
use poseopt::paf::{decode, DecodeConfig, SkeletonSpec};
use poseopt::prune::{magnitude_mask, plan, PlanTarget, PruneError, PrunePlan, Scheme, SensitivityPolicy};
use poseopt::rewrite::{dedilate, depth_rescale, replace_large_kernels, stage_flops, DepthMultiplier};
use poseopt::rng::SplitMix64;
use poseopt::synth::{gen_poses, match_scene, render, RenderConfig};
use poseopt::tensor::Tensor;
use poseopt::weights::{NodeWeights, WeightStore};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture_graph(name: &str) -> Graph {
    parse_graph(&fs::read_to_string(root().join("fixtures").join(name)).unwrap()).unwrap()
}

fn poseopt(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_poseopt"))
        .current_dir(root())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn log_uniform(rng: &mut SplitMix64, lo: f64, hi: f64) -> f64 {
    (rng.uniform(lo.ln(), hi.ln())).exp()
}

fn pick<T: Copy>(rng: &mut SplitMix64, xs: &[T]) -> T {
    xs[(rng.next_u64() % xs.len() as u64) as usize]
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x / target - 1.0).abs() <= tol
}

fn ac1() -> Verdict {
    let t = Instant::now();
    let v = poseopt(&["analyze", "fixtures/lwop.graph.json", "--input", "3x368x368"])?;
    let secs = t.elapsed().as_secs_f64();
    let tot = &v["results"]["totals"];
    let params = tot["params"].as_f64().unwrap();
    let flops = tot["flops"].as_f64().unwrap();
    let macs = tot["macs"].as_f64().unwrap();
    ensure(within(params, 4.1e6, 0.15), || format!("params {params} not within 15% of 4.1M"))?;
    ensure(within(flops, 9e9, 0.15) || within(macs, 9e9, 0.15), || {
        format!("neither FLOPs {flops} nor MACs {macs} within 15% of 9G")
    })?;
    ensure(secs < 1.0, || format!("took {secs:.3}s"))?;
    Ok(format!(
        "params {:.3}M, MACs {:.3}G, FLOPs {:.3}G, {:.0} ms",
        params / 1e6,
        macs / 1e9,
        flops / 1e9,
        secs * 1e3
    ))
}

/// Receptive field of a chain of stride-1 convs: 1 + sum of (k_eff - 1).
fn chain_rf(kernels: impl IntoIterator<Item = usize>) -> usize {
    1 + kernels.into_iter().map(|k| k - 1).sum::<usize>()
}

fn single_conv(attrs: Conv2dAttrs, hw: usize) -> Graph {
    Graph {
        name: "single".into(),
        inputs: vec![GraphInput {
            name: "x".into(),
            shape: TensorShape::chw(attrs.in_channels, hw, hw),
        }],
        nodes: vec![OpNode::new("c", Op::Conv2d(attrs), vec!["x".into()], BlockTag::Backbone)],
        outputs: vec!["c".into()],
    }
}

fn ac2() -> Verdict {
    let g = fixture_graph("openpose_vgg.graph.json");
    let shapes0 = infer_shapes(&g).map_err(|e| e.to_string())?;
    let (out, log) = replace_large_kernels(&g, 3).map_err(|e| e.to_string())?;
    let shapes1 = infer_shapes(&out).map_err(|e| e.to_string())?;
    for o in &g.outputs {
        let renamed = out.outputs[g.outputs.iter().position(|x| x == o).unwrap()].clone();
        ensure(shapes0[o] == shapes1[&renamed], || format!("output {o} changed shape"))?;
    }
    let mut checked = 0;
    for e in log.applied() {
        let a = g.node(&e.original_node_id).and_then(|n| n.op.as_conv()).unwrap();
        ensure(e.rf_before == e.rf_after, || format!("{}: rf {} -> {}", e.original_node_id, e.rf_before, e.rf_after))?;
        if a.in_channels == a.out_channels {
            ensure(e.macs_after * 49 == e.macs_before * 27, || {
                format!("{}: MACs {} -> {} is not 27/49", e.original_node_id, e.macs_before, e.macs_after)
            })?;
            checked += 1;
        }
        let k = a.kernel_h;
        let kernels: Vec<usize> = e
            .replacement_node_ids
            .iter()
            .map(|id| out.node(id).and_then(|n| n.op.as_conv()).unwrap().effective_kernel().0)
            .collect();
        ensure(chain_rf([k]) == chain_rf(kernels.iter().copied()), || {
            format!("{}: local rf {} vs chain {:?}", e.original_node_id, k, kernels)
        })?;
    }
    ensure(checked > 0, || "no C->C 7x7 layer was replaced".into())?;
    ensure(out.conv_nodes().all(|(_, a)| a.kernel_h <= 3), || "a large kernel survived".into())?;

    // A lone 7x7 and a 3x3 with dilation 3: receptive field 7 before and after.
    let mut seven = Conv2dAttrs::same(7, 16, 16);
    seven.has_bias = true;
    let g7 = single_conv(seven, 20);
    let (r7, _) = replace_large_kernels(&g7, 3).map_err(|e| e.to_string())?;
    let rf7 = (receptive_field(&g7, "c").unwrap().size, receptive_field(&r7, &r7.outputs[0]).unwrap().size);
    ensure(rf7 == (7.0, 7.0), || format!("7x7 rf {rf7:?}"))?;
    let mut dil = Conv2dAttrs::same(3, 8, 8);
    dil.dilation = 3;
    dil.padding = 3;
    let gd = single_conv(dil, 20);
    let (rd, _) = dedilate(&gd).map_err(|e| e.to_string())?;
    let rfd = (receptive_field(&gd, "c").unwrap().size, receptive_field(&rd, &rd.outputs[0]).unwrap().size);
    ensure(rfd == (7.0, 7.0), || format!("dilated rf {rfd:?}"))?;
    ensure(rd.conv_nodes().all(|(_, a)| a.dilation == 1), || "dilation survived".into())?;
    Ok(format!("{checked} C->C layers at exactly 27/49, rf preserved; d=3 dedilation rf 7 -> 7"))
}

fn ac3() -> Verdict {
    let t = Instant::now();
    let skel = SkeletonSpec::coco18();
    let dcfg = DecodeConfig::default();
    let mut exact = 0;
    let mut noisy_ok = 0;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for seed in 0..200u64 {
        let persons = 1 + (seed % 6) as usize;
        let clean = RenderConfig::default();
        let truth = gen_poses(persons, &skel, &clean, seed).map_err(|e| e.to_string())?;
        let (heat, paf) = render(&truth, &skel, &clean).map_err(|e| e.to_string())?;
        let m = match_scene(&decode(&heat, &paf, &skel, &dcfg).map_err(|e| e.to_string())?, &truth);
        if m.exact(1.5) {
            exact += 1;
            worst = worst.max(m.max_joint_error);
        } else {
            failures.push(seed);
        }
        let noisy = RenderConfig {
            noise_amplitude: 0.05,
            noise_seed: seed,
            ..RenderConfig::default()
        };
        let (heat, paf) = render(&truth, &skel, &noisy).map_err(|e| e.to_string())?;
        if match_scene(&decode(&heat, &paf, &skel, &dcfg).map_err(|e| e.to_string())?, &truth).count_ok() {
            noisy_ok += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(exact == 200, || format!("noise 0: {exact}/200 exact, failing seeds {failures:?}"))?;
    ensure(noisy_ok >= 190, || format!("noise 0.05: person count right in {noisy_ok}/200 (< 95%)"))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "noise 0: 200/200 exact (worst joint error {worst:.3} px); noise 0.05: {noisy_ok}/200 counts; {secs:.1}s"
    ))
}

fn random_params(rng: &mut SplitMix64) -> LatencyParams {
    let mut lp = LatencyParams::illustrative();
    lp.time_per_mac = log_uniform(rng, 1e-12, 1e-9);
    lp.per_node_overhead = rng.uniform(0.0, 1e-4);
    lp.sparse_inefficiency = rng.uniform(1.0, 4.0);
    lp.sparse_overhead = log_uniform(rng, 1e-7, 1e-2);
    lp
}

fn ac4() -> Verdict {
    let mut rng = SplitMix64::new(0xac4);
    let node = OpNode::new("c", Op::Conv2d(Conv2dAttrs::same(3, 8, 8)), vec!["x".into()], BlockTag::Backbone);
    let mut unprofitable = 0;
    for draw in 0..1000 {
        let lp = random_params(&mut rng);
        let macs = log_uniform(&mut rng, 1e3, 1e10) as u64;
        let be = breakeven_ratio(&lp, macs);
        if be == Breakeven::NotPrunableProfitably {
            unprofitable += 1;
        }
        let dense = layer_latency(&node, 0.0, &lp, macs).unwrap();
        // Independent form of the same condition: work * (1 - (1 - p) e) > so.
        let work = macs as f64 * lp.time_per_mac;
        for i in 1..=100 {
            let p = i as f64 / 100.0;
            let faster = layer_latency(&node, p, &lp, macs).unwrap() < dense;
            ensure(faster == be.admits(p), || {
                format!("draw {draw}: macs {macs}, p {p}: faster={faster} but breakeven {be:?}")
            })?;
            let by_hand = work * (1.0 - (1.0 - p) * lp.sparse_inefficiency) > lp.sparse_overhead;
            ensure(faster == by_hand, || format!("draw {draw}: p {p} disagrees with the closed form"))?;
        }
    }

    let graphs = [
        fixture_graph("lwop.graph.json"),
        fixture_graph("openpose_vgg.graph.json"),
        fixture_graph("toy_pose.graph.json"),
    ];
    let (mut plans, mut decisions) = (0, 0);
    for trial in 0..150 {
        let g = &graphs[trial % graphs.len()];
        let mut lp = random_params(&mut rng);
        lp.time_per_mac = log_uniform(&mut rng, 1e-12, 1e-10);
        let mut policy = SensitivityPolicy::default();
        for tag in [BlockTag::Backbone, BlockTag::InitialStage, BlockTag::HeatmapBranch, BlockTag::PafBranch, BlockTag::Other] {
            policy.max_ratio.insert(tag, pick(&mut rng, &[0.0, 0.4, 0.55, 0.7, 0.9, 1.0]));
        }
        let target = PlanTarget::Speedup(rng.uniform(1.0, 2.5));
        let p = match plan(g, None, &lp, &policy, &target, Scheme::Unstructured) {
            Ok(p) => p,
            Err(PruneError::TargetUnreachable { .. }) => continue,
            Err(e) => return Err(e.to_string()),
        };
        plans += 1;
        let cost = graph_cost(g).unwrap();
        for d in &p.decisions {
            let n = g.node(&d.node).unwrap();
            let be = breakeven_ratio(&lp, cost.per_node[&d.node].macs);
            ensure(be.admits(d.ratio), || format!("{}: ratio {} at or below break-even {be:?}", d.node, d.ratio))?;
            ensure(d.ratio <= policy.cap(n.block_tag), || format!("{}: ratio {} above cap", d.node, d.ratio))?;
            decisions += 1;
        }
        let recomputed = graph_latency(g, Some(&p), &lp).unwrap().total;
        ensure(recomputed == p.predicted_planned_latency, || "plan latency does not reproduce".into())?;
    }
    ensure(plans > 0 && decisions > 0, || "no plan was exercised".into())?;
    Ok(format!(
        "1000 draws x 100 ratios agree ({unprofitable} never profitable); {plans} plans, {decisions} decisions within (p*, cap]"
    ))
}

fn ac5() -> Verdict {
    let mut rng = SplitMix64::new(0xac5);
    let ratios: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let schemes = [Scheme::Unstructured, Scheme::Block { rows: 2, cols: 2 }, Scheme::Channel];
    for t in 0..500 {
        let out = pick(&mut rng, &[2usize, 4, 6, 8]);
        let inp = pick(&mut rng, &[2usize, 4]);
        let k = pick(&mut rng, &[1usize, 3]);
        // Coarse values make ties common, exercising the index tie-break.
        let coarse = t % 3 == 0;
        let w = Tensor::from_fn(TensorShape::new(vec![out, inp, k, k]).unwrap(), |_| {
            let v = rng.uniform(-1.0, 1.0);
            (if coarse { (v * 4.0).round() / 4.0 } else { v }) as f32
        });
        let n = w.data().len();
        let cols = n / out;
        for scheme in schemes {
            let (n_units, unit): (usize, usize) = match scheme {
                Scheme::Unstructured => (n, 1),
                Scheme::Block { rows, cols: bc } => ((out / rows) * (cols / bc), rows * bc),
                Scheme::Channel => (out, cols),
            };
            let mut prev: Option<Vec<bool>> = None;
            for &r in &ratios {
                let m = magnitude_mask("w", &w, r, scheme).map_err(|e| e.to_string())?;
                let again = magnitude_mask("w", &w, r, scheme).map_err(|e| e.to_string())?;
                ensure(m == again, || format!("tensor {t} {scheme} r={r}: rerun differs"))?;
                // keep = ceil((10 - k) * n / 10) in integers.
                let tenths = (r * 10.0).round() as usize;
                let keep_units = ((10 - tenths) * n_units).div_ceil(10);
                let want = (n_units - keep_units) * unit;
                ensure(m.pruned_count() == want, || {
                    format!("tensor {t} {scheme} r={r}: pruned {} want {want}", m.pruned_count())
                })?;
                if let Some(p) = &prev {
                    let nested = p.iter().zip(&m.keep).all(|(&before, &now)| before || !now);
                    ensure(nested, || format!("tensor {t} {scheme} r={r}: not nested"))?;
                }
                if scheme == Scheme::Unstructured {
                    let mag = |i: usize| w.data()[i].abs();
                    let kept_min = (0..n).filter(|&i| m.keep[i]).map(mag).fold(f32::INFINITY, f32::min);
                    let pruned_max = (0..n).filter(|&i| !m.keep[i]).map(mag).fold(0.0, f32::max);
                    ensure(pruned_max <= kept_min, || format!("tensor {t} r={r}: a larger weight was pruned"))?;
                }
                prev = Some(m.keep.clone());
            }
        }
    }
    Ok("500 tensors x 9 ratios x 3 schemes: exact counts, nested, deterministic".into())
}

/// Direct convolution in f64, written independently of the executor.
fn brute_conv(x: &[f32], (c, h, w): (usize, usize, usize), wt: &[f32], bias: Option<&[f32]>, a: &Conv2dAttrs) -> (Vec<f64>, usize, usize) {
    let ke = a.dilation * (a.kernel_h - 1) + 1;
    let ho = (h + 2 * a.padding - ke) / a.stride + 1;
    let wo = (w + 2 * a.padding - ke) / a.stride + 1;
    let cin_g = c / a.groups;
    let cout_g = a.out_channels / a.groups;
    let mut y = vec![0.0f64; a.out_channels * ho * wo];
    for o in 0..a.out_channels {
        let grp = o / cout_g;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias.map_or(0.0, |b| b[o] as f64);
                for ci in 0..cin_g {
                    let ic = grp * cin_g + ci;
                    for ky in 0..a.kernel_h {
                        for kx in 0..a.kernel_w {
                            let iy = (oy * a.stride + ky * a.dilation) as isize - a.padding as isize;
                            let ix = (ox * a.stride + kx * a.dilation) as isize - a.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(ic * h + iy as usize) * w + ix as usize] as f64;
                            let wv = wt[((o * cin_g + ci) * a.kernel_h + ky) * a.kernel_w + kx] as f64;
                            acc += xv * wv;
                        }
                    }
                }
                y[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (y, ho, wo)
}

fn ac6() -> Verdict {
    let mut rng = SplitMix64::new(0xac6);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 200 {
        let k = pick(&mut rng, &[1usize, 3, 5, 7]);
        let stride = pick(&mut rng, &[1usize, 2]);
        let dilation = pick(&mut rng, &[1usize, 2, 3]);
        let groups = pick(&mut rng, &[1usize, 1, 1, 2]);
        let cin = groups * (1 + (rng.next_u64() % (8 / groups) as u64) as usize);
        let cout = groups * (1 + (rng.next_u64() % (8 / groups) as u64) as usize);
        let (h, w) = (1 + (rng.next_u64() % 16) as usize, 1 + (rng.next_u64() % 16) as usize);
        let ke = dilation * (k - 1) + 1;
        let padding = (rng.next_u64() % (ke as u64 / 2 + 1)) as usize;
        if h + 2 * padding < ke || w + 2 * padding < ke {
            continue;
        }
        let attrs = Conv2dAttrs {
            kernel_h: k,
            kernel_w: k,
            stride,
            padding,
            dilation,
            in_channels: cin,
            out_channels: cout,
            groups,
            has_bias: rng.next_u64() % 2 == 0,
        };
        let g = Graph {
            name: "conv".into(),
            inputs: vec![GraphInput {
                name: "x".into(),
                shape: TensorShape::chw(cin, h, w),
            }],
            nodes: vec![OpNode::new("c", Op::Conv2d(attrs.clone()), vec!["x".into()], BlockTag::Other)],
            outputs: vec!["c".into()],
        };
        let wt = Tensor::from_fn(TensorShape::new(attrs.weight_dims()).unwrap(), |_| rng.uniform(-1.0, 1.0) as f32);
        let bias = attrs
            .has_bias
            .then(|| Tensor::from_fn(TensorShape::new(vec![cout]).unwrap(), |_| rng.uniform(-1.0, 1.0) as f32));
        let x = Tensor::from_fn(TensorShape::chw(cin, h, w), |_| rng.uniform(-1.0, 1.0) as f32);
        let mut store = WeightStore::new();
        store.insert(
            "c",
            NodeWeights {
                weight: wt.clone(),
                bias: bias.clone(),
            },
        );
        let outs = exec::run(&g, &store, &BTreeMap::from([("x".to_string(), x.clone())])).map_err(|e| e.to_string())?;
        let got = &outs["c"];
        let (want, ho, wo) = brute_conv(x.data(), (cin, h, w), wt.data(), bias.as_ref().map(|b| b.data()), &attrs);
        ensure(got.dims() == [cout, ho, wo], || format!("shape {:?} vs {:?}", got.dims(), [cout, ho, wo]))?;
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((*a as f64 - b).abs());
        }
        ensure(worst < 1e-5, || format!("case {done}: {attrs:?} max abs diff {worst:e}"))?;
        done += 1;
    }
    Ok(format!("200 convs, max abs diff {worst:.2e}"))
}

fn ac7() -> Verdict {
    let calib = LatencyParams::illustrative();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for name in ["lwop", "openpose_vgg", "toy_pose"] {
        let out_dir = dir.path().join(name);
        let graph_path = format!("fixtures/{name}.graph.json");
        let v = poseopt(&[
            "e2e",
            "--graph",
            &graph_path,
            "--calib",
            "fixtures/calib_default.json",
            "--target-speedup",
            "1.3",
            "--persons",
            "3",
            "--seed",
            "7",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ])?;
        let lat = &v["results"]["latency"];
        let f = |k: &str| lat[k].as_f64().unwrap();
        let (dense, planned, speedup) = (f("dense_total"), f("planned_total"), f("predicted_speedup"));
        ensure(planned < dense, || format!("{name}: planned {planned} not below dense {dense}"))?;
        ensure(speedup == dense / planned, || format!("{name}: speedup {speedup} != {dense}/{planned}"))?;

        let g0 = fixture_graph(&format!("{name}.graph.json"));
        let g1 = parse_graph(&fs::read_to_string(out_dir.join("optimized.graph.json")).unwrap()).map_err(|e| e.to_string())?;
        let p: PrunePlan = serde_json::from_str(&fs::read_to_string(out_dir.join("plan.json")).unwrap()).map_err(|e| e.to_string())?;
        let dense_again = graph_latency(&g0, None, &calib).unwrap().total;
        let planned_again = graph_latency(&g1, Some(&p), &calib).unwrap().total;
        ensure(dense_again == dense && planned_again == planned, || {
            format!("{name}: recomputed {dense_again}/{planned_again} vs reported {dense}/{planned}")
        })?;
        ensure(v["results"]["match"]["exact"] == true, || format!("{name}: decoded scene does not match"))?;
        lines.push(format!("{name} {speedup:.3}x"));
    }
    Ok(lines.join(", "))
}

fn random_spec(rng: &mut SplitMix64) -> StageSpec {
    let n = 1 + (rng.next_u64() % 4) as usize;
    StageSpec {
        stages: (0..n)
            .map(|_| StageSpecEntry {
                num_blocks: 1 + (rng.next_u64() % 6) as usize,
                width: 8 * (1 + (rng.next_u64() % 32) as usize),
                block_kind: pick(rng, &[BlockKind::Plain3x3, BlockKind::Bottleneck]),
                stride_first: pick(rng, &[1usize, 2]),
            })
            .collect(),
    }
}

fn ac8() -> Verdict {
    let mut rng = SplitMix64::new(0xac8);
    let tol = 0.15;
    let mults = [(1u64, 2u64), (1, 1), (2, 1), (3, 1)];
    let mut ok = [0usize; 4];
    let mut exceeded = 0;
    for i in 0..100 {
        let spec = random_spec(&mut rng);
        for (mi, &(num, den)) in mults.iter().enumerate() {
            let m = DepthMultiplier::new(num, den).unwrap();
            let out = match depth_rescale(&spec, m, 8, tol) {
                Ok(s) => s,
                Err(poseopt::rewrite::RewriteError::ToleranceExceeded { .. }) => {
                    exceeded += 1;
                    continue;
                }
                Err(e) => return Err(format!("spec {i} x{m}: {e}")),
            };
            let mf = num as f64 / den as f64;
            for (s, t) in spec.stages.iter().zip(&out.stages) {
                let nb = (s.num_blocks as f64 * mf).round() as usize;
                ensure(t.num_blocks == nb, || format!("spec {i} x{m}: {} blocks, want {nb}", t.num_blocks))?;
                let width = if nb == s.num_blocks {
                    s.width
                } else {
                    (((s.width as f64 * (s.num_blocks as f64 / nb as f64).sqrt()) / 8.0).round().max(1.0) as usize) * 8
                };
                ensure(t.width == width, || format!("spec {i} x{m}: width {}, want {width}", t.width))?;
                ensure(
                    (t.block_kind, t.stride_first) == (s.block_kind, s.stride_first),
                    || format!("spec {i}: block kind or stride changed"),
                )?;
            }
            let ratio = stage_flops(&out).unwrap() as f64 / stage_flops(&spec).unwrap() as f64;
            ensure((ratio - 1.0).abs() <= tol, || format!("spec {i} x{m}: FLOPs ratio {ratio}"))?;
            if (num, den) == (1, 1) {
                ensure(out == spec, || format!("spec {i}: m = 1 is not the identity"))?;
            }
            build_backbone(&out, 3, (64, 64)).map_err(|e| e.to_string())?;
            ok[mi] += 1;
        }
    }
    ensure(ok.iter().all(|&n| n > 0), || format!("a multiplier never succeeded: {ok:?}"))?;
    ensure(ok[1] == 100, || "m = 1 failed somewhere".into())?;
    Ok(format!(
        "successes x0.5/x1/x2/x3 = {ok:?}, {exceeded} tolerance rejections; all within 15%"
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("AC1 analyze accounting", ac1),
        ("AC2 rewrite invariants", ac2),
        ("AC3 decoder oracle", ac3),
        ("AC4 break-even law", ac4),
        ("AC5 mask laws", ac5),
        ("AC6 executor oracle", ac6),
        ("AC7 speedup estimation", ac7),
        ("AC8 depth rescale", ac8),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{secs:.2}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

