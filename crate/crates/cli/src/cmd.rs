use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use poseopt::cost::{graph_cost, receptive_field, CostReport};
use poseopt::graph::{parse_graph, ActivationFn, Graph, Op, StageSpec};
use poseopt::latency::{breakeven_ratio, graph_latency, penalty_keys, LatencyParams, LatencyReport, Measurements};
use poseopt::paf::{decode as decode_poses, DecodeConfig, DecodeOutput, SkeletonSpec};
use poseopt::prune::{apply_plan, plan, PlanTarget, SensitivityPolicy};
use poseopt::rewrite::{dedilate, depth_rescale, replace_activations, replace_large_kernels, stage_flops, RewriteLog};
use poseopt::synth::{gen_poses, match_scene, render, GroundTruthPose, RenderConfig};
use poseopt::tensor::Tensor;
use poseopt::weights::WeightStore;

use crate::report::{data, CliError, Ctx, Outcome};
use crate::{AnalyzeArgs, CalibrateArgs, DecodeArgs, E2eArgs, InitWeightsArgs, OptimizeArgs, PrunePlanArgs, SynthArgs};

/// Joint error allowed when checking a decoded scene against its ground truth.
const MATCH_TOLERANCE_PX: f64 = 1.5;

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn load_graph(ctx: &mut Ctx, path: &Path, input: Option<&poseopt::graph::TensorShape>) -> Result<Graph, CliError> {
    let text = ctx.read_text(path)?;
    let g = parse_graph(&text).map_err(data("graph"))?;
    match input {
        Some(s) => g.with_input_shape(s.clone()).map_err(data("graph")),
        None => Ok(g),
    }
}

fn load_calib(ctx: &mut Ctx, path: Option<&Path>) -> Result<LatencyParams, CliError> {
    match path {
        Some(p) => {
            let text = ctx.read_text(p)?;
            LatencyParams::from_json(&text).map_err(data("calib"))
        }
        None => Ok(LatencyParams::illustrative()),
    }
}

fn load_policy(ctx: &mut Ctx, path: Option<&Path>) -> Result<SensitivityPolicy, CliError> {
    match path {
        Some(p) => {
            let text = ctx.read_text(p)?;
            Ok(SensitivityPolicy::from_json(&text)?)
        }
        None => Ok(SensitivityPolicy::default()),
    }
}

fn load_skeleton(ctx: &mut Ctx, path: Option<&Path>) -> Result<SkeletonSpec, CliError> {
    match path {
        Some(p) => {
            let text = ctx.read_text(p)?;
            SkeletonSpec::from_json(&text).map_err(data("skeleton"))
        }
        None => Ok(SkeletonSpec::coco18()),
    }
}

fn load_tensor(ctx: &mut Ctx, path: &Path) -> Result<Tensor, CliError> {
    let bytes = ctx.read(path)?;
    Tensor::read_from(bytes.as_slice()).map_err(|e| CliError::Data {
        kind: "tensor",
        message: format!("{}: {e}", path.display()),
    })
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn totals(cost: &CostReport) -> Value {
    let t = cost.totals;
    json!({
        "params": t.params,
        "macs": t.macs,
        "flops": t.flops,
        "params_millions": t.params as f64 / 1e6,
        "gmacs": t.macs as f64 / 1e9,
        "gflops": t.flops as f64 / 1e9,
    })
}

fn layer_table(g: &Graph, cost: &CostReport, lat: &LatencyReport, lp: &LatencyParams) -> Vec<Value> {
    g.nodes
        .iter()
        .map(|n| {
            let c = cost.per_node[&n.id];
            let mut row = json!({
                "id": n.id,
                "op": n.op.kind(),
                "block_tag": n.block_tag,
                "params": c.params,
                "macs": c.macs,
                "flops": c.flops,
                "latency_seconds": lat.per_node[&n.id].seconds,
            });
            if matches!(n.op, Op::Conv2d(_)) {
                row["breakeven"] = to_value(&breakeven_ratio(lp, c.macs));
            }
            let keys = penalty_keys(n);
            if !keys.is_empty() {
                row["penalties"] = to_value(&keys);
            }
            row
        })
        .collect()
}

fn output_rfs(g: &Graph) -> Result<BTreeMap<String, Value>, CliError> {
    g.outputs
        .iter()
        .map(|o| Ok((o.clone(), to_value(&receptive_field(g, o).map_err(data("cost"))?))))
        .collect()
}

pub fn analyze(a: &AnalyzeArgs, ctx: &mut Ctx) -> Result<Outcome, CliError> {
    let g = load_graph(ctx, &a.graph, a.input.as_ref())?;
    let lp = load_calib(ctx, a.calib.as_deref())?;
    let (cost, lat, rfs) = ctx.time("analyze", || -> Result<_, CliError> {
        let cost = graph_cost(&g).map_err(data("graph"))?;
        let lat = graph_latency(&g, None, &lp).map_err(data("cost"))?;
        Ok((cost, lat, output_rfs(&g)?))
    })?;
    let summary = format!(
        "{}: {:.3} M params, {:.3} GMACs, {:.3} GFLOPs, {:.3} ms estimated",
        g.name,
        cost.totals.params as f64 / 1e6,
        cost.totals.macs as f64 / 1e9,
        cost.totals.flops as f64 / 1e9,
        lat.total * 1e3
    );
    Ok(Outcome {
        config: json!({
            "graph": path_str(&a.graph),
            "input": a.input.as_ref().map(|s| s.to_string()),
            "calib": lp,
        }),
        results: json!({
            "graph": g.name,
            "input_shapes": cost.input_shapes,
            "nodes": g.nodes.len(),
            "totals": totals(&cost),
            "latency_total_seconds": lat.total,
            "receptive_fields": rfs,
            "layers": layer_table(&g, &cost, &lat, &lp),
        }),
        requires_retraining: false,
        summary,
    })
}

/// The graph passes selected on the command line, in a fixed order.
fn rewrite_graph(
    g: &Graph,
    large_kernels: Option<usize>,
    dedilation: bool,
    acts: &[(ActivationFn, ActivationFn)],
) -> Result<(Graph, RewriteLog), CliError> {
    let mut g = g.clone();
    let mut log = RewriteLog::default();
    let mut step = |r: Result<(Graph, RewriteLog), poseopt::rewrite::RewriteError>| -> Result<Graph, CliError> {
        let (next, l) = r.map_err(data("rewrite"))?;
        log.extend(l);
        Ok(next)
    };
    if let Some(k) = large_kernels {
        g = step(replace_large_kernels(&g, k))?;
    }
    if dedilation {
        g = step(dedilate(&g))?;
    }
    for &(from, to) in acts {
        g = step(replace_activations(&g, from, to))?;
    }
    Ok((g, log))
}

pub fn optimize(a: &OptimizeArgs, ctx: &mut Ctx) -> Result<Outcome, CliError> {
    let graph_passes = a.replace_large_kernels || a.dedilate || !a.replace_act.is_empty();
    if let Some(m) = a.depth_rescale {
        if graph_passes {
            return Err(CliError::Data {
                kind: "config",
                message: "--depth-rescale takes a stage spec; run graph passes on the built graph separately".into(),
            });
        }
        let text = ctx.read_text(&a.input)?;
        let spec: StageSpec = serde_json::from_str(&text).map_err(data("stage_spec"))?;
        spec.check().map_err(data("stage_spec"))?;
        let (out, before, after) = ctx.time("rewrite", || -> Result<_, CliError> {
            let out = depth_rescale(&spec, m, a.rounding_multiple, a.flops_tolerance).map_err(data("rewrite"))?;
            let before = stage_flops(&spec).map_err(data("rewrite"))?;
            let after = stage_flops(&out).map_err(data("rewrite"))?;
            Ok((out, before, after))
        })?;
        ctx.write_json(&a.out, &out)?;
        let changed = out != spec;
        return Ok(Outcome {
            config: json!({
                "input": path_str(&a.input),
                "depth_multiplier": m.to_string(),
                "rounding_multiple": a.rounding_multiple,
                "flops_tolerance": a.flops_tolerance,
                "out": path_str(&a.out),
            }),
            results: json!({
                "spec_before": spec,
                "spec_after": out,
                "flops_before": before,
                "flops_after": after,
                "flops_ratio": after as f64 / before as f64,
            }),
            requires_retraining: changed,
            summary: format!("depth x{m}: FLOPs ratio {:.4}", after as f64 / before as f64),
        });
    }

    let g = load_graph(ctx, &a.input, None)?;
    let large = a.replace_large_kernels.then_some(a.max_kernel);
    let (out, log) = ctx.time("rewrite", || rewrite_graph(&g, large, a.dedilate, &a.replace_act))?;
    let before = graph_cost(&g).map_err(data("graph"))?;
    let after = graph_cost(&out).map_err(data("graph"))?;
    let mut text = out.to_json();
    text.push('\n');
    ctx.write(&a.out, text.as_bytes())?;
    let applied = log.applied().count();
    Ok(Outcome {
        config: json!({
            "input": path_str(&a.input),
            "replace_large_kernels": a.replace_large_kernels,
            "max_kernel": a.max_kernel,
            "dedilate": a.dedilate,
            "replace_act": a.replace_act.iter().map(|(f, t)| format!("{}:{}", f.name(), t.name())).collect::<Vec<_>>(),
            "out": path_str(&a.out),
        }),
        results: json!({
            "graph": out.name,
            "nodes_before": g.nodes.len(),
            "nodes_after": out.nodes.len(),
            "totals_before": totals(&before),
            "totals_after": totals(&after),
            "rewrite_log": log,
        }),
        requires_retraining: log.requires_retraining(),
        summary: format!(
            "{} node(s) rewritten, MACs {} -> {}",
            applied, before.totals.macs, after.totals.macs
        ),
    })
}

pub fn prune_plan(a: &PrunePlanArgs, ctx: &mut Ctx) -> Result<Outcome, CliError> {
    let g = load_graph(ctx, &a.graph, a.input.as_ref())?;
    let lp = load_calib(ctx, Some(&a.calib))?;
    let policy = load_policy(ctx, a.policy.as_deref())?;
    let weights = match &a.weights {
        Some(dir) => {
            ctx.note_input_dir(dir);
            let w = WeightStore::load_dir(dir).map_err(data("weights"))?;
            w.check_against(&g).map_err(data("weights"))?;
            Some(w)
        }
        None => None,
    };
    let target = match (a.target_speedup, a.max_distortion) {
        (Some(s), _) => PlanTarget::Speedup(s),
        (None, Some(budget)) => PlanTarget::MaxDistortion {
            budget,
            probes: a.probes,
            seed: a.probe_seed,
        },
        (None, None) => unreachable!("clap requires one target"),
    };
    let p = ctx.time("plan", || plan(&g, weights.as_ref(), &lp, &policy, &target, a.scheme))?;
    if let (Some(w), Some(dir)) = (&weights, &a.pruned_weights_out) {
        let pruned = ctx.time("apply", || apply_plan(w, &g, &p))?;
        let paths = pruned.save_dir(dir).map_err(data("weights"))?;
        for path in paths {
            ctx.record(&path)?;
        }
    }
    let summary = format!(
        "{} layer(s) pruned, predicted speedup {:.3}x",
        p.decisions.len(),
        p.predicted_speedup
    );
    Ok(Outcome {
        config: json!({
            "graph": path_str(&a.graph),
            "input": a.input.as_ref().map(|s| s.to_string()),
            "calib": lp,
            "policy": policy,
            "target": target,
            "scheme": a.scheme,
            "weights": a.weights.as_deref().map(path_str),
        }),
        results: json!({ "plan": p }),
        requires_retraining: !p.decisions.is_empty(),
        summary,
    })
}

pub fn decode(a: &DecodeArgs, ctx: &mut Ctx) -> Result<Outcome, CliError> {
    let skel = load_skeleton(ctx, Some(&a.skeleton))?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = ctx.read_text(p)?;
            DecodeConfig::from_json(&text).map_err(data("decode_config"))?
        }
        None => DecodeConfig::default(),
    };
    if let Some(t) = a.peak_threshold {
        cfg.peak_threshold = t;
    }
    cfg.check().map_err(data("decode_config"))?;
    let heat = load_tensor(ctx, &a.heat)?;
    let paf = load_tensor(ctx, &a.paf)?;
    let poses = ctx.time("decode", || decode_poses(&heat, &paf, &skel, &cfg)).map_err(data("decode"))?;
    let summary = format!("{} person(s) decoded", poses.len());
    Ok(Outcome {
        config: json!({
            "heat": path_str(&a.heat),
            "paf": path_str(&a.paf),
            "skeleton": skel,
            "decode": cfg,
        }),
        results: to_value(&DecodeOutput { poses }),
        requires_retraining: false,
        summary,
    })
}

struct Scene<'a> {
    seed: u64,
    skel: &'a SkeletonSpec,
    cfg: &'a RenderConfig,
    poses: &'a [GroundTruthPose],
    heat: &'a Tensor,
    paf: &'a Tensor,
}

/// Writes `scene.json`, `heat.tnsr` and `paf.tnsr` into `dir`.
fn write_scene(ctx: &mut Ctx, dir: &Path, s: &Scene<'_>) -> Result<(), CliError> {
    let scene = json!({
        "seed": s.seed,
        "persons": s.poses.len(),
        "render": s.cfg,
        "skeleton": s.skel,
        "poses": s.poses,
    });
    ctx.write_json(&dir.join("scene.json"), &scene)?;
    ctx.write(&dir.join("heat.tnsr"), &s.heat.to_bytes())?;
    ctx.write(&dir.join("paf.tnsr"), &s.paf.to_bytes())
}

pub fn synth(a: &SynthArgs, ctx: &mut Ctx) -> Result<Outcome, CliError> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = ctx.read_text(p)?;
            serde_json::from_str::<RenderConfig>(&text).map_err(data("render_config"))?
        }
        None => RenderConfig::default(),
    };
    if let Some((h, w)) = a.size {
        cfg.height = h;
        cfg.width = w;
    }
    if let Some(n) = a.noise {
        cfg.noise_amplitude = n;
    }
    if let Some(s) = a.noise_seed {
        cfg.noise_seed = s;
    }
    let skel = load_skeleton(ctx, a.skeleton.as_deref())?;
    let (poses, heat, paf) = ctx.time("synth", || -> Result<_, CliError> {
        let poses = gen_poses(a.persons, &skel, &cfg, a.seed).map_err(data("synth"))?;
        let (heat, paf) = render(&poses, &skel, &cfg).map_err(data("synth"))?;
        Ok((poses, heat, paf))
    })?;
    let scene = Scene {
        seed: a.seed,
        skel: &skel,
        cfg: &cfg,
        poses: &poses,
        heat: &heat,
        paf: &paf,
    };
    write_scene(ctx, &a.out, &scene)?;
    Ok(Outcome {
        config: json!({
            "persons": a.persons,
            "seed": a.seed,
            "render": cfg,
            "skeleton": skel,
            "out": path_str(&a.out),
        }),
        results: json!({ "poses": poses }),
        requires_retraining: false,
        summary: format!("{} person(s) rendered at {}x{}", poses.len(), cfg.height, cfg.width),
    })
}

pub fn e2e(a: &E2eArgs, ctx: &mut Ctx) -> Result<Outcome, CliError> {
    let g = load_graph(ctx, &a.graph, None)?;
    let lp = load_calib(ctx, a.calib.as_deref())?;
    let policy = load_policy(ctx, a.policy.as_deref())?;

    let (cost0, lat0) = ctx.time("analyze", || -> Result<_, CliError> {
        Ok((
            graph_cost(&g).map_err(data("graph"))?,
            graph_latency(&g, None, &lp).map_err(data("cost"))?,
        ))
    })?;
    let acts = [(ActivationFn::Swish, ActivationFn::Hardtanh)];
    let (g1, log) = if a.no_rewrite {
        (g.clone(), RewriteLog::default())
    } else {
        ctx.time("rewrite", || rewrite_graph(&g, Some(3), true, &acts))?
    };
    let (cost1, lat1) = (
        graph_cost(&g1).map_err(data("graph"))?,
        graph_latency(&g1, None, &lp).map_err(data("cost"))?,
    );
    if !(a.target_speedup.is_finite() && a.target_speedup > 0.0) {
        return Err(CliError::Data {
            kind: "config",
            message: format!("target speedup {} must be a positive number", a.target_speedup),
        });
    }
    // The rewrites already bought lat0 / lat1; pruning supplies the rest.
    let target = PlanTarget::Speedup(a.target_speedup * lat1.total / lat0.total);
    let p = ctx.time("plan", || plan(&g1, None, &lp, &policy, &target, a.scheme))?;
    let planned_total = p.predicted_planned_latency;

    let skel = SkeletonSpec::coco18();
    let mut rcfg = RenderConfig {
        noise_amplitude: a.noise,
        noise_seed: a.seed,
        ..RenderConfig::default()
    };
    if let Some((h, w)) = a.size {
        rcfg.height = h;
        rcfg.width = w;
    }
    let dcfg = DecodeConfig::default();
    let (truth, heat, paf) = ctx.time("synth", || -> Result<_, CliError> {
        let truth = gen_poses(a.persons, &skel, &rcfg, a.seed).map_err(data("synth"))?;
        let (heat, paf) = render(&truth, &skel, &rcfg).map_err(data("synth"))?;
        Ok((truth, heat, paf))
    })?;
    let poses = ctx.time("decode", || decode_poses(&heat, &paf, &skel, &dcfg)).map_err(data("decode"))?;
    let m = match_scene(&poses, &truth);
    let exact = m.exact(MATCH_TOLERANCE_PX);

    if let Some(dir) = &a.out_dir {
        let mut text = g1.to_json();
        text.push('\n');
        ctx.write(&dir.join("optimized.graph.json"), text.as_bytes())?;
        ctx.write_json(&dir.join("plan.json"), &p)?;
        let scene = Scene {
            seed: a.seed,
            skel: &skel,
            cfg: &rcfg,
            poses: &truth,
            heat: &heat,
            paf: &paf,
        };
        write_scene(ctx, dir, &scene)?;
    }

    let predicted_speedup = lat0.total / planned_total;
    let summary = format!(
        "{}: {:.3} ms -> {:.3} ms ({:.3}x), {} of {} person(s) decoded{}",
        g.name,
        lat0.total * 1e3,
        planned_total * 1e3,
        predicted_speedup,
        m.persons_decoded,
        m.persons_expected,
        if exact { ", all joints within tolerance" } else { "" }
    );
    Ok(Outcome {
        config: json!({
            "graph": path_str(&a.graph),
            "calib": lp,
            "policy": policy,
            "target_speedup": a.target_speedup,
            "scheme": a.scheme,
            "rewrite": if a.no_rewrite { json!(null) } else { json!({
                "replace_large_kernels": 3,
                "dedilate": true,
                "replace_act": ["swish:hardtanh"],
            }) },
            "persons": a.persons,
            "seed": a.seed,
            "render": rcfg,
            "decode": dcfg,
        }),
        results: json!({
            "graph": g.name,
            "totals_before": totals(&cost0),
            "totals_after_rewrite": totals(&cost1),
            "rewrite_log": log,
            "plan": p,
            "latency": {
                "dense_total": lat0.total,
                "rewritten_total": lat1.total,
                "planned_total": planned_total,
                "rewrite_speedup": lat0.total / lat1.total,
                "prune_speedup": p.predicted_speedup,
                "predicted_speedup": predicted_speedup,
            },
            "scene": { "persons": truth.len(), "seed": a.seed, "ground_truth": truth },
            "decode": DecodeOutput { poses },
            "match": {
                "persons_expected": m.persons_expected,
                "persons_decoded": m.persons_decoded,
                "assignment": m.assignment,
                "max_joint_error": m.max_joint_error,
                "missing_joints": m.missing_joints,
                "tolerance_px": MATCH_TOLERANCE_PX,
                "exact": exact,
            },
        }),
        requires_retraining: log.requires_retraining() || !p.decisions.is_empty(),
        summary,
    })
}

pub fn calibrate(a: &CalibrateArgs, ctx: &mut Ctx) -> Result<Outcome, CliError> {
    let base = load_calib(ctx, a.base.as_deref())?;
    let text = ctx.read_text(&a.measurements)?;
    let m: Measurements = serde_json::from_str(&text).map_err(data("measurements"))?;
    let fitted = base.fit(&m).map_err(data("calib"))?;
    ctx.write_json(&a.out, &fitted)?;
    Ok(Outcome {
        config: json!({
            "measurements": path_str(&a.measurements),
            "base": base,
            "out": path_str(&a.out),
        }),
        results: json!({
            "calib": fitted,
            "dense_samples": m.dense.len(),
            "sparse_samples": m.sparse.len(),
        }),
        requires_retraining: false,
        summary: format!(
            "time_per_mac {:.3e} s, per_node_overhead {:.3e} s",
            fitted.time_per_mac, fitted.per_node_overhead
        ),
    })
}

pub fn init_weights(a: &InitWeightsArgs, ctx: &mut Ctx) -> Result<Outcome, CliError> {
    let g = load_graph(ctx, &a.graph, None)?;
    let w = ctx.time("init", || WeightStore::random(&g, a.seed));
    let paths = w.save_dir(&a.out).map_err(data("weights"))?;
    for p in &paths {
        ctx.record(p)?;
    }
    Ok(Outcome {
        config: json!({ "graph": path_str(&a.graph), "seed": a.seed, "out": path_str(&a.out) }),
        results: json!({ "graph": g.name, "nodes_with_weights": w.len() }),
        requires_retraining: false,
        summary: format!("weights for {} conv(s) written", w.len()),
    })
}
