//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; pass a substring to run a subset, e.g.
//! `cargo test --test acceptance -- segmentation`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gdanet::gdm::{disentangle, highpass, spectral_check, variation_scores};
use gdanet::graph::{build_adjacency, GraphConfig};
use gdanet::model::{count_params, Gdanet, ModelConfig};
use gdanet::pointcloud::{generate_synthetic, PointCloud, ShapeFamily, SyntheticSpec};
use gdanet::sgcam::{fuse, fuse_vars, SgcamConfig, SgcamParams};
use gdanet::tensor::gradcheck::{check_gradients, GradCheckOptions};
use gdanet::tensor::{init_params, Bound, InitScheme, ParamStore, Real, Tape, Tensor, Var};
use gdanet::training::{
    cylinder_segmentation, desk_classification, evaluate, run_ablation, train_with, vote_logits, AblationToggles,
    Control, DeskSpec, TrainConfig, VoteConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn cloud(n: usize, seed: u64) -> PointCloud {
    PointCloud::new(uniform(&[n, 3], -1.0, 1.0, seed).into_data(), 3).unwrap()
}

// Replaces zero-initialized layers (block projections, value MLPs) with
// random weights so the attention path affects the output.
fn randomize<T: Real>(store: &mut ParamStore<T>, seed: u64) {
    for (i, p) in store.iter_mut().enumerate() {
        if p.tensor.data().iter().all(|v| v.as_f64() == 0.0) && p.tensor.rank() == 2 {
            p.tensor = init_params(p.tensor.shape(), InitScheme::KaimingUniform, seed + i as u64);
        }
    }
}

fn spectral_identity() -> Outcome {
    let start = Instant::now();
    let sizes = [2, 8, 32, 64];
    let ks = [2, 8, 20];
    let (mut worst_resp, mut worst_range, mut worst_imag) = (0.0f64, 0.0f64, 0.0f64);
    for t in 0..20 {
        let n = sizes[t % 4];
        // k must leave at least one non-neighbor, so small clouds use N − 1.
        let k = ks[t % 3].min(n - 1);
        let pts = uniform(&[n, 3], -1.0, 1.0, 100 + t as u64);
        let graph = build_adjacency(&pts, &GraphConfig::with_k(k)).map_err(|e| e.to_string())?;
        let r = spectral_check(&graph).map_err(|e| e.to_string())?;
        worst_resp = worst_resp.max(r.max_response_error);
        worst_imag = worst_imag.max(r.max_imag);
        for &l in &r.eigenvalues_a {
            worst_range = worst_range.max(-l).max(l - 1.0);
        }
    }
    let elapsed = start.elapsed();
    ensure(
        worst_resp <= 1e-8 && worst_range <= 1e-8 && worst_imag <= 1e-8 && elapsed < Duration::from_secs(10),
        format!(
            "20 graphs: max |μ − (1 − λ)| {worst_resp:.2e}, range violation {worst_range:.2e}, imag {worst_imag:.2e}, {elapsed:.2?}"
        ),
    )
}

fn constant_scores() -> Outcome {
    let mut worst = 0.0f64;
    let mut graphs = 0;
    for (t, &(n, k)) in [(2, 1), (8, 3), (32, 8), (64, 20), (200, 20)].iter().enumerate() {
        let constant = Tensor::filled(&[n, 5], 0.37);
        let from_coords = build_adjacency(&uniform(&[n, 3], -1.0, 1.0, t as u64), &GraphConfig::with_k(k));
        // All points coincide: every distance is zero.
        let from_itself = build_adjacency(&constant, &GraphConfig::with_k(k));
        for graph in [from_coords, from_itself] {
            let graph = graph.map_err(|e| e.to_string())?;
            let scores = variation_scores(&highpass(&graph, &constant).map_err(|e| e.to_string())?);
            worst = scores.iter().fold(worst, |w, s| w.max(s.abs()));
            graphs += 1;
        }
    }
    ensure(worst <= 1e-12, format!("{graphs} graphs, max |score| {worst:.1e}"))
}

fn contour_selection() -> Outcome {
    let start = Instant::now();
    let cloud = generate_synthetic(&SyntheticSpec {
        shape_family: ShapeFamily::PlaneWithCrease,
        n_points: 1024,
        seed: 0,
        part_labels: false,
    })
    .map_err(|e| e.to_string())?;
    let flags = cloud.crease_flags().ok_or("plane-with-crease has no crease flags")?.to_vec();
    let xyz = cloud.coords_tensor::<f64>();
    let graph = build_adjacency(&xyz, &GraphConfig::with_k(20)).map_err(|e| e.to_string())?;
    let split = disentangle(&graph, &xyz, 256).map_err(|e| e.to_string())?;
    let mut order: Vec<usize> = (0..1024).collect();
    order.sort_by(|&a, &b| split.scores[b].total_cmp(&split.scores[a]).then(a.cmp(&b)));
    let mut rank = vec![0; 1024];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let crease: Vec<usize> = (0..1024).filter(|&i| flags[i]).collect();
    let interior: Vec<usize> = (0..1024).filter(|&i| !flags[i]).collect();
    let top_half = crease.iter().filter(|&&i| rank[i] < 512).count() as f64 / crease.len() as f64;
    let mean = |idx: &[usize]| idx.iter().map(|&i| split.scores[i]).sum::<f64>() / idx.len() as f64;
    let (mc, mi) = (mean(&crease), mean(&interior));
    let elapsed = start.elapsed();
    ensure(
        !crease.is_empty() && top_half >= 0.8 && mc > mi && elapsed < Duration::from_secs(5),
        format!(
            "{} crease points, {:.1}% in top half, mean crease {mc:.3e} vs interior {mi:.3e}, {elapsed:.2?}",
            crease.len(),
            100.0 * top_half
        ),
    )
}

fn weighted(tape: &Tape<f64>, out: Var, seed: u64) -> gdanet::Result<Var> {
    let w = tape.constant(uniform(&tape.shape(out), -1.0, 1.0, seed));
    Ok(tape.sum(tape.mul(out, w)?))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions::default();
    let mut worst = (0.0f64, "");
    let mut record = |name: &'static str, r: gdanet::Result<gdanet::tensor::gradcheck::GradCheckReport>| -> Result<(), String> {
        let r = r.map_err(|e| format!("{name}: {e}"))?;
        if r.checked == 0 {
            return Err(format!("{name}: nothing checked"));
        }
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, name);
        }
        Ok(())
    };
    type Op = fn(&Tape<f64>, &[Var]) -> gdanet::Result<Var>;
    // Entries are kept away from the ReLU kink and from max ties.
    let a = uniform(&[5, 4], -1.0, 1.0, 1).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let b = uniform(&[4, 3], -1.0, 1.0, 2);
    let row = uniform(&[4], -1.0, 1.0, 3);
    let ops: Vec<(&'static str, Vec<Tensor<f64>>, Op)> = vec![
        ("matmul", vec![a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1])),
        ("transpose", vec![a.clone()], |t, v| t.transpose(v[0])),
        ("add", vec![a.clone(), row.clone()], |t, v| t.add(v[0], v[1])),
        ("sub", vec![a.clone(), a.map(|x| x * 0.5)], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![a.clone(), row.clone()], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -2.5))),
        ("concat", vec![a.clone(), uniform(&[5, 2], -1.0, 1.0, 4)], |t, v| t.concat(&[v[0], v[1]], 1)),
        ("gather_rows", vec![a.clone()], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2])),
        ("narrow", vec![a.clone()], |t, v| t.narrow(v[0], 1, 3)),
        ("reshape", vec![a.clone()], |t, v| t.reshape(v[0], &[2, 10])),
        ("relu", vec![a.clone()], |t, v| Ok(t.relu(v[0]))),
        ("max_axis", vec![a.clone()], |t, v| t.max_axis(v[0], 0)),
        ("gather_max", vec![a.clone()], |t, v| t.gather_max(v[0], &[0, 2, 4, 1, 1, 3], 3)),
        ("softmax", vec![a.clone()], |t, v| t.softmax(v[0], 1)),
        ("log_softmax", vec![a.clone()], |t, v| t.log_softmax(v[0], 1)),
        ("cross_entropy", vec![a.clone()], |t, v| t.cross_entropy(v[0], &[0, 3, 2, 1, 1])),
        ("sum", vec![a.clone()], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![a.clone()], |t, v| Ok(t.mean(v[0]))),
        ("channel_norm", vec![a.clone()], |t, v| t.channel_norm(v[0])),
    ];
    for (name, inputs, op) in ops {
        let r = check_gradients(&inputs, |t, v| weighted(t, op(t, v)?, 9), &opts);
        record(name, r)?;
    }

    // Fusion with all six MLPs live.
    let mut store = ParamStore::<f64>::new();
    let cfg = SgcamConfig {
        embed_dim: 4,
        ..SgcamConfig::default()
    };
    let att = SgcamParams::new(&mut store, "att", 3, cfg, 5).map_err(|e| e.to_string())?;
    randomize(&mut store, 50);
    let x = uniform(&[10, 3], -1.0, 1.0, 6);
    let graph = build_adjacency(&x, &GraphConfig::with_k(4)).map_err(|e| e.to_string())?;
    let split = disentangle(&graph, &x, 3).map_err(|e| e.to_string())?;
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|p| p.tensor.clone()));
    let r = check_gradients(
        &inputs,
        |tape, vars| {
            let bound = Bound::from_vars(vars[1..].to_vec());
            let out = fuse_vars(tape, &bound, &att, vars[0], &split, vars[0])?;
            weighted(tape, out.z, 7)
        },
        &opts,
    );
    record("sgcam fuse", r)?;

    // Full two-block network, loss with respect to every parameter.
    let cfg = ModelConfig {
        k_local: 4,
        k_graph: 4,
        lift_widths: vec![6],
        block_channels: 6,
        local_widths: vec![8],
        final_widths: vec![10],
        cls_head_widths: vec![6],
        attention: SgcamConfig {
            embed_dim: 4,
            ..SgcamConfig::default()
        },
        zero_init_projection: false,
        ..ModelConfig::default()
    };
    let (model, mut store) = Gdanet::init::<f64>(cfg).map_err(|e| e.to_string())?;
    randomize(&mut store, 70);
    let coords = cloud(24, 8).coords_tensor::<f64>();
    let params: Vec<Tensor<f64>> = store.iter().map(|p| p.tensor.clone()).collect();
    let r = check_gradients(
        &params,
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let logits = model.classify_vars(tape, &bound, &coords, None)?;
            tape.cross_entropy(logits, &[2])
        },
        &opts,
    );
    record("2-block forward", r)?;
    let elapsed = start.elapsed();
    ensure(
        worst.0 <= 1e-4 && elapsed < Duration::from_secs(60),
        format!("max relative error {:.2e} ({}), {elapsed:.2?}", worst.0, worst.1),
    )
}

fn identity_at_init() -> Outcome {
    let (model, store) = Gdanet::init::<f64>(ModelConfig::default()).map_err(|e| e.to_string())?;
    let c = model.config().block_channels;
    let x = uniform(&[128, c], -2.0, 2.0, 3);
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let xv = tape.constant(x.clone());
    let m = model.config().m_for(128).map_err(|e| e.to_string())?;
    for (b, block) in model.blocks().iter().enumerate() {
        let out = model.block_forward(&tape, &bound, block, xv, m, None, None).map_err(|e| e.to_string())?;
        if *tape.value(out) != x {
            return Err(format!("block {b} changes its input"));
        }
        let graph = build_adjacency(&x, &GraphConfig::with_k(model.config().k_graph)).map_err(|e| e.to_string())?;
        let split = disentangle(&graph, &x, m).map_err(|e| e.to_string())?;
        let att = block.attention.as_ref().ok_or("block has no attention")?;
        let z = fuse(att, &store, &x, &split, &x).map_err(|e| e.to_string())?;
        let twice: Vec<f64> = (0..128).flat_map(|i| x.row(i).iter().chain(x.row(i)).copied().collect::<Vec<_>>()).collect();
        if z.data() != twice.as_slice() {
            return Err(format!("block {b} fuse differs from x ⊕ x"));
        }
    }
    Ok(format!("{} blocks exact identity, fuse = x ⊕ x bit-for-bit", model.blocks().len()))
}

fn distinct_scores(cloud: &PointCloud) -> bool {
    let xyz = cloud.coords_tensor::<f64>();
    let graph = build_adjacency(&xyz, &GraphConfig::with_k(20)).unwrap();
    let mut s = variation_scores(&highpass(&graph, &xyz).unwrap());
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[0] < w[1])
}

fn permutation_invariance() -> Outcome {
    let cfg = ModelConfig {
        zero_init_projection: false,
        ..ModelConfig::default()
    };
    let (model, mut store) = Gdanet::init::<f32>(cfg).map_err(|e| e.to_string())?;
    randomize(&mut store, 90);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut same, mut tested) = (0.0f64, 0, 0);
    let mut seed = 0;
    while tested < 10 {
        seed += 1;
        let c = cloud(512, 1000 + seed);
        if !distinct_scores(&c) {
            continue;
        }
        let mut perm: Vec<usize> = (0..512).collect();
        for i in (1..512).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let a = model.forward_classify(&store, &c).map_err(|e| e.to_string())?;
        let b = model.forward_classify(&store, &c.select(&perm).unwrap()).map_err(|e| e.to_string())?;
        worst = worst.max(a.max_abs_diff(&b));
        let argmax = |t: &Tensor<f32>| gdanet::training::argmax(&t.to_f64_vec());
        same += usize::from(argmax(&a) == argmax(&b));
        tested += 1;
    }
    ensure(
        worst <= 1e-5 && same == 10,
        format!("max logit difference {worst:.2e}, argmax agrees {same}/10"),
    )
}

fn classification() -> Outcome {
    let start = Instant::now();
    let spec = DeskSpec {
        train_per_class: 40,
        test_per_class: 25,
        ..DeskSpec::default()
    };
    let (train_set, test_set) = desk_classification(&spec).map_err(|e| e.to_string())?;
    let (model, mut store) = Gdanet::init::<f32>(ModelConfig::default()).map_err(|e| e.to_string())?;
    let mut best = (0.0, 0);
    let log = train_with(&model, &mut store, &train_set, &TrainConfig::default(), |e, s| {
        let acc = evaluate(&model, s, &test_set, &VoteConfig::plain())?.overall_accuracy;
        if acc > best.0 {
            best = (acc, e.epoch);
        }
        Ok(if acc >= 0.95 { Control::Stop } else { Control::Continue })
    })
    .map_err(|e| e.to_string())?;
    let single = format!("test accuracy {:.3} at epoch {} of {}", best.0, best.1, log.len());

    let rows = [AblationToggles::FULL, AblationToggles::KNN_ONLY];
    let budget = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    let table = run_ablation::<f32>(&ModelConfig::default(), &train_set, &test_set, &rows, &budget, &VoteConfig::plain(), &[1, 2, 3])
        .map_err(|e| e.to_string())?;
    let full = table.row(AblationToggles::FULL).unwrap();
    let knn = table.row(AblationToggles::KNN_ONLY).unwrap();
    let elapsed = start.elapsed();
    ensure(
        best.0 >= 0.95 && full.mean() >= knn.mean() && elapsed < Duration::from_secs(30 * 60),
        format!(
            "{single}; ablation mean full {:.3} {:?} vs knn-only {:.3} {:?}; {elapsed:.0?}",
            full.mean(),
            full.accuracies,
            knn.mean(),
            knn.accuracies
        ),
    )
}

fn segmentation() -> Outcome {
    let spec = DeskSpec {
        train_per_class: 60,
        test_per_class: 20,
        ..DeskSpec::default()
    };
    let (train_set, test_set) = cylinder_segmentation(&spec).map_err(|e| e.to_string())?;
    let (model, mut store) = Gdanet::init::<f32>(ModelConfig::segmentation(2, 1)).map_err(|e| e.to_string())?;
    let mut reached = None;
    let mut last = (0.0, 0.0);
    train_with(&model, &mut store, &train_set, &TrainConfig::default(), |e, s| {
        let r = evaluate(&model, s, &test_set, &VoteConfig::plain())?;
        last = (r.overall_accuracy, r.instance_miou.unwrap_or(0.0));
        if last.0 >= 0.90 && last.1 >= 0.80 {
            reached = Some(e.epoch);
            return Ok(Control::Stop);
        }
        Ok(Control::Continue)
    })
    .map_err(|e| e.to_string())?;
    let detail = format!("point accuracy {:.3}, instance mIoU {:.3}", last.0, last.1);
    match reached {
        Some(epoch) => Ok(format!("{detail} at epoch {epoch}")),
        None => Err(format!("{detail} after 50 epochs")),
    }
}

fn parameter_budget() -> Outcome {
    let (_, store) = Gdanet::init::<f32>(ModelConfig::default()).map_err(|e| e.to_string())?;
    let n = count_params(&store);
    ensure(n <= 1_500_000, format!("{n} parameters"))
}

fn train_cli(out: &Path) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_gdanet"))
        .args(["train", "--n-points", "64", "--train-per-class", "3", "--test-per-class", "1", "--epochs", "2", "--seed", "11"])
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    std::fs::read(out.join("model.ckpt")).map_err(|e| e.to_string())
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = train_cli(&dir.path().join("a"))?;
    let b = train_cli(&dir.path().join("b"))?;
    if a != b {
        return Err("checkpoints differ".into());
    }

    let cfg = ModelConfig {
        zero_init_projection: false,
        ..ModelConfig::default()
    };
    let (model, mut store) = Gdanet::init::<f32>(cfg).map_err(|e| e.to_string())?;
    randomize(&mut store, 30);
    let spec = DeskSpec {
        n_points: 256,
        train_per_class: 0,
        test_per_class: 2,
        ..DeskSpec::default()
    };
    let (_, test_set) = desk_classification(&spec).map_err(|e| e.to_string())?;
    let unit = VoteConfig {
        votes: 4,
        scale_range: [1.0, 1.0],
        seed: 9,
    };
    for (i, s) in test_set.samples.iter().enumerate() {
        let voted = vote_logits(&model, &store, s, i, &unit).map_err(|e| e.to_string())?;
        let plain = model.forward_classify(&store, &s.cloud).map_err(|e| e.to_string())?.to_f64_vec();
        if voted != plain {
            return Err(format!("sample {i}: voted {voted:?} vs plain {plain:?}"));
        }
    }
    let voted = evaluate(&model, &store, &test_set, &unit).map_err(|e| e.to_string())?;
    let plain = evaluate(&model, &store, &test_set, &VoteConfig::plain()).map_err(|e| e.to_string())?;
    ensure(
        voted == plain,
        format!("checkpoints identical ({} bytes); unit-scale voting equals plain on {} samples", a.len(), test_set.len()),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("spectral identity", spectral_identity),
        ("constant-cloud scores", constant_scores),
        ("contour selection", contour_selection),
        ("gradient suite", gradient_suite),
        ("identity at init", identity_at_init),
        ("permutation invariance", permutation_invariance),
        ("desk classification and ablation", classification),
        ("desk segmentation", segmentation),
        ("parameter budget", parameter_budget),
        ("reproducibility", reproducibility),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if filter.as_ref().is_some_and(|p| !name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail} [{:.1?}]", i + 1, start.elapsed());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
