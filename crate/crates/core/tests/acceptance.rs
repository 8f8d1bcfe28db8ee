//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//!
//! Criterion 9 trains on Fashion-MNIST from `MULTIEXIT_DATA_DIR` (default `data/fashion-mnist`
//! at the workspace root; `scripts/fetch_fashion_mnist.py` downloads it).

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{gradcheck, gradcheck_params, random_tensor};
use multiexit::anytime::{execution_key, run_anytime, select_exit, BudgetPolicy, Interrupt};
use multiexit::autodiff::{global_avg_pool, seeded_rng, Ctx, ParamStore, Scheduler, SchedulerConfig, Tape, Tensor, Var};
use multiexit::branches::{BranchArchitecture, BranchBody, BranchConfig, ExitBranch, MixerLayer, ResMlpLayer};
use multiexit::data::checkpoint::{checkpoint_bytes, parse_checkpoint, TrainingMetadata};
use multiexit::data::export::{export_profiles, read_profiles, write_profiles};
use multiexit::data::idx::load_fashion_mnist;
use multiexit::data::synthetic::gen_two_halves;
use multiexit::data::{LabeledImageSet, Split};
use multiexit::profile::{
    cumulative_flops, exit_flops, mark_practical, profile_all_exits, profile_exits, ExitKind, ExitProfile, FlopCount,
    PracticalMode,
};
use multiexit::train::{
    combined_loss, end_to_end_loss, evaluate_final, train_backbone, train_classifier_wise, train_layer_wise_with, ExitId,
    LossWeights, MetricKind, MultiExitModel, TaskKind, TrainConfig,
};
use multiexit::vit::{EncoderLayer, MultiHeadAttention, ViTConfig};
use multiexit::Result;
use rand::Rng;

use BranchArchitecture::*;

const GRAD_TOL: f64 = 1e-4;

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient suite", criterion_1),
        ("normalization invariants", criterion_2),
        ("residual identities", criterion_3),
        ("token-mode oracle", criterion_4),
        ("strategy contracts", criterion_5),
        ("practical-branch oracle", criterion_6),
        ("FLOPs ordering", criterion_7),
        ("anytime equivalence", criterion_8),
        ("desk-scale training", criterion_9),
        ("scheduler protocol", criterion_10),
        ("persistence", criterion_11),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------------------------
// 1. Finite-difference gradient checks.

type OpCase = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn op_cases(i: usize) -> Vec<(&'static str, OpCase)> {
    let s = i as u64 * 100;
    let r = |shape: &[usize], k: u64| random_tensor(shape, s + k);
    let positive = |shape: &[usize], k: u64| {
        let mut t = random_tensor(shape, s + k);
        t.values_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
        t
    };
    let (a, b) = (i + 1, i + 2);
    let rank3 = [a, 2, 3];
    let labels: Vec<usize> = (0..b).map(|j| (j * 7 + i) % 4).collect();
    let conv_k = 1 + 2 * (i % 2);
    let conv_stride = 1 + i % 2;
    let conv_pad = i % 2;
    vec![
        ("matmul", (vec![r(&[a, b], 1), r(&[b, 3], 2)], Box::new(|t, v| t.matmul(v[0], v[1])))),
        (
            "linear",
            (vec![r(&[2, a, 3], 1), r(&[3, b], 2), r(&[b], 3)], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))),
        ),
        ("linear (no bias)", (vec![r(&[a, 3], 1), r(&[3, b], 2)], Box::new(|t, v| t.linear(v[0], v[1], None)))),
        ("bmm", (vec![r(&[a, 2, 3], 1), r(&[a, 3, b], 2)], Box::new(|t, v| t.bmm(v[0], v[1], false)))),
        ("bmm (transposed)", (vec![r(&[a, 2, 3], 1), r(&[a, b, 3], 2)], Box::new(|t, v| t.bmm(v[0], v[1], true)))),
        ("add", (vec![r(&rank3, 1), r(&rank3, 2)], Box::new(|t, v| t.add(v[0], v[1])))),
        ("add_broadcast", (vec![r(&rank3, 1), r(&[2, 3], 2)], Box::new(|t, v| t.add_broadcast(v[0], v[1])))),
        ("mul", (vec![r(&rank3, 1), r(&rank3, 2)], Box::new(|t, v| t.mul(v[0], v[1])))),
        ("scale", (vec![r(&rank3, 1)], Box::new(|t, v| Ok(t.scale(v[0], -1.7))))),
        ("gelu", (vec![r(&[a, b], 1)], Box::new(|t, v| Ok(t.gelu(v[0]))))),
        ("softmax", (vec![r(&rank3, 1)], Box::new(move |t, v| t.softmax(v[0], i % 3)))),
        (
            "layer_norm",
            (vec![r(&[a, b + 1], 1), r(&[b + 1], 2), r(&[b + 1], 3)], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1))),
        ),
        ("affine", (vec![r(&rank3, 1), r(&[3], 2), r(&[3], 3)], Box::new(|t, v| t.affine(v[0], v[1], v[2])))),
        ("permute", (vec![r(&rank3, 1)], Box::new(|t, v| t.permute(v[0], &[2, 0, 1])))),
        ("reshape", (vec![r(&rank3, 1)], Box::new(move |t, v| t.reshape(v[0], &[a * 2, 3])))),
        ("narrow", (vec![r(&[a, 4, 3], 1)], Box::new(|t, v| t.narrow(v[0], 1, 1, 2)))),
        ("concat", (vec![r(&rank3, 1), r(&[a, 1, 3], 2)], Box::new(|t, v| t.concat(&[v[0], v[1]], 1)))),
        ("repeat", (vec![r(&[a, 1, 3], 1)], Box::new(move |t, v| t.repeat(v[0], 1, b)))),
        ("mean", (vec![r(&rank3, 1)], Box::new(move |t, v| t.mean(v[0], i % 3)))),
        (
            "conv2d",
            (
                vec![r(&[1 + i % 2, 4 + i, 3 + i, 2], 1), r(&[conv_k, conv_k, 2, 3], 2), r(&[3], 3)],
                Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), conv_stride, conv_pad)),
            ),
        ),
        ("maxpool2d", (vec![r(&[1 + i % 2, 4 + i, 4 + i, 2], 1)], Box::new(|t, v| t.maxpool2d(v[0], 2, 2)))),
        ("global_avg_pool", (vec![r(&rank3, 1)], Box::new(|t, v| global_avg_pool(t, v[0])))),
        (
            "dropout",
            (
                vec![r(&[a, b], 1)],
                Box::new(move |t, v| t.dropout(v[0], 0.3, Some(&mut seeded_rng(s + 9)))),
            ),
        ),
        ("cross_entropy", (vec![r(&[b, 4], 1)], Box::new(move |t, v| t.cross_entropy(v[0], &labels)))),
        ("l1_loss", (vec![r(&[b, 1], 1), positive(&[b, 1], 2)], Box::new(|t, v| t.l1_loss(v[0], v[1])))),
        ("sum", (vec![r(&rank3, 1)], Box::new(|t, v| Ok(t.sum(v[0]))))),
    ]
}

fn branch_config(i: usize) -> BranchConfig {
    let mut c = BranchConfig::for_backbone(&ViTConfig {
        image_size: 2 * (2 + i % 2),
        patch_size: 2,
        dim: if i < 3 { 4 } else { 8 },
        heads: 2,
        outputs: 3,
        dropout: 0.0,
        ..ViTConfig::default()
    });
    c.pool_class_token = i != 4;
    c
}

fn criterion_1() -> Outcome {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut record = |name: &str, err: f64| {
        let e = worst.entry(name.to_string()).or_insert(0.0);
        *e = e.max(err);
    };
    for i in 0..5 {
        for (name, (inputs, f)) in op_cases(i) {
            record(name, gradcheck(&inputs, |t, v| f(t, v)));
        }
        let config = branch_config(i);
        for (k, arch) in BranchArchitecture::ALL.into_iter().enumerate() {
            let mut store = ParamStore::new();
            let branch = ExitBranch::new(&mut store, "b", arch, &config, &mut seeded_rng((i * 10 + k) as u64)).unwrap();
            // Off the initial values so that no path is trivially zero.
            let mut rng = seeded_rng(500 + (i * 10 + k) as u64);
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let noise = Tensor::uniform(store.get(id).shape(), -0.3, 0.3, &mut rng);
                let t = store.get_mut(id);
                t.values_mut().iter_mut().zip(noise.values()).for_each(|(v, n)| *v += n);
            }
            let input = random_tensor(&[1 + i % 3, config.tokens, config.dim], 900 + i as u64);
            let err = gradcheck_params(&store, &branch.params(), &[input], |cx, v| branch.forward(cx, v[0]));
            record(arch.name(), err);
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let (name, _) = worst.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    check(
        max < GRAD_TOL,
        format!("{} operations and branches x 5 shapes, worst relative error {max:.2e} ({name})", worst.len()),
    )
}

// ---------------------------------------------------------------------------------------------
// 2. Softmax and attention rows.

fn criterion_2() -> Outcome {
    let mut rng = seeded_rng(2);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let shape: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
        let axis = rng.random_range(0..shape.len());
        let scale = [1.0, 10.0, 50.0][case % 3];
        let x = Tensor::uniform(&shape, -scale, scale, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let y = tape.softmax(v, axis).unwrap();
        let sums = tape.mean(y, axis).unwrap();
        for &m in tape.value(sums) {
            worst = worst.max((m * shape[axis] as f64 - 1.0).abs());
        }

        let mut store = ParamStore::new();
        let dim = 4 * rng.random_range(1..3);
        let attn = MultiHeadAttention::new(&mut store, "a", dim, 2, &mut seeded_rng(case as u64)).unwrap();
        let tokens = rng.random_range(1..8);
        let input = Tensor::uniform(&[2, tokens, dim], -scale, scale, &mut rng);
        let mut cx = Ctx::eval(&store);
        let xv = cx.tape.constant(&input);
        let (_, w) = attn.forward_with_weights(&mut cx, xv).unwrap();
        for row in cx.tape.value(w).chunks(tokens) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(worst <= 1e-9, format!("100 softmax + 100 attention inputs, worst |row sum - 1| = {worst:.1e}"))
}

// ---------------------------------------------------------------------------------------------
// 3. Zero-weight layers are the identity.

fn criterion_3() -> Outcome {
    let input = random_tensor(&[2, 5, 8], 3);
    let identity = |store: &ParamStore, f: &dyn Fn(&mut Ctx, Var) -> Result<Var>| {
        let mut cx = Ctx::eval(store);
        let x = cx.tape.constant(&input);
        let y = f(&mut cx, x).unwrap();
        cx.tape.value(y) == input.values()
    };
    let zero = |store: &mut ParamStore, ids: Vec<multiexit::autodiff::ParamId>| {
        for id in ids {
            store.get_mut(id).values_mut().fill(0.0);
        }
    };
    let mut store = ParamStore::new();
    let mixer = MixerLayer::new(&mut store, "m", 5, 8, 2, &mut seeded_rng(1));
    let resmlp = ResMlpLayer::new(&mut store, "r", 5, 8, 2, &mut seeded_rng(2));
    let encoder = EncoderLayer::new(&mut store, "e", 8, 2, 2, 0.0, &mut seeded_rng(3)).unwrap();
    zero(&mut store, mixer.mixing_params());
    zero(&mut store, resmlp.mixing_params());
    zero(&mut store, encoder.residual_output_params());
    let results = [
        ("mixer", identity(&store, &|cx, x| mixer.forward(cx, x))),
        ("resmlp", identity(&store, &|cx, x| resmlp.forward(cx, x))),
        ("encoder", identity(&store, &|cx, x| encoder.forward(cx, x))),
    ];
    let detail = results.iter().map(|(n, ok)| format!("{n} {}", if *ok { "exact" } else { "differs" })).collect::<Vec<_>>();
    check(results.iter().all(|r| r.1), detail.join(", "))
}

// ---------------------------------------------------------------------------------------------
// 4. Classification-token handling of the CNN branches.

fn criterion_4() -> Outcome {
    let config = BranchConfig::for_backbone(&ViTConfig::default());
    let build = |arch| {
        let mut store = ParamStore::new();
        let b = ExitBranch::new(&mut store, "cnn", arch, &config, &mut seeded_rng(4)).unwrap();
        (store, b)
    };
    let (sa, add) = build(CnnAddEe);
    let (si, ignore) = build(CnnIgnoreEe);
    let (_, project) = build(CnnProjectEe);
    let mut input = random_tensor(&[3, config.tokens, config.dim], 5);
    for s in 0..3 {
        let start = s * config.tokens * config.dim;
        input.values_mut()[start..start + config.dim].fill(0.0);
    }
    let run = |store: &ParamStore, b: &ExitBranch| {
        let mut cx = Ctx::eval(store);
        let x = cx.tape.constant(&input);
        let y = b.forward(&mut cx, x).unwrap();
        cx.tape.value(y).to_vec()
    };
    let same = run(&sa, &add) == run(&si, &ignore);
    let channels = match &project.body {
        BranchBody::Cnn { conv, .. } => conv.in_channels,
        _ => 0,
    };
    check(
        same && channels == 2 * config.dim,
        format!("add == ignore with p0 = 0: {same}; project conv input channels {channels} (2d = {})", 2 * config.dim),
    )
}

// ---------------------------------------------------------------------------------------------
// 5. Training strategy contracts.

fn tiny_model(depth: usize, seed: u64) -> MultiExitModel {
    let config = ViTConfig {
        image_size: 8,
        patch_size: 4,
        dim: 8,
        heads: 2,
        depth,
        outputs: 2,
        ..ViTConfig::default()
    };
    MultiExitModel::new(config, TaskKind::Classification { classes: 2 }, seed).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 16,
        lr: 3e-3,
        ..TrainConfig::default()
    }
}

fn snapshot(store: &ParamStore, ids: &[multiexit::autodiff::ParamId]) -> Vec<f64> {
    ids.iter().flat_map(|&id| store.get(id).values().to_vec()).collect()
}

fn grads(model: &MultiExitModel, set: &LabeledImageSet, weights: LossWeights) -> Vec<f64> {
    let mut rng = seeded_rng(55);
    let mut cx = Ctx::train(&model.store, &mut rng);
    let loss = end_to_end_loss(model, &mut cx, set, &(0..12).collect::<Vec<_>>(), weights).unwrap();
    let tape = cx.into_tape();
    let g = tape.backward(loss).unwrap();
    let mut store = model.store.clone();
    store.zero_grad();
    tape.accumulate_param_grads(&g, &mut store);
    snapshot_grads(&store, &model.backbone_params())
}

fn snapshot_grads(store: &ParamStore, ids: &[multiexit::autodiff::ParamId]) -> Vec<f64> {
    ids.iter().flat_map(|&id| store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_default()).collect()
}

fn criterion_5() -> Outcome {
    let (train, val) = gen_two_halves(160, 8, 1).unwrap().split_validation(0.25, 2).unwrap();
    let mut notes = Vec::new();

    // Classifier-wise: backbone untouched.
    let mut model = tiny_model(3, 3);
    train_backbone(&mut model, &train, &val, &quick(2)).unwrap();
    model.add_branch(1, MlpEe).unwrap();
    model.add_branch(2, VitEe).unwrap();
    model.add_branch(3, CnnProjectEe).unwrap();
    let before = snapshot(&model.store, &model.backbone_params());
    train_classifier_wise(&mut model, &train, &val, &quick(2), None).unwrap();
    let cw = snapshot(&model.store, &model.backbone_params()) == before;
    notes.push(format!("classifier-wise backbone identical: {cw}"));

    // Layer-wise: every finished prefix is frozen for the rest of the run.
    let mut model = tiny_model(3, 4);
    model.add_branch(1, MlpEe).unwrap();
    model.add_branch(2, ResMlpEe).unwrap();
    let mut stages: Vec<(Vec<multiexit::autodiff::ParamId>, Vec<Vec<f64>>)> = Vec::new();
    train_layer_wise_with(&mut model, &train, &val, &quick(2), &[(1, MlpEe), (2, ResMlpEe)], |report, m| {
        for (ids, snaps) in &mut stages {
            snaps.push(snapshot(&m.store, ids));
        }
        let end = *report.layers.end();
        let mut ids = m.backbone.prefix_params(end);
        if let ExitId::Branch(l, a) = report.exit {
            ids.extend(m.branch(l, a).unwrap().params());
        }
        let first = snapshot(&m.store, &ids);
        stages.push((ids, vec![first]));
    })
    .unwrap();
    let lw = stages.iter().all(|(_, snaps)| snaps.windows(2).all(|w| w[0] == w[1]));
    notes.push(format!("layer-wise prefixes identical across {} stages: {lw}", stages.len()));

    // End-to-end with zero branch weight: backbone gradient unchanged by attached branches.
    let plain = tiny_model(3, 5);
    let mut attached = plain.clone();
    for (l, a) in [(1, CnnAddEe), (2, MlpMixerEe), (3, VitEe)] {
        attached.add_branch(l, a).unwrap();
    }
    let w0 = LossWeights {
        final_weight: 1.0,
        branch_weight: 0.0,
    };
    let e2e = grads(&attached, &train, w0) == grads(&plain, &train, w0);
    notes.push(format!("end-to-end lambda=0 gradient bit-identical: {e2e}"));

    // Final exit counted double: l = 2, l_b = 4 → 4.
    let weights = LossWeights::final_double();
    let mut tape = Tape::new();
    let l = tape.constant(&Tensor::scalar(2.0));
    let lb = tape.constant(&Tensor::scalar(4.0));
    let total = combined_loss(&mut tape, l, weights.final_weight, &[(lb, weights.branch_weight)]).unwrap();
    let lt = tape.value(total)[0];
    notes.push(format!("final-double example l_t = {lt}"));

    check(cw && lw && e2e && lt == 4.0, notes.join("; "))
}

// ---------------------------------------------------------------------------------------------
// 6. Practical flags against an exhaustive scan.

fn reference_practical(ps: &[ExitProfile]) -> Vec<bool> {
    ps.iter()
        .map(|p| {
            ps.iter().all(|q| {
                q.arch == ExitKind::Final || q.location >= p.location || p.metric_kind.better(p.metric_value, q.metric_value)
            })
        })
        .collect()
}

fn random_profiles(rng: &mut impl Rng) -> Vec<ExitProfile> {
    let kind = if rng.random_bool(0.3) { MetricKind::Mae } else { MetricKind::Accuracy };
    let mut ps: Vec<ExitProfile> = (0..rng.random_range(1..16))
        .map(|_| ExitProfile {
            location: rng.random_range(1..7),
            arch: ExitKind::Branch(BranchArchitecture::ALL[rng.random_range(0..7)]),
            metric_kind: kind,
            metric_value: rng.random_range(0..10) as f64 / 10.0,
            cumulative_flops: FlopCount(rng.random_range(0..1000)),
            practical: false,
        })
        .collect();
    if rng.random_bool(0.5) {
        ps.push(ExitProfile {
            location: 6,
            arch: ExitKind::Final,
            metric_kind: kind,
            metric_value: rng.random_range(0..10) as f64 / 10.0,
            cumulative_flops: FlopCount(1000),
            practical: false,
        });
    }
    ps
}

fn criterion_6() -> Outcome {
    let mut rng = seeded_rng(6);
    let mut agree = 0;
    let mut invariant = 0;
    for _ in 0..1000 {
        let mut ps = random_profiles(&mut rng);
        mark_practical(&mut ps, PracticalMode::AcrossArchitectures).unwrap();
        let flags: Vec<bool> = ps.iter().map(|p| p.practical).collect();
        if flags == reference_practical(&ps) {
            agree += 1;
        }
        let mut moved = ps.clone();
        moved.iter_mut().for_each(|p| p.metric_value = (3.0 * p.metric_value).exp() - 4.0);
        mark_practical(&mut moved, PracticalMode::AcrossArchitectures).unwrap();
        if moved.iter().map(|p| p.practical).collect::<Vec<_>>() == flags {
            invariant += 1;
        }
    }
    check(
        agree == 1000 && invariant == 1000,
        format!("{agree}/1000 agree with exhaustive scan, {invariant}/1000 unchanged under exp transform"),
    )
}

// ---------------------------------------------------------------------------------------------
// 7. Cost ordering of the branch zoo.

fn criterion_7() -> Outcome {
    let model = MultiExitModel::new(ViTConfig::default(), TaskKind::Classification { classes: 10 }, 0).unwrap();
    let mut ok = true;
    for b in 1..=model.depth() {
        let c = |a| cumulative_flops(&model, b, a).unwrap();
        ok &= c(MlpEe) < c(CnnIgnoreEe)
            && c(CnnIgnoreEe) == c(CnnAddEe)
            && c(CnnAddEe) < c(CnnProjectEe)
            && c(CnnProjectEe) < c(MlpMixerEe).min(c(ResMlpEe))
            && c(MlpMixerEe).max(c(ResMlpEe)) < c(VitEe);
        if b > 1 {
            ok &= BranchArchitecture::ALL.iter().all(|&a| cumulative_flops(&model, b - 1, a).unwrap() < c(a));
        }
    }
    let at = |a| cumulative_flops(&model, 6, a).unwrap().get() as f64 / 1e6;
    check(
        ok,
        format!(
            "at location 6 (MFLOPs): mlp {:.3} < cnn-ignore {:.3} = cnn-add {:.3} < cnn-project {:.3} < mixer {:.3} / resmlp {:.3} < vit {:.3}; monotone in depth",
            at(MlpEe),
            at(CnnIgnoreEe),
            at(CnnAddEe),
            at(CnnProjectEe),
            at(MlpMixerEe),
            at(ResMlpEe),
            at(VitEe)
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 8. Anytime runtime against direct evaluation.

fn direct(m: &MultiExitModel, exit: ExitId, image: &Tensor) -> Vec<f64> {
    let mut cx = Ctx::eval(&m.store);
    let out = match exit {
        ExitId::Final => m.forward(&mut cx, image).unwrap(),
        ExitId::Branch(l, a) => {
            let mut x = m.backbone.embed(&mut cx, image).unwrap();
            for b in 1..=l {
                x = m.backbone.layer(&mut cx, b, x).unwrap();
            }
            m.branch(l, a).unwrap().forward(&mut cx, x).unwrap()
        }
    };
    cx.tape.value(out).to_vec()
}

fn criterion_8() -> Outcome {
    let mut model = MultiExitModel::new(ViTConfig::default(), TaskKind::Classification { classes: 10 }, 8).unwrap();
    for (l, a) in [(1, MlpEe), (2, CnnProjectEe), (2, VitEe), (3, ResMlpEe), (4, CnnAddEe), (5, MlpMixerEe), (6, MlpEe)] {
        model.add_branch(l, a).unwrap();
    }
    let image = Tensor::uniform(&[1, 28, 28, 1], 0.0, 1.0, &mut seeded_rng(9));
    let table: Vec<ExitProfile> = model
        .exits()
        .into_iter()
        .map(|e| ExitProfile {
            location: match e {
                ExitId::Branch(l, _) => l,
                ExitId::Final => model.depth(),
            },
            arch: match e {
                ExitId::Branch(_, a) => ExitKind::Branch(a),
                ExitId::Final => ExitKind::Final,
            },
            metric_kind: MetricKind::Accuracy,
            metric_value: 0.0,
            cumulative_flops: exit_flops(&model, e).unwrap(),
            practical: false,
        })
        .collect();
    let mut budgets: Vec<u64> = vec![0];
    let mut costs: Vec<u64> = table.iter().map(|p| p.cumulative_flops.get()).collect();
    costs.sort_unstable();
    for w in costs.windows(2) {
        budgets.extend([w[0], (w[0] + w[1]) / 2, w[1] - 1]);
    }
    budgets.push(*costs.last().unwrap());
    let mut exact = 0;
    for &b in &budgets {
        let expected = select_exit(&table, FlopCount(b)).unwrap();
        let got = run_anytime(&model, &image, BudgetPolicy::Flops(FlopCount(b)), &Interrupt::new());
        let ok = match (expected, got) {
            (None, Err(multiexit::Error::NoExitCompleted { .. })) => true,
            (Some(p), Ok(r)) => r.exit == p.exit_id() && r.prediction == direct(&model, r.exit, &image),
            _ => false,
        };
        exact += ok as usize;
    }

    let mut rng = seeded_rng(10);
    let mut scan_agree = 0;
    for _ in 0..1000 {
        let ps = random_profiles(&mut rng);
        let budget = FlopCount(rng.random_range(0..1100));
        let mut order: Vec<&ExitProfile> = ps.iter().collect();
        order.sort_by_key(|p| execution_key(p));
        let reference = order.into_iter().rfind(|p| p.cumulative_flops <= budget);
        scan_agree += (select_exit(&ps, budget).unwrap() == reference) as usize;
    }

    let full = run_anytime(&model, &image, BudgetPolicy::Flops(FlopCount(u64::MAX)), &Interrupt::new()).unwrap();
    let plain = direct(&model, ExitId::Final, &image);
    let full_ok = full.exit == ExitId::Final && full.prediction == plain;
    check(
        exact == budgets.len() && scan_agree == 1000 && full_ok,
        format!(
            "{exact}/{} budgets bit-equal to direct evaluation, {scan_agree}/1000 select_exit = linear scan, full budget = forward: {full_ok}",
            budgets.len()
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 9. Fashion-MNIST backbone and classifier-wise branch sweep.

fn data_dir() -> PathBuf {
    std::env::var_os("MULTIEXIT_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/fashion-mnist")))
}

fn criterion_9() -> Outcome {
    let dir = data_dir();
    let (full_train, full_test) = load_fashion_mnist(&dir)
        .map_err(|e| format!("cannot load Fashion-MNIST from {} ({e}); run scripts/fetch_fashion_mnist.py", dir.display()))?;
    let train = full_train.subset(&(0..6000).collect::<Vec<_>>(), Split::Train).unwrap();
    let test = full_test.subset(&(0..1000).collect::<Vec<_>>(), Split::Test).unwrap();
    let (train, val) = train.split_validation(0.1, 0).unwrap();

    let start = Instant::now();
    let mut model = MultiExitModel::new(ViTConfig::default(), TaskKind::Classification { classes: 10 }, 0).unwrap();
    let report = train_backbone(&mut model, &train, &val, &TrainConfig::default()).unwrap();
    let backbone_time = start.elapsed();
    let acc = evaluate_final(&model, &test, 200).unwrap().metric;

    let sweep_start = Instant::now();
    model.add_branch_zoo().unwrap();
    let branch_config = TrainConfig {
        max_epochs: 10,
        ..TrainConfig::default()
    };
    train_classifier_wise(&mut model, &train, &val, &branch_config, None).unwrap();
    let profiles = profile_all_exits(&model, &test, 200).unwrap();
    let sweep_time = sweep_start.elapsed();

    let csv = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_profiles.csv");
    export_profiles(&profiles, &csv).unwrap();
    let rows = read_profiles(std::fs::File::open(&csv).unwrap()).unwrap().len();

    let mut practical: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for p in &profiles {
        if let (ExitKind::Branch(a), true) = (p.arch, p.practical) {
            practical.entry(a.name()).or_default().push(p.location);
        }
    }
    let every_arch = BranchArchitecture::ALL.iter().all(|a| practical.contains_key(a.name()));
    let beyond_first: usize = practical.values().map(|ls| ls.iter().filter(|&&l| l > 1).count()).sum();
    let summary: Vec<String> = practical.iter().map(|(a, ls)| format!("{a} {ls:?}")).collect();

    let ok = acc >= 0.80 && report.epochs.len() <= 30 && backbone_time < Duration::from_secs(30 * 60) && rows == 43 && every_arch;
    check(
        ok,
        format!(
            "test accuracy {acc:.4} after {} epochs (best {}) in {:.0}s; sweep {:.0}s; {rows} CSV rows at {}; practical locations: {}; {beyond_first} practical beyond location 1",
            report.epochs.len(),
            report.best_epoch,
            backbone_time.as_secs_f64(),
            sweep_time.as_secs_f64(),
            csv.display(),
            summary.join(", "),
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 10. Reduce-on-plateau and early stopping on synthetic traces.

fn replay(trace: &[f64]) -> (Vec<usize>, Option<usize>, f64) {
    let mut s = Scheduler::new(SchedulerConfig::default(), 1.0);
    let mut cuts = Vec::new();
    for (i, &m) in trace.iter().enumerate() {
        let d = s.step(m).unwrap();
        if d.reduced {
            cuts.push(i);
        }
        if d.stop {
            return (cuts, Some(i), d.lr);
        }
    }
    (cuts, None, s.lr())
}

fn criterion_10() -> Outcome {
    // Best at epoch 0, then flat.
    let three_flat = replay(&[1.0, 1.0, 1.0, 1.0]);
    let six_flat = replay(&[1.0; 7]);
    let five_flat = replay(&[1.0; 6]);
    // An improvement resets both counters.
    let reset = replay(&[1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5]);
    let ok = three_flat == (vec![3], None, 0.6)
        && six_flat == (vec![3], Some(6), 0.6)
        && five_flat == (vec![3], None, 0.6)
        && reset == (vec![6], None, 0.6);
    check(
        ok,
        format!(
            "3 flat epochs: cuts {:?} lr {}; 5 flat: stop {:?}; 6 flat: stop at {:?}; improvement resets: cuts {:?}",
            three_flat.0, three_flat.2, five_flat.1, six_flat.1, reset.0
        ),
    )
}

// ---------------------------------------------------------------------------------------------
// 11. Checkpoint / CSV round trips and same-seed reproducibility.

fn pipeline(seed: u64) -> (Vec<u8>, Vec<ExitProfile>, f64) {
    let (train, val) = gen_two_halves(120, 8, 11).unwrap().split_validation(0.25, seed).unwrap();
    let mut model = tiny_model(2, seed);
    let config = TrainConfig { seed, ..quick(2) };
    train_backbone(&mut model, &train, &val, &config).unwrap();
    model.add_branch(1, CnnIgnoreEe).unwrap();
    model.add_branch(2, MlpMixerEe).unwrap();
    train_classifier_wise(&mut model, &train, &val, &config, None).unwrap();
    let profiles = profile_exits(&model, &val, 50).unwrap();
    let meta = TrainingMetadata {
        strategy: Some("classifier-wise".into()),
        seed,
        epochs: 2,
    };
    let acc = evaluate_final(&model, &val, 50).unwrap().metric;
    (checkpoint_bytes(&model, &meta).unwrap(), profiles, acc)
}

fn criterion_11() -> Outcome {
    let (bytes, profiles, acc) = pipeline(1);
    let loaded = parse_checkpoint(&bytes, None).unwrap();
    let resaved = checkpoint_bytes(&loaded.model, &loaded.metadata).unwrap();
    let ckpt = resaved == bytes;

    let mut csv = Vec::new();
    write_profiles(&profiles, &mut csv).unwrap();
    let csv_ok = read_profiles(csv.as_slice()).unwrap() == profiles;

    let (bytes2, profiles2, acc2) = pipeline(1);
    let rerun = bytes2 == bytes && profiles2 == profiles && acc2 == acc;
    let (bytes3, _, _) = pipeline(2);
    let seed_matters = bytes3 != bytes;
    check(
        ckpt && csv_ok && rerun && seed_matters,
        format!(
            "checkpoint save/load/save identical: {ckpt}; CSV round trip: {csv_ok}; same-seed rerun identical (checkpoint, {} profiles, accuracy): {rerun}; other seed differs: {seed_matters}",
            profiles.len()
        ),
    )
}
