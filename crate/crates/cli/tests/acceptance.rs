//! Acceptance suite. Each criterion prints one PASS/FAIL line and a summary
//! line follows. The process exits non-zero when any criterion outside
//! `MEASURED` fails, or when any criterion fails with `ACCEPTANCE_STRICT` set.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 3 4`.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use focalcomm::assign::{assignment_cost, hungarian};
use focalcomm::eval::{
    average_precision, average_precision_frames, evaluate, rotated_bev_iou, sweep_compression, sweep_csv, Frame,
    COMPRESSION_RATIOS,
};
use focalcomm::geometry::Box3d;
use focalcomm::head::Detection;
use focalcomm::him::{flatten, stage_predictions, Him, HimConfig, Mode};
use focalcomm::model::{prepare, Model, ModelConfig, PreparedScene};
use focalcomm::numcore::{Graph, ParamStore, Tensor, Var};
use focalcomm::qaff::{Qaff, QaffConfig};
use focalcomm::scenesim::{generate_dataset, GroundTruthBox, ObjectClass};
use focalcomm::train::{dataset_loss, train};
use focalcomm::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn prepared(base: u64, count: usize, cfg: &RunConfig) -> Vec<PreparedScene> {
    generate_dataset(base, count, &cfg.scene)
        .expect("scenes generate")
        .iter()
        .map(|s| prepare(s, &cfg.model.voxel, cfg.model.max_agents).expect("scene prepares"))
        .collect()
}

// ---------------------------------------------------------------------------
// 1. gradients

const JITTER: f64 = 0.3;

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::micro();
    let scene = (0..)
        .map(|i| prepared(10 + i, 1, &cfg).remove(0))
        .find(|s| s.gt.len() == 2 && s.agents.len() == 2)
        .expect("a two-box scene exists");
    let mut model = Model::new(&cfg.model, 0).expect("model builds");
    // At initialization the attention logits are near zero and some fusion
    // gradients sit below the difference quotient's roundoff; a jittered
    // point keeps every tensor's gradient measurable.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for id in model.store.ids().collect::<Vec<_>>() {
        for x in model.store.get_mut(id).tensor.data_mut() {
            *x += rng.gen_range(-JITTER..JITTER);
        }
    }
    let mut store = model.store.clone();

    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let out = model.forward(&mut g, &scene, Mode::Train).expect("forward");
        let terms = model.loss(&mut g, &out, &scene).expect("loss");
        (g.value(terms.total).item(), out.signature(&terms.assignment))
    };
    let (grads, signature) = {
        let mut g = Graph::new(&model.store);
        let out = model.forward(&mut g, &scene, Mode::Train).expect("forward");
        let terms = model.loss(&mut g, &out, &scene).expect("loss");
        let sig = out.signature(&terms.assignment);
        (g.backward(terms.total).expect("backward"), sig)
    };

    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let (mut checked, mut skipped) = (0usize, 0usize);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let shape = model.store.get(id).tensor.shape().to_vec();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in 0..analytic.len() {
            let orig = model.store.get(id).tensor.data()[i];
            let mut probe = |x: f64| {
                store.get_mut(id).tensor.data_mut()[i] = x;
                let r = eval(&store);
                store.get_mut(id).tensor.data_mut()[i] = orig;
                r
            };
            let (up, sig_up) = probe(orig + h);
            let (down, sig_down) = probe(orig - h);
            if sig_up != signature || sig_down != signature {
                skipped += 1;
                continue;
            }
            checked += 1;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let rel = diff.sqrt() / (na.sqrt() + nn.sqrt() + 1e-8);
        if rel >= worst.0 {
            worst = (rel, model.store.get(id).name.clone());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst.0 <= 1e-4 && secs <= 300.0 && checked > 0,
        format!(
            "{checked} scalars checked, {skipped} skipped at discrete switches, worst tensor {} rel {:.2e}",
            worst.1, worst.0
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. hard instance mining

fn him_invariants() -> Outcome {
    let cfg = RunConfig::micro();
    let scenes = prepared(300, 100, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = cfg.model.voxel.channels;
    let n_stages = cfg.model.him.n_stages;
    let mut failures = Vec::new();
    let mut non_vacuous = 0;
    for (k, scene) in scenes.iter().enumerate() {
        let mut model = Model::new(&cfg.model, k as u64).expect("model builds");
        let bias = model.him.detector.bias.expect("omega bias");
        model.store.get_mut(bias).tensor = Tensor::from_fn(&[3], |_| rng.gen_range(-0.5..3.0));
        let single = Him {
            extractors: vec![model.him.extractors[0].clone()],
            detector: model.him.detector.clone(),
            cfg: HimConfig { n_stages: 1, ..model.him.cfg.clone() },
        };
        let mut masked_somewhere = false;
        for mode in [Mode::Train, Mode::Infer] {
            let mut g = Graph::new(&model.store);
            let out = model.forward(&mut g, scene, mode).expect("forward");
            for (a, him) in out.him.iter().enumerate() {
                let tag = format!("scene {k} agent {a} {mode:?}");
                if g.shape(him.queries) != [n_stages * c, model.grid.height, model.grid.width] {
                    failures.push(format!("{tag}: query shape {:?}", g.shape(him.queries)));
                }
                let mut masks: Vec<&Tensor> = him.stages.iter().map(|s| &s.incoming_mask).collect();
                masks.push(&him.final_mask);
                for w in masks.windows(2) {
                    if w[0].data().iter().zip(w[1].data()).any(|(x, y)| x > y) {
                        failures.push(format!("{tag}: mask shrank"));
                    }
                }
                let hw = model.grid.cells();
                for (s, st) in him.stages.iter().enumerate() {
                    let spatial = flatten(&st.incoming_mask);
                    for cell in (0..hw).filter(|&i| spatial.data()[i] > 0.0) {
                        masked_somewhere = true;
                        if (0..c).any(|ch| st.masked_input.data()[ch * hw + cell] != 0.0) {
                            failures.push(format!("{tag} stage {s}: masked cell {cell} has features"));
                        }
                        if st.predictions.iter().any(|p| p.cell == cell) {
                            failures.push(format!("{tag} stage {s}: re-detection at {cell}"));
                        }
                        if (0..3).any(|kk| st.stage_mask.data()[kk * hw + cell] != 0.0) {
                            failures.push(format!("{tag} stage {s}: masked cell {cell} re-marked"));
                        }
                    }
                }

                let f = out.features[a];
                let (_, logits) = model.him.stage(&mut g, 0, f).expect("stage");
                let direct = g.value(logits).clone();
                let gt = (mode == Mode::Train).then_some(scene.agents[a].visible.as_slice());
                let one = single.run(&mut g, f, gt, &model.grid, mode).expect("single stage");
                let first = &him.stages[0];
                let predicted = stage_predictions(
                    &direct,
                    &Tensor::zeros(&[hw]),
                    single.cfg.threshold(0),
                    single.cfg.peak_kernel,
                    &model.grid,
                )
                .expect("peaks");
                let same = g.value(first.heatmap).data() == direct.data()
                    && g.value(one.stages[0].heatmap).data() == direct.data()
                    && one.stages[0].predictions == predicted
                    && first.predictions == predicted
                    && one.stages[0].stage_mask.data() == first.stage_mask.data();
                if !same {
                    failures.push(format!("{tag}: one-stage run differs from single-pass detection"));
                }
            }
        }
        non_vacuous += usize::from(masked_somewhere);
    }
    let detail = match failures.first() {
        Some(f) => format!("{} violations, first: {f}", failures.len()),
        None => format!("100 scenes, {non_vacuous} with masked cells"),
    };
    Outcome::new(failures.is_empty() && non_vacuous > 0, detail)
}

// ---------------------------------------------------------------------------
// 3. query-guided fusion

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0))
}

struct FusionInput {
    queries: Vec<Vec<Tensor>>,
    features: Vec<Tensor>,
    valid: Vec<bool>,
}

struct FusionOutput {
    out: Tensor,
    omega: Vec<f64>,
    alpha: Vec<f64>,
}

fn fuse(store: &ParamStore, qaff: &Qaff, input: &FusionInput) -> FusionOutput {
    let mut g = Graph::new(store);
    let queries: Vec<Vec<Var>> =
        input.queries.iter().map(|qs| qs.iter().map(|q| g.constant(q.clone())).collect()).collect();
    let features: Vec<Var> = input.features.iter().map(|f| g.constant(f.clone())).collect();
    let fused = qaff.forward(&mut g, &queries, &features, &input.valid).expect("fusion");
    FusionOutput {
        out: g.value(fused.out).clone(),
        omega: g.value(fused.stage_weights.expect("omega")).data().to_vec(),
        alpha: g.value(fused.agent_weights.expect("alpha")).data().to_vec(),
    }
}

fn qaff_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    let (mut worst_sum, mut worst_perm) = (0.0f64, 0.0f64);
    let mut with_invalid = 0;
    for case in 0..100 {
        let n = rng.gen_range(2..=4);
        let n_stages = rng.gen_range(1..=3);
        let (c, h, w) = (8, rng.gen_range(3..=5), rng.gen_range(3..=5));
        let mut store = ParamStore::new();
        let qaff =
            Qaff::new(&mut store, c, n_stages, &QaffConfig { heads: 2, model_dim: 8 }, &mut rng).expect("qaff builds");
        let mut valid: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen_bool(0.6)).collect();
        if case % 4 == 0 {
            valid[n - 1] = false;
        }
        with_invalid += usize::from(valid.contains(&false));
        let input = FusionInput {
            queries: (0..n).map(|_| (0..n_stages).map(|_| random_map(&mut rng, c, h, w)).collect()).collect(),
            features: (0..n).map(|_| random_map(&mut rng, c, h, w)).collect(),
            valid: valid.clone(),
        };
        let base = fuse(&store, &qaff, &input);

        let omega_sum: f64 = base.omega.iter().sum();
        let alpha_sum: f64 = base.alpha.iter().zip(&valid).filter(|(_, &v)| v).map(|(a, _)| a).sum();
        worst_sum = worst_sum.max((omega_sum - 1.0).abs()).max((alpha_sum - 1.0).abs());
        if (omega_sum - 1.0).abs() > 1e-12 || (alpha_sum - 1.0).abs() > 1e-12 {
            failures.push(format!("case {case}: weights sum to {omega_sum} / {alpha_sum}"));
        }
        if base.alpha.iter().zip(&valid).any(|(&a, &v)| !v && a != 0.0) {
            failures.push(format!("case {case}: invalid agent has weight"));
        }

        let mut perturbed =
            FusionInput { queries: input.queries.clone(), features: input.features.clone(), valid: valid.clone() };
        for i in (0..n).filter(|&i| !valid[i]) {
            perturbed.features[i] = random_map(&mut rng, c, h, w);
            for q in &mut perturbed.queries[i] {
                *q = random_map(&mut rng, c, h, w);
            }
        }
        if fuse(&store, &qaff, &perturbed).out.data() != base.out.data() {
            failures.push(format!("case {case}: invalid-agent perturbation changed the output"));
        }

        let mut order: Vec<usize> = (1..n).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        order.insert(0, 0);
        let permuted = FusionInput {
            queries: order.iter().map(|&i| input.queries[i].clone()).collect(),
            features: order.iter().map(|&i| input.features[i].clone()).collect(),
            valid: order.iter().map(|&i| valid[i]).collect(),
        };
        let p = fuse(&store, &qaff, &permuted);
        let dev = p.out.data().iter().zip(base.out.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_perm = worst_perm.max(dev);
        if dev > 1e-9 {
            failures.push(format!("case {case}: permutation moved the output by {dev:.2e}"));
        }
    }
    let detail = match failures.first() {
        Some(f) => format!("{} violations, first: {f}", failures.len()),
        None => format!(
            "100 inputs ({with_invalid} with invalid agents), max weight-sum error {worst_sum:.1e}, max permutation deviation {worst_perm:.1e}"
        ),
    };
    Outcome::new(failures.is_empty(), detail)
}

// ---------------------------------------------------------------------------
// 4. geometry and metrics

fn inside(b: &Box3d, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.center[0], y - b.center[1]);
    let along = c * dx + s * dy;
    let across = -s * dx + c * dy;
    along.abs() <= b.size[0] / 2.0 && across.abs() <= b.size[1] / 2.0
}

fn random_box(rng: &mut ChaCha8Rng, near: [f64; 2]) -> Box3d {
    Box3d {
        center: [near[0] + rng.gen_range(-1.5..1.5), near[1] + rng.gen_range(-1.5..1.5), 0.0],
        size: [rng.gen_range(0.8..5.0), rng.gen_range(0.5..2.5), 1.5],
        yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    }
}

fn monte_carlo_iou(a: &Box3d, b: &Box3d, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let reach = |bx: &Box3d| 0.5 * bx.size[0].hypot(bx.size[1]);
    let lo =
        [(a.center[0] - reach(a)).min(b.center[0] - reach(b)), (a.center[1] - reach(a)).min(b.center[1] - reach(b))];
    let hi =
        [(a.center[0] + reach(a)).max(b.center[0] + reach(b)), (a.center[1] + reach(a)).max(b.center[1] + reach(b))];
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let x = rng.gen_range(lo[0]..hi[0]);
        let y = rng.gen_range(lo[1]..hi[1]);
        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
        both += usize::from(ia && ib);
        either += usize::from(ia || ib);
    }
    both as f64 / either as f64
}

fn brute_force_assignment(costs: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(costs: &[f64], rows: usize, cols: usize, r: usize, used: &mut [bool], left: usize) -> f64 {
        if left == 0 {
            return 0.0;
        }
        if rows - r < left {
            return f64::INFINITY;
        }
        let mut best = go(costs, rows, cols, r + 1, used, left);
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.min(costs[r * cols + c] + go(costs, rows, cols, r + 1, used, left - 1));
                used[c] = false;
            }
        }
        best
    }
    go(costs, rows, cols, 0, &mut vec![false; cols], rows.min(cols))
}

fn car(x: f64) -> GroundTruthBox {
    GroundTruthBox { center: [x, 0.0, 0.8], size: [4.0, 2.0, 1.6], yaw: 0.0, class: ObjectClass::Car }
}

fn det(class: ObjectClass, x: f64, score: f64) -> Detection {
    Detection { class, score, center: [x, 0.0, 0.8], size: [4.0, 2.0, 1.6], yaw: 0.0 }
}

fn ap_cases() -> Vec<(&'static str, Option<f64>, Option<f64>)> {
    use ObjectClass::{Car, Truck};
    let ap = |dets: &[Detection], gts: &[GroundTruthBox], thr: f64, class: ObjectClass| {
        average_precision(dets, gts, thr, class, 100.0).expect("ap")
    };
    // Ground-truth cars sit 20 m apart so a detection matches at most one.
    let gts2 = [car(0.0), car(20.0)];
    let gts4 = [car(0.0), car(20.0), car(40.0), car(60.0)];
    let mut cases = vec![
        ("single hit", ap(&[det(Car, 0.0, 0.9)], &[car(0.0)], 0.5, Car), Some(1.0)),
        (
            "false positive ranked first",
            ap(&[det(Car, 10.0, 0.9), det(Car, 0.0, 0.8)], &[car(0.0)], 0.5, Car),
            Some(0.5),
        ),
        (
            "hit, miss, hit",
            ap(&[det(Car, 0.0, 0.9), det(Car, 10.0, 0.8), det(Car, 20.0, 0.7)], &gts2, 0.5, Car),
            Some(0.5 + 0.5 * 2.0 / 3.0),
        ),
        ("half recall", ap(&[det(Car, 0.0, 0.9)], &gts2, 0.5, Car), Some(0.5)),
        (
            "duplicate after full recall",
            ap(&[det(Car, 0.0, 0.9), det(Car, 0.0, 0.8)], &[car(0.0)], 0.5, Car),
            Some(1.0),
        ),
        (
            "precision envelope",
            ap(
                &[
                    det(Car, 10.0, 0.95),
                    det(Car, 0.0, 0.9),
                    det(Car, 30.0, 0.85),
                    det(Car, 20.0, 0.8),
                    det(Car, 40.0, 0.75),
                    det(Car, 60.0, 0.7),
                ],
                &gts4,
                0.5,
                Car,
            ),
            Some(2.0 / 3.0),
        ),
        ("no detections", ap(&[], &[car(0.0)], 0.5, Car), Some(0.0)),
    ];
    // Offset 1.5 m along the heading: IoU = 2.5 / 5.5, between the thresholds.
    let shifted = [det(Car, 1.5, 0.9)];
    cases.push(("iou 0.45 at threshold 0.3", ap(&shifted, &[car(0.0)], 0.3, Car), Some(1.0)));
    cases.push(("iou 0.45 at threshold 0.5", ap(&shifted, &[car(0.0)], 0.5, Car), Some(0.0)));
    let (da, db) = ([det(Car, 0.0, 0.6)], [det(Car, 10.0, 0.9), det(Car, 20.0, 0.4)]);
    let (ga, gb) = ([car(0.0)], [car(20.0)]);
    let frames = [Frame { detections: &da, ground_truth: &ga }, Frame { detections: &db, ground_truth: &gb }];
    cases.push((
        "pooled over two frames",
        average_precision_frames(&frames, 0.5, Car, 100.0).expect("ap"),
        Some(2.0 / 3.0),
    ));
    let mixed = [det(Truck, 0.0, 0.95), det(Car, 120.0, 0.9), det(Car, 0.0, 0.5)];
    cases.push((
        "other classes and out-of-range boxes ignored",
        ap(&mixed, &[car(0.0), car(120.0)], 0.5, Car),
        Some(1.0),
    ));
    cases.push(("class without ground truth", ap(&mixed, &[car(0.0)], 0.5, Truck), None));
    cases
}

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_iou = 0.0f64;
    let mut pairs = 0;
    while pairs < 50 {
        let a = random_box(&mut rng, [0.0, 0.0]);
        let b = random_box(&mut rng, [a.center[0], a.center[1]]);
        let exact = rotated_bev_iou(&a, &b).expect("iou");
        if exact <= 0.0 {
            continue;
        }
        pairs += 1;
        worst_iou = worst_iou.max((exact - monte_carlo_iou(&a, &b, 1_000_000, &mut rng)).abs());
    }

    let mut worst_assign = 0.0f64;
    let mut bad_assign = 0;
    for _ in 0..200 {
        let (rows, cols) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let costs: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..10.0)).collect();
        let a = hungarian(&costs, rows, cols).expect("assignment");
        let mut used = vec![false; cols];
        let mut valid = a.len() == rows && a.iter().flatten().count() == rows.min(cols);
        for &c in a.iter().flatten() {
            valid &= c < cols && !std::mem::replace(&mut used[c], true);
        }
        let gap = (assignment_cost(&costs, cols, &a) - brute_force_assignment(&costs, rows, cols)).abs();
        worst_assign = worst_assign.max(gap);
        bad_assign += usize::from(!valid || gap > 1e-9);
    }

    let cases = ap_cases();
    let bad_ap: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(name, got, want)| format!("{name}: got {got:?}, expected {want:?}"))
        .collect();

    let pass = worst_iou <= 0.003 && bad_assign == 0 && bad_ap.is_empty();
    let mut detail = format!(
        "IoU max |exact - MC| {worst_iou:.4} over 50 pairs; assignment {bad_assign}/200 mismatches (max gap {worst_assign:.1e}); AP {}/{} exact",
        cases.len() - bad_ap.len(),
        cases.len()
    );
    if let Some(first) = bad_ap.first() {
        detail.push_str(&format!("; {first}"));
    }
    Outcome::new(pass, detail)
}

// ---------------------------------------------------------------------------
// 5. micro training

fn micro_training() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::micro();
    let scenes = prepared(500, 16, &cfg);
    let mut model = Model::new(&cfg.model, cfg.seed).expect("model builds");
    let before = dataset_loss(&model, &scenes).expect("loss");
    let mut tc = cfg.train.clone();
    tc.steps = 200;
    let trained = train(&mut model, &scenes, &tc, |_| {});
    let secs = start.elapsed().as_secs_f64();
    match trained {
        Ok(_) => {
            let after = dataset_loss(&model, &scenes).expect("loss");
            Outcome::new(
                after <= 0.5 * before && secs <= 900.0,
                format!("mean loss {before:.4} -> {after:.4} ({:.1}%)", 100.0 * after / before),
            )
        }
        Err(e) => Outcome::new(false, format!("training failed: {e}")),
    }
}

// ---------------------------------------------------------------------------
// 6 and 7. toy benchmark

const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Variant {
    Full,
    NoHim,
    NoQaff,
    Both,
    Solo,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHim => "no-HIM",
            Variant::NoQaff => "no-QAFF",
            Variant::Both => "no-HIM-no-QAFF",
            Variant::Solo => "single-agent",
        }
    }

    fn apply(self, m: &mut ModelConfig) {
        m.him_enabled = !matches!(self, Variant::NoHim | Variant::Both | Variant::Solo);
        m.qaff_enabled = !matches!(self, Variant::NoQaff | Variant::Both | Variant::Solo);
        m.collab_enabled = self != Variant::Solo;
    }
}

struct Benchmark {
    train: Vec<PreparedScene>,
    eval: Vec<PreparedScene>,
}

static BENCHMARKS: Mutex<BTreeMap<u64, Arc<Benchmark>>> = Mutex::new(BTreeMap::new());
type TrainedModels = HashMap<(Variant, usize, u64), Model>;

static TRAINED: Mutex<Option<TrainedModels>> = Mutex::new(None);

fn benchmark(seed: u64) -> Arc<Benchmark> {
    let mut cache = BENCHMARKS.lock().expect("cache lock");
    cache
        .entry(seed)
        .or_insert_with(|| {
            let cfg = RunConfig::toy();
            Arc::new(Benchmark {
                train: prepared(100 + seed, cfg.train_scenes, &cfg),
                eval: prepared(200 + seed, cfg.eval_scenes, &cfg),
            })
        })
        .clone()
}

fn trained(variant: Variant, ratio: usize, seed: u64) -> focalcomm::Result<Model> {
    let key = (variant, ratio, seed);
    if let Some(m) = TRAINED.lock().expect("cache lock").get_or_insert_with(HashMap::new).get(&key) {
        return Ok(m.clone());
    }
    let cfg = RunConfig::toy();
    let mut mc = cfg.model.clone();
    variant.apply(&mut mc);
    mc.compression_ratio = ratio;
    let mut model = Model::new(&mc, seed)?;
    train(&mut model, &benchmark(seed).train, &cfg.train, |_| {})?;
    TRAINED.lock().expect("cache lock").get_or_insert_with(HashMap::new).insert(key, model.clone());
    Ok(model)
}

fn toy_map(variant: Variant, ratio: usize, seed: u64) -> focalcomm::Result<f64> {
    let model = trained(variant, ratio, seed)?;
    let report = evaluate(&model, &benchmark(seed).eval, &RunConfig::toy().eval, 1)?;
    Ok(report.map03.unwrap_or(f64::NAN))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn ablation_ordering() -> Outcome {
    let variants = [Variant::Full, Variant::NoHim, Variant::NoQaff, Variant::Both, Variant::Solo];
    let mut med = BTreeMap::new();
    let mut table = Vec::new();
    for v in variants {
        let mut runs = Vec::new();
        for seed in SEEDS {
            match toy_map(v, 1, seed) {
                Ok(m) => runs.push(m),
                Err(e) => return Outcome::new(false, format!("{} seed {seed}: {e}", v.name())),
            }
        }
        let m = median(runs.clone());
        table.push(format!(
            "{} {:.3} [{}]",
            v.name(),
            m,
            runs.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" ")
        ));
        med.insert(v, m);
    }
    let ge = |a: Variant, b: Variant| med[&a] >= med[&b];
    let checks = [
        (Variant::Full, Variant::NoHim),
        (Variant::Full, Variant::NoQaff),
        (Variant::NoHim, Variant::Both),
        (Variant::NoQaff, Variant::Both),
        (Variant::Both, Variant::Solo),
    ];
    let broken: Vec<String> =
        checks.iter().filter(|(a, b)| !ge(*a, *b)).map(|(a, b)| format!("{} < {}", a.name(), b.name())).collect();
    let mut detail = format!("median mAP@0.3: {}", table.join(", "));
    if !broken.is_empty() {
        detail.push_str(&format!("; violated: {}", broken.join(", ")));
    }
    Outcome::new(broken.is_empty(), detail)
}

fn artifact_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("artifact dir");
    dir
}

fn compression_sweep() -> Outcome {
    let cfg = RunConfig::toy();
    let sweep = sweep_compression(
        |ratio| trained(Variant::Full, ratio, 0),
        &benchmark(0).eval,
        &COMPRESSION_RATIOS,
        &cfg.eval,
        1,
    );
    let rows = match sweep {
        Ok(rows) => rows,
        Err(e) => return Outcome::new(false, format!("sweep failed: {e}")),
    };
    let csv = sweep_csv(&rows);
    let path = artifact_dir().join("sweep.csv");
    std::fs::write(&path, &csv).expect("csv written");
    let written: Vec<usize> = std::fs::read_to_string(&path)
        .expect("csv readable")
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').next()?.parse().ok())
        .collect();
    let csv_ok = written == COMPRESSION_RATIOS;

    let mut full = Vec::new();
    let mut squeezed = Vec::new();
    for seed in SEEDS {
        match (toy_map(Variant::Full, 1, seed), toy_map(Variant::Full, 64, seed)) {
            (Ok(a), Ok(b)) => {
                full.push(a);
                squeezed.push(b);
            }
            (Err(e), _) | (_, Err(e)) => return Outcome::new(false, format!("seed {seed}: {e}")),
        }
    }
    let (m1, m64) = (median(full), median(squeezed));
    let curve =
        rows.iter().map(|r| format!("{}:{:.3}", r.ratio, r.map03.unwrap_or(f64::NAN))).collect::<Vec<_>>().join(" ");
    Outcome::new(
        csv_ok && m1 >= m64,
        format!(
            "median mAP@0.3 ratio 1 {m1:.3} vs ratio 64 {m64:.3}; seed 0 curve {curve}; csv {} ({} ratios)",
            path.display(),
            written.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. CLI determinism

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_focalcomm")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn cli_session(root: &Path) -> Result<(), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let (scenes, ckpt) = (p("scenes"), p("model.json"));
    cli(&["gen", "--preset", "micro", "--seed", "7", "--count", "3", "--out", &scenes])?;
    cli(&["train", "--preset", "micro", "--scenes", &scenes, "--steps", "5", "--out", &ckpt])?;
    cli(&["eval", "--ckpt", &ckpt, "--scenes", &scenes, "--out", &p("report.json")])?;
    cli(&["eval", "--ckpt", &ckpt, "--scenes", &scenes, "--jobs", "2", "--out", &p("report_jobs2.json")])?;
    cli(&["eval", "--ckpt", &ckpt, "--scenes", &scenes, "--ablate", "qaff", "--out", &p("report_noqaff.json")])?;
    cli(&[
        "sweep",
        "--preset",
        "micro",
        "--train-scenes",
        &scenes,
        "--eval-scenes",
        &scenes,
        "--ratios",
        "1,8",
        "--steps",
        "3",
        "--out",
        &p("sweep"),
    ])?;
    cli(&["dump", "--ckpt", &ckpt, "--scene", &p("scenes/scene_7_0.json"), "--out", &p("heatmaps")])
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).expect("readable file");
                out.insert(path.strip_prefix(root).expect("under root").to_path_buf(), bytes);
            }
        }
    }
    out
}

fn cli_determinism() -> Outcome {
    let base = artifact_dir().join("cli");
    let _ = std::fs::remove_dir_all(&base);
    let runs: Vec<PathBuf> = (0..2).map(|i| base.join(format!("run{i}"))).collect();
    for r in &runs {
        if let Err(e) = cli_session(r) {
            return Outcome::new(false, e);
        }
    }
    let (a, b) = (files(&runs[0]), files(&runs[1]));
    let differing: Vec<String> =
        a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).map(|k| k.display().to_string()).collect();
    let jobs_match = a.get(Path::new("report.json")) == a.get(Path::new("report_jobs2.json"));
    let pgms = a.keys().filter(|k| k.extension().is_some_and(|e| e == "pgm")).count();
    let mut detail = format!("{} artifacts compared, {pgms} heatmaps", a.len());
    if !differing.is_empty() {
        detail.push_str(&format!("; differing: {}", differing.join(", ")));
    }
    if !jobs_match {
        detail.push_str("; --jobs 2 report differs from --jobs 1");
    }
    Outcome::new(differing.is_empty() && jobs_match && pgms > 0, detail)
}

// ---------------------------------------------------------------------------

/// Criteria whose toy-scale outcome is a measured result rather than a
/// property of the code. They still report FAIL; they only stop failing the
/// process when `ACCEPTANCE_STRICT` is unset.
const MEASURED: [usize; 2] = [6, 7];

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "gradient correctness", gradient_check),
        (2, "hard instance mining invariants", him_invariants),
        (3, "fusion invariants", qaff_invariants),
        (4, "geometry and metric oracles", geometry_oracles),
        (5, "micro training", micro_training),
        (6, "ablation ordering", ablation_ordering),
        (7, "compression sweep", compression_sweep),
        (8, "CLI determinism", cli_determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var_os("ACCEPTANCE_STRICT").is_some();
    let (mut passed, mut failed) = (Vec::new(), Vec::new());
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if outcome.pass {
            passed.push(n);
        } else {
            failed.push(n);
        }
        println!(
            "criterion {n} [{name}]: {} ({}; {:.1}s)",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    let fatal: Vec<usize> = failed.iter().copied().filter(|n| strict || !MEASURED.contains(n)).collect();
    println!("acceptance: {} passed {passed:?}, {} failed {failed:?}", passed.len(), failed.len());
    if fatal.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
