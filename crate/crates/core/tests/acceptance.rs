//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach the terminal.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 6 10`.

mod common;

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use biaslens::audit::{generate, run_audit, run_mitigation, run_seeds, AuditConfig, DataSource, Strategy, SyntheticConfig};
use biaslens::behavior::{extract_attention, lrp_propagate, propagate_relevance};
use biaslens::dataset::{compute_distribution, load_manifest, AnnotationRecord, BBox, Condition, DatasetManifest};
use biaslens::loss::{weighted_cross_entropy_indices, ClassWeights, Objective, WeightedCrossEntropy};
use biaslens::metrics::{average_precision, match_detections, nds, Detection, TPErrorSet};
use biaslens::nn::ops::{attention_weights, softmax_inplace};
use biaslens::nn::{Architecture, CnnConfig, Mode, Model, ModelKind, Tensor, VitConfig};
use biaslens::sampling::{allocate, random_oversample, random_undersample, ResampleMode, ResamplePlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Wall-clock limit, when the criterion states one.
type Criterion = (u32, &'static str, Option<Duration>, fn() -> Verdict);

const CRITERIA: [Criterion; 10] = [
    (1, "NDS formula exactness", Some(Duration::from_secs(1)), nds_exactness),
    (2, "class weights and unit-weight CE", None, class_weights),
    (3, "gradients vs central differences", Some(Duration::from_secs(60)), gradients),
    (4, "relevance conservation", None, lrp_conservation),
    (5, "attention rows and softmax shift", None, attention_rows),
    (6, "metrics vs brute-force recount", None, metrics_oracle),
    (7, "distribution fidelity", None, distribution_fidelity),
    (8, "directional mitigation", Some(Duration::from_secs(600)), directional_mitigation),
    (9, "byte-identical audit reports", None, determinism),
    (10, "resampling exactness", None, resampling_exactness),
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, limit, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let mut v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        if let Some(limit) = limit {
            if elapsed > limit {
                v.pass = false;
                v.detail.push_str(&format!("; over the {:.0}s limit", limit.as_secs_f64()));
            }
        }
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {} {name}: {} ({:.2}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn nds_exactness() -> Verdict {
    // direct transcription of the score definition, used as the oracle
    let oracle = |map: f64, tp: [f64; 5]| (5.0 * map + tp.iter().map(|v| 1.0 - v.min(1.0)).sum::<f64>()) / 10.0;
    let cases: [(f64, [f64; 5], f64); 4] = [
        (1.0, [0.0; 5], 1.0),
        (0.0, [1.0; 5], 0.0),
        (0.0, [1.0, 2.5, 1.0, 7.0, 1.0], 0.0),
        (0.6, [0.2, 0.4, 1.5, 0.0, 1.0], 0.54),
    ];
    let mut worst: f64 = 0.0;
    for (map, tp, expect) in cases {
        let got = nds(map, &TPErrorSet::new(tp)).expect("valid inputs");
        worst = worst.max((got - expect).abs()).max((got - oracle(map, tp)).abs());
    }
    verdict(worst <= 1e-12, format!("max |error| {worst:.1e} (tol 1e-12)"))
}

fn class_weights() -> Verdict {
    let pct: BTreeMap<String, f64> = [("pedestrian", 21.61), ("bicycle", 2.46), ("motorcycle", 2.42)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let w = ClassWeights::from_percentages(&pct).expect("positive percentages");
    let expected = [("pedestrian", 0.1603), ("bicycle", 1.4082), ("motorcycle", 1.4315)];
    // oracle: inverse frequency scaled to sum to the class count
    let inv_sum: f64 = pct.values().map(|p| 1.0 / p).sum();
    let mut worst: f64 = 0.0;
    for (c, e) in expected {
        let got = w.get(c).expect("class present");
        let oracle = 3.0 / pct[c] / inv_sum;
        worst = worst.max((got - e).abs()).max((got - oracle).abs());
    }
    let sum: f64 = w.normalized.values().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, k) = (64, 5);
    let mut probs = Vec::with_capacity(n * k);
    for _ in 0..n {
        let mut row: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        softmax_inplace(&mut row);
        probs.extend(row);
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let reference = -labels.iter().enumerate().map(|(i, &y)| probs[i * k + y].ln()).sum::<f64>() / n as f64;
    let t = Tensor::new(vec![n, k], probs).expect("shape");
    let unit = weighted_cross_entropy_indices(&t, &labels, &vec![1.0; k]).expect("ce").loss;
    let plain = WeightedCrossEntropy::unweighted(k).evaluate(&t, &labels).expect("ce").loss;
    let ce_err = (unit - reference).abs().max((plain - reference).abs());

    verdict(
        worst <= 1e-4 && (sum - 3.0).abs() <= 1e-12 && ce_err <= 1e-12,
        format!("max weight error {worst:.1e} (tol 1e-4), sum {sum:.12}, unit CE error {ce_err:.1e} (tol 1e-12)"),
    )
}

fn gradients() -> Verdict {
    let cnn = common::Case::new(Architecture::TinyCnn(CnnConfig::tiny(3)), 5);
    let vit = common::Case::new(Architecture::TinyVit(common::small_vit()), 9);
    let sizes = (cnn.model.n_params(), vit.model.n_params());
    let (cp, cx) = common::check(&cnn);
    let (vp, vx) = common::check(&vit);
    let worst = cp.max(cx).max(vp).max(vx);
    verdict(
        worst <= common::REL_TOL && sizes.0 <= 5000 && sizes.1 <= 5000,
        format!(
            "cnn ({} params) param {cp:.1e} input {cx:.1e}; vit ({} params) param {vp:.1e} input {vx:.1e} (tol 1e-4)",
            sizes.0, sizes.1
        ),
    )
}

fn random_input(model: &Model, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let [c, h, w] = model.input_shape();
    Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("shape")
}

fn lrp_conservation() -> Verdict {
    let cfg = VitConfig::tiny(3);
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let model = Model::new(Architecture::TinyVit(cfg.clone()), 1000 + trial).expect("model");
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let pass = model.forward(&random_input(&model, 1, &mut rng), Mode::Eval).expect("forward");
        let map = lrp_propagate(&model, &pass, 0, None).expect("relevance");
        assert_eq!(map.per_layer.len(), cfg.layers + 1);
        let top: f64 = map.per_layer[cfg.layers].iter().sum();
        for layer in &map.per_layer {
            worst = worst.max((layer.iter().sum::<f64>() - top).abs());
        }
    }
    let two = propagate_relevance(&[vec![vec![0.6, 0.4, 0.1, 0.9]]], &[0.8, 0.2], 0).expect("2-patch");
    let r = two.input();
    let example_err = (r[0] - 0.5).abs().max((r[1] - 0.5).abs());
    verdict(
        cfg.layers == 4 && worst <= 1e-9 && example_err <= 1e-15,
        format!(
            "{} layers x 100 trials, max drift {worst:.1e} (tol 1e-9); 2-patch example [{}, {}]",
            cfg.layers, r[0], r[1]
        ),
    )
}

fn attention_rows() -> Verdict {
    let mut worst_row: f64 = 0.0;
    let mut rows = 0usize;
    for seed in 0..5u64 {
        let model = Model::new(Architecture::TinyVit(VitConfig::tiny(3)), seed).expect("model");
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let x = random_input(&model, 6, &mut rng);
        let pass = model.forward(&x, Mode::Eval).expect("forward");
        let (layers, heads, n) = pass.attention_dims().expect("vit keeps attention");
        for s in 0..6 {
            for l in 0..layers {
                for h in 0..heads {
                    for row in pass.attention(s, l, h).expect("cached").chunks(n) {
                        worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                        rows += 1;
                    }
                }
            }
        }
        let records: Vec<AnnotationRecord> = (0..6)
            .map(|i| AnnotationRecord {
                sample_id: format!("s{i}"),
                class_label: "c".into(),
                bbox: BBox::new(4.0, 4.0, 20.0, 20.0),
                condition: Condition::Normal,
                image_ref: None,
                image_size: (32, 32),
            })
            .collect();
        let summary = extract_attention(&model, &x, &records).expect("summary");
        for m in summary.mean.iter().chain(summary.class_mean.values().flatten()) {
            for row in m.chunks(summary.tokens) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_shift: f64 = 0.0;
    for _ in 0..200 {
        let len = rng.gen_range(2..20);
        let row: Vec<f64> = (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let c = rng.gen_range(-50.0..50.0);
        let mut a = row.clone();
        let mut b: Vec<f64> = row.iter().map(|v| v + c).collect();
        softmax_inplace(&mut a);
        softmax_inplace(&mut b);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for ((p, q), v) in a.iter().zip(&b).zip(&row) {
            worst_shift = worst_shift.max((p - q).abs()).max((p - v.exp() / z).abs());
        }
        let (n, d) = (4, 3);
        let q: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = attention_weights(&q, &k, n, d).expect("weights");
        // shifting every key by the same vector adds q_i . v to row i only
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k2: Vec<f64> = k.iter().enumerate().map(|(i, x)| x + v[i % d]).collect();
        let shifted = attention_weights(&q, &k2, n, d).expect("weights");
        for (p, s) in base.iter().zip(&shifted) {
            worst_shift = worst_shift.max((p - s).abs());
        }
    }
    verdict(
        worst_row <= 1e-12 && worst_shift <= 1e-12,
        format!("{rows} rows, max |sum - 1| {worst_row:.1e}; shift max diff {worst_shift:.1e} (tol 1e-12)"),
    )
}

fn gt(id: &str, class: &str, b: [f64; 4]) -> AnnotationRecord {
    AnnotationRecord {
        sample_id: id.into(),
        class_label: class.into(),
        bbox: b.into(),
        condition: Condition::Normal,
        image_ref: None,
        image_size: (64, 64),
    }
}

fn det(id: &str, class: &str, b: [f64; 4], score: f64) -> Detection {
    Detection {
        sample_id: id.into(),
        class_label: class.into(),
        bbox: b.into(),
        score,
    }
}

fn oracle_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
}

/// Largest number of one-to-one (detection, ground truth) pairs over every assignment.
fn max_matching(cands: &[Vec<usize>], used: &mut Vec<bool>, i: usize) -> usize {
    if i == cands.len() {
        return 0;
    }
    let mut best = max_matching(cands, used, i + 1);
    for &g in &cands[i] {
        if !used[g] {
            used[g] = true;
            best = best.max(1 + max_matching(cands, used, i + 1));
            used[g] = false;
        }
    }
    best
}

struct Recount {
    tp: usize,
    fp: usize,
    fn_: usize,
    ap: f64,
}

/// Exhaustive recount for one class: for every score-ordered prefix the best
/// achievable TP count, from which counts and the interpolated AP follow.
fn brute_force(dets: &[Detection], gts: &[AnnotationRecord], class: &str, tau: f64) -> Recount {
    let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.class_label == class).collect();
    ds.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite"));
    let gs: Vec<&AnnotationRecord> = gts.iter().filter(|g| g.class_label == class).collect();
    let cands: Vec<Vec<usize>> = ds
        .iter()
        .map(|d| {
            let db: [f64; 4] = d.bbox.into();
            (0..gs.len())
                .filter(|&j| gs[j].sample_id == d.sample_id && oracle_iou(&db, &gs[j].bbox.into()) >= tau)
                .collect()
        })
        .collect();
    let prefix_tp: Vec<usize> = (1..=ds.len())
        .map(|k| max_matching(&cands[..k], &mut vec![false; gs.len()], 0))
        .collect();
    let n_gt = gs.len() as f64;
    let precision: Vec<f64> = prefix_tp.iter().enumerate().map(|(k, &t)| t as f64 / (k + 1) as f64).collect();
    let mut ap = 0.0;
    let mut prev = 0usize;
    for (k, &t) in prefix_tp.iter().enumerate() {
        if t > prev {
            let best_after = precision[k..].iter().copied().fold(0.0, f64::max);
            ap += (t - prev) as f64 / n_gt * best_after;
            prev = t;
        }
    }
    let tp = prefix_tp.last().copied().unwrap_or(0);
    Recount {
        tp,
        fp: ds.len() - tp,
        fn_: gs.len() - tp,
        ap,
    }
}

fn metrics_oracle() -> Verdict {
    let gts = vec![
        gt("s1", "car", [0.0, 0.0, 10.0, 10.0]),
        gt("s1", "car", [4.0, 0.0, 14.0, 10.0]),
        gt("s1", "car", [30.0, 30.0, 40.0, 40.0]),
        gt("s2", "car", [5.0, 5.0, 25.0, 25.0]),
        gt("s1", "cyclist", [50.0, 50.0, 60.0, 62.0]),
        gt("s2", "cyclist", [40.0, 0.0, 48.0, 16.0]),
    ];
    let dets = vec![
        // overlaps both of the first two cars: the contested case
        det("s1", "car", [1.0, 0.0, 11.0, 10.0], 0.95),
        det("s1", "car", [4.0, 0.0, 13.0, 10.0], 0.90),
        // duplicate of an already matched car
        det("s1", "car", [0.0, 0.0, 10.0, 10.0], 0.60),
        // overlap below the threshold
        det("s1", "car", [33.0, 33.0, 43.0, 43.0], 0.50),
        det("s2", "car", [6.0, 6.0, 24.0, 26.0], 0.80),
        // nothing there
        det("s2", "car", [40.0, 40.0, 50.0, 50.0], 0.30),
        // right place, wrong class
        det("s2", "car", [40.0, 0.0, 48.0, 16.0], 0.75),
        det("s1", "cyclist", [50.0, 51.0, 60.0, 62.0], 0.85),
        det("s2", "cyclist", [5.0, 5.0, 25.0, 25.0], 0.70),
        det("s2", "cyclist", [41.0, 1.0, 48.0, 16.0], 0.40),
    ];
    let tau = 0.5;
    let m = match_detections(&dets, &gts, tau).expect("matching");
    let mut ok = true;
    let mut parts = Vec::new();
    for class in ["car", "cyclist"] {
        let cm = &m.per_class[class];
        let ap = average_precision(&cm.flags, cm.n_gt).expect("ap");
        let b = brute_force(&dets, &gts, class, tau);
        let same = cm.true_positives() == b.tp
            && cm.false_positives() == b.fp
            && cm.false_negatives == b.fn_
            && (ap - b.ap).abs() <= 1e-12;
        ok &= same;
        parts.push(format!(
            "{class} TP/FP/FN {}/{}/{} AP {ap:.4} vs recount {}/{}/{} AP {:.4}",
            cm.true_positives(),
            cm.false_positives(),
            cm.false_negatives,
            b.tp,
            b.fp,
            b.fn_,
            b.ap
        ));
    }
    let worked = average_precision(&[true, false, true], 2).expect("ap");
    ok &= (worked - 0.8333).abs() <= 1e-4 && (worked - 5.0 / 6.0).abs() <= 1e-6;
    parts.push(format!("worked AP {worked:.6}"));
    ok &= dets.len() == 10 && gts.len() == 6;
    verdict(ok, parts.join("; "))
}

fn distribution_fidelity() -> Verdict {
    let counts = [
        ("human.pedestrian.adult", 149_921usize),
        ("vehicle.bicycle", 17_060),
        ("vehicle.motorcycle", 16_779),
        ("other", 509_997),
    ];
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("counts.jsonl");
    {
        let mut w = BufWriter::new(std::fs::File::create(&path).expect("create"));
        let mut i = 0usize;
        for (class, n) in counts {
            for _ in 0..n {
                writeln!(
                    w,
                    r#"{{"sample_id":"r{i}","class_label":"{class}","bbox":[1,1,5,5],"condition":"Normal","image_size":[16,16]}}"#
                )
                .expect("write");
                i += 1;
            }
        }
    }
    let manifest = load_manifest(&path).expect("manifest");
    let dist = compute_distribution(&manifest).expect("distribution");
    let total: usize = counts.iter().map(|c| c.1).sum();
    let expected = [
        ("human.pedestrian.adult", 21.61),
        ("vehicle.bicycle", 2.46),
        ("vehicle.motorcycle", 2.42),
    ];
    let mut worst: f64 = 0.0;
    let mut shown = Vec::new();
    for (c, e) in expected {
        let got = dist.percentage(c).expect("class present");
        let oracle = 100.0 * counts.iter().find(|x| x.0 == c).expect("count").1 as f64 / total as f64;
        worst = worst.max((got - e).abs());
        worst = worst.max((got - oracle).abs());
        shown.push(format!("{got:.4}%"));
    }
    verdict(
        worst <= 0.01 && dist.total == total,
        format!("total {} -> {} (max deviation {worst:.4} pp, tol 0.01)", dist.total, shown.join(" / ")),
    )
}

/// Epochs per training run in the directional check; the default 50-epoch
/// schedule would not fit five seeds inside the time limit on one core.
const DIRECTIONAL_EPOCHS: usize = 20;

fn directional_mitigation() -> Verdict {
    let seeds = [1u64, 2, 3, 4, 5];
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
    let outcomes = run_seeds(&seeds, jobs, |seed| {
        let syn = SyntheticConfig::imbalanced(seed);
        assert_eq!((syn.n, syn.image_size), (3000, 32));
        let data = generate(&syn)?;
        let mut cfg = AuditConfig::new(DataSource::Synthetic(syn), ModelKind::TinyCnn, 3, seed);
        cfg.train.epochs = DIRECTIONAL_EPOCHS;
        let run = run_audit(&cfg, data)?;
        let m = run_mitigation(&run, Strategy::Combined)?;
        let pre = &m.report.pre;
        let post = m.report.post.as_ref().expect("post section");
        let minority = |e: &biaslens::audit::EvalSection| {
            (e.per_class["vehicle.bicycle"].recall + e.per_class["vehicle.motorcycle"].recall) / 2.0
        };
        Ok((minority(pre), minority(post), pre.macro_iou, post.macro_iou))
    })
    .expect("pipeline");
    let wins = outcomes.iter().filter(|(r0, r1, i0, i1)| r1 > r0 && i1 > i0).count();
    let detail: Vec<String> = seeds
        .iter()
        .zip(&outcomes)
        .map(|(s, (r0, r1, i0, i1))| format!("s{s}: recall {r0:.2}->{r1:.2} IoU {i0:.1}->{i1:.1}"))
        .collect();
    verdict(wins >= 4, format!("{wins}/5 seeds improve both [{}]", detail.join(", ")))
}

fn determinism() -> Verdict {
    let syn = SyntheticConfig {
        n: 600,
        ..SyntheticConfig::imbalanced(11)
    };
    let mut cfg = AuditConfig::new(DataSource::Synthetic(syn.clone()), ModelKind::TinyVit, 3, 11);
    cfg.train.epochs = 3;
    cfg.options.behavior.probe_per_class = 16;
    cfg.options.behavior.sensitivity_neurons = 2;
    let once = || -> String {
        let run = run_audit(&cfg, generate(&syn).expect("data")).expect("audit");
        run.report.to_canonical_json().expect("json")
    };
    let a = once();
    let b = once();
    let c = run_seeds(&[11], 2, |_| Ok(once())).expect("pool").remove(0);
    verdict(
        a == b && a == c,
        format!("{} bytes, sequential repeat equal: {}, thread-pool run equal: {}", a.len(), a == b, a == c),
    )
}

fn manifest_with(counts: &[(&str, usize)]) -> DatasetManifest {
    let mut records = Vec::new();
    for (class, n) in counts {
        for i in 0..*n {
            records.push(AnnotationRecord {
                sample_id: format!("{class}-{i}"),
                class_label: class.to_string(),
                bbox: BBox::new(1.0, 1.0, 5.0, 5.0),
                condition: Condition::ALL[i % 5],
                image_ref: None,
                image_size: (16, 16),
            });
        }
    }
    DatasetManifest::new(records, 0).expect("manifest")
}

fn resampling_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ok = true;
    for trial in 0..50u64 {
        let counts: Vec<(&str, usize)> =
            vec![("a", rng.gen_range(1..300)), ("b", rng.gen_range(1..300)), ("c", rng.gen_range(1..300))];
        let m = manifest_with(&counts);
        let up: BTreeMap<String, usize> =
            counts.iter().map(|(c, n)| (c.to_string(), n + rng.gen_range(0..200))).collect();
        let down: BTreeMap<String, usize> = counts.iter().map(|(c, n)| (c.to_string(), rng.gen_range(0..=*n))).collect();
        let over = random_oversample(
            &m,
            &ResamplePlan {
                target_counts: up.clone(),
                mode: ResampleMode::Oversample,
                seed: trial,
            },
        )
        .expect("oversample");
        let under = random_undersample(
            &m,
            &ResamplePlan {
                target_counts: down.clone(),
                mode: ResampleMode::Undersample,
                seed: trial,
            },
        )
        .expect("undersample");
        let max = counts.iter().map(|c| c.1).max().unwrap_or(0);
        let to_max = random_oversample(&m, &ResamplePlan::to_max(&m, trial).expect("plan")).expect("to max");
        ok &= over.class_counts() == up
            && under.class_counts().iter().all(|(c, n)| down[c] == *n)
            && to_max.class_counts().values().all(|&n| n == max);
        // originals survive oversampling
        let ids: std::collections::HashSet<&str> = over.records.iter().map(|r| r.sample_id.as_str()).collect();
        ok &= m.records.iter().all(|r| ids.contains(r.sample_id.as_str()));
    }
    let classes = ["pedestrian".to_string(), "bicycle".to_string(), "motorcycle".to_string()];
    let alloc = allocate(&classes, 300, 0.67);
    // oracle: dominant share floored, minorities split the rest evenly, leftovers to the dominant class
    let minor = (300 - (0.67f64 * 300.0 + 1e-9).floor() as usize) / 2;
    let expected = [(202usize, "pedestrian"), (49, "bicycle"), (49, "motorcycle")];
    let alloc_ok = expected.iter().all(|(n, c)| alloc[*c] == *n) && minor == 49 && alloc.values().sum::<usize>() == 300;
    verdict(
        ok && alloc_ok,
        format!(
            "50 random manifests exact: {ok}; allocation {{{}, {}, {}}}",
            alloc["pedestrian"], alloc["bicycle"], alloc["motorcycle"]
        ),
    )
}
