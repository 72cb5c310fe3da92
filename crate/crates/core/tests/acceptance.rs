//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs as a plain binary (`harness = false`).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use detprune::analysis::{class_distribution, js_divergence, scale_schedule, Schedule};
use detprune::datamodel::{
    parse_annotations, parse_logs, parse_manifest, parse_scores, write_annotations, write_log_line,
    write_manifest, write_scores, CategoryId, DatasetIndex, EpochImageLog, GroundTruthObject,
    ImageId, ImageRecord, ObjectId, Prediction, PruneManifest, ScoreRow,
};
use detprune::geometry::BBox;
use detprune::matching::{cipa_match, EpochWindow};
use detprune::pipeline::{score_and_rank, score_reader, stream_series, ScoreOutcome, ScoreRequest};
use detprune::ranking::{select, AggregationKind, Direction};
use detprune::scoring::{
    aum, el2n, entropy_score, forgetting, mean_value, score_objects, vps, Level, Method,
    ScoreMethod,
};
use detprune::synth::{Generator, SynthConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let result = f();
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!(
                "took {:.2}s, limit {:.0}s",
                elapsed.as_secs_f64(),
                limit.as_secs_f64()
            )),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if result.is_err() {
            self.failures += 1;
        }
        println!(
            "{tag} [{id}] {name} ({:.2}s): {detail}",
            elapsed.as_secs_f64()
        );
    }
}

// ---------------------------------------------------------------------------
// 1. schedule exactness
// ---------------------------------------------------------------------------

fn schedule_exactness() -> Check {
    let voc = Schedule::new(18000, vec![12000, 16000]).map_err(|e| e.to_string())?;
    let coco = Schedule::new(90000, vec![60000, 80000]).map_err(|e| e.to_string())?;
    let table: [(&str, &Schedule, f64, [u64; 3]); 8] = [
        ("voc", &voc, 0.3, [12600, 8400, 11200]),
        ("voc", &voc, 0.5, [9000, 6000, 8000]),
        ("voc", &voc, 0.7, [5400, 3600, 4800]),
        ("voc", &voc, 0.9, [1800, 1200, 1600]),
        ("coco", &coco, 0.6, [36000, 24000, 32000]),
        ("coco", &coco, 0.7, [27000, 18000, 24000]),
        ("coco", &coco, 0.8, [18000, 12000, 16000]),
        ("coco", &coco, 0.9, [9000, 6000, 8000]),
    ];
    let mut values = 0;
    for (name, full, ratio, want) in table {
        let s = scale_schedule(full, ratio).map_err(|e| e.to_string())?;
        let got = [s.max_iter(), s.steps()[0], s.steps()[1]];
        ensure(got == want, || {
            format!("{name} ratio {ratio}: got {got:?}, want {want:?}")
        })?;
        values += 3;
    }
    Ok(format!("{values}/24 scaled values exact"))
}

// ---------------------------------------------------------------------------
// 2. assignment vs exhaustive reference
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct IntBox([i64; 4]);

impl IntBox {
    fn area(self) -> i64 {
        (self.0[2] - self.0[0]) * (self.0[3] - self.0[1])
    }

    fn bbox(self) -> BBox {
        let [a, b, c, d] = self.0;
        BBox::new(a as f64, b as f64, c as f64, d as f64).unwrap()
    }
}

/// Exact IoU as a rational `(intersection, union)`.
fn rational_iou(a: IntBox, b: IntBox) -> (i64, i64) {
    let w = a.0[2].min(b.0[2]) - a.0[0].max(b.0[0]);
    let h = a.0[3].min(b.0[3]) - a.0[1].max(b.0[1]);
    if w <= 0 || h <= 0 {
        return (0, 1);
    }
    let inter = w * h;
    (inter, a.area() + b.area() - inter)
}

fn greater(a: (i64, i64), b: (i64, i64)) -> bool {
    a.0 * b.1 > b.0 * a.1
}

fn equal(a: (i64, i64), b: (i64, i64)) -> bool {
    a.0 * b.1 == b.0 * a.1
}

/// For each gt, the unique prediction that beats or ties-with-lower-index
/// every other eligible prediction, found by checking all pairs.
fn reference_match(gts: &[(IntBox, u64)], preds: &[(IntBox, u64)]) -> Vec<Option<usize>> {
    gts.iter()
        .map(|&(g, gc)| {
            let ious: Vec<(i64, i64)> = preds.iter().map(|&(p, _)| rational_iou(g, p)).collect();
            let candidates: Vec<usize> = (0..preds.len()).filter(|&j| ious[j].0 > 0).collect();
            let same: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|&j| preds[j].1 == gc)
                .collect();
            let pool = if same.is_empty() { candidates } else { same };
            let winners: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&j| {
                    pool.iter().all(|&k| {
                        k == j || greater(ious[j], ious[k]) || (equal(ious[j], ious[k]) && j < k)
                    })
                })
                .collect();
            assert!(winners.len() <= 1);
            winners.first().copied()
        })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> IntBox {
    let x = rng.gen_range(0..10);
    let y = rng.gen_range(0..10);
    IntBox([x, y, x + rng.gen_range(0..6), y + rng.gen_range(0..6)])
}

fn cipa_equivalence() -> Check {
    let (mut matched, mut ties, mut fallbacks) = (0, 0, 0);
    for instance in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(instance);
        let classes = rng.gen_range(1..=5u64);
        let gts: Vec<(IntBox, u64)> = (0..rng.gen_range(0..=8))
            .map(|_| (random_box(&mut rng), rng.gen_range(1..=classes)))
            .collect();
        let preds: Vec<(IntBox, u64)> = (0..rng.gen_range(0..=15))
            .map(|_| (random_box(&mut rng), rng.gen_range(1..=classes)))
            .collect();
        let gt_objects: Vec<GroundTruthObject> = gts
            .iter()
            .enumerate()
            .map(|(k, &(b, c))| GroundTruthObject {
                object_id: ObjectId(k as u64),
                bbox: b.bbox(),
                category: CategoryId(c),
            })
            .collect();
        let predictions: Vec<Prediction> = preds
            .iter()
            .map(|&(b, c)| Prediction {
                bbox: b.bbox(),
                category: CategoryId(c),
                confidence: 0.5,
                probs: None,
            })
            .collect();
        let want = reference_match(&gts, &preds);
        let got = cipa_match(1, &gt_objects, &predictions);
        ensure(got.len() == want.len(), || {
            format!("instance {instance}: length mismatch")
        })?;
        for (k, (a, w)) in got.iter().zip(&want).enumerate() {
            let idx = a.matched.as_ref().map(|m| m.prediction_index);
            ensure(idx == *w, || {
                format!("instance {instance}, gt {k}: got {idx:?}, reference {w:?}")
            })?;
            if let (Some(m), Some(j)) = (&a.matched, w) {
                let (n, d) = rational_iou(gts[k].0, preds[*j].0);
                ensure(m.iou == n as f64 / d as f64, || {
                    format!("instance {instance}, gt {k}: iou {} vs {n}/{d}", m.iou)
                })?;
                matched += 1;
                if preds[*j].1 != gts[k].1 {
                    fallbacks += 1;
                }
                let best = rational_iou(gts[k].0, preds[*j].0);
                if preds.iter().enumerate().any(|(i, p)| {
                    i != *j && p.1 == preds[*j].1 && equal(rational_iou(gts[k].0, p.0), best)
                }) {
                    ties += 1;
                }
            }
        }
    }
    Ok(format!(
        "1000 instances identical ({matched} assignments, {ties} with exact ties, {fallbacks} cross-class)"
    ))
}

// ---------------------------------------------------------------------------
// 3. VPS vs two-pass oracle, Bhatia-Davis bound
// ---------------------------------------------------------------------------

fn two_pass_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn vps_oracle_and_bound() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut worst_rel, mut worst_excess) = (0.0f64, f64::NEG_INFINITY);
    for k in 0..100_000u32 {
        let len = rng.gen_range(1..=40);
        let v: Vec<f64> = match k % 3 {
            0 => (0..len).map(|_| rng.gen::<f64>()).collect(),
            1 => (0..len)
                .map(|_| f64::from(rng.gen::<bool>() as u8))
                .collect(),
            _ => {
                let base: f64 = rng.gen_range(0.01..0.99);
                (0..len).map(|_| base + 1e-6 * rng.gen::<f64>()).collect()
            }
        };
        let got = vps(&v).map_err(|e| e.to_string())?;
        let want = two_pass_std(&v);
        let rel = if want == 0.0 {
            got
        } else {
            (got - want).abs() / want
        };
        worst_rel = worst_rel.max(rel);
        ensure(rel <= 1e-12, || {
            format!("series {k}: vps {got} vs oracle {want}")
        })?;
        let m = mean_value(&v).map_err(|e| e.to_string())?;
        let excess = got * got - m * (1.0 - m);
        worst_excess = worst_excess.max(excess);
        ensure(excess <= 1e-12, || {
            format!("series {k}: vps^2 exceeds m(1-m) by {excess}")
        })?;
    }
    Ok(format!(
        "1e5 series, max relative error {worst_rel:.2e}, max bound excess {worst_excess:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 4. worked score examples
// ---------------------------------------------------------------------------

fn score_units() -> Check {
    let close = |name: &str, got: f64, want: f64| {
        ensure((got - want).abs() <= 1e-9, || {
            format!("{name}: {got} vs {want}")
        })
    };
    let e = |r: Result<f64, detprune::ScoreError>| r.map_err(|e| e.to_string());
    let half: &[f64] = &[0.5, 0.5];
    close("el2n (0.5,0.5)", e(el2n(&[Some(half)], 0))?, 0.5f64.sqrt())?;
    close("aum (0.9,0.1)", e(aum(&[Some(&[0.9, 0.1][..])], 0))?, 0.8)?;
    close("aum (0.1,0.9)", e(aum(&[Some(&[0.1, 0.9][..])], 0))?, -0.8)?;
    close(
        "aum [(1,0),(0,1)]",
        e(aum(&[Some(&[1.0, 0.0][..]), Some(&[0.0, 1.0][..])], 0))?,
        0.0,
    )?;
    close(
        "entropy uniform(4)",
        e(entropy_score(&[Some(&[0.25; 4][..])]))?,
        4f64.ln(),
    )?;
    close(
        "entropy [uniform(2),(1,0)]",
        e(entropy_score(&[Some(half), Some(&[1.0, 0.0][..])]))?,
        2f64.ln() / 2.0,
    )?;
    let f = forgetting(&[true, false, true, false]).map_err(|e| e.to_string())?;
    ensure(f == 2, || format!("forgetting [1,0,1,0]: {f}"))?;
    Ok("el2n, aum x3, entropy x2, forgetting within 1e-9".into())
}

// ---------------------------------------------------------------------------
// 5. end-to-end synthetic oracle run
// ---------------------------------------------------------------------------

fn synth_lines(g: &Generator) -> Result<Vec<String>, String> {
    g.records()
        .map(|r| r.map(|r| write_log_line(&r)).map_err(|e| e.to_string()))
        .collect()
}

const E2E_RATIOS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

fn e2e_run(config: &SynthConfig, seed: u64) -> Result<(ScoreOutcome, Vec<Vec<u8>>), String> {
    let g = Generator::new(config.clone()).map_err(|e| e.to_string())?;
    let dataset =
        parse_annotations(write_annotations(&g.dataset().map_err(|e| e.to_string())?).as_slice())
            .map_err(|e| e.to_string())?;
    let lines = synth_lines(&g)?;
    let request = ScoreRequest {
        method: ScoreMethod::new(Method::VpsIou),
        aggregation: Some(AggregationKind::Max),
        window: EpochWindow::first(config.epochs).unwrap(),
        seed,
    };
    let outcome =
        score_and_rank(&dataset, lines.into_iter().map(Ok), &request).map_err(|e| e.to_string())?;
    let manifests = E2E_RATIOS
        .iter()
        .map(|&r| {
            select(&outcome.ranked, r, "vps_iou", "max")
                .map(|m| write_manifest(&m))
                .map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    Ok((outcome, manifests))
}

fn end_to_end() -> Check {
    let config = SynthConfig {
        num_images: 1000,
        num_classes: 8,
        epochs: 12,
        objects_per_image: (1, 4),
        seed: 2024,
        ..SynthConfig::default()
    };
    let g = Generator::new(config.clone()).map_err(|e| e.to_string())?;
    let truth = g.truth().map_err(|e| e.to_string())?;
    let by_image = truth.image_max_iou_std();

    let (outcome, manifests) = e2e_run(&config, 99)?;
    let (outcome2, manifests2) = e2e_run(&config, 99)?;
    ensure(outcome == outcome2, || "two runs ranked differently".into())?;
    ensure(manifests == manifests2, || {
        "manifests differ between runs".into()
    })?;

    // per-object recovery and the spread bound over the whole run
    let dataset = g.dataset().map_err(|e| e.to_string())?;
    let lines = synth_lines(&g)?;
    let set = stream_series(
        &dataset,
        lines.into_iter().map(Ok),
        EpochWindow::first(12).unwrap(),
        false,
    )
    .map_err(|e| e.to_string())?;
    let objects: Vec<_> = (0..dataset.images().len())
        .flat_map(|p| set.image_series(p))
        .collect();
    let scores =
        score_objects(&ScoreMethod::new(Method::VpsIou), &objects).map_err(|e| e.to_string())?;
    ensure(scores.len() == truth.objects.len(), || {
        "object count mismatch".into()
    })?;
    let mut worst = 0.0f64;
    for ((s, t), series) in scores.iter().zip(&truth.objects).zip(&objects) {
        ensure(s.object_id == t.object_id, || {
            format!("object order {} vs {}", s.object_id, t.object_id)
        })?;
        worst = worst.max((s.value - t.iou_std).abs());
        ensure((s.value - t.iou_std).abs() <= 1e-9, || {
            format!(
                "object {}: vps {} vs injected {}",
                s.object_id, s.value, t.iou_std
            )
        })?;
        let m = mean_value(&series.iou).map_err(|e| e.to_string())?;
        ensure(s.value * s.value <= m * (1.0 - m) + 1e-12, || {
            format!("object {} breaks the spread bound", s.object_id)
        })?;
    }

    // ranking recovery up to exact ties
    let order = outcome.ranked.order();
    ensure(order.len() == by_image.len(), || {
        "ranked image count mismatch".into()
    })?;
    let truth_in_order: Vec<f64> = order.iter().map(|id| by_image[id]).collect();
    for (k, w) in truth_in_order.windows(2).enumerate() {
        ensure(w[0] >= w[1], || {
            format!("rank {}: injected {} before {}", k + 1, w[0], w[1])
        })?;
    }
    for w in outcome.ranked.entries.windows(2) {
        if w[0].score == w[1].score {
            ensure(by_image[&w[0].image_id] == by_image[&w[1].image_id], || {
                "pipeline tie is not an injected tie".into()
            })?;
        }
    }
    let tie_groups = {
        let values: BTreeSet<u64> = truth_in_order.iter().map(|v| v.to_bits()).collect();
        order.len() - values.len()
    };

    // nesting across ratios
    let kept: Vec<HashSet<ImageId>> = manifests
        .iter()
        .map(|b| {
            parse_manifest(b)
                .map(|m| m.kept_set())
                .map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    for (k, pair) in kept.windows(2).enumerate() {
        ensure(pair[1].is_subset(&pair[0]), || {
            format!(
                "ratio {} set is not inside ratio {}",
                E2E_RATIOS[k + 1],
                E2E_RATIOS[k]
            )
        })?;
    }
    let sizes: Vec<usize> = kept.iter().map(HashSet::len).collect();
    Ok(format!(
        "{} objects, max |vps - injected| {worst:.1e}, ranking consistent ({tie_groups} tied images), manifests byte-identical, kept {sizes:?} nested",
        objects.len()
    ))
}

// ---------------------------------------------------------------------------
// 6. direction compliance
// ---------------------------------------------------------------------------

/// Default keep-first end per method.
const DOCUMENTED: [(Method, Direction); 12] = [
    (Method::Idp, Direction::KeepHighFirst),
    (Method::Loss, Direction::KeepHighFirst),
    (Method::Random, Direction::KeepHighFirst),
    (Method::Aum, Direction::KeepLowFirst),
    (Method::Entropy, Direction::KeepHighFirst),
    (Method::El2n, Direction::KeepHighFirst),
    (Method::Forgetting, Direction::KeepHighFirst),
    (Method::Correctness, Direction::KeepLowFirst),
    (Method::IouMean, Direction::KeepLowFirst),
    (Method::ConfMean, Direction::KeepLowFirst),
    (Method::VpsIou, Direction::KeepHighFirst),
    (Method::VpsConf, Direction::KeepLowFirst),
];

const FIXTURE_EPOCHS: u32 = 6;

/// Per-epoch (iou, confidence, correct, p_gt) of image `k` (1..=3), chosen
/// so the method's raw score grows with `k`.
fn fixture_epoch(method: Method, k: u32, t: u32) -> (f64, f64, bool, f64) {
    let kf = f64::from(k);
    let sign = if t.is_multiple_of(2) { 1.0 } else { -1.0 };
    match method {
        Method::VpsIou => (0.5 + sign * 0.1 * kf, 0.5, true, 0.5),
        Method::VpsConf => (0.5, 0.5 + sign * 0.1 * kf, true, 0.5),
        Method::IouMean => (0.2 * kf, 0.5, true, 0.5),
        Method::ConfMean => (0.5, 0.2 * kf, true, 0.5),
        Method::El2n => (0.5, 0.5, true, 1.0 - 0.2 * kf),
        Method::Aum => (0.5, 0.5, true, 0.5 + 0.15 * kf),
        Method::Entropy => (0.5, 0.5, true, 1.0 - 0.15 * kf),
        // k correct-to-incorrect transitions
        Method::Forgetting => (0.5, 0.5, t > 2 * k || t % 2 == 1, 0.5),
        // k correct epochs
        Method::Correctness => (0.5, 0.5, t <= k, 0.5),
        Method::Idp | Method::Loss | Method::Random => (0.5, 0.5, true, 0.5),
    }
}

fn direction_fixture(method: Method) -> (DatasetIndex, Vec<String>) {
    let categories: BTreeMap<CategoryId, String> = [
        (CategoryId(1), "a".to_string()),
        (CategoryId(2), "b".to_string()),
    ]
    .into();
    let gt_box =
        |j: u64| BBox::new(j as f64 * 200.0, 0.0, j as f64 * 200.0 + 100.0, 100.0).unwrap();
    let images: Vec<ImageRecord> = (1..=3u64)
        .map(|k| {
            let n = if method == Method::Idp { k } else { 1 };
            ImageRecord {
                image_id: ImageId(k),
                file_name: format!("{k}.jpg"),
                width: None,
                height: None,
                objects: (0..n)
                    .map(|j| GroundTruthObject {
                        object_id: ObjectId(k * 10 + j),
                        bbox: gt_box(j),
                        category: CategoryId(1),
                    })
                    .collect(),
            }
        })
        .collect();
    let dataset = DatasetIndex::new(images, categories).unwrap();
    let mut lines = Vec::new();
    for t in 1..=FIXTURE_EPOCHS {
        for image in dataset.images() {
            let k = image.image_id.0 as u32;
            let (iou, conf, correct, p_gt) = fixture_epoch(method, k, t);
            let predictions = image
                .objects
                .iter()
                .map(|o| {
                    let category = if correct {
                        CategoryId(1)
                    } else {
                        CategoryId(2)
                    };
                    Prediction {
                        bbox: BBox::new(o.bbox.x_min(), 0.0, o.bbox.x_min() + 100.0 * iou, 100.0)
                            .unwrap(),
                        category,
                        confidence: conf,
                        probs: Some(vec![p_gt, 1.0 - p_gt]),
                    }
                })
                .collect();
            let record = EpochImageLog {
                epoch: t,
                image_id: image.image_id,
                predictions,
                loss: Some(f64::from(k)),
            };
            lines.push(write_log_line(&record));
        }
    }
    (dataset, lines)
}

fn direction_compliance() -> Check {
    let mut seen = Vec::new();
    for (method, documented) in DOCUMENTED {
        ensure(method.default_direction() == documented, || {
            format!(
                "{method}: default {} but documented {}",
                method.default_direction(),
                documented
            )
        })?;
        let (dataset, lines) = direction_fixture(method);
        let request = ScoreRequest {
            method: ScoreMethod::new(method),
            aggregation: (method.level() == Level::Object).then_some(AggregationKind::Mean),
            window: EpochWindow::first(FIXTURE_EPOCHS).unwrap(),
            seed: 17,
        };
        let outcome = score_and_rank(&dataset, lines.into_iter().map(Ok), &request)
            .map_err(|e| format!("{method}: {e}"))?;
        let got: Vec<u64> = outcome.ranked.order().iter().map(|i| i.0).collect();
        let want: Vec<u64> = if method == Method::Random {
            // the documented order for random is descending draw value
            let mut ids: Vec<(f64, u64)> =
                outcome.scores.iter().map(|(id, s)| (*s, id.0)).collect();
            ids.sort_by(|a, b| b.0.total_cmp(&a.0));
            ids.into_iter().map(|(_, id)| id).collect()
        } else {
            let s: Vec<f64> = outcome.scores.values().copied().collect();
            ensure(s[0] < s[1] && s[1] < s[2], || {
                format!("{method}: fixture scores {s:?} not increasing")
            })?;
            match documented {
                Direction::KeepHighFirst => vec![3, 2, 1],
                Direction::KeepLowFirst => vec![1, 2, 3],
            }
        };
        ensure(got == want, || {
            format!("{method}: keep order {got:?}, expected {want:?}")
        })?;
        seen.push(format!("{method}={}", documented));
    }
    Ok(format!("12 methods: {}", seen.join(" ")))
}

// ---------------------------------------------------------------------------
// 7. random-selection class drift
// ---------------------------------------------------------------------------

fn random_selection_jsd() -> Check {
    let g = Generator::new(SynthConfig {
        num_images: 5000,
        num_classes: 20,
        epochs: 2,
        objects_per_image: (1, 6),
        mix: [1.0, 0.0, 0.0],
        seed: 7,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let dataset = g.dataset().map_err(|e| e.to_string())?;
    let all: Vec<ImageId> = dataset.images().iter().map(|im| im.image_id).collect();
    let full = class_distribution(&dataset, &all).map_err(|e| e.to_string())?;
    let (mut below, mut worst) = (0, 0.0f64);
    for seed in 0..100u64 {
        let request = ScoreRequest {
            method: ScoreMethod::new(Method::Random),
            aggregation: None,
            window: EpochWindow::first(1).unwrap(),
            seed,
        };
        let outcome = score_and_rank(
            &dataset,
            std::iter::empty::<std::io::Result<String>>(),
            &request,
        )
        .map_err(|e| e.to_string())?;
        let manifest = select(&outcome.ranked, 0.5, "random", "n/a").map_err(|e| e.to_string())?;
        let kept =
            class_distribution(&dataset, &manifest.kept_image_ids).map_err(|e| e.to_string())?;
        let jsd = js_divergence(&full, &kept).map_err(|e| e.to_string())?;
        worst = worst.max(jsd);
        if jsd < 0.01 {
            below += 1;
        }
    }
    ensure(below >= 95, || {
        format!("only {below}/100 seeds below 0.01 (max {worst:.2e})")
    })?;
    Ok(format!(
        "{below}/100 seeds below 0.01 bits, max {worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 8. throughput
// ---------------------------------------------------------------------------

fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn throughput(dir: &Path) -> Check {
    let g = Generator::new(SynthConfig {
        num_images: 100_000,
        num_classes: 20,
        epochs: 12,
        objects_per_image: (4, 10),
        distractors_per_image: 0,
        with_probs: false,
        with_loss: false,
        seed: 8,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let gen_start = Instant::now();
    let ann_path = dir.join("annotations.json");
    let log_path = dir.join("log.jsonl");
    std::fs::write(
        &ann_path,
        write_annotations(&g.dataset().map_err(|e| e.to_string())?),
    )
    .map_err(|e| e.to_string())?;
    let mut out = BufWriter::new(File::create(&log_path).map_err(|e| e.to_string())?);
    g.write_log(&mut out).map_err(|e| e.to_string())?;
    out.flush().map_err(|e| e.to_string())?;
    drop(out);
    let gen_secs = gen_start.elapsed().as_secs_f64();
    let log_bytes = std::fs::metadata(&log_path)
        .map_err(|e| e.to_string())?
        .len();
    let rss_before = peak_rss_bytes();

    let start = Instant::now();
    let dataset = parse_annotations(BufReader::new(
        File::open(&ann_path).map_err(|e| e.to_string())?,
    ))
    .map_err(|e| e.to_string())?;
    let points: usize = dataset.num_annotations() * 12;
    let request = ScoreRequest {
        method: ScoreMethod::new(Method::VpsIou),
        aggregation: Some(AggregationKind::Max),
        window: EpochWindow::first(12).unwrap(),
        seed: 1,
    };
    let reader =
        BufReader::with_capacity(1 << 20, File::open(&log_path).map_err(|e| e.to_string())?);
    let outcome = score_reader(&dataset, reader, &request).map_err(|e| e.to_string())?;
    let manifest = select(&outcome.ranked, 0.5, "vps_iou", "max").map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let rss_after = peak_rss_bytes();

    ensure(outcome.ranked.len() == 100_000, || {
        format!("ranked {} images", outcome.ranked.len())
    })?;
    ensure(manifest.kept_image_ids.len() == 50_000, || {
        "wrong kept count".into()
    })?;
    ensure(secs < 60.0, || format!("scoring took {secs:.1}s"))?;
    let memory = match (rss_before, rss_after) {
        (Some(b), Some(a)) => {
            let grown = a.saturating_sub(b.min(a));
            ensure(a < log_bytes, || {
                format!(
                    "peak RSS {} MB not below log size {} MB",
                    a >> 20,
                    log_bytes >> 20
                )
            })?;
            format!(
                "peak RSS {} MB (log {} MB, growth {} MB)",
                a >> 20,
                log_bytes >> 20,
                grown >> 20
            )
        }
        _ => "peak RSS unavailable".into(),
    };
    Ok(format!(
        "{} images, {:.2}M series points in {secs:.1}s on {} thread(s) ({memory}; generation {gen_secs:.0}s untimed)",
        dataset.images().len(),
        points as f64 / 1e6,
        rayon::current_num_threads(),
    ))
}

// ---------------------------------------------------------------------------
// 9. format round-trips and malformed fixtures
// ---------------------------------------------------------------------------

fn format_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 0..500 {
        let mut ids: Vec<ImageId> = (0..rng.gen_range(0..50))
            .map(|_| ImageId(rng.gen_range(0..1000)))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let m = PruneManifest {
            format_version: 1,
            method: Method::ALL[k % 12].name().to_string(),
            aggregation: AggregationKind::ALL[k % 3].name().to_string(),
            prune_ratio: rng.gen_range(0.0..1.0),
            seed: rng.gen(),
            kept_image_ids: ids,
            unranked_image_ids: None,
        };
        let bytes = write_manifest(&m);
        let back = parse_manifest(&bytes).map_err(|e| e.to_string())?;
        ensure(back == m && write_manifest(&back) == bytes, || {
            format!("manifest {k} did not round-trip")
        })?;

        let rows: Vec<ScoreRow> = (0..rng.gen_range(0..40usize))
            .map(|r| ScoreRow {
                image_id: ImageId(r as u64 * 3 + 1),
                score: rng.gen_range(-1e3..1e3),
                rank: r + 1,
            })
            .collect();
        let csv = write_scores(&rows);
        let back = parse_scores(csv.as_slice()).map_err(|e| e.to_string())?;
        ensure(back == rows && write_scores(&back) == csv, || {
            format!("scores {k} did not round-trip")
        })?;
    }

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/malformed");
    let mut fixtures: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    fixtures.sort();
    ensure(!fixtures.is_empty(), || {
        "no malformed fixtures found".into()
    })?;
    for path in &fixtures {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let expected = name.split("__").next().unwrap_or_default().to_string();
        let reader = BufReader::new(File::open(path).map_err(|e| e.to_string())?);
        match parse_logs(reader) {
            Ok(_) => return Err(format!("{name} was accepted")),
            Err(e) => ensure(e.code() == expected, || {
                format!("{name}: got {} ({e})", e.code())
            })?,
        }
    }
    // a well-formed log still parses after the fixtures
    let good = "{\"epoch\":1,\"image_id\":1,\"predictions\":[]}\n";
    ensure(
        parse_logs(good.as_bytes()).map(|l| l.len()).ok() == Some(1),
        || "valid log rejected".into(),
    )?;
    let lines = BufReader::new(good.as_bytes()).lines().count();
    Ok(format!(
        "500 manifests and 500 score tables round-trip byte-exactly; {} malformed fixtures rejected with their codes ({lines} valid line accepted)",
        fixtures.len()
    ))
}

fn main() {
    let mut suite = Suite { failures: 0 };
    let secs = |s| Some(Duration::from_secs(s));
    suite.run(1, "schedule exactness", secs(1), schedule_exactness);
    suite.run(
        2,
        "assignment matches exhaustive reference",
        secs(10),
        cipa_equivalence,
    );
    suite.run(
        3,
        "vps oracle and spread bound",
        secs(30),
        vps_oracle_and_bound,
    );
    suite.run(4, "score unit examples", None, score_units);
    suite.run(5, "end-to-end synthetic oracle", secs(60), end_to_end);
    suite.run(6, "direction compliance", None, direction_compliance);
    suite.run(
        7,
        "random-selection class drift",
        secs(60),
        random_selection_jsd,
    );
    let dir = tempfile::tempdir().expect("temp dir");
    suite.run(8, "throughput", None, || throughput(dir.path()));
    suite.run(9, "format round-trips", None, format_round_trips);
    if suite.failures > 0 {
        println!("{} criteria failed", suite.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
