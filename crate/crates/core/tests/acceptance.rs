//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit status
//! if any fails. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p nlmvs-core --test acceptance -- 4 6`.

mod common;

use std::alloc::{GlobalAlloc, Layout, System};
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use common::gradsuite::{CHECKS, SEEDS, TOLERANCE};
use common::oracles::{self, rotated_camera};
use common::{corrupted_depths, count_outliers, stereo_pair};
use nalgebra::{Point2, Vector3};
use nlmvs_core::inference::infer_with_features;
use nlmvs_core::metrics::default_cap;
use nlmvs_core::stream::stream_logits;
use nlmvs_core::sweep::compute_features;
use nlmvs_core::{
    consistency_errors, dynamic_accept, dynamic_threshold, evaluate, fuse, generate_scene, infer_depth,
    plane_homography, sample_inverse_depth, train, ConsistencyRecord, CostVolume, DepthMap, Direction, FusionConfig,
    GridIndex, ModelConfig, ParameterStore, Regularizer, RegularizerConfig, SceneSpec, Tensor, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tracks live heap bytes and their high-water mark.
struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn grow(n: usize) {
    let now = LIVE.fetch_add(n, Ordering::Relaxed) + n;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
            grow(new_size);
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Peak heap growth above the live bytes at entry while `f` runs.
fn peak_growth<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = LIVE.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let r = f();
    (r, PEAK.load(Ordering::Relaxed).saturating_sub(base))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "", 0u64);
    let mut checked = 0;
    for (name, check) in CHECKS {
        for seed in SEEDS {
            let rep = check(seed);
            checked += rep.checked;
            if rep.max_rel_err > worst.0 || rep.checked == 0 {
                worst = (if rep.checked == 0 { f64::INFINITY } else { rep.max_rel_err }, name, seed);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < TOLERANCE && secs < 300.0,
        format!(
            "max relative error {:.2e} ({} seed {}) over {checked} coordinates, {} checks x {} seeds, {secs:.1} s",
            worst.0,
            worst.1,
            worst.2,
            CHECKS.len(),
            SEEDS.len()
        ),
    )
}

fn formula_oracles() -> Outcome {
    let cost = oracles::sweep_cost_error(8, 8, 1);
    let lstm = oracles::nonlocal_lstm_error(8, 8, 2);
    let block = oracles::block_recurrence_error(8, 4, 8, 3);
    let worst = cost.max(lstm).max(block);
    outcome(
        worst < 1e-6,
        format!("max abs error: cost map {cost:.1e}, non-local LSTM {lstm:.1e}, block recurrence {block:.1e}"),
    )
}

fn nonlocal_degeneration() -> Outcome {
    let base = RegularizerConfig::default();
    let store = ModelConfig::default().init_params::<f64>(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vol = CostVolume::new(
        (0..24)
            .map(|_| Tensor::uniform(&[32, 16, 16], 0.0, 2.0, &mut rng))
            .collect(),
    )
    .unwrap();
    let zeroed = RegularizerConfig {
        zero_block_state: true,
        ..base.clone()
    };
    let vanilla = RegularizerConfig {
        nonlocal: false,
        ..base.clone()
    };
    let mut mismatches = 0;
    let mut live_differs = true;
    for dir in [Direction::Forward, Direction::Backward] {
        let a = stream_logits(&Regularizer::new(&zeroed, &store).unwrap(), &vol, dir).unwrap();
        let b = stream_logits(&Regularizer::new(&vanilla, &store).unwrap(), &vol, dir).unwrap();
        let live = stream_logits(&Regularizer::new(&base, &store).unwrap(), &vol, dir).unwrap();
        mismatches += a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
        live_differs &= live.data() != b.data();
    }
    outcome(
        mismatches == 0 && live_differs,
        format!("{mismatches} bitwise mismatches over 2 x 24 planes of 16x16; live block state differs: {live_differs}"),
    )
}

fn streaming_memory() -> Outcome {
    let spec = SceneSpec {
        num_views: 3,
        ..common::toy_spec()
    };
    let s = generate_scene::<f32>(&spec).unwrap();
    let model = ModelConfig::default();
    let store = model.init_params::<f32>(6).unwrap();
    let feats = compute_features(&store, &model.features, &s.scene.views).unwrap();
    let run = |d: usize| {
        let hyps = sample_inverse_depth(s.scene.d_min, s.scene.d_max, d).unwrap();
        let (r, bytes) = peak_growth(|| infer_with_features(&store, &model, &s.scene, &feats, 0, &hyps).unwrap());
        drop(r);
        bytes
    };
    // Warm-up so that thread-local scratch buffers count in the baseline.
    run(8);
    let small = run(64);
    let large = run(256);
    let ratio = large as f64 / small as f64;
    outcome(
        ratio <= 1.3,
        format!(
            "peak heap growth {:.2} MiB at D=64, {:.2} MiB at D=256, ratio {ratio:.3} (64x64, s=8)",
            small as f64 / (1 << 20) as f64,
            large as f64 / (1 << 20) as f64
        ),
    )
}

fn toy_reconstruction() -> Outcome {
    let start = Instant::now();
    let planes = 32;
    let s = generate_scene::<f32>(&common::toy_spec()).unwrap();
    let model = ModelConfig::default();
    let mut store: ParameterStore<f32> = model.init_params(1).unwrap();
    // View 0 is held out: it serves as a source view during training but
    // never as a supervised reference.
    let mut train_scene = s.scene.clone();
    train_scene.gt_depths[0] = None;
    let cfg = TrainConfig {
        epochs: 50,
        planes,
        ..TrainConfig::default()
    };
    let losses = train(&mut store, &model, &cfg, &[train_scene], 0, |_, _, _| Ok(())).unwrap();
    let steps = cfg.epochs * 4;

    let hyps = sample_inverse_depth(s.scene.d_min, s.scene.d_max, planes).unwrap();
    let estimates: Vec<_> = (0..s.scene.len())
        .map(|v| infer_depth(&store, &model, &s.scene, v, planes).unwrap())
        .collect();
    let gt = s.scene.gt_depths[0].as_ref().unwrap();
    let (mut within, mut valid) = (0, 0);
    for i in 0..gt.len() {
        let d = gt.depth[i];
        if gt.prob[i] > 0.5 && d >= hyps.d_min() && d <= hyps.d_max() {
            valid += 1;
            if (estimates[0].plane[i] as i64 - hyps.nearest_index(d) as i64).abs() <= 1 {
                within += 1;
            }
        }
    }
    let frac = within as f64 / valid as f64;

    let mut gt_depths: Vec<f64> = s
        .scene
        .gt_depths
        .iter()
        .flatten()
        .flat_map(|m| m.depth.iter().zip(&m.prob).filter(|(_, &p)| p > 0.5).map(|(&d, _)| d))
        .collect();
    gt_depths.sort_by(f64::total_cmp);
    let median = gt_depths[gt_depths.len() / 2];
    let spacing = hyps.spacing_at(median);
    let cap = default_cap(&hyps, median);

    let cams = s.scene.cameras();
    let images: Vec<Vec<f64>> = s.scene.views.iter().map(|v| v.image.data().iter().map(|&x| x as f64).collect()).collect();
    let image_refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let maps: Vec<DepthMap> = estimates.into_iter().map(|e| e.map).collect();
    let run = |cfg: &FusionConfig| {
        let fused = fuse(&cams, &image_refs, &maps, cfg).unwrap();
        let m = evaluate(&fused.cloud.points, &s.gt_cloud.points, cap).unwrap();
        (fused.cloud.len(), m)
    };
    // The depth bound eta(mu) = mu / 1300 is about mu half-plane spacings
    // for 512 planes over a 425..935 depth range. At 32 planes winner-take-all
    // depths are ~25x coarser, so the divisor is rescaled to keep eta(1) at
    // half the relative plane spacing at the median depth. Epsilon and tau
    // keep their constants.
    let scaled = FusionConfig {
        depth_divisor: 2.0 * median / spacing,
        ..FusionConfig::default()
    };
    let (literal_points, literal) = run(&FusionConfig::default());
    let (points, m) = run(&scaled);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        frac >= 0.9 && m.overall < 3.0 * spacing && secs < 900.0,
        format!(
            "{steps} steps (loss {:.3} -> {:.3}); held-out view: {:.1}% of {valid} pixels within +-1 plane; \
             eta divisor {:.1}: {points} points, overall {:.4} vs limit {:.4} (accuracy {:.4}, completeness {:.4}); \
             eta divisor 1300: {literal_points} points, overall {:.4}; {secs:.0} s",
            losses[0],
            losses[losses.len() - 1],
            100.0 * frac,
            scaled.depth_divisor,
            m.overall,
            3.0 * spacing,
            m.accuracy,
            m.completeness,
            literal.overall
        ),
    )
}

/// Smallest `mu` for which some subset of more than `mu` views passes the
/// `mu`-scaled error bounds while `theta` clears `tau(mu)`, by enumerating
/// every view subset.
fn brute_accept(theta: f64, records: &[ConsistencyRecord]) -> Option<usize> {
    let n = records.len();
    (1..=n).find(|&mu| {
        let eps = mu as f64 / 4.0;
        let eta = mu as f64 / 1300.0;
        let tau = 0.6 * ((mu as f64 - 10.0) / 8.0).exp();
        let subset_ok = (0u32..1 << n).any(|set| {
            set.count_ones() as usize > mu
                && (0..n).all(|v| set & (1 << v) == 0 || (records[v].valid && records[v].psi < eps && records[v].phi < eta))
        });
        subset_ok && theta > tau
    })
}

fn dynamic_fusion_law() -> Outcome {
    let cfg = FusionConfig::default();
    let exact = dynamic_threshold(10) == 0.6 && cfg.epsilon(4) == 1.0 && cfg.eta(13) == 0.01;
    let increasing = (1..64).all(|mu| dynamic_threshold(mu + 1) > dynamic_threshold(mu));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let mut accepted = 0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=9);
        let records: Vec<ConsistencyRecord> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.05) {
                    return ConsistencyRecord::INVALID;
                }
                // Values on the threshold grid exercise the strict bounds.
                let psi = if rng.gen_bool(0.2) {
                    rng.gen_range(1..=12) as f64 / 4.0
                } else {
                    2.0 * rng.gen_range(0.0f64..1.0).powi(3)
                };
                let phi = if rng.gen_bool(0.2) {
                    rng.gen_range(1..=12) as f64 / 1300.0
                } else {
                    0.006 * rng.gen_range(0.0f64..1.0).powi(3)
                };
                ConsistencyRecord::new(psi, phi)
            })
            .collect();
        let theta = if rng.gen_bool(0.2) {
            dynamic_threshold(rng.gen_range(1..=12))
        } else {
            rng.gen_range(0.0..1.0)
        };
        let got = dynamic_accept(theta, &records, &cfg);
        accepted += usize::from(got.is_some());
        mismatches += usize::from(got != brute_accept(theta, &records));
    }
    outcome(
        exact && increasing && mismatches == 0,
        format!(
            "tau(10) = {}, eps(4) = {}, eta(13) = {}, increasing: {increasing}; \
             {mismatches} mismatches in 10000 records ({accepted} accepted)",
            dynamic_threshold(10),
            cfg.epsilon(4),
            cfg.eta(13)
        ),
    )
}

fn dynamic_vs_fixed() -> Outcome {
    let s = generate_scene::<f64>(&common::toy_spec()).unwrap();
    let gt: Vec<DepthMap> = s.scene.gt_depths.iter().map(|m| m.clone().unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (maps, masks) = corrupted_depths(&gt, s.scene.d_min, s.scene.d_max, 1e-4, 0.1, &mut rng);
    let cams = s.scene.cameras();
    let images: Vec<&[f64]> = s.scene.views.iter().map(|v| v.image.data()).collect();
    let dynamic = fuse(&cams, &images, &maps, &FusionConfig::default()).unwrap();
    let fixed = fuse(&cams, &images, &maps, &FusionConfig::fixed(0.35)).unwrap();
    let (di, dout) = count_outliers(&dynamic.cloud, &masks, 64);
    let (fi, fout) = count_outliers(&fixed.cloud, &masks, 64);
    let frac = |o: usize, n: usize| o as f64 / n.max(1) as f64;
    let (df, ff) = (frac(dout, dynamic.cloud.len()), frac(fout, fixed.cloud.len()));
    outcome(
        di >= fi && df <= ff + 0.01,
        format!(
            "inliers fused: dynamic {di}, fixed {fi}; outlier fraction: dynamic {:.2}%, fixed {:.2}%",
            100.0 * df,
            100.0 * ff
        ),
    )
}

fn geometry_suite() -> Outcome {
    // Identity homography.
    let (a, _) = stereo_pair(30.0, 16, 1.0);
    let h = plane_homography(&a, &a, 3.7).unwrap();
    let mut identity = 0.0f64;
    for y in 0..16 {
        for x in 0..16 {
            let p = h * Vector3::new(x as f64, y as f64, 1.0);
            identity = identity.max((p.x / p.z - x as f64).abs()).max((p.y / p.z - y as f64).abs());
        }
    }
    // Pure x translation: disparity f b / d.
    let (f, b) = (40.0, 0.5);
    let (reference, source) = stereo_pair(f, 32, b);
    let mut disparity = 0.0f64;
    for d in [1.0, 2.5, 7.0, 20.0] {
        let h = plane_homography(&reference, &source, d).unwrap();
        for (x, y) in [(10.0, 12.0), (0.0, 0.0), (31.0, 5.5)] {
            let p = h * Vector3::new(x, y, 1.0);
            disparity = disparity.max((p.x / p.z - (x - f * b / d)).abs()).max((p.y / p.z - y).abs());
        }
    }
    // Round trip on 1000 random pixels and depths.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut round_px = 0.0f64;
    let mut round_depth = 0.0f64;
    for _ in 0..1000 {
        let cam = rotated_camera(64, 50.0, rng.gen_range(-0.3..0.3), [0.3, -0.1, 0.2]);
        let (x, y, d) = (rng.gen_range(0.0..63.0), rng.gen_range(0.0..63.0), rng.gen_range(0.5..50.0));
        let (p, depth) = cam.project(&cam.unproject(Point2::new(x, y), d).unwrap()).unwrap();
        round_px = round_px.max((p.x - x).abs().max((p.y - y).abs()));
        round_depth = round_depth.max((depth - d).abs() / d);
    }
    // Ground-truth depths across view pairs, from source pixel centres.
    let spec = common::toy_spec();
    let s = generate_scene::<f64>(&spec).unwrap();
    let cams = s.scene.cameras();
    let maps: Vec<DepthMap> = s.scene.gt_depths.iter().map(|m| m.clone().unwrap()).collect();
    let (mut psi, mut phi, mut pairs) = (0.0f64, 0.0f64, 0usize);
    for r in 0..cams.len() {
        for src in (0..cams.len()).filter(|&v| v != r) {
            for y in 0..spec.height {
                for x in 0..spec.width {
                    if maps[src].prob_at(y, x) == 0.0 {
                        continue;
                    }
                    let q = Point2::new(x as f64, y as f64);
                    let world = cams[src].unproject(q, maps[src].depth_at(y, x)).unwrap();
                    let Ok((p, d)) = cams[r].project(&world) else { continue };
                    if !cams[r].contains(p) {
                        continue;
                    }
                    let rec = consistency_errors(p, d, &cams[r], &cams[src], &maps[src]);
                    psi = psi.max(if rec.valid { rec.psi } else { f64::INFINITY });
                    phi = phi.max(if rec.valid { rec.phi } else { f64::INFINITY });
                    pairs += 1;
                }
            }
        }
    }
    let px = identity.max(disparity).max(round_px).max(psi);
    let rel = round_depth.max(phi);
    outcome(
        px < 1e-4 && rel < 1e-6 && pairs > 0,
        format!(
            "px errors: identity {identity:.1e}, disparity {disparity:.1e}, round trip {round_px:.1e}, \
             cross-view {psi:.1e}; relative depth errors: round trip {round_depth:.1e}, cross-view {phi:.1e} \
             over {pairs} pixel pairs"
        ),
    )
}

fn metrics_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cloud: Vec<[f64; 3]> = (0..5000)
        .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(4.0..4.5)])
        .collect();
    let m = evaluate(&cloud, &cloud, 0.5).unwrap();
    let zero = m.accuracy == 0.0 && m.completeness == 0.0 && m.overall == 0.0;

    let points: Vec<[f64; 3]> = (0..10_000)
        .map(|i| {
            // Half clustered on a sphere, half spread through a box.
            if i % 2 == 0 {
                let (t, p): (f64, f64) = (rng.gen_range(0.0..3.14), rng.gen_range(0.0..6.28));
                [t.sin() * p.cos(), t.sin() * p.sin(), 5.0 + t.cos()]
            } else {
                [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(2.0..9.0)]
            }
        })
        .collect();
    let index = GridIndex::new(points.clone());
    let mut mismatches = 0;
    for k in 0..2000 {
        let q = if k % 4 == 0 {
            points[rng.gen_range(0..points.len())]
        } else {
            [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..12.0)]
        };
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            if d < best.1 {
                best = (i, d);
            }
        }
        if index.nearest(&q) != Some(best) {
            mismatches += 1;
        }
    }
    outcome(
        zero && mismatches == 0,
        format!(
            "identical clouds: {}/{}/{}; grid vs brute force: {mismatches} mismatches in 2000 queries on 10000 points",
            m.accuracy, m.completeness, m.overall
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 9] = [
    (1, "gradient suite", gradient_suite),
    (2, "formula oracles", formula_oracles),
    (3, "non-local degeneration", nonlocal_degeneration),
    (4, "streaming memory", streaming_memory),
    (5, "end-to-end toy reconstruction", toy_reconstruction),
    (6, "dynamic fusion law", dynamic_fusion_law),
    (7, "dynamic vs fixed fusion", dynamic_vs_fixed),
    (8, "geometry suite", geometry_suite),
    (9, "metrics", metrics_suite),
];

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed: Duration = start.elapsed();
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {n} {}: {name}: {} [{:.1} s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
