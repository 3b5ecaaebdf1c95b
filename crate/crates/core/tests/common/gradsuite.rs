//! Central finite-difference checks of every differentiable operation, from
//! single tape ops up to a short unrolled regularizer. Each check returns the
//! worst relative error over its probed coordinates.

use std::sync::Arc;

use nlmvs_core::features::{cost_map, init_feature_params, view_weight};
use nlmvs_core::regularizer::{
    block_update, depth_attention, init_regularizer_params, CellVars, LstmCell, BLOCK_CHANNELS, COST_CHANNELS,
    REG_CHANNELS,
};
use nlmvs_core::stream::unrolled_logits;
use nlmvs_core::{CostVolume, Direction, FeatureConfig, ParameterStore, Regularizer, RegularizerConfig, Tensor};
use nlmvs_tensor::{Conv2dOpts, GradCheck, GradReport, PoolMode, Result, SampleGrid, Tape, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];
pub const TOLERANCE: f64 = 1e-4;

/// `sum(out * R)` with a fixed pseudo-random `R`, so every output element
/// carries a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let r = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    let p = tape.mul(v, r)?;
    tape.sum(p)
}

fn lift<T>(r: nlmvs_core::Result<T>) -> Result<T> {
    r.map_err(|e| TensorError::Invalid {
        op: "model",
        detail: e.to_string(),
    })
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values in `+-[0.1, 1]`, keeping kinks away from the probe step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn inputs<F>(seed: u64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, f: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ins = make(&mut rng);
    GradCheck::default().inputs(&ins, &mut rng, f).unwrap()
}

fn params<F>(seed: u64, store: &ParameterStore<f64>, f: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    GradCheck::default().params(store, None, &mut rng, f).unwrap()
}

fn both(mut a: GradReport, b: GradReport) -> GradReport {
    a.merge(b);
    a
}

fn conv2d(seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    for (opts, k) in [
        (Conv2dOpts::same(3, 1), 3),
        (Conv2dOpts::same(3, 2), 3),
        (Conv2dOpts::strided(3, 2), 3),
        (Conv2dOpts::default(), 1),
    ] {
        rep.merge(inputs(
            seed,
            |r| vec![rand_t(&[2, 6, 6], r), rand_t(&[3, 2, k, k], r), rand_t(&[3], r)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), opts)?;
                project(t, y)
            },
        ));
    }
    rep
}

fn group_norm(seed: u64) -> GradReport {
    inputs(
        seed,
        |r| vec![rand_t(&[4, 3, 3], r), rand_t(&[4], r), rand_t(&[4], r)],
        |t, v| {
            let y = t.group_norm(v[0], 2, v[1], v[2])?;
            project(t, y)
        },
    )
}

fn activations(seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    rep.merge(inputs(seed, |r| vec![rand_t(&[3, 4], r)], |t, v| {
        let y = t.sigmoid(v[0])?;
        project(t, y)
    }));
    rep.merge(inputs(seed, |r| vec![rand_t(&[3, 4], r)], |t, v| {
        let y = t.tanh(v[0])?;
        project(t, y)
    }));
    rep.merge(inputs(seed, |r| vec![away_from_zero(&[3, 4], r)], |t, v| {
        let y = t.relu(v[0])?;
        project(t, y)
    }));
    rep.merge(inputs(seed, |r| vec![rand_t(&[5, 2, 3], r)], |t, v| {
        let y = t.softmax_depth(v[0])?;
        project(t, y)
    }));
    rep
}

fn elementwise(seed: u64) -> GradReport {
    inputs(
        seed,
        |r| vec![rand_t(&[2, 3, 3], r), rand_t(&[2, 3, 3], r), rand_t(&[1, 3, 3], r)],
        |t, v| {
            let a = t.mul(v[0], v[1])?;
            let b = t.sub(a, v[1])?;
            let c = t.square(b)?;
            let d = t.mul_channels(c, v[2])?;
            let e = t.add_scalar(d, 0.3)?;
            let f = t.scale(e, -1.7)?;
            let g = t.add(f, v[0])?;
            project(t, g)
        },
    )
}

fn structural(seed: u64) -> GradReport {
    inputs(
        seed,
        |r| vec![rand_t(&[2, 4, 5], r), rand_t(&[3, 4, 5], r)],
        |t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            let n = t.narrow(c, 1, 3)?;
            let cr = t.crop(n, 1, 2, 2, 3)?;
            let s0 = t.crop(v[0], 0, 0, 2, 3)?;
            let s1 = t.crop(v[1], 2, 1, 2, 3)?;
            let s1 = t.narrow(s1, 0, 2)?;
            let st = t.stack_depth(&[s0, s1, s0])?;
            let rs = t.reshape(st, &[6, 2, 3])?;
            let cat = t.concat(&[rs, cr])?;
            project(t, cat)
        },
    )
}

fn pooling(seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    for mode in [PoolMode::Max, PoolMode::Avg] {
        rep.merge(inputs(seed, |r| vec![rand_t(&[3, 4, 2, 3], r)], |t, v| {
            let y = t.pool_depth(v[0], mode)?;
            project(t, y)
        }));
    }
    rep
}

fn resize(seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    for (oh, ow) in [(8, 10), (2, 3), (5, 5)] {
        rep.merge(inputs(seed, |r| vec![rand_t(&[2, 4, 5], r)], |t, v| {
            let y = t.resize(v[0], oh, ow)?;
            project(t, y)
        }));
    }
    rep
}

fn sample(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let coords: Vec<(f64, f64)> = (0..20)
        .map(|_| (rng.gen_range(-1.0..6.0), rng.gen_range(-1.0..5.0)))
        .collect();
    let grid = Arc::new(SampleGrid::new(4, 5, coords).unwrap());
    inputs(seed, |r| vec![rand_t(&[2, 4, 5], r)], |t, v| {
        let (y, _) = t.sample(v[0], grid.clone())?;
        project(t, y)
    })
}

fn cell_store(cell: &LstmCell, seed: u64) -> ParameterStore<f64> {
    let mut store = ParameterStore::new();
    cell.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    store
}

fn lstm_step(seed: u64) -> GradReport {
    let cell = LstmCell::new("cell", 3, 4, false);
    let store = cell_store(&cell, seed);
    let (h, w) = (4, 4);
    let make = |r: &mut ChaCha8Rng| vec![rand_t(&[3, h, w], r), rand_t(&[4, h, w], r), rand_t(&[4, h, w], r)];
    let by_input = inputs(seed, make, |t, v| {
        let out = lift(cell.step(t, &store, v[0], CellVars { h: v[1], c: v[2] }, None))?;
        let s = t.concat(&[out.h, out.c])?;
        project(t, s)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let fixed = make(&mut rng);
    let by_param = params(seed, &store, |t, st| {
        let v: Vec<Var> = fixed.iter().map(|x| t.constant(x.clone())).collect();
        let out = lift(cell.step(t, st, v[0], CellVars { h: v[1], c: v[2] }, None))?;
        let s = t.concat(&[out.h, out.c])?;
        project(t, s)
    });
    both(by_input, by_param)
}

fn nonlocal_cell(seed: u64) -> GradReport {
    let cell = LstmCell::new("cell", 3, 4, true);
    let store = cell_store(&cell, seed);
    let (h, w) = (4, 4);
    let make = |r: &mut ChaCha8Rng| {
        vec![
            rand_t(&[3, h, w], r),
            rand_t(&[4, h, w], r),
            rand_t(&[4, h, w], r),
            rand_t(&[BLOCK_CHANNELS, h, w], r),
        ]
    };
    let by_input = inputs(seed, make, |t, v| {
        let out = lift(cell.step(t, &store, v[0], CellVars { h: v[1], c: v[2] }, Some(v[3])))?;
        let s = t.concat(&[out.h, out.c])?;
        project(t, s)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let fixed = make(&mut rng);
    let by_param = params(seed, &store, |t, st| {
        let v: Vec<Var> = fixed.iter().map(|x| t.constant(x.clone())).collect();
        let out = lift(cell.step(t, st, v[0], CellVars { h: v[1], c: v[2] }, Some(v[3])))?;
        let s = t.concat(&[out.h, out.c])?;
        project(t, s)
    });
    both(by_input, by_param)
}

fn block_store(seed: u64, block_size: usize) -> ParameterStore<f64> {
    let cfg = RegularizerConfig {
        block_size,
        fine_channels: 2,
        mid_channels: 2,
        coarse_channels: 2,
        ..RegularizerConfig::default()
    };
    let mut full = ParameterStore::new();
    init_regularizer_params(&mut full, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut store = ParameterStore::new();
    for name in full.names() {
        if name.starts_with("att.") || name.starts_with("block.") {
            store.insert(name, full.value(name).unwrap().clone()).unwrap();
        }
    }
    store
}

fn depth_attention_check(seed: u64) -> GradReport {
    let store = block_store(seed, 4);
    let (k, h, w) = (2, 4, 4);
    let make = |r: &mut ChaCha8Rng| vec![rand_t(&[COST_CHANNELS, k, h, w], r), rand_t(&[REG_CHANNELS, k, h, w], r)];
    let by_input = inputs(seed, make, |t, v| {
        let a = lift(depth_attention(t, &store, v[0], v[1]))?;
        project(t, a)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
    let fixed = make(&mut rng);
    let by_param = params(seed, &store, |t, st| {
        let v: Vec<Var> = fixed.iter().map(|x| t.constant(x.clone())).collect();
        let a = lift(depth_attention(t, st, v[0], v[1]))?;
        project(t, a)
    });
    both(by_input, by_param)
}

fn block_update_check(seed: u64) -> GradReport {
    let store = block_store(seed, 4);
    let (k, h, w) = (2, 4, 4);
    let make = |r: &mut ChaCha8Rng| {
        vec![
            rand_t(&[COST_CHANNELS, k, h, w], r),
            rand_t(&[BLOCK_CHANNELS, h, w], r),
            rand_t(&[BLOCK_CHANNELS, h, w], r),
        ]
    };
    let by_input = inputs(seed, make, |t, v| {
        let b = lift(block_update(t, &store, v[0], v[1], v[2]))?;
        project(t, b)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
    let fixed = make(&mut rng);
    let by_param = params(seed, &store, |t, st| {
        let v: Vec<Var> = fixed.iter().map(|x| t.constant(x.clone())).collect();
        let b = lift(block_update(t, st, v[0], v[1], v[2]))?;
        project(t, b)
    });
    both(by_input, by_param)
}

fn loss(seed: u64) -> GradReport {
    let targets = Arc::new(vec![Some(0), None, Some(3), Some(1), Some(2), None]);
    let a = inputs(seed, |r| vec![rand_t(&[4, 2, 3], r)], |t, v| {
        let lp = t.log_softmax_depth(v[0])?;
        t.pick_depth(lp, targets.clone(), -0.25)
    });
    let b = inputs(seed, |r| vec![rand_t(&[4, 2, 3], r)], |t, v| {
        let p = t.softmax_depth(v[0])?;
        t.neg_log_pick(p, targets.clone(), 0.25)
    });
    both(a, b)
}

fn cost_and_view_weight(seed: u64) -> GradReport {
    let cfg = FeatureConfig::default();
    let mut full = ParameterStore::new();
    init_feature_params(&mut full, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut store = ParameterStore::new();
    for name in full.names() {
        if name.starts_with("vw.") {
            store.insert(name, full.value(name).unwrap().clone()).unwrap();
        }
    }
    let (c, h, w) = (COST_CHANNELS, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 6);
    let masks: Vec<Tensor<f64>> = (0..2)
        .map(|_| Tensor::from_fn(&[1, h, w], |_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }))
        .collect();
    let make = |r: &mut ChaCha8Rng| vec![rand_t(&[c, h, w], r), rand_t(&[c, h, w], r), rand_t(&[c, h, w], r)];
    let run = |t: &mut Tape<f64>, st: &ParameterStore<f64>, v: &[Var]| -> Result<Var> {
        let mut weights = Vec::new();
        for &f in &v[1..] {
            let d = t.sub(f, v[0])?;
            weights.push(lift(view_weight(t, st, &cfg, d))?);
        }
        let cm = lift(cost_map(t, v[0], &v[1..], &weights, &masks))?;
        project(t, cm.cost)
    };
    let by_input = inputs(seed, make, |t, v| run(t, &store, v));
    let fixed = make(&mut rng);
    let by_param = params(seed, &store, |t, st| {
        let v: Vec<Var> = fixed.iter().map(|x| t.constant(x.clone())).collect();
        run(t, st, &v)
    });
    both(by_input, by_param)
}

/// Eight planes through a two-block regularizer and the depth loss,
/// against every regularizer parameter.
fn unrolled_regularizer(seed: u64) -> GradReport {
    let cfg = RegularizerConfig {
        block_size: 4,
        fine_channels: 2,
        mid_channels: 2,
        coarse_channels: 2,
        ..RegularizerConfig::default()
    };
    let mut store = ParameterStore::new();
    init_regularizer_params(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let (d, h, w) = (8, 4, 4);
    let vol = CostVolume::new((0..d).map(|_| Tensor::uniform(&[COST_CHANNELS, h, w], 0.0, 2.0, &mut rng)).collect())
        .unwrap();
    let targets = Arc::new((0..h * w).map(|_| Some(rng.gen_range(0..d as u32))).collect::<Vec<_>>());
    params(seed, &store, |t, st| {
        let reg = Regularizer::new(&cfg, st).unwrap();
        let logits = lift(unrolled_logits(t, &reg, &vol, &(), Direction::Forward))?;
        let lp = t.log_softmax_depth(logits)?;
        t.pick_depth(lp, targets.clone(), -1.0 / (h * w) as f64)
    })
}

pub type Check = (&'static str, fn(u64) -> GradReport);

pub const CHECKS: [Check; 15] = [
    ("conv2d", conv2d),
    ("group_norm", group_norm),
    ("activations", activations),
    ("elementwise", elementwise),
    ("structural", structural),
    ("pool_depth", pooling),
    ("bilinear_resize", resize),
    ("bilinear_sample", sample),
    ("lstm_step", lstm_step),
    ("nonlocal_cell", nonlocal_cell),
    ("depth_attention", depth_attention_check),
    ("block_update", block_update_check),
    ("depth_loss", loss),
    ("cost_map", cost_and_view_weight),
    ("unrolled_regularizer", unrolled_regularizer),
];
