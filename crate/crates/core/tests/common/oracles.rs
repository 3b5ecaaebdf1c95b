//! Library-versus-oracle comparisons at tiny shapes. Each returns the largest
//! absolute difference found.

use nalgebra::{Rotation3, Vector3};
use nlmvs_core::features::view_weight;
use nlmvs_core::regularizer::{
    block_update, depth_attention, init_regularizer_params, CellVars, LstmCell, BLOCK_CHANNELS, COST_CHANNELS,
    REG_CHANNELS,
};
use nlmvs_core::{sample_inverse_depth, Camera, CostSource, FeatureConfig, ModelConfig, ParameterStore, PlaneSweep};
use nlmvs_core::{RegularizerConfig, Tensor};
use nlmvs_tensor::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{block_step, cost, lstm_step, random_map, stereo_pair, warp, Map};

pub fn rotated_camera(size: usize, focal: f64, angle: f64, t: [f64; 3]) -> Camera {
    let c = (size as f64 - 1.0) / 2.0;
    let k = Camera::intrinsics(focal, focal, c, c);
    let r = Rotation3::from_euler_angles(0.01, angle, 0.0).into_inner();
    Camera::new(k, r, Vector3::from(t), size, size).unwrap()
}

/// Plane-sweep cost maps of a 3-view rig against warping by unprojection
/// and projection followed by the scalar cost loop, over `planes` planes.
pub fn sweep_cost_error(size: usize, planes: usize, seed: u64) -> f64 {
    // Sources are offset vertically too so that no sample lands exactly on
    // the last image row, where rounding would decide the inside mask.
    let (reference, _) = stereo_pair(8.0, size, 0.4);
    let right = rotated_camera(size, 8.0, -0.04, [-0.4, 0.05, 0.0]);
    let tilted = rotated_camera(size, 8.0, 0.05, [0.3, -0.2, 0.1]);
    let cameras = vec![reference.clone(), right, tilted];
    let model = ModelConfig::default();
    let store = model.init_params::<f64>(seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<Tensor<f64>> = (0..3)
        .map(|_| Tensor::uniform(&[COST_CHANNELS, size, size], -1.0, 1.0, &mut rng))
        .collect();
    let hyps = sample_inverse_depth(2.0, 10.0, planes).unwrap();
    let sweep = PlaneSweep::new(&store, &model.features, &cameras, &features, 0, &hyps).unwrap();
    let f0 = Map::from_tensor(&features[0]);
    let mut worst = 0.0f64;
    for plane in 0..hyps.len() {
        let mut tape = Tape::no_grad();
        let at = sweep.attach(&mut tape).unwrap();
        let got = sweep.cost(&mut tape, &at, plane).unwrap();
        let got = tape.value(got).clone();

        let d = hyps.values()[plane];
        let mut warped = Vec::new();
        let mut weights = Vec::new();
        let mut masks = Vec::new();
        for s in 1..3 {
            let (wm, mask) = warp(&Map::from_tensor(&features[s]), &reference, &cameras[s], d);
            let diff = wm.zip(&f0, |a, b| a - b);
            let mut t2 = Tape::no_grad();
            let dv = t2.constant(Tensor::new(&[COST_CHANNELS, size, size], diff.v.clone()).unwrap());
            let wv = view_weight(&mut t2, &store, &FeatureConfig::default(), dv).unwrap();
            weights.push(Map::from_tensor(t2.value(wv)));
            warped.push(wm);
            masks.push(mask);
        }
        worst = worst.max(cost(&f0, &warped, &weights, &masks).max_abs_diff(&got));
    }
    worst
}

/// `steps` non-local LSTM steps on `size x size` maps.
pub fn nonlocal_lstm_error(size: usize, steps: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = LstmCell::new("cell", 3, 2, true);
    let mut store = ParameterStore::new();
    cell.init(&mut store, &mut rng).unwrap();
    let (h, w) = (size, size);
    let mut oh = Map::zeros(2, h, w);
    let mut oc = Map::zeros(2, h, w);
    let mut th = Tensor::zeros(&[2, h, w]);
    let mut tc = Tensor::zeros(&[2, h, w]);
    let mut worst = 0.0f64;
    for _ in 0..steps {
        let x = random_map(3, h, w, &mut rng);
        let b = random_map(BLOCK_CHANNELS, h, w, &mut rng);
        let mut tape = Tape::no_grad();
        let prev = CellVars {
            h: tape.constant(th.clone()),
            c: tape.constant(tc.clone()),
        };
        let xv = tape.constant(x.clone());
        let bv = tape.constant(b.clone());
        let out = cell.step(&mut tape, &store, xv, prev, Some(bv)).unwrap();
        th = tape.value(out.h).clone();
        tc = tape.value(out.c).clone();
        let (nh, nc) = lstm_step(&store, "cell", &Map::from_tensor(&x), &oh, &oc, Some(&Map::from_tensor(&b)));
        oh = nh;
        oc = nc;
        worst = worst.max(oh.max_abs_diff(&th)).max(oc.max_abs_diff(&tc));
    }
    worst
}

/// Block attention and block-state recurrence over `planes` planes in
/// blocks of `block_size`, buffering every other plane.
pub fn block_recurrence_error(size: usize, block_size: usize, planes: usize, seed: u64) -> f64 {
    let cfg = RegularizerConfig {
        block_size,
        fine_channels: 4,
        mid_channels: 4,
        coarse_channels: 4,
        ..RegularizerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    init_regularizer_params(&mut store, &cfg, &mut rng).unwrap();
    let (h, w, k) = (size, size, cfg.samples_per_block());
    let mut tb = Tensor::zeros(&[BLOCK_CHANNELS, h, w]);
    let mut ob = Map::zeros(BLOCK_CHANNELS, h, w);
    let mut worst = 0.0f64;
    for _ in 0..planes / block_size {
        let raw: Vec<Tensor<f64>> = (0..k).map(|_| random_map(COST_CHANNELS, h, w, &mut rng)).collect();
        let reg: Vec<Tensor<f64>> = (0..k).map(|_| random_map(REG_CHANNELS, h, w, &mut rng)).collect();
        let mut tape = Tape::no_grad();
        let rv: Vec<_> = raw.iter().map(|t| tape.constant(t.clone())).collect();
        let gv: Vec<_> = reg.iter().map(|t| tape.constant(t.clone())).collect();
        let rs = tape.stack_depth(&rv).unwrap();
        let gs = tape.stack_depth(&gv).unwrap();
        let att = depth_attention(&mut tape, &store, rs, gs).unwrap();
        let prev = tape.constant(tb.clone());
        let b = block_update(&mut tape, &store, rs, att, prev).unwrap();

        let rm: Vec<Map> = raw.iter().map(Map::from_tensor).collect();
        let gm: Vec<Map> = reg.iter().map(Map::from_tensor).collect();
        let (oatt, nb) = block_step(&store, &rm, &gm, &ob);
        worst = worst.max(oatt.max_abs_diff(tape.value(att))).max(nb.max_abs_diff(tape.value(b)));
        ob = nb;
        tb = tape.value(b).clone();
    }
    worst
}
