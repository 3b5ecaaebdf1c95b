//! Scalar-loop oracles and fixtures shared by the integration tests and the
//! acceptance runner. Not every test binary uses every helper.
#![allow(dead_code)]

use nalgebra::{Matrix3, Point2, Vector3};
use nlmvs_core::{Camera, DepthMap, ParameterStore, PointCloud, Primitive, SceneSpec, Tensor};
use rand::Rng;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain `[C][H][W]` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, v: vec![0.0; c * h * w] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Self {
            c: s[0],
            h: s[1],
            w: s[2],
            v: t.data().to_vec(),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, val: f64) {
        let i = (c * self.h + y) * self.w + x;
        self.v[i] = val;
    }

    pub fn concat(parts: &[&Map]) -> Map {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut out = Map::zeros(parts.iter().map(|p| p.c).sum(), h, w);
        out.v.clear();
        for p in parts {
            out.v.extend_from_slice(&p.v);
        }
        out
    }

    pub fn channels(&self, start: usize, n: usize) -> Map {
        let hw = self.h * self.w;
        Map {
            c: n,
            h: self.h,
            w: self.w,
            v: self.v[start * hw..(start + n) * hw].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map {
            v: self.v.iter().map(|&x| f(x)).collect(),
            ..self.clone()
        }
    }

    pub fn zip(&self, o: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        assert_eq!((self.c, self.h, self.w), (o.c, o.h, o.w));
        Map {
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
            ..self.clone()
        }
    }

    pub fn max_abs_diff(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!(self.v.len(), t.len());
        self.v.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Zero-padded "same" cross-correlation with odd kernel `k`.
pub fn conv_same(x: &Map, store: &ParameterStore<f64>, name: &str) -> Map {
    let w = store.value(&format!("{name}.weight")).unwrap();
    let b = store.value(&format!("{name}.bias"));
    let s = w.shape();
    let (cout, cin, k) = (s[0], s[1], s[2]);
    assert_eq!(cin, x.c, "{name}: input channels");
    let pad = (k / 2) as isize;
    let mut out = Map::zeros(cout, x.h, x.w);
    for co in 0..cout {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = b.map_or(0.0, |b| b.data()[co]);
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad;
                            let ix = xx as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            acc += w.data()[((co * cin + ci) * k + ky) * k + kx] * x.at(ci, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(co, y, xx, acc);
            }
        }
    }
    out
}

/// One convolutional LSTM step with gate order `[F, I, C~, O]`; with a
/// block state `b` the cell also adds `sigmoid(conv([x, b])) * proj(b)`.
pub fn lstm_step(
    store: &ParameterStore<f64>,
    name: &str,
    x: &Map,
    h: &Map,
    c: &Map,
    b: Option<&Map>,
) -> (Map, Map) {
    let n = h.c;
    let z = conv_same(&Map::concat(&[x, h]), store, &format!("{name}.gates"));
    let f = z.channels(0, n).map(sigmoid);
    let i = z.channels(n, n).map(sigmoid);
    let g = z.channels(2 * n, n).map(f64::tanh);
    let o = z.channels(3 * n, n).map(sigmoid);
    let mut c_new = f.zip(c, |a, b| a * b).zip(&i.zip(&g, |a, b| a * b), |a, b| a + b);
    if let Some(b) = b {
        let a = conv_same(&Map::concat(&[x, b]), store, &format!("{name}.attn")).map(sigmoid);
        let p = conv_same(b, store, &format!("{name}.proj"));
        c_new = c_new.zip(&a.zip(&p, |a, b| a * b), |a, b| a + b);
    }
    let h_new = o.zip(&c_new.map(f64::tanh), |a, b| a * b);
    (h_new, c_new)
}

/// Block attention and block-state update from `k` raw `[32,H,W]` and
/// regularized `[8,H,W]` samples.
pub fn block_step(store: &ParameterStore<f64>, raw: &[Map], reg: &[Map], prev: &Map) -> (Map, Map) {
    let k = raw.len();
    let (h, w) = (prev.h, prev.w);
    let comp: Vec<Map> = raw.iter().zip(reg).map(|(a, b)| Map::concat(&[a, b])).collect();
    let cc = comp[0].c;
    let mut pooled = Map::zeros(2 * cc, h, w);
    for ch in 0..cc {
        for y in 0..h {
            for x in 0..w {
                let vals: Vec<f64> = comp.iter().map(|m| m.at(ch, y, x)).collect();
                let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let avg = vals.iter().sum::<f64>() / k as f64;
                pooled.set(ch, y, x, mx);
                pooled.set(cc + ch, y, x, avg);
            }
        }
    }
    let a = conv_same(&pooled, store, "att.conv");
    let r = conv_same(&a, store, "att.res.conv1").map(|v| v.max(0.0));
    let r = conv_same(&r, store, "att.res.conv2");
    let att = a.zip(&r, |x, y| x + y);
    // Raw samples folded channel-major: channel `c * k + j` is sample `j` of channel `c`.
    let rc = raw[0].c;
    let mut folded = Map::zeros(rc * k, h, w);
    for c in 0..rc {
        for (j, m) in raw.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    folded.set(c * k + j, y, x, m.at(c, y, x));
                }
            }
        }
    }
    let z = conv_same(&Map::concat(&[&folded, prev]), store, "block.gates");
    let n = prev.c;
    let gi = z.channels(0, n).map(sigmoid);
    let gf = z.channels(n, n).map(sigmoid);
    let b = gi
        .zip(&att.map(f64::tanh), |a, b| a * b)
        .zip(&gf.zip(prev, |a, b| a * b), |a, b| a + b);
    (att, b)
}

/// Bilinear warp of `src` into the reference frame through the plane at
/// reference depth `d`, built from unprojection and projection. Returns the
/// warped map and the inside mask.
pub fn warp(src: &Map, reference: &Camera, source: &Camera, d: f64) -> (Map, Vec<bool>) {
    let (h, w) = (reference.height(), reference.width());
    let mut out = Map::zeros(src.c, h, w);
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let world = reference.unproject(Point2::new(x as f64, y as f64), d).unwrap();
            let Ok((q, _)) = source.project(&world) else { continue };
            let inside = q.x >= 0.0 && q.y >= 0.0 && q.x <= (src.w - 1) as f64 && q.y <= (src.h - 1) as f64;
            if !inside {
                continue;
            }
            mask[y * w + x] = true;
            let (x0, y0) = (q.x.floor() as usize, q.y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(src.w - 1), (y0 + 1).min(src.h - 1));
            let (fx, fy) = (q.x - x0 as f64, q.y - y0 as f64);
            for c in 0..src.c {
                let v = (1.0 - fx) * (1.0 - fy) * src.at(c, y0, x0)
                    + fx * (1.0 - fy) * src.at(c, y0, x1)
                    + (1.0 - fx) * fy * src.at(c, y1, x0)
                    + fx * fy * src.at(c, y1, x1);
                out.set(c, y, x, v);
            }
        }
    }
    (out, mask)
}

/// `sum_i (1 + w_i) (F_i - F_0)^2 / n` over the views that see each pixel.
pub fn cost(reference: &Map, warped: &[Map], weights: &[Map], masks: &[Vec<bool>]) -> Map {
    let mut out = Map::zeros(reference.c, reference.h, reference.w);
    for y in 0..reference.h {
        for x in 0..reference.w {
            let p = y * reference.w + x;
            let n = masks.iter().filter(|m| m[p]).count();
            if n == 0 {
                continue;
            }
            for c in 0..reference.c {
                let mut acc = 0.0;
                for i in 0..warped.len() {
                    if masks[i][p] {
                        let wt = weights[i].at(c.min(weights[i].c - 1), y, x);
                        acc += (1.0 + wt) * (warped[i].at(c, y, x) - reference.at(c, y, x)).powi(2);
                    }
                }
                out.set(c, y, x, acc / n as f64);
            }
        }
    }
    out
}

pub fn random_map<R: Rng>(c: usize, h: usize, w: usize, rng: &mut R) -> Tensor<f64> {
    Tensor::uniform(&[c, h, w], -1.0, 1.0, rng)
}

/// Two cameras with parallel axes, the second shifted by `baseline` along x.
pub fn stereo_pair(focal: f64, size: usize, baseline: f64) -> (Camera, Camera) {
    let c = (size as f64 - 1.0) / 2.0;
    let k = Camera::intrinsics(focal, focal, c, c);
    let reference = Camera::reference(k, size, size).unwrap();
    let source = Camera::new(k, Matrix3::identity(), Vector3::new(-baseline, 0.0, 0.0), size, size).unwrap();
    (reference, source)
}

/// The 5-view 64x64 toy scene: a slanted backdrop and a sphere in front.
pub fn toy_spec() -> SceneSpec {
    SceneSpec {
        num_views: 5,
        height: 64,
        width: 64,
        baseline: 2.0,
        d_min: 4.0,
        d_max: 10.0,
        primitives: vec![
            Primitive::Plane {
                point: [0.0, 0.0, 8.5],
                normal: [0.2, 0.1, -1.0],
            },
            Primitive::Sphere {
                center: [0.5, -0.3, 5.5],
                radius: 1.0,
            },
        ],
        ..SceneSpec::default()
    }
}

/// A fronto-parallel plane filling every view.
pub fn plane_spec(num_views: usize, size: usize, depth: f64) -> SceneSpec {
    SceneSpec {
        num_views,
        height: size,
        width: size,
        baseline: 0.5,
        d_min: depth * 0.5,
        d_max: depth * 2.0,
        look_at_depth: Some(depth),
        primitives: vec![Primitive::Plane {
            point: [0.0, 0.0, depth],
            normal: [0.0, 0.0, -1.0],
        }],
        ..SceneSpec::default()
    }
}

/// Ground-truth depth maps with relative noise of up to `noise` on every
/// pixel, confidences uniform in `[0.2, 1)` and a fraction `outliers` of the
/// valid pixels replaced by uniform depths in `[d_min, d_max]`. Also returns
/// the outlier mask of each view.
pub fn corrupted_depths<R: Rng>(
    gt: &[DepthMap],
    d_min: f64,
    d_max: f64,
    noise: f64,
    outliers: f64,
    rng: &mut R,
) -> (Vec<DepthMap>, Vec<Vec<bool>>) {
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for m in gt {
        let mut depth = m.depth.clone();
        let mut prob = vec![0.0; m.len()];
        let mut mask = vec![false; m.len()];
        for i in 0..m.len() {
            if m.prob[i] == 0.0 {
                depth[i] = 0.0;
                continue;
            }
            prob[i] = rng.gen_range(0.2..1.0);
            if rng.gen_bool(outliers) {
                depth[i] = rng.gen_range(d_min..d_max);
                mask[i] = true;
            } else {
                depth[i] *= 1.0 + rng.gen_range(-noise..noise);
            }
        }
        maps.push(DepthMap::new(m.height, m.width, depth, prob).unwrap());
        masks.push(mask);
    }
    (maps, masks)
}

/// Inlier and outlier counts of a fused cloud.
pub fn count_outliers(cloud: &PointCloud, masks: &[Vec<bool>], width: usize) -> (usize, usize) {
    let out = cloud
        .provenance
        .iter()
        .filter(|p| masks[p.view][p.y * width + p.x])
        .count();
    (cloud.len() - out, out)
}
pub mod gradsuite;
pub mod oracles;
