//! Plane-ordered driving of the regularizer over a cost-map source.

use std::ops::Range;

use nlmvs_tensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MvsError, Result};
use crate::regularizer::{Regularizer, RegularizerState, StateVars};

/// Order in which depth planes are fed to the recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Near to far.
    Forward,
    /// Far to near.
    Backward,
}

/// Maps stream positions to planes. The stream is padded to a whole number
/// of blocks by repeating its last plane; padded positions produce no output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamOrder {
    planes: usize,
    len: usize,
    direction: Direction,
}

impl StreamOrder {
    pub fn new(planes: usize, block_size: usize, direction: Direction) -> Result<Self> {
        if planes == 0 || block_size == 0 {
            return Err(MvsError::Invalid(format!(
                "stream of {planes} planes with block size {block_size}"
            )));
        }
        Ok(Self {
            planes,
            len: planes.div_ceil(block_size) * block_size,
            direction,
        })
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    /// Stream length including padding.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn plane(&self, pos: usize) -> usize {
        let k = pos.min(self.planes - 1);
        match self.direction {
            Direction::Forward => k,
            Direction::Backward => self.planes - 1 - k,
        }
    }

    pub fn is_real(&self, pos: usize) -> bool {
        pos < self.planes
    }
}

/// Producer of per-plane cost maps `[32, H, W]`.
pub trait CostSource<T: Scalar> {
    /// Per-tape handles, e.g. features placed on the tape.
    type Attached;

    fn num_planes(&self) -> usize;

    /// `(height, width)` of the cost maps.
    fn size(&self) -> (usize, usize);

    fn attach(&self, tape: &mut Tape<T>) -> Result<Self::Attached>;

    fn cost(&self, tape: &mut Tape<T>, at: &Self::Attached, plane: usize) -> Result<Var>;
}

/// Cost maps held in memory.
#[derive(Debug, Clone)]
pub struct CostVolume<T> {
    maps: Vec<Tensor<T>>,
}

impl<T: Scalar> CostVolume<T> {
    pub fn new(maps: Vec<Tensor<T>>) -> Result<Self> {
        let Some(first) = maps.first() else {
            return Err(MvsError::Invalid("empty cost volume".into()));
        };
        let shape = first.shape().to_vec();
        if shape.len() != 3 || maps.iter().any(|m| m.shape() != &shape[..]) {
            return Err(MvsError::Invalid("cost maps must share one [C,H,W] shape".into()));
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[Tensor<T>] {
        &self.maps
    }
}

impl<T: Scalar> CostSource<T> for CostVolume<T> {
    type Attached = ();

    fn num_planes(&self) -> usize {
        self.maps.len()
    }

    fn size(&self) -> (usize, usize) {
        self.maps[0].hw()
    }

    fn attach(&self, _tape: &mut Tape<T>) -> Result<()> {
        Ok(())
    }

    fn cost(&self, tape: &mut Tape<T>, _at: &(), plane: usize) -> Result<Var> {
        Ok(tape.constant(self.maps[plane].clone()))
    }
}

/// Memory observed while streaming.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamStats {
    pub steps: usize,
    pub peak_tape_bytes: usize,
    pub peak_state_bytes: usize,
}

/// Runs the recurrence without gradients, one short-lived tape per plane, and
/// hands each real plane's logit map `[1, H, W]` to `sink` in stream order.
/// Memory stays bounded by one plane's activations plus the recurrent state.
pub fn regularize_stream<T, S, F>(
    reg: &Regularizer<'_, T>,
    source: &S,
    direction: Direction,
    mut sink: F,
) -> Result<StreamStats>
where
    T: Scalar,
    S: CostSource<T>,
    F: FnMut(usize, &Tensor<T>) -> Result<()>,
{
    let order = StreamOrder::new(source.num_planes(), reg.config().block_size, direction)?;
    let (h, w) = source.size();
    let mut state = reg.initial_state(h, w)?;
    let mut stats = StreamStats::default();
    for pos in 0..order.len() {
        let mut tape = Tape::no_grad();
        let at = source.attach(&mut tape)?;
        let mut vars = state.attach(&mut tape);
        let plane = order.plane(pos);
        let cost = source.cost(&mut tape, &at, plane)?;
        let out = reg.step(&mut tape, cost, &mut vars)?;
        if order.is_real(pos) {
            sink(plane, tape.value(out.logit))?;
        }
        state = RegularizerState::detach(&tape, &vars);
        stats.steps += 1;
        stats.peak_tape_bytes = stats.peak_tape_bytes.max(tape.live_bytes());
        stats.peak_state_bytes = stats.peak_state_bytes.max(state.nbytes());
    }
    Ok(stats)
}

/// Streams and collects the logits into `[D, H, W]` by plane index.
pub fn stream_logits<T: Scalar, S: CostSource<T>>(
    reg: &Regularizer<'_, T>,
    source: &S,
    direction: Direction,
) -> Result<Tensor<T>> {
    let (h, w) = source.size();
    let d = source.num_planes();
    let mut out = Tensor::zeros(&[d, h, w]);
    regularize_stream(reg, source, direction, |plane, logit| {
        out.data_mut()[plane * h * w..(plane + 1) * h * w].copy_from_slice(logit.data());
        Ok(())
    })?;
    Ok(out)
}

/// Runs stream positions `positions` on one tape, threading `state` and
/// recording `(plane, logit)` for real planes.
#[allow(clippy::too_many_arguments)]
pub fn unroll<T: Scalar, S: CostSource<T>>(
    tape: &mut Tape<T>,
    reg: &Regularizer<'_, T>,
    source: &S,
    at: &S::Attached,
    order: &StreamOrder,
    positions: Range<usize>,
    state: &mut StateVars,
    logits: &mut Vec<(usize, Var)>,
) -> Result<()> {
    if positions.end > order.len() {
        return Err(MvsError::Invalid(format!(
            "positions {positions:?} exceed stream length {}",
            order.len()
        )));
    }
    for pos in positions {
        let plane = order.plane(pos);
        let cost = source.cost(tape, at, plane)?;
        let out = reg.step(tape, cost, state)?;
        if order.is_real(pos) {
            logits.push((plane, out.logit));
        }
    }
    Ok(())
}

/// Whole stream on a single tape; returns `[D, H, W]` logits in plane order
/// as one node.
pub fn unrolled_logits<T: Scalar, S: CostSource<T>>(
    tape: &mut Tape<T>,
    reg: &Regularizer<'_, T>,
    source: &S,
    at: &S::Attached,
    direction: Direction,
) -> Result<Var> {
    let order = StreamOrder::new(source.num_planes(), reg.config().block_size, direction)?;
    let (h, w) = source.size();
    let mut state = reg.initial_state(h, w)?.attach(tape);
    let mut logits = Vec::with_capacity(order.planes());
    unroll(tape, reg, source, at, &order, 0..order.len(), &mut state, &mut logits)?;
    logits.sort_by_key(|&(p, _)| p);
    let maps: Vec<Var> = logits.into_iter().map(|(_, v)| v).collect();
    Ok(tape.concat(&maps)?)
}
