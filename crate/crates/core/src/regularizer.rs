//! Recurrent regularization of the cost-map sequence.
//!
//! A three-scale U-Net of convolutional LSTM cells consumes one cost map per
//! depth plane. Depth planes are grouped into blocks of `s`; from every other
//! plane of a block the raw cost map and the regularized output are buffered,
//! and at the end of the block a depth-attention summary updates the block
//! state `B`, which the finest (non-local) cell reads during the next block.

use nlmvs_tensor::{Conv2dOpts, ParameterStore, PoolMode, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MvsError, Result};
use crate::features::{conv, conv3, FEATURE_CHANNELS};

/// Channels of a cost map entering the regularizer.
pub const COST_CHANNELS: usize = FEATURE_CHANNELS;
/// Channels of the regularized map emitted per plane.
pub const REG_CHANNELS: usize = 8;
/// Channels of the block state.
pub const BLOCK_CHANNELS: usize = 16;

const CELLS: usize = 5;

/// Which in-block planes feed the block buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    /// Depth planes per block; even.
    pub block_size: usize,
    pub fine_channels: usize,
    pub mid_channels: usize,
    pub coarse_channels: usize,
    /// `false` replaces the non-local cell by a vanilla one and drops the
    /// block recurrence entirely.
    pub nonlocal: bool,
    /// Keeps every block state at zero while still running the non-local
    /// cell. Diagnostic switch.
    pub zero_block_state: bool,
    pub sample_parity: Parity,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            block_size: 8,
            fine_channels: 32,
            mid_channels: 16,
            coarse_channels: 16,
            nonlocal: true,
            zero_block_state: false,
            sample_parity: Parity::Even,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 2 || self.block_size % 2 != 0 {
            return Err(MvsError::Config(format!(
                "block_size must be even and at least 2, got {}",
                self.block_size
            )));
        }
        if self.fine_channels == 0 || self.mid_channels == 0 || self.coarse_channels == 0 {
            return Err(MvsError::Config("U-Net channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Planes buffered per block.
    pub fn samples_per_block(&self) -> usize {
        self.block_size / 2
    }

    /// Whether in-block index `k` is buffered.
    pub fn samples(&self, k: usize) -> bool {
        match self.sample_parity {
            Parity::Even => k % 2 == 0,
            Parity::Odd => k % 2 == 1,
        }
    }

    pub(crate) fn cells(&self) -> [LstmCell; CELLS] {
        let (f, m, c) = (self.fine_channels, self.mid_channels, self.coarse_channels);
        [
            LstmCell::new("reg.l1", COST_CHANNELS, f, self.nonlocal),
            LstmCell::new("reg.l2", m, m, false),
            LstmCell::new("reg.l3", c, c, false),
            LstmCell::new("reg.l4", 2 * m, m, false),
            LstmCell::new("reg.l5", m + f, REG_CHANNELS, false),
        ]
    }
}

/// Convolutional LSTM cell; the non-local variant also reads the block state.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
    pub nonlocal: bool,
}

/// Hidden and cell maps of one LSTM cell.
#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new(name: &str, input: usize, hidden: usize, nonlocal: bool) -> Self {
        Self {
            name: name.to_string(),
            input,
            hidden,
            nonlocal,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParameterStore<T>, rng: &mut R) -> Result<()> {
        store.insert_conv(
            &format!("{}.gates", self.name),
            4 * self.hidden,
            self.input + self.hidden,
            3,
            true,
            rng,
        )?;
        if self.nonlocal {
            store.insert_conv(
                &format!("{}.attn", self.name),
                self.hidden,
                self.input + BLOCK_CHANNELS,
                3,
                true,
                rng,
            )?;
            store.insert_conv(&format!("{}.proj", self.name), self.hidden, BLOCK_CHANNELS, 1, false, rng)?;
        }
        Ok(())
    }

    /// Zero hidden and cell maps at the given resolution.
    pub fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>, h: usize, w: usize) -> CellVars {
        CellVars {
            h: tape.constant(Tensor::zeros(&[self.hidden, h, w])),
            c: tape.constant(Tensor::zeros(&[self.hidden, h, w])),
        }
    }

    /// Gates `[F, I, C~, O]` from `conv([x, h_prev])`; `c = F c_prev + I C~`,
    /// plus `A proj(B)` with `A = sigmoid(conv([x, B]))` for the non-local
    /// cell; `h = O tanh(c)`.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        x: Var,
        prev: CellVars,
        block: Option<Var>,
    ) -> Result<CellVars> {
        let n = self.hidden;
        let xin = tape.concat(&[x, prev.h])?;
        let z = conv3(tape, store, &format!("{}.gates", self.name), xin)?;
        let f = tape.narrow(z, 0, n)?;
        let f = tape.sigmoid(f)?;
        let i = tape.narrow(z, n, n)?;
        let i = tape.sigmoid(i)?;
        let g = tape.narrow(z, 2 * n, n)?;
        let g = tape.tanh(g)?;
        let o = tape.narrow(z, 3 * n, n)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, prev.c)?;
        let write = tape.mul(i, g)?;
        let mut c = tape.add(keep, write)?;
        if self.nonlocal {
            let b = block.ok_or_else(|| MvsError::Invalid(format!("{} needs a block state", self.name)))?;
            let ab = tape.concat(&[x, b])?;
            let a = conv3(tape, store, &format!("{}.attn", self.name), ab)?;
            let a = tape.sigmoid(a)?;
            let p = conv(tape, store, &format!("{}.proj", self.name), b, Conv2dOpts::default())?;
            let inject = tape.mul(a, p)?;
            c = tape.add(c, inject)?;
        }
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(CellVars { h, c })
    }
}

pub fn init_regularizer_params<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParameterStore<T>,
    cfg: &RegularizerConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let cells = cfg.cells();
    for cell in &cells {
        cell.init(store, rng)?;
    }
    let (f, m, c) = (cfg.fine_channels, cfg.mid_channels, cfg.coarse_channels);
    store.insert_conv("reg.down1", m, f, 3, true, rng)?;
    store.insert_conv("reg.down2", c, m, 3, true, rng)?;
    store.insert_conv("reg.up1", m, c, 3, true, rng)?;
    store.insert_conv("reg.up2", m, m, 3, true, rng)?;
    store.insert_conv("reg.head", 1, REG_CHANNELS, 3, true, rng)?;
    if cfg.nonlocal {
        store.insert_conv("att.conv", BLOCK_CHANNELS, 2 * (COST_CHANNELS + REG_CHANNELS), 3, true, rng)?;
        store.insert_conv("att.res.conv1", BLOCK_CHANNELS, BLOCK_CHANNELS, 3, true, rng)?;
        store.insert_conv("att.res.conv2", BLOCK_CHANNELS, BLOCK_CHANNELS, 3, true, rng)?;
        let raw = COST_CHANNELS * cfg.samples_per_block();
        store.insert_conv("block.gates", 2 * BLOCK_CHANNELS, raw + BLOCK_CHANNELS, 3, true, rng)?;
    }
    Ok(())
}

/// `F_comp [40, k, H, W]` from raw `[32, k, H, W]` and regularized
/// `[8, k, H, W]` samples.
pub fn complex_features<T: Scalar>(tape: &mut Tape<T>, raw: Var, reg: Var) -> Result<Var> {
    Ok(tape.concat(&[raw, reg])?)
}

/// Attention features `[16, H, W]`: depth max and mean of the complex
/// features, a convolution down to 16 channels and a residual block.
pub fn depth_attention<T: Scalar>(tape: &mut Tape<T>, store: &ParameterStore<T>, raw: Var, reg: Var) -> Result<Var> {
    let comp = complex_features(tape, raw, reg)?;
    let fmax = tape.pool_depth(comp, PoolMode::Max)?;
    let favg = tape.pool_depth(comp, PoolMode::Avg)?;
    let pooled = tape.concat(&[fmax, favg])?;
    let x = conv3(tape, store, "att.conv", pooled)?;
    let r = conv3(tape, store, "att.res.conv1", x)?;
    let r = tape.relu(r)?;
    let r = conv3(tape, store, "att.res.conv2", r)?;
    Ok(tape.add(x, r)?)
}

/// `B(t) = G_i tanh(F_att) + G_f B(t-1)` with both gates computed from the
/// raw samples folded into channels and `B(t-1)`.
pub fn block_update<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    raw: Var,
    att: Var,
    prev: Var,
) -> Result<Var> {
    let s = tape.shape(raw).to_vec();
    if s.len() != 4 {
        return Err(MvsError::Invalid(format!("raw samples must be [C,k,H,W], got {s:?}")));
    }
    let folded = tape.reshape(raw, &[s[0] * s[1], s[2], s[3]])?;
    let x = tape.concat(&[folded, prev])?;
    let z = conv3(tape, store, "block.gates", x)?;
    let gi = tape.narrow(z, 0, BLOCK_CHANNELS)?;
    let gi = tape.sigmoid(gi)?;
    let gf = tape.narrow(z, BLOCK_CHANNELS, BLOCK_CHANNELS)?;
    let gf = tape.sigmoid(gf)?;
    let ta = tape.tanh(att)?;
    let a = tape.mul(gi, ta)?;
    let b = tape.mul(gf, prev)?;
    Ok(tape.add(a, b)?)
}

/// Recurrent state living on one tape.
#[derive(Debug, Clone)]
pub struct StateVars {
    pub cells: Vec<CellVars>,
    pub block: Var,
    pub raw: Vec<Var>,
    pub reg: Vec<Var>,
    /// Position of the next plane inside its block.
    pub in_block: usize,
}

/// Recurrent state detached from any tape.
#[derive(Debug, Clone)]
pub struct RegularizerState<T> {
    pub cells: Vec<(Tensor<T>, Tensor<T>)>,
    pub block: Tensor<T>,
    pub raw: Vec<Tensor<T>>,
    pub reg: Vec<Tensor<T>>,
    pub in_block: usize,
}

impl<T: Scalar> RegularizerState<T> {
    pub fn attach(&self, tape: &mut Tape<T>) -> StateVars {
        StateVars {
            cells: self
                .cells
                .iter()
                .map(|(h, c)| CellVars {
                    h: tape.constant(h.clone()),
                    c: tape.constant(c.clone()),
                })
                .collect(),
            block: tape.constant(self.block.clone()),
            raw: self.raw.iter().map(|t| tape.constant(t.clone())).collect(),
            reg: self.reg.iter().map(|t| tape.constant(t.clone())).collect(),
            in_block: self.in_block,
        }
    }

    pub fn detach(tape: &Tape<T>, vars: &StateVars) -> Self {
        Self {
            cells: vars
                .cells
                .iter()
                .map(|cv| (tape.value(cv.h).clone(), tape.value(cv.c).clone()))
                .collect(),
            block: tape.value(vars.block).clone(),
            raw: vars.raw.iter().map(|&v| tape.value(v).clone()).collect(),
            reg: vars.reg.iter().map(|&v| tape.value(v).clone()).collect(),
            in_block: vars.in_block,
        }
    }

    pub fn nbytes(&self) -> usize {
        self.cells.iter().map(|(h, c)| h.nbytes() + c.nbytes()).sum::<usize>()
            + self.block.nbytes()
            + self.raw.iter().chain(&self.reg).map(Tensor::nbytes).sum::<usize>()
    }
}

/// Outputs of one plane step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `[1, H, W]`.
    pub logit: Var,
    /// `[8, H, W]`.
    pub regularized: Var,
}

/// The U-Net regularizer bound to its parameters.
#[derive(Debug)]
pub struct Regularizer<'a, T> {
    cfg: &'a RegularizerConfig,
    store: &'a ParameterStore<T>,
    cells: [LstmCell; CELLS],
}

impl<'a, T: Scalar> Regularizer<'a, T> {
    pub fn new(cfg: &'a RegularizerConfig, store: &'a ParameterStore<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            store,
            cells: cfg.cells(),
        })
    }

    pub fn config(&self) -> &RegularizerConfig {
        self.cfg
    }

    pub fn store(&self) -> &ParameterStore<T> {
        self.store
    }

    fn check_dims(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(MvsError::Invalid(format!(
                "regularizer needs height and width divisible by 4, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Zero initial state for `h x w` cost maps.
    pub fn initial_state(&self, h: usize, w: usize) -> Result<RegularizerState<T>> {
        Self::check_dims(h, w)?;
        let dims = [(h, w), (h / 2, w / 2), (h / 4, w / 4), (h / 2, w / 2), (h, w)];
        Ok(RegularizerState {
            cells: self
                .cells
                .iter()
                .zip(dims)
                .map(|(cell, (ch, cw))| {
                    (
                        Tensor::zeros(&[cell.hidden, ch, cw]),
                        Tensor::zeros(&[cell.hidden, ch, cw]),
                    )
                })
                .collect(),
            block: Tensor::zeros(&[BLOCK_CHANNELS, h, w]),
            raw: Vec::new(),
            reg: Vec::new(),
            in_block: 0,
        })
    }

    /// Regularizes one cost map `[32, H, W]` and advances the state; closes
    /// the block after its last plane.
    pub fn step(&self, tape: &mut Tape<T>, cost: Var, state: &mut StateVars) -> Result<StepOutput> {
        let shape = tape.shape(cost).to_vec();
        if shape.len() != 3 || shape[0] != COST_CHANNELS {
            return Err(MvsError::Invalid(format!("cost map must be [32,H,W], got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        Self::check_dims(h, w)?;
        if state.cells.len() != CELLS {
            return Err(MvsError::Invalid(format!("expected {CELLS} cell states, got {}", state.cells.len())));
        }
        let store = self.store;
        let block = self.cfg.nonlocal.then_some(state.block);
        let c1 = self.cells[0].step(tape, store, cost, state.cells[0], block)?;
        let x = conv(tape, store, "reg.down1", c1.h, Conv2dOpts::strided(3, 2))?;
        let x = tape.relu(x)?;
        let c2 = self.cells[1].step(tape, store, x, state.cells[1], None)?;
        let x = conv(tape, store, "reg.down2", c2.h, Conv2dOpts::strided(3, 2))?;
        let x = tape.relu(x)?;
        let c3 = self.cells[2].step(tape, store, x, state.cells[2], None)?;
        let x = tape.resize(c3.h, h / 2, w / 2)?;
        let x = conv3(tape, store, "reg.up1", x)?;
        let x = tape.relu(x)?;
        let x = tape.concat(&[x, c2.h])?;
        let c4 = self.cells[3].step(tape, store, x, state.cells[3], None)?;
        let x = tape.resize(c4.h, h, w)?;
        let x = conv3(tape, store, "reg.up2", x)?;
        let x = tape.relu(x)?;
        let x = tape.concat(&[x, c1.h])?;
        let c5 = self.cells[4].step(tape, store, x, state.cells[4], None)?;
        let logit = conv3(tape, store, "reg.head", c5.h)?;
        state.cells = vec![c1, c2, c3, c4, c5];

        if self.cfg.nonlocal {
            if self.cfg.samples(state.in_block) {
                state.raw.push(cost);
                state.reg.push(c5.h);
            }
            if state.in_block + 1 == self.cfg.block_size {
                self.close_block(tape, state)?;
            }
        }
        state.in_block = (state.in_block + 1) % self.cfg.block_size;
        Ok(StepOutput {
            logit,
            regularized: c5.h,
        })
    }

    fn close_block(&self, tape: &mut Tape<T>, state: &mut StateVars) -> Result<()> {
        let raw = std::mem::take(&mut state.raw);
        let reg = std::mem::take(&mut state.reg);
        if raw.len() != self.cfg.samples_per_block() {
            return Err(MvsError::Invalid(format!(
                "block buffer holds {} samples, expected {}",
                raw.len(),
                self.cfg.samples_per_block()
            )));
        }
        if self.cfg.zero_block_state {
            return Ok(());
        }
        let raw = tape.stack_depth(&raw)?;
        let reg = tape.stack_depth(&reg)?;
        let att = depth_attention(tape, self.store, raw, reg)?;
        state.block = block_update(tape, self.store, raw, att, state.block)?;
        Ok(())
    }
}
