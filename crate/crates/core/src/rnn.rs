//! Bidirectional recurrent equalizers (LSTM, GRU and Vanilla cells) over
//! symbol windows, with a shared dense + sigmoid head that estimates the
//! X-polarization bits of each output symbol.
//!
//! All weights live in one flat vector; [`ParamLayout`] names the slices:
//!
//! ```text
//! forward  w_in (B·H × F) | w_rec (B·H × H) | bias (B·H)
//! backward w_in (B·H × F) | w_rec (B·H × H) | bias (B·H)
//! dense_w (b × 2H) | dense_b (b)
//! ```
//!
//! Gate blocks are stacked in the order LSTM `[i, f, o, c]`, GRU `[z, r, h]`,
//! Vanilla `[h]`. Matrices are row-major.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::frame::{FeatureStats, SymbolFrame};
use crate::signal::{streams, RngStream};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NQSR";
/// Probabilities are clipped to `[CLIP, 1 - CLIP]` inside the loss.
pub const CLIP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
    Vanilla,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Lstm, CellKind::Gru, CellKind::Vanilla];

    /// Gate count `B`.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
            CellKind::Vanilla => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::Vanilla => "vanilla",
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            "vanilla" => Ok(CellKind::Vanilla),
            other => Err(Error::Config(format!("unknown cell kind '{other}'"))),
        }
    }
}

/// Architecture of one bidirectional equalizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnnShape {
    pub kind: CellKind,
    /// Hidden units `H` per direction.
    pub hidden: usize,
    /// Input features `F` per symbol.
    pub features: usize,
    /// Window length `L = 2k+1`.
    pub window: usize,
    /// Output bits `b` per symbol.
    pub bits: usize,
    /// Central output symbols `S` per window (1 = many-to-one).
    pub span: usize,
}

impl RnnShape {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.features == 0 || self.bits == 0 {
            return Err(Error::Dimension("hidden, features and bits must be positive".into()));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::Dimension(format!("window length {} must be odd", self.window)));
        }
        if self.span == 0 || self.span > self.window || self.span % 2 != self.window % 2 {
            return Err(Error::Dimension(format!(
                "output span {} must be odd and within the window of {}",
                self.span, self.window
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }

    /// Window position of the first output symbol.
    pub fn head_start(&self) -> usize {
        (self.window - self.span) / 2
    }

    fn gate_rows(&self) -> usize {
        self.kind.gates() * self.hidden
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirectionLayout {
    pub w_in: usize,
    pub w_rec: usize,
    pub bias: usize,
}

/// Offsets of every weight tensor inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub fwd: DirectionLayout,
    pub bwd: DirectionLayout,
    pub dense_w: usize,
    pub dense_b: usize,
    pub len: usize,
}

impl ParamLayout {
    pub fn new(shape: &RnnShape) -> Self {
        let rows = shape.gate_rows();
        let dir_len = rows * shape.features + rows * shape.hidden + rows;
        let dir = |base: usize| DirectionLayout {
            w_in: base,
            w_rec: base + rows * shape.features,
            bias: base + rows * shape.features + rows * shape.hidden,
        };
        let dense_w = 2 * dir_len;
        let dense_b = dense_w + shape.bits * 2 * shape.hidden;
        Self {
            fwd: dir(0),
            bwd: dir(dir_len),
            dense_w,
            dense_b,
            len: dense_b + shape.bits,
        }
    }
}

/// Borrowed weights of one recurrent direction.
#[derive(Clone, Copy, Debug)]
pub struct CellWeights<'a> {
    pub kind: CellKind,
    pub hidden: usize,
    pub features: usize,
    pub w_in: &'a [f64],
    pub w_rec: &'a [f64],
    pub bias: &'a [f64],
}

impl<'a> CellWeights<'a> {
    pub fn new(kind: CellKind, hidden: usize, features: usize, w_in: &'a [f64], w_rec: &'a [f64], bias: &'a [f64]) -> Result<Self> {
        let rows = kind.gates() * hidden;
        if w_in.len() != rows * features || w_rec.len() != rows * hidden || bias.len() != rows {
            return Err(Error::Dimension(format!(
                "{kind} cell with H={hidden}, F={features} needs {}/{}/{} weights, got {}/{}/{}",
                rows * features,
                rows * hidden,
                rows,
                w_in.len(),
                w_rec.len(),
                bias.len()
            )));
        }
        Ok(Self {
            kind,
            hidden,
            features,
            w_in,
            w_rec,
            bias,
        })
    }

    fn from_params(shape: &RnnShape, params: &'a [f64], dir: &DirectionLayout) -> Self {
        let rows = shape.gate_rows();
        Self {
            kind: shape.kind,
            hidden: shape.hidden,
            features: shape.features,
            w_in: &params[dir.w_in..dir.w_in + rows * shape.features],
            w_rec: &params[dir.w_rec..dir.w_rec + rows * shape.hidden],
            bias: &params[dir.bias..dir.bias + rows],
        }
    }
}

/// Recurrent state; `c` is only used by LSTM cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl CellState {
    pub fn zeros(kind: CellKind, hidden: usize) -> Self {
        let c = if kind == CellKind::Lstm { vec![0.0; hidden] } else { Vec::new() };
        Self { h: vec![0.0; hidden], c }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One time step. `gates` receives the post-activation gate values.
fn step(w: &CellWeights<'_>, x: &[f64], h_prev: &[f64], c_prev: &[f64], gates: &mut [f64], c: &mut [f64], h: &mut [f64]) {
    let hh = w.hidden;
    let f = w.features;
    for (r, g) in gates.iter_mut().enumerate() {
        *g = w.bias[r] + dot(&w.w_in[r * f..(r + 1) * f], x);
    }
    match w.kind {
        CellKind::Vanilla => {
            for j in 0..hh {
                let a = gates[j] + dot(&w.w_rec[j * hh..(j + 1) * hh], h_prev);
                gates[j] = a.tanh();
                h[j] = gates[j];
            }
        }
        CellKind::Lstm => {
            for r in 0..4 * hh {
                gates[r] += dot(&w.w_rec[r * hh..(r + 1) * hh], h_prev);
            }
            for j in 0..hh {
                let i = sigmoid(gates[j]);
                let fg = sigmoid(gates[hh + j]);
                let o = sigmoid(gates[2 * hh + j]);
                let g = gates[3 * hh + j].tanh();
                gates[j] = i;
                gates[hh + j] = fg;
                gates[2 * hh + j] = o;
                gates[3 * hh + j] = g;
                c[j] = fg * c_prev[j] + i * g;
                h[j] = o * c[j].tanh();
            }
        }
        CellKind::Gru => {
            for r in 0..2 * hh {
                gates[r] = sigmoid(gates[r] + dot(&w.w_rec[r * hh..(r + 1) * hh], h_prev));
            }
            for j in 0..hh {
                let row = &w.w_rec[(2 * hh + j) * hh..(2 * hh + j + 1) * hh];
                let a: f64 = row.iter().enumerate().map(|(k, u)| u * gates[hh + k] * h_prev[k]).sum();
                gates[2 * hh + j] = (gates[2 * hh + j] + a).tanh();
            }
            for j in 0..hh {
                let z = gates[j];
                h[j] = (1.0 - z) * h_prev[j] + z * gates[2 * hh + j];
            }
        }
    }
}

/// Advances one cell by one time step.
pub fn cell_forward(w: &CellWeights<'_>, x: &[f64], state: &CellState) -> Result<CellState> {
    let lstm = w.kind == CellKind::Lstm;
    if x.len() != w.features || state.h.len() != w.hidden || (lstm && state.c.len() != w.hidden) {
        return Err(Error::Dimension(format!(
            "input of {} and state of {} for a cell with F={}, H={}",
            x.len(),
            state.h.len(),
            w.features,
            w.hidden
        )));
    }
    let mut gates = vec![0.0; w.kind.gates() * w.hidden];
    let mut next = CellState::zeros(w.kind, w.hidden);
    let zeros = vec![0.0; w.hidden];
    let c_prev = if lstm { &state.c[..] } else { &zeros[..] };
    let mut c = vec![0.0; w.hidden];
    step(w, x, &state.h, c_prev, &mut gates, &mut c, &mut next.h);
    if lstm {
        next.c = c;
    }
    Ok(next)
}

/// Activations of one direction over a window, in scan order.
#[derive(Clone, Debug, Default)]
struct Tape {
    hidden: usize,
    rows: usize,
    gates: Vec<f64>,
    /// `steps + 1` hidden vectors; entry 0 is the zero initial state.
    h: Vec<f64>,
    c: Vec<f64>,
}

impl Tape {
    fn new(shape: &RnnShape) -> Self {
        let n = shape.window;
        let hh = shape.hidden;
        Self {
            hidden: hh,
            rows: shape.gate_rows(),
            gates: vec![0.0; n * shape.gate_rows()],
            h: vec![0.0; (n + 1) * hh],
            c: vec![0.0; (n + 1) * hh],
        }
    }

    fn run(&mut self, w: &CellWeights<'_>, inputs: &[f64], reverse: bool) {
        let f = w.features;
        let n = inputs.len() / f;
        let hh = self.hidden;
        for s in 0..n {
            let pos = if reverse { n - 1 - s } else { s };
            let (h_done, h_rest) = self.h.split_at_mut((s + 1) * hh);
            let (c_done, c_rest) = self.c.split_at_mut((s + 1) * hh);
            step(
                w,
                &inputs[pos * f..(pos + 1) * f],
                &h_done[s * hh..],
                &c_done[s * hh..],
                &mut self.gates[s * self.rows..(s + 1) * self.rows],
                &mut c_rest[..hh],
                &mut h_rest[..hh],
            );
        }
    }

    /// Hidden state after scan step `s`.
    fn h_after(&self, s: usize) -> &[f64] {
        &self.h[(s + 1) * self.hidden..(s + 2) * self.hidden]
    }
}

/// Representations `[h_fwd(t), h_bwd(t)]` for every window position.
pub fn bidir_forward(model: &RnnEqualizer, window: &[f64]) -> Result<Vec<Vec<f64>>> {
    let shape = &model.shape;
    if window.len() != shape.window * shape.features {
        return Err(Error::Dimension(format!(
            "window of {} values, expected {}×{}",
            window.len(),
            shape.window,
            shape.features
        )));
    }
    let mut ws = Workspace::new(shape);
    ws.forward(model, window);
    Ok((0..shape.window).map(|t| ws.representation(shape, t)).collect())
}

/// Sigmoid head over the central `S` positions: `S` rows of `b` probabilities.
pub fn head_forward(model: &RnnEqualizer, reps: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let shape = &model.shape;
    if reps.len() != shape.window || reps.iter().any(|r| r.len() != 2 * shape.hidden) {
        return Err(Error::Dimension("representations do not match the model".into()));
    }
    let lay = model.layout();
    let start = shape.head_start();
    Ok((start..start + shape.span)
        .map(|t| {
            (0..shape.bits)
                .map(|q| {
                    let row = &model.params[lay.dense_w + q * 2 * shape.hidden..lay.dense_w + (q + 1) * 2 * shape.hidden];
                    sigmoid(model.params[lay.dense_b + q] + dot(row, &reps[t]))
                })
                .collect()
        })
        .collect())
}

/// Mean binary cross-entropy with probabilities clipped to `[CLIP, 1-CLIP]`.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Dimension(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    Ok(probs.iter().zip(labels).map(|(&p, &y)| bce_term(p, y)).sum::<f64>() / probs.len() as f64)
}

fn bce_term(p: f64, y: u8) -> f64 {
    let p = p.clamp(CLIP, 1.0 - CLIP);
    if y != 0 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of one clipped cross-entropy term with respect to the logit.
fn bce_logit_grad(p: f64, y: u8) -> f64 {
    if !(CLIP..=1.0 - CLIP).contains(&p) {
        0.0
    } else {
        p - f64::from(y)
    }
}

/// Scratch buffers for one window's forward and backward pass.
#[derive(Clone, Debug)]
pub struct Workspace {
    fwd: Tape,
    bwd: Tape,
    probs: Vec<f64>,
    dlogit: Vec<f64>,
    dh_fwd: Vec<f64>,
    dh_bwd: Vec<f64>,
    dh: Vec<f64>,
    dh_prev: Vec<f64>,
    dc: Vec<f64>,
    da: Vec<f64>,
    rh: Vec<f64>,
}

impl Workspace {
    pub fn new(shape: &RnnShape) -> Self {
        let hh = shape.hidden;
        Self {
            fwd: Tape::new(shape),
            bwd: Tape::new(shape),
            probs: vec![0.0; shape.span * shape.bits],
            dlogit: vec![0.0; shape.span * shape.bits],
            dh_fwd: vec![0.0; shape.window * hh],
            dh_bwd: vec![0.0; shape.window * hh],
            dh: vec![0.0; hh],
            dh_prev: vec![0.0; hh],
            dc: vec![0.0; hh],
            da: vec![0.0; shape.gate_rows()],
            rh: vec![0.0; hh],
        }
    }

    fn forward(&mut self, model: &RnnEqualizer, window: &[f64]) {
        let shape = &model.shape;
        let lay = model.layout();
        self.fwd.run(&CellWeights::from_params(shape, &model.params, &lay.fwd), window, false);
        self.bwd.run(&CellWeights::from_params(shape, &model.params, &lay.bwd), window, true);
        let hh = shape.hidden;
        let start = shape.head_start();
        for j in 0..shape.span {
            let t = start + j;
            let hf = self.fwd.h_after(t);
            let hb = self.bwd.h_after(shape.window - 1 - t);
            for q in 0..shape.bits {
                let row = &model.params[lay.dense_w + q * 2 * hh..lay.dense_w + (q + 1) * 2 * hh];
                let logit = model.params[lay.dense_b + q] + dot(&row[..hh], hf) + dot(&row[hh..], hb);
                self.probs[j * shape.bits + q] = sigmoid(logit);
            }
        }
    }

    fn representation(&self, shape: &RnnShape, t: usize) -> Vec<f64> {
        let mut r = self.fwd.h_after(t).to_vec();
        r.extend_from_slice(self.bwd.h_after(shape.window - 1 - t));
        r
    }

    /// Output probabilities of the last forward pass, `S × b` row-major.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// Backpropagates `dlogit` (already scaled) and accumulates into `grad`.
    fn backward(&mut self, model: &RnnEqualizer, window: &[f64], grad: &mut [f64]) {
        let shape = model.shape;
        let lay = model.layout();
        let hh = shape.hidden;
        let start = shape.head_start();
        self.dh_fwd.iter_mut().for_each(|v| *v = 0.0);
        self.dh_bwd.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..shape.span {
            let t = start + j;
            let sb = shape.window - 1 - t;
            for q in 0..shape.bits {
                let d = self.dlogit[j * shape.bits + q];
                if d == 0.0 {
                    continue;
                }
                let wrow = lay.dense_w + q * 2 * hh;
                grad[lay.dense_b + q] += d;
                let hf = self.fwd.h_after(t);
                let hb = self.bwd.h_after(sb);
                for k in 0..hh {
                    grad[wrow + k] += d * hf[k];
                    grad[wrow + hh + k] += d * hb[k];
                    self.dh_fwd[t * hh + k] += d * model.params[wrow + k];
                    self.dh_bwd[sb * hh + k] += d * model.params[wrow + hh + k];
                }
            }
        }
        let fwd_w = CellWeights::from_params(&shape, &model.params, &lay.fwd);
        let bwd_w = CellWeights::from_params(&shape, &model.params, &lay.bwd);
        let dh_fwd = std::mem::take(&mut self.dh_fwd);
        let dh_bwd = std::mem::take(&mut self.dh_bwd);
        let tape = std::mem::take(&mut self.fwd);
        self.bptt(&fwd_w, &tape, window, false, &dh_fwd, grad, &lay.fwd);
        self.fwd = tape;
        let tape = std::mem::take(&mut self.bwd);
        self.bptt(&bwd_w, &tape, window, true, &dh_bwd, grad, &lay.bwd);
        self.bwd = tape;
        self.dh_fwd = dh_fwd;
        self.dh_bwd = dh_bwd;
    }

    #[allow(clippy::too_many_arguments)]
    fn bptt(&mut self, w: &CellWeights<'_>, tape: &Tape, inputs: &[f64], reverse: bool, inject: &[f64], grad: &mut [f64], dir: &DirectionLayout) {
        let hh = w.hidden;
        let f = w.features;
        let rows = tape.rows;
        let n = inputs.len() / f;
        self.dh_prev.iter_mut().for_each(|v| *v = 0.0);
        self.dc.iter_mut().for_each(|v| *v = 0.0);
        for s in (0..n).rev() {
            let pos = if reverse { n - 1 - s } else { s };
            let x = &inputs[pos * f..(pos + 1) * f];
            let h_prev = &tape.h[s * hh..(s + 1) * hh];
            let gates = &tape.gates[s * rows..(s + 1) * rows];
            for k in 0..hh {
                self.dh[k] = inject[s * hh + k] + self.dh_prev[k];
            }
            match w.kind {
                CellKind::Vanilla => {
                    for k in 0..hh {
                        self.da[k] = self.dh[k] * (1.0 - gates[k] * gates[k]);
                    }
                    rec_transpose(w.w_rec, &self.da, hh, rows, &mut self.dh_prev);
                    outer_add(&mut grad[dir.w_rec..], &self.da, h_prev);
                }
                CellKind::Lstm => {
                    let c = &tape.c[(s + 1) * hh..(s + 2) * hh];
                    let c_prev = &tape.c[s * hh..(s + 1) * hh];
                    for k in 0..hh {
                        let (i, fg, o, g) = (gates[k], gates[hh + k], gates[2 * hh + k], gates[3 * hh + k]);
                        let tc = c[k].tanh();
                        let d_o = self.dh[k] * tc;
                        let dc = self.dc[k] + self.dh[k] * o * (1.0 - tc * tc);
                        self.da[k] = dc * g * i * (1.0 - i);
                        self.da[hh + k] = dc * c_prev[k] * fg * (1.0 - fg);
                        self.da[2 * hh + k] = d_o * o * (1.0 - o);
                        self.da[3 * hh + k] = dc * i * (1.0 - g * g);
                        self.dc[k] = dc * fg;
                    }
                    rec_transpose(w.w_rec, &self.da, hh, rows, &mut self.dh_prev);
                    outer_add(&mut grad[dir.w_rec..], &self.da, h_prev);
                }
                CellKind::Gru => {
                    for k in 0..hh {
                        let (z, ht) = (gates[k], gates[2 * hh + k]);
                        self.da[k] = self.dh[k] * (ht - h_prev[k]) * z * (1.0 - z);
                        self.da[2 * hh + k] = self.dh[k] * z * (1.0 - ht * ht);
                        self.dh_prev[k] = self.dh[k] * (1.0 - z);
                        self.rh[k] = gates[hh + k] * h_prev[k];
                    }
                    // d(r*h_prev) through the candidate's recurrent kernel
                    let uh = &w.w_rec[2 * hh * hh..];
                    for k in 0..hh {
                        let mut d_rh = 0.0;
                        for j in 0..hh {
                            d_rh += uh[j * hh + k] * self.da[2 * hh + j];
                        }
                        let r = gates[hh + k];
                        self.da[hh + k] = d_rh * h_prev[k] * r * (1.0 - r);
                        self.dh_prev[k] += d_rh * r;
                    }
                    for r in 0..2 * hh {
                        let d = self.da[r];
                        let row = &w.w_rec[r * hh..(r + 1) * hh];
                        for k in 0..hh {
                            self.dh_prev[k] += row[k] * d;
                        }
                    }
                    outer_add(&mut grad[dir.w_rec..], &self.da[..2 * hh], h_prev);
                    outer_add(&mut grad[dir.w_rec + 2 * hh * hh..], &self.da[2 * hh..], &self.rh);
                }
            }
            outer_add(&mut grad[dir.w_in..], &self.da, x);
            for (g, d) in grad[dir.bias..dir.bias + rows].iter_mut().zip(&self.da) {
                *g += d;
            }
        }
    }
}

/// `out = W_recᵀ·da` for a `rows × hh` kernel.
fn rec_transpose(w_rec: &[f64], da: &[f64], hh: usize, rows: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..rows {
        let d = da[r];
        let row = &w_rec[r * hh..(r + 1) * hh];
        for k in 0..hh {
            out[k] += row[k] * d;
        }
    }
}

/// `g[r, k] += a[r]·b[k]` for a row-major block starting at `g[0]`.
fn outer_add(g: &mut [f64], a: &[f64], b: &[f64]) {
    let n = b.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        for (gk, bk) in g[r * n..(r + 1) * n].iter_mut().zip(b) {
            *gk += ar * bk;
        }
    }
}

/// Worst relative disagreement between [`RnnEqualizer::window_gradient`]
/// and central differences with step 1e-6, over every parameter. The
/// denominator is floored at 1e-3 so gradients near zero are compared
/// absolutely.
pub fn finite_difference_error(model: &RnnEqualizer, window: &[f64], labels: &[u8]) -> Result<f64> {
    let (_, g) = model.window_gradient(window, labels)?;
    let h = 1e-6;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..model.params.len() {
        probe.params[i] = model.params[i] + h;
        let up = probe.window_loss(window, labels)?;
        probe.params[i] = model.params[i] - h;
        let down = probe.window_loss(window, labels)?;
        probe.params[i] = model.params[i];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-3));
    }
    Ok(worst)
}

/// Run metadata stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RnnMeta {
    #[serde(default)]
    pub normalization: Option<FeatureStats>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub metrics: std::collections::BTreeMap<String, f64>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnEqualizer {
    pub shape: RnnShape,
    pub params: Vec<f64>,
    pub meta: RnnMeta,
}

impl RnnEqualizer {
    pub fn zeros(shape: RnnShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            params: vec![0.0; shape.param_count()],
            meta: RnnMeta::default(),
        })
    }

    /// Glorot-uniform input and dense kernels, orthogonal recurrent kernels,
    /// zero biases, all drawn from the weight-init stream of `seed`.
    pub fn init(shape: RnnShape, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(shape)?;
        let mut rng = RngStream::new(seed, streams::WEIGHT_INIT);
        let lay = model.layout();
        let rows = shape.gate_rows();
        for dir in [lay.fwd, lay.bwd] {
            glorot(
                &mut model.params[dir.w_in..dir.w_in + rows * shape.features],
                shape.features,
                rows,
                &mut rng,
            );
            let q = orthogonal(rows, shape.hidden, &mut rng);
            model.params[dir.w_rec..dir.w_rec + rows * shape.hidden].copy_from_slice(&q);
        }
        let dense = shape.bits * 2 * shape.hidden;
        glorot(
            &mut model.params[lay.dense_w..lay.dense_w + dense],
            2 * shape.hidden,
            shape.bits,
            &mut rng,
        );
        model.meta.seed = Some(seed);
        Ok(model)
    }

    pub fn layout(&self) -> ParamLayout {
        self.shape.layout()
    }

    /// Output probabilities (`S × b`) for one window of `L × F` inputs.
    pub fn predict_window(&self, window: &[f64], ws: &mut Workspace) -> Result<Vec<f64>> {
        if window.len() != self.shape.window * self.shape.features {
            return Err(Error::Dimension("window size does not match the model".into()));
        }
        ws.forward(self, window);
        Ok(ws.probs.clone())
    }

    /// Mean loss over one window and its gradient with respect to every
    /// parameter.
    pub fn window_gradient(&self, window: &[f64], labels: &[u8]) -> Result<(f64, Vec<f64>)> {
        let mut ws = Workspace::new(&self.shape);
        let mut grad = vec![0.0; self.params.len()];
        if labels.len() != self.shape.span * self.shape.bits {
            return Err(Error::Dimension("label block does not match S × b".into()));
        }
        let probs = self.predict_window(window, &mut ws)?;
        let n = labels.len() as f64;
        for (k, (&p, &y)) in probs.iter().zip(labels).enumerate() {
            ws.dlogit[k] = bce_logit_grad(p, y) / n;
        }
        ws.backward(self, window, &mut grad);
        Ok((bce_loss(&probs, labels)?, grad))
    }

    pub fn window_loss(&self, window: &[f64], labels: &[u8]) -> Result<f64> {
        let probs = self.predict_window(window, &mut Workspace::new(&self.shape))?;
        bce_loss(&probs, labels)
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let header = serde_json::json!({
            "kind": "rnn",
            "shape": self.shape,
            "param_count": self.params.len(),
            "meta": self.meta,
        });
        let mut payload = Vec::with_capacity(self.params.len() * 8);
        container::put_f64s(&mut payload, &self.params);
        container::write(out, WEIGHTS_MAGIC, &header, &payload)
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let (header, payload) = container::read(input, WEIGHTS_MAGIC)?;
        if header["kind"] != "rnn" {
            return Err(Error::Format("weight file is not an RNN equalizer".into()));
        }
        let shape: RnnShape = serde_json::from_value(header["shape"].clone())?;
        shape.validate()?;
        let meta: RnnMeta = serde_json::from_value(header["meta"].clone())?;
        let params = container::get_f64s(&payload)?;
        if params.len() != shape.param_count() {
            return Err(Error::Format(format!("{} weights for a model of {}", params.len(), shape.param_count())));
        }
        Ok(Self { shape, params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn glorot(out: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut RngStream) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    out.iter_mut().for_each(|v| *v = rng.uniform_range(-limit, limit));
}

/// `rows × cols` matrix (rows ≥ cols) with orthonormal columns, from
/// Gram–Schmidt on a Gaussian draw.
fn orthogonal(rows: usize, cols: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut m: Vec<f64> = (0..rows * cols).map(|_| rng.gaussian_pair().0).collect();
    for j in 0..cols {
        for _ in 0..2 {
            for p in 0..j {
                let proj: f64 = (0..rows).map(|r| m[r * cols + j] * m[r * cols + p]).sum();
                for r in 0..rows {
                    m[r * cols + j] -= proj * m[r * cols + p];
                }
            }
        }
        let norm = (0..rows).map(|r| m[r * cols + j].powi(2)).sum::<f64>().sqrt();
        for r in 0..rows {
            m[r * cols + j] /= norm;
        }
    }
    m
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension("Adam state does not match the parameters".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Symbol sequence with aligned per-symbol target bits.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceData {
    pub features: usize,
    pub bits: usize,
    /// `n × features`, row-major.
    pub inputs: Vec<f64>,
    /// `n × bits`, row-major.
    pub targets: Vec<u8>,
}

impl SequenceData {
    pub fn new(inputs: Vec<f64>, targets: Vec<u8>, features: usize, bits: usize) -> Result<Self> {
        if features == 0 || bits == 0 || !inputs.len().is_multiple_of(features) || targets.len() != inputs.len() / features * bits {
            return Err(Error::Dimension(format!(
                "{} inputs and {} targets for F={features}, b={bits}",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self {
            features,
            bits,
            inputs,
            targets,
        })
    }

    /// All four features of every symbol; targets are the X-polarization bits.
    pub fn from_frame(frame: &SymbolFrame) -> Self {
        Self {
            features: crate::frame::FEATURES,
            bits: frame.bits_per_pol(),
            inputs: frame.features.iter().flatten().copied().collect(),
            targets: frame.pol_labels(0),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.features
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Inputs for the window whose first output symbol is `block`, zero
    /// padded outside the sequence.
    pub fn window_into(&self, shape: &RnnShape, block: usize, buf: &mut [f64]) {
        let f = self.features;
        let n = self.len() as isize;
        let first = block as isize - shape.head_start() as isize;
        for t in 0..shape.window {
            let idx = first + t as isize;
            let dst = &mut buf[t * f..(t + 1) * f];
            if idx >= 0 && idx < n {
                dst.copy_from_slice(&self.inputs[idx as usize * f..(idx as usize + 1) * f]);
            } else {
                dst.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn labels(&self, block: usize, span: usize) -> &[u8] {
        &self.targets[block * self.bits..(block + span) * self.bits]
    }

    fn check(&self, shape: &RnnShape) -> Result<()> {
        if shape.features != self.features || shape.bits != self.bits {
            return Err(Error::Dimension(format!(
                "data has F={}, b={} but the model expects F={}, b={}",
                self.features, self.bits, shape.features, shape.bits
            )));
        }
        Ok(())
    }
}

/// First output symbol of every window tiling `range` with stride `span`,
/// plus the number of trailing symbols left uncovered.
pub fn tile_windows(range: Range<usize>, span: usize) -> (Vec<usize>, usize) {
    let len = range.end.saturating_sub(range.start);
    let count = len / span;
    ((0..count).map(|i| range.start + i * span).collect(), len - count * span)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Windows per mini-batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub train_symbols: usize,
    pub val_symbols: usize,
    pub test_symbols: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            max_epochs: 300,
            patience: 20,
            train_symbols: 40_000,
            val_symbols: 20_000,
            test_symbols: 60_000,
            learning_rate: 0.001,
        }
    }
}

/// Consecutive train / validation / test ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn split(&self, available: usize) -> Result<Split> {
        let need = self.train_symbols + self.val_symbols + self.test_symbols;
        if need > available || self.train_symbols == 0 {
            return Err(Error::Split(format!(
                "split {}/{}/{} needs {need} symbols, frame has {available}",
                self.train_symbols, self.val_symbols, self.test_symbols
            )));
        }
        let a = self.train_symbols;
        let b = a + self.val_symbols;
        Ok(Split {
            train: 0..a,
            val: a..b,
            test: b..need,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Symbols at the end of the train/validation ranges not covered by a window.
    pub dropped_tail: [usize; 2],
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

/// Mean loss over the windows starting at `blocks`.
pub fn mean_loss(model: &RnnEqualizer, data: &SequenceData, blocks: &[usize]) -> Result<f64> {
    data.check(&model.shape)?;
    let shape = model.shape;
    let mut ws = Workspace::new(&shape);
    let mut buf = vec![0.0; shape.window * shape.features];
    let mut total = 0.0;
    for &b in blocks {
        data.window_into(&shape, b, &mut buf);
        ws.forward(model, &buf);
        total += ws
            .probs
            .iter()
            .zip(data.labels(b, shape.span))
            .map(|(&p, &y)| bce_term(p, y))
            .sum::<f64>();
    }
    Ok(total / (blocks.len() * shape.span * shape.bits).max(1) as f64)
}

/// Gradient of the mean loss over a batch of windows; returns the loss sum.
fn batch_gradient(model: &RnnEqualizer, data: &SequenceData, blocks: &[usize], ws: &mut Workspace, buf: &mut [f64], grad: &mut [f64]) -> f64 {
    let shape = model.shape;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = (blocks.len() * shape.span * shape.bits) as f64;
    let mut loss = 0.0;
    for &b in blocks {
        data.window_into(&shape, b, buf);
        ws.forward(model, buf);
        let labels = data.labels(b, shape.span);
        for k in 0..labels.len() {
            let p = ws.probs[k];
            loss += bce_term(p, labels[k]);
            ws.dlogit[k] = bce_logit_grad(p, labels[k]) / n;
        }
        ws.backward(model, buf, grad);
    }
    loss
}

/// Mini-batch Adam training with per-epoch shuffling and early stopping on
/// the validation loss; the best-validation weights are restored.
pub fn train(model: &mut RnnEqualizer, data: &SequenceData, split: &Split, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    cfg.validate()?;
    data.check(&model.shape)?;
    let shape = model.shape;
    if split.train.end > data.len() || split.val.end > data.len() {
        return Err(Error::Split("split exceeds the data".into()));
    }
    let (mut train_blocks, train_tail) = tile_windows(split.train.clone(), shape.span);
    let (val_blocks, val_tail) = tile_windows(split.val.clone(), shape.span);
    if train_blocks.is_empty() {
        return Err(Error::Split("training range shorter than one output span".into()));
    }
    let mut shuffle = RngStream::new(seed, streams::SHUFFLE);
    let mut adam = Adam::new(model.params.len(), cfg.learning_rate);
    let mut ws = Workspace::new(&shape);
    let mut buf = vec![0.0; shape.window * shape.features];
    let mut grad = vec![0.0; model.params.len()];
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut since_best = 0;
    let mut stopped_early = false;
    let outputs_per_epoch = (train_blocks.len() * shape.span * shape.bits) as f64;
    for epoch in 1..=cfg.max_epochs {
        shuffle.shuffle(&mut train_blocks);
        let mut loss_sum = 0.0;
        for batch in train_blocks.chunks(cfg.batch_size) {
            loss_sum += batch_gradient(model, data, batch, &mut ws, &mut buf, &mut grad);
            adam.step(&mut model.params, &grad)?;
        }
        let train_loss = loss_sum / outputs_per_epoch;
        let val_loss = if val_blocks.is_empty() {
            train_loss
        } else {
            mean_loss(model, data, &val_blocks)?
        };
        if !train_loss.is_finite() || !val_loss.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDivergence(format!("non-finite loss at epoch {epoch}")));
        }
        history.push(EpochRecord { epoch, train_loss, val_loss });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.params = best.2;
    model.meta.train = Some(cfg.clone());
    Ok(TrainReport {
        history,
        best_epoch: best.1,
        best_val_loss: best.0,
        stopped_early,
        dropped_tail: [train_tail, val_tail],
    })
}

/// Bit errors overall and per output position within the window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerReport {
    pub errors: u64,
    pub total: u64,
    /// `(errors, total)` for each of the `S` output positions.
    pub per_position: Vec<(u64, u64)>,
    pub dropped_tail: usize,
}

impl BerReport {
    pub fn ber(&self) -> f64 {
        self.errors as f64 / self.total as f64
    }

    pub fn position_ber(&self) -> Vec<f64> {
        self.per_position.iter().map(|&(e, n)| e as f64 / n as f64).collect()
    }
}

/// Hard decision: `p ≥ 0.5` is bit 1.
pub fn decide(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

/// Hard-decision BER of the model over the symbols in `range`, windows
/// tiled with stride `S` so every symbol is decided once.
pub fn infer_ber(model: &RnnEqualizer, data: &SequenceData, range: Range<usize>) -> Result<BerReport> {
    let (blocks, dropped_tail) = tile_windows(range.clone(), model.shape.span);
    count_errors(model, data, range, &blocks, dropped_tail)
}

/// Per-position error counts from a window starting at every symbol of
/// `range`; each symbol is decided once at every output position.
pub fn sliding_position_ber(model: &RnnEqualizer, data: &SequenceData, range: Range<usize>) -> Result<BerReport> {
    let span = model.shape.span;
    let blocks: Vec<usize> = (range.start..range.end.saturating_sub(span - 1)).collect();
    count_errors(model, data, range, &blocks, 0)
}

fn count_errors(model: &RnnEqualizer, data: &SequenceData, range: Range<usize>, blocks: &[usize], dropped_tail: usize) -> Result<BerReport> {
    data.check(&model.shape)?;
    if range.end > data.len() {
        return Err(Error::Split("evaluation range exceeds the data".into()));
    }
    let shape = model.shape;
    let mut ws = Workspace::new(&shape);
    let mut buf = vec![0.0; shape.window * shape.features];
    let mut per_position = vec![(0u64, 0u64); shape.span];
    for &b in blocks {
        data.window_into(&shape, b, &mut buf);
        ws.forward(model, &buf);
        let labels = data.labels(b, shape.span);
        for (j, slot) in per_position.iter_mut().enumerate() {
            for q in 0..shape.bits {
                let k = j * shape.bits + q;
                slot.0 += u64::from(decide(ws.probs[k]) != labels[k]);
                slot.1 += 1;
            }
        }
    }
    let errors = per_position.iter().map(|p| p.0).sum();
    let total = per_position.iter().map(|p| p.1).sum();
    if total == 0 {
        return Err(Error::Split("evaluation range shorter than one output span".into()));
    }
    Ok(BerReport {
        errors,
        total,
        per_position,
        dropped_tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(kind: CellKind, hidden: usize, window: usize, span: usize) -> RnnShape {
        RnnShape {
            kind,
            hidden,
            features: 4,
            window,
            bits: 4,
            span,
        }
    }

    fn random_model(s: RnnShape, seed: u64) -> RnnEqualizer {
        let mut m = RnnEqualizer::zeros(s).unwrap();
        let mut rng = RngStream::new(seed, 77);
        m.params.iter_mut().for_each(|p| *p = rng.uniform_range(-0.8, 0.8));
        m
    }

    fn random_window(s: &RnnShape, seed: u64) -> (Vec<f64>, Vec<u8>) {
        let mut rng = RngStream::new(seed, 78);
        let x = (0..s.window * s.features).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
        let y = (0..s.span * s.bits).map(|_| rng.below(2) as u8).collect();
        (x, y)
    }

    #[test]
    fn parameter_counts() {
        for (kind, expect) in [(CellKind::Lstm, 2820), (CellKind::Gru, 2148), (CellKind::Vanilla, 804)] {
            assert_eq!(shape(kind, 16, 151, 1).param_count(), expect);
        }
        let s = RnnShape {
            kind: CellKind::Vanilla,
            hidden: 1,
            features: 1,
            window: 1,
            bits: 1,
            span: 1,
        };
        assert_eq!(s.param_count(), 9);
    }

    #[test]
    fn shape_validation() {
        assert!(shape(CellKind::Gru, 4, 8, 2).validate().is_err());
        assert!(shape(CellKind::Gru, 4, 9, 2).validate().is_err());
        assert!(shape(CellKind::Gru, 4, 9, 11).validate().is_err());
        assert!(shape(CellKind::Gru, 4, 9, 9).validate().is_ok());
    }

    #[test]
    fn zero_weights_are_a_fixed_point() {
        for kind in CellKind::ALL {
            let rows = kind.gates() * 3;
            let (wi, wr, b) = (vec![0.0; rows * 4], vec![0.0; rows * 3], vec![0.0; rows]);
            let w = CellWeights::new(kind, 3, 4, &wi, &wr, &b).unwrap();
            let next = cell_forward(&w, &[1.0, -2.0, 0.5, 3.0], &CellState::zeros(kind, 3)).unwrap();
            assert_eq!(next.h, vec![0.0; 3]);
        }
    }

    #[test]
    fn vanilla_scalar_case() {
        let w = CellWeights::new(CellKind::Vanilla, 1, 4, &[1.0, 0.0, 0.0, 0.0], &[0.0], &[0.0]).unwrap();
        let next = cell_forward(&w, &[0.5, 9.0, 9.0, 9.0], &CellState::zeros(CellKind::Vanilla, 1)).unwrap();
        assert!((next.h[0] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((next.h[0] - 0.46212).abs() < 1e-5);
    }

    #[test]
    fn gru_scalar_case() {
        let (wz, wr, wh) = (0.3, -0.7, 1.1);
        let (uz, ur, uh) = (0.4, 0.9, -0.6);
        let (bz, br, bh) = (0.05, -0.1, 0.2);
        let (x, h0) = (0.8, -0.35);
        let (wi, wr_, b) = ([wz, wr, wh], [uz, ur, uh], [bz, br, bh]);
        let w = CellWeights::new(CellKind::Gru, 1, 1, &wi, &wr_, &b).unwrap();
        let got = cell_forward(&w, &[x], &CellState { h: vec![h0], c: vec![] }).unwrap().h[0];
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z = s(wz * x + uz * h0 + bz);
        let r = s(wr * x + ur * h0 + br);
        let ht = (wh * x + uh * (r * h0) + bh).tanh();
        assert!((got - ((1.0 - z) * h0 + z * ht)).abs() < 1e-12);
    }

    #[test]
    fn lstm_scalar_case() {
        let wx = [0.2, -0.4, 0.6, 0.9];
        let wh = [0.5, 0.1, -0.3, 0.7];
        let b = [0.0, 1.0, -0.2, 0.1];
        let (x, h0, c0) = (-0.6, 0.25, -0.4);
        let w = CellWeights::new(CellKind::Lstm, 1, 1, &wx, &wh, &b).unwrap();
        let got = cell_forward(&w, &[x], &CellState { h: vec![h0], c: vec![c0] }).unwrap();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let a = |k: usize| wx[k] * x + wh[k] * h0 + b[k];
        let c = s(a(1)) * c0 + s(a(0)) * a(3).tanh();
        assert!((got.c[0] - c).abs() < 1e-12);
        assert!((got.h[0] - s(a(2)) * c.tanh()).abs() < 1e-12);
    }

    #[test]
    fn cell_shape_errors() {
        assert!(matches!(
            CellWeights::new(CellKind::Lstm, 2, 3, &[0.0; 24], &[0.0; 15], &[0.0; 8]),
            Err(Error::Dimension(_))
        ));
        let (wi, wr, b) = (vec![0.0; 6], vec![0.0; 4], vec![0.0; 2]);
        let w = CellWeights::new(CellKind::Vanilla, 2, 3, &wi, &wr, &b).unwrap();
        assert!(cell_forward(&w, &[0.0; 2], &CellState::zeros(CellKind::Vanilla, 2)).is_err());
    }

    /// Independent forward pass: explicit matrices, no shared helpers.
    fn naive_bidir(m: &RnnEqualizer, window: &[f64]) -> Vec<Vec<f64>> {
        let s = m.shape;
        let (hh, f, l) = (s.hidden, s.features, s.window);
        let rows = s.kind.gates() * hh;
        let dir_len = rows * (f + hh + 1);
        let mat = |off: usize, r: usize, c: usize| -> Vec<Vec<f64>> { (0..r).map(|i| (0..c).map(|j| m.params[off + i * c + j]).collect()).collect() };
        let mv = |a: &Vec<Vec<f64>>, v: &[f64]| -> Vec<f64> { a.iter().map(|row| row.iter().zip(v).map(|(p, q)| p * q).sum()).collect() };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let run = |base: usize, order: Vec<usize>| -> Vec<Vec<f64>> {
            let wi = mat(base, rows, f);
            let wr = mat(base + rows * f, rows, hh);
            let b: Vec<f64> = m.params[base + rows * (f + hh)..base + dir_len].to_vec();
            let mut h = vec![0.0; hh];
            let mut c = vec![0.0; hh];
            let mut out = vec![vec![]; l];
            for t in order {
                let x = &window[t * f..(t + 1) * f];
                let xi = mv(&wi, x);
                match s.kind {
                    CellKind::Vanilla => {
                        let hr = mv(&wr, &h);
                        h = (0..hh).map(|j| (xi[j] + hr[j] + b[j]).tanh()).collect();
                    }
                    CellKind::Lstm => {
                        let hr = mv(&wr, &h);
                        let g = |k: usize, j: usize| xi[k * hh + j] + hr[k * hh + j] + b[k * hh + j];
                        let mut hn = vec![0.0; hh];
                        for j in 0..hh {
                            c[j] = sig(g(1, j)) * c[j] + sig(g(0, j)) * g(3, j).tanh();
                            hn[j] = sig(g(2, j)) * c[j].tanh();
                        }
                        h = hn;
                    }
                    CellKind::Gru => {
                        let hr = mv(&wr, &h);
                        let z: Vec<f64> = (0..hh).map(|j| sig(xi[j] + hr[j] + b[j])).collect();
                        let r: Vec<f64> = (0..hh).map(|j| sig(xi[hh + j] + hr[hh + j] + b[hh + j])).collect();
                        let rh: Vec<f64> = (0..hh).map(|j| r[j] * h[j]).collect();
                        let uh: Vec<Vec<f64>> = wr[2 * hh..].to_vec();
                        let cand = mv(&uh, &rh);
                        h = (0..hh)
                            .map(|j| (1.0 - z[j]) * h[j] + z[j] * (xi[2 * hh + j] + cand[j] + b[2 * hh + j]).tanh())
                            .collect();
                    }
                }
                out[t] = h.clone();
            }
            out
        };
        let fw = run(0, (0..l).collect());
        let bw = run(dir_len, (0..l).rev().collect());
        (0..l).map(|t| [fw[t].clone(), bw[t].clone()].concat()).collect()
    }

    #[test]
    fn bidir_matches_independent_loop() {
        for (i, kind) in CellKind::ALL.into_iter().enumerate() {
            let s = RnnShape {
                kind,
                hidden: 3,
                features: 4,
                window: 9,
                bits: 2,
                span: 3,
            };
            let m = random_model(s, i as u64);
            let (x, _) = random_window(&s, 10 + i as u64);
            let fast = bidir_forward(&m, &x).unwrap();
            let slow = naive_bidir(&m, &x);
            for (a, b) in fast.iter().flatten().zip(slow.iter().flatten()) {
                assert!((a - b).abs() < 1e-12, "{kind}");
            }
        }
    }

    #[test]
    fn palindromic_window_symmetry() {
        for kind in CellKind::ALL {
            let s = shape(kind, 3, 7, 1);
            let mut m = random_model(s, 4);
            let lay = m.layout();
            let dir_len = lay.bwd.w_in;
            let (fwd, rest) = m.params.split_at_mut(dir_len);
            rest[..dir_len].copy_from_slice(fwd);
            let (mut x, _) = random_window(&s, 5);
            for t in 0..3 {
                for k in 0..4 {
                    x[(6 - t) * 4 + k] = x[t * 4 + k];
                }
            }
            let reps = bidir_forward(&m, &x).unwrap();
            for t in 0..7 {
                for k in 0..3 {
                    assert!((reps[t][k] - reps[6 - t][3 + k]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn single_step_window() {
        let s = shape(CellKind::Gru, 2, 1, 1);
        let m = random_model(s, 8);
        let x = [0.1, 0.2, -0.3, 0.4];
        let lay = m.layout();
        let fwd = CellWeights::from_params(&s, &m.params, &lay.fwd);
        let bwd = CellWeights::from_params(&s, &m.params, &lay.bwd);
        let h0 = CellState::zeros(CellKind::Gru, 2);
        let expect = [cell_forward(&fwd, &x, &h0).unwrap().h, cell_forward(&bwd, &x, &h0).unwrap().h].concat();
        assert_eq!(bidir_forward(&m, &x).unwrap(), vec![expect]);
    }

    #[test]
    fn head_shapes_and_zero_dense() {
        let s = shape(CellKind::Vanilla, 4, 151, 80);
        let mut m = random_model(RnnShape { span: 81, ..s }, 1);
        let lay = m.layout();
        m.params[lay.dense_w..].iter_mut().for_each(|p| *p = 0.0);
        let (x, _) = random_window(&m.shape, 2);
        let probs = head_forward(&m, &bidir_forward(&m, &x).unwrap()).unwrap();
        assert_eq!((probs.len(), probs[0].len()), (81, 4));
        assert!(probs.iter().flatten().all(|&p| p == 0.5));
        let one = random_model(shape(CellKind::Vanilla, 4, 151, 1), 1);
        let probs = head_forward(&one, &bidir_forward(&one, &x).unwrap()).unwrap();
        assert_eq!((probs.len(), probs[0].len()), (1, 4));
        assert!(bidir_forward(&one, &x[..8]).is_err());
    }

    #[test]
    fn loss_values() {
        assert!((bce_loss(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&[1.0, 0.0], &[1, 0]).unwrap() < 1e-11);
        let p = [0.1, 0.73, 0.999, 0.02];
        let y = [0u8, 1, 0, 1];
        let expect = -((0.9f64).ln() + 0.73f64.ln() + (0.001f64).ln() + 0.02f64.ln()) / 4.0;
        assert!((bce_loss(&p, &y).unwrap() - expect).abs() < 1e-12);
        assert!(bce_loss(&p, &y[..2]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (i, kind) in CellKind::ALL.into_iter().enumerate() {
            for span in [1, 3, 7] {
                let s = RnnShape {
                    kind,
                    hidden: 3,
                    features: 4,
                    window: 7,
                    bits: 2,
                    span,
                };
                let m = random_model(s, 30 + i as u64);
                let (x, y) = random_window(&s, 40 + span as u64);
                let err = finite_difference_error(&m, &x, &y).unwrap();
                assert!(err < 1e-6, "{kind} span {span}: {err}");
            }
        }
    }

    #[test]
    fn saturated_head_has_vanishing_gradient() {
        let s = shape(CellKind::Lstm, 3, 5, 3);
        let mut m = random_model(s, 3);
        let lay = m.layout();
        let y = [1u8, 0, 1, 1];
        m.params[lay.dense_w..lay.dense_b].iter_mut().for_each(|p| *p = 0.0);
        for q in 0..4 {
            m.params[lay.dense_b + q] = if y[q] == 1 { 40.0 } else { -40.0 };
        }
        let labels: Vec<u8> = (0..3).flat_map(|_| y).collect();
        let (x, _) = random_window(&s, 6);
        let (loss, g) = m.window_gradient(&x, &labels).unwrap();
        assert!(loss < 1e-11);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);
    }

    #[test]
    fn many_to_one_head_reads_only_the_center() {
        let s = shape(CellKind::Gru, 3, 7, 1);
        let m = random_model(s, 12);
        let (x, y) = random_window(&s, 13);
        let mut ws = Workspace::new(&s);
        ws.forward(&m, &x);
        for (k, &p) in ws.probs.clone().iter().enumerate() {
            ws.dlogit[k] = bce_logit_grad(p, y[k]);
        }
        let mut grad = vec![0.0; m.params.len()];
        ws.backward(&m, &x, &mut grad);
        for t in 0..7 {
            let injected = ws.dh_fwd[t * 3..(t + 1) * 3].iter().any(|v| *v != 0.0);
            assert_eq!(injected, t == 3);
        }
        let lay = m.layout();
        assert!(grad[lay.fwd.w_rec..lay.fwd.bias].iter().any(|v| *v != 0.0));
        assert!(grad[lay.bwd.w_rec..lay.bwd.bias].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn adam_steps() {
        let mut adam = Adam::new(2, 0.001);
        let mut p = vec![0.5, -0.25];
        adam.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!((p.clone(), adam.t), (vec![0.5, -0.25], 1));
        let mut adam = Adam::new(1, 0.001);
        let mut q = vec![1.0];
        adam.step(&mut q, &[0.2]).unwrap();
        // m̂ = 0.2, v̂ = 0.04 after bias correction
        assert!((q[0] - (1.0 - 0.001 * 0.2 / (0.2 + 1e-8))).abs() < 1e-12);
        adam.step(&mut q, &[-0.1]).unwrap();
        let m = 0.9 * 0.02 + 0.1 * -0.1;
        let v = 0.999 * 0.00004 + 0.001 * 0.01;
        let expect = 1.0 - 0.001 * 0.2 / (0.2 + 1e-8) - 0.001 * (m / 0.19) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((q[0] - expect).abs() < 1e-12);
        assert!(adam.step(&mut q, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn tiling_covers_each_index_once() {
        for span in [1, 3, 51] {
            let (blocks, tail) = tile_windows(100..1100, span);
            let mut seen = vec![0; 1100];
            for b in &blocks {
                for i in *b..b + span {
                    seen[i] += 1;
                }
            }
            assert!(seen[..100].iter().all(|&c| c == 0));
            assert!(seen[100..1100 - tail].iter().all(|&c| c == 1));
            assert_eq!(tail, 1000 % span);
        }
    }

    fn toy_data(n: usize, seed: u64) -> SequenceData {
        let mut rng = RngStream::new(seed, 5);
        let mut inputs = Vec::with_capacity(n * 4);
        let mut targets = Vec::with_capacity(n * 2);
        for _ in 0..n {
            let (a, b) = (rng.below(2) as u8, rng.below(2) as u8);
            inputs.extend([2.0 * f64::from(a) - 1.0, 2.0 * f64::from(b) - 1.0, rng.uniform_range(-1.0, 1.0), 0.0]);
            targets.extend([a, b]);
        }
        SequenceData::new(inputs, targets, 4, 2).unwrap()
    }

    #[test]
    fn toy_task_trains_to_zero_ber() {
        let data = toy_data(3000, 1);
        let s = RnnShape {
            kind: CellKind::Vanilla,
            hidden: 4,
            features: 4,
            window: 5,
            bits: 2,
            span: 1,
        };
        let mut m = RnnEqualizer::init(s, 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            max_epochs: 50,
            train_symbols: 1500,
            val_symbols: 500,
            test_symbols: 1000,
            ..TrainConfig::default()
        };
        let split = cfg.split(data.len()).unwrap();
        let report = train(&mut m, &data, &split, &cfg, 3).unwrap();
        assert_eq!(infer_ber(&m, &data, split.val).unwrap().errors, 0);
        assert_eq!(infer_ber(&m, &data, split.test).unwrap().errors, 0);
        assert!(report.history.len() <= 50);
    }

    #[test]
    fn early_stopping_restores_best() {
        let mut data = toy_data(800, 4);
        let mut rng = RngStream::new(4, 6);
        data.targets.iter_mut().for_each(|t| *t = rng.below(2) as u8);
        let s = RnnShape {
            kind: CellKind::Vanilla,
            hidden: 2,
            features: 4,
            window: 3,
            bits: 2,
            span: 1,
        };
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 300,
            patience: 3,
            train_symbols: 400,
            val_symbols: 200,
            test_symbols: 200,
            learning_rate: 0.05,
        };
        let split = cfg.split(data.len()).unwrap();
        let mut m = RnnEqualizer::init(s, 1).unwrap();
        let report = train(&mut m, &data, &split, &cfg, 1).unwrap();
        assert!(report.stopped_early && report.epochs_run() < 300);
        assert_eq!(report.epochs_run(), report.best_epoch + cfg.patience);
        let (val_blocks, _) = tile_windows(split.val.clone(), 1);
        assert_eq!(mean_loss(&m, &data, &val_blocks).unwrap(), report.best_val_loss);
        assert_eq!(report.history[report.best_epoch - 1].val_loss, report.best_val_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(600, 9);
        let s = RnnShape {
            kind: CellKind::Gru,
            hidden: 2,
            features: 4,
            window: 5,
            bits: 2,
            span: 3,
        };
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            train_symbols: 300,
            val_symbols: 150,
            test_symbols: 150,
            ..TrainConfig::default()
        };
        let split = cfg.split(data.len()).unwrap();
        let run = || {
            let mut m = RnnEqualizer::init(s, 5).unwrap();
            let r = train(&mut m, &data, &split, &cfg, 6).unwrap();
            (m, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(
            a.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.params.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(ra, rb);
    }

    #[test]
    fn span_one_many_to_many_equals_many_to_one() {
        let data = toy_data(200, 2);
        let s = RnnShape {
            kind: CellKind::Lstm,
            hidden: 3,
            features: 4,
            window: 5,
            bits: 2,
            span: 1,
        };
        let m = random_model(s, 6);
        let mut ws = Workspace::new(&s);
        let mut buf = vec![0.0; 20];
        for b in [0, 1, 57, 199] {
            data.window_into(&s, b, &mut buf);
            let p = m.predict_window(&buf, &mut ws).unwrap();
            let reps = bidir_forward(&m, &buf).unwrap();
            let q = head_forward(&m, &reps).unwrap();
            assert_eq!(p, q[0]);
        }
    }

    #[test]
    fn ber_complement_and_perfect() {
        let data = toy_data(300, 7);
        let s = RnnShape {
            kind: CellKind::Vanilla,
            hidden: 2,
            features: 4,
            window: 3,
            bits: 2,
            span: 3,
        };
        let mut m = RnnEqualizer::zeros(s).unwrap();
        let lay = m.layout();
        // identity from the input feature to the fwd hidden unit, then to the bit
        m.params[lay.fwd.w_in] = 20.0;
        m.params[lay.fwd.w_in + 4 + 1] = 20.0;
        m.params[lay.dense_w] = 20.0;
        m.params[lay.dense_w + 4 + 1] = 20.0;
        let good = infer_ber(&m, &data, 0..300).unwrap();
        assert_eq!(good.errors, 0);
        for p in &mut m.params[lay.dense_w..] {
            *p = -*p;
        }
        let bad = infer_ber(&m, &data, 0..300).unwrap();
        assert_eq!(bad.errors, bad.total);
        assert_eq!(bad.per_position.len(), 3);
        let sliding = sliding_position_ber(&m, &data, 0..300).unwrap();
        assert_eq!(sliding.per_position, vec![(596, 596); 3]);
    }

    #[test]
    fn weight_file_round_trip() {
        let mut m = random_model(shape(CellKind::Gru, 3, 9, 3), 2);
        m.meta.metrics.insert("test_ber".into(), 1.25e-3);
        m.meta.train = Some(TrainConfig::default());
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = RnnEqualizer::read_from(&buf[..]).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
        buf[0] = b'X';
        assert!(matches!(RnnEqualizer::read_from(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn init_is_reproducible_and_orthogonal() {
        let s = shape(CellKind::Lstm, 4, 5, 1);
        let a = RnnEqualizer::init(s, 3).unwrap();
        assert_eq!(a, RnnEqualizer::init(s, 3).unwrap());
        let lay = a.layout();
        let q = &a.params[lay.fwd.w_rec..lay.fwd.bias];
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = (0..16).map(|r| q[r * 4 + i] * q[r * 4 + j]).sum();
                assert!((d - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
        let limit = (6.0f64 / 20.0).sqrt();
        assert!(a.params[lay.fwd.w_in..lay.fwd.w_rec].iter().all(|v| v.abs() <= limit));
        assert!(a.params[lay.fwd.bias..lay.bwd.w_in].iter().all(|v| *v == 0.0));
    }
}
