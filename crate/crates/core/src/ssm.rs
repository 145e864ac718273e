//! Diagonal selective state-space scan and the gated Mamba-style layer.
//!
//! Per channel `c` and state index `j`:
//!
//! ```text
//! Δ_t      = softplus(x_t·W_Δ + b_Δ)_c
//! Ā_t[j]   = exp(−softplus(a[c, j]) · Δ_t)            ∈ (0, 1)
//! h_t[j]   = Ā_t[j] · h_{t−1}[j] + Δ_t · B_t[j] · x_t  (h_0 = 0)
//! y_t      = Σ_j C_t[j] · h_t[j] + D_c · x_t
//! ```
//!
//! `B_t` and `C_t` are linear in `x_t` and shared across channels. The scan
//! runs forward (causal) only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::par;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{softplus_value, Tape, Tensor, Var};

/// Default sequence chunk length of the blocked scan.
pub const DEFAULT_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsmConfig {
    /// State size `n` per channel.
    pub state: usize,
    /// Inner width multiplier of the gated layer.
    pub expand: usize,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig { state: 8, expand: 1 }
    }
}

/// How the linear recurrence is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    /// One pass over time per (batch, channel).
    Sequential,
    /// Time split into chunks scanned independently from a zero state, then
    /// stitched together with the cumulative decay of each chunk.
    Chunked(usize),
}

impl Default for ScanMode {
    fn default() -> Self {
        ScanMode::Chunked(DEFAULT_CHUNK)
    }
}

/// Shapes of a scan problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanDims {
    fn seq(&self) -> usize {
        self.len * self.state
    }
}

/// Output of [`scan`]: readout `y` laid out `[B, N, C]` and hidden states
/// laid out `[B, C, N, n]`.
pub struct ScanOutput {
    pub y: Vec<f64>,
    pub states: Vec<f64>,
}

/// Evaluates `h_t = decay_t ⊙ h_{t−1} + drive_t`, `y_t = ⟨readout_t, h_t⟩`.
///
/// `decay` and `drive` are laid out `[B, C, N, n]`; `readout` is `[B, N, n]`
/// and shared by all channels.
pub fn scan(decay: &[f64], drive: &[f64], readout: &[f64], dims: ScanDims, mode: ScanMode) -> ScanOutput {
    let seq = dims.seq();
    let sequences = dims.batch * dims.channels;
    assert_eq!(decay.len(), sequences * seq);
    assert_eq!(drive.len(), sequences * seq);
    assert_eq!(readout.len(), dims.batch * seq);
    let mut states = vec![0.0; sequences * seq];
    let work = sequences * seq;
    par::for_each_chunk(&mut states, seq, work, |s, h| {
        let a = &decay[s * seq..(s + 1) * seq];
        let u = &drive[s * seq..(s + 1) * seq];
        match mode {
            ScanMode::Sequential => scan_sequence(a, u, h, dims.state),
            ScanMode::Chunked(chunk) => scan_sequence_chunked(a, u, h, dims.state, chunk.max(1)),
        }
    });
    let y = readout_states(&states, readout, dims);
    ScanOutput { y, states }
}

fn scan_sequence(a: &[f64], u: &[f64], h: &mut [f64], n: usize) {
    let len = a.len() / n;
    for j in 0..n {
        h[j] = u[j];
    }
    for t in 1..len {
        for j in 0..n {
            let i = t * n + j;
            h[i] = a[i] * h[i - n] + u[i];
        }
    }
}

fn scan_sequence_chunked(a: &[f64], u: &[f64], h: &mut [f64], n: usize, chunk: usize) {
    let len = a.len() / n;
    let span = chunk * n;
    // Phase 1: every chunk from a zero state, plus its running decay product.
    let mut prods = vec![0.0; a.len()];
    let work = a.len();
    {
        let locals: Vec<(Vec<f64>, Vec<f64>)> = par::map_indexed(len.div_ceil(chunk), work, |c| {
            let lo = c * span;
            let hi = ((c + 1) * span).min(a.len());
            let mut hl = vec![0.0; hi - lo];
            let mut pl = vec![0.0; hi - lo];
            for j in 0..n {
                hl[j] = u[lo + j];
                pl[j] = a[lo + j];
            }
            for i in n..hi - lo {
                hl[i] = a[lo + i] * hl[i - n] + u[lo + i];
                pl[i] = a[lo + i] * pl[i - n];
            }
            (hl, pl)
        });
        for (c, (hl, pl)) in locals.into_iter().enumerate() {
            let lo = c * span;
            h[lo..lo + hl.len()].copy_from_slice(&hl);
            prods[lo..lo + pl.len()].copy_from_slice(&pl);
        }
    }
    // Phase 2: carry true end-of-chunk states forward, fixing each chunk.
    let mut carry = vec![0.0; n];
    for c in 0..len.div_ceil(chunk) {
        let lo = c * span;
        let hi = ((c + 1) * span).min(a.len());
        if c > 0 {
            for i in lo..hi {
                h[i] += prods[i] * carry[i % n];
            }
        }
        carry.copy_from_slice(&h[hi - n..hi]);
    }
}

fn readout_states(states: &[f64], readout: &[f64], dims: ScanDims) -> Vec<f64> {
    let ScanDims {
        batch,
        len,
        channels,
        state: n,
    } = dims;
    let mut y = vec![0.0; batch * len * channels];
    for b in 0..batch {
        for t in 0..len {
            let c_t = &readout[(b * len + t) * n..(b * len + t + 1) * n];
            for ch in 0..channels {
                let h = &states[((b * channels + ch) * len + t) * n..((b * channels + ch) * len + t + 1) * n];
                y[(b * len + t) * channels + ch] = c_t.iter().zip(h).map(|(c, h)| c * h).sum();
            }
        }
    }
    y
}

/// Differentiable fused scan.
///
/// `x, delta: [B, N, C]`, `rate: [C, n]` (positive), `bmat, cmat: [B, N, n]`.
/// Returns `Σ_j C_t[j]·h_t[j]` per channel, shape `[B, N, C]`; the skip term
/// is added by the caller.
pub fn selective_scan_op<'t>(
    x: Var<'t>,
    delta: Var<'t>,
    rate: Var<'t>,
    bmat: Var<'t>,
    cmat: Var<'t>,
    mode: ScanMode,
) -> Result<Var<'t>> {
    let xv = x.value();
    let dv = delta.value();
    let rv = rate.value();
    let bv = bmat.value();
    let cv = cmat.value();
    let xs = xv.shape();
    if xs.len() != 3 || dv.shape() != xs || rv.rank() != 2 || rv.shape()[0] != xs[2] {
        return Err(Error::shape("selective_scan", xs, rv.shape()));
    }
    let n = rv.shape()[1];
    let dims = ScanDims {
        batch: xs[0],
        len: xs[1],
        channels: xs[2],
        state: n,
    };
    if bv.shape() != [dims.batch, dims.len, n] || cv.shape() != bv.shape() {
        return Err(Error::shape("selective_scan", xs, bv.shape()));
    }
    if dims.len == 0 {
        return Err(Error::EmptySequence);
    }
    let (decay, drive) = discretize(&xv, &dv, &rv, &bv, dims);
    let out = scan(&decay, &drive, cv.data(), dims, mode);
    let y = Tensor::new(xs.to_vec(), out.y)?;
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "selective_scan" });
    }
    let states = out.states;
    let tape = x.tape();
    Ok(tape.record(
        &[x, delta, rate, bmat, cmat],
        y,
        Box::new(move |g, _, needs| {
            let grads = scan_backward(g.data(), &xv, &dv, &rv, &bv, &cv, &decay, &states, dims);
            let [gx, gd, gr, gb, gc] = grads;
            vec![
                needs[0].then(|| Tensor::new(xv.shape().to_vec(), gx).expect("x")),
                needs[1].then(|| Tensor::new(dv.shape().to_vec(), gd).expect("delta")),
                needs[2].then(|| Tensor::new(rv.shape().to_vec(), gr).expect("rate")),
                needs[3].then(|| Tensor::new(bv.shape().to_vec(), gb).expect("b")),
                needs[4].then(|| Tensor::new(cv.shape().to_vec(), gc).expect("c")),
            ]
        }),
    ))
}

/// `decay = exp(−rate·Δ)` and `drive = Δ·B·x`, both `[B, C, N, n]`.
fn discretize(x: &Tensor, delta: &Tensor, rate: &Tensor, bmat: &Tensor, dims: ScanDims) -> (Vec<f64>, Vec<f64>) {
    let ScanDims {
        batch,
        len,
        channels,
        state: n,
    } = dims;
    let total = batch * channels * len * n;
    let mut decay = vec![0.0; total];
    let mut drive = vec![0.0; total];
    for b in 0..batch {
        for ch in 0..channels {
            let r = &rate.data()[ch * n..(ch + 1) * n];
            for t in 0..len {
                let bt = (b * len + t) * channels + ch;
                let dt = delta.data()[bt];
                let xt = x.data()[bt];
                let bm = &bmat.data()[(b * len + t) * n..(b * len + t + 1) * n];
                let base = ((b * channels + ch) * len + t) * n;
                for j in 0..n {
                    decay[base + j] = (-r[j] * dt).exp();
                    drive[base + j] = dt * bm[j] * xt;
                }
            }
        }
    }
    (decay, drive)
}

#[allow(clippy::too_many_arguments)]
fn scan_backward(
    gy: &[f64],
    x: &Tensor,
    delta: &Tensor,
    rate: &Tensor,
    bmat: &Tensor,
    cmat: &Tensor,
    decay: &[f64],
    states: &[f64],
    dims: ScanDims,
) -> [Vec<f64>; 5] {
    let ScanDims {
        batch,
        len,
        channels,
        state: n,
    } = dims;
    // Per batch element: (gx, gdelta, grate, gb, gc) contributions.
    let per_batch: Vec<[Vec<f64>; 5]> = par::map_indexed(batch, batch * channels * len * n, |b| {
        let mut gx = vec![0.0; len * channels];
        let mut gd = vec![0.0; len * channels];
        let mut gr = vec![0.0; channels * n];
        let mut gb = vec![0.0; len * n];
        let mut gc = vec![0.0; len * n];
        let mut gh = vec![0.0; n];
        for ch in 0..channels {
            gh.fill(0.0);
            let r = &rate.data()[ch * n..(ch + 1) * n];
            for t in (0..len).rev() {
                let bt = (b * len + t) * channels + ch;
                let g = gy[bt];
                let dt = delta.data()[bt];
                let xt = x.data()[bt];
                let base = ((b * channels + ch) * len + t) * n;
                let cm = &cmat.data()[(b * len + t) * n..(b * len + t + 1) * n];
                let bm = &bmat.data()[(b * len + t) * n..(b * len + t + 1) * n];
                let mut g_delta = 0.0;
                let mut g_x = 0.0;
                for j in 0..n {
                    gh[j] += cm[j] * g;
                    gc[t * n + j] += g * states[base + j];
                    let prev = if t > 0 { states[base - n + j] } else { 0.0 };
                    let a = decay[base + j];
                    let g_decay = gh[j] * prev;
                    g_delta += g_decay * a * (-r[j]) + gh[j] * bm[j] * xt;
                    gr[ch * n + j] += g_decay * a * (-dt);
                    gb[t * n + j] += gh[j] * dt * xt;
                    g_x += gh[j] * dt * bm[j];
                    gh[j] *= a;
                }
                gd[t * channels + ch] += g_delta;
                gx[t * channels + ch] += g_x;
            }
        }
        [gx, gd, gr, gb, gc]
    });
    let mut gx = Vec::with_capacity(batch * len * channels);
    let mut gd = Vec::with_capacity(batch * len * channels);
    let mut gr = vec![0.0; channels * n];
    let mut gb = Vec::with_capacity(batch * len * n);
    let mut gc = Vec::with_capacity(batch * len * n);
    for [x_, d_, r_, b_, c_] in per_batch {
        gx.extend(x_);
        gd.extend(d_);
        for (acc, v) in gr.iter_mut().zip(r_) {
            *acc += v;
        }
        gb.extend(b_);
        gc.extend(c_);
    }
    [gx, gd, gr, gb, gc]
}

/// Parameters of the selective scan on a `channels`-wide stream.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub delta: Linear,
    /// Pre-softplus decay rates, `[C, n]`.
    pub a: ParamId,
    pub b_proj: Linear,
    pub c_proj: Linear,
    /// Skip coefficient per channel.
    pub skip: ParamId,
    pub channels: usize,
    pub state: usize,
}

impl SsmParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, state: usize) -> Self {
        let delta = Linear::new(store, &format!("{prefix}.delta"), channels, channels);
        let a = store.register(format!("{prefix}.a"), [channels, state], Init::Zeros);
        if !store.is_meta() {
            // softplus(a[c, j]) = j + 1
            let init: Vec<f64> = (0..channels * state)
                .map(|i| ((((i % state) + 1) as f64).exp() - 1.0).ln())
                .collect();
            store
                .set(a, Tensor::new([channels, state], init).expect("shape"))
                .expect("shape");
        }
        SsmParams {
            delta,
            a,
            b_proj: Linear::new(store, &format!("{prefix}.b"), channels, state),
            c_proj: Linear::new(store, &format!("{prefix}.c"), channels, state),
            skip: store.register(format!("{prefix}.skip"), [channels], Init::Const(1.0)),
            channels,
            state,
        }
    }

    pub fn param_count(channels: usize, state: usize) -> usize {
        Linear::param_count(channels, channels)
            + channels * state
            + 2 * Linear::param_count(channels, state)
            + channels
    }

    /// Per-channel decay rates `softplus(a)`.
    pub fn rates(&self, store: &ParamStore) -> Tensor {
        store.get(self.a).map(softplus_value)
    }
}

/// Selective scan of `x: [B, N, C]` including the `D·x` skip term.
pub fn selective_scan<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    p: &SsmParams,
    x: Var<'t>,
    mode: ScanMode,
) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != p.channels {
        return Err(Error::shape("selective_scan", &shape, &[p.channels]));
    }
    if shape[1] == 0 {
        return Err(Error::EmptySequence);
    }
    let delta = p.delta.forward(tape, store, x)?.softplus()?;
    let rate = tape.param(store, p.a).softplus()?;
    let bmat = p.b_proj.forward(tape, store, x)?;
    let cmat = p.c_proj.forward(tape, store, x)?;
    let y = selective_scan_op(x, delta, rate, bmat, cmat, mode)?;
    let skip = x.mul(tape.param(store, p.skip))?;
    y.add(skip)
}

/// Gated wrapper: `out_proj(scan(u) ⊙ σ(z))` with `[u, z] = in_proj(x)`.
#[derive(Clone, Debug)]
pub struct MambaLayer {
    pub in_proj: Linear,
    pub ssm: SsmParams,
    pub out_proj: Linear,
    pub inner: usize,
    pub mode: ScanMode,
}

impl MambaLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, cfg: SsmConfig) -> Self {
        let inner = d * cfg.expand.max(1);
        MambaLayer {
            in_proj: Linear::new(store, &format!("{prefix}.in_proj"), d, 2 * inner),
            ssm: SsmParams::new(store, &format!("{prefix}.ssm"), inner, cfg.state),
            out_proj: Linear::new(store, &format!("{prefix}.out_proj"), inner, d),
            inner,
            mode: ScanMode::default(),
        }
    }

    pub fn param_count(d: usize, cfg: SsmConfig) -> usize {
        let inner = d * cfg.expand.max(1);
        Linear::param_count(d, 2 * inner) + SsmParams::param_count(inner, cfg.state) + Linear::param_count(inner, d)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let xz = self.in_proj.forward(tape, store, x)?;
        let u = xz.slice(2, 0, self.inner)?;
        let z = xz.slice(2, self.inner, self.inner)?;
        let y = selective_scan(tape, store, &self.ssm, u, self.mode)?;
        let gated = y.mul(z.sigmoid()?)?;
        self.out_proj.forward(tape, store, gated)
    }
}
