//! Loop-level reference implementations used as test oracles.
//!
//! Everything here works on plain `Vec<f64>` with explicit index arithmetic
//! and shares no code with the library's tensor ops.

#![allow(dead_code)]

use mamba_home::ParamStore;

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax with `None` entries treated as −∞; an all-`None` row gives zeros.
pub fn masked_softmax(logits: &[Option<f64>]) -> Vec<f64> {
    let max = logits.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let e: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |v| (v - max).exp())).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    masked_softmax(&logits.iter().map(|&v| Some(v)).collect::<Vec<_>>())
}

/// Dense layer stored as `w[i][o]` row-major plus bias.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn load(store: &ParamStore, prefix: &str) -> Dense {
        let w = store.by_name(&format!("{prefix}.weight")).expect(prefix);
        let b = store.by_name(&format!("{prefix}.bias")).expect(prefix);
        let shape = store.shape(w);
        Dense {
            w: store.get(w).data().to_vec(),
            b: store.get(b).data().to_vec(),
            d_in: shape[0],
            d_out: shape[1],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.d_in);
        (0..self.d_out)
            .map(|o| self.b[o] + (0..self.d_in).map(|i| x[i] * self.w[i * self.d_out + o]).sum::<f64>())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Dense,
    pub down: Dense,
    pub gelu: bool,
}

impl Ffn {
    pub fn load(store: &ParamStore, prefix: &str, gelu_act: bool) -> Ffn {
        Ffn {
            up: Dense::load(store, &format!("{prefix}.up")),
            down: Dense::load(store, &format!("{prefix}.down")),
            gelu: gelu_act,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.up.apply(x);
        if self.gelu {
            h.iter_mut().for_each(|v| *v = gelu(*v));
        }
        self.down.apply(&h)
    }
}

/// All weights of one HoME layer in loop-friendly form.
pub struct HomeWeights {
    pub e: usize,
    pub s: usize,
    pub d: usize,
    /// `slots[(e·S + s)·d + j]`
    pub slots: Vec<f64>,
    pub router1: Dense,
    pub experts1: Vec<Ffn>,
    pub router2: Dense,
    pub experts2: Vec<Ffn>,
}

impl HomeWeights {
    pub fn load(store: &ParamStore, prefix: &str, e: usize, e2: usize, s: usize, d: usize, gelu_act: bool) -> Self {
        let slots = store.by_name(&format!("{prefix}.slots")).expect("slots");
        HomeWeights {
            e,
            s,
            d,
            slots: store.get(slots).data().to_vec(),
            router1: Dense::load(store, &format!("{prefix}.router1")),
            experts1: (0..e)
                .map(|i| Ffn::load(store, &format!("{prefix}.expert1.{i}"), gelu_act))
                .collect(),
            router2: Dense::load(store, &format!("{prefix}.router2")),
            experts2: (0..e2)
                .map(|i| Ffn::load(store, &format!("{prefix}.expert2.{i}"), gelu_act))
                .collect(),
        }
    }
}

pub struct HomeTrace {
    /// `[B, N, d]`
    pub out: Vec<f64>,
    /// `[B, G, K, M]`
    pub dispatch: Vec<f64>,
}

/// Direct nested-loop evaluation of the grouped two-level soft-MoE layer.
pub fn naive_home(x: &[f64], b: usize, n: usize, mask: Option<&[bool]>, k: usize, w: &HomeWeights) -> HomeTrace {
    let d = w.d;
    let m = w.e * w.s;
    let g = n.div_ceil(k);
    let valid = |bi: usize, pos: usize| pos < n && mask.is_none_or(|mk| mk[bi * n + pos]);
    let token = |bi: usize, pos: usize| -> Vec<f64> {
        if valid(bi, pos) {
            x[(bi * n + pos) * d..(bi * n + pos + 1) * d].to_vec()
        } else {
            vec![0.0; d]
        }
    };
    let mut dispatch = vec![0.0; b * g * k * m];
    let mut out = vec![0.0; b * n * d];
    for bi in 0..b {
        for gi in 0..g {
            // dispatch weights
            let mut a = vec![vec![0.0; m]; k];
            for (ki, row) in a.iter_mut().enumerate() {
                let pos = gi * k + ki;
                let xt = token(bi, pos);
                let logits: Vec<Option<f64>> = (0..m)
                    .map(|mi| {
                        valid(bi, pos).then(|| (0..d).map(|j| xt[j] * w.slots[mi * d + j]).sum::<f64>())
                    })
                    .collect();
                *row = masked_softmax(&logits);
                for mi in 0..m {
                    dispatch[((bi * g + gi) * k + ki) * m + mi] = row[mi];
                }
            }
            // slot inputs
            let mut slots = vec![vec![0.0; d]; m];
            for (mi, slot) in slots.iter_mut().enumerate() {
                for (ki, row) in a.iter().enumerate() {
                    let xt = token(bi, gi * k + ki);
                    for j in 0..d {
                        slot[j] += row[mi] * xt[j];
                    }
                }
            }
            // level 1: route on the slot mean
            let mut mean = vec![0.0; d];
            for slot in &slots {
                for j in 0..d {
                    mean[j] += slot[j] / m as f64;
                }
            }
            let p1 = softmax(&w.router1.apply(&mean));
            let mut y1 = vec![vec![0.0; d]; m];
            for (ei, f) in w.experts1.iter().enumerate() {
                for mi in 0..m {
                    let o = f.apply(&slots[mi]);
                    for j in 0..d {
                        y1[mi][j] += p1[ei] * o[j];
                    }
                }
            }
            // level 2: route per slot
            let mut y2 = vec![vec![0.0; d]; m];
            for mi in 0..m {
                let p2 = softmax(&w.router2.apply(&y1[mi]));
                for (ei, f) in w.experts2.iter().enumerate() {
                    let o = f.apply(&y1[mi]);
                    for j in 0..d {
                        y2[mi][j] += p2[ei] * o[j];
                    }
                }
            }
            // combine back to tokens
            for (ki, row) in a.iter().enumerate() {
                let pos = gi * k + ki;
                if pos >= n {
                    continue;
                }
                for j in 0..d {
                    out[(bi * n + pos) * d + j] = (0..m).map(|mi| row[mi] * y2[mi][j]).sum();
                }
            }
        }
    }
    HomeTrace { out, dispatch }
}

/// Selective-scan weights in loop-friendly form.
pub struct ScanWeights {
    pub c: usize,
    pub n: usize,
    pub delta: Dense,
    pub a: Vec<f64>,
    pub bp: Dense,
    pub cp: Dense,
    pub skip: Vec<f64>,
}

impl ScanWeights {
    pub fn load(store: &ParamStore, prefix: &str) -> Self {
        let a = store.by_name(&format!("{prefix}.a")).expect("a");
        let skip = store.by_name(&format!("{prefix}.skip")).expect("skip");
        let shape = store.shape(a);
        ScanWeights {
            c: shape[0],
            n: shape[1],
            delta: Dense::load(store, &format!("{prefix}.delta")),
            a: store.get(a).data().to_vec(),
            bp: Dense::load(store, &format!("{prefix}.b")),
            cp: Dense::load(store, &format!("{prefix}.c")),
            skip: store.get(skip).data().to_vec(),
        }
    }
}

/// Step-by-step recurrence over `x: [B, N, C]`.
pub fn naive_selective_scan(x: &[f64], b: usize, len: usize, w: &ScanWeights) -> Vec<f64> {
    let (c, n) = (w.c, w.n);
    let mut y = vec![0.0; b * len * c];
    for bi in 0..b {
        let mut h = vec![vec![0.0; n]; c];
        for t in 0..len {
            let xt = &x[(bi * len + t) * c..(bi * len + t + 1) * c];
            let delta: Vec<f64> = w.delta.apply(xt).into_iter().map(softplus).collect();
            let bt = w.bp.apply(xt);
            let ct = w.cp.apply(xt);
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..n {
                    let decay = (-softplus(w.a[ch * n + j]) * delta[ch]).exp();
                    h[ch][j] = decay * h[ch][j] + delta[ch] * bt[j] * xt[ch];
                    acc += ct[j] * h[ch][j];
                }
                y[(bi * len + t) * c + ch] = acc + w.skip[ch] * xt[ch];
            }
        }
    }
    y
}

/// Fills every parameter with seeded uniform values in `[−scale, scale]`.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

pub fn random_vec(len: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Cross-correlation of one `[C, D, H, W]` volume with `[O, C, k, k, k]`
/// weights, zero padding `pad` and stride `stride`.
pub struct Conv {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

impl Conv {
    pub fn load(store: &ParamStore, prefix: &str) -> Conv {
        let w = store.by_name(&format!("{prefix}.weight")).expect(prefix);
        let b = store.by_name(&format!("{prefix}.bias")).expect(prefix);
        let s = store.shape(w).to_vec();
        Conv {
            w: store.get(w).data().to_vec(),
            b: store.get(b).data().to_vec(),
            c_out: s[0],
            c_in: s[1],
            k: s[2],
        }
    }

    pub fn apply(&self, x: &[f64], dims: [usize; 3], stride: usize, pad: usize) -> (Vec<f64>, [usize; 3]) {
        let k = self.k;
        let od = dims.map(|e| (e + 2 * pad - k) / stride + 1);
        let mut y = vec![0.0; self.c_out * od[0] * od[1] * od[2]];
        for o in 0..self.c_out {
            for z in 0..od[0] {
                for r in 0..od[1] {
                    for c in 0..od[2] {
                        let mut acc = self.b[o];
                        for i in 0..self.c_in {
                            for a in 0..k {
                                for bb in 0..k {
                                    for cc in 0..k {
                                        let p = [z * stride + a, r * stride + bb, c * stride + cc];
                                        if p.iter().zip(&dims).any(|(&q, &e)| q < pad || q - pad >= e) {
                                            continue;
                                        }
                                        let xi = ((i * dims[0] + p[0] - pad) * dims[1] + p[1] - pad) * dims[2] + p[2] - pad;
                                        let wi = (((o * self.c_in + i) * k + a) * k + bb) * k + cc;
                                        acc += self.w[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        y[((o * od[0] + z) * od[1] + r) * od[2] + c] = acc;
                    }
                }
            }
        }
        (y, od)
    }
}

/// Per-vector normalisation over the trailing axis, either DyT or LayerNorm.
pub enum RowNorm {
    DyT { alpha: f64, w: Vec<f64>, b: Vec<f64> },
    Ln { gamma: Vec<f64>, beta: Vec<f64> },
}

impl RowNorm {
    pub fn load(store: &ParamStore, prefix: &str) -> RowNorm {
        let get = |s: &str| store.by_name(&format!("{prefix}.{s}")).map(|id| store.get(id).data().to_vec());
        match get("alpha") {
            Some(alpha) => RowNorm::DyT {
                alpha: alpha[0],
                w: get("weight").unwrap(),
                b: get("bias").unwrap(),
            },
            None => RowNorm::Ln {
                gamma: get("gamma").unwrap(),
                beta: get("beta").unwrap(),
            },
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            RowNorm::DyT { alpha, w, b } => x
                .iter()
                .enumerate()
                .map(|(j, &v)| w[j] * (alpha * v).tanh() + b[j])
                .collect(),
            RowNorm::Ln { gamma, beta } => {
                let d = x.len() as f64;
                let mean = x.iter().sum::<f64>() / d;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let r = 1.0 / (var + 1e-5).sqrt();
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| gamma[j] * (v - mean) * r + beta[j])
                    .collect()
            }
        }
    }
}

/// Applies `f` to every `d`-wide row of `x`.
pub fn rows(x: &[f64], d: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    x.chunks(d).flat_map(f).collect()
}

fn voxel_coords(i: usize, dims: [usize; 3]) -> [usize; 3] {
    [i / (dims[1] * dims[2]), i / dims[2] % dims[1], i % dims[2]]
}

pub fn brute_surface(mask: &[bool], dims: [usize; 3]) -> Vec<usize> {
    let offsets: [[i64; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    (0..mask.len())
        .filter(|&i| mask[i])
        .filter(|&i| {
            let p = voxel_coords(i, dims);
            offsets.iter().any(|o| {
                let q: Vec<i64> = (0..3).map(|a| p[a] as i64 + o[a]).collect();
                if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64) {
                    return true;
                }
                !mask[((q[0] as usize * dims[1]) + q[1] as usize) * dims[2] + q[2] as usize]
            })
        })
        .collect()
}

pub fn brute_hd95(pred: &[bool], gt: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> f64 {
    let sp = brute_surface(pred, dims);
    let sg = brute_surface(gt, dims);
    let dist = |a: usize, b: usize| {
        let (p, q) = (voxel_coords(a, dims), voxel_coords(b, dims));
        (0..3)
            .map(|k| {
                let t = (p[k] as f64 - q[k] as f64) * spacing[k];
                t * t
            })
            .sum::<f64>()
    };
    let directed = |from: &[usize], to: &[usize]| -> Vec<f64> {
        from.iter()
            .map(|&a| to.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min).sqrt())
            .collect()
    };
    let mut pooled = directed(&sp, &sg);
    pooled.extend(directed(&sg, &sp));
    pooled.sort_by(f64::total_cmp);
    let rank = (0.95 * pooled.len() as f64).ceil() as usize;
    pooled[rank.max(1) - 1]
}

pub fn brute_dice(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let total = pred.iter().filter(|v| **v).count() + gt.iter().filter(|v| **v).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}
