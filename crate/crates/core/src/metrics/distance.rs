//! Exact Euclidean distance transform (separable lower-envelope method).

/// Squared distance from every voxel of a `dims` grid to the nearest voxel
/// with `feature[i] == true`, in physical units given by `spacing` (per
/// axis, same order as `dims`). Voxels are row-major with the last axis
/// fastest. Returns `f64::INFINITY` everywhere when there is no feature.
pub fn squared_edt(feature: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    assert_eq!(feature.len(), n);
    let mut f: Vec<f64> = feature
        .iter()
        .map(|&v| if v { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        // every line along `axis` starts at a voxel whose `axis` coord is 0
        for start in 0..n {
            if (start / stride) % len != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|i| f[start + i * stride]));
            envelope(&line, spacing[axis], &mut out);
            for (i, v) in out.iter().enumerate() {
                f[start + i * stride] = *v;
            }
        }
    }
    f
}

/// 1D pass: `out[p] = min_q f[q] + (step·(p − q))²`.
fn envelope(f: &[f64], step: f64, out: &mut Vec<f64>) {
    let w2 = step * step;
    let len = f.len();
    out.clear();
    out.resize(len, f64::INFINITY);
    let mut v: Vec<usize> = Vec::with_capacity(len);
    let mut z: Vec<f64> = Vec::with_capacity(len + 1);
    let intersect = |q: usize, r: usize| -> f64 {
        let (qf, rf) = (q as f64, r as f64);
        ((f[r] + w2 * rf * rf) - (f[q] + w2 * qf * qf)) / (2.0 * w2 * (rf - qf))
    };
    for q in 0..len {
        if f[q].is_infinite() {
            continue;
        }
        while let Some(&top) = v.last() {
            let s = intersect(top, q);
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        let s = v.last().map_or(f64::NEG_INFINITY, |&top| intersect(top, q));
        v.push(q);
        z.push(s);
    }
    if v.is_empty() {
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let t = (p as f64 - q as f64) * step;
        *o = f[q] + t * t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(feature: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
        let idx = |i: usize| [i / (dims[1] * dims[2]), i / dims[2] % dims[1], i % dims[2]];
        (0..feature.len())
            .map(|p| {
                let a = idx(p);
                (0..feature.len())
                    .filter(|&q| feature[q])
                    .map(|q| {
                        let b = idx(q);
                        (0..3)
                            .map(|k| {
                                let d = (a[k] as f64 - b[k] as f64) * spacing[k];
                                d * d
                            })
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn matches_brute_force() {
        let dims = [3, 4, 5];
        let mut state = 12345u64;
        for spacing in [[1.0, 1.0, 1.0], [2.0, 0.5, 1.5]] {
            for _ in 0..20 {
                let feature: Vec<bool> = (0..60)
                    .map(|_| {
                        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        (state >> 60) == 0
                    })
                    .collect();
                assert_eq!(squared_edt(&feature, dims, spacing), brute(&feature, dims, spacing));
            }
        }
    }

    #[test]
    fn no_feature_is_infinite() {
        assert!(squared_edt(&[false; 8], [2, 2, 2], [1.0; 3]).iter().all(|v| v.is_infinite()));
    }
}
