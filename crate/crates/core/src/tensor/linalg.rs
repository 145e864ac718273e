use super::{Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

/// `out[m,n] (+)= a[m,k] · b[k,n]`, each output row accumulated in k order.
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`.
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`.
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

struct MatmulDims {
    batch: Vec<usize>,
    batches: usize,
    batches_a: usize,
    batches_b: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (ba, mk) = a.split_at(a.len() - 2);
    let (bb, kn) = b.split_at(b.len() - 2);
    if mk[1] != kn[0] {
        return Err(Error::shape("matmul", a, b));
    }
    let batch = if ba.len() >= bb.len() && ba.ends_with(bb) {
        ba.to_vec()
    } else if bb.ends_with(ba) {
        bb.to_vec()
    } else {
        return Err(Error::shape("matmul", a, b));
    };
    Ok(MatmulDims {
        batches: batch.iter().product(),
        batches_a: ba.iter().product(),
        batches_b: bb.iter().product(),
        batch,
        m: mk[0],
        k: mk[1],
        n: kn[1],
    })
}

/// Plain (untaped) batched product; leading batch dims broadcast by suffix.
pub(crate) fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let (m, k, n) = (d.m, d.k, d.n);
    let mut out = vec![0.0; d.batches * m * n];
    let work = d.batches * m * k * n;
    par::for_each_chunk(&mut out, m * n, work, |bi, chunk| {
        let ia = bi % d.batches_a;
        let ib = bi % d.batches_b;
        gemm_nn(
            &a.data()[ia * m * k..(ia + 1) * m * k],
            &b.data()[ib * k * n..(ib + 1) * k * n],
            chunk,
            m,
            k,
            n,
        );
    });
    let mut shape = d.batch.clone();
    shape.extend([m, n]);
    Tensor::new(shape, out)
}

impl<'t> Var<'t> {
    /// Batched matrix product `[.., m, k] · [.., k, n] → [.., m, n]`.
    ///
    /// Batch dimensions must agree or one side's batch shape must be a
    /// suffix of the other's (in particular, a plain matrix broadcasts).
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let y = matmul_values(&a, &b)?;
        let d = matmul_dims(a.shape(), b.shape())?;
        Ok(self.tape.record(
            &[self, other],
            y,
            Box::new(move |g, _, needs| {
                let (m, k, n) = (d.m, d.k, d.n);
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; a.len()];
                    if d.batches_a == d.batches {
                        let work = d.batches * m * k * n;
                        par::for_each_chunk(&mut ga, m * k, work, |bi, chunk| {
                            let ib = bi % d.batches_b;
                            gemm_nt(
                                &g.data()[bi * m * n..(bi + 1) * m * n],
                                &b.data()[ib * k * n..(ib + 1) * k * n],
                                chunk,
                                m,
                                k,
                                n,
                            );
                        });
                    } else {
                        for bi in 0..d.batches {
                            let ia = bi % d.batches_a;
                            let ib = bi % d.batches_b;
                            gemm_nt(
                                &g.data()[bi * m * n..(bi + 1) * m * n],
                                &b.data()[ib * k * n..(ib + 1) * k * n],
                                &mut ga[ia * m * k..(ia + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    Tensor::new(a.shape().to_vec(), ga).expect("a shape")
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; b.len()];
                    if d.batches_b == d.batches {
                        let work = d.batches * m * k * n;
                        par::for_each_chunk(&mut gb, k * n, work, |bi, chunk| {
                            let ia = bi % d.batches_a;
                            gemm_tn(
                                &a.data()[ia * m * k..(ia + 1) * m * k],
                                &g.data()[bi * m * n..(bi + 1) * m * n],
                                chunk,
                                m,
                                k,
                                n,
                            );
                        });
                    } else {
                        for bi in 0..d.batches {
                            let ia = bi % d.batches_a;
                            let ib = bi % d.batches_b;
                            gemm_tn(
                                &a.data()[ia * m * k..(ia + 1) * m * k],
                                &g.data()[bi * m * n..(bi + 1) * m * n],
                                &mut gb[ib * k * n..(ib + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    Tensor::new(b.shape().to_vec(), gb).expect("b shape")
                });
                vec![ga, gb]
            }),
        ))
    }
}
