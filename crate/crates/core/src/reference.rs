//! Naive loop implementations used as independent oracles.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Triple-loop matrix product.
pub fn matmul_naive(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul_naive", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.get(&[i, p]) * b.get(&[p, j]);
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Zero-padded "same" cross-correlation, one output element at a time.
pub fn conv3d_naive(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 4 || kernel.rank() != 5 || kernel.shape()[1] != x.shape()[0] {
        return Err(Error::shape("conv3d_naive", x.shape(), kernel.shape()));
    }
    let (ci, t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kt, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[2],
        kernel.shape()[3],
        kernel.shape()[4],
    );
    let (pt, ph, pw) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut out = Vec::with_capacity(co * t * h * w);
    for o in 0..co {
        for tt in 0..t {
            for hh in 0..h {
                for ww in 0..w {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for i in 0..ci {
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let st = tt as isize + dt as isize - pt;
                                    let sh = hh as isize + dh as isize - ph;
                                    let sw = ww as isize + dw as isize - pw;
                                    if st < 0
                                        || sh < 0
                                        || sw < 0
                                        || st >= t as isize
                                        || sh >= h as isize
                                        || sw >= w as isize
                                    {
                                        continue;
                                    }
                                    acc += kernel.get(&[o, i, dt, dh, dw])
                                        * x.get(&[i, st as usize, sh as usize, sw as usize]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![co, t, h, w], out)
}
