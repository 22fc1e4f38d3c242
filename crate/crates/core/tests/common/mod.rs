//! Naive reference implementations shared by the integration tests.
#![allow(dead_code)]

use lumiq::Tensor4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Zero-padded cross-correlation, six nested loops over the output and the window.
pub fn naive_conv(x: &Tensor4, k: &Tensor4, bias: Option<&Tensor4>, stride: usize, pad: usize) -> Tensor4 {
    let [b, ci, h, w] = x.dims();
    let [co, _, kh, kw] = k.dims();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor4::zeros([b, co, oh, ow]);
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = bias.map_or(0.0, |bb| bb.data()[o]);
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x.at(n, c, iy as usize, ix as usize) * k.at(o, c, dy, dx);
                            }
                        }
                    }
                    out.set(n, o, y, xx, s);
                }
            }
        }
    }
    out
}

pub fn leaky(x: &Tensor4, slope: f64) -> Tensor4 {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn max_diff(a: &Tensor4, b: &Tensor4) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.max_abs_diff(b)
}

pub fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Per-item `G[i][j] = Σ_p F[i,p] F[j,p]` by explicit double loop.
pub fn naive_gram(f: &Tensor4, item: usize) -> Vec<Vec<f64>> {
    let [_, c, h, w] = f.dims();
    let mut g = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += f.at(item, i, y, x) * f.at(item, j, y, x);
                }
            }
            g[i][j] = s;
        }
    }
    g
}

/// `log σ(x)` by the textbook branch formula.
pub fn log_sigmoid_ref(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
