//! Straight-loop reference implementations of the dense kernels.

use hica_vqa::numerics::Tensor2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-12;

pub type M = Vec<Vec<f64>>;

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.5..1.5))
        .collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

pub fn to_m(t: &Tensor2) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn mm(a: &M, b: &M) -> M {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn max_diff(a: &M, b: &Tensor2) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.shape());
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b.get(i, j)).abs());
        }
    }
    worst
}

pub fn attention_loop(x: &M, kv: &M, wq: &M, wk: &M, wv: &M, wo: &M, heads: usize) -> M {
    let q = mm(x, wq);
    let k = mm(kv, wk);
    let v = mm(kv, wv);
    let d_k = wq[0].len() / heads;
    let mut context = vec![vec![0.0; heads * d_k]; x.len()];
    for h in 0..heads {
        let off = h * d_k;
        for i in 0..x.len() {
            let mut scores = vec![0.0; kv.len()];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for c in 0..d_k {
                    dot += q[i][off + c] * k[j][off + c];
                }
                *s = dot / (d_k as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..d_k {
                let mut acc = 0.0;
                for j in 0..kv.len() {
                    acc += exps[j] / z * v[j][off + c];
                }
                context[i][off + c] = acc;
            }
        }
    }
    mm(&context, wo)
}

pub fn gelu_loop(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn ffn_loop(x: &M, w1: &M, b1: &[f64], w2: &M, b2: &[f64]) -> M {
    let mut h = mm(x, w1);
    for row in &mut h {
        for (v, b) in row.iter_mut().zip(b1) {
            *v = gelu_loop(*v + b);
        }
    }
    let mut o = mm(&h, w2);
    for row in &mut o {
        for (v, b) in row.iter_mut().zip(b2) {
            *v += b;
        }
    }
    o
}

pub fn layer_norm_loop(x: &M, gain: &[f64], bias: &[f64]) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .zip(gain.iter().zip(bias))
                .map(|(v, (g, b))| (v - mean) * inv * g + b)
                .collect()
        })
        .collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Shapes: (query rows, kv rows, d_model, heads), all ≤ 8.
pub fn shapes(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize, usize, usize)> {
    (0..n)
        .map(|_| {
            let d = rng.random_range(2..=8);
            let divisors: Vec<usize> = (1..=d).filter(|h| d % h == 0).collect();
            let heads = divisors[rng.random_range(0..divisors.len())];
            (rng.random_range(1..=8), rng.random_range(1..=8), d, heads)
        })
        .collect()
}
