//! Loop-based reference implementations shared by the integration tests.

#![allow(dead_code)]

use vavae_core::numerics::Tensor;

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / ((na + 1e-12).sqrt() * (nb + 1e-12).sqrt())
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

pub fn oracle_mcos(zp: &Tensor, f: &Tensor, m1: f64) -> f64 {
    let (a, b) = (rows(zp), rows(f));
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (1.0 - m1 - cos(&a[i], &b[i])).max(0.0);
    }
    s / a.len() as f64
}

pub fn oracle_mdms(z: &Tensor, f: &Tensor, m2: f64) -> f64 {
    let (a, b) = (rows(z), rows(f));
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = (cos(&a[i], &a[j]) - cos(&b[i], &b[j])).abs();
            s += (d - m2).max(0.0);
        }
    }
    s / (n * n) as f64
}

pub fn oracle_project(z: &Tensor, w: &Tensor) -> Vec<f64> {
    let (d_f, d_z) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::new();
    for zi in rows(z) {
        for r in 0..d_f {
            let mut acc = 0.0;
            for c in 0..d_z {
                acc += w.data()[r * d_z + c] * zi[c];
            }
            out.push(acc);
        }
    }
    out
}
