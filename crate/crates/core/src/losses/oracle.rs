//! Scalar nested-loop reference implementations in `f64`, written for
//! readability rather than speed. They mirror the fast paths term by term.

use super::mlm::FocalForm;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn oracle_exclusive_nce(
    anchor: &[Vec<f64>],
    positives: [&[Vec<f64>]; 3],
    present: [&[bool]; 3],
    tau: f64,
) -> f64 {
    let b = anchor.len();
    let mut loss = 0.0;
    for i in 0..b {
        let mut z = 0.0;
        for j in 0..b {
            if j == i {
                continue;
            }
            for q in 0..3 {
                if present[q][j] {
                    z += (dot(&anchor[i], &positives[q][j]) / tau).exp();
                }
            }
        }
        for p in 0..3 {
            if !present[p][i] {
                continue;
            }
            let e = (dot(&anchor[i], &positives[p][i]) / tau).exp();
            loss += -(e / (e + z)).ln();
        }
    }
    loss
}

pub fn oracle_reverse(
    targets: &[Vec<f64>],
    queries: [&[Vec<f64>]; 3],
    present: [&[bool]; 3],
    tau: f64,
) -> f64 {
    let b = targets.len();
    let mut loss = 0.0;
    for q in 0..3 {
        for i in 0..b {
            if !present[q][i] {
                continue;
            }
            let mut denom = 0.0;
            for j in 0..b {
                denom += (dot(&queries[q][i], &targets[j]) / tau).exp();
            }
            let num = (dot(&queries[q][i], &targets[i]) / tau).exp();
            loss += -(num / denom).ln();
        }
    }
    loss
}

pub fn oracle_rank(s_pos: &[f64], s_tm: &[f64], s_vm: &[f64], tau: f64, lambda: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..s_pos.len() {
        let a = -(s_pos[i] - s_tm[i]) / tau + lambda;
        let b = -(s_pos[i] - s_vm[i]) / tau + lambda;
        total += if a > 0.0 { a } else { 0.0 };
        total += if b > 0.0 { b } else { 0.0 };
    }
    total / s_pos.len() as f64
}

pub fn oracle_focal(logits: &[Vec<f64>], targets: &[usize], gamma: f64, form: FocalForm) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let mut max = f64::NEG_INFINITY;
        for &x in row {
            if x > max {
                max = x;
            }
        }
        let mut denom = 0.0;
        for &x in row {
            denom += (x - max).exp();
        }
        let p = (row[t] - max).exp() / denom;
        let w = (1.0 - p).powf(gamma);
        total += match form {
            FocalForm::Standard => w * -p.ln(),
            FocalForm::AsPrinted => -w * p,
        };
    }
    total / targets.len() as f64
}
