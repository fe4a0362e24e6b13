//! Reference implementations used only as test oracles. They share no code
//! with the library: BBAs are dense vectors indexed by focal-set bitmask,
//! information measures come from probability tables, and the lasso is
//! solved by coordinate descent.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Dense BBA: entry `b` is the mass of the focal set with bitmask `b`
/// (entry 0 unused).
pub type Dense = Vec<f64>;

/// Random mass function on a frame of size `k` with up to `max_sets` focal
/// sets (repeats allowed, they accumulate).
pub fn random_entries<R: Rng>(rng: &mut R, k: usize, max_sets: usize) -> Vec<(u64, f64)> {
    let n = rng.random_range(1..=max_sets);
    let raw: Vec<(u64, f64)> = (0..n)
        .map(|_| (rng.random_range(1..(1u64 << k)), rng.random_range(0.01..1.0)))
        .collect();
    let total: f64 = raw.iter().map(|(_, m)| m).sum();
    raw.into_iter().map(|(b, m)| (b, m / total)).collect()
}

/// Random probability vector of length `k`, optionally with exact zeros.
pub fn random_probabilities<R: Rng>(rng: &mut R, k: usize, allow_zeros: bool) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k)
            .map(|_| if allow_zeros && rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        let s: f64 = v.iter().sum();
        if s > 1e-3 {
            return v.into_iter().map(|x| x / s).collect();
        }
    }
}

pub fn to_dense(entries: &[(u64, f64)], k: usize) -> Dense {
    let mut d = vec![0.0; 1 << k];
    for &(b, m) in entries {
        d[b as usize] += m;
    }
    d
}

pub fn bayesian_dense(p: &[f64]) -> Dense {
    let mut d = vec![0.0; 1 << p.len()];
    for (i, &v) in p.iter().enumerate() {
        d[1 << i] = v;
    }
    d
}

/// Brute-force Dempster rule over every pair of focal sets. Returns the
/// normalized result and the conflict `K`.
pub fn dempster(a: &[(u64, f64)], b: &[(u64, f64)]) -> (BTreeMap<u64, f64>, f64) {
    let mut joint: BTreeMap<u64, f64> = BTreeMap::new();
    let mut conflict = 0.0;
    for &(x, mx) in a {
        for &(y, my) in b {
            let z = x & y;
            if z == 0 {
                conflict += mx * my;
            } else {
                *joint.entry(z).or_insert(0.0) += mx * my;
            }
        }
    }
    for v in joint.values_mut() {
        *v /= 1.0 - conflict;
    }
    (joint, conflict)
}

pub fn dempster_dense(a: &Dense, b: &Dense) -> Option<Dense> {
    let mut out = vec![0.0; a.len()];
    let mut conflict = 0.0;
    for x in 1..a.len() {
        for y in 1..b.len() {
            let p = a[x] * b[y];
            if x & y == 0 {
                conflict += p;
            } else {
                out[x & y] += p;
            }
        }
    }
    if conflict >= 1.0 - 1e-12 {
        return None;
    }
    Some(out.into_iter().map(|v| v / (1.0 - conflict)).collect())
}

pub fn bjs(a: &Dense, b: &Dense) -> f64 {
    let mut s = 0.0;
    for i in 1..a.len() {
        let m = (a[i] + b[i]) / 2.0;
        if a[i] > 0.0 {
            s += a[i] * (a[i] / m).log2();
        }
        if b[i] > 0.0 {
            s += b[i] * (b[i] / m).log2();
        }
    }
    s / 2.0
}

pub fn jaccard(x: usize, y: usize) -> f64 {
    (x & y).count_ones() as f64 / (x | y).count_ones() as f64
}

/// `sqrt(Δᵀ Jac Δ)` over every non-empty subset.
pub fn jousselme(a: &Dense, b: &Dense) -> f64 {
    let mut q = 0.0;
    for x in 1..a.len() {
        for y in 1..a.len() {
            q += (a[x] - b[x]) * (a[y] - b[y]) * jaccard(x, y);
        }
    }
    q.max(0.0).sqrt()
}

pub fn deng(a: &Dense) -> f64 {
    let mut s = 0.0;
    for (x, &m) in a.iter().enumerate().skip(1) {
        if m > 0.0 {
            let denom = (1u64 << (x as u64).count_ones()) as f64 - 1.0;
            s -= m * (m / denom).log10();
        }
    }
    s
}

fn mean_of(boes: &[&Dense]) -> Dense {
    let mut out = vec![0.0; boes[0].len()];
    for m in boes {
        for (o, v) in out.iter_mut().zip(m.iter()) {
            *o += v;
        }
    }
    out.iter().map(|v| v / boes.len() as f64).collect()
}

fn spread_of(boes: &[&Dense]) -> f64 {
    let c = mean_of(boes);
    boes.iter().map(|m| jousselme(m, &c)).sum::<f64>() / boes.len() as f64
}

/// Every intermediate of the weighted fusion, computed from scratch.
#[derive(Debug, Clone)]
pub struct NaiveFusion {
    pub abjs: Vec<f64>,
    pub m_star: Vec<f64>,
    pub sd_hat: Vec<f64>,
    pub entropy: Vec<f64>,
    pub cd_hat: Vec<f64>,
    pub chief: usize,
    pub sd_chief_hat: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub wae: Dense,
    pub fused: Dense,
}

/// Returns `None` on degenerate weights or total conflict.
pub fn naive_fusion(boes: &[Dense], theta: f64, sigma: f64, eps: f64) -> Option<NaiveFusion> {
    let n = boes.len();
    let all: Vec<&Dense> = boes.iter().collect();
    let abjs: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| bjs(&boes[i], &boes[j])).sum::<f64>() / (n - 1) as f64)
        .collect();
    let sw = spread_of(&all);
    let m_star: Vec<f64> = (0..n)
        .map(|q| {
            let others: Vec<&Dense> = (0..n).filter(|&j| j != q).map(|j| &boes[j]).collect();
            0.5 + ((sw - spread_of(&others)) / sigma).atan() / std::f64::consts::PI
        })
        .collect();
    let sd: Vec<f64> = (0..n).map(|i| 1.0 / (abjs[i].max(eps) * m_star[i])).collect();
    let sd_sum: f64 = sd.iter().sum();
    let sd_hat: Vec<f64> = sd.iter().map(|v| v / sd_sum).collect();
    let entropy: Vec<f64> = boes.iter().map(deng).collect();
    let cd: Vec<f64> = (0..n).map(|i| entropy[i].exp() * sd_hat[i]).collect();
    let cd_max = cd.iter().copied().fold(f64::MIN, f64::max);
    let cd_hat: Vec<f64> = cd.iter().map(|v| v / cd_max).collect();

    let mean = mean_of(&all);
    let k = mean.len().trailing_zeros() as usize;
    let mut chief = 0;
    for c in 1..k {
        if mean[1 << c] > mean[1 << chief] {
            chief = c;
        }
    }
    let support: Vec<f64> = boes.iter().map(|m| m[1 << chief]).collect();
    let s_max = support.iter().copied().fold(f64::MIN, f64::max);
    let sd_chief_hat: Vec<f64> = support.iter().map(|v| v / s_max).collect();

    let w: Vec<f64> = (0..n).map(|i| theta * cd_hat[i] + (1.0 - theta) * sd_chief_hat[i]).collect();
    let w_sum: f64 = w.iter().sum();
    if w_sum <= eps {
        return None;
    }
    let w_hat: Vec<f64> = w.iter().map(|v| v / w_sum).collect();
    let mut wae = vec![0.0; mean.len()];
    for (m, wi) in boes.iter().zip(&w_hat) {
        for (o, v) in wae.iter_mut().zip(m.iter()) {
            *o += wi * v;
        }
    }
    if wae.iter().any(|&v| v < -1e-12) {
        return None;
    }
    let mut fused = wae.clone();
    for _ in 1..n {
        fused = dempster_dense(&fused, &wae)?;
    }
    Some(NaiveFusion {
        abjs,
        m_star,
        sd_hat,
        entropy,
        cd_hat,
        chief,
        sd_chief_hat,
        w_hat,
        wae,
        fused,
    })
}

fn table(vars: &[&[usize]]) -> BTreeMap<Vec<usize>, f64> {
    let n = vars[0].len();
    let mut t = BTreeMap::new();
    for s in 0..n {
        *t.entry(vars.iter().map(|v| v[s]).collect::<Vec<_>>()).or_insert(0.0) += 1.0 / n as f64;
    }
    t
}

/// `Σ p(x,y) log2(p(x,y) / (p(x) p(y)))`.
pub fn mi(x: &[usize], y: &[usize]) -> f64 {
    let pxy = table(&[x, y]);
    let px = table(&[x]);
    let py = table(&[y]);
    pxy.iter()
        .map(|(k, &p)| p * (p / (px[&vec![k[0]]] * py[&vec![k[1]]])).log2())
        .sum()
}

/// `Σ p(x,y,z) log2(p(z) p(x,y,z) / (p(x,z) p(y,z)))`.
pub fn cmi(x: &[usize], y: &[usize], z: &[usize]) -> f64 {
    let pxyz = table(&[x, y, z]);
    let pxz = table(&[x, z]);
    let pyz = table(&[y, z]);
    let pz = table(&[z]);
    pxyz.iter()
        .map(|(k, &p)| {
            let (a, b, c) = (k[0], k[1], k[2]);
            p * (pz[&vec![c]] * p / (pxz[&vec![a, c]] * pyz[&vec![b, c]])).log2()
        })
        .sum()
}

/// MI of the paired variable `(x, w)` with `y`.
pub fn pair_mi(x: &[usize], w: &[usize], y: &[usize]) -> f64 {
    let width = x.iter().chain(w).max().copied().unwrap_or(0) + 1;
    let pair: Vec<usize> = x.iter().zip(w).map(|(a, b)| a * width + b).collect();
    mi(&pair, y)
}

/// Greedy three-rule ranking evaluated with the table-based measures.
pub fn rank_bruteforce(preds: &[Vec<usize>], y: &[usize]) -> Vec<usize> {
    let tol = 1e-12;
    let argmax = |cands: &[usize], f: &dyn Fn(usize) -> f64| -> usize {
        let mut best = cands[0];
        let mut best_s = f(best);
        for &c in &cands[1..] {
            let s = f(c);
            if s > best_s + tol {
                best = c;
                best_s = s;
            }
        }
        best
    };
    let mut rest: Vec<usize> = (0..preds.len()).collect();
    let mut order = Vec::new();
    let first = argmax(&rest, &|i| mi(&preds[i], y));
    order.push(first);
    rest.retain(|&i| i != first);
    if !rest.is_empty() {
        let o = order.clone();
        let second = argmax(&rest, &|i| {
            o.iter().map(|&j| cmi(&preds[i], y, &preds[j])).fold(f64::MIN, f64::max)
        });
        order.push(second);
        rest.retain(|&i| i != second);
    }
    while !rest.is_empty() {
        let o = order.clone();
        let next = argmax(&rest, &|i| {
            o.iter().map(|&j| pair_mi(&preds[i], &preds[j], y)).fold(f64::MAX, f64::min)
        });
        order.push(next);
        rest.retain(|&i| i != next);
    }
    order
}

/// Centers columns and scales them to unit norm (no exclusion logic).
pub fn standardize(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let norm = col.norm();
        col /= norm;
    }
    out
}

/// Minimizes `½‖y − Xβ‖² + λ‖β‖₁` by cyclic coordinate descent on unit-norm
/// columns.
pub fn lasso_cd(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Vec<f64> {
    let p = x.ncols();
    let mut beta = vec![0.0; p];
    let mut r = y.clone();
    for _ in 0..2_000_000 {
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let col = x.column(j);
            let rho = col.dot(&r) + beta[j];
            let new = rho.signum() * (rho.abs() - lambda).max(0.0);
            let change = new - beta[j];
            if change != 0.0 {
                r.axpy(-change, &col, 1.0);
                beta[j] = new;
                max_change = max_change.max(change.abs());
            }
        }
        if max_change < 1e-14 {
            break;
        }
    }
    beta
}

/// Central finite-difference gradient.
pub fn numeric_gradient(f: &dyn Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut p = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
