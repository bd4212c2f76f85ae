//! Ordered temporal alignment over a padded cost matrix.
//!
//! Rows are query frames, columns are support frames with a zero-cost
//! padding column on each side (`0` and `Ts + 1`). A path starts at `(0, 0)`
//! and ends at `(Tq - 1, Ts + 1)`. Moves:
//!
//! * right `(i, j-1) -> (i, j)`, anywhere;
//! * down `(i-1, j) -> (i, j)`, only inside a padding column;
//! * diagonal `(i-1, j-1) -> (i, j)`, only between two real columns.
//!
//! Padding lets a path skip leading and trailing query frames. Diagonals
//! that touch padding would duplicate a right+down pair of equal cost, so
//! they are left out; the hard minimum is unaffected and every alignment is
//! counted once by the soft minimum.

use crate::error::{Error, Result};

/// Soft minimum with temperature `lambda` and its weights. `lambda == 0`
/// is the hard minimum (ties to the first candidate).
fn softmin(vals: &[f64], lambda: f64) -> (f64, [f64; 2]) {
    let mut w = [0.0; 2];
    let (mut m, mut arg) = (vals[0], 0);
    for (k, &v) in vals.iter().enumerate().skip(1) {
        if v < m {
            m = v;
            arg = k;
        }
    }
    if lambda == 0.0 || vals.len() == 1 {
        w[arg] = 1.0;
        return (m, w);
    }
    let mut z = 0.0;
    for (k, &v) in vals.iter().enumerate() {
        w[k] = (-(v - m) / lambda).exp();
        z += w[k];
    }
    for x in w.iter_mut().take(vals.len()) {
        *x /= z;
    }
    (m - lambda * z.ln(), w)
}

fn check(cost: &[f64], tq: usize, ts: usize) -> Result<()> {
    if tq == 0 || ts == 0 {
        return Err(Error::Input("alignment needs non-empty sequences".into()));
    }
    if cost.len() != tq * ts {
        return Err(Error::dim("otam", &[cost.len()], &[tq, ts]));
    }
    Ok(())
}

/// Alignment cost of a row-major `tq x ts` cost matrix and its gradient
/// with respect to every entry.
pub fn otam_dp(cost: &[f64], tq: usize, ts: usize, lambda: f64) -> Result<(f64, Vec<f64>)> {
    check(cost, tq, ts)?;
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let w = ts + 2;
    let pad = |i: usize, j: usize| if j == 0 || j == ts + 1 { 0.0 } else { cost[i * ts + j - 1] };
    let mut d = vec![0.0; tq * w];
    // predecessor cells and soft-min weights per cell
    let mut pred: Vec<([usize; 2], [f64; 2], usize)> = vec![([0; 2], [0.0; 2], 0); tq * w];
    for j in 1..w {
        d[j] = pad(0, j) + d[j - 1];
        pred[j] = ([j - 1, 0], [1.0, 0.0], 1);
    }
    for i in 1..tq {
        let row = i * w;
        d[row] = pad(i, 0) + d[row - w];
        pred[row] = ([row - w, 0], [1.0, 0.0], 1);
        for j in 1..w {
            let right = row + j - 1;
            let other = if j == ts + 1 {
                Some(row - w + j)
            } else if j >= 2 {
                Some(row - w + j - 1)
            } else {
                None
            };
            let (v, wts, n) = match other {
                Some(o) => {
                    let (v, wts) = softmin(&[d[right], d[o]], lambda);
                    (v, ([right, o], wts), 2)
                }
                None => (d[right], ([right, 0], [1.0, 0.0]), 1),
            };
            d[row + j] = pad(i, j) + v;
            pred[row + j] = (wts.0, wts.1, n);
        }
    }
    let last = tq * w - 1;
    let mut e = vec![0.0; tq * w];
    e[last] = 1.0;
    let mut grad = vec![0.0; tq * ts];
    for cell in (1..=last).rev() {
        let g = e[cell];
        if g == 0.0 {
            continue;
        }
        let (i, j) = (cell / w, cell % w);
        if j >= 1 && j <= ts {
            grad[i * ts + j - 1] += g;
        }
        let (ps, ws, n) = pred[cell];
        for k in 0..n {
            e[ps[k]] += g * ws[k];
        }
    }
    Ok((d[last], grad))
}

/// Every admissible path as a list of padded `(row, column)` cells.
pub fn otam_paths(tq: usize, ts: usize) -> Vec<Vec<(usize, usize)>> {
    fn walk(path: &mut Vec<(usize, usize)>, tq: usize, ts: usize, out: &mut Vec<Vec<(usize, usize)>>) {
        let (i, j) = *path.last().unwrap();
        if (i, j) == (tq - 1, ts + 1) {
            out.push(path.clone());
            return;
        }
        let mut next = Vec::new();
        if j < ts + 1 {
            next.push((i, j + 1));
        }
        if i + 1 < tq {
            if j == 0 || j == ts + 1 {
                next.push((i + 1, j));
            }
            if j >= 1 && j < ts {
                next.push((i + 1, j + 1));
            }
        }
        for c in next {
            path.push(c);
            walk(path, tq, ts, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    walk(&mut vec![(0, 0)], tq, ts, &mut out);
    out
}

/// Reference value by enumeration: hard minimum for `lambda == 0`, else
/// `-lambda * ln(sum(exp(-cost / lambda)))` over all paths.
pub fn otam_brute_force(cost: &[f64], tq: usize, ts: usize, lambda: f64) -> Result<f64> {
    check(cost, tq, ts)?;
    let sums: Vec<f64> = otam_paths(tq, ts)
        .iter()
        .map(|p| {
            p.iter().fold(0.0, |acc, &(i, j)| {
                let c = if j == 0 || j == ts + 1 { 0.0 } else { cost[i * ts + j - 1] };
                acc + c
            })
        })
        .collect();
    let m = sums.iter().cloned().fold(f64::INFINITY, f64::min);
    if lambda == 0.0 {
        return Ok(m);
    }
    let z: f64 = sums.iter().map(|s| (-(s - m) / lambda).exp()).sum();
    Ok(m - lambda * z.ln())
}
