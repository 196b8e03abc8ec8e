#![allow(dead_code)]

use aloha_num::mac::MacState;
use aloha_num::network::Topology;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Strictly interior persistence probabilities: every node transmits with a total
/// in `[0.1, 0.8]` split at random over its outgoing links.
pub fn interior_state(topology: &Topology, rng: &mut ChaCha8Rng) -> MacState {
    let mut p = vec![0.0; topology.link_count()];
    for i in 0..topology.node_count() {
        let out = topology.out_links(i);
        if out.is_empty() {
            continue;
        }
        let total = rng.random_range(0.1..0.8);
        let w: Vec<f64> = out.iter().map(|_| rng.random_range(0.2..1.0)).collect();
        let sum: f64 = w.iter().sum();
        for (&k, wk) in out.iter().zip(&w) {
            p[k] = total * wk / sum;
        }
    }
    MacState::new(topology, p).unwrap()
}

/// Central-difference gradient with per-coordinate step `1e-6 * max(|x_i|, 0.1)`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(0.1);
            buf[i] = x[i] + h;
            let up = f(&buf);
            buf[i] = x[i] - h;
            let down = f(&buf);
            buf[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max |a|`, the inf-norm relative error of `b` against `a`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Minimizer of `f` on `[lo, hi]` by repeated grid search: 201 points, then zoom to
/// the two cells around the best point, until the bracket is below `1e-13` relative.
/// Works on a log scale when `lo > 0`.
///
/// `f(u, c)` is called with the bracket centre `c` and only needs to be correct up
/// to a constant depending on `c`; writing it as a difference from `f(c)` keeps
/// flat objectives resolvable near the optimum.
pub fn grid_argmin(f: impl Fn(f64, f64) -> f64, lo: f64, hi: f64) -> f64 {
    let log = lo > 0.0;
    let (to, from): (fn(f64) -> f64, fn(f64) -> f64) = if log { (f64::ln, f64::exp) } else { (|v| v, |v| v) };
    let (mut a, mut b) = (to(lo), to(hi));
    const N: usize = 200;
    let mut best = a;
    while (b - a) > 1e-13 * a.abs().max(b.abs()).max(1.0) {
        let h = (b - a) / N as f64;
        let centre = from(0.5 * (a + b));
        let mut best_i = 0;
        let mut best_v = f64::INFINITY;
        for i in 0..=N {
            let v = f(from(a + h * i as f64), centre);
            if v < best_v {
                best_v = v;
                best_i = i;
            }
        }
        best = a + h * best_i as f64;
        let (na, nb) = (best - h, best + h);
        a = na.max(a);
        b = nb.min(b);
    }
    from(best).clamp(lo, hi)
}
