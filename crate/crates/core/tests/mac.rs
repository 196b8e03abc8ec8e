mod common;

use aloha_num::delay::{link_delay, throughputs};
use aloha_num::mac::{
    mac_objective, mac_suboptimal, min_dc, run_mac_distributed, solve_mac_centralized, MacDistributedOptions,
    MacState, Weights,
};
use aloha_num::network::{build_linear, build_sample10, build_star, Topology};
use aloha_num::Error;
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Grid over `(p01, p10)` at 1e-3 resolution; returns `1 / max min x`.
fn pair_min_dc_by_grid() -> f64 {
    let mut best = 0.0f64;
    for i in 0..=1000 {
        let a = i as f64 / 1000.0;
        for j in 0..=1000 {
            let b = j as f64 / 1000.0;
            best = best.max((a * (1.0 - b)).min(b * (1.0 - a)));
        }
    }
    1.0 / best
}

#[test]
fn pair_min_dc_matches_grid() {
    let t = build_linear(2).unwrap();
    let m = min_dc(&t).unwrap();
    assert!((m.value - 4.0).abs() <= 1e-3, "{}", m.value);
    assert!((m.value - pair_min_dc_by_grid()).abs() <= 1e-3);
    for &p in m.state.link_probs() {
        assert!((p - 0.5).abs() < 1e-3);
    }
}

/// Mirror-symmetric grid for the 4-node line: `a` on the end links, `b` on the
/// links into the ends, `c` on the middle links.
fn line4_min_dc_by_grid() -> f64 {
    const N: usize = 200;
    let mut best = 0.0f64;
    for i in 0..=N {
        let a = i as f64 / N as f64;
        for j in 0..=N {
            for k in 0..=N - j {
                let (b, c) = (j as f64 / N as f64, k as f64 / N as f64);
                let inner = 1.0 - b - c;
                let x = (a * inner * inner).min(b * (1.0 - a)).min(c * inner * (1.0 - a));
                best = best.max(x);
            }
        }
    }
    1.0 / best
}

#[test]
fn line4_min_dc_matches_grid() {
    let m = min_dc(&build_linear(4).unwrap()).unwrap().value;
    let grid = line4_min_dc_by_grid();
    assert!(m <= grid + 1e-9 && rel(m, grid) < 5e-3, "solver {m} grid {grid}");
}

#[test]
fn min_dc_profile_over_sizes() {
    let line: Vec<f64> = (4..=32).step_by(4).map(|n| min_dc(&build_linear(n).unwrap()).unwrap().value).collect();
    assert!(line.windows(2).all(|w| w[1] >= w[0] - 1e-9), "linear profile {line:?}");
    assert!(line[7] / line[1] <= 1.3, "linear profile {line:?}");
    // interior links approach p (1 - 2p)^2 at p = 1/6
    assert!(line[7] < 13.5 && 13.5 - line[7] < 0.1, "linear profile {line:?}");

    let star: Vec<f64> = (4..=16).map(|n| min_dc(&build_star(n).unwrap()).unwrap().value).collect();
    assert!(star.windows(2).all(|w| w[1] >= w[0] - 1e-9), "star profile {star:?}");
    assert!(star[16 - 4] / star[8 - 4] >= 1.5, "star profile {star:?}");
}

/// Zooming grid over `(p01, p10, r01, r10)` for the pair network.
fn pair_objective_by_grid(w: &Weights) -> f64 {
    let t = build_linear(2).unwrap();
    let eval = |v: [f64; 4]| -> f64 {
        let (p, r) = ([v[0], v[1]], [v[2], v[3]]);
        if p.iter().any(|&q| !(0.0..=1.0).contains(&q)) || r.iter().any(|&q| q <= 0.0) {
            return f64::INFINITY;
        }
        let x = throughputs(&t, &p);
        for k in 0..2 {
            match link_delay(x[k], r[k]) {
                Ok(d) if d <= w.dc => {}
                _ => return f64::INFINITY,
            }
        }
        let state = MacState::new(&t, p.to_vec()).unwrap();
        mac_objective(&t, w, &state, &r).unwrap()
    };
    const N: usize = 24;
    let mut lo = [0.0, 0.0, 1e-4, 1e-4];
    let mut hi = [1.0, 1.0, 0.5, 0.5];
    let mut best = (f64::INFINITY, [0.0; 4]);
    for _ in 0..60 {
        let h: Vec<f64> = (0..4).map(|d| (hi[d] - lo[d]) / N as f64).collect();
        for a in 0..=N {
            for b in 0..=N {
                for c in 0..=N {
                    for e in 0..=N {
                        let v = [
                            lo[0] + h[0] * a as f64,
                            lo[1] + h[1] * b as f64,
                            lo[2] + h[2] * c as f64,
                            lo[3] + h[3] * e as f64,
                        ];
                        let f = eval(v);
                        if f < best.0 {
                            best = (f, v);
                        }
                    }
                }
            }
        }
        for d in 0..4 {
            lo[d] = (best.1[d] - 2.0 * h[d]).max(if d < 2 { 0.0 } else { 1e-9 });
            hi[d] = best.1[d] + 2.0 * h[d];
        }
    }
    best.0
}

#[test]
fn centralized_pair_matches_dense_grid() {
    let t = build_linear(2).unwrap();
    let w = Weights::new(5.0, 0.1, 100.0).unwrap();
    let sol = solve_mac_centralized(&t, &w).unwrap();
    let grid = pair_objective_by_grid(&w);
    assert!(sol.objective <= grid + 1e-3, "solver {} grid {grid}", sol.objective);
    assert!((sol.objective - grid).abs() <= 1e-3, "solver {} grid {grid}", sol.objective);
    assert!(sol.report.kkt_residual <= 1e-6, "kkt {}", sol.report.kkt_residual);
}

fn check_solution(t: &Topology, w: &Weights) {
    let sol = solve_mac_centralized(t, w).unwrap();
    assert!(sol.report.kkt_residual <= 1e-6, "kkt {}", sol.report.kkt_residual);
    let delays = sol.delays(t).unwrap();
    for (k, d) in delays.iter().enumerate() {
        assert!(*d <= w.dc * (1.0 + 1e-6), "link {k} delay {d}");
        if sol.duals[k] > 1e-4 {
            assert!(*d >= w.dc * (1.0 - 1e-3), "link {k}: dual {} but delay {d}", sol.duals[k]);
        }
    }
}

#[test]
fn centralized_solutions_are_feasible_and_complementary() {
    let w = Weights::new(5.0, 0.1, 100.0).unwrap();
    for t in [
        build_linear(2).unwrap(),
        build_linear(4).unwrap(),
        build_star(5).unwrap(),
        build_sample10().topology().clone(),
    ] {
        check_solution(&t, &w);
    }
    let t = build_sample10().topology().clone();
    for (l1, l2, dc) in [(0.0, 1.0, 50.0), (1.0, 1.0, 30.0), (10.0, 0.01, 1000.0)] {
        check_solution(&t, &Weights::new(l1, l2, dc).unwrap());
    }
}

#[test]
fn bound_below_min_dc_is_infeasible() {
    let t = build_star(6).unwrap();
    let m = min_dc(&t).unwrap().value;
    let err = solve_mac_centralized(&t, &Weights::new(1.0, 1.0, 0.9 * m).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Infeasible { .. }), "{err}");
}

#[test]
fn objective_non_increasing_in_bound() {
    let t = build_sample10().topology().clone();
    let mut last = f64::INFINITY;
    for dc in [40.0, 60.0, 100.0, 300.0, 1000.0] {
        let obj = solve_mac_centralized(&t, &Weights::new(5.0, 0.1, dc).unwrap()).unwrap().objective;
        assert!(obj <= last + 1e-6, "dc {dc}: {obj} after {last}");
        last = obj;
    }
}

#[test]
fn distributed_reaches_centralized_point() {
    let w = Weights::new(5.0, 0.1, 100.0).unwrap();
    for t in [build_linear(2).unwrap(), build_linear(4).unwrap()] {
        let sol = solve_mac_centralized(&t, &w).unwrap();
        let trace = run_mac_distributed(&t, &w, &MacDistributedOptions::default(), Some(&sol)).unwrap();
        assert!(trace.iterations_to(0.01).is_some());
        for k in 0..t.link_count() {
            assert!(rel(trace.state.link_probs()[k], sol.state.link_probs()[k]) < 0.01);
            assert!(rel(trace.rates.r[k], sol.rates.r[k]) < 0.01);
        }
    }
}

#[test]
fn distributed_iterations_flat_in_line_length() {
    let w = Weights::new(5.0, 0.1, 100.0).unwrap();
    let counts: Vec<usize> = [4, 8, 16, 32]
        .iter()
        .map(|&n| {
            let t = build_linear(n).unwrap();
            let sol = solve_mac_centralized(&t, &w).unwrap();
            let trace = run_mac_distributed(&t, &w, &MacDistributedOptions::default(), Some(&sol)).unwrap();
            trace.iterations_to(0.01).unwrap()
        })
        .collect();
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(*hi <= 2 * lo, "{counts:?}");
}

#[test]
fn distributed_sample_network_converges() {
    let t = build_sample10().topology().clone();
    let w = Weights::new(5.0, 0.1, 100.0).unwrap();
    let sol = solve_mac_centralized(&t, &w).unwrap();
    let trace = run_mac_distributed(&t, &w, &MacDistributedOptions::default(), Some(&sol)).unwrap();
    let n = trace.iterations_to(0.01).unwrap();
    assert!(n < 100, "{n}");
}

#[test]
fn oversized_step_is_reported_as_divergence() {
    let t = build_linear(4).unwrap();
    let w = Weights::new(5.0, 0.1, 100.0).unwrap();
    let mut o = MacDistributedOptions::default();
    o.schedule.alpha = o.schedule.alpha.scaled(10.0);
    o.max_iters = 1000;
    let err = run_mac_distributed(&t, &w, &o, None).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert!(err.to_string().contains("smaller step"));
}

#[test]
fn suboptimal_rule_is_tight_on_sample_network() {
    let t = build_sample10().topology().clone();
    for l1 in [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0] {
        let w = Weights::new(l1, 1.0, 100.0).unwrap();
        let opt = solve_mac_centralized(&t, &w).unwrap();
        let sub = mac_suboptimal(&t, &w).unwrap();
        assert_eq!(sub.infeasible_links(), 0, "lambda1 {l1}");
        assert!(sub.objective >= opt.objective - 1e-6 * opt.objective.abs().max(1.0));
        let gap = (sub.objective - opt.objective) / opt.objective.abs();
        assert!(gap <= 0.05, "lambda1 {l1}: gap {gap}");
        let x = sub.state.throughputs(&t);
        for (k, r) in sub.rates.r.iter().enumerate() {
            let d = link_delay(x[k], *r).unwrap();
            assert!(rel(d, 100.0) < 1e-9, "link {k}: {d}");
        }
    }
}

#[test]
fn suboptimal_rule_fails_near_min_dc() {
    let t = build_sample10().topology().clone();
    let m = min_dc(&t).unwrap().value;
    let sub = mac_suboptimal(&t, &Weights::new(5.0, 0.1, 1.05 * m).unwrap()).unwrap();
    assert!(sub.infeasible_links() > 0);
}

#[test]
fn suboptimal_rule_fails_when_energy_dominates() {
    let t = build_sample10().topology().clone();
    let sub = mac_suboptimal(&t, &Weights::new(10.0, 0.05, 100.0).unwrap()).unwrap();
    assert!(sub.infeasible_links() > 0);
    // the delay-constrained optimum keeps every link above 1 / D_c
    let opt = solve_mac_centralized(&t, &Weights::new(10.0, 0.05, 100.0).unwrap()).unwrap();
    assert!(opt.state.throughputs(&t).iter().all(|&x| x > 0.01));
}

#[test]
fn without_rate_weight_suboptimal_rule_is_infeasible() {
    let t = build_linear(4).unwrap();
    let w = Weights::new(1.0, 0.0, 100.0).unwrap();
    let sub = mac_suboptimal(&t, &w).unwrap();
    assert_eq!(sub.infeasible_links(), t.link_count());
    let opt = solve_mac_centralized(&t, &w).unwrap();
    assert!(opt.energy(&t) > 0.0);
    for d in opt.delays(&t).unwrap() {
        assert!(d <= 100.0 * (1.0 + 1e-6));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solutions_feasible_and_dominate_suboptimal(
        n in 2usize..6,
        l1 in 0.0f64..10.0,
        l2 in 0.01f64..2.0,
        slack in 1.2f64..20.0,
    ) {
        let t = build_linear(n).unwrap();
        let dc = slack * min_dc(&t).unwrap().value;
        let w = Weights::new(l1, l2, dc).unwrap();
        let sol = solve_mac_centralized(&t, &w).unwrap();
        for d in sol.delays(&t).unwrap() {
            prop_assert!(d <= dc * (1.0 + 1e-6));
        }
        prop_assert!(sol.report.kkt_residual <= 1e-6);
        let sub = mac_suboptimal(&t, &w).unwrap();
        if sub.infeasible_links() == 0 {
            prop_assert!(sub.objective >= sol.objective - 1e-6 * sol.objective.abs().max(1.0));
        }
    }
}
