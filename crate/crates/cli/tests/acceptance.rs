//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use aloha_num::crosslayer::{
    link_budget_update, prob_gradient, run_xlayer_distributed, session_rate_update, solve_xlayer_centralized,
    XlayerDistributedOptions, XlayerVariant, XlayerWeights,
};
use aloha_num::delay::{link_delay, node_probabilities, throughput_derivative, throughput_of, throughputs};
use aloha_num::mac::{
    energy, mac_lagrangian, mac_lagrangian_gradient, mac_objective, mac_rate_update, min_dc, run_mac_distributed,
    solve_mac_centralized, suboptimal_rate, MacDistributedOptions, MacState, Weights,
};
use aloha_num::network::{build_linear, build_sample10, build_star};
use aloha_num::sim::{validate_delay_model, Tolerance};
use aloha_num::{EPS, RATE_FLOOR};
use aloha_num_cli::commands;
use aloha_num_cli::{CompareArgs, MinDcArgs};
use common::{fd_gradient, grid_argmin, interior_state, rel_error, rng};
use rand::Rng;

type Check = (bool, String);

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn pair_min_dc() -> Check {
    let m = min_dc(&build_linear(2).unwrap()).unwrap().value;
    let mut best = 0.0f64;
    for i in 0..=1000 {
        let a = i as f64 / 1000.0;
        for j in 0..=1000 {
            let b = j as f64 / 1000.0;
            best = best.max((a * (1.0 - b)).min(b * (1.0 - a)));
        }
    }
    let grid = 1.0 / best;
    ((m - 4.0).abs() <= 1e-3 && (m - grid).abs() <= 1e-3, format!("MinDc {m:.6}, grid oracle {grid:.6}"))
}

fn min_dc_profile() -> Check {
    let table = |spec: &str| {
        let args = MinDcArgs {
            network: vec![spec.parse().unwrap()],
        };
        commands::min_dc(&args).unwrap().table.numbers("min_dc")
    };
    let line = table("linear:4..32:4");
    let star = table("star:4..16");
    let line_ratio = line.iter().cloned().fold(0.0, f64::max) / line.iter().cloned().fold(f64::INFINITY, f64::min);
    let star_ratio = star[12] / star[4];
    let monotone = star.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    (
        line_ratio <= 1.3 && monotone && star_ratio >= 1.5,
        format!(
            "linear max/min {line_ratio:.3} (limit 1.3; MinDc {:.3} at n=4, {:.3} at n=32), star monotone {monotone}, star 16/8 {star_ratio:.3}",
            line[0], line[7]
        ),
    )
}

fn centralized_vs_grid() -> Check {
    let t = build_linear(2).unwrap();
    let w = Weights::new(5.0, 0.1, 100.0).unwrap();
    let sol = solve_mac_centralized(&t, &w).unwrap();
    let eval = |v: [f64; 4]| -> f64 {
        let (p, r) = ([v[0], v[1]], [v[2], v[3]]);
        if p.iter().any(|&q| !(0.0..=1.0).contains(&q)) || r.iter().any(|&q| q <= 0.0) {
            return f64::INFINITY;
        }
        let x = throughputs(&t, &p);
        if (0..2).any(|k| !matches!(link_delay(x[k], r[k]), Ok(d) if d <= w.dc)) {
            return f64::INFINITY;
        }
        mac_objective(&t, &w, &MacState::new(&t, p.to_vec()).unwrap(), &r).unwrap()
    };
    const N: usize = 24;
    let (mut lo, mut hi) = ([0.0, 0.0, 1e-4, 1e-4], [1.0, 1.0, 0.5, 0.5]);
    let mut best = (f64::INFINITY, [0.0; 4]);
    for _ in 0..60 {
        let h: Vec<f64> = (0..4).map(|d| (hi[d] - lo[d]) / N as f64).collect();
        for idx in 0..(N + 1).pow(4) {
            let mut v = [0.0; 4];
            let mut rest = idx;
            for d in 0..4 {
                v[d] = lo[d] + h[d] * (rest % (N + 1)) as f64;
                rest /= N + 1;
            }
            let f = eval(v);
            if f < best.0 {
                best = (f, v);
            }
        }
        for d in 0..4 {
            lo[d] = (best.1[d] - 2.0 * h[d]).max(if d < 2 { 0.0 } else { 1e-9 });
            hi[d] = best.1[d] + 2.0 * h[d];
        }
    }
    let gap = (sol.objective - best.0).abs();
    let kkt = sol.report.kkt_residual;
    (gap <= 1e-3 && kkt <= 1e-6, format!("objective {:.8}, grid {:.8}, gap {gap:.2e}, KKT {kkt:.2e}", sol.objective, best.0))
}

fn distributed_mac() -> Check {
    let w = Weights::new(5.0, 0.1, 100.0).unwrap();
    let run = |n: usize| {
        let t = if n == 10 { build_sample10().topology().clone() } else { build_linear(n).unwrap() };
        let sol = solve_mac_centralized(&t, &w).unwrap();
        let trace = run_mac_distributed(&t, &w, &MacDistributedOptions::default(), Some(&sol)).unwrap();
        let primal = (0..t.link_count())
            .map(|k| rel(trace.state.link_probs()[k], sol.state.link_probs()[k]).max(rel(trace.rates.r[k], sol.rates.r[k])))
            .fold(0.0, f64::max);
        (trace.iterations_to(0.01), primal)
    };
    let (pair, pair_err) = run(2);
    let (line4, line4_err) = run(4);
    let counts: Vec<Option<usize>> = [4, 8, 16, 32].iter().map(|&n| run(n).0).collect();
    let (sample, _) = run(10);
    let flat = counts.iter().all(Option::is_some) && {
        let c: Vec<usize> = counts.iter().flatten().copied().collect();
        c.iter().max().unwrap() <= &(2 * c.iter().min().unwrap())
    };
    (
        pair.is_some() && line4.is_some() && pair_err < 0.01 && line4_err < 0.01 && flat,
        format!(
            "pair {pair:?} rounds (primal err {pair_err:.1e}), line4 {line4:?} (primal err {line4_err:.1e}), lines 4/8/16/32 {counts:?}, sample network {sample:?}"
        ),
    )
}

fn suboptimal_rule() -> Check {
    let mut r = rng(5);
    let mut identity = 0.0f64;
    for _ in 0..1000 {
        let dc = r.random_range(2.0..1000.0);
        let x = r.random_range(1.0 / dc + 1e-6..1.0);
        let d = link_delay(x, suboptimal_rate(x, dc)).unwrap();
        identity = identity.max(rel(d, dc));
    }
    let out = commands::compare_subopt(&CompareArgs {
        network: "sample10".parse().unwrap(),
        lambda1: vec![0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0],
        lambda2: vec![1.0],
        dc: vec![100.0],
    })
    .unwrap();
    let gap = out.table.numbers("gap_pct").into_iter().fold(0.0, f64::max);
    let infeasible: f64 = out.table.numbers("infeasible_links").iter().sum();
    (
        identity <= 1e-9 && gap <= 5.0 && infeasible == 0.0,
        format!("delay identity error {identity:.1e}, worst gap {gap:.3}% over 8 weights, infeasible links {infeasible}"),
    )
}

fn crosslayer_plateau() -> Check {
    let base = build_sample10();
    let w = XlayerWeights::new(0.005, 10.0).unwrap();
    let u: Vec<f64> = [100.0, 200.0, 400.0, 800.0, 1600.0]
        .iter()
        .map(|&b| solve_xlayer_centralized(&base.with_delay_bounds(b).unwrap(), &w).unwrap().rates.utility())
        .collect();
    let monotone = u.windows(2).all(|p| p[1] >= p[0] - 1e-9);
    let ratio = (u[4] - u[3]) / (u[3] - u[0]);
    (monotone && ratio < 0.25, format!("utility {u:.4?}, monotone {monotone}, (800->1600)/(100->800) = {ratio:.3}"))
}

fn newton_speedup() -> Check {
    let net = build_sample10().with_delay_bounds(100.0).unwrap();
    let w = XlayerWeights::new(0.005, 10.0).unwrap();
    let sol = solve_xlayer_centralized(&net, &w).unwrap();
    let run = |variant| {
        let o = XlayerDistributedOptions {
            variant,
            ..Default::default()
        };
        run_xlayer_distributed(&net, &w, &o, Some(&sol)).unwrap()
    };
    let (g, n) = (run(XlayerVariant::Gradient), run(XlayerVariant::Newton));
    let same = g.rates.y.iter().zip(&n.rates.y).all(|(a, b)| rel(*b, *a) < 0.01)
        && g.rates.y.iter().zip(&sol.rates.y).all(|(a, b)| rel(*a, *b) < 0.01);
    let (gi, ni) = (g.iterations_to(0.01), n.iterations_to(0.01));
    let fast = matches!((gi, ni), (Some(a), Some(b)) if 3 * b <= a);
    let speedup = match (gi, ni) {
        (Some(a), Some(b)) => format!("{:.2}x", a as f64 / b as f64),
        _ => "n/a".into(),
    };
    (same && fast, format!("same fixed point {same}; rounds to 1%: gradient {gi:?}, Newton-like {ni:?} ({speedup}, need 3x)"))
}

fn simulator() -> Check {
    let t = build_linear(2).unwrap();
    let s = MacState::new(&t, vec![0.5, 0.5]).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for rho in [0.3, 0.5, 0.7] {
        let loads = vec![rho * 0.25; 2];
        let rep = validate_delay_model(&t, &s, &loads, Tolerance::default(), &[1, 2, 3], 1_000_000).unwrap();
        ok &= rep.passed;
        parts.push(format!("rho {rho}: delay {:.4} tput {:.4}", rep.max_delay_error, rep.max_throughput_error));
    }
    (ok, parts.join(", "))
}

fn gradients() -> Check {
    let mut r = rng(9);
    let mut worst = 0.0f64;
    for t in [build_sample10().topology().clone(), build_star(5).unwrap(), build_linear(4).unwrap()] {
        let l = t.link_count();
        for _ in 0..100 {
            let p = interior_state(&t, &mut r).link_probs().to_vec();
            let node = node_probabilities(&t, &p);
            for k in 0..l {
                let analytic: Vec<f64> = (0..l).map(|j| throughput_derivative(&t, &p, &node, k, j)).collect();
                let fd = fd_gradient(|v| throughput_of(&t, v, &node_probabilities(&t, v), k), &p);
                worst = worst.max(rel_error(&analytic, &fd));
            }
            let w = Weights::new(r.random_range(0.0..10.0), r.random_range(0.01..2.0), r.random_range(5.0..500.0)).unwrap();
            let z: Vec<f64> = (0..l).map(|_| r.random_range(0.001f64..0.5).ln()).collect();
            let mu: Vec<f64> = (0..l).map(|_| r.random_range(0.0..5.0)).collect();
            let (gp, gz) = mac_lagrangian_gradient(&t, &w, &p, &z, &mu);
            worst = worst.max(rel_error(&gp, &fd_gradient(|v| mac_lagrangian(&t, &w, v, &z, &mu), &p)));
            worst = worst.max(rel_error(&gz, &fd_gradient(|v| mac_lagrangian(&t, &w, &p, v, &mu), &z)));
            let weighted = |v: &[f64]| -> f64 {
                let nv = node_probabilities(&t, v);
                w.lambda1 * energy(&t, &MacState::new(&t, v.to_vec()).unwrap())
                    - (0..l).map(|k| mu[k] * throughput_of(&t, v, &nv, k)).sum::<f64>()
            };
            worst = worst.max(rel_error(&prob_gradient(&t, &p, &mu, w.lambda1), &fd_gradient(weighted, &p)));
        }
    }
    (worst <= 1e-6, format!("worst relative error {worst:.2e} over 300 points"))
}

fn subproblems() -> Check {
    let mut r = rng(10);
    let (mut budget, mut rate, mut mac) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (mu, v_sum, y_sum) = (r.random_range(0.0..100.0), r.random_range(1e-4..1.0), r.random_range(0.0..1.5));
        let (x, ceiling) = (r.random_range(0.05..1.0), r.random_range(20.0..1000.0));
        let cost = |d: f64, c: f64| (d - c) * v_sum + mu * (1.0 - 0.5 * y_sum) * (1.0 / d - 1.0 / c);
        let oracle = grid_argmin(cost, 1.0 / x + EPS, ceiling);
        budget = budget.max(rel(link_budget_update(mu, v_sum, y_sum, x, ceiling), oracle));

        let lambda2 = r.random_range(0.1..20.0);
        let hops = r.random_range(1..5);
        let mus: Vec<f64> = (0..hops).map(|_| r.random_range(1.0..100.0)).collect();
        let ds: Vec<f64> = (0..hops).map(|_| r.random_range(1.0..100.0)).collect();
        let y_max = r.random_range(0.05..1.0);
        let price: f64 = mus.iter().zip(&ds).map(|(m, d)| m * (1.0 - 0.5 / d)).sum();
        let oracle = grid_argmin(|y, c| -lambda2 * (y / c).ln() + (y - c) * price, RATE_FLOOR, y_max);
        rate = rate.max(rel(session_rate_update(lambda2, &mus, &ds, y_max).0, oracle));

        let dc = r.random_range(2.0..500.0);
        let w = Weights::new(r.random_range(0.0..10.0), r.random_range(0.01..2.0), dc).unwrap();
        let (a, b) = (1.0 - 0.5 / dc, 1.0 / dc);
        let oracle = grid_argmin(
            |v, c| -w.lambda2 * (v / c).ln() + mu * ((a * v + b) / (a * c + b)).ln(),
            RATE_FLOOR,
            1.0 - EPS,
        );
        mac = mac.max(rel(mac_rate_update(mu, &w), oracle));
    }
    let worst = budget.max(rate).max(mac);
    (worst <= 1e-6, format!("link budget {budget:.1e}, session rate {rate:.1e}, MAC rate {mac:.1e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Check); 10] = [
        ("pair-network MinDc", Duration::from_secs(1), pair_min_dc),
        ("MinDc profile (linear, star)", Duration::from_secs(60), min_dc_profile),
        ("centralized MAC vs 4-D grid", Duration::from_secs(60), centralized_vs_grid),
        ("distributed MAC convergence", Duration::from_secs(60), distributed_mac),
        ("suboptimal MAC rule", Duration::from_secs(60), suboptimal_rule),
        ("cross-layer monotone plateau", Duration::from_secs(300), crosslayer_plateau),
        ("Newton-like vs gradient", Duration::from_secs(300), newton_speedup),
        ("simulator validation", Duration::from_secs(120), simulator),
        ("gradient integrity", Duration::from_secs(60), gradients),
        ("subproblem exactness", Duration::from_secs(60), subproblems),
    ];
    let mut passed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = check();
        let elapsed = start.elapsed();
        let ok = ok && elapsed <= *limit;
        passed += usize::from(ok);
        println!(
            "criterion {:>2} {} {name}: {detail} [{:.2} s, limit {} s]",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("{passed}/{} criteria passed", criteria.len());
    if passed == criteria.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
