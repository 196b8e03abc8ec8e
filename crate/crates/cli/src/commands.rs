use std::cmp::Ordering;
use std::fs;

use aloha_num::crosslayer::{
    run_xlayer_distributed, solve_xlayer_centralized, XlayerDistributedOptions, XlayerVariant, XlayerWeights,
    XLAYER_GRADIENT_SCHEDULE,
};
use aloha_num::mac::{
    energy, mac_suboptimal, min_dc as solve_min_dc, run_mac_distributed, solve_mac_centralized,
    MacDistributedOptions, MacState, Weights,
};
use aloha_num::sim::{analytic_delays, compare_runs, simulate as run_sim, SimConfig, Tolerance};
use aloha_num::solver::{StepRule, StepSchedule};
use aloha_num::{Error, Network};
use rayon::prelude::*;

use crate::table::{Cell, Table};
use crate::{Algorithm, CliError, CompareArgs, ConvergeArgs, MinDcArgs, Outcome, Problem, SimulateArgs, StepArgs, TradeoffArgs};

type Result<T> = std::result::Result<T, CliError>;

fn by_keys(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

fn nonempty<T>(name: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        return Err(CliError::Usage(format!("--{name} needs at least one value")));
    }
    Ok(())
}

pub fn min_dc(args: &MinDcArgs) -> Result<Outcome> {
    let specs: Vec<_> = args.network.iter().flat_map(|r| r.specs.iter().cloned()).collect();
    nonempty("network", &specs)?;
    let rows = specs
        .par_iter()
        .map(|spec| {
            let net = spec.load()?;
            let t = net.topology();
            let m = solve_min_dc(t)?;
            Ok(vec![
                spec.family().into(),
                t.node_count().into(),
                t.link_count().into(),
                m.value.into(),
                m.throughput.into(),
                spec.to_string().into(),
            ])
        })
        .collect::<Result<Vec<Vec<Cell>>>>()?;
    let mut table = Table::new(
        "min-dc.v1",
        vec!["family", "nodes", "links", "min_dc", "maxmin_throughput", "network"],
    );
    rows.into_iter().for_each(|r| table.push(r));
    Ok(Outcome::ok(table))
}

pub fn tradeoff(args: &TradeoffArgs) -> Result<Outcome> {
    nonempty("lambda1", &args.lambda1)?;
    nonempty("lambda2", &args.lambda2)?;
    let net = args.network.load()?;
    let bounds = match args.problem {
        Problem::Mac => &args.dc,
        Problem::Xlayer => {
            if net.sessions().is_empty() {
                return Err(CliError::Usage(format!("network {} has no sessions", args.network)));
            }
            &args.ds
        }
    };
    nonempty(if args.problem == Problem::Mac { "dc" } else { "ds" }, bounds)?;
    let mut points: Vec<[f64; 3]> = Vec::new();
    for &b in bounds {
        for &l1 in &args.lambda1 {
            for &l2 in &args.lambda2 {
                points.push([b, l1, l2]);
            }
        }
    }
    points.sort_by(|a, b| by_keys(a, b));
    points.dedup();

    let rows = points
        .par_iter()
        .map(|&[bound, l1, l2]| {
            let solved = match args.problem {
                Problem::Mac => {
                    let t = net.topology();
                    solve_mac_centralized(t, &Weights::new(l1, l2, bound)?)
                        .map(|s| (s.energy(t), s.rate_utility(), s.objective))
                }
                Problem::Xlayer => {
                    let bounded = net.with_delay_bounds(bound)?;
                    solve_xlayer_centralized(&bounded, &XlayerWeights::new(l1, l2)?)
                        .map(|s| (energy(net.topology(), &s.state), s.rates.utility(), s.objective))
                }
            };
            let mut row: Vec<Cell> = vec![bound.into(), l1.into(), l2.into()];
            match solved {
                Ok((e, u, obj)) => row.extend(["optimal".into(), e.into(), u.into(), obj.into()]),
                Err(Error::Infeasible { .. }) => row.extend(["infeasible".into(), Cell::Empty, Cell::Empty, Cell::Empty]),
                Err(e) => return Err(e.into()),
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let (schema, bound_name) = match args.problem {
        Problem::Mac => ("tradeoff-mac.v1", "dc"),
        Problem::Xlayer => ("tradeoff-xlayer.v1", "ds"),
    };
    let mut table = Table::new(
        schema,
        vec![bound_name, "lambda1", "lambda2", "status", "energy", "rate_utility", "objective"],
    );
    rows.into_iter().for_each(|r| table.push(r));
    Ok(Outcome::ok(table))
}

fn apply_steps(mut schedule: StepSchedule, steps: &StepArgs) -> StepSchedule {
    if let Some(a) = steps.step_alpha {
        schedule.alpha = StepRule::Constant(a);
    }
    if let Some(b) = steps.step_beta {
        schedule.beta = StepRule::Constant(b);
    }
    if let Some(p) = steps.step_phi {
        schedule.phi = StepRule::Constant(p);
    }
    schedule
}

/// Iteration-error rows shared by both problem families.
struct Trace {
    rows: Vec<(usize, f64, Option<[f64; 3]>, f64)>,
    reached: Option<usize>,
}

pub fn converge(args: &ConvergeArgs) -> Result<Outcome> {
    if args.tolerance.is_nan() || args.tolerance <= 0.0 {
        return Err(CliError::Usage("--tolerance must be positive".into()));
    }
    let net = args.network.load()?;
    let (columns, run): (_, Box<dyn Fn(usize) -> aloha_num::Result<Trace>>) = match args.algorithm {
        Algorithm::MacDist => {
            let t = net.topology().clone();
            let w = Weights::new(args.lambda1.unwrap_or(5.0), args.lambda2.unwrap_or(0.1), args.dc)?;
            let reference = solve_mac_centralized(&t, &w)?;
            let schedule = apply_steps(StepSchedule::default(), &args.steps);
            let tol = args.tolerance;
            let run = move |iters: usize| {
                let o = MacDistributedOptions {
                    schedule,
                    max_iters: iters,
                    ..Default::default()
                };
                let trace = run_mac_distributed(&t, &w, &o, Some(&reference))?;
                Ok(Trace {
                    reached: trace.iterations_to(tol),
                    rows: trace
                        .rounds
                        .iter()
                        .map(|r| (r.iteration, r.objective, r.errors, r.max_violation))
                        .collect(),
                })
            };
            (["objective_err_pct", "prob_err_pct", "rate_err_pct"], Box::new(run) as Box<dyn Fn(_) -> _>)
        }
        Algorithm::XlayerGrad | Algorithm::XlayerNewton => {
            if net.sessions().is_empty() {
                return Err(CliError::Usage(format!("network {} has no sessions", args.network)));
            }
            let net: Network = match args.ds {
                Some(ds) => net.with_delay_bounds(ds)?,
                None => net,
            };
            let w = XlayerWeights::new(args.lambda1.unwrap_or(0.005), args.lambda2.unwrap_or(10.0))?;
            let reference = solve_xlayer_centralized(&net, &w)?;
            let variant = if args.algorithm == Algorithm::XlayerNewton {
                XlayerVariant::Newton
            } else {
                XlayerVariant::Gradient
            };
            let schedule = apply_steps(XLAYER_GRADIENT_SCHEDULE, &args.steps);
            let tol = args.tolerance;
            let run = move |iters: usize| {
                let o = XlayerDistributedOptions {
                    variant,
                    schedule,
                    max_iters: iters,
                    ..Default::default()
                };
                let trace = run_xlayer_distributed(&net, &w, &o, Some(&reference))?;
                Ok(Trace {
                    reached: trace.iterations_to(tol),
                    rows: trace
                        .rounds
                        .iter()
                        .map(|r| (r.iteration, r.objective, r.errors, r.max_violation))
                        .collect(),
                })
            };
            (["rate_err_pct", "prob_err_pct", "utility_err_pct"], Box::new(run) as Box<dyn Fn(_) -> _>)
        }
    };
    let iters = args.iters.unwrap_or(match args.algorithm {
        Algorithm::MacDist => MacDistributedOptions::default().max_iters,
        _ => XlayerDistributedOptions::default().max_iters,
    });

    let (trace, failure) = match run(iters) {
        Ok(t) => (t, None),
        Err(e @ Error::Divergence { iteration, .. }) => (run(iteration.saturating_sub(1))?, Some(e)),
        Err(e) => return Err(e.into()),
    };

    let mut table = Table::new(
        "converge.v1",
        vec!["iter", "objective", columns[0], columns[1], columns[2], "max_violation"],
    );
    for (n, obj, errors, violation) in &trace.rows {
        let mut row: Vec<Cell> = vec![(*n).into(), (*obj).into()];
        match errors {
            Some(e) => row.extend(e.iter().map(|v| Cell::Num(100.0 * v))),
            None => row.extend([Cell::Empty, Cell::Empty, Cell::Empty]),
        }
        row.push((*violation).into());
        table.push(row);
    }
    let mut summary = Vec::new();
    if let Some(Error::Divergence { iteration, reason }) = &failure {
        table.push(vec!["diverged".into(), (*iteration).into(), reason.clone().into()]);
    } else {
        summary.push(match trace.reached {
            Some(n) => format!("reached {}% error at iteration {n}", 100.0 * args.tolerance),
            None => format!("did not reach {}% error within {iters} iterations", 100.0 * args.tolerance),
        });
    }
    Ok(Outcome {
        table,
        seeds: Vec::new(),
        summary,
        failure: failure.map(CliError::from),
    })
}

pub fn compare_subopt(args: &CompareArgs) -> Result<Outcome> {
    nonempty("lambda1", &args.lambda1)?;
    nonempty("lambda2", &args.lambda2)?;
    nonempty("dc", &args.dc)?;
    let net = args.network.load()?;
    let t = net.topology();
    let mut points: Vec<[f64; 3]> = Vec::new();
    for &dc in &args.dc {
        for &l1 in &args.lambda1 {
            for &l2 in &args.lambda2 {
                points.push([dc, l1, l2]);
            }
        }
    }
    points.sort_by(|a, b| by_keys(a, b));
    points.dedup();
    let rows = points
        .par_iter()
        .map(|&[dc, l1, l2]| {
            let w = Weights::new(l1, l2, dc)?;
            let opt = solve_mac_centralized(t, &w)?;
            let sub = mac_suboptimal(t, &w)?;
            let gap = 100.0 * (sub.objective - opt.objective) / opt.objective.abs();
            Ok(vec![
                dc.into(),
                l1.into(),
                l2.into(),
                opt.objective.into(),
                sub.objective.into(),
                gap.into(),
                sub.infeasible_links().into(),
            ])
        })
        .collect::<Result<Vec<Vec<Cell>>>>()?;
    let mut table = Table::new(
        "compare-subopt.v1",
        vec!["dc", "lambda1", "lambda2", "optimal", "suboptimal", "gap_pct", "infeasible_links"],
    );
    rows.into_iter().for_each(|r| table.push(r));
    Ok(Outcome::ok(table))
}

fn read_probs(path: &std::path::Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: expected a JSON array of numbers ({e})", path.display())))
}

pub fn simulate(args: &SimulateArgs) -> Result<Outcome> {
    nonempty("seed", &args.seed)?;
    if args.horizon == 0 {
        return Err(CliError::Usage("--horizon must be positive".into()));
    }
    let net = args.network.load()?;
    let t = net.topology();
    let (state, solver_rates) = match (&args.probs, args.dc) {
        (Some(path), _) => (MacState::new(t, read_probs(path)?)?, None),
        (None, Some(dc)) => {
            let sol = solve_mac_centralized(t, &Weights::new(args.lambda1, args.lambda2, dc)?)?;
            (sol.state, Some(sol.rates.r))
        }
        (None, None) => (solve_min_dc(t)?.state, None),
    };
    let x = state.throughputs(t);
    let loads: Vec<f64> = match (args.load, solver_rates) {
        (Some(f), _) => x.iter().map(|v| f * v).collect(),
        (None, Some(r)) => r,
        (None, None) => x.iter().map(|v| 0.5 * v).collect(),
    };
    let analytic = analytic_delays(t, &state, &loads)?;
    let runs = args
        .seed
        .par_iter()
        .map(|&seed| run_sim(&SimConfig::new(t, &state, loads.clone(), args.horizon, seed)))
        .collect::<aloha_num::Result<Vec<_>>>()?;

    let mut table = Table::new(
        "simulate.v1",
        vec![
            "seed",
            "link",
            "load",
            "analytic_delay",
            "empirical_delay",
            "delay_err",
            "delay_se",
            "analytic_throughput",
            "empirical_throughput",
            "throughput_err",
        ],
    );
    for run in &runs {
        for (k, s) in run.links.iter().enumerate() {
            let delay_err = analytic[k].zip(s.mean_delay).map(|(a, e)| (e - a).abs() / a);
            let tput_err = if x[k] > 0.0 { (s.throughput - x[k]).abs() / x[k] } else { s.throughput };
            let link = t.link(k);
            table.push(vec![
                run.seed.into(),
                format!("{}->{}", link.from, link.to).into(),
                loads[k].into(),
                analytic[k].into(),
                s.mean_delay.into(),
                delay_err.into(),
                s.delay_se.into(),
                x[k].into(),
                s.throughput.into(),
                tput_err.into(),
            ]);
        }
    }
    let tolerance = Tolerance {
        delay: args.tolerance,
        ..Tolerance::default()
    };
    let report = compare_runs(t, &state, &loads, tolerance, runs)?;
    let verdict = if report.passed { "passed" } else { "failed" };
    table.push(vec![
        "pooled".into(),
        Cell::Empty,
        Cell::Empty,
        Cell::Empty,
        Cell::Empty,
        report.max_delay_error.into(),
        Cell::Empty,
        Cell::Empty,
        Cell::Empty,
        report.max_throughput_error.into(),
        verdict.into(),
    ]);
    let summary = vec![format!(
        "max delay error {:.4}, max throughput error {:.4}: {verdict}",
        report.max_delay_error, report.max_throughput_error
    )];
    let failure = (!report.passed).then(|| {
        CliError::Validation(format!(
            "delay error {:.4} (tolerance {}), throughput error {:.4} (tolerance {})",
            report.max_delay_error, tolerance.delay, report.max_throughput_error, tolerance.throughput
        ))
    });
    Ok(Outcome {
        table,
        seeds: args.seed.clone(),
        summary,
        failure,
    })
}
