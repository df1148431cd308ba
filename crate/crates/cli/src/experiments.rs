use std::path::Path;

use bsde_density::bsde::{solve_affine, AffineCoeffs, BsdeSolution};
use bsde_density::finance::{
    arcsine_argmax_check, arcsine_cdf, check_density_conditions, clark_ocone_z, guaranteed_densities, price_claim,
    ArcsineMethod, ConditionReport, TriState,
};
use bsde_density::gene::{gene_density_experiment, solve_gene_bsde};
use bsde_density::grid::PathEnsemble;
use bsde_density::malliavin::{bound_curve, fd_quotient, linearized_sensitivity, DerivCoeffs};
use bsde_density::regression::RegressionState;
use bsde_density::sde::simulate_brownian;
use bsde_density::stats::{normality_report, validation_table};
use bsde_density::terminal::TerminalSpec;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::*;
use crate::output::{read_csv, Artifacts, Manifest, Table};
use crate::CliError;

/// Runs the configured experiment and writes its artifacts under `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, CliError> {
    cfg.validate()?;
    let name = cfg.experiment.name();
    let mut art = Artifacts::new(out)?;
    let result = match &cfg.experiment {
        Experiment::GeneDensity(e) => gene_density(cfg, e, &mut art),
        Experiment::GeneValidate(e) => gene_validate(cfg, e, &mut art),
        Experiment::PriceAsian(e) => {
            let claim = TerminalConfig::Asian { f: e.f.clone(), g: e.g.clone() }.build()?;
            price(cfg, &e.vasicek, e.theta, claim, &e.sample_grid, &mut art)
        }
        Experiment::PriceLookback(e) => {
            let claim = TerminalConfig::Lookback { f: e.f.clone() }.build()?;
            price(cfg, &e.vasicek, e.theta, claim, &e.sample_grid, &mut art)
        }
        Experiment::CheckConditions(e) => check_conditions(e, &mut art),
        Experiment::ArcsineCheck(e) => arcsine(cfg, e, &mut art),
        Experiment::FdCheck(e) => fd_check(cfg, e, &mut art),
    };
    result.map_err(|e| e.in_experiment(name))?;
    art.finish(name)
}

fn ensemble(cfg: &ExperimentConfig) -> Result<PathEnsemble<f64>, CliError> {
    Ok(simulate_brownian(&cfg.grid.build()?, cfg.n_paths, cfg.master_seed)?)
}

fn gene_density(cfg: &ExperimentConfig, e: &GeneDensityConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let params = e.model.build()?;
    if e.curve_points < 2 {
        return Err(CliError::Config("curve_points must be at least 2".into()));
    }
    // checked before simulating so a bad time fails fast
    if e.times.iter().any(|&t| t <= 0.0) {
        return Err(bsde_density::Error::InvalidParameter("no density at t=0: Y_0 is deterministic".into()).into());
    }
    let ens = ensemble(cfg)?;
    let run = gene_density_experiment(&params, &e.times, &ens, e.bins, cfg.solver.settings())?;
    let mut summary = Vec::new();
    for s in &run.slices {
        let h = &s.histogram;
        let n = h.counts.len();
        let hist = Table::new()
            .with("bin_left", h.edges[..n].to_vec())
            .with("bin_right", h.edges[1..].to_vec())
            .with("hist_density", h.heights.clone())
            .with("f_i", s.f_i.clone())
            .with("f_s", s.f_s.clone())
            .with("hist_se", h.std_errors.clone());
        let hist_file = art.csv(&format!("histogram_t{}.csv", s.t), &hist)?;

        let (lo, hi) = (h.edges[0], h.edges[n]);
        let step = (hi - lo) / (e.curve_points - 1) as f64;
        let xs: Vec<f64> = (0..e.curve_points).map(|k| lo + step * k as f64).collect();
        let curve = bound_curve(&s.bounds, &xs);
        let bounds = Table::new()
            .with("x", curve.iter().map(|c| c.0).collect())
            .with("f_i", curve.iter().map(|c| c.1).collect())
            .with("f_s", curve.iter().map(|c| c.2).collect());
        let bound_file = art.csv(&format!("bounds_t{}.csv", s.t), &bounds)?;
        summary.push(json!({
            "t": s.t,
            "mean": s.mean,
            "var": s.var,
            "C_Y": s.c_y,
            "k_lo": s.bounds.k_lo,
            "k_hi": s.bounds.k_hi,
            "C_hi": s.bounds.c_hi,
            "C_lo": s.bounds.c_lo,
            "histogram": hist_file,
            "bounds": bound_file,
        }));
    }
    let sol = &run.solution;
    art.json("summary.json", &json!({ "Y0": sol.y0, "Y0_se": sol.y0_stderr, "slices": summary }))?;
    Ok(())
}

fn gene_validate(cfg: &ExperimentConfig, e: &GeneValidateConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let (labels, rows, y0) = match (&e.model, &e.samples) {
        (Some(model), None) => {
            let params = model.build()?;
            let ens = ensemble(cfg)?;
            let sol = solve_gene_bsde(&params, &ens, cfg.solver.settings())?;
            drop(ens);
            let rows = validation_table(&sol, &e.times)?;
            let labels: Vec<String> = rows.iter().map(|r| format!("t={}", r.0)).collect();
            (labels, rows, Some((sol.y0, sol.y0_stderr)))
        }
        (None, Some(path)) => {
            let table = read_csv(path)?;
            let mut rows = Vec::with_capacity(table.columns.len());
            for (k, (_, col)) in table.columns.iter().enumerate() {
                rows.push((k as f64, normality_report(col)?));
            }
            (table.columns.into_iter().map(|c| c.0).collect(), rows, None)
        }
        _ => return Err(CliError::Config("gene-validate needs exactly one of `model` or `samples`".into())),
    };
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let key = if e.model.is_some() { "t" } else { "column" };
    let table = Table::new()
        .with(key, rows.iter().map(|r| r.0).collect())
        .with("M", rows.iter().map(|r| r.1.m as f64).collect())
        .with("S", rows.iter().map(|r| r.1.s_skew).collect())
        .with("K", rows.iter().map(|r| r.1.k_kurt).collect())
        .with("JB", rows.iter().map(|r| r.1.jb).collect())
        .with("JB_reject", rows.iter().map(|r| flag(r.1.jb_reject)).collect())
        .with("KS", rows.iter().map(|r| r.1.ks).collect())
        .with("KS_two_sided", rows.iter().map(|r| r.1.ks_two_sided).collect())
        .with("KS_reject", rows.iter().map(|r| flag(r.1.ks_reject)).collect())
        .with("mean", rows.iter().map(|r| r.1.mean).collect())
        .with("var", rows.iter().map(|r| r.1.var).collect());
    let file = art.csv("validation.csv", &table)?;
    let report: Vec<Value> = labels
        .iter()
        .zip(&rows)
        .map(|(label, (_, r))| {
            json!({
                "sample": label,
                "M": r.m,
                "S": r.s_skew,
                "K": r.k_kurt,
                "JB": r.jb,
                "JB_decision": if r.jb_reject { "reject" } else { "accept" },
                "KS": r.ks,
                "KS_two_sided": r.ks_two_sided,
                "KS_decision": if r.ks_reject { "reject" } else { "accept" },
            })
        })
        .collect();
    let mut summary = json!({ "rows": report, "table": file });
    if let Some((y0, se)) = y0 {
        summary["Y0"] = json!(y0);
        summary["Y0_se"] = json!(se);
    }
    art.json("summary.json", &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct ConditionJson {
    condition: &'static str,
    holds: &'static str,
    witness: String,
    y_density: &'static str,
    z_density: &'static str,
}

fn conditions_json(reports: &[ConditionReport]) -> Value {
    let list: Vec<ConditionJson> = reports
        .iter()
        .map(|r| ConditionJson {
            condition: r.condition.label(),
            holds: r.holds.as_str(),
            witness: r.witness.clone(),
            y_density: r.y_density.as_str(),
            z_density: r.z_density.as_str(),
        })
        .collect();
    let (y, z): (TriState, TriState) = guaranteed_densities(reports);
    json!({ "reports": list, "y_density": y.as_str(), "z_density": z.as_str() })
}

fn price(
    cfg: &ExperimentConfig,
    vasicek: &VasicekConfig,
    theta: f64,
    claim: TerminalSpec<f64>,
    sample: &SampleGrid,
    art: &mut Artifacts,
) -> Result<(), CliError> {
    let reports = check_density_conditions(&claim, &sample.points()?)?;
    let spec = pricing_spec(vasicek, theta, claim)?;
    let ens = ensemble(cfg)?;
    let sol = price_claim(&spec, &ens, cfg.solver.settings())?;
    let co = clark_ocone_z(&spec, &sol, &ens, cfg.solver.settings())?;
    let rows = sol.summary();
    let last = co.z.cols() - 1;
    let co_mean: Vec<f64> = (0..rows.len())
        .map(|i| {
            let col = co.z.column(i.min(last));
            col.iter().sum::<f64>() / col.len() as f64
        })
        .collect();
    let table = Table::new()
        .with("t", rows.iter().map(|r| r.t).collect())
        .with("mean_y", rows.iter().map(|r| r.mean_y).collect())
        .with("se_y", rows.iter().map(|r| r.se_y).collect())
        .with("mean_z", rows.iter().map(|r| r.mean_z).collect())
        .with("se_z", rows.iter().map(|r| r.se_z).collect())
        .with("mean_z_clark_ocone", co_mean);
    let file = art.csv("z_curve.csv", &table)?;
    let (min, at) = sol.min_y();
    art.json(
        "report.json",
        &json!({
            "Y0": sol.y0,
            "SE": sol.y0_stderr,
            "z_curve": file,
            "min_y": min,
            "min_y_tolerance": 3.0 * sol.y_slice_se[at],
            "conditions": conditions_json(&reports),
        }),
    )?;
    Ok(())
}

fn check_conditions(e: &CheckConditionsConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let claim = e.terminal.build()?;
    let reports = check_density_conditions(&claim, &e.sample_grid.points()?)?;
    art.json("conditions.json", &conditions_json(&reports))?;
    Ok(())
}

fn arcsine(cfg: &ExperimentConfig, e: &ArcsineConfig, art: &mut Artifacts) -> Result<(), CliError> {
    if e.cdf_points < 2 {
        return Err(CliError::Config("cdf_points must be at least 2".into()));
    }
    let method = match e.method {
        ArcsineMethodConfig::Grid => ArcsineMethod::Grid,
        ArcsineMethodConfig::BridgeRefined => ArcsineMethod::BridgeRefined,
    };
    let ens = ensemble(cfg)?;
    let rep = arcsine_argmax_check(&ens, method)?;
    let s: Vec<f64> = (0..e.cdf_points).map(|k| k as f64 / (e.cdf_points - 1) as f64).collect();
    let table = Table::new()
        .with("s", s.clone())
        .with("ecdf", s.iter().map(|&x| rep.ecdf(x)).collect())
        .with("arcsine_cdf", s.iter().map(|&x| arcsine_cdf(x)).collect());
    let file = art.csv("arcsine.csv", &table)?;
    art.json(
        "summary.json",
        &json!({
            "ks": rep.ks,
            "band": rep.band,
            "within_band": rep.within_band,
            "discrete_ks": rep.discrete_ks,
            "ecdf_half": rep.ecdf(0.5),
            "cdf": file,
        }),
    )?;
    Ok(())
}

fn fd_check(cfg: &ExperimentConfig, e: &FdCheckConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let spec = e.terminal.build()?;
    let g = e.generator;
    let coeffs = AffineCoeffs::constant(g.lambda, g.mu, g.nu);
    let settings = cfg.solver.settings();
    let solve = |ens: &PathEnsemble<f64>| -> bsde_density::Result<BsdeSolution<f64>> {
        let xi: Vec<f64> = (0..ens.n_paths()).map(|p| spec.evaluate(ens.grid(), ens.path(p))).collect();
        solve_affine(&coeffs, &xi, ens, &RegressionState::for_terminal(&spec, ens), settings.basis)
    };
    let ens = ensemble(cfg)?;
    let grid = ens.grid().clone();
    let h = e.direction.build();
    let q = fd_quotient(solve, &ens, &h, e.eps)?;
    let base = solve(&ens)?;
    let hv = h.primitive_on(&grid);
    let dxi = (0..ens.n_paths())
        .map(|p| spec.directional_derivative(&grid, ens.path(p), &hv))
        .collect::<bsde_density::Result<Vec<f64>>>()?;
    let state = RegressionState::for_terminal(&spec, &ens);
    let lin = linearized_sensitivity(&coeffs, &base, &dxi, &DerivCoeffs::zero(), &ens, &state, settings.basis)?;

    let n = ens.n_paths() as f64;
    let mut rel = Vec::with_capacity(grid.len());
    let (mut mean_fd, mut mean_lin) = (Vec::new(), Vec::new());
    for i in 0..grid.len() {
        let (a, b) = (q.column(i), lin.column(i));
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        rel.push(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() });
        mean_fd.push(a.iter().sum::<f64>() / n);
        mean_lin.push(b.iter().sum::<f64>() / n);
    }
    let worst = rel.iter().copied().fold(0.0, f64::max);
    let table = Table::new()
        .with("t", grid.times().to_vec())
        .with("mean_fd", mean_fd)
        .with("mean_linearized", mean_lin)
        .with("relative_error", rel);
    let file = art.csv("fd.csv", &table)?;
    art.json("summary.json", &json!({ "eps": e.eps, "max_relative_error": worst, "curve": file }))?;
    Ok(())
}
