//! Executes the configured command and collects tables, results and gates.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use tbdefect::hamiltonian::assemble;
use tbdefect::lattice::{torus_of_cells, Displacement, SeminormConfig, TorusCell};
use tbdefect::limits::{
    ce_limit_study, pollution_study, reference_bands, sweep_beta, sweep_radius, ConvergenceSeries,
    SweepSettings,
};
use tbdefect::relax::{relax_geometry, RelaxProblem, RelaxResult};
use tbdefect::sitegreen::{
    build_contours, locality_profile, site_energies_contour, site_energies_eigen, spectral_distance, Method,
};
use tbdefect::spectrum::{band_structure, eigendecompose};
use tbdefect::thermo::{grand_potential, Beta, Ensemble, FermiCase};
use tbdefect::Result;

use crate::config::{
    BandsCmd, CeLimitCmd, Command, LocalityCmd, PollutionCmd, RelaxCmd, RunConfig, SiteEnergiesCmd,
    SweepBetaCmd, SweepRadiusCmd,
};
use crate::report::{float, Table};

pub struct Report {
    pub results: Value,
    pub gates: BTreeMap<String, bool>,
    pub tables: Vec<Table>,
    /// Set when a sweep stopped early; the tables hold the completed points.
    pub failure: Option<String>,
}

impl Report {
    fn new(results: Value) -> Self {
        Report {
            results,
            gates: BTreeMap::new(),
            tables: vec![],
            failure: None,
        }
    }

    fn gate(&mut self, name: &str, pass: bool) {
        self.gates.insert(name.to_string(), pass);
    }
}

pub fn execute(cfg: &RunConfig) -> Result<Report> {
    log::info!("command {}", cfg.command.name());
    match &cfg.command {
        Command::Bands(c) => bands(cfg, c),
        Command::Relax(c) => relax(cfg, c),
        Command::SiteEnergies(c) => site_energies(cfg, c),
        Command::Locality(c) => locality(cfg, c),
        Command::SweepBeta(c) => beta_sweep(cfg, c),
        Command::SweepRadius(c) => radius_sweep(cfg, c),
        Command::CeLimit(c) => ce_limit(cfg, c),
        Command::Pollution(c) => pollution(cfg, c),
    }
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn floats(v: &[f64]) -> Vec<String> {
    v.iter().map(|&x| float(x)).collect()
}

fn settings(cfg: &RunConfig) -> SweepSettings {
    let mut s = SweepSettings::for_crystal(&cfg.crystal);
    s.force_tolerance = cfg.tolerances.force;
    s.max_iterations = cfg.tolerances.max_iterations;
    s
}

fn torus(cfg: &RunConfig, cells: &[i64]) -> Result<TorusCell> {
    let t = torus_of_cells(&cfg.crystal, cfg.defect.as_ref(), cells)?;
    log::info!("torus {cells:?}: {} sites", t.len());
    Ok(t)
}

fn relax_on(cfg: &RunConfig, host: &TorusCell, ensemble: Ensemble) -> Result<RelaxResult> {
    let mut p = RelaxProblem::new(host, &cfg.model, ensemble);
    p.force_tolerance = cfg.tolerances.force;
    p.max_iterations = cfg.tolerances.max_iterations;
    relax_geometry(&p)
}

fn site_table(name: &str, host: &TorusCell, dim: usize, extra: &[&str]) -> Table {
    let mut header = vec!["site".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    header.extend(extra.iter().map(|s| s.to_string()));
    Table {
        name: name.to_string(),
        header,
        rows: Vec::with_capacity(host.len()),
    }
}

fn site_row(host: &TorusCell, l: usize, dim: usize, extra: &[f64]) -> Vec<String> {
    let mut row = vec![l.to_string()];
    let x = host.config.sites[l].position;
    row.extend((0..dim).map(|i| float(x[i])));
    row.extend(floats(extra));
    row
}

fn bands(cfg: &RunConfig, c: &BandsCmd) -> Result<Report> {
    let bs = band_structure(&cfg.crystal, &cfg.model, c.n_k)?;
    let dim = cfg.crystal.dim();
    let mut header: Vec<String> = vec!["k_index".into()];
    header.extend((0..dim).map(|i| format!("k{i}")));
    header.extend(["band".into(), "energy".into()]);
    let mut table = Table {
        name: "bands.csv".into(),
        header,
        rows: vec![],
    };
    for (j, (k, levels)) in bs.k_grid.iter().zip(&bs.bands).enumerate() {
        for (n, e) in levels.iter().enumerate() {
            let mut row = vec![j.to_string()];
            row.extend(floats(k));
            row.extend([n.to_string(), float(*e)]);
            table.push(row);
        }
    }
    let mut r = Report::new(json!({
        "n_k": c.n_k,
        "n_bands": bs.n_bands(),
        "intervals": bs.intervals(),
        "gap": bs.gap,
        "gap_width": bs.gap.map(|g| g.width()),
        "gaps": bs.gaps,
    }));
    r.gate("insulating", bs.gap.is_some());
    r.tables.push(table);
    Ok(r)
}

fn relax(cfg: &RunConfig, c: &RelaxCmd) -> Result<Report> {
    let host = torus(cfg, &c.cells)?;
    let dim = cfg.crystal.dim();
    let mut p = RelaxProblem::new(&host, &cfg.model, c.ensemble);
    p.force_tolerance = cfg.tolerances.force;
    p.max_iterations = cfg.tolerances.max_iterations;
    if c.perturbation > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let flat: Vec<f64> = (0..host.len() * dim)
            .map(|_| rng.random_range(-c.perturbation..c.perturbation))
            .collect();
        p.initial = Displacement::from_flat(dim, &flat)?;
    }
    if c.stability {
        p.stability = Some(SeminormConfig::for_crystal(&cfg.crystal));
    }
    let res = relax_geometry(&p)?;
    log::info!(
        "relaxed in {} iterations, force {:e}",
        res.iterations,
        res.force_norm
    );

    let mut sites = site_table("sites.csv", &host, dim, &[]);
    sites.header.extend((0..dim).map(|i| format!("u{i}")));
    for l in 0..host.len() {
        let u = res.displacement.get(l);
        sites.push(site_row(
            &host,
            l,
            dim,
            &(0..dim).map(|i| u[i]).collect::<Vec<_>>(),
        ));
    }
    let mut eigs = Table::new("eigenvalues.csv", &["index", "eigenvalue"]);
    for (i, e) in res.eigenvalues.iter().enumerate() {
        eigs.push(vec![i.to_string(), float(*e)]);
    }
    let mut traj = Table::new(
        "trajectory.csv",
        &["iteration", "energy", "force_norm", "gap_distance", "level"],
    );
    for t in &res.trajectory {
        let mut row = vec![t.iteration.to_string()];
        row.extend(floats(&[t.energy, t.force_norm, t.gap_distance, t.level]));
        traj.push(row);
    }
    let mut r = Report::new(json!({
        "n_sites": host.len(),
        "energy": res.energy,
        "level": res.level,
        "iterations": res.iterations,
        "force_norm": res.force_norm,
        "gap_distance": res.gap_distance,
        "stability": res.stability,
    }));
    r.gate("converged", res.force_norm <= cfg.tolerances.force);
    if let Some(c0) = res.stability {
        r.gate("stable", c0 > 0.0);
    }
    r.tables.extend([sites, eigs, traj]);
    Ok(r)
}

fn site_energies(cfg: &RunConfig, c: &SiteEnergiesCmd) -> Result<Report> {
    let host = torus(cfg, &c.cells)?;
    let dim = cfg.crystal.dim();
    let u = if c.relaxed {
        relax_on(
            cfg,
            &host,
            Ensemble::GrandCanonical {
                mu: c.mu,
                beta: c.beta,
            },
        )?
        .displacement
    } else {
        Displacement::zeros_for(&host)
    };
    let h = assemble(&host, &u, &cfg.model)?;
    let spec = eigendecompose(&h)?;
    let table = match c.method {
        Method::Eigen => site_energies_eigen(&spec, c.beta, c.mu)?,
        Method::Contour => {
            let contours = build_contours(&spec.eigenvalues, c.mu, c.beta)?;
            let all: Vec<usize> = (0..host.len()).collect();
            site_energies_contour(&h, &contours, c.beta, c.mu, &all)?
        }
    };
    let omega = grand_potential(&spec.eigenvalues, c.beta, c.mu)?;
    let total = table.total();
    let mut out = site_table("site_energies.csv", &host, dim, &["energy"]);
    for (l, g) in table.values.iter().enumerate() {
        out.push(site_row(&host, l, dim, &[*g]));
    }
    let mut r = Report::new(json!({
        "method": c.method,
        "total": total,
        "grand_potential": omega,
        "difference": total - omega,
        "nodes": table.nodes,
        "spectral_distance": spectral_distance(&spec.eigenvalues, c.mu),
    }));
    r.gate(
        "sum_matches_grand_potential",
        (total - omega).abs() <= 1e-10 * omega.abs().max(1.0),
    );
    r.tables.push(out);
    Ok(r)
}

fn locality(cfg: &RunConfig, c: &LocalityCmd) -> Result<Report> {
    let host = torus(cfg, &c.cells)?;
    let h = assemble(&host, &Displacement::zeros_for(&host), &cfg.model)?;
    let spec = eigendecompose(&h)?;
    let z = Complex64::new(c.z[0], c.z[1]);
    let profile = locality_profile(&h, z, c.site)?;
    let mut table = Table::new("locality.csv", &["site", "distance", "magnitude"]);
    for (k, (d, m)) in profile.entries.iter().enumerate() {
        table.push(vec![k.to_string(), float(*d), float(*m)]);
    }
    let distance = spec
        .eigenvalues
        .iter()
        .map(|l| (z - l).norm())
        .fold(f64::INFINITY, f64::min);
    let mut r = Report::new(json!({
        "site": c.site,
        "z": c.z,
        "distance_to_spectrum": distance,
        "gamma_fit": profile.gamma_fit,
        "prefactor": profile.prefactor,
        "r2": profile.r2,
    }));
    r.gate("decays", profile.gamma_fit > 0.0);
    r.tables.push(table);
    Ok(r)
}

fn beta_sweep(cfg: &RunConfig, c: &SweepBetaCmd) -> Result<Report> {
    let host = torus(cfg, &c.cells)?;
    let ensemble = c.ensemble.at(Beta::Infinite);
    let (s, reference) = sweep_beta(&host, &cfg.model, &ensemble, &c.betas, &settings(cfg))?;
    let canonical = matches!(ensemble, Ensemble::Canonical { .. });
    let mut table = Table::new(
        "sweep_beta.csv",
        &[
            "beta",
            "displacement_error",
            "energy_error",
            "level_error",
            "gap_distance",
        ],
    );
    for i in 0..s.parameters.len() {
        let level = s.level_errors.get(i).copied().unwrap_or(f64::NAN);
        table.push(floats(&[
            s.parameters[i],
            s.displacement_errors[i],
            s.energy_errors[i],
            level,
            s.gap_distances[i],
        ]));
    }
    let d = s.reference_gap_distance;
    let mut r = Report::new(json!({
        "series": s,
        "reference": {"energy": reference.energy, "level": reference.level, "iterations": reference.iterations},
        "rate_threshold": d / 12.0,
    }));
    let decreasing = |e: &[f64]| strictly_decreasing(&s.resolved(e).1);
    r.gate("complete", s.complete);
    r.gate("displacement_decreasing", decreasing(&s.displacement_errors));
    r.gate(
        "displacement_rate",
        s.displacement_fit.is_some_and(|f| f.rate >= d / 12.0),
    );
    r.gate("energy_decreasing", decreasing(&s.energy_errors));
    r.gate("energy_rate", s.energy_fit.is_some_and(|f| f.rate > 0.0));
    if canonical {
        r.gate("level_decreasing", decreasing(&s.level_errors));
        r.gate("level_rate", s.level_fit.is_some_and(|f| f.rate > 0.0));
    }
    r.failure = incomplete(&s);
    r.tables.push(table);
    Ok(r)
}

fn incomplete(s: &ConvergenceSeries) -> Option<String> {
    if s.complete {
        None
    } else {
        Some(s.failure.clone().unwrap_or_else(|| "sweep incomplete".into()))
    }
}

fn radius_sweep(cfg: &RunConfig, c: &SweepRadiusCmd) -> Result<Report> {
    let bands = reference_bands(&cfg.crystal, &cfg.model)?;
    let s = sweep_radius(
        &cfg.crystal,
        cfg.defect.as_ref(),
        &cfg.model,
        c.mu,
        c.beta,
        &c.cells,
        &settings(cfg),
        &bands,
        c.delta,
    )?;
    let mut table = Table::new(
        "sweep_radius.csv",
        &[
            "cells",
            "n_sites",
            "error_vs_largest",
            "error_vs_next",
            "defect_level_drift",
            "defect_levels",
            "energy",
            "level",
        ],
    );
    for (i, p) in s.points.iter().enumerate() {
        let mut row = vec![p.cells.to_string(), p.n_sites.to_string()];
        row.extend(floats(&[
            s.series.displacement_errors.get(i).copied().unwrap_or(f64::NAN),
            s.successive_errors.get(i).copied().unwrap_or(f64::NAN),
            s.defect_level_drift.get(i).copied().unwrap_or(f64::NAN),
        ]));
        row.push(p.defect_levels.len().to_string());
        row.extend(floats(&[p.result.energy, p.result.level]));
        table.push(row);
    }
    let mut levels = Table::new("defect_levels.csv", &["cells", "eigenvalue"]);
    for p in &s.points {
        for e in &p.defect_levels {
            levels.push(vec![p.cells.to_string(), float(*e)]);
        }
    }
    let counts: Vec<usize> = s.points.iter().map(|p| p.defect_levels.len()).collect();
    let mut r = Report::new(json!({
        "series": s.series,
        "successive_errors": s.successive_errors,
        "defect_level_drift": s.defect_level_drift,
        "defect_level_counts": counts,
    }));
    r.gate("complete", s.series.complete);
    r.gate("successive_decreasing", strictly_decreasing(&s.successive_errors));
    r.gate("drift_decreasing", strictly_decreasing(&s.defect_level_drift));
    r.gate(
        "count_constant",
        counts.len() < 2 || counts[1..].iter().all(|&n| n == counts[1]),
    );
    r.gate("rate", s.series.displacement_fit.is_some_and(|f| f.rate > 0.0));
    r.failure = incomplete(&s.series);
    r.tables.extend([table, levels]);
    Ok(r)
}

fn case_name(case: FermiCase) -> &'static str {
    match case {
        FermiCase::LowerEdge => "lower-edge",
        FermiCase::Midpoint => "midpoint",
        FermiCase::UpperEdge => "upper-edge",
    }
}

fn ce_limit(cfg: &RunConfig, c: &CeLimitCmd) -> Result<Report> {
    let s = ce_limit_study(
        &cfg.crystal,
        cfg.defect.as_ref(),
        &cfg.model,
        c.mu,
        &c.cells,
        c.reference_cells,
        &settings(cfg),
    )?;
    let mut points = Table::new(
        "ce_limit.csv",
        &[
            "cells",
            "lower",
            "upper",
            "electrons",
            "fermi_level",
            "case",
            "distance_to_nu",
        ],
    );
    let mut shifted = Table::new(
        "ce_shifts.csv",
        &["cells", "shift", "electrons", "level", "case", "lower", "upper"],
    );
    let mut edges = true;
    for p in &s.points {
        let mut row = vec![p.cells.to_string()];
        row.extend(floats(&[p.lower, p.upper, p.electrons, p.fermi_level]));
        row.push(case_name(p.case).into());
        row.push(float(p.distance_to_nu));
        points.push(row);
        for q in &p.shifted {
            let mut row = vec![p.cells.to_string()];
            row.extend(floats(&[q.shift, q.electrons, q.level]));
            row.push(case_name(q.case).into());
            row.extend(floats(&[q.lower, q.upper]));
            shifted.push(row);
            if q.shift.abs() == 1.0 {
                edges &= q.level == if q.shift < 0.0 { p.lower } else { p.upper };
            }
        }
    }
    let distances: Vec<f64> = s.points.iter().map(|p| p.distance_to_nu).collect();
    let mut r = Report::new(json!({
        "nu": s.nu,
        "reference_cells": s.reference_cells,
        "distances": distances,
    }));
    r.gate("converging", strictly_decreasing(&distances));
    r.gate(
        "midpoint_case",
        s.points.iter().all(|p| p.case == FermiCase::Midpoint),
    );
    r.gate("unit_shift_at_edges", edges);
    r.tables.extend([points, shifted]);
    Ok(r)
}

fn pollution(cfg: &RunConfig, c: &PollutionCmd) -> Result<Report> {
    let bands = reference_bands(&cfg.crystal, &cfg.model)?;
    let pts = pollution_study(
        &cfg.crystal,
        cfg.defect.as_ref(),
        &cfg.model,
        c.mu,
        &c.cells,
        c.delta,
        c.policy,
        &bands,
        &settings(cfg),
    )?;
    let mut counts = Table::new("pollution.csv", &["cells", "count"]);
    let mut eigs = Table::new("out_of_band.csv", &["cells", "eigenvalue"]);
    for p in &pts {
        counts.push(vec![p.cells.to_string(), p.count.to_string()]);
        for e in &p.eigenvalues {
            eigs.push(vec![p.cells.to_string(), float(*e)]);
        }
    }
    let n: Vec<usize> = pts.iter().map(|p| p.count).collect();
    let mut r = Report::new(json!({
        "policy": c.policy,
        "delta": c.delta,
        "counts": n,
        "intervals": bands.intervals(),
    }));
    r.gate("count_constant", n.len() < 2 || n[1..].iter().all(|&k| k == n[1]));
    r.tables.extend([counts, eigs]);
    Ok(r)
}
