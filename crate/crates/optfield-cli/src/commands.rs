//! Subcommand implementations. Each one consumes the shared config, runs
//! its checks, and writes `report.json` (plus any CSV artifacts) into the
//! output directory; the returned flag is `true` when every check passed.

use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use optfield::couplings::{PathSpec, PlanSpec};
use optfield::distributions::{Distribution, Gaussian};
use optfield::losses::{am_constant, am_loss, ofm_loss, ot_loss, w2_estimate, LossReport};
use optfield::optimal_fields::{bracket, bracket_fd_audit, field_velocity, pushforward};
use optfield::oracles::{bures_map, sym_operator_norm};
use optfield::potentials::ConvexPotential;
use optfield::rng;
use optfield::solver::{minimize, LossKind, SolveConfig};

use crate::config::{ExperimentConfig, InitSpec, PathSpecJson, PlanSpecJson};
use crate::gen;
use crate::report::{Check, Report};

fn gaussian_endpoints(p0: &Distribution, p1: &Distribution) -> Option<(Gaussian, Gaussian)> {
    match (p0, p1) {
        (Distribution::Gaussian(a), Distribution::Gaussian(b)) => Some((a.clone(), b.clone())),
        _ => None,
    }
}

pub fn verify_bracket(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let started = Instant::now();
    let section = cfg
        .bracket
        .as_ref()
        .context("config needs a `bracket` section")?;
    let conj = cfg.conjugate_settings();
    let mut report = Report::new(
        "verify-bracket",
        cfg.experiment.clone(),
        cfg.seed,
        cfg.n_samples,
    );
    let [t_lo, t_hi] = section.t_range;
    if !(0.0 <= t_lo && t_lo < t_hi && t_hi <= 1.0) {
        bail!("bracket.t_range must satisfy 0 <= lo < hi <= 1");
    }

    let mut r = rng::stream(rng::derive(cfg.seed, 0xB0));
    let mut groups: Vec<(String, Vec<ConvexPotential>)> = Vec::new();
    if let Some(fam) = &section.quadratic {
        let pots = (0..fam.count)
            .map(|i| gen::random_quadratic(&mut r, fam.dims[i % fam.dims.len()]))
            .collect();
        groups.push(("quadratic".into(), pots));
    }
    if let Some(fam) = &section.max_affine {
        let pots = (0..fam.count)
            .map(|i| gen::random_max_affine(&mut r, fam.dims[i % fam.dims.len()]))
            .collect();
        groups.push(("max-affine".into(), pots));
    }
    if !section.explicit_potentials.is_empty() {
        groups.push(("explicit".into(), section.explicit_potentials.clone()));
    }
    if groups.is_empty() {
        bail!("bracket section selects no potentials");
    }

    for (label, potentials) in &groups {
        let mut worst_analytic = 0.0f64;
        let mut worst_audit = 0.0f64;
        for psi in potentials {
            let d = psi.dim();
            for _ in 0..section.points_per_potential {
                let t = r.gen_range(t_lo..t_hi);
                let mut x = gen::random_point(&mut r, d, 1.5);
                let u = field_velocity(psi, t, &x, &conj)?;
                let analytic = bracket(psi, t, &x, &conj)?;
                worst_analytic = worst_analytic.max(analytic.abs() / (1.0 + u.norm_squared()));

                let mut audit = bracket_fd_audit(psi, t, &x, 1e-4, 1e-4, &conj)?;
                let mut retries = 0;
                while audit.stencil_crosses_kink && retries < 200 {
                    retries += 1;
                    x = gen::random_point(&mut r, d, 1.5);
                    audit = bracket_fd_audit(psi, t, &x, 1e-4, 1e-4, &conj)?;
                }
                if audit.stencil_crosses_kink {
                    bail!("could not find a kink-free finite-difference stencil");
                }
                worst_audit = worst_audit.max(audit.value.abs());
            }
        }
        report.push(Check::gap(
            format!("bracket-analytic/{label}"),
            worst_analytic,
            None,
            section.analytic_tol,
        ));
        report.push(Check::gap(
            format!("bracket-audited/{label}"),
            worst_audit,
            None,
            section.fd_tol,
        ));
    }

    report.finish(out, started)
}

fn default_theorem_paths(dim: usize) -> Vec<PathSpecJson> {
    let mut direction = vec![0.0; dim];
    direction[dim - 1] = 1.0;
    let json = serde_json::json!([
        {"plan": {"type": "independent"}},
        {"plan": {"type": "minibatch_ot", "batch": 32}},
        {"plan": {"type": "independent"},
         "shape": {"type": "curved_sine", "amplitude": 0.5, "direction": direction}},
    ]);
    serde_json::from_value(json).expect("builtin paths parse")
}

pub fn verify_theorem(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let started = Instant::now();
    let (p0, p1) = cfg.endpoints()?;
    let conj = cfg.conjugate_settings();
    let n_potentials = cfg.theorem.as_ref().map_or(10, |s| s.n_potentials);
    let path_specs: Vec<PathSpecJson> = match cfg.theorem.as_ref() {
        Some(s) if !s.paths.is_empty() => s.paths.clone(),
        _ => default_theorem_paths(p0.dim()),
    };
    let paths: Vec<(String, PathSpec)> = path_specs
        .iter()
        .map(|s| Ok((s.label(), s.build(&p0, &p1)?)))
        .collect::<Result<_>>()?;

    let constant = am_constant(&p0, &p1);
    let mut report = Report::new(
        "verify-theorem",
        cfg.experiment.clone(),
        cfg.seed,
        cfg.n_samples,
    );
    let mut r = rng::stream(rng::derive(cfg.seed, 0x7E));
    let mut estimates: Vec<LossReport> = Vec::new();

    for idx in 0..n_potentials {
        let psi = gen::random_quadratic(&mut r, p0.dim());
        let seed = rng::derive(cfg.seed, 0x7E00 + idx as u64);
        let ot = ot_loss(&psi, &p0, &p1, cfg.n_samples, seed, &conj)?;
        estimates.push(LossReport::new(format!("ot/psi{idx}"), &ot));

        let mut am_results = Vec::new();
        for (label, path) in &paths {
            let am = am_loss(&psi, path, cfg.n_samples, seed, &conj)?;
            estimates.push(LossReport::from_am(format!("am/psi{idx}/{label}"), &am));
            let gap = am.total.value - ot.value - constant;
            let tol = cfg.sigma_multiplier * am.total.std_error.hypot(ot.std_error);
            report.push(Check::gap(
                format!("theorem-identity/psi{idx}/{label}"),
                gap,
                Some(am.total.std_error.hypot(ot.std_error)),
                tol,
            ));
            am_results.push((label.clone(), am.total));
        }

        for i in 0..am_results.len() {
            for j in (i + 1)..am_results.len() {
                let (la, ea) = &am_results[i];
                let (lb, eb) = &am_results[j];
                let gap = ea.value - eb.value;
                let se = ea.std_error.hypot(eb.std_error);
                report.push(Check::gap(
                    format!("path-agreement/psi{idx}/{la}|{lb}"),
                    gap,
                    Some(se),
                    cfg.sigma_multiplier * se,
                ));
            }
        }
    }

    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output dir {}", out.display()))?;
    let estimates_path = out.join("estimates.json");
    std::fs::write(&estimates_path, serde_json::to_string_pretty(&estimates)?)
        .with_context(|| format!("cannot write {}", estimates_path.display()))?;

    report.finish(out, started)
}

pub fn verify_ofm_relation(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let started = Instant::now();
    let (p0, p1) = cfg.endpoints()?;
    let conj = cfg.conjugate_settings();
    let section = cfg.ofm.as_ref();
    let n_potentials = section.map_or(3, |s| s.n_potentials);
    let plan_spec = section
        .and_then(|s| s.plan.clone())
        .unwrap_or(PlanSpecJson::Independent);
    let plan = plan_spec.build(&p0, &p1)?;
    let identity_check = section.is_none_or(|s| s.identity_check);

    let mut report = Report::new(
        "verify-ofm-relation",
        cfg.experiment.clone(),
        cfg.seed,
        cfg.n_samples,
    );
    let mut r = rng::stream(rng::derive(cfg.seed, 0x0F));
    let seed = rng::derive(cfg.seed, 0x0F00);

    let mut constants: Vec<(f64, f64)> = Vec::new();
    for _ in 0..n_potentials {
        let psi = gen::random_quadratic(&mut r, p0.dim());
        let ofm = ofm_loss(&psi, &plan, cfg.n_samples, seed, &conj)?;
        let ot = ot_loss(&psi, &p0, &p1, cfg.n_samples, seed, &conj)?;
        constants.push((
            ofm.value - 2.0 * ot.value,
            ofm.std_error.hypot(2.0 * ot.std_error),
        ));
    }
    for i in 0..constants.len() {
        for j in (i + 1)..constants.len() {
            let gap = constants[i].0 - constants[j].0;
            let se = constants[i].1.hypot(constants[j].1);
            report.push(Check::gap(
                format!("plan-constant-agreement/psi{i}|psi{j}"),
                gap,
                Some(se),
                cfg.sigma_multiplier * se,
            ));
        }
    }

    if identity_check {
        // Identity potential on a standard 1D pair: the flow-matching value
        // is the expected squared pair distance 2, the dual value is 1, so
        // the plan constant is exactly 0.
        let std1 = Distribution::standard_gaussian(1);
        let id_plan = PlanSpec::independent(std1.clone(), std1.clone())?;
        let psi = ConvexPotential::half_sq_norm(1);
        let ofm = ofm_loss(&psi, &id_plan, cfg.n_samples, seed, &conj)?;
        let ot = ot_loss(&psi, &std1, &std1, cfg.n_samples, seed, &conj)?;
        let se = ofm.std_error.hypot(2.0 * ot.std_error);
        report.push(Check::gap(
            "identity-case/ofm-minus-2ot",
            ofm.value - 2.0 * ot.value,
            Some(se),
            cfg.sigma_multiplier * se,
        ));
        report.push(Check::gap(
            "identity-case/ofm-value-minus-2",
            ofm.value - 2.0,
            Some(ofm.std_error),
            cfg.sigma_multiplier * ofm.std_error,
        ));
        report.push(Check::gap(
            "identity-case/ot-value-minus-1",
            ot.value - 1.0,
            Some(ot.std_error),
            cfg.sigma_multiplier * ot.std_error,
        ));
    }

    report.finish(out, started)
}

pub fn solve_ot(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let started = Instant::now();
    let (p0, p1) = cfg.endpoints()?;
    let section = cfg
        .solve
        .as_ref()
        .context("config needs a `solve` section")?;

    let init = match &section.init {
        Some(InitSpec::Potential { potential }) => potential.clone(),
        Some(InitSpec::NoisyIdentity { noise, init_seed }) => {
            gen::noisy_identity(p0.dim(), *noise, *init_seed)
        }
        None => gen::noisy_identity(p0.dim(), 0.05, rng::derive(cfg.seed, 0x1417)),
    };

    let mut solve_cfg = SolveConfig::new(section.loss_kind, cfg.seed);
    solve_cfg.step_size = section.step_size;
    solve_cfg.max_epochs = section.max_epochs;
    solve_cfg.batch = section.batch;
    solve_cfg.grad_tol = section.grad_tol;
    solve_cfg.conjugate = cfg.conjugate_settings();
    match section.loss_kind {
        LossKind::Ofm => {
            let spec = section.plan.clone().unwrap_or(PlanSpecJson::Independent);
            solve_cfg.plan = Some(spec.build(&p0, &p1)?);
        }
        LossKind::Am => {
            let path = match &section.path {
                Some(spec) => spec.build(&p0, &p1)?,
                None => PathSpec::linear(PlanSpec::independent(p0.clone(), p1.clone())?),
            };
            solve_cfg.path = Some(path);
        }
        LossKind::Ot => {}
    }

    let (psi, trace) = minimize(&init, &p0, &p1, &solve_cfg)?;

    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output dir {}", out.display()))?;
    let trace_path = out.join("trace.csv");
    let file = std::fs::File::create(&trace_path)
        .with_context(|| format!("cannot write {}", trace_path.display()))?;
    trace.write_csv(file)?;
    let potential_path = out.join("potential.json");
    std::fs::write(&potential_path, serde_json::to_string_pretty(&psi)?)
        .with_context(|| format!("cannot write {}", potential_path.display()))?;
    println!(
        "solve: {} epochs, {} gate failures, trace at {}, potential at {}",
        trace.records.len(),
        trace.gate_failures,
        trace_path.display(),
        potential_path.display()
    );

    let mut report = Report::new("solve-ot", cfg.experiment.clone(), cfg.seed, cfg.n_samples);
    if section.compare_closed_form {
        let (g0, g1) = gaussian_endpoints(&p0, &p1)
            .context("closed-form comparison requires Gaussian endpoints")?;
        let oracle = bures_map(&g0, &g1)?;
        let q = match &psi {
            ConvexPotential::Quadratic(q) => q,
            ConvexPotential::RegularizedMaxAffine(_) => {
                bail!("closed-form comparison requires the quadratic family")
            }
        };
        let rel_a = sym_operator_norm(&(q.matrix() - &oracle.linear_map))
            / sym_operator_norm(&oracle.linear_map);
        report.push(Check::gap(
            "map-relative-error",
            rel_a,
            None,
            section.map_rel_tol,
        ));
        let b_err = (q.shift() - &oracle.shift).norm();
        report.push(Check::gap("shift-error", b_err, None, section.shift_tol));

        let w2 = w2_estimate(
            &psi,
            &p0,
            &p1,
            section.eval_n,
            rng::derive(cfg.seed, 0x1418),
            &cfg.conjugate_settings(),
        )?;
        report.push(Check::gap(
            "w2-relative-error",
            (w2.value - oracle.w2_squared) / oracle.w2_squared,
            Some(w2.std_error / oracle.w2_squared),
            section.w2_rel_tol,
        ));
    }

    report.finish(out, started)
}

pub fn push_samples(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let started = Instant::now();
    let section = cfg.push.as_ref().context("config needs a `push` section")?;
    let psi = section.potential()?;
    let p0 = cfg
        .p0
        .as_ref()
        .context("config needs a p0 distribution")?
        .build()?;
    if p0.dim() != psi.dim() {
        bail!(
            "p0 dimension {} does not match the potential's {}",
            p0.dim(),
            psi.dim()
        );
    }
    let conj = cfg.conjugate_settings();

    let x0 = p0.sample(cfg.n_samples, rng::derive(cfg.seed, 0x9057));
    let x1_ode = pushforward(&psi, &x0, section.steps, section.method, &conj)?;
    let mut x1_map = DMatrix::zeros(x0.nrows(), x0.ncols());
    for i in 0..x0.nrows() {
        x1_map.set_row(i, &psi.grad(&x0.row(i).transpose()).transpose());
    }

    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output dir {}", out.display()))?;
    let samples_path = out.join("samples.csv");
    let mut w = csv::Writer::from_path(&samples_path)
        .with_context(|| format!("cannot write {}", samples_path.display()))?;
    let d = x0.ncols();
    let mut header = Vec::new();
    for prefix in ["x0", "x1_ode", "x1_map"] {
        for j in 0..d {
            header.push(format!("{prefix}_{j}"));
        }
    }
    w.write_record(&header)?;
    for i in 0..x0.nrows() {
        let mut row = Vec::with_capacity(3 * d);
        for m in [&x0, &x1_ode, &x1_map] {
            for j in 0..d {
                row.push(m[(i, j)].to_string());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    println!(
        "push: {} samples written to {}",
        x0.nrows(),
        samples_path.display()
    );

    let mut report = Report::new(
        "push-samples",
        cfg.experiment.clone(),
        cfg.seed,
        cfg.n_samples,
    );
    // The integrated endpoints must coincide with the gradient map.
    let mut worst = 0.0f64;
    for i in 0..x0.nrows() {
        let rel = (x1_ode.row(i) - x1_map.row(i)).norm() / (1.0 + x1_map.row(i).norm());
        worst = worst.max(rel);
    }
    report.push(Check::gap("ode-vs-map", worst, None, 1e-6));

    if section.compare_target {
        let p1 = cfg
            .p1
            .as_ref()
            .context("compare_target needs a p1 distribution")?
            .build()?;
        let g1 = match &p1 {
            Distribution::Gaussian(g) => g.clone(),
            _ => bail!("compare_target requires a Gaussian p1"),
        };
        let n = x1_ode.nrows();
        let mean = DVector::from_fn(d, |j, _| x1_ode.column(j).mean());
        let mean_err = (&mean - g1.mean()).norm();
        report.push(Check::gap(
            "pushed-mean-error",
            mean_err,
            None,
            section.mean_rel_tol * g1.mean().norm().max(1.0),
        ));
        for j in 0..d {
            let var = x1_ode
                .column(j)
                .iter()
                .map(|v| (v - mean[j]).powi(2))
                .sum::<f64>()
                / (n as f64 - 1.0);
            report.push(Check::gap(
                format!("pushed-variance-rel-error/axis{j}"),
                (var - g1.covariance()[(j, j)]) / g1.covariance()[(j, j)],
                None,
                section.var_rel_tol,
            ));
        }
    }

    report.finish(out, started)
}
