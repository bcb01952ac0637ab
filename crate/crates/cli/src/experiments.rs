//! One runner per experiment kind. Each fills the report as it goes so that a
//! failure part-way still leaves its diagnostics in the manifest.

use adiabatic_lab::eigenpath::{continue_path, count_solutions, detect_fold, EigenPath, COUNT_GRID};
use adiabatic_lab::io::PlotSeries;
use adiabatic_lab::linalg::{c, eigh, real_mat, CVec};
use adiabatic_lab::linearized::{
    build_f, random_rotation_fixing, search_negative_discriminant, spectrum_f, SPECTRUM_CSV_HEADER,
};
use adiabatic_lab::model::{anharmonic_matrices, Model, ModelConfig, MIN_TRUNCATION};
use adiabatic_lab::numerics::{loglog_fit, uniform_grid};
use adiabatic_lab::propagator::{adiabatic_error, analytic_two_level, constants_of_motion, propagate};
use adiabatic_lab::transport::{compare_adiabatic, source_integral_check, summarise, TransportBundle};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{CliError, CliResult, Stage};
use crate::manifest::Report;

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub model_config: ModelConfig,
    pub model: Model,
    pub seed: u64,
}

pub fn run(ctx: &Context, report: &mut Report) -> CliResult<()> {
    match ctx.cfg.kind {
        ExperimentKind::Simulate => simulate(ctx, report),
        ExperimentKind::Eigenpath => eigenpath(ctx, report),
        ExperimentKind::Spectrum => spectrum(ctx, report),
        ExperimentKind::Transport => transport(ctx, report),
        ExperimentKind::Sweep => sweep(ctx, report),
        ExperimentKind::Bifurcate => bifurcate(ctx, report),
        ExperimentKind::Discriminant => discriminant(ctx, report),
        ExperimentKind::AnharmonicGaps => anharmonic_gaps(ctx, report),
    }
}

fn state_from(ctx: &Context) -> CliResult<Option<CVec>> {
    let n = &ctx.cfg.numeric;
    let Some(re) = &n.initial_state else { return Ok(None) };
    if re.len() != ctx.model.dim() {
        return Err(CliError::ConfigInvalid(format!("initial_state has {} entries, model dimension is {}", re.len(), ctx.model.dim())));
    }
    let im = n.initial_state_imag.clone().unwrap_or_else(|| vec![0.0; re.len()]);
    Ok(Some(CVec::from_fn(re.len(), |i, _| c(re[i], im[i]))))
}

/// The configured seed state, or the tracked eigenvector at `t₀` with equal
/// moduli `xⱼ = 1/N`.
fn path_seed(ctx: &Context) -> CliResult<CVec> {
    if let Some(v) = state_from(ctx)? {
        return Ok(v);
    }
    let m = &ctx.model;
    let x = vec![1.0 / m.dim() as f64; m.p()];
    Ok(m.tracked_eigenpair(ctx.cfg.t_range().0, &x).stage("path_seed")?.vector)
}

fn eigen_path(ctx: &Context, report: &mut Report) -> CliResult<EigenPath> {
    let seed = path_seed(ctx)?;
    let path = continue_path(&ctx.model, ctx.cfg.t_range(), &seed, &ctx.cfg.numeric.path).stage("continue_path")?;
    report.diag("path_points", path.len());
    report.diag("reanchor_events", path.reanchor_events);
    if let Some(tr) = &path.truncation {
        report.diag("truncation", tr);
    }
    Ok(path)
}

fn max(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

fn local_extrema(y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (mut hi, mut lo) = (Vec::new(), Vec::new());
    for k in 1..y.len().saturating_sub(1) {
        if y[k] > y[k - 1] && y[k] >= y[k + 1] {
            hi.push(y[k]);
        } else if y[k] < y[k - 1] && y[k] <= y[k + 1] {
            lo.push(y[k]);
        }
    }
    (hi, lo)
}

fn simulate(ctx: &Context, report: &mut Report) -> CliResult<()> {
    report.claim("the exponential midpoint flow conserves the norm and is covariant under global phases");
    let eps = ctx.cfg.epsilon()?;
    let v0 = state_from(ctx)?.expect("validated");
    let icfg = ctx.cfg.integrator(eps);
    let run = propagate(&ctx.model, &v0, ctx.cfg.t_range(), &icfg).stage("propagate")?;
    let (header, rows) = run.csv();
    report.csv("trajectory.csv", &header, &rows)?;
    let (hi, lo) = local_extrema(&run.energy);
    let series = PlotSeries::new("energy content", &["t [1]", "E [1]"], run.times.iter().zip(&run.energy).map(|(t, e)| vec![*t, *e]).collect())
        .annotate("local_maxima", &hi)
        .annotate("local_minima", &lo);
    report.plot("energy.csv", &series)?;
    let steps = run.times.len() - 1;
    report.diag("steps", steps);
    report.diag("max_norm_drift", run.max_norm_drift());
    report.check_le("unitarity", "global norm drift stays below steps × 1e-13", run.max_norm_drift(), steps as f64 * 1e-13);
    if let Some(bound) = ctx.cfg.checks.max_norm_drift {
        report.check_le("declared_norm_drift", "norm drift within the declared bound", run.max_norm_drift(), bound);
    }
    if let ModelConfig::TwoLevelFlip { gamma } = &ctx.model_config {
        report.claim("the two-level flip flow has a closed-form solution and three constants of motion");
        let c0 = constants_of_motion(&v0);
        let drift = max(run.states.iter().map(|v| max(constants_of_motion(v).iter().zip(&c0).map(|(a, b)| (a - b).abs()))));
        report.check_le("constants_of_motion", "x²+t², y²+z², xz+yt are conserved along the flow", drift, 1e-8);
        let (x0, z0) = (v0[0].re, v0[1].re);
        if v0.iter().all(|z| z.im == 0.0) && x0 > 0.0 && z0 != 0.0 {
            let exact = analytic_two_level(gamma, x0, z0, &run.times, eps).stage("closed_form")?;
            let err = max(run.states.iter().zip(&exact.states).map(|(a, b)| (a - b).norm()));
            report.diag("closed_form_max_error", err);
        }
    }
    Ok(())
}

fn eigenpath(ctx: &Context, report: &mut Report) -> CliResult<()> {
    report.claim("an instantaneous nonlinear eigenvector exists along the path and carries the parallel-transport phase");
    let path = eigen_path(ctx, report)?;
    let (header, rows) = path.csv();
    report.csv("eigenpath.csv", &header, &rows)?;
    report.json("eigenpath.json", &path)?;
    let n = &ctx.cfg.numeric.path;
    report.check_le("fixed_point_residual", "‖ω − φ(t,[ω])‖ at every accepted point", max(path.fixed_point_residual.iter().copied()), n.picard_tol);
    report.check_le("eigen_residual", "‖H(t,[ω])ω − λω‖ at every accepted point", max(path.residual.iter().copied()), 1e-8);
    report.diag("max_phase_defect", max(path.phase_defect.iter().copied()));
    let seed_real = path_seed(ctx)?.iter().all(|z| z.im == 0.0);
    if ctx.model.is_real() && seed_real {
        let imag = max(path.omega.iter().flat_map(|w| w.iter().map(|z| z.im.abs()).collect::<Vec<_>>()));
        report.check_le("real_path", "a real model seeded by a real vector keeps a real path", imag, 1e-10);
    }
    Ok(())
}

fn sample_indices(len: usize, samples: usize) -> Vec<usize> {
    let s = samples.min(len);
    if s <= 1 {
        return vec![0];
    }
    let mut idx: Vec<usize> = (0..s).map(|i| (i * (len - 1) + (s - 1) / 2) / (s - 1)).collect();
    idx.dedup();
    idx
}

fn spectrum(ctx: &Context, report: &mut Report) -> CliResult<()> {
    report.claim("the doubled linearisation has a two-dimensional semisimple kernel and, for real models, a real spectrum symmetric under z → −z");
    let path = eigen_path(ctx, report)?;
    let idx = sample_indices(path.len(), ctx.cfg.numeric.samples);
    let tol = ctx.cfg.numeric.cluster_tol;
    let results: Vec<_> = idx
        .par_iter()
        .map(|&k| {
            let op = build_f(&ctx.model, &path, k)?;
            let spec = spectrum_f(&op, tol)?;
            Ok((k, op, spec))
        })
        .collect::<adiabatic_lab::Result<Vec<_>>>()
        .stage("spectrum")?;
    let mut rows = Vec::new();
    let (mut compl, mut nil, mut quad, mut imag, mut cond) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut kernel_ok = true;
    for (k, op, spec) in &results {
        rows.extend(spec.csv_rows(path.times[*k]));
        compl = compl.max(spec.completeness_residual()).max(spec.annihilation_residual());
        imag = imag.max(spec.max_imag);
        cond = cond.max(max(spec.clusters.iter().map(|c| c.condition)));
        match spec.kernel_cluster {
            Some(j) if spec.clusters[j].rank() == 2 => nil = nil.max(spec.clusters[j].nilpotent_norm),
            _ => kernel_ok = false,
        }
        if op.is_real() {
            quad = quad.max(spec.quadruple_symmetry_residual(&op.unperturbed_spectrum(), 1e-6));
        }
    }
    report.csv("spectrum.csv", &SPECTRUM_CSV_HEADER.map(String::from), &rows)?;
    report.diag("samples", idx.len());
    report.diag("max_imag", imag);
    report.diag("max_condition", cond);
    if cond < 1e6 {
        report.check_le("completeness", "Σℙⱼ = I and ℙᵢℙⱼ = δᵢⱼℙⱼ", compl, 1e-8);
    }
    report.check("kernel_rank", "the kernel cluster holds exactly two eigenvalues", 0.0, kernel_ok);
    report.check_le("kernel_semisimple", "the kernel cluster has no nilpotent part", nil, 1e-8);
    if ctx.model.is_real() {
        report.check_le("quadruple_symmetry", "off σ(F₀), eigenvalues come in {z, z̄, −z, −z̄}", quad, 1e-8);
    }
    Ok(())
}

fn declared_slope(report: &mut Report, ctx: &Context, name: &str, claim: &str, slope: f64) {
    if let Some([target, tol]) = ctx.cfg.checks.slope {
        report.check_within(name, claim, slope, target, tol);
    }
}

fn transport(ctx: &Context, report: &mut Report) -> CliResult<()> {
    report.claim("the linearised evolution stays within O(ε) of the adiabatic comparison operator, uniformly bounded in ε");
    report.claim("the source integral of ω̇ against the linearised evolution is O(ε) once its kernel component vanishes");
    let eps = ctx.cfg.epsilons()?.to_vec();
    let path = eigen_path(ctx, report)?;
    let bundle = TransportBundle::from_path(&ctx.model, &path, ctx.cfg.numeric.cluster_tol).stage("transport_bundle")?;
    report.diag("max_intertwining_residual", bundle.max_intertwining_residual());
    report.diag("w_condition", bundle.w_condition());
    let icfg = ctx.cfg.integrator(eps[0]);
    let runs = eps.par_iter().map(|&e| compare_adiabatic(&bundle, e, &icfg)).collect::<adiabatic_lab::Result<Vec<_>>>().stage("compare_adiabatic")?;
    let inversion = max(runs.iter().map(|r| r.inversion_residual));
    let sweep = summarise(runs);
    let rows: Vec<Vec<f64>> = sweep.runs.iter().map(|r| vec![r.epsilon, r.sup_defect, r.uniform_bound, r.inversion_residual]).collect();
    let series = PlotSeries::new("linearised adiabatic defect", &["epsilon [1]", "sup_defect [1]", "sup_norm_T [1]", "inversion_residual [1]"], rows)
        .log_log()
        .annotate("slope", sweep.order.slope)
        .annotate("r2", sweep.order.r2);
    report.plot("transport_defect.csv", &series)?;
    report.check_le("inversion", "T(t,s)T(s,t) = I", inversion, 1e-8);
    report.check_le("uniform_bound", "sup‖T‖ varies by at most 10% across the ε-sweep", sweep.bound_variation, 0.1);
    if eps.len() >= 2 {
        report.diag("defect_slope", sweep.order.slope);
        declared_slope(report, ctx, "defect_slope", "sup‖T − V‖ scales as ε", sweep.order.slope);
    }
    let plain = source_integral_check(&bundle, &path, &eps, false).stage("source_integral")?;
    let mut header = vec!["epsilon [1]", "sup_source [1]"];
    let control = if ctx.cfg.numeric.kernel_control {
        header.push("sup_source_with_kernel [1]");
        Some(source_integral_check(&bundle, &path, &eps, true).stage("source_integral_control")?)
    } else {
        None
    };
    let rows: Vec<Vec<f64>> = (0..eps.len())
        .map(|k| {
            let mut r = vec![eps[k], plain.runs[k].sup];
            if let Some(c) = &control {
                r.push(c.runs[k].sup);
            }
            r
        })
        .collect();
    let mut series = PlotSeries::new("source integral", &header, rows).log_log().annotate("slope", plain.order.slope);
    if let Some(c) = &control {
        series = series.annotate("control_slope", c.order.slope);
    }
    report.plot("source_integral.csv", &series)?;
    if eps.len() >= 2 {
        report.diag("source_slope", plain.order.slope);
        declared_slope(report, ctx, "source_slope", "the source integral scales as ε", plain.order.slope);
        if let (Some(c), Some(bound)) = (&control, ctx.cfg.checks.control_max_slope) {
            report.diag("control_slope", c.order.slope);
            report.check_le("control_slope", "an injected kernel component removes the ε decay", c.order.slope, bound);
        }
    }
    Ok(())
}

fn sweep(ctx: &Context, report: &mut Report) -> CliResult<()> {
    report.claim("the solution started on the nonlinear eigenvector stays within O(ε) of e^{−iΛ/ε}ω");
    let eps = ctx.cfg.epsilons()?.to_vec();
    let path = eigen_path(ctx, report)?;
    let runs = eps
        .par_iter()
        .map(|&e| adiabatic_error(&ctx.model, &path, &ctx.cfg.integrator(e)))
        .collect::<adiabatic_lab::Result<Vec<_>>>()
        .stage("adiabatic_error")?;
    let sups: Vec<f64> = runs.iter().map(|r| r.sup).collect();
    let rows: Vec<Vec<f64>> = runs.iter().map(|r| vec![r.epsilon, r.sup, r.early_ratio.unwrap_or(f64::NAN)]).collect();
    let mut series = PlotSeries::new("adiabatic error", &["epsilon [1]", "sup_error [1]", "early_ratio [1]"], rows).log_log();
    if eps.len() >= 2 && sups.iter().all(|s| *s > 0.0) {
        let fit = loglog_fit(&eps, &sups);
        series = series.annotate("slope", fit.slope).annotate("r2", fit.r2);
        report.diag("slope", fit.slope);
        declared_slope(report, ctx, "slope", "sup error scales as ε", fit.slope);
    } else if ctx.cfg.checks.slope.is_some() {
        report.check("slope", "sup error scales as ε", f64::NAN, false);
    }
    report.plot("adiabatic_error.csv", &series)?;
    let mut header = vec!["t".to_string()];
    header.extend(eps.iter().map(|e| format!("error_eps_{e}")));
    let trace: Vec<Vec<f64>> =
        (0..path.len()).map(|k| std::iter::once(path.times[k]).chain(runs.iter().map(|r| r.error[k])).collect()).collect();
    report.csv("error_trace.csv", &header, &trace)?;
    report.diag("sup_errors", &sups);
    if let Some(bound) = ctx.cfg.checks.max_sup_error {
        report.check_le("max_sup_error", "sup error within the declared bound for every ε", max(sups.iter().copied()), bound);
    }
    Ok(())
}

#[derive(Serialize)]
struct TauFile {
    tau: f64,
    y_fold: Option<f64>,
    count_below: usize,
    count_above: usize,
    residual: Option<f64>,
    residual_dy: Option<f64>,
    /// `(t, number of solutions)`
    table: Vec<(f64, usize)>,
}

fn bifurcate(ctx: &Context, report: &mut Report) -> CliResult<()> {
    report.claim("the eigenvector branch ends in a fold where the solution count jumps from one to three");
    let m = &ctx.model;
    let (a, b) = ctx.cfg.t_range();
    let fold = detect_fold(m, (a, b), None, &ctx.cfg.numeric.path).stage("detect_fold")?;
    let count = |t: f64| count_solutions(m, t, COUNT_GRID).map(|c| c.count);
    let below = count(fold.tau - 1e-3).stage("count_solutions")?;
    let above = count(fold.tau + 1e-3).stage("count_solutions")?;
    let grid = uniform_grid(a, b, ctx.cfg.numeric.count_points - 1);
    let table: Vec<(f64, usize)> =
        grid.par_iter().map(|&t| count(t).map(|n| (t, n))).collect::<adiabatic_lab::Result<Vec<_>>>().stage("count_solutions")?;
    report.diag("tau", fold.tau);
    let rows: Vec<Vec<f64>> = table.iter().map(|(t, n)| vec![*t, *n as f64]).collect();
    report.csv("root_counts.csv", &["t".to_string(), "count".to_string()], &rows)?;
    let tau = TauFile { tau: fold.tau, y_fold: fold.y_fold, count_below: below, count_above: above, residual: fold.residual, residual_dy: fold.residual_dy, table };
    report.json("tau.json", &tau)?;
    report.check("fold_inside", "τ lies inside the time range", fold.tau, fold.tau > a.min(b) && fold.tau < a.max(b));
    report.check("count_change", "one solution just before τ and three just after", fold.tau, below == 1 && above == 3);
    Ok(())
}

#[derive(Serialize)]
struct DiscriminantFile {
    seed: u64,
    draws: usize,
    instance: Option<adiabatic_lab::linearized::RealnessInstance>,
    max_imag: Option<f64>,
    rotated_discriminant: Option<f64>,
}

fn discriminant(ctx: &Context, report: &mut Report) -> CliResult<()> {
    report.claim("a real two-dimensional coupling can give the linearisation a conjugate pair of non-real eigenvalues");
    let n = &ctx.cfg.numeric;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let inst = search_negative_discriminant(n.dim, n.max_draws, n.threshold, &mut rng);
    let mut file = DiscriminantFile { seed: ctx.seed, draws: n.max_draws, instance: None, max_imag: None, rotated_discriminant: None };
    let Some(inst) = inst else {
        report.json("discriminant.json", &file)?;
        report.check("negative_discriminant", "the search finds a negative discriminant", f64::NAN, false);
        return Ok(());
    };
    file.draws = inst.draw;
    report.check("negative_discriminant", "the search finds a negative discriminant", inst.discriminant, inst.discriminant < n.threshold);
    let op = inst.assemble(1.0, n.lambda_ratio, n.coupling).stage("assemble")?;
    let spec = spectrum_f(&op, n.cluster_tol).stage("spectrum")?;
    let imag = max(spec.eigenvalues.iter().map(|z| z.im.abs()));
    let pair = spec.eigenvalues.iter().any(|z| z.im > 1e-3 && spec.eigenvalues.iter().any(|w| (w - z.conj()).norm() < 1e-8));
    report.check("conjugate_pair", "the assembled linearisation has a conjugate pair with |Im ℓ| > 1e-3", imag, pair);
    report.csv("f_spectrum.csv", &SPECTRUM_CSV_HEADER.map(String::from), &spec.csv_rows(0.0))?;
    // A rotation fixing ω can flip the sign of the discriminant.
    let (w, _, _) = inst.vectors();
    for _ in 0..100 {
        let r = random_rotation_fixing(&w, &mut rng);
        let d = inst.discriminant_in_frame(&r).stage("rotated_discriminant")?;
        if d > 0.0 {
            file.rotated_discriminant = Some(d);
            break;
        }
    }
    report.diag("draws", inst.draw);
    report.diag("discriminant", inst.discriminant);
    report.diag("rotated_discriminant", file.rotated_discriminant);
    file.max_imag = Some(imag);
    file.instance = Some(inst);
    report.json("discriminant.json", &file)
}

fn anharmonic_gaps(ctx: &Context, report: &mut Report) -> CliResult<()> {
    report.claim("level gaps of the anharmonic oscillator grow like a power of the level index");
    let ModelConfig::TruncatedAnharmonic { n, quadrature, basis_scale, .. } = ctx.model_config else {
        return Err(CliError::ConfigInvalid("anharmonic-gaps needs the truncated_anharmonic model".into()));
    };
    let count = ctx.cfg.numeric.gap_count;
    if count + 1 > n {
        return Err(CliError::ConfigInvalid(format!("gap_count {count} needs at least {} basis functions", count + 1)));
    }
    let levels = |size: usize| eigh(&real_mat(&anharmonic_matrices(size, quadrature, basis_scale).0)).values;
    let full = levels(n);
    let gaps: Vec<f64> = (0..count).map(|j| full[j + 1] - full[j]).collect();
    let js: Vec<f64> = (1..=count).map(|j| j as f64).collect();
    let fit = loglog_fit(&js, &gaps);
    let half = n / 2;
    let coarse = (half >= MIN_TRUNCATION && half > count).then(|| levels(half));
    let mut header = vec!["j [1]", "gap [1]"];
    if coarse.is_some() {
        header.push("gap_half_basis [1]");
    }
    let rows: Vec<Vec<f64>> = (0..count)
        .map(|j| {
            let mut r = vec![js[j], gaps[j]];
            if let Some(c) = &coarse {
                r.push(c[j + 1] - c[j]);
            }
            r
        })
        .collect();
    let series = PlotSeries::new("level gaps", &header, rows).log_log().annotate("exponent", fit.slope).annotate("r2", fit.r2);
    report.plot("gaps.csv", &series)?;
    report.diag("gap_exponent", fit.slope);
    report.diag("r2", fit.r2);
    if let Some(c) = &coarse {
        report.diag("truncation_change", max((0..=count).map(|j| ((full[j] - c[j]) / full[j]).abs())));
    }
    if let Some(bound) = ctx.cfg.checks.min_gap_exponent {
        report.check_ge("gap_exponent", "the fitted gap exponent exceeds the declared bound", fit.slope, bound);
    }
    if let Some(bound) = ctx.cfg.checks.min_r2 {
        report.check_ge("gap_fit_r2", "the power law fits the gaps", fit.r2, bound);
    }
    Ok(())
}
