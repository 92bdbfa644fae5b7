use crate::config::{parse_list, parse_vec3, positive, FileConfig};
use crate::output::{num, Run, Table};
use crate::*;
use dynamo_core::alpha::{
    alpha_matrix, axis_directions, cube_directions, default_directions, icosphere_directions, instability_scan,
    CellConfig, CellMethod,
};
use dynamo_core::bloch::{
    build_band_datum, concentration_radius, default_spacing, n_for_eps, parseval_check, synthesize, BandDatum,
    BandGeometry,
};
use dynamo_core::evolve::{energy_monitor, evolve, fit_growth, EvolveConfig};
use dynamo_core::field::{make_abc, norms, streamfunction, AbcParams, SpectralField};
use dynamo_core::glue::{check_catalog, plan_catalog, BlockCatalog, CatalogConfig, TailModel};
use dynamo_core::io::{read_field, write_field, write_volume};
use dynamo_core::modal::eigs::{leading_eigs, EigConfig, EigMethod};
use dynamo_core::modal::kato::{kato_first_order_check, KatoConfig};
use dynamo_core::modal::operator::ModalOperatorSpec;
use dynamo_core::C64;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use std::path::PathBuf;

struct Context {
    file: FileConfig,
    out: PathBuf,
    seed: u64,
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let from_file = |key: &str| file.get(key).and_then(|v| v.as_u64());
    let seed = cli.seed.or_else(|| from_file("seed")).unwrap_or(0);
    let threads = cli.threads.or_else(|| from_file("threads").map(|t| t as usize));
    let out = cli
        .out
        .or_else(|| file.get("out").and_then(|v| v.as_str()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("dynamo-out"));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let ctx = Context { file, out, seed };
    pool.install(|| match cli.command {
        Command::Field(FieldCmd::MakeAbc(a)) => execute(&ctx, "field make-abc", &a, make_abc_cmd),
        Command::Alpha(AlphaCmd::Scan(a)) => execute(&ctx, "alpha scan", &a, alpha_scan),
        Command::Alpha(AlphaCmd::Matrix(a)) => execute(&ctx, "alpha matrix", &a, alpha_matrix_cmd),
        Command::Spectrum(SpectrumCmd::Eigs(a)) => execute(&ctx, "spectrum eigs", &a, spectrum_eigs),
        Command::Spectrum(SpectrumCmd::Kato(a)) => execute(&ctx, "spectrum kato", &a, spectrum_kato),
        Command::Evolve(a) => execute(&ctx, "evolve", &a, evolve_cmd),
        Command::Bloch(BlochCmd::Synth(a)) => execute(&ctx, "bloch synth", &a, bloch_synth),
        Command::Bloch(BlochCmd::Parseval(a)) => execute(&ctx, "bloch parseval", &a, bloch_parseval),
        Command::Glue(GlueCmd::Build(a)) => execute(&ctx, "glue build", &a, glue_build),
        Command::Glue(GlueCmd::Check(a)) => execute(&ctx, "glue check", &a, glue_check),
    })
}

/// Merges flags with the config file, runs `body`, and writes the manifest
/// whether or not the run succeeded.
fn execute<T, F>(ctx: &Context, command: &str, args: &T, body: F) -> Result<(), CliError>
where
    T: serde::Serialize + DeserializeOwned,
    F: FnOnce(&mut Run, T) -> Result<(), CliError>,
{
    let merged = ctx.file.merge(args);
    let echo = match &merged {
        Ok((_, v)) => v.clone(),
        Err(_) => serde_json::to_value(args).unwrap_or(Value::Null),
    };
    let mut run = Run::new(ctx.out.clone(), command, ctx.seed, rayon::current_num_threads(), echo)?;
    let result = merged.and_then(|(a, _)| body(&mut run, a));
    run.finish(result.as_ref().err())?;
    result
}

fn load_flow(f: &FlowArgs, n: usize) -> Result<SpectralField, CliError> {
    let base = match (&f.abc, &f.field) {
        (Some(_), Some(_)) => return Err(CliError::Config("--abc and --field are mutually exclusive".into())),
        (_, Some(path)) => read_field(path)?,
        (abc, None) => {
            let [a, b, c] = parse_vec3("abc", abc.as_deref().unwrap_or("1,1,1"))?;
            make_abc(AbcParams::new(a, b, c), n)?
        }
    };
    let delta0 = f.delta0.unwrap_or(1.0);
    if !delta0.is_finite() {
        return Err(CliError::Config("--delta0 must be finite".into()));
    }
    Ok(base.scaled(C64::new(delta0, 0.0)))
}

fn cell_config(c: &CellArgs, seed: u64) -> Result<CellConfig, CliError> {
    let method: CellMethod = c.method.as_deref().unwrap_or("direct").parse()?;
    let tol = positive("tol", c.tol.unwrap_or(1e-12))?;
    Ok(CellConfig { method, tol, seed, ..Default::default() })
}

fn truncation(n: Option<usize>, default: usize) -> Result<usize, CliError> {
    match n.unwrap_or(default) {
        0 => Err(CliError::Config("--n must be at least 1".into())),
        n => Ok(n),
    }
}

fn complex(v: C64) -> Value {
    json!([v.re, v.im])
}

fn make_abc_cmd(run: &mut Run, a: MakeAbcArgs) -> Result<(), CliError> {
    let n = truncation(a.n, 1)?;
    let u = load_flow(&a.flow, n)?;
    write_field(&run.path("field.bin"), &u)?;
    run.artifact("field.bin");
    let r = norms(&u);
    run.note("truncation", n);
    run.note("l2_norm", u.l2_norm());
    run.note("sup_abs_bound", r.sup_abs_bound());
    run.note("sup_grad_bound", r.sup_grad_bound());
    Ok(())
}

fn parse_directions(s: &str) -> Result<Vec<[f64; 3]>, CliError> {
    match s {
        "default" => Ok(default_directions()),
        "axes" => Ok(axis_directions()),
        "cube" => Ok(cube_directions()),
        other => match other.strip_prefix("icosphere:").map(str::parse::<usize>) {
            Some(Ok(levels)) if levels <= 6 => Ok(icosphere_directions(levels)),
            _ => Err(CliError::Config(format!("--directions: unknown set {other:?}"))),
        },
    }
}

fn alpha_scan(run: &mut Run, a: AlphaScanArgs) -> Result<(), CliError> {
    let u = load_flow(&a.flow, 1)?;
    let cfg = cell_config(&a.cell, run.seed)?;
    let dirs = parse_directions(a.directions.as_deref().unwrap_or("default"))?;
    if let Some(t) = a.threshold {
        positive("threshold", t)?;
    }
    let report = instability_scan(&u, &dirs, a.threshold, &cfg)?;
    let mut t = Table::new(&[
        "d1", "d2", "d3", "eig1_re", "eig1_im", "eig2_re", "eig2_im", "eig3_re", "eig3_im", "margin", "certified",
    ]);
    for r in &report.rows {
        let mut row: Vec<String> = r.direction.iter().map(|&x| num(x)).collect();
        for e in r.eigenvalues {
            row.push(num(e.re));
            row.push(num(e.im));
        }
        row.push(num(r.margin));
        row.push(r.certified.to_string());
        t.push(row);
    }
    run.table("alpha_scan.csv", &t)?;
    run.note("directions", t.len());
    run.note("certified", report.certified);
    run.note("threshold", report.threshold);
    run.note("contraction", report.contraction);
    if let Some(best) = report.best_row() {
        run.note("best_direction", best.direction.to_vec());
        run.note("best_eigenvalue", complex(best.eigenvalues[0]));
    }
    Ok(())
}

fn alpha_matrix_cmd(run: &mut Run, a: AlphaMatrixArgs) -> Result<(), CliError> {
    let u = load_flow(&a.flow, 1)?;
    let cfg = cell_config(&a.cell, run.seed)?;
    let j = parse_vec3("j", a.j.as_deref().unwrap_or("1,0,0"))?;
    let m = alpha_matrix(&u, j, &cfg)?;
    let mut t = Table::new(&["index", "eig_re", "eig_im", "margin", "v1_re", "v1_im", "v2_re", "v2_im", "v3_re", "v3_im"]);
    for i in 0..3 {
        let mut row = vec![i.to_string(), num(m.eigenvalues[i].re), num(m.eigenvalues[i].im), num(m.simplicity_margin(i))];
        for c in m.eigenvectors[i] {
            row.push(num(c.re));
            row.push(num(c.im));
        }
        t.push(row);
    }
    run.table("alpha_matrix.csv", &t)?;
    run.note("direction", m.j_direction.to_vec());
    let rows: Vec<Value> = m.a.iter().map(|r| Value::Array(r.iter().map(|&c| complex(c)).collect())).collect();
    run.note("matrix", rows);
    run.note("trace", complex(m.trace()));
    Ok(())
}

fn spectrum_eigs(run: &mut Run, a: EigsArgs) -> Result<(), CliError> {
    let n = truncation(a.n, 3)?;
    let u = load_flow(&a.flow, 1)?;
    let j = parse_vec3("j", a.j.as_deref().unwrap_or("0.1,0,0"))?;
    let eps = positive("eps", a.eps.unwrap_or(1.0))?;
    let count = a.count.unwrap_or(3);
    if count == 0 {
        return Err(CliError::Config("--count must be at least 1".into()));
    }
    let method: EigMethod = a.solver.as_deref().unwrap_or("dense").parse()?;
    let cfg = EigConfig { method, tol: positive("tol", a.tol.unwrap_or(1e-8))?, seed: run.seed, ..Default::default() };
    let spec = ModalOperatorSpec::new(u.clone(), j, eps, n)?;
    let pairs = leading_eigs(&spec, count, &cfg)?;
    let jmag = j.iter().map(|x| x * x).sum::<f64>().sqrt();
    // First-order predictions μ_ℓ|j| only make sense for a nonzero j.
    let predictions = if jmag > 0.0 {
        let m = alpha_matrix(&u, j, &CellConfig { seed: run.seed, ..Default::default() })?;
        Some(m.eigenvalues.map(|mu| mu * jmag))
    } else {
        None
    };
    let mut t = Table::new(&["index", "jmag", "eps", "p_re", "p_im", "residual", "prediction_re", "prediction_im", "remainder"]);
    for (i, pair) in pairs.iter().enumerate() {
        let mut row = vec![i.to_string(), num(jmag), num(eps), num(pair.p.re), num(pair.p.im), num(pair.residual)];
        match &predictions {
            Some(pred) => {
                let q = *pred.iter().min_by(|x, y| (*x - pair.p).norm().total_cmp(&(*y - pair.p).norm())).expect("three");
                row.extend([num(q.re), num(q.im), num((pair.p - q).norm())]);
            }
            None => row.extend([String::new(), String::new(), String::new()]),
        }
        t.push(row);
        if a.save_eigvec.unwrap_or(false) {
            let name = format!("eigvec_{i}.bin");
            write_field(&run.path(&name), &pair.h)?;
            run.artifact(&name);
        }
    }
    run.table("eigs.csv", &t)?;
    run.note("order", spec.order());
    run.note("leading", complex(pairs[0].p));
    run.note("max_residual", pairs.iter().map(|p| p.residual).fold(0.0, f64::max));
    Ok(())
}

fn spectrum_kato(run: &mut Run, a: KatoArgs) -> Result<(), CliError> {
    let n = truncation(a.n, 3)?;
    let u = load_flow(&a.flow, 1)?;
    let dir = parse_vec3("direction", a.direction.as_deref().unwrap_or("1,0,0"))?;
    let mags = parse_list("jmags", a.jmags.as_deref().unwrap_or("0.01,0.005,0.0025"))?;
    if mags.len() < 2 || mags.iter().any(|&m| m <= 0.0) || mags.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CliError::Config("--jmags needs at least two positive, strictly decreasing values".into()));
    }
    let mut cfg = KatoConfig::new(n);
    cfg.cell.seed = run.seed;
    let report = kato_first_order_check(&u, dir, &mags, &cfg)?;
    let mut t = Table::new(&["jmag", "eps", "branch", "p_re", "p_im", "prediction_re", "prediction_im", "remainder"]);
    for r in &report.rows {
        for b in 0..3 {
            t.push(vec![
                num(r.magnitude),
                num(1.0),
                b.to_string(),
                num(r.eigenvalues[b].re),
                num(r.eigenvalues[b].im),
                num(r.predictions[b].re),
                num(r.predictions[b].im),
                num(r.remainders[b]),
            ]);
        }
    }
    run.table("kato.csv", &t)?;
    run.note("slope", report.slope);
    run.note("slopes", report.slopes.to_vec());
    run.note("mu", report.mu.iter().map(|&m| complex(m)).collect::<Vec<_>>());
    run.note("direction", report.direction.to_vec());
    Ok(())
}

fn evolve_cmd(run: &mut Run, a: EvolveArgs) -> Result<(), CliError> {
    let n = truncation(a.n, 2)?;
    let u = load_flow(&a.flow, 1)?;
    let j = parse_vec3("j", a.j.as_deref().unwrap_or("0.1,0,0"))?;
    let eps = positive("eps", a.eps.unwrap_or(1.0))?;
    let t_end = positive("t-end", a.t_end.unwrap_or(20.0))?;
    let dt = a.dt.map(|d| positive("dt", d)).transpose()?;
    let sample_every = a.sample_every.unwrap_or(1).max(1);
    let spec = ModalOperatorSpec::new(u, j, eps, n)?;
    let init = a.init.unwrap_or_else(|| "eig".into());
    let (h0, lead) = if init == "eig" {
        let pair = leading_eigs(&spec, 1, &EigConfig { seed: run.seed, ..Default::default() })?.remove(0);
        (pair.h, Some(pair.p))
    } else {
        (read_field(&PathBuf::from(&init))?.resized(n), None)
    };
    let cfg = EvolveConfig { dt, t_end, sample_every, project_divergence: a.project_divergence, ..Default::default() };
    let result = evolve(&spec, &h0, &cfg)?;
    let mut t = Table::new(&["t", "norm", "slack_growth_bound", "slack_energy_estimate", "div_drift"]);
    for s in &result.trace {
        t.push(vec![num(s.t), num(s.norm), num(s.slack_growth), num(s.slack_energy), num(s.div_drift)]);
    }
    run.table("trace.csv", &t)?;
    write_field(&run.path("final.bin"), &result.final_state)?;
    run.artifact("final.bin");
    let energy = energy_monitor(&result);
    run.note("dt", result.dt);
    run.note("projections", result.projections);
    run.note("energy_ok", energy.ok());
    run.note("min_slack_growth", energy.min_slack_growth);
    run.note("min_slack_energy", energy.min_slack_energy);
    if let Some(p) = lead {
        run.note("leading_eigenvalue", complex(p));
    }
    match fit_growth(&result, cfg.fit_fraction, cfg.r2_threshold) {
        Ok(fit) => {
            run.note("gamma", fit.gamma);
            run.note("r2", fit.r2);
            run.note("fit_reliable", fit.reliable);
        }
        Err(e) => run.note("gamma_error", e.to_string()),
    }
    Ok(())
}

fn band_datum(run: &mut Run, b: &BandArgs) -> Result<(BandDatum, f64), CliError> {
    let n = truncation(b.n, 2)?;
    let u = load_flow(&b.flow, 1)?;
    let j_star = parse_vec3("j-star", b.j_star.as_deref().unwrap_or("0.2,0,0"))?;
    let half_width = positive("half-width", b.half_width.unwrap_or(0.1))?;
    let order = b.order.unwrap_or(5);
    if order == 0 {
        return Err(CliError::Config("--order must be at least 1".into()));
    }
    let eps = positive("eps", b.eps.unwrap_or(1.0))?;
    let zeta = b.zeta.unwrap_or(0.9);
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(CliError::Config(format!("--zeta must lie in (0, 1), got {zeta}")));
    }
    let scale = n_for_eps(eps, zeta)?;
    let spec = ModalOperatorSpec::new(u, j_star, eps / zeta.powi(scale as i32), n)?;
    let start = leading_eigs(&spec, 1, &EigConfig { seed: run.seed, ..Default::default() })?.remove(0);
    let datum = build_band_datum(&spec, &start, BandGeometry { half_width, order }, eps, zeta)?;
    let h = match b.spacing {
        Some(h) => positive("spacing", h)?,
        None => default_spacing(&datum.family),
    };
    run.note("scale_index", datum.n);
    run.note("start_eigenvalue", complex(start.p));
    run.note("min_growth", datum.min_growth);
    run.note("band_norm", datum.band_norm);
    run.note("spacing", h);
    Ok((datum, h))
}

fn bloch_synth(run: &mut Run, a: SynthArgs) -> Result<(), CliError> {
    let (datum, h) = band_datum(run, &a.band)?;
    let half = positive("box", a.r#box.unwrap_or(10.0))?;
    let volume = synthesize(&datum.family, half, h)?;
    write_volume(&run.path("volume.bin"), &volume)?;
    run.artifact("volume.bin");
    let mut t = Table::new(&["R", "mass"]);
    for k in 1..=8 {
        let r = half * k as f64 / 8.0;
        t.push(vec![num(r), num(volume.box_mass(r))]);
    }
    run.table("mass.csv", &t)?;
    run.note("side", volume.side);
    run.note("max_abs", volume.max_abs());
    run.note("max_imag", volume.max_imag());
    Ok(())
}

fn bloch_parseval(run: &mut Run, a: ParsevalArgs) -> Result<(), CliError> {
    let (datum, h) = band_datum(run, &a.band)?;
    let half_width = a.band.half_width.unwrap_or(0.1);
    let r_max = positive("r-max", a.r_max.unwrap_or(40.0 / half_width))?;
    let rec = parseval_check(&datum.family, r_max, h)?;
    let mut t = Table::new(&["R", "lhs", "rhs", "rel_err"]);
    for i in 0..rec.radii.len() {
        t.push(vec![num(rec.radii[i]), num(rec.lhs[i]), num(rec.rhs), num(rec.rel_err[i])]);
    }
    run.table("parseval.csv", &t)?;
    run.note("rhs", rec.rhs);
    run.note("final_rel_err", rec.rel_err.last().copied().unwrap_or(f64::NAN));
    run.note("decreasing", rec.decreasing);
    run.note("converged", rec.converged);
    if let Some(delta) = a.delta {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(CliError::Config(format!("--delta must lie in (0, 1), got {delta}")));
        }
        let c = concentration_radius(&datum.family, delta, h, r_max)?;
        run.note("concentration_radius", c.radius);
        run.note("concentration_mass_fraction", c.mass_fraction);
    }
    Ok(())
}

fn glue_build(run: &mut Run, a: GlueBuildArgs) -> Result<(), CliError> {
    let u = load_flow(&a.flow, 1)?;
    let psi = streamfunction(&u)?;
    let config = CatalogConfig {
        u_const: positive("u-const", a.u_const.unwrap_or(10.0))?,
        zeta: a.zeta.unwrap_or(0.9),
        n_max: a.n_max.unwrap_or(3),
        l_max: a.l_max.unwrap_or(3),
        ramp_degree: a.ramp_degree.unwrap_or(5),
    };
    let tail = match a.tail_constant {
        Some(c) => TailModel::Power { constant: positive("tail-constant", c)? },
        None => TailModel::Sinc { half_width: positive("tail-width", a.tail_width.unwrap_or(0.1))? },
    };
    let catalog = plan_catalog(&psi, config, tail)?;
    std::fs::write(run.path("catalog.toml"), catalog.to_toml()?)
        .map_err(|e| CliError::Config(format!("cannot write catalog: {e}")))?;
    run.artifact("catalog.toml");
    run.note("blocks", catalog.blocks.len());
    run.note("max_radius", catalog.blocks.iter().map(|b| b.cutoff.outer_radius).fold(0.0, f64::max));
    run.note("psi_w2", catalog.psi_w2());
    Ok(())
}

fn glue_check(run: &mut Run, a: GlueCheckArgs) -> Result<(), CliError> {
    let path = a.catalog.clone().unwrap_or_else(|| run.path("catalog.toml"));
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let catalog = BlockCatalog::from_toml(&text)?;
    let eps = parse_list("eps", a.eps.as_deref().unwrap_or("0.9,0.81,0.729"))?;
    let times = parse_list("times", a.times.as_deref().unwrap_or("0.5,1.5,2.5,3.5"))?;
    let report = check_catalog(&catalog, &eps, &times)?;
    let mut t = Table::new(&["check", "subject", "measured", "bound", "margin", "pass"]);
    for r in &report.rows {
        t.push(vec![r.check.clone(), r.subject.clone(), num(r.measured), num(r.bound), num(r.margin), r.pass.to_string()]);
    }
    run.table("glue_checks.csv", &t)?;
    run.note("checks", report.rows.len());
    run.note("passed", report.passed());
    run.note("failures", report.failures().map(|r| format!("{} [{}]", r.check, r.subject)).collect::<Vec<_>>());
    Ok(())
}
