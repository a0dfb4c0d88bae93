use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use floquet_core::asymptotics::{residual_report, RateSummary};
use floquet_core::eigen::{track_bands, track_bands_streaming};
use floquet_core::expansion::{
    gelfand_transform_on, inverse_gelfand, periodic_t_grid, quasiperiodicity_defect, reconstruct, regularized_reconstruct,
    ExpansionMode, ExpansionResult, RegularizationPoint, SampledFunction,
};
use floquet_core::singularities::{analyze_singularities, LambdaRect, SingularityReport};
use floquet_core::OperatorSpec;
use num_complex::Complex64;
use serde::Deserialize;

use crate::config::{Mode, RunConfig};
use crate::output::{OutDir, Provenance};
use crate::{input, CheckFailed, InputError};

fn read_bytes(path: &Path, what: &str) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {what} {}", path.display())).map_err(InputError::wrap)
}

fn load_spec(cfg: &RunConfig, prov: Provenance) -> anyhow::Result<(OperatorSpec, Provenance)> {
    let path = cfg.spec.as_deref().ok_or_else(|| InputError::wrap(anyhow::anyhow!("--spec is required")))?;
    let bytes = read_bytes(path, "spec")?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| InputError::wrap(e.into()))?;
    let spec = OperatorSpec::from_json_str(&text).with_context(|| format!("loading spec {}", path.display()))?;
    Ok((spec, prov.with_spec(path, &bytes)))
}

fn load_input(cfg: &RunConfig, prov: Provenance) -> anyhow::Result<(SampledFunction, Provenance)> {
    let path = cfg.input.as_deref().ok_or_else(|| InputError::wrap(anyhow::anyhow!("--input is required")))?;
    let bytes = read_bytes(path, "input")?;
    let f = input::read_function(path, cfg.x_res)?;
    Ok((f, prov.with_input(path, &bytes)))
}

fn real_grid(cfg: &RunConfig) -> Vec<Complex64> {
    cfg.t_samples().into_iter().map(|t| Complex64::new(t, 0.0)).collect()
}

fn e(x: f64) -> String {
    format!("{x:.15e}")
}

pub fn bands(cfg: &RunConfig) -> anyhow::Result<()> {
    let (spec, prov) = load_spec(cfg, Provenance::new("bands", cfg))?;
    let grid = real_grid(cfg);
    let out = OutDir::new(&cfg.out, prov);
    let mut csv = out.stream("bands.csv")?;
    writeln!(csv, "p,k,j,re_t,im_t,re_lambda,im_lambda,delta_residual,alpha_abs,simple")?;
    let mut io_error = None;
    let mut per_k: BTreeMap<String, usize> = BTreeMap::new();
    let result = track_bands_streaming(&spec, &grid, cfg.k_min..=cfg.k_max, &cfg.eigen(), |band| {
        let label = band.k.map_or("low".to_string(), |k| k.to_string());
        *per_k.entry(label).or_default() += 1;
        let k = band.k.map_or(String::new(), |k| k.to_string());
        let j = band.j.map_or(String::new(), |j| j.to_string());
        let mut rows = String::new();
        for r in &band.records {
            let _ = writeln!(
                rows,
                "{},{k},{j},{},{},{},{},{:.6e},{:.12e},{}",
                band.p,
                e(r.t.re),
                e(r.t.im),
                e(r.lambda.re),
                e(r.lambda.im),
                r.delta_residual,
                r.alpha.norm(),
                r.simple
            );
        }
        if io_error.is_none() {
            io_error = csv.write_all(rows.as_bytes()).and_then(|_| csv.flush()).err();
        }
        Ok(())
    });
    if let Some(err) = io_error {
        return Err(err.into());
    }
    let mut summary = format!("t grid: {} points in [{}, {}]\nk range: [{}, {}]\n", grid.len(), cfg.t_min, cfg.t_max, cfg.k_min, cfg.k_max);
    match &result {
        Ok(set) => {
            summary += &format!(
                "status: ok\nbands: {}\nN0: {}\nc1: {:.6e}\nanchor t: {}\n",
                set.bands.len(),
                set.calibration.n0,
                set.calibration.c1,
                set.anchor
            );
        }
        Err(err) => summary += &format!("status: failed ({err}); bands.csv holds the bands finished before the failure\n"),
    }
    summary += "bands per k label:\n";
    for (k, n) in &per_k {
        summary += &format!("  {k}: {n}\n");
    }
    out.write("bands.txt", &summary)?;
    result?;
    Ok(())
}

fn rate_line(name: &str, s: &RateSummary) -> String {
    format!(
        "{name}: max {:.4e}, median {:.4e}, max/median {:.3} -> {}\n",
        s.max,
        s.median,
        if s.median > 0.0 { s.max / s.median } else { 0.0 },
        if s.bounded { "PASS" } else { "FAIL" }
    )
}

pub fn verify_asymptotics(cfg: &RunConfig) -> anyhow::Result<()> {
    let (spec, prov) = load_spec(cfg, Provenance::new("verify-asymptotics", cfg))?;
    let bands = track_bands(&spec, &real_grid(cfg), cfg.k_min..=cfg.k_max, &cfg.eigen())?;
    let report = residual_report(&bands.bands, &spec)?;
    let out = OutDir::new(&cfg.out, prov);
    let mut csv = String::from("k,j,re_t,im_t,e_lambda,e_psi,e_x,n_lambda,n_psi,n_x\n");
    for r in &report.rows {
        csv += &format!(
            "{},{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}\n",
            r.k, r.j, e(r.t.re), e(r.t.im), r.e_lambda, r.e_psi, r.e_x, r.n_lambda, r.n_psi, r.n_x
        );
    }
    out.write("decay.csv", &csv)?;
    let bound = spec.order() as f64 - 3.0 + floquet_core::asymptotics::SLOPE_SLACK;
    let mut summary = String::from("normalized residuals bounded when max <= 3 x median\n");
    summary += &rate_line("e_lambda |k|^(3-n) / max(ln|k|, 1)", &report.lambda);
    summary += &rate_line("e_psi |k| / max(ln|k|, 1)", &report.psi);
    summary += &rate_line("e_x |k| / max(ln|k|, 1)", &report.x);
    summary += &match report.lambda.slope {
        Some(s) => format!("e_lambda fitted slope {s:.4} <= {bound:.2} -> {}\n", if report.lambda_slope_ok() { "PASS" } else { "FAIL" }),
        None => "e_lambda fitted slope: residuals at rounding level, nothing to fit -> PASS\n".to_string(),
    };
    summary += &format!("overall: {}\n", if report.passes() { "PASS" } else { "FAIL" });
    out.write("asymptotics.txt", &summary)?;
    if !report.passes() {
        return Err(CheckFailed("asymptotic residual bounds not met; see asymptotics.txt".into()).into());
    }
    Ok(())
}

fn report_text(reports: &[SingularityReport]) -> String {
    let mut s = format!("reports: {}\n", reports.len());
    for (i, r) in reports.iter().enumerate() {
        s += &format!("\n[point {}]\nlambda: {} {}\n", i + 1, e(r.lambda.re), e(r.lambda.im));
        s += &format!("t_star: {} {}\nmultiplicity: {}\n", e(r.t_star.re), e(r.t_star.im), r.multiplicity);
        let fibers: Vec<String> = r.t_values.iter().map(|f| format!("({:.10} {:.10}) x{}", f.t.re, f.t.im, f.multiplicity)).collect();
        s += &format!("t_fibers: {}\nclassification: {}\n", fibers.join(", "), r.classification);
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.6}"));
        s += &format!("exponent: {}\nr_squared: {}\n", opt(r.exponent), opt(r.r_squared));
        s += &format!("pole_order: {}\nexcess_exponent: {}\n", r.pole_order.map_or("none".into(), |o| o.to_string()), opt(r.excess_exponent));
        s += "norm_profile: distance, re_t, im_t, projection_norm\n";
        for p in &r.norm_profile {
            s += &format!("  {:.6e}, {}, {}, {:.12e}\n", p.distance, e(p.t.re), e(p.t.im), p.projection_norm);
        }
    }
    s
}

pub fn singularities(cfg: &RunConfig) -> anyhow::Result<()> {
    let (spec, prov) = load_spec(cfg, Provenance::new("singularities", cfg))?;
    let (a, b, c, d) = cfg.rect;
    let rect = LambdaRect::new(a, b, c, d)?;
    let reports = analyze_singularities(&spec, &rect, cfg.density, &cfg.eigen())?;
    let mut out = OutDir::new(&cfg.out, prov);
    out.note(format!("lambda rectangle: [{a}, {b}] x [{c}, {d}], density {}", cfg.density));
    out.write("singularities.txt", &report_text(&reports))?;
    out.write_json("singularities.json", "reports", &reports)?;
    let mut csv = String::from("point,distance,re_t,im_t,projection_norm\n");
    for (i, r) in reports.iter().enumerate() {
        for p in &r.norm_profile {
            csv += &format!("{},{:.6e},{},{},{:.12e}\n", i + 1, p.distance, e(p.t.re), e(p.t.im), p.projection_norm);
        }
    }
    out.write("profiles.csv", &csv)?;
    Ok(())
}

#[derive(Deserialize)]
struct FlagFile {
    reports: Vec<SingularityReport>,
}

fn load_flags(path: Option<&Path>) -> anyhow::Result<Vec<SingularityReport>> {
    let Some(path) = path else { return Ok(Vec::new()) };
    let bytes = read_bytes(path, "flags")?;
    let doc: FlagFile = serde_json::from_slice(&bytes).with_context(|| format!("parsing flags {}", path.display())).map_err(InputError::wrap)?;
    Ok(doc.reports)
}

fn expansion_summary(cfg: &RunConfig, r: &ExpansionResult) -> String {
    let mode = match r.mode {
        ExpansionMode::RealLine => "real-line".to_string(),
        ExpansionMode::Contour { epsilon } => format!("contour (a = {}, epsilon = {epsilon})", cfg.contour_a),
    };
    let mut s = format!(
        "mode: {mode}\nk range: [{}, {}]\nt resolution: {}\nx range: [{}, {}]\nbands used: {}\n",
        cfg.k_min, cfg.k_max, r.t_resolution, cfg.x_min, cfg.x_max, r.band_count
    );
    s += &format!("l2 error: {:.6e}\nrelative l2 error: {:.6e}\nsup error: {:.6e}\n", r.l2_error, r.relative_l2_error, r.sup_error);
    if let Some(rich) = r.richardson {
        s += &format!("richardson change (epsilon -> epsilon/2): {rich:.6e}\n");
    }
    if r.principal.is_some() {
        s += "regularized: principal part plus jet corrections\n";
    }
    s += &format!("omitted bands: {}\n", r.omitted.len());
    for o in &r.omitted {
        s += &format!("  p {} (k {:?}, j {:?}): {}\n", o.p, o.k, o.j, o.reason);
    }
    for w in &r.warnings {
        s += &format!("warning: {w}\n");
    }
    s
}

pub fn expand(cfg: &RunConfig) -> anyhow::Result<()> {
    let (spec, prov) = load_spec(cfg, Provenance::new("expand", cfg))?;
    let (f, prov) = load_input(cfg, prov)?;
    let flags = load_flags(cfg.flags.as_deref())?;
    let settings = cfg.expansion();
    let k_range = cfg.k_min..=cfg.k_max;
    let result = match (cfg.mode, cfg.regularize) {
        (Mode::RealLine, false) => reconstruct(&spec, &f, k_range, &settings, ExpansionMode::RealLine, &flags)?,
        (Mode::RealLine, true) => {
            let points: Vec<RegularizationPoint> = flags.iter().filter_map(RegularizationPoint::from_report).collect();
            regularized_reconstruct(&spec, &f, k_range, &settings, &points)?
        }
        (Mode::Contour, false) => reconstruct(&spec, &f, k_range, &settings, ExpansionMode::Contour { epsilon: cfg.contour_eps }, &flags)?,
        (Mode::Contour, true) => return Err(InputError::wrap(anyhow::anyhow!("--regularize applies to real-line mode only"))),
    };
    let out = OutDir::new(&cfg.out, prov);
    out.write("expansion.csv", &result.to_csv())?;
    let mut coeffs = String::from("p,k,j,re_t,im_t,re_lambda,im_lambda,re_a,im_a\n");
    for b in &result.coefficients {
        let k = b.k.map_or(String::new(), |k| k.to_string());
        let j = b.j.map_or(String::new(), |j| j.to_string());
        for ((t, l), a) in b.t.iter().zip(&b.lambda).zip(&b.a) {
            coeffs += &format!("{},{k},{j},{},{},{},{},{},{}\n", b.p, e(t.re), e(t.im), e(l.re), e(l.im), e(a.re), e(a.im));
        }
    }
    out.write("coefficients.csv", &coeffs)?;
    out.write("expansion.txt", &expansion_summary(cfg, &result))?;
    Ok(())
}

pub fn gelfand(cfg: &RunConfig) -> anyhow::Result<()> {
    let prov = Provenance::new("gelfand", cfg);
    let (f, prov) = load_input(cfg, prov)?;
    let grid = periodic_t_grid(cfg.t_grid, cfg.contour_a);
    let tr = gelfand_transform_on(&f, &grid)?;
    let back = inverse_gelfand(&tr, f.x_min(), f.x_max())?;
    let m = f.dim();
    let mut csv = String::from("x");
    for i in 0..m {
        csv += &format!(",re_f{i},im_f{i}");
    }
    for i in 0..m {
        csv += &format!(",re_back{i},im_back{i}");
    }
    csv += ",error\n";
    let mut sup: f64 = 0.0;
    for (i, (a, b)) in f.values.iter().zip(&back.values).enumerate() {
        csv += &format!("{:.12}", f.x(i));
        for z in a.iter().chain(b) {
            csv += &format!(",{},{}", e(z.re), e(z.im));
        }
        let err = a.iter().zip(b).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
        sup = sup.max(err);
        csv += &format!(",{err:.6e}\n");
    }
    let mut fibers = String::from("re_t,im_t,x");
    for i in 0..m {
        fibers += &format!(",re_{i},im_{i}");
    }
    fibers += "\n";
    for fiber in &tr.fibers {
        for (q, v) in fiber.values.iter().enumerate() {
            fibers += &format!("{},{},{:.12}", e(fiber.t.re), e(fiber.t.im), q as f64 / f.per_unit as f64);
            for z in v {
                fibers += &format!(",{},{}", e(z.re), e(z.im));
            }
            fibers += "\n";
        }
    }
    let defect = grid.iter().map(|&t| quasiperiodicity_defect(&f, t)).fold(0.0, f64::max);
    let tail = tr.fibers.iter().map(|f| f.tail_bound).fold(0.0, f64::max);
    let out = OutDir::new(&cfg.out, prov);
    out.write("gelfand.csv", &csv)?;
    out.write("fibers.csv", &fibers)?;
    out.write(
        "gelfand.txt",
        &format!(
            "t samples: {}\nround-trip sup error: {sup:.6e}\nquasiperiodicity defect: {defect:.6e}\ntail bound: {tail:.6e}\n",
            grid.len()
        ),
    )?;
    Ok(())
}
