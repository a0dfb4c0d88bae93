use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use floquet_core::eigen::EigenSettings;
use floquet_core::expansion::ExpansionSettings;
use floquet_core::ode::OdeTolerances;
use serde::Deserialize;

use crate::InputError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    RealLine,
    Contour,
}

/// Every option, as given on the command line or in a TOML config file
/// (same names, kebab-case). Unset values fall back to the config file and
/// then to the defaults in [`RunConfig::resolve`].
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Options {
    /// Operator spec (JSON document)
    #[arg(long, global = true)]
    pub spec: Option<PathBuf>,
    /// Number of t samples (band grid, expansion and transform resolution)
    #[arg(long, global = true)]
    pub t_grid: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub t_min: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub t_max: Option<f64>,
    /// Period window [−a, 2π − a) and contour offset a
    #[arg(long, global = true)]
    pub contour_a: Option<f64>,
    /// Contour height ε
    #[arg(long, global = true)]
    pub contour_eps: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub k_min: Option<i64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub k_max: Option<i64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub x_min: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub x_max: Option<f64>,
    /// Samples per unit length in x (input functions and eigenfunctions)
    #[arg(long, global = true)]
    pub x_res: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Relative ODE tolerance (absolute tolerance is 1e-2 of it)
    #[arg(long, global = true)]
    pub tol_ode: Option<f64>,
    /// Newton tolerance, also the accepted relative correction while tracking
    #[arg(long, global = true)]
    pub tol_newton: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    /// Sampled input function (CSV) for expand and gelfand
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Singularity reports (JSON written by `singularities`) for expand
    #[arg(long, global = true)]
    pub flags: Option<PathBuf>,
    /// Subtract Taylor jets around the flagged singularities
    #[arg(long, global = true)]
    #[serde(default)]
    pub regularize: bool,
    /// λ search rectangle for `singularities`
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub re_min: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub re_max: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub im_min: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub im_max: Option<f64>,
    /// Grid points per unit of √|λ| for the multiple-eigenvalue scan
    #[arg(long, global = true)]
    pub density: Option<usize>,
}

macro_rules! merge {
    ($a:ident, $b:ident; $($f:ident),*) => {
        Options { $($f: $a.$f.or($b.$f),)* regularize: $a.regularize || $b.regularize }
    };
}

impl Options {
    pub fn from_toml_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display())).map_err(InputError::wrap)?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display())).map_err(InputError::wrap)
    }

    /// Values set here win over `file`.
    pub fn over(self, file: Options) -> Options {
        merge!(self, file; spec, t_grid, t_min, t_max, contour_a, contour_eps, k_min, k_max, x_min, x_max, x_res, out,
            tol_ode, tol_newton, mode, input, flags, re_min, re_max, im_min, im_max, density)
    }
}

/// Fully resolved run parameters.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub spec: Option<PathBuf>,
    pub t_grid: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub contour_a: f64,
    pub contour_eps: f64,
    pub k_min: i64,
    pub k_max: i64,
    pub x_min: f64,
    pub x_max: f64,
    pub x_res: usize,
    pub out: PathBuf,
    pub tol_ode: f64,
    pub tol_newton: f64,
    pub mode: Mode,
    pub input: Option<PathBuf>,
    pub flags: Option<PathBuf>,
    pub regularize: bool,
    pub rect: (f64, f64, f64, f64),
    pub density: usize,
}

impl RunConfig {
    pub fn resolve(o: Options) -> anyhow::Result<Self> {
        let c = RunConfig {
            spec: o.spec,
            t_grid: o.t_grid.unwrap_or(32),
            t_min: o.t_min.unwrap_or(0.15),
            t_max: o.t_max.unwrap_or(PI - 0.15),
            contour_a: o.contour_a.unwrap_or(PI / 4.0),
            contour_eps: o.contour_eps.unwrap_or(0.1),
            k_min: o.k_min.unwrap_or(-10),
            k_max: o.k_max.unwrap_or(10),
            x_min: o.x_min.unwrap_or(-1.0),
            x_max: o.x_max.unwrap_or(2.0),
            x_res: o.x_res.unwrap_or(256),
            out: o.out.unwrap_or_else(|| PathBuf::from("out")),
            tol_ode: o.tol_ode.unwrap_or(1e-10),
            tol_newton: o.tol_newton.unwrap_or(1e-10),
            mode: o.mode.unwrap_or(Mode::RealLine),
            input: o.input,
            flags: o.flags,
            regularize: o.regularize,
            rect: (o.re_min.unwrap_or(-110.0), o.re_max.unwrap_or(-1.0), o.im_min.unwrap_or(-1.0), o.im_max.unwrap_or(1.0)),
            density: o.density.unwrap_or(floquet_core::singularities::DEFAULT_SCAN_DENSITY),
        };
        c.validate().map_err(InputError::wrap)?;
        Ok(c)
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.t_grid == 0 {
            bail!("--t-grid must be positive");
        }
        if self.t_max < self.t_min || (self.t_grid > 1 && self.t_max == self.t_min) {
            bail!("empty t range [{}, {}]", self.t_min, self.t_max);
        }
        if self.k_max < self.k_min {
            bail!("empty k range [{}, {}]", self.k_min, self.k_max);
        }
        if self.x_max <= self.x_min {
            bail!("empty x range [{}, {}]", self.x_min, self.x_max);
        }
        if self.x_res < 2 || self.x_res % 2 == 1 {
            bail!("--x-res must be an even number ≥ 2");
        }
        if !(self.tol_ode > 0.0 && self.tol_newton > 0.0 && self.contour_eps > 0.0 && self.contour_a > 0.0) {
            bail!("tolerances and contour parameters must be positive");
        }
        let (a, b, c, d) = self.rect;
        if b < a || d < c {
            bail!("empty λ rectangle");
        }
        if self.density == 0 {
            bail!("--density must be positive");
        }
        Ok(())
    }

    pub fn eigen(&self) -> EigenSettings {
        EigenSettings {
            ode: OdeTolerances::with_rtol(self.tol_ode),
            newton_tol: self.tol_newton,
            x_intervals: self.x_res,
            ..EigenSettings::default()
        }
    }

    pub fn expansion(&self) -> ExpansionSettings {
        ExpansionSettings {
            eigen: self.eigen(),
            t_resolution: self.t_grid,
            offset: self.contour_a,
            x_range: (self.x_min, self.x_max),
            accept: self.tol_newton,
        }
    }

    /// Uniform real grid `t_min..=t_max` with `t_grid` points.
    pub fn t_samples(&self) -> Vec<f64> {
        if self.t_grid == 1 {
            return vec![self.t_min];
        }
        (0..self.t_grid).map(|i| self.t_min + (self.t_max - self.t_min) * i as f64 / (self.t_grid - 1) as f64).collect()
    }

    /// Tolerance lines shared by all output headers.
    pub fn tolerance_summary(&self) -> String {
        let e = self.eigen();
        format!(
            "ode rtol={:e} atol={:e}; newton={:e}; x-res={}; admissibility-eps={}",
            e.ode.rtol, e.ode.atol, e.newton_tol, e.x_intervals, e.admissibility_eps
        )
    }
}
