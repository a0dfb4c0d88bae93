//! Sampled input functions: CSV rows `x, re_0, im_0, re_1, im_1, ...` on a
//! uniform grid with spacing `1/x_res`, preceded by optional declarations:
//!
//! ```text
//! # class: compact            (or: class: s <M> <alpha>)
//! # absolutely-continuous
//! # odd-order-relaxed
//! # support: <a> <b>
//! ```
//!
//! Without a `support` line, compact inputs use the hull of the nonzero
//! samples and other inputs the sampled range.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use floquet_core::expansion::{ClassFlags, SampledFunction};
use num_complex::Complex64;

use crate::InputError;

pub fn read_function(path: &Path, x_res: usize) -> anyhow::Result<SampledFunction> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading input {}", path.display())).map_err(InputError::wrap)?;
    parse_function(&text, x_res).with_context(|| format!("parsing input {}", path.display())).map_err(InputError::wrap)
}

pub fn parse_function(text: &str, x_res: usize) -> anyhow::Result<SampledFunction> {
    let mut flags = ClassFlags::default();
    let mut support = None;
    for line in text.lines().filter_map(|l| l.trim().strip_prefix('#')) {
        let line = line.trim();
        let (key, rest) = line.split_once(':').map_or((line, ""), |(k, r)| (k.trim(), r.trim()));
        let numbers = || -> anyhow::Result<Vec<f64>> {
            rest.split_whitespace().skip_while(|w| w.parse::<f64>().is_err()).map(|w| w.parse::<f64>().map_err(Into::into)).collect()
        };
        match key {
            "class" if rest == "compact" => flags.compact_support = true,
            "class" if rest.starts_with('s') => match numbers()?.as_slice() {
                [m, alpha] => flags.class_s = Some((*m, *alpha)),
                _ => bail!("expected `class: s <M> <alpha>`"),
            },
            "class" => bail!("unknown class {rest:?}"),
            "absolutely-continuous" => flags.absolutely_continuous = true,
            "odd-order-relaxed" => flags.odd_order_relaxed = true,
            "support" => match numbers()?.as_slice() {
                [a, b] => support = Some((*a, *b)),
                _ => bail!("expected `support: <a> <b>`"),
            },
            _ => {}
        }
    }

    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut xs = Vec::new();
    let mut values: Vec<Vec<Complex64>> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let numbers: Vec<f64> = record
            .iter()
            .map(|field| field.parse::<f64>().map_err(|e| anyhow!("row {}: {field:?}: {e}", row + 1)))
            .collect::<anyhow::Result<_>>()?;
        if numbers.len() < 3 || numbers.len().is_multiple_of(2) {
            bail!("row {}: expected x followed by (re, im) pairs", row + 1);
        }
        xs.push(numbers[0]);
        values.push(numbers[1..].chunks(2).map(|p| Complex64::new(p[0], p[1])).collect());
    }
    if xs.len() < 2 {
        bail!("input needs at least two samples");
    }
    let h = 1.0 / x_res as f64;
    if let Some(i) = xs.windows(2).position(|w| ((w[1] - w[0]) - h).abs() > 1e-9) {
        bail!("samples {} and {} are not spaced 1/{x_res}", i + 1, i + 2);
    }
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    let support = support.unwrap_or_else(|| {
        if !flags.compact_support {
            return (lo, hi);
        }
        let nonzero: Vec<f64> = xs.iter().zip(&values).filter(|(_, v)| v.iter().any(|c| c.norm() > 0.0)).map(|(x, _)| *x).collect();
        match (nonzero.first(), nonzero.last()) {
            (Some(&a), Some(&b)) => ((a - h).max(lo), (b + h).min(hi)),
            _ => (lo, hi),
        }
    });
    Ok(SampledFunction::new(lo, x_res, values, support, flags)?)
}
