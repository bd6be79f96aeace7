//! Plot-ready CSV tables.
//!
//! | file | columns |
//! |---|---|
//! | sensitivity slice | `x,ell` |
//! | occupation snapshot | `node,realized,projected` |
//! | loss curve | `epoch,loss,alpha` |
//! | smile | `strike,expiry,market_iv,model_iv` |

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lov_core::calibrate::QuoteFit;
use lov_core::market::implied_vol;
use lov_core::simulator::{bandwidth, project_occupation};
use lov_core::{MarketEnvironment, PathEnsemble, PayoffFlag, SensitivitySpec};

/// `x -> l(t, X, x)` over `nodes`.
pub fn sensitivity_slice(spec: &SensitivitySpec, t: f64, x_t: f64, nodes: &[f64]) -> Vec<(f64, f64)> {
    let ell = spec.eval_batch(t, &[x_t], nodes);
    nodes.iter().copied().zip(ell).collect()
}

/// Realised and projected occupation of path `j` at the horizon.
pub fn occupation_snapshot(e: &PathEnsemble, j: usize) -> Result<Vec<(f64, f64, f64)>> {
    if j >= e.paths {
        bail!("path {j} out of range (ensemble has {} paths)", e.paths);
    }
    let m = e.partition.len();
    let x = e.terminal();
    let proj = project_occupation(&e.occupation, m, x, bandwidth(x, e.bandwidth_multiplier));
    Ok((0..m)
        .map(|k| (e.partition.nodes()[k], e.occupation[j * m + k], proj.ohat[j * m + k]))
        .collect())
}

/// Market and model Black-Scholes implied vols of the European quotes.
pub fn smile(fits: &[QuoteFit], env: &MarketEnvironment) -> Vec<(f64, f64, f64, f64)> {
    let iv = |p: f64, f: &QuoteFit| {
        implied_vol(p, env.spot, f.strike, f.expiry, env.rate, env.dividend_yield, f.flag).map_or(f64::NAN, |v| v.sigma)
    };
    fits.iter()
        .filter(|f| f.exercise == lov_core::Exercise::European)
        .map(|f| (f.strike, f.expiry, iv(0.5 * (f.bid + f.ask), f), iv(f.model_price, f)))
        .collect()
}

pub fn write_rows<const N: usize>(path: &Path, header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_slice(path: &Path, rows: &[(f64, f64)]) -> Result<()> {
    write_rows(path, ["x", "ell"], rows.iter().map(|(x, l)| [x.to_string(), l.to_string()]))
}

pub fn write_snapshot(path: &Path, rows: &[(f64, f64, f64)]) -> Result<()> {
    write_rows(path, ["node", "realized", "projected"], rows.iter().map(|(n, o, p)| [n.to_string(), o.to_string(), p.to_string()]))
}

pub fn write_smile(path: &Path, rows: &[(f64, f64, f64, f64)]) -> Result<()> {
    write_rows(
        path,
        ["strike", "expiry", "market_iv", "model_iv"],
        rows.iter().map(|(k, t, a, b)| [k.to_string(), t.to_string(), a.to_string(), b.to_string()]),
    )
}

/// Copies `epoch,loss,alpha` out of a calibration history.
pub fn loss_curve(history: &Path, out: &Path) -> Result<()> {
    let mut rdr = csv::Reader::from_path(history).with_context(|| format!("cannot read loss history {}", history.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(e), Some(l), Some(a)) = (col("epoch"), col("loss"), col("alpha")) else {
        bail!("{} lacks epoch/loss/alpha columns", history.display());
    };
    let mut rows = Vec::new();
    for r in rdr.records() {
        let r = r?;
        rows.push([r[e].to_string(), r[l].to_string(), r[a].to_string()]);
    }
    write_rows(out, ["epoch", "loss", "alpha"], rows)
}

pub fn flag_code(flag: PayoffFlag) -> &'static str {
    match flag {
        PayoffFlag::Call => "C",
        PayoffFlag::Put => "P",
    }
}

pub fn exercise_code(ex: lov_core::Exercise) -> &'static str {
    match ex {
        lov_core::Exercise::European => "E",
        lov_core::Exercise::American => "A",
    }
}

/// Writes a JSON value with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}
