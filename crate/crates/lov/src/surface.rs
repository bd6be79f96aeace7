//! Surface CSV: the first row holds the strike grid (its first cell is a
//! label), each further row a time followed by one volatility per strike.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use lov_core::localvol::Grid;
use lov_core::{ImpliedVolSurface, LocalVolSurface};

#[derive(Debug, Clone, PartialEq)]
pub struct RawGrid {
    pub times: Vec<f64>,
    pub strikes: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn parse_grid<R: Read>(reader: R) -> Result<RawGrid> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut rows = rdr.records();
    let head = rows.next().ok_or_else(|| anyhow!("empty surface file"))??;
    let parse = |s: &str, line: u64| -> Result<f64> { s.parse::<f64>().map_err(|_| anyhow!("line {line}: `{s}` is not a number")) };
    let strikes = head.iter().skip(1).map(|s| parse(s, 1)).collect::<Result<Vec<_>>>()?;
    if strikes.is_empty() {
        bail!("line 1: no strikes");
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for row in rows {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != strikes.len() + 1 {
            bail!("line {line}: expected {} fields, found {}", strikes.len() + 1, row.len());
        }
        times.push(parse(&row[0], line)?);
        for s in row.iter().skip(1) {
            values.push(parse(s, line)?);
        }
    }
    Ok(RawGrid { times, strikes, values })
}

fn read_grid(path: &Path) -> Result<RawGrid> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot open surface file {}", path.display()))?;
    parse_grid(file).with_context(|| format!("in surface file {}", path.display()))
}

pub fn load_local_surface(path: &Path) -> Result<LocalVolSurface> {
    let g = read_grid(path)?;
    LocalVolSurface::new(g.times, g.strikes, g.values).with_context(|| format!("invalid local surface {}", path.display()))
}

pub fn load_implied_surface(path: &Path) -> Result<ImpliedVolSurface> {
    let g = read_grid(path)?;
    ImpliedVolSurface::new(g.times, g.strikes, g.values).with_context(|| format!("invalid implied surface {}", path.display()))
}

pub fn write_grid<W: Write>(grid: &Grid, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["t\\K".to_string()];
    head.extend(grid.strikes().iter().map(|k| format!("{k}")));
    w.write_record(&head)?;
    let n = grid.strikes().len();
    for (i, t) in grid.times().iter().enumerate() {
        let mut row = vec![format!("{t}")];
        row.extend(grid.values()[i * n..(i + 1) * n].iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let s = LocalVolSurface::new(vec![0.0, 0.5], vec![80.0, 100.0, 120.0], vec![0.3, 0.2, 0.1 + 1e-17, 0.31, 0.21, 0.123456789012345]).unwrap();
        let mut buf = Vec::new();
        write_grid(s.grid(), &mut buf).unwrap();
        let g = parse_grid(buf.as_slice()).unwrap();
        let back = LocalVolSurface::new(g.times, g.strikes, g.values).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let e = parse_grid("t,80,100\n0,0.2,0.2\n1,0.2\n".as_bytes()).unwrap_err();
        assert!(e.to_string().contains("line 3"));
    }
}
