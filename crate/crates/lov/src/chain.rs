//! Option-chain CSV and environment JSON.
//!
//! Chain header: `expiry_years,strike,flag,exercise,bid,ask` with `flag` in
//! `{C,P}` and `exercise` in `{E,A}`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use lov_core::{Exercise, MarketEnvironment, OptionQuote, PayoffFlag};

pub const CHAIN_HEADER: [&str; 6] = ["expiry_years", "strike", "flag", "exercise", "bid", "ask"];

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub quotes: Vec<OptionQuote>,
    /// Rows removed by the spread filter.
    pub dropped: usize,
}

impl Chain {
    /// Calls and puts per expiry.
    pub fn counts_by_expiry(&self) -> BTreeMap<String, (usize, usize)> {
        let mut out = BTreeMap::new();
        for q in &self.quotes {
            let e: &mut (usize, usize) = out.entry(format!("{}", q.expiry)).or_default();
            match q.flag {
                PayoffFlag::Call => e.0 += 1,
                PayoffFlag::Put => e.1 += 1,
            }
        }
        out
    }
}

pub fn load_chain(path: &Path, max_rel_spread: f64) -> Result<Chain> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot open chain file {}", path.display()))?;
    parse_chain(file, max_rel_spread).with_context(|| format!("in chain file {}", path.display()))
}

/// Parses, filters on `(ask - bid) / mid <= max_rel_spread` and sorts by
/// `(expiry, strike, flag)`.
pub fn parse_chain<R: Read>(reader: R, max_rel_spread: f64) -> Result<Chain> {
    if !(max_rel_spread > 0.0 && max_rel_spread <= 1.0) {
        bail!("max_rel_spread must lie in (0, 1], got {max_rel_spread}");
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().context("line 1: missing header")?.clone();
    if header.iter().collect::<Vec<_>>() != CHAIN_HEADER {
        bail!("line 1: header must be `{}`, found `{}`", CHAIN_HEADER.join(","), header.iter().collect::<Vec<_>>().join(","));
    }
    let mut quotes = Vec::new();
    let mut dropped = 0;
    for record in rdr.records() {
        let record = record.context("malformed CSV row")?;
        let line = record.position().map_or(0, |p| p.line());
        let quote = parse_row(&record).map_err(|e| anyhow!("line {line}: {e}"))?;
        if quote.relative_spread() <= max_rel_spread {
            quotes.push(quote);
        } else {
            dropped += 1;
        }
    }
    quotes.sort_by(|a, b| {
        a.expiry
            .total_cmp(&b.expiry)
            .then(a.strike.total_cmp(&b.strike))
            .then(a.flag.cmp(&b.flag))
    });
    Ok(Chain { quotes, dropped })
}

fn parse_row(record: &csv::StringRecord) -> Result<OptionQuote> {
    if record.len() != CHAIN_HEADER.len() {
        bail!("expected {} fields, found {}", CHAIN_HEADER.len(), record.len());
    }
    let num = |i: usize| -> Result<f64> {
        let v: f64 = record[i].parse().map_err(|_| anyhow!("{} `{}` is not a number", CHAIN_HEADER[i], &record[i]))?;
        if !v.is_finite() {
            bail!("{} must be finite", CHAIN_HEADER[i]);
        }
        Ok(v)
    };
    let (expiry, strike, bid, ask) = (num(0)?, num(1)?, num(4)?, num(5)?);
    let flag = match &record[2] {
        "C" => PayoffFlag::Call,
        "P" => PayoffFlag::Put,
        other => bail!("flag must be C or P, found `{other}`"),
    };
    let exercise = match &record[3] {
        "E" => Exercise::European,
        "A" => Exercise::American,
        other => bail!("exercise must be E or A, found `{other}`"),
    };
    if bid < 0.0 || ask < 0.0 {
        bail!("negative price (bid {bid}, ask {ask})");
    }
    if bid > ask {
        bail!("crossed market: bid {bid} > ask {ask}");
    }
    Ok(OptionQuote::new(strike, expiry, flag, exercise, bid, ask)?)
}

pub fn load_env(path: &Path) -> Result<MarketEnvironment> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read environment file {}", path.display()))?;
    let env: MarketEnvironment =
        serde_json::from_str(&text).with_context(|| format!("{}: expected {{spot, rate, dividend_yield, valuation_date}}", path.display()))?;
    env.validate()?;
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: &str = "expiry_years,strike,flag,exercise,bid,ask\n";

    #[test]
    fn single_row_mid() {
        let c = parse_chain(format!("{HEAD}0.25,230,P,A,10.0,10.4\n").as_bytes(), 0.25).unwrap();
        assert_eq!(c.quotes.len(), 1);
        assert_eq!(c.quotes[0].mid, 10.2);
        let c = parse_chain(format!("{HEAD}0.25,230,P,A,1.0,1.4\n").as_bytes(), 0.25).unwrap();
        assert!(c.quotes.is_empty());
        assert_eq!(c.dropped, 1);
    }

    #[test]
    fn sorted_by_expiry_strike_flag() {
        let text = format!("{HEAD}0.5,100,P,A,5,5.2\n0.25,110,C,E,1,1.1\n0.25,100,P,A,3,3.1\n0.25,100,C,E,4,4.1\n");
        let c = parse_chain(text.as_bytes(), 0.25).unwrap();
        let keys: Vec<(f64, f64, PayoffFlag)> = c.quotes.iter().map(|q| (q.expiry, q.strike, q.flag)).collect();
        assert_eq!(
            keys,
            vec![(0.25, 100.0, PayoffFlag::Call), (0.25, 100.0, PayoffFlag::Put), (0.25, 110.0, PayoffFlag::Call), (0.5, 100.0, PayoffFlag::Put)]
        );
        assert_eq!(parse_chain(text.as_bytes(), 0.25).unwrap(), c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_chain(format!("{HEAD}0.25,100,P,A,3,3.1\n0.25,100,X,A,3,3.1\n").as_bytes(), 0.25).unwrap_err();
        assert!(format!("{e:#}").contains("line 3"), "{e:#}");
        let e = parse_chain(format!("{HEAD}0.25,100,P,A,3.2,3.1\n").as_bytes(), 0.25).unwrap_err();
        assert!(format!("{e:#}").contains("crossed"));
        let e = parse_chain(format!("{HEAD}0.25,100,P,A,-1,3.1\n").as_bytes(), 0.25).unwrap_err();
        assert!(format!("{e:#}").contains("negative"));
        let e = parse_chain("strike,expiry\n1,2\n".as_bytes(), 0.25).unwrap_err();
        assert!(format!("{e:#}").contains("header"));
        assert!(parse_chain(HEAD.as_bytes(), 0.0).is_err());
    }
}
