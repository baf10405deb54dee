//! Text-header-plus-binary framing shared by every numeric export.
//!
//! ```text
//! <header line>
//! ...
//! data <n>
//! <n little-endian IEEE-754 float64 values>
//! ```

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub fn write_framed<W: Write>(mut w: W, header: &[String], data: &[f64]) -> Result<()> {
    for line in header {
        debug_assert!(!line.contains('\n'));
        writeln!(w, "{line}")?;
    }
    writeln!(w, "data {}", data.len())?;
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_framed<R: BufRead>(mut r: R) -> Result<(Vec<String>, Vec<f64>)> {
    let mut header = Vec::new();
    let count = loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("missing data line".into()));
        }
        let line = line.trim_end_matches(['\n', '\r']).to_string();
        if let Some(n) = line.strip_prefix("data ") {
            break n
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("bad data count {n:?}: {e}")))?;
        }
        header.push(line);
    };
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("expected {count} values: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, data))
}

/// Split a header line into whitespace-separated fields after checking its key.
pub fn fields<'a>(line: &'a str, key: &str) -> Result<Vec<&'a str>> {
    let mut it = line.split_whitespace();
    match it.next() {
        Some(k) if k == key => Ok(it.collect()),
        _ => Err(Error::Format(format!("expected `{key}` line, got {line:?}"))),
    }
}

pub fn parse<T: std::str::FromStr>(s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| Error::Format(format!("cannot parse {s:?}: {e}")))
}
