//! Plain-text landmark files.
//!
//! ```text
//! n_points: 3
//! {
//! 10.5 20
//! 30 40.25
//! 50 60
//! }
//! ```
//!
//! Coordinates are 0-indexed pixels. A leading `version:` line, as found in common
//! annotation sets, is accepted on read and never written.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::shape::Shape;

const FORMAT: &str = "pts";

pub fn parse_pts(text: &str) -> Result<Shape> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .peekable();
    if lines.peek().is_some_and(|l| l.starts_with("version:")) {
        lines.next();
    }
    let header = lines
        .next()
        .ok_or_else(|| Error::format(FORMAT, "empty file"))?;
    let n: usize = header
        .strip_prefix("n_points:")
        .ok_or_else(|| Error::format(FORMAT, format!("expected `n_points:`, got `{header}`")))?
        .trim()
        .parse()
        .map_err(|e| Error::format(FORMAT, format!("bad point count: {e}")))?;
    if lines.next() != Some("{") {
        return Err(Error::format(FORMAT, "expected `{` after header"));
    }
    let mut coords = Vec::with_capacity(2 * n);
    for k in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(FORMAT, format!("file ends after {k} of {n} points")))?;
        let mut parts = line.split_whitespace();
        for _ in 0..2 {
            let tok = parts
                .next()
                .ok_or_else(|| Error::format(FORMAT, format!("point {k}: missing coordinate")))?;
            let v: f64 = tok
                .parse()
                .map_err(|e| Error::format(FORMAT, format!("point {k}: `{tok}`: {e}")))?;
            coords.push(v);
        }
        if parts.next().is_some() {
            return Err(Error::format(FORMAT, format!("point {k}: trailing tokens")));
        }
    }
    if lines.next() != Some("}") {
        return Err(Error::format(
            FORMAT,
            format!("expected `}}` after {n} points"),
        ));
    }
    if lines.next().is_some() {
        return Err(Error::format(FORMAT, "content after closing `}`"));
    }
    Shape::new(coords).map_err(|e| Error::format(FORMAT, e.to_string()))
}

pub fn format_pts(shape: &Shape) -> String {
    let mut out = String::with_capacity(16 + 24 * shape.n());
    writeln!(out, "n_points: {}", shape.n()).unwrap();
    out.push_str("{\n");
    for p in shape.points() {
        writeln!(out, "{} {}", p[0], p[1]).unwrap();
    }
    out.push_str("}\n");
    out
}

pub fn read_pts(path: impl AsRef<Path>) -> Result<Shape> {
    parse_pts(&std::fs::read_to_string(path)?)
}
