//! Plain-text tensor fixture format.
//!
//! ```text
//! shape: 2 3
//! 0.5 1 -2
//! 3 4.25 0
//! ```
//!
//! Header lines are `key: value` pairs and must include `shape:`. Other keys
//! (for example `source:` on embedding fixtures) are passed through to the
//! caller. Everything after the headers is whitespace-separated decimal
//! floats. Values are written in shortest round-trip form, so a write/read
//! cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing `shape:` header")]
    MissingShape,
    #[error("line {line}: malformed header `{text}`")]
    BadHeader { line: usize, text: String },
    #[error("bad value `{0}`")]
    BadValue(String),
    #[error("shape {shape:?} needs {expected} values, found {got}")]
    Count {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub headers: Vec<(String, String)>,
    pub tensor: Tensor,
}

impl Fixture {
    pub fn header(&self, key: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn format_tensor(tensor: &Tensor, extra_headers: &[(&str, &str)]) -> String {
    let mut s = String::new();
    for (k, v) in extra_headers {
        let _ = writeln!(s, "{k}: {v}");
    }
    let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
    let _ = writeln!(s, "shape: {}", dims.join(" "));
    let width = tensor.shape().last().copied().unwrap_or(1).max(1);
    for row in tensor.data().chunks(width) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_fixture(text: &str) -> Result<Fixture, FixtureError> {
    let mut headers = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((no, line)) = lines.peek().copied() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            lines.next();
            continue;
        }
        if !trimmed.contains(':') {
            break;
        }
        let (k, v) = trimmed.split_once(':').expect("contains ':'");
        let k = k.trim();
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(FixtureError::BadHeader {
                line: no + 1,
                text: line.to_string(),
            });
        }
        headers.push((k.to_string(), v.trim().to_string()));
        lines.next();
    }
    let shape_text = headers
        .iter()
        .find(|(k, _)| k == "shape")
        .map(|(_, v)| v.clone())
        .ok_or(FixtureError::MissingShape)?;
    let shape = shape_text
        .split_whitespace()
        .map(|d| d.parse::<usize>().map_err(|_| FixtureError::BadValue(d.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    if shape.is_empty() {
        return Err(FixtureError::MissingShape);
    }
    let mut values = Vec::new();
    for (_, line) in lines {
        for tok in line.split_whitespace() {
            let v: f32 = tok.parse().map_err(|_| FixtureError::BadValue(tok.to_string()))?;
            values.push(v);
        }
    }
    let expected: usize = shape.iter().product();
    if values.len() != expected {
        return Err(FixtureError::Count {
            shape,
            expected,
            got: values.len(),
        });
    }
    let headers = headers.into_iter().filter(|(k, _)| k != "shape").collect();
    Ok(Fixture {
        headers,
        tensor: Tensor::new(shape, values)?,
    })
}

pub fn read_fixture(path: impl AsRef<Path>) -> Result<Fixture, FixtureError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_fixture(&text)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, FixtureError> {
    Ok(read_fixture(path)?.tensor)
}

pub fn write_tensor(
    path: impl AsRef<Path>,
    tensor: &Tensor,
    extra_headers: &[(&str, &str)],
) -> Result<(), FixtureError> {
    let path = path.as_ref();
    fs::write(path, format_tensor(tensor, extra_headers)).map_err(|source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    })
}
