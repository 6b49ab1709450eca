//! Versioned text checkpoints. Values are written with Rust's shortest
//! round-trip float formatting, so save → load reproduces every parameter
//! bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::net::BindNetParams;

const MAGIC: &str = "bindnet v1";

pub fn save_checkpoint(params: &BindNetParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // Write to a sibling temp file and rename, so a crash never leaves a
    // half-written checkpoint under the final name.
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(&tmp, e);
        writeln!(w, "{MAGIC}").map_err(io_err)?;
        writeln!(
            w,
            "n_classes={} width={} hidden={}",
            params.n_classes, params.width, params.hidden
        )
        .map_err(io_err)?;
        for (name, tensor) in params.tensors() {
            writeln!(w, "tensor {name} {}", tensor.len()).map_err(io_err)?;
            let mut line = String::with_capacity(tensor.len() * 20);
            for (i, v) in tensor.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BindNetParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let malformed = |msg: String| Error::MalformedCheckpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut next_line = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::MalformedCheckpoint {
                path: path.to_path_buf(),
                msg: "unexpected end of file".into(),
            })?
            .map_err(|e| Error::io(path, e))
    };

    if next_line()? != MAGIC {
        return Err(malformed(format!("not a `{MAGIC}` checkpoint")));
    }
    let header = next_line()?;
    let mut n_classes = None;
    let mut width = None;
    let mut hidden = None;
    for token in header.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| malformed(format!("bad header token `{token}`")))?;
        let value: usize = value
            .parse()
            .map_err(|_| malformed(format!("bad header value `{value}`")))?;
        match key {
            "n_classes" => n_classes = Some(value),
            "width" => width = Some(value),
            "hidden" => hidden = Some(value),
            other => return Err(malformed(format!("unknown header key `{other}`"))),
        }
    }
    let (n_classes, width, hidden) = match (n_classes, width, hidden) {
        (Some(n), Some(w), Some(h)) => (n, w, h),
        _ => return Err(malformed("header missing n_classes/width/hidden".into())),
    };
    if n_classes == 0 || width == 0 || hidden == 0 {
        return Err(malformed("zero-sized network in header".into()));
    }

    let mut params = BindNetParams::zeros(n_classes, width, hidden);
    for (name, tensor) in params.tensors_mut() {
        let decl = next_line()?;
        let mut parts = decl.split_whitespace();
        match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some("tensor"), Some(n), Some(len), None) if n == name => {
                let len: usize = len
                    .parse()
                    .map_err(|_| malformed(format!("bad tensor length `{len}`")))?;
                if len != tensor.len() {
                    return Err(malformed(format!(
                        "tensor {name}: expected {} values, header says {len}",
                        tensor.len()
                    )));
                }
            }
            _ => {
                return Err(malformed(format!(
                    "expected `tensor {name} <len>`, got `{decl}`"
                )))
            }
        }
        let values = next_line()?;
        let mut count = 0;
        for (slot, v) in tensor.iter_mut().zip(values.split_whitespace()) {
            *slot = v
                .parse::<f64>()
                .map_err(|_| malformed(format!("tensor {name}: bad value `{v}`")))?;
            count += 1;
        }
        if count != tensor.len() || values.split_whitespace().count() != tensor.len() {
            return Err(malformed(format!(
                "tensor {name}: value count mismatch"
            )));
        }
    }
    Ok(params)
}
