//! Policy checkpoint files.
//!
//! A flat key-value text format: header lines `vocab_size=<int>` and
//! `context_order=<int>`, then one line per context row of space-separated
//! decimal logits. Floats print in shortest round-trip form, so
//! `load(save(p))` reproduces the policy bit for bit. Optimizer state is
//! never part of a checkpoint.

use std::path::{Path, PathBuf};

use prefopt_core::TabularPolicy;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `{expected}`")]
    Header { line: usize, expected: &'static str },
    #[error("line {line}: cannot parse `{value}` as a logit")]
    BadLogit { line: usize, value: String },
    #[error("line {line}: row has {got} logits, expected {expected}")]
    RowWidth {
        line: usize,
        got: usize,
        expected: usize,
    },
    #[error("expected {expected} context rows, found {got}")]
    RowCount { got: usize, expected: usize },
    #[error("invalid policy table: {0}")]
    Table(#[from] prefopt_core::policy::PolicyError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_policy(path: &Path, policy: &TabularPolicy) -> Result<(), CheckpointError> {
    let mut out = String::new();
    out.push_str(&format!("vocab_size={}\n", policy.vocab_size()));
    out.push_str(&format!("context_order={}\n", policy.context_order()));
    for ctx in 0..policy.context_count() {
        let row: Vec<String> = policy.row(ctx).iter().map(|l| l.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn load_policy(path: &Path) -> Result<TabularPolicy, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();

    let vocab_size: u32 = parse_header(lines.next(), "vocab_size")?;
    let context_order: usize = parse_header(lines.next(), "context_order")?;
    let contexts = (vocab_size as usize)
        .checked_pow(context_order as u32)
        .unwrap_or(usize::MAX);

    let mut logits = Vec::new();
    let mut rows = 0usize;
    for (i, raw) in lines {
        let line = i + 1;
        if raw.is_empty() {
            continue;
        }
        let mut width = 0usize;
        for piece in raw.split(' ') {
            let value: f64 = piece.parse().map_err(|_| CheckpointError::BadLogit {
                line,
                value: piece.to_string(),
            })?;
            if !value.is_finite() {
                return Err(CheckpointError::BadLogit {
                    line,
                    value: piece.to_string(),
                });
            }
            logits.push(value);
            width += 1;
        }
        if width != vocab_size as usize {
            return Err(CheckpointError::RowWidth {
                line,
                got: width,
                expected: vocab_size as usize,
            });
        }
        rows += 1;
    }
    if rows != contexts {
        return Err(CheckpointError::RowCount {
            got: rows,
            expected: contexts,
        });
    }
    Ok(TabularPolicy::from_logits(vocab_size, context_order, logits)?)
}

fn parse_header<T: std::str::FromStr>(
    line: Option<(usize, &str)>,
    name: &'static str,
) -> Result<T, CheckpointError> {
    let (i, raw) = line.ok_or(CheckpointError::Header {
        line: 0,
        expected: name,
    })?;
    let line = i + 1;
    raw.strip_prefix(name)
        .and_then(|rest| rest.strip_prefix('='))
        .and_then(|value| value.parse().ok())
        .ok_or(CheckpointError::Header {
            line,
            expected: name,
        })
}
