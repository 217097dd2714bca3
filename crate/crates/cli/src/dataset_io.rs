//! The preference-dataset file format.
//!
//! UTF-8, one record per line, tab-separated
//! `vocab=<int>  prompt=<comma-separated ids or empty>  chosen=<ids>  rejected=<ids>`,
//! preceded by the mandatory header line `#prefopt-dataset v1`. All records
//! must share one vocabulary; `read(write(x)) == x` exactly.

use std::path::{Path, PathBuf};

use prefopt_core::{PreferenceExample, TokenSequence};

pub const DATASET_HEADER: &str = "#prefopt-dataset v1";

#[derive(Debug, thiserror::Error)]
pub enum DatasetIoError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing `{DATASET_HEADER}` header line")]
    MissingHeader,
    #[error("line {line}, field {field}: {message}")]
    Record {
        line: usize,
        field: &'static str,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetIoError + '_ {
    move |source| DatasetIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_tokens(seq: &TokenSequence) -> String {
    seq.tokens()
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Serializes the dataset; byte-deterministic.
pub fn write_dataset(path: &Path, examples: &[PreferenceExample]) -> Result<(), DatasetIoError> {
    let mut out = String::with_capacity(64 * (examples.len() + 1));
    out.push_str(DATASET_HEADER);
    out.push('\n');
    for ex in examples {
        out.push_str(&format!(
            "vocab={}\tprompt={}\tchosen={}\trejected={}\n",
            ex.vocab_size(),
            format_tokens(&ex.prompt),
            format_tokens(&ex.chosen),
            format_tokens(&ex.rejected),
        ));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

fn parse_field<'a>(
    part: Option<&'a str>,
    name: &'static str,
    line: usize,
) -> Result<&'a str, DatasetIoError> {
    let part = part.ok_or(DatasetIoError::Record {
        line,
        field: name,
        message: "field missing".to_string(),
    })?;
    let prefix = format!("{name}=");
    part.strip_prefix(&prefix).ok_or(DatasetIoError::Record {
        line,
        field: name,
        message: format!("expected `{name}=...`, got `{part}`"),
    })
}

fn parse_tokens(
    raw: &str,
    vocab: u32,
    name: &'static str,
    line: usize,
) -> Result<TokenSequence, DatasetIoError> {
    let mut tokens = Vec::new();
    if !raw.is_empty() {
        for piece in raw.split(',') {
            let token: u32 = piece.parse().map_err(|_| DatasetIoError::Record {
                line,
                field: name,
                message: format!("`{piece}` is not a token id"),
            })?;
            tokens.push(token);
        }
    }
    TokenSequence::new(tokens, vocab).map_err(|e| DatasetIoError::Record {
        line,
        field: name,
        message: e.to_string(),
    })
}

/// Parses a dataset file; errors carry the offending line and field.
pub fn read_dataset(path: &Path) -> Result<Vec<PreferenceExample>, DatasetIoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == DATASET_HEADER => {}
        _ => return Err(DatasetIoError::MissingHeader),
    }
    let mut examples = Vec::new();
    let mut dataset_vocab: Option<u32> = None;
    for (i, raw) in lines {
        let line = i + 1;
        if raw.is_empty() {
            continue;
        }
        let mut parts = raw.split('\t');
        let vocab: u32 = {
            let raw_vocab = parse_field(parts.next(), "vocab", line)?;
            raw_vocab.parse().map_err(|_| DatasetIoError::Record {
                line,
                field: "vocab",
                message: format!("`{raw_vocab}` is not a vocab size"),
            })?
        };
        if let Some(expected) = dataset_vocab {
            if vocab != expected {
                return Err(DatasetIoError::Record {
                    line,
                    field: "vocab",
                    message: format!("vocab {vocab} differs from the dataset's {expected}"),
                });
            }
        } else {
            dataset_vocab = Some(vocab);
        }
        let prompt = parse_tokens(parse_field(parts.next(), "prompt", line)?, vocab, "prompt", line)?;
        let chosen = parse_tokens(parse_field(parts.next(), "chosen", line)?, vocab, "chosen", line)?;
        let rejected = parse_tokens(
            parse_field(parts.next(), "rejected", line)?,
            vocab,
            "rejected",
            line,
        )?;
        if let Some(extra) = parts.next() {
            return Err(DatasetIoError::Record {
                line,
                field: "rejected",
                message: format!("unexpected trailing field `{extra}`"),
            });
        }
        let example =
            PreferenceExample::new(prompt, chosen, rejected).map_err(|e| DatasetIoError::Record {
                line,
                field: "chosen",
                message: e.to_string(),
            })?;
        examples.push(example);
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use prefopt_core::datagen::{build_dataset, make_bimodal_target, DatasetSpec};

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("prefopt-dataset-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_identity() {
        let spec = DatasetSpec {
            n_examples: 1000,
            vocab_size: 7,
            max_len: 4,
            mode_mass: 0.7,
            shared_token_rate: 0.4,
            rng_seed: 99,
        };
        let target = make_bimodal_target(&spec).unwrap();
        let examples = build_dataset(&target, &spec).unwrap();
        let path = tmp("roundtrip.tsv");
        write_dataset(&path, &examples).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(examples, back);
    }

    #[test]
    fn header_only_file_is_empty_dataset() {
        let path = tmp("empty.tsv");
        std::fs::write(&path, format!("{DATASET_HEADER}\n")).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), vec![]);
    }

    #[test]
    fn missing_header_is_rejected() {
        let path = tmp("no-header.tsv");
        std::fs::write(&path, "vocab=3\tprompt=\tchosen=1\trejected=2\n").unwrap();
        assert!(matches!(
            read_dataset(&path).unwrap_err(),
            DatasetIoError::MissingHeader
        ));
    }

    #[test]
    fn out_of_range_token_names_line_and_field() {
        let path = tmp("bad-token.tsv");
        std::fs::write(
            &path,
            format!("{DATASET_HEADER}\nvocab=3\tprompt=\tchosen=1\trejected=2\nvocab=3\tprompt=\tchosen=3\trejected=1\n"),
        )
        .unwrap();
        let err = read_dataset(&path).unwrap_err();
        match err {
            DatasetIoError::Record { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "chosen");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_the_field() {
        let path = tmp("malformed.tsv");
        std::fs::write(
            &path,
            format!("{DATASET_HEADER}\nvocab=3\tprompt=\tchosen=1\n"),
        )
        .unwrap();
        let err = read_dataset(&path).unwrap_err();
        match err {
            DatasetIoError::Record { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "rejected");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn mixed_vocab_is_rejected() {
        let path = tmp("mixed-vocab.tsv");
        std::fs::write(
            &path,
            format!("{DATASET_HEADER}\nvocab=3\tprompt=\tchosen=1\trejected=2\nvocab=4\tprompt=\tchosen=1\trejected=2\n"),
        )
        .unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
