//! On-disk artifact store for one inversion run: fixed file names, the
//! token tensor, the human-readable token listing, and the optimization
//! trace.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::backends::vocab::TokenId;
use crate::error::{Error, Result};
use crate::inversion::TraceRow;
use crate::tensor_io;

/// Learned difference-token embedding matrix.
pub const TOKENS_FILE: &str = "diff.tensor";
/// Nearest-vocabulary projection of the tokens, one `id<TAB>token` per line.
pub const TOKEN_LISTING_FILE: &str = "diff_tokens.txt";
/// Per-iteration loss trace.
pub const TRACE_FILE: &str = "trace.csv";
/// The edited query image.
pub const EDITED_IMAGE_FILE: &str = "bprime.png";
/// Per-triplet directional scores.
pub const SCORES_FILE: &str = "scores.csv";
/// The exact configuration the artifacts were produced under.
pub const CONFIG_SNAPSHOT_FILE: &str = "config.snapshot";
/// Anchor sidecar for the before image.
pub const PROMPT_BEFORE_FILE: &str = "prompt_a.txt";
/// Anchor sidecar for the after image.
pub const PROMPT_AFTER_FILE: &str = "prompt_aprime.txt";

/// Column header of [`TRACE_FILE`].
pub const TRACE_HEADER: &str = "iteration,l_tc,l_clip,l_total";

pub fn write_tokens(dir: &Path, embeddings: &Array2<f64>) -> Result<()> {
    tensor_io::write_matrix(&dir.join(TOKENS_FILE), embeddings)
}

pub fn read_tokens(dir: &Path) -> Result<Array2<f64>> {
    tensor_io::read_matrix(&dir.join(TOKENS_FILE))
}

/// Write the projected token listing: `id<TAB>token` per row.
pub fn write_token_listing(path: &Path, ids: &[TokenId], names: &[String]) -> Result<()> {
    if ids.len() != names.len() {
        return Err(Error::InvalidConfig(format!(
            "token listing wants matching ids and names, got {} and {}",
            ids.len(),
            names.len()
        )));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (id, name) in ids.iter().zip(names) {
        writeln!(file, "{id}\t{name}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_token_listing(path: &Path) -> Result<Vec<(TokenId, String)>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let (id, name) = line.split_once('\t').ok_or_else(|| {
            Error::InvalidConfig(format!("token listing line {} lacks a tab", lineno + 1))
        })?;
        let id: TokenId = id.parse().map_err(|_| {
            Error::InvalidConfig(format!("token listing line {} has a bad id", lineno + 1))
        })?;
        out.push((id, name.to_string()));
    }
    Ok(out)
}

/// Write the loss trace. Floats are printed with Rust's shortest
/// round-trippable representation, so parsing a cell recovers the recorded
/// value bit for bit.
pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{TRACE_HEADER}").map_err(|e| Error::io(path, e))?;
    for row in trace {
        writeln!(file, "{},{},{},{}", row.iteration, row.consistency, row.alignment, row.total)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = content.lines();
    match lines.next() {
        Some(TRACE_HEADER) => {}
        other => {
            return Err(Error::InvalidConfig(format!(
                "trace header mismatch: expected '{TRACE_HEADER}', got {other:?}"
            )));
        }
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(Error::InvalidConfig(format!(
                "trace line {} has {} cells, expected 4",
                lineno + 2,
                cells.len()
            )));
        }
        let bad = |what: &str| {
            Error::InvalidConfig(format!("trace line {} has a bad {what}", lineno + 2))
        };
        out.push(TraceRow {
            iteration: cells[0].parse().map_err(|_| bad("iteration"))?,
            consistency: cells[1].parse().map_err(|_| bad("l_tc"))?,
            alignment: cells[2].parse().map_err(|_| bad("l_clip"))?,
            total: cells[3].parse().map_err(|_| bad("l_total"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn tokens_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Array2::from_shape_fn((5, 8), |_| rng.random_range(-2.0..2.0));
        write_tokens(dir.path(), &m).unwrap();
        let back = read_tokens(dir.path()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn trace_round_trips_bitwise_through_text() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trace: Vec<TraceRow> = (0..50)
            .map(|i| {
                let consistency: f64 = rng.random_range(0.0..10.0);
                let alignment: f64 = rng.random_range(0.0..2.0);
                TraceRow {
                    iteration: i,
                    consistency,
                    alignment,
                    total: 0.01 * consistency + 6.0 * alignment,
                }
            })
            .collect();
        let path = dir.path().join(TRACE_FILE);
        write_trace(&path, &trace).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(trace.len(), back.len());
        for (a, b) in trace.iter().zip(&back) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.consistency.to_bits(), b.consistency.to_bits());
            assert_eq!(a.alignment.to_bits(), b.alignment.to_bits());
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn trace_with_a_wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRACE_FILE);
        std::fs::write(&path, "step,a,b,c\n0,1,2,3\n").unwrap();
        assert!(read_trace(&path).is_err());
    }

    #[test]
    fn token_listing_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TOKEN_LISTING_FILE);
        let ids = vec![3, 17, 0];
        let names = vec!["door".to_string(), "river".to_string(), "apple".to_string()];
        write_token_listing(&path, &ids, &names).unwrap();
        let back = read_token_listing(&path).unwrap();
        assert_eq!(back, vec![
            (3, "door".to_string()),
            (17, "river".to_string()),
            (0, "apple".to_string()),
        ]);
    }
}
