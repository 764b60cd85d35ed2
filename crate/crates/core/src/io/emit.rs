//! Metric/log emitters: JSONL for per-step or per-item records, CSV for
//! small summary tables.

use super::IoError;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

pub fn write_jsonl<T: Serialize>(
    path: impl AsRef<Path>,
    items: impl IntoIterator<Item = T>,
) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut buf = String::new();
    for item in items {
        let line =
            serde_json::to_string(&item).map_err(|source| IoError::Json { path: path.into(), source })?;
        buf.push_str(&line);
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|source| IoError::Write { path: path.into(), source })
}

/// Append one record to a JSONL file, creating it if needed. Used by
/// trainers so a resumed run continues the same log.
pub fn append_jsonl<T: Serialize>(path: impl AsRef<Path>, item: &T) -> Result<(), IoError> {
    let path = path.as_ref();
    let line =
        serde_json::to_string(item).map_err(|source| IoError::Json { path: path.into(), source })?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| IoError::Write { path: path.into(), source })?;
    writeln!(f, "{line}").map_err(|source| IoError::Write { path: path.into(), source })
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, IoError> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| IoError::Read { path: path.into(), source })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|source| IoError::Json { path: path.into(), source }))
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_csv(
    path: impl AsRef<Path>,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut buf = String::new();
    buf.push_str(&header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(","));
    buf.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len(), "csv row width");
        buf.push_str(&row.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(","));
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|source| IoError::Write { path: path.into(), source })
}

/// Render a float for summary tables: full round-trip precision, stable
/// across runs.
pub fn fmt_float(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Row {
        step: u64,
        loss: f64,
    }

    #[test]
    fn jsonl_round_trips_and_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_jsonl(&path, [&Row { step: 0, loss: 1.5 }]).unwrap();
        append_jsonl(&path, &Row { step: 1, loss: 0.5 }).unwrap();
        let back: Vec<Row> = read_jsonl(&path).unwrap();
        assert_eq!(back, vec![Row { step: 0, loss: 1.5 }, Row { step: 1, loss: 0.5 }]);
    }

    #[test]
    fn csv_quotes_only_when_needed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(
            &path,
            &["id", "note"],
            &[
                vec!["a".into(), "plain".into()],
                vec!["b".into(), "has,comma".into()],
                vec!["c".into(), "has \"quote\"".into()],
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "id,note\na,plain\nb,\"has,comma\"\nc,\"has \"\"quote\"\"\"\n");
    }
}
