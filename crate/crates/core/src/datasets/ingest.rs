use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::error::{Error, Result};

/// On-disk layout of a raw interaction log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp`
    Tsv,
    /// `user<TAB>item<TAB>timestamp`
    TsvNoRating,
    /// `{"user": .., "item": .., "rating": .., "time": ..}` per line
    Jsonl,
}

impl LogFormat {
    /// Guesses from the file extension; anything but `.jsonl`/`.json` is TSV
    /// with a rating column.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => LogFormat::Jsonl,
            _ => LogFormat::Tsv,
        }
    }
}

#[derive(Deserialize)]
struct JsonRow {
    user: u64,
    item: u64,
    #[serde(default)]
    rating: Option<f64>,
    time: i64,
}

/// Reads a whole log. Blank lines and lines starting with `#` are skipped.
pub fn read_interactions(path: &Path, format: LogFormat) -> Result<Vec<Interaction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, format, path)
}

pub(crate) fn parse_interactions(
    text: &str,
    format: LogFormat,
    path: &Path,
) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let row = match format {
            LogFormat::Jsonl => {
                let r: JsonRow = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
                Interaction {
                    user_id: r.user,
                    item_id: r.item,
                    timestamp: r.time,
                    rating: r.rating,
                }
            }
            LogFormat::Tsv | LogFormat::TsvNoRating => {
                let cols: Vec<&str> = line.split('\t').collect();
                let want = if format == LogFormat::Tsv { 4 } else { 3 };
                if cols.len() != want {
                    return Err(perr(format!("expected {want} columns, found {}", cols.len())));
                }
                let int = |s: &str, what: &str| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|e| perr(format!("bad {what} {s:?}: {e}")))
                };
                let user_id = int(cols[0], "user id")?;
                let item_id = int(cols[1], "item id")?;
                let (rating, ts) = if format == LogFormat::Tsv {
                    let r = cols[2]
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| perr(format!("bad rating {:?}: {e}", cols[2])))?;
                    (Some(r), cols[3])
                } else {
                    (None, cols[2])
                };
                let timestamp = ts
                    .trim()
                    .parse::<i64>()
                    .map_err(|e| perr(format!("bad timestamp {ts:?}: {e}")))?;
                Interaction {
                    user_id,
                    item_id,
                    timestamp,
                    rating,
                }
            }
        };
        out.push(row);
    }
    Ok(out)
}
