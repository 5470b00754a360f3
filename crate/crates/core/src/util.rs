//! Small text, hashing and number-formatting helpers shared across modules.

use sha2::{Digest, Sha256};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

/// Lowercases, trims and collapses internal whitespace runs to one space.
pub fn normalize_ws_lower(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercase ASCII-alphanumeric slug with `_` separators.
pub fn slug(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_sep = false;
    for c in s.chars() {
        if c.is_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.extend(c.to_lowercase());
        } else {
            pending_sep = true;
        }
    }
    out
}

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    let mut h = Sha256::new();
    h.update(bytes.as_ref());
    hex::encode(h.finalize())
}

/// Formats `num / den` with two decimals, rounding half up. Exact integer
/// arithmetic; `den == 0` renders as `0.00`.
pub fn format_ratio_2dp(num: u64, den: u64) -> String {
    if den == 0 {
        return "0.00".to_string();
    }
    let hundredths = ratio_hundredths(num, den);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

/// `round_half_up(100 * num / den)` in integer arithmetic.
pub fn ratio_hundredths(num: u64, den: u64) -> u64 {
    if den == 0 {
        return 0;
    }
    let num = num as u128;
    let den = den as u128;
    ((num * 200 + den) / (2 * den)) as u64
}

/// Writes `bytes` to `path` through a sibling temp file and rename, creating
/// parent directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Serializes each item as one JSON line.
pub fn to_jsonl<T: serde::Serialize>(items: impl IntoIterator<Item = T>) -> serde_json::Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSON lines, skipping blank lines. Errors carry the 1-based line number.
pub fn from_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, (usize, serde_json::Error)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}

/// Removes a surrounding markdown code fence, if any.
pub fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = match rest.find('\n') {
            Some(nl) => &rest[nl + 1..],
            None => rest,
        };
        let rest = rest.trim_end();
        return rest.strip_suffix("```").unwrap_or(rest).trim();
    }
    t
}

/// Collapses doubled braces (`{{`/`}}`) left over from format-string escaping.
pub fn collapse_double_braces(text: &str) -> String {
    text.replace("{{", "{").replace("}}", "}")
}

/// Parses JSON from model output: fences are stripped, and on failure an
/// outer `{{ ... }}` wrapper, then every doubled brace, is collapsed.
pub fn parse_json_lenient(text: &str) -> Option<serde_json::Value> {
    let body = strip_code_fence(text);
    if let Ok(v) = serde_json::from_str(body) {
        return Some(v);
    }
    let outer = body.strip_prefix("{{").and_then(|b| b.strip_suffix("}}")).map(|inner| format!("{{{inner}}}"));
    if let Some(v) = outer.and_then(|o| serde_json::from_str(&o).ok()) {
        return Some(v);
    }
    serde_json::from_str(&collapse_double_braces(body)).ok()
}
