use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// Lines of a UTF-8 file, without terminators.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Writes one line per entry, each terminated by `\n`.
pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Line-aligned parallel files, whitespace-tokenized.
pub fn read_bitext(source: &Path, target: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let src = read_lines(source)?;
    let tgt = read_lines(target)?;
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch {
            left_name: source.display().to_string(),
            left: src.len(),
            right_name: target.display().to_string(),
            right: tgt.len(),
        });
    }
    Ok(src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| (tokenize(s), tokenize(t)))
        .collect())
}
