//! CSV tables with `#` provenance headers, and the binary matrix dump.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

pub const MATRIX_MAGIC: [u8; 8] = *b"SLAWMAT1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("csv line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("matrix dump: {0}")]
    Matrix(String),
}

fn file_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

/// A numeric table. Comment lines are written as `# key=value` before the header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvTable {
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            comments: Vec::new(),
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn comment(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.comments.push(format!("{key}={value}"));
        self
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// The rendered table without comment lines.
    pub fn body(&self) -> String {
        let full = self.render();
        full.lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), IoError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(file_err(dir))?;
            }
        }
        fs::write(path, self.render()).map_err(file_err(path))
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut table = CsvTable::default();
        let mut have_header = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                table.comments.push(c.trim().to_string());
                continue;
            }
            if !have_header {
                table.columns = line.split(',').map(|s| s.trim().to_string()).collect();
                have_header = true;
                continue;
            }
            let row = line
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|e| IoError::Csv {
                        line: i + 1,
                        reason: format!("{s:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != table.columns.len() {
                return Err(IoError::Csv {
                    line: i + 1,
                    reason: format!("expected {} cells, found {}", table.columns.len(), row.len()),
                });
            }
            table.rows.push(row);
        }
        if !have_header {
            return Err(IoError::Csv {
                line: 0,
                reason: "missing header".into(),
            });
        }
        Ok(table)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, IoError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(file_err(path))?;
        Self::parse(&text)
    }
}

/// Row-major `f64` dump of a square matrix behind a 16-byte header
/// (8-byte magic, little-endian `u64` dimension).
pub fn write_matrix(mut w: impl Write, m: &DMatrix<f64>) -> io::Result<()> {
    let t = m.nrows();
    w.write_all(&MATRIX_MAGIC)?;
    w.write_all(&(t as u64).to_le_bytes())?;
    for i in 0..t {
        for j in 0..t {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_matrix(mut r: impl Read) -> Result<DMatrix<f64>, IoError> {
    let bad = |e: io::Error| IoError::Matrix(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(bad)?;
    if magic != MATRIX_MAGIC {
        return Err(IoError::Matrix("bad magic".into()));
    }
    let mut dim = [0u8; 8];
    r.read_exact(&mut dim).map_err(bad)?;
    let t = u64::from_le_bytes(dim) as usize;
    let mut buf = [0u8; 8];
    let mut m = DMatrix::zeros(t, t);
    for i in 0..t {
        for j in 0..t {
            r.read_exact(&mut buf).map_err(bad)?;
            m[(i, j)] = f64::from_le_bytes(buf);
        }
    }
    Ok(m)
}

pub fn save_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<(), IoError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(file_err(path))?;
    let mut w = io::BufWriter::new(file);
    write_matrix(&mut w, m).map_err(file_err(path))?;
    w.flush().map_err(file_err(path))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>, IoError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(file_err(path))?;
    read_matrix(io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut t = CsvTable::new(["t", "loss"]);
        t.comment("config_hash", "abc").comment("seeds", "1;2");
        t.push(vec![0.0, 1.5]);
        t.push(vec![1.0, 0.25]);
        let text = t.render();
        assert!(text.starts_with("# config_hash=abc\n# seeds=1;2\nt,loss\n"));
        let back = CsvTable::parse(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.column("loss").unwrap(), vec![1.5, 0.25]);
        assert!(!t.body().contains('#'));
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        assert!(CsvTable::parse("a,b\n1\n").is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let m = DMatrix::from_fn(3, 3, |i, j| i as f64 - 0.5 * j as f64);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 16 + 9 * 8);
        assert_eq!(&buf[..8], b"SLAWMAT1");
        assert_eq!(read_matrix(&buf[..]).unwrap(), m);
        buf[0] = b'X';
        assert!(read_matrix(&buf[..]).is_err());
    }
}
