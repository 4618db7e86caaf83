//! Stable CSV emission: fixed column order, 17 significant digits, LF endings.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

/// Formats a float with 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Writes `header` and then one line per row.
pub fn write_rows<W: Write>(mut out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        out.write_all(row.join(",").as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_file(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    write_rows(BufWriter::new(File::create(path)?), header, rows)
}

/// Header `prefix0,prefix1,...` for `n` columns.
pub fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e22, 0.0] {
            let s = format_float(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(format_float(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn lf_line_endings() {
        let mut buf = Vec::new();
        write_rows(&mut buf, &["a", "b"], [vec!["1".into(), "2".into()]]).unwrap();
        assert_eq!(buf, b"a,b\n1,2\n");
    }
}
