//! Plain-text matrix exchange format.
//!
//! A file is a sequence of lines. Header lines are `key value...`; a matrix
//! section starts with `matrix <name> <rows> <cols>` followed by `rows` lines
//! of `cols` whitespace-separated entries in row-major order. Floats are
//! written with the shortest representation that round-trips (`{:e}`), so
//! writing the same values always yields identical bytes.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

#[derive(Default)]
pub struct TextWriter {
    buf: String,
}

impl TextWriter {
    pub fn new(magic: &str) -> Self {
        let mut w = Self::default();
        w.buf.push_str(magic);
        w.buf.push('\n');
        w
    }

    pub fn line<I, T>(&mut self, key: &str, values: I)
    where
        I: IntoIterator<Item = T>,
        T: std::fmt::Display,
    {
        self.buf.push_str(key);
        for v in values {
            let _ = write!(self.buf, " {v}");
        }
        self.buf.push('\n');
    }

    pub fn matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        let _ = writeln!(self.buf, "matrix {name} {} {}", m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
            self.buf.push_str(&row.join(" "));
            self.buf.push('\n');
        }
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

pub struct TextReader<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> TextReader<'a> {
    pub fn new(text: &'a str, magic: &str) -> Result<Self> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let mut r = Self { lines, pos: 0 };
        let (line, first) = r.next_line()?;
        if first != magic {
            return Err(Error::Parse {
                line,
                msg: format!("expected header `{magic}`, found `{first}`"),
            });
        }
        Ok(r)
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        let out = self.lines.get(self.pos).copied().ok_or(Error::Parse {
            line: self.lines.last().map_or(0, |l| l.0),
            msg: "unexpected end of input".into(),
        })?;
        self.pos += 1;
        Ok(out)
    }

    pub fn peek_key(&self) -> Option<&'a str> {
        self.lines
            .get(self.pos)
            .and_then(|(_, l)| l.split_whitespace().next())
    }

    pub fn is_done(&self) -> bool {
        self.pos >= self.lines.len()
    }

    /// Reads a header line with the given key and returns its values.
    pub fn key(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (line, text) = self.next_line()?;
        let mut toks = text.split_whitespace();
        match toks.next() {
            Some(k) if k == key => Ok((line, toks.collect())),
            other => Err(Error::Parse {
                line,
                msg: format!("expected `{key}`, found `{}`", other.unwrap_or("")),
            }),
        }
    }

    pub fn key_usizes(&mut self, key: &str) -> Result<Vec<usize>> {
        let (line, vals) = self.key(key)?;
        vals.iter().map(|v| parse_num(v, line)).collect()
    }

    pub fn key_usize(&mut self, key: &str) -> Result<usize> {
        let v = self.key_usizes(key)?;
        match v.as_slice() {
            [x] => Ok(*x),
            _ => Err(Error::Parse {
                line: self.lines[self.pos - 1].0,
                msg: format!("`{key}` takes exactly one value"),
            }),
        }
    }

    pub fn matrix(&mut self, name: &str) -> Result<DMatrix<f64>> {
        let (line, vals) = self.key("matrix")?;
        if vals.len() != 3 || vals[0] != name {
            return Err(Error::Parse {
                line,
                msg: format!("expected `matrix {name} <rows> <cols>`"),
            });
        }
        let rows: usize = parse_num(vals[1], line)?;
        let cols: usize = parse_num(vals[2], line)?;
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let (line, text) = self.next_line()?;
            let entries: Vec<&str> = text.split_whitespace().collect();
            if entries.len() != cols {
                return Err(Error::Parse {
                    line,
                    msg: format!("row {i} of `{name}` has {} entries, expected {cols}", entries.len()),
                });
            }
            for (j, e) in entries.iter().enumerate() {
                m[(i, j)] = parse_num(e, line)?;
            }
        }
        // A zero-row matrix still consumes no lines; tolerate that.
        Ok(m)
    }
}

pub fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse `{s}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_is_exact() {
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -2.5e-17, 1.0 / 3.0, 0.0, 7.0, -1e300]);
        let mut w = TextWriter::new("test v1");
        w.line("horizon", [5]);
        w.matrix("M", &m);
        let text = w.finish();
        let mut r = TextReader::new(&text, "test v1").unwrap();
        assert_eq!(r.key_usize("horizon").unwrap(), 5);
        let back = r.matrix("M").unwrap();
        assert_eq!(back, m);
        assert!(r.is_done());
    }

    #[test]
    fn rejects_short_rows() {
        let text = "test v1\nmatrix M 1 2\n1e0\n";
        let mut r = TextReader::new(text, "test v1").unwrap();
        assert!(matches!(r.matrix("M"), Err(Error::Parse { line: 3, .. })));
    }
}
