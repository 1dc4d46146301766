//! Tensor checkpoint formats.
//!
//! Text: each tensor is a header line `tensor <name> <rank> <dim0> <dim1> ...`
//! followed by one line of space-separated decimals per row (the product of
//! all but the last dimension; rank 0 and rank 1 tensors take one line).
//! Values are written in shortest round-trip form, so save → load is exact.
//!
//! Binary: magic `DRT1`, then per tensor a little-endian u32 name length,
//! the UTF-8 name, u32 rank, u64 dims and f64 data.

use std::io::{BufRead, Read, Write};

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const BINARY_MAGIC: &[u8; 4] = b"DRT1";

pub fn write_tensors<'a, W: Write>(
    out: &mut W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    for (name, t) in tensors {
        write!(out, "tensor {} {}", name, t.rank())?;
        for d in t.shape() {
            write!(out, " {d}")?;
        }
        writeln!(out)?;
        let lines = if t.rank() <= 1 { 1 } else { t.rows() };
        let cols = if t.rank() == 0 { 1 } else { t.cols() };
        for r in 0..lines {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let mut first = true;
            for v in row {
                if !first {
                    out.write_all(b" ")?;
                }
                write!(out, "{v}")?;
                first = false;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Reads tensors until end of input. `first_line` is the 1-based line number
/// of the first line in `input`, used in error messages.
pub fn read_tensors<R: BufRead>(input: R, first_line: usize) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    let mut lines = input
        .lines()
        .enumerate()
        .map(|(i, l)| (i + first_line, l));
    while let Some((no, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| AutodiffError::Checkpoint { line: no, detail };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 || fields[0] != "tensor" {
            return Err(err(format!("expected tensor header, got `{line}`")));
        }
        let name = fields[1].to_string();
        let rank: usize = fields[2]
            .parse()
            .map_err(|_| err(format!("bad rank `{}`", fields[2])))?;
        if fields.len() != 3 + rank {
            return Err(err(format!("rank {rank} but {} dims", fields.len() - 3)));
        }
        let shape = fields[3..]
            .iter()
            .map(|d| d.parse::<usize>().map_err(|_| err(format!("bad dim `{d}`"))))
            .collect::<Result<Vec<_>>>()?;
        let rows = match rank {
            0 | 1 => 1,
            _ => shape[..rank - 1].iter().product(),
        };
        let cols = if rank == 0 { 1 } else { shape[rank - 1] };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (no, row) = lines
                .next()
                .ok_or_else(|| err(format!("tensor `{name}` truncated")))?;
            let row = row?;
            let before = data.len();
            for tok in row.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| AutodiffError::Checkpoint {
                    line: no,
                    detail: format!("bad value `{tok}`"),
                })?;
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(AutodiffError::Checkpoint {
                    line: no,
                    detail: format!("expected {cols} values, found {}", data.len() - before),
                });
            }
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn write_tensors_binary<'a, W: Write>(
    out: &mut W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    out.write_all(BINARY_MAGIC)?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors_binary<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let bad = |detail: &str| AutodiffError::Checkpoint {
        line: 0,
        detail: detail.to_string(),
    };
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match input.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let mut rank = [0u8; 4];
        input.read_exact(&mut rank)?;
        let mut shape = Vec::new();
        for _ in 0..u32::from_le_bytes(rank) {
            let mut d = [0u8; 8];
            input.read_exact(&mut d)?;
            shape.push(u64::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = [0u8; 8];
            input.read_exact(&mut v)?;
            data.push(f64::from_le_bytes(v));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

impl ParamStore {
    pub fn save_text<W: Write>(&self, out: &mut W) -> Result<()> {
        write_tensors(out, self.iter())
    }

    pub fn load_text<R: BufRead>(input: R) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, t) in read_tensors(input, 1)? {
            store.insert(name, t)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, n)
                .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn text_round_trip_is_exact(t in arb_tensor(), u in arb_tensor()) {
            let mut buf = Vec::new();
            write_tensors(&mut buf, [("a", &t), ("b.c", &u)]).unwrap();
            let back = read_tensors(buf.as_slice(), 1).unwrap();
            prop_assert_eq!(&back[0].1, &t);
            prop_assert_eq!(&back[1].1, &u);
            prop_assert_eq!(back[1].0.as_str(), "b.c");
        }

        #[test]
        fn binary_round_trip_is_exact(t in arb_tensor()) {
            let mut buf = Vec::new();
            write_tensors_binary(&mut buf, [("w", &t)]).unwrap();
            let back = read_tensors_binary(buf.as_slice()).unwrap();
            prop_assert_eq!(&back[0].1, &t);
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::matrix(2, 2, vec![1.0, 0.5, -2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("emb", &t)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "tensor emb 2 2 2\n1 0.5\n-2 3\n");
    }

    #[test]
    fn short_row_reports_line() {
        let text = "tensor w 2 2 2\n1 2\n3\n";
        let err = read_tensors(text.as_bytes(), 1).unwrap_err();
        assert!(matches!(err, AutodiffError::Checkpoint { line: 3, .. }), "{err}");
    }
}
