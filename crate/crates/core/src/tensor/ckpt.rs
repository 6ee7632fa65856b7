use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ParameterStore, Result, Tensor, TensorError};

/// Writes `ckpt v1 <count>`, then per parameter a `name\tndims\tdims...`
/// line followed by its values as little-endian f64.
pub fn write_checkpoint(store: &ParameterStore, mut w: impl Write) -> Result<()> {
    writeln!(w, "ckpt v1 {}", store.len())?;
    for (_, name, t) in store.iter() {
        if name.contains(['\t', '\n']) {
            return Err(TensorError::Checkpoint(format!("bad parameter name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "{name}\t{}\t{}", dims.len(), dims.join("\t"))?;
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl BufRead) -> Result<ParameterStore> {
    let bad = |m: String| TensorError::Checkpoint(m);
    let header = read_line(&mut r)?;
    let count: usize = header
        .strip_prefix("ckpt v1 ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad(format!("bad header {header:?}")))?;
    let mut store = ParameterStore::new(0);
    for _ in 0..count {
        let line = read_line(&mut r)?;
        let fields: Vec<&str> = line.split('\t').collect();
        let ndims: usize = fields
            .get(1)
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad(format!("bad record {line:?}")))?;
        if fields.len() != ndims + 2 {
            return Err(bad(format!("bad record {line:?}")));
        }
        let shape = fields[2..]
            .iter()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(e.to_string()))?;
        let len: usize = shape.iter().product();
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(fields[0], Tensor::new(shape, data)?)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(store)
}

fn read_line(r: &mut impl BufRead) -> Result<String> {
    let mut buf = Vec::new();
    r.read_until(b'\n', &mut buf)?;
    if buf.pop() != Some(b'\n') {
        return Err(TensorError::Checkpoint("unexpected end of file".into()));
    }
    String::from_utf8(buf).map_err(|e| TensorError::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(store, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterStore> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParameterStore::new(9);
        s.xavier("enc.w", 3, 4).unwrap();
        s.insert("odd", Tensor::row(vec![f64::MIN_POSITIVE, -0.0, 1e300])).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&s, &mut bytes).unwrap();
        let back = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, s);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut s = ParameterStore::new(0);
        s.zeros("w", 2, 2).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&s, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_checkpoint(&bytes[..]).is_err());
    }
}
