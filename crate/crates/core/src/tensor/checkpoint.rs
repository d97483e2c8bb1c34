//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GEMT"            4 bytes magic
//! version           u32
//! repeated until EOF:
//!   path_len        u32
//!   path            path_len bytes, UTF-8
//!   rank            u32
//!   dims            rank × u32
//!   values          product(dims) × f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{ParameterStore, Tensor};
use crate::error::{GemtError, Result};

pub const MAGIC: &[u8; 4] = b"GEMT";
pub const FORMAT_VERSION: u32 = 1;

/// Prefix of optional entries accepted by [`load_checkpoint`] even when the
/// template does not list them.
pub const OPTIONAL_PREFIX: &str = "proto.";

pub fn write_container<W: Write>(mut w: W, params: &ParameterStore<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (path, t) in params.iter() {
        let bytes = path.as_bytes();
        w.write_all(
            &u32::try_from(bytes.len())
                .map_err(|_| ckpt("path too long"))?
                .to_le_bytes(),
        )?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&u32::try_from(d).map_err(|_| ckpt("dimension too large"))?.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn ckpt(msg: impl Into<String>) -> GemtError {
    GemtError::Checkpoint(msg.into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => ckpt("truncated container"),
        _ => e.into(),
    })?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a container. Fails on bad magic, unknown version or truncation.
pub fn read_container<R: Read>(mut r: R) -> Result<ParameterStore<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| ckpt("missing magic"))?;
    if &magic != MAGIC {
        return Err(ckpt(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(ckpt(format!("unsupported format version {version}")));
    }
    let mut store = ParameterStore::new();
    loop {
        let mut first = [0u8; 4];
        let n = read_fully(&mut r, &mut first)?;
        if n == 0 {
            break;
        }
        if n < 4 {
            return Err(ckpt("truncated container"));
        }
        let path_len = u32::from_le_bytes(first) as usize;
        let mut path = vec![0u8; path_len];
        r.read_exact(&mut path).map_err(|_| ckpt("truncated path"))?;
        let path = String::from_utf8(path).map_err(|_| ckpt("path is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)
            .map_err(|_| ckpt(format!("truncated values for `{path}`")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store
            .insert(path.clone(), Tensor::new(&dims, data)?)
            .map_err(|_| ckpt(format!("duplicate path `{path}`")))?;
    }
    Ok(store)
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(got)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParameterStore<f32>) -> Result<()> {
    let f = File::create(path)?;
    write_container(BufWriter::new(f), params)
}

/// Loads a checkpoint and validates it against `template`: every template
/// path must be present with an identical shape, and any extra path must
/// start with [`OPTIONAL_PREFIX`].
pub fn load_checkpoint(path: impl AsRef<Path>, template: &ParameterStore<f32>) -> Result<ParameterStore<f32>> {
    let f = File::open(path)?;
    let store = read_container(BufReader::new(f))?;
    validate_against(&store, template)?;
    Ok(store)
}

pub fn validate_against(store: &ParameterStore<f32>, template: &ParameterStore<f32>) -> Result<()> {
    for (path, t) in template.iter() {
        let got = store
            .get(path)
            .map_err(|_| ckpt(format!("missing parameter `{path}`")))?;
        if got.shape() != t.shape() {
            return Err(ckpt(format!(
                "shape mismatch for `{path}`: checkpoint {:?}, config {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = store
        .paths()
        .find(|p| !template.contains(p) && !p.starts_with(OPTIONAL_PREFIX))
    {
        return Err(ckpt(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.insert(
            "a.w",
            Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-3, -7.25]).unwrap(),
        )
        .unwrap();
        s.insert("b", Tensor::from_f64(&[], &[4.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn byte_layout() {
        let mut buf = Vec::new();
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        write_container(&mut buf, &s).unwrap();
        let mut want = b"GEMT".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.push(b'x');
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend(2.0f32.to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut buf = Vec::new();
        write_container(&mut buf, &sample()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_container(&bad[..]).unwrap_err().to_string().contains("magic"));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_container(&bad[..]).unwrap_err().to_string().contains("version"));
        let short = &buf[..buf.len() - 2];
        assert!(read_container(short).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn validation_catches_shape_and_extra() {
        let s = sample();
        let mut tmpl = sample();
        assert!(validate_against(&s, &tmpl).is_ok());
        *tmpl.get_mut("b").unwrap() = Tensor::zeros(&[1]);
        assert!(validate_against(&s, &tmpl)
            .unwrap_err()
            .to_string()
            .contains("shape mismatch"));
        let mut tmpl = sample();
        tmpl.remove("b");
        assert!(validate_against(&s, &tmpl)
            .unwrap_err()
            .to_string()
            .contains("unexpected"));
        let mut with_proto = sample();
        with_proto
            .insert("proto.spatial.prototypes", Tensor::zeros(&[2, 2]))
            .unwrap();
        assert!(validate_against(&with_proto, &sample()).is_ok());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40),
                                  name in "[a-z]{1,8}(\\.[a-z0-9]{1,5}){0,3}") {
            let mut s = ParameterStore::new();
            s.insert(name, Tensor::new(&[vals.len()], vals).unwrap()).unwrap();
            let mut buf = Vec::new();
            write_container(&mut buf, &s).unwrap();
            let back = read_container(&buf[..]).unwrap();
            prop_assert_eq!(s.checksum(), back.checksum());
        }
    }
}
