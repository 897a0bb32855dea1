//! Little-endian binary serialization helpers shared by the model file
//! formats (`NGM1`, `DICT1`, `CNN1`, `GMM1`, `SVM1`).

use std::io::{Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("field {field} has invalid value {value}")]
    BadField { field: &'static str, value: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("string field is not valid utf-8")]
    BadString,
}

pub fn write_magic(w: &mut impl Write, magic: &str) -> Result<(), PersistError> {
    w.write_all(magic.as_bytes())?;
    Ok(())
}

pub fn read_magic(r: &mut impl Read, expected: &str) -> Result<(), PersistError> {
    let mut buf = vec![0u8; expected.len()];
    r.read_exact(&mut buf)?;
    if buf != expected.as_bytes() {
        return Err(PersistError::BadMagic {
            expected: expected.to_string(),
            found: String::from_utf8_lossy(&buf).into_owned(),
        });
    }
    Ok(())
}

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<(), PersistError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32, PersistError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_f64(w: &mut impl Write, v: f64) -> Result<(), PersistError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_f64(r: &mut impl Read) -> Result<f64, PersistError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn write_f64_slice(w: &mut impl Write, vs: &[f64]) -> Result<(), PersistError> {
    for &v in vs {
        write_f64(w, v)?;
    }
    Ok(())
}

pub fn read_f64_vec(r: &mut impl Read, len: usize) -> Result<Vec<f64>, PersistError> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

/// Writes a length-prefixed UTF-8 string.
pub fn write_str(w: &mut impl Write, s: &str) -> Result<(), PersistError> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_str(r: &mut impl Read) -> Result<String, PersistError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| PersistError::BadString)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_round_trip() {
        let mut buf = Vec::new();
        write_magic(&mut buf, "TST1").unwrap();
        write_u32(&mut buf, 7).unwrap();
        write_f64_slice(&mut buf, &[1.5, -0.25, f64::MIN_POSITIVE]).unwrap();
        write_str(&mut buf, "label/2").unwrap();

        let mut r = buf.as_slice();
        read_magic(&mut r, "TST1").unwrap();
        assert_eq!(read_u32(&mut r).unwrap(), 7);
        assert_eq!(read_f64_vec(&mut r, 3).unwrap(), vec![1.5, -0.25, f64::MIN_POSITIVE]);
        assert_eq!(read_str(&mut r).unwrap(), "label/2");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let buf = b"XXXX".to_vec();
        let mut r = buf.as_slice();
        assert!(matches!(
            read_magic(&mut r, "NGM1"),
            Err(PersistError::BadMagic { .. })
        ));
    }
}
