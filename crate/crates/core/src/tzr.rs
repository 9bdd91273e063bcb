//! TZR tensor files: one JSON header line, then a little-endian `f64`
//! payload in row-major order.
//!
//! ```text
//! {"dtype":"f64","shape":[2,3]}\n
//! <48 bytes>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
}

pub fn write_tzr<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let header = Header {
        dtype: "f64".into(),
        shape: t.shape().to_vec(),
    };
    let line = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_tzr<R: Read>(r: R) -> Result<Tensor> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("missing header newline".into()));
    }
    line.pop();
    let header: Header =
        serde_json::from_slice(&line).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.dtype != "f64" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let numel: usize = header.shape.iter().product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != numel * 8 {
        return Err(Error::Format(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            numel * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&header.shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tzr(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    read_tzr(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0, -0.5]).unwrap();
        let bytes = to_bytes(&t);
        let header = b"{\"dtype\":\"f64\",\"shape\":[2,1]}\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 8], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), header.len() + 16);
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::zeros(&[3]);
        let mut bytes = to_bytes(&t);
        bytes.pop();
        assert!(matches!(read_tzr(&bytes[..]), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_other_dtypes() {
        let bytes = b"{\"dtype\":\"f32\",\"shape\":[1]}\n\0\0\0\0";
        assert!(read_tzr(&bytes[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let t = crate::rng::SeedStream::new(seed).uniform("t", &shape, -1e6, 1e6);
            let back = read_tzr(&to_bytes(&t)[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
