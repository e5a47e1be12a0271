//! Binary PPM (P6) and PGM (P5) encoding with 8-bit samples.

use crate::error::{Error, Result};

/// Encodes a CHW `u8` image with 1 (PGM) or 3 (PPM) channels.
pub fn encode(channels: usize, width: usize, height: usize, chw: &[u8]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Usage(format!("raster: unsupported channel count {c}"))),
    };
    let plane = width * height;
    if chw.len() != channels * plane {
        return Err(Error::Usage(format!(
            "raster: {} samples for a {channels}x{height}x{width} image",
            chw.len()
        )));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.reserve(chw.len());
    for i in 0..plane {
        for c in 0..channels {
            out.push(chw[c * plane + i]);
        }
    }
    Ok(out)
}

/// A decoded raster in CHW layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub chw: Vec<u8>,
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let bad = |m: &str| Error::Format(format!("raster: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("unsupported magic {m:?}"))),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    if num(token()?)? != 255 {
        return Err(bad("only 8-bit samples are supported"));
    }
    // exactly one whitespace byte separates the header from the samples
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing sample data"))?;
    let plane = width * height;
    if data.len() != channels * plane {
        return Err(bad("sample count does not match dimensions"));
    }
    let mut chw = vec![0; data.len()];
    for i in 0..plane {
        for c in 0..channels {
            chw[c * plane + i] = data[i * channels + c];
        }
    }
    Ok(Raster {
        channels,
        width,
        height,
        chw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(1, 2, 1, &[7, 9]).unwrap();
        assert_eq!(bytes, b"P5\n2 1\n255\n\x07\x09");
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(encode(3, 2, 2, &[0; 5]).is_err());
        assert!(decode(b"P6\n2 2\n255\n\x00").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(gray in any::<bool>(), w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let c = if gray { 1 } else { 3 };
            let chw: Vec<u8> = (0..c * w * h).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let r = decode(&encode(c, w, h, &chw).unwrap()).unwrap();
            prop_assert_eq!(r, Raster { channels: c, width: w, height: h, chw });
        }
    }
}
