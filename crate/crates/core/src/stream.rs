//! Raw frame streams: the 6-byte magic `SRRAW1`, width and height as
//! little-endian u32, then packed 8-bit RGB frames with no separators.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::image::{ImagePlane, MIN_SIDE};
use crate::operator::OperatorParams;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 6] = b"SRRAW1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub width: u32,
    pub height: u32,
}

impl StreamHeader {
    pub fn frame_bytes(&self) -> usize {
        3 * self.width as usize * self.height as usize
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Io {
        path: "<stream>".into(),
        source: e,
    }
}

/// Fills `buf` completely, or reports how many bytes arrived before EOF.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(io_err(e)),
        }
    }
    Ok(got)
}

pub fn read_header(r: &mut impl Read) -> Result<StreamHeader> {
    let mut buf = [0u8; 14];
    let n = read_full(r, &mut buf)?;
    if n < 6 || &buf[..6] != MAGIC {
        return Err(Error::Stream("missing SRRAW1 magic".into()));
    }
    if n < 14 {
        return Err(Error::Stream(format!("header truncated after {n} bytes")));
    }
    let width = u32::from_le_bytes(buf[6..10].try_into().expect("4 bytes"));
    let height = u32::from_le_bytes(buf[10..14].try_into().expect("4 bytes"));
    if (width as usize) < MIN_SIDE || (height as usize) < MIN_SIDE {
        return Err(Error::Stream(format!(
            "frames must be at least {MIN_SIDE}x{MIN_SIDE}, header says {width}x{height}"
        )));
    }
    Ok(StreamHeader { width, height })
}

pub fn write_header(w: &mut impl Write, h: StreamHeader) -> Result<()> {
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&h.width.to_le_bytes()).map_err(io_err)?;
    w.write_all(&h.height.to_le_bytes()).map_err(io_err)
}

/// Next frame into `buf`; `false` at a clean end of stream.
pub fn read_frame(r: &mut impl Read, buf: &mut [u8]) -> Result<bool> {
    match read_full(r, buf)? {
        0 => Ok(false),
        n if n == buf.len() => Ok(true),
        n => Err(Error::Stream(format!(
            "stream ended inside a frame ({n} of {} bytes)",
            buf.len()
        ))),
    }
}

/// Stylizes every frame of `input` onto `output`, one frame in and one out,
/// flushing after each. Holds a single frame in memory. Returns the frame
/// count.
pub fn stylize_stream<T: Scalar>(params: &OperatorParams<T>, input: &mut impl Read, output: &mut impl Write) -> Result<u64> {
    let header = read_header(input)?;
    write_header(output, header)?;
    output.flush().map_err(io_err)?;
    let mut buf = vec![0u8; header.frame_bytes()];
    let mut frames = 0;
    while read_frame(input, &mut buf)? {
        let x = ImagePlane::<T>::from_bytes(3, header.width as usize, header.height as usize, &buf)?;
        let y = params.apply(&x)?;
        output.write_all(&y.to_bytes()).map_err(io_err)?;
        output.flush().map_err(io_err)?;
        frames += 1;
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_errors() {
        assert!(matches!(read_header(&mut &b"SRRAW2\x08\0\0\0\x08\0\0\0"[..]), Err(Error::Stream(_))));
        assert!(matches!(read_header(&mut &b"SRRAW1\x08\0"[..]), Err(Error::Stream(_))));
        assert!(matches!(read_header(&mut &b""[..]), Err(Error::Stream(_))));
        let h = read_header(&mut &b"SRRAW1\x10\0\0\0\x08\0\0\0"[..]).unwrap();
        assert_eq!((h.width, h.height), (16, 8));
    }

    #[test]
    fn empty_stream_yields_only_the_header() {
        let p = OperatorParams::<f32>::identity(0.25, 0);
        let mut out = Vec::new();
        let n = stylize_stream(&p, &mut &b"SRRAW1\x08\0\0\0\x08\0\0\0"[..], &mut out).unwrap();
        assert_eq!(n, 0);
        assert_eq!(out, b"SRRAW1\x08\0\0\0\x08\0\0\0");
    }

    #[test]
    fn partial_frame_is_an_error() {
        let p = OperatorParams::<f32>::identity(0.25, 0);
        let mut input = b"SRRAW1\x08\0\0\0\x08\0\0\0".to_vec();
        input.extend_from_slice(&[7u8; 100]);
        assert!(matches!(stylize_stream(&p, &mut &input[..], &mut Vec::new()), Err(Error::Stream(_))));
    }
}
