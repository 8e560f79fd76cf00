//! Sample-stream framing over a reliable byte stream, little-endian:
//!
//! ```text
//! data:   u8 0 | u64 first_sample_index | u16 channels | u16 n_samples | f32 × channels × n_samples (channel-major)
//! marker: u8 1 | u64 sample_index | u8 label
//! ```

use std::io::{ErrorKind, Read, Write};

use ndarray::Array2;

use super::SessionError;
use crate::protocol::Frame;

const TYPE_DATA: u8 = 0;
const TYPE_MARKER: u8 = 1;

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, SessionError> {
    let mut out = Vec::new();
    match frame {
        Frame::Data { first_index, samples } => {
            let (c, n) = samples.dim();
            if c == 0 || n == 0 || c > u16::MAX as usize || n > u16::MAX as usize {
                return Err(SessionError::Protocol(format!("data frame of {c} × {n} cannot be encoded")));
            }
            out.reserve(13 + 4 * c * n);
            out.push(TYPE_DATA);
            out.extend_from_slice(&first_index.to_le_bytes());
            out.extend_from_slice(&(c as u16).to_le_bytes());
            out.extend_from_slice(&(n as u16).to_le_bytes());
            for v in samples.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Frame::Marker { index, label } => {
            out.push(TYPE_MARKER);
            out.extend_from_slice(&index.to_le_bytes());
            out.push(*label);
        }
    }
    Ok(out)
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), SessionError> {
    w.write_all(&encode_frame(frame)?)?;
    Ok(())
}

/// Decodes frames from a byte stream. A clean end of stream between frames
/// yields `None`; a frame cut short is an error.
pub struct FrameReader<R> {
    inner: R,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<(), SessionError> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => SessionError::Protocol("stream ended inside a frame".into()),
            _ => SessionError::from(e),
        })
    }

    pub fn next_frame(&mut self) -> Result<Option<Frame>, SessionError> {
        let mut kind = [0u8; 1];
        loop {
            match self.inner.read(&mut kind) {
                Ok(0) => return Ok(None),
                Ok(_) => break,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
        let mut idx = [0u8; 8];
        self.fill(&mut idx)?;
        let index = u64::from_le_bytes(idx);
        match kind[0] {
            TYPE_DATA => {
                let mut dims = [0u8; 4];
                self.fill(&mut dims)?;
                let c = u16::from_le_bytes([dims[0], dims[1]]) as usize;
                let n = u16::from_le_bytes([dims[2], dims[3]]) as usize;
                if c == 0 || n == 0 {
                    return Err(SessionError::Protocol(format!("empty data frame ({c} × {n})")));
                }
                let mut raw = vec![0u8; 4 * c * n];
                self.fill(&mut raw)?;
                let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
                let samples = Array2::from_shape_vec((c, n), values).expect("length checked");
                Ok(Some(Frame::Data { first_index: index, samples }))
            }
            TYPE_MARKER => {
                let mut label = [0u8; 1];
                self.fill(&mut label)?;
                Ok(Some(Frame::Marker { index, label: label[0] }))
            }
            other => Err(SessionError::Protocol(format!("unknown frame type {other}"))),
        }
    }
}
