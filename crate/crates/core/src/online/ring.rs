use ndarray::{s, Array2};

use crate::dsp::{DspError, SampleStore};

/// Fixed-capacity multichannel history indexed by absolute sample number.
#[derive(Clone, Debug)]
pub struct RingBuffer {
    storage: Array2<f64>,
    write_index: u64,
}

impl RingBuffer {
    pub fn new(channels: usize, capacity: usize) -> Result<Self, DspError> {
        if channels == 0 || capacity == 0 {
            return Err(DspError::InvalidParameter(format!("ring of {channels} channels × {capacity} samples")));
        }
        Ok(RingBuffer { storage: Array2::zeros((channels, capacity)), write_index: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.storage.ncols()
    }

    /// Total samples ever written.
    pub fn write_index(&self) -> u64 {
        self.write_index
    }

    /// Appends a `channels × n` chunk and returns the new write index.
    pub fn push(&mut self, chunk: &Array2<f64>) -> Result<u64, DspError> {
        if chunk.nrows() != self.storage.nrows() {
            return Err(DspError::ChannelMismatch { expected: self.storage.nrows(), got: chunk.nrows() });
        }
        let cap = self.capacity();
        let n = chunk.ncols();
        // Only the newest `cap` samples of an oversized chunk survive.
        let skip = n.saturating_sub(cap);
        let mut pos = ((self.write_index + skip as u64) % cap as u64) as usize;
        let mut src = skip;
        while src < n {
            let run = (cap - pos).min(n - src);
            self.storage.slice_mut(s![.., pos..pos + run]).assign(&chunk.slice(s![.., src..src + run]));
            src += run;
            pos = (pos + run) % cap;
        }
        self.write_index += n as u64;
        Ok(self.write_index)
    }
}

impl SampleStore for RingBuffer {
    fn channels(&self) -> usize {
        self.storage.nrows()
    }

    fn end_index(&self) -> u64 {
        self.write_index
    }

    fn start_index(&self) -> u64 {
        self.write_index.saturating_sub(self.capacity() as u64)
    }

    fn window(&self, start: u64, len: usize) -> Result<Array2<f64>, DspError> {
        let end = start + len as u64;
        if end > self.write_index {
            return Err(DspError::NotYetAvailable { start, end, available: self.write_index });
        }
        if start < self.start_index() {
            return Err(DspError::WindowEvicted { start, end, oldest: self.start_index() });
        }
        let cap = self.capacity();
        let mut out = Array2::zeros((self.storage.nrows(), len));
        let mut pos = (start % cap as u64) as usize;
        let mut dst = 0;
        while dst < len {
            let run = (cap - pos).min(len - dst);
            out.slice_mut(s![.., dst..dst + run]).assign(&self.storage.slice(s![.., pos..pos + run]));
            dst += run;
            pos = (pos + run) % cap;
        }
        Ok(out)
    }
}
