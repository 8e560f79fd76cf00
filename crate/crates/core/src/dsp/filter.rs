use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;

use super::DspError;

/// One second-order section, normalized to `a0 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    pub const IDENTITY: Biquad = Biquad { b0: 1.0, b1: 0.0, b2: 0.0, a1: 0.0, a2: 0.0 };

    /// Transfer function at `z = e^{jω}`.
    pub fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        (self.b0 + self.b1 * z1 + self.b2 * z2) / (1.0 + self.a1 * z1 + self.a2 * z2)
    }

    /// Largest pole magnitude of `z² + a1·z + a2`.
    pub fn pole_radius(&self) -> f64 {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let r1 = (-self.a1 + disc) / 2.0;
        let r2 = (-self.a1 - disc) / 2.0;
        r1.norm().max(r2.norm())
    }
}

/// Ordered list of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
}

impl BiquadCascade {
    pub fn identity() -> Self {
        BiquadCascade { sections: vec![Biquad::IDENTITY] }
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.sections.iter().map(Biquad::pole_radius).fold(0.0, f64::max)
    }

    /// Coefficient table: one row per section, 17 significant digits.
    pub fn coefficient_table(&self) -> String {
        let mut out = String::from("section,b0,b1,b2,a1,a2\n");
        for (i, s) in self.sections.iter().enumerate() {
            out.push_str(&format!(
                "{i},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                s.b0, s.b1, s.b2, s.a1, s.a2
            ));
        }
        out
    }
}

fn check_band(freq_hz: f64, fs: f64) -> Result<(), DspError> {
    if !(fs > 0.0) {
        return Err(DspError::InvalidParameter(format!("sampling rate {fs}")));
    }
    let nyquist_hz = fs / 2.0;
    if !(freq_hz > 0.0 && freq_hz < nyquist_hz) {
        return Err(DspError::AboveNyquist { freq_hz, nyquist_hz });
    }
    Ok(())
}

/// Digital Butterworth low-pass via the bilinear transform with pre-warping.
///
/// Conjugate pole pairs become biquads with a double zero at Nyquist; an odd
/// order adds a first-order section stored as a biquad with `b2 = a2 = 0`.
/// Each section is scaled to unit DC gain.
pub fn design_butterworth_lowpass(order: usize, cutoff_hz: f64, fs: f64) -> Result<BiquadCascade, DspError> {
    if order == 0 {
        return Err(DspError::InvalidParameter("order must be positive".into()));
    }
    check_band(cutoff_hz, fs)?;
    let k = 2.0 * fs;
    let wc = k * (PI * cutoff_hz / fs).tan();
    let bilinear = |p: Complex64| (k + p) / (k - p);

    let n = order as f64;
    let mut sections = Vec::with_capacity(order.div_ceil(2));
    for i in 0..order / 2 {
        let theta = PI * (2.0 * i as f64 + n + 1.0) / (2.0 * n);
        let z = bilinear(Complex64::from_polar(wc, theta));
        let a1 = -2.0 * z.re;
        let a2 = z.norm_sqr();
        let gain = (1.0 + a1 + a2) / 4.0;
        sections.push(Biquad { b0: gain, b1: 2.0 * gain, b2: gain, a1, a2 });
    }
    if order % 2 == 1 {
        let z = bilinear(Complex64::new(-wc, 0.0)).re;
        let gain = (1.0 - z) / 2.0;
        sections.push(Biquad { b0: gain, b1: gain, b2: 0.0, a1: -z, a2: 0.0 });
    }
    Ok(BiquadCascade { sections })
}

/// Second-order notch with zeros on the unit circle at `freq_hz`.
pub fn design_notch(freq_hz: f64, q: f64, fs: f64) -> Result<BiquadCascade, DspError> {
    check_band(freq_hz, fs)?;
    if !(q > 0.0) {
        return Err(DspError::InvalidParameter(format!("quality factor {q}")));
    }
    let w0 = 2.0 * PI * freq_hz / fs;
    let alpha = w0.sin() / (2.0 * q);
    let c = w0.cos();
    let a0 = 1.0 + alpha;
    Ok(BiquadCascade {
        sections: vec![Biquad {
            b0: 1.0 / a0,
            b1: -2.0 * c / a0,
            b2: 1.0 / a0,
            a1: -2.0 * c / a0,
            a2: (1.0 - alpha) / a0,
        }],
    })
}

/// Magnitude of the cascade at `f_hz`, in dB.
pub fn frequency_response(cascade: &BiquadCascade, f_hz: f64, fs: f64) -> Result<f64, DspError> {
    let nyquist_hz = fs / 2.0;
    if !(0.0..nyquist_hz).contains(&f_hz) {
        return Err(DspError::AboveNyquist { freq_hz: f_hz, nyquist_hz });
    }
    let omega = 2.0 * PI * f_hz / fs;
    let h: Complex64 = cascade.sections.iter().map(|s| s.response(omega)).product();
    Ok(20.0 * h.norm().log10())
}

/// Delay registers for a cascade over several channels.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeState {
    channels: usize,
    sections: usize,
    // [channel][section] -> (s1, s2)
    regs: Vec<[f64; 2]>,
}

impl CascadeState {
    pub fn new(cascade: &BiquadCascade, channels: usize) -> Self {
        let sections = cascade.sections.len();
        CascadeState { channels, sections, regs: vec![[0.0; 2]; channels * sections] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of delay registers (two per section per channel).
    pub fn len(&self) -> usize {
        self.regs.len() * 2
    }

    pub fn is_empty(&self) -> bool {
        self.regs.is_empty()
    }
}

/// Delay registers smaller than this are set to zero.
pub const FLUSH_BELOW: f64 = 1e-200;

/// Filters `chunk` (`channels × n`) in place with direct form II transposed,
/// carrying `state` across calls.
pub fn filter_apply(
    cascade: &BiquadCascade,
    chunk: &mut Array2<f64>,
    state: &mut CascadeState,
) -> Result<(), DspError> {
    let channels = chunk.nrows();
    if channels != state.channels || state.sections != cascade.sections.len() {
        return Err(DspError::ChannelMismatch { expected: state.channels, got: channels });
    }
    let nsec = state.sections;
    for (ch, mut row) in chunk.rows_mut().into_iter().enumerate() {
        let regs = &mut state.regs[ch * nsec..(ch + 1) * nsec];
        for x in row.iter_mut() {
            let mut v = *x;
            for (s, r) in cascade.sections.iter().zip(regs.iter_mut()) {
                let y = s.b0 * v + r[0];
                r[0] = s.b1 * v - s.a1 * y + r[1];
                r[1] = s.b2 * v - s.a2 * y;
                // Decaying state would otherwise sink into subnormals, which are
                // very slow on most CPUs. Applied per sample, so chunking is irrelevant.
                for reg in r.iter_mut() {
                    if reg.abs() < FLUSH_BELOW {
                        *reg = 0.0;
                    }
                }
                v = y;
            }
            *x = v;
        }
    }
    Ok(())
}

/// A cascade bundled with the state of one stream.
#[derive(Clone, Debug)]
pub struct StreamingFilter {
    cascade: BiquadCascade,
    state: CascadeState,
}

impl StreamingFilter {
    pub fn new(cascade: BiquadCascade, channels: usize) -> Self {
        let state = CascadeState::new(&cascade, channels);
        StreamingFilter { cascade, state }
    }

    pub fn cascade(&self) -> &BiquadCascade {
        &self.cascade
    }

    pub fn state(&self) -> &CascadeState {
        &self.state
    }

    pub fn process(&mut self, chunk: &mut Array2<f64>) -> Result<(), DspError> {
        filter_apply(&self.cascade, chunk, &mut self.state)
    }
}
