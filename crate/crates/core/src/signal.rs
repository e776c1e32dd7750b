//! Ground-motion preprocessing: acceleration record to fixed-length,
//! normalized magnitude spectrum.
//!
//! The pipeline is `fft_magnitude -> band_resample -> normalize_spectrum`.
//! Records are zero-padded to the next power of two and transformed with an
//! iterative radix-2 FFT.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default number of spectral bins fed to the earthquake encoder.
pub const DEFAULT_SPECTRUM_LEN: usize = 64;
/// Finer resolution, selectable at the cost of a slower earthquake encoder.
pub const FINE_SPECTRUM_LEN: usize = 256;
/// Default upper frequency of the resampled band, in Hz.
pub const DEFAULT_F_MAX: f64 = 25.0;
/// Default stabilizer added to the normalization divisor.
pub const DEFAULT_NORM_EPS: f64 = 1e-8;

/// Raw acceleration time series (units of g).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord<T = f64> {
    pub id: String,
    pub samples: Vec<T>,
    /// Sampling interval in seconds.
    pub dt: f64,
}

impl<T: Scalar> MotionRecord<T> {
    pub fn new(id: impl Into<String>, samples: Vec<T>, dt: f64) -> Result<Self> {
        let motion = Self { id: id.into(), samples, dt };
        motion.validate()?;
        Ok(motion)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidInput(format!("motion `{}` has no samples", self.id)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("motion `{}`: dt must be > 0, got {}", self.id, self.dt)));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("motion `{}`: sample {i} is not finite", self.id)));
        }
        Ok(())
    }

    /// Peak absolute acceleration.
    pub fn pga(&self) -> T {
        self.samples.iter().fold(T::zero(), |m, s| m.max(s.abs()))
    }

    /// Copy with every sample multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            id: self.id.clone(),
            samples: self.samples.iter().map(|&s| s * factor).collect(),
            dt: self.dt,
        }
    }
}

/// Input to the earthquake stream: a recorded motion or the zero-energy
/// null motion used for augmentation.
#[derive(Clone, Copy, Debug)]
pub enum MotionInput<'a, T = f64> {
    Record(&'a MotionRecord<T>),
    Null,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Divide by the L2 norm of the spectrum.
    #[default]
    Energy,
    /// Divide by the spectral peak.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub len: usize,
    pub f_max: f64,
    pub norm: NormKind,
    pub eps: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { len: DEFAULT_SPECTRUM_LEN, f_max: DEFAULT_F_MAX, norm: NormKind::Energy, eps: DEFAULT_NORM_EPS }
    }
}

/// Normalized magnitude spectrum of fixed length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum<T = f64> {
    pub bins: Vec<T>,
    pub f_max: f64,
    pub norm: NormKind,
}

impl<T: Scalar> Spectrum<T> {
    /// Spectrum of the null motion.
    pub fn zeros(cfg: &SpectralConfig) -> Self {
        Self { bins: vec![T::zero(); cfg.len], f_max: cfg.f_max, norm: cfg.norm }
    }

    pub fn is_null(&self) -> bool {
        self.bins.iter().all(|b| b.is_zero())
    }

    pub fn l2_norm(&self) -> T {
        self.bins.iter().map(|&b| b * b).sum::<T>().sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> Spectrum<U> {
        Spectrum { bins: self.bins.iter().map(|b| U::of(b.as_f64())).collect(), f_max: self.f_max, norm: self.norm }
    }
}

/// One-sided magnitude spectrum on a uniform frequency grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrum<T = f64> {
    /// `|X_k|` for `k = 0..=N/2`.
    pub mags: Vec<T>,
    /// Spacing between bins, `1 / (N dt)`.
    pub f_step: f64,
}

impl<T> MagnitudeSpectrum<T> {
    pub fn nyquist(&self) -> f64 {
        (self.mags.len().saturating_sub(1)) as f64 * self.f_step
    }
}

/// In-place iterative radix-2 FFT (forward, unnormalized).
///
/// `buf.len()` must be a power of two.
pub fn fft_in_place<T: Scalar>(buf: &mut [Complex<T>]) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length must be a power of two");
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(i, j);
        }
    }
    let two_pi = T::of(2.0 * std::f64::consts::PI);
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let theta = -two_pi / T::of(len as f64);
        // twiddles computed directly rather than by recurrence to keep
        // rounding error from accumulating across the stage
        let twiddles: Vec<Complex<T>> =
            (0..half).map(|k| Complex::from_polar(T::one(), theta * T::of(k as f64))).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

/// Magnitudes of the non-negative frequency bins after zero-padding the
/// record to the next power of two.
pub fn fft_magnitude<T: Scalar>(motion: &MotionRecord<T>) -> Result<MagnitudeSpectrum<T>> {
    motion.validate()?;
    let n = motion.samples.len().next_power_of_two();
    let mut buf: Vec<Complex<T>> = motion.samples.iter().map(|&s| Complex::new(s, T::zero())).collect();
    buf.resize(n, Complex::new(T::zero(), T::zero()));
    fft_in_place(&mut buf);
    let mags = buf[..n / 2 + 1].iter().map(|c| c.norm()).collect();
    Ok(MagnitudeSpectrum { mags, f_step: 1.0 / (n as f64 * motion.dt) })
}

/// Averages source bins into `len` equal-width bands spanning `[0, f_max]`.
///
/// A source bin belongs to the band containing its center frequency; the
/// last band is closed on the right. Bands with no source bin are zero.
pub fn band_resample<T: Scalar>(mags: &[T], f_step: f64, f_max: f64, len: usize) -> Result<Vec<T>> {
    if len == 0 {
        return Err(Error::InvalidInput("spectrum length must be >= 1".into()));
    }
    if !(f_step.is_finite() && f_step > 0.0) {
        return Err(Error::InvalidInput(format!("frequency step must be > 0, got {f_step}")));
    }
    let nyquist = mags.len().saturating_sub(1) as f64 * f_step;
    if !(f_max.is_finite() && f_max > 0.0) || f_max > nyquist * (1.0 + 1e-12) {
        return Err(Error::InvalidInput(format!("f_max {f_max} Hz exceeds the source Nyquist {nyquist} Hz")));
    }
    let mut sums = vec![T::zero(); len];
    let mut counts = vec![0usize; len];
    let bands_per_hz = len as f64 / f_max;
    for (j, &m) in mags.iter().enumerate() {
        let f = j as f64 * f_step;
        if f > f_max * (1.0 + 1e-12) {
            break;
        }
        // nudge guards against x.999999 from the division landing one band low
        let band = ((f * bands_per_hz) * (1.0 + 1e-12)).floor() as usize;
        let band = band.min(len - 1);
        sums[band] = sums[band] + m;
        counts[band] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c == 0 { T::zero() } else { s / T::of(c as f64) })
        .collect())
}

/// Divisor applied by [`normalize_spectrum`].
pub fn spectrum_divisor<T: Scalar>(bins: &[T], kind: NormKind, eps: f64) -> T {
    let eps = T::of(eps);
    match kind {
        NormKind::Energy => (bins.iter().map(|&b| b * b).sum::<T>() + eps).sqrt(),
        NormKind::Max => bins.iter().fold(T::zero(), |m, &b| m.max(b)) + eps,
    }
}

/// Scales bins by the energy or peak divisor. All-zero input stays zero.
pub fn normalize_spectrum<T: Scalar>(bins: &[T], kind: NormKind, eps: f64) -> Vec<T> {
    let d = spectrum_divisor(bins, kind, eps);
    bins.iter().map(|&b| b / d).collect()
}

fn resampled_bins<T: Scalar>(motion: &MotionRecord<T>, cfg: &SpectralConfig) -> Result<Vec<T>> {
    let spec = fft_magnitude(motion)?;
    band_resample(&spec.mags, spec.f_step, cfg.f_max, cfg.len)
}

/// Full preprocessing chain for the earthquake stream.
pub fn encode_motion<T: Scalar>(motion: MotionInput<'_, T>, cfg: &SpectralConfig) -> Result<Spectrum<T>> {
    match motion {
        MotionInput::Null => Ok(Spectrum::zeros(cfg)),
        MotionInput::Record(m) => {
            let bins = resampled_bins(m, cfg)?;
            Ok(Spectrum { bins: normalize_spectrum(&bins, cfg.norm, cfg.eps), f_max: cfg.f_max, norm: cfg.norm })
        }
    }
}

/// Encodes `factor * motion` while dividing by the normalization divisor of
/// the unscaled record, so the spectrum keeps the amplitude change.
///
/// `factor == 1` reproduces [`encode_motion`] bit for bit, and `factor == 0`
/// yields the null spectrum.
pub fn encode_scaled_motion<T: Scalar>(motion: &MotionRecord<T>, factor: T, cfg: &SpectralConfig) -> Result<Spectrum<T>> {
    if !(factor.is_finite() && factor >= T::zero()) {
        return Err(Error::InvalidInput(format!("amplitude factor must be finite and >= 0, got {factor}")));
    }
    let reference = resampled_bins(motion, cfg)?;
    let divisor = spectrum_divisor(&reference, cfg.norm, cfg.eps);
    let bins = if factor == T::one() { reference } else { resampled_bins(&motion.scaled(factor), cfg)? };
    Ok(Spectrum { bins: bins.iter().map(|&b| b / divisor).collect(), f_max: cfg.f_max, norm: cfg.norm })
}

/// Parses the `t,a` motion CSV format. `dt` is taken from the first two
/// rows and every later step must match it within 1e-9 relative.
pub fn parse_motion_csv(id: &str, text: &str) -> Result<MotionRecord<f64>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    for (pos, want) in ["t", "a"].iter().enumerate() {
        if headers.get(pos) != Some(want) {
            return Err(Error::Schema { column: (*want).to_string() });
        }
    }
    if headers.len() != 2 {
        return Err(Error::Schema { column: headers.get(2).unwrap_or_default().to_string() });
    }
    let mut times = Vec::new();
    let mut samples = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let parse = |col: usize| -> Result<f64> {
            let cell = rec.get(col).unwrap_or("");
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Row { row, message: format!("non-numeric cell `{cell}`") })?;
            if !v.is_finite() {
                return Err(Error::Row { row, message: format!("non-finite value `{cell}`") });
            }
            Ok(v)
        };
        times.push(parse(0)?);
        samples.push(parse(1)?);
    }
    if times.len() < 2 {
        return Err(Error::InvalidInput(format!("motion `{id}` needs at least two rows to infer dt")));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("motion `{id}`: non-increasing time column")));
    }
    for (i, w) in times.windows(2).enumerate() {
        let step = w[1] - w[0];
        if ((step - dt) / dt).abs() > 1e-9 {
            return Err(Error::Row { row: i + 3, message: format!("time step {step} differs from dt {dt}") });
        }
    }
    MotionRecord::new(id, samples, dt)
}

/// Writes a motion in the `t,a` CSV format.
pub fn motion_to_csv(motion: &MotionRecord<f64>) -> String {
    let mut out = String::from("t,a\n");
    for (i, a) in motion.samples.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i as f64 * motion.dt, a));
    }
    out
}
