//! Transmission path: power normalization, SNR sampling, fading with
//! additive Gaussian noise, and zero-forcing equalization.
//!
//! Signals are real-valued with unit average power per symbol, so a draw of
//! `snr_db` fixes the noise standard deviation at `sqrt(10^(-snr_db / 10))`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Clamped Gaussian distribution of per-transmission SNR in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SnrDistribution {
    pub mean_db: f64,
    pub std_db: f64,
    pub min_db: f64,
    pub max_db: f64,
}

impl SnrDistribution {
    pub const DEFAULT_MIN_DB: f64 = -5.0;
    pub const DEFAULT_MAX_DB: f64 = 25.0;

    pub fn new(mean_db: f64, std_db: f64) -> Result<Self> {
        Self::with_clamp(mean_db, std_db, Self::DEFAULT_MIN_DB, Self::DEFAULT_MAX_DB)
    }

    pub fn with_clamp(mean_db: f64, std_db: f64, min_db: f64, max_db: f64) -> Result<Self> {
        let d = Self {
            mean_db,
            std_db,
            min_db,
            max_db,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std_db >= 0.0 && self.std_db.is_finite()) {
            return Err(Error::config("snr.std_db", "must be finite and >= 0"));
        }
        if !(self.min_db.is_finite() && self.max_db.is_finite()) {
            return Err(Error::config("snr.clamp", "bounds must be finite"));
        }
        if !(self.min_db <= self.mean_db && self.mean_db <= self.max_db) {
            return Err(Error::config(
                "snr.mean_db",
                format!(
                    "{} outside clamp [{}, {}]",
                    self.mean_db, self.min_db, self.max_db
                ),
            ));
        }
        Ok(())
    }

    /// Gaussian draw clamped to `[min_db, max_db]`.
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        if self.std_db == 0.0 {
            return self.mean_db;
        }
        (self.mean_db + self.std_db * rng.normal()).clamp(self.min_db, self.max_db)
    }

    /// Maps an SNR into `[0, 1]` over the clamp range; the codec feeds this
    /// value as its channel-state input.
    pub fn normalized(&self, snr_db: f64) -> f64 {
        let span = self.max_db - self.min_db;
        if span <= 0.0 {
            return 0.5;
        }
        ((snr_db - self.min_db) / span).clamp(0.0, 1.0)
    }
}

/// Per-symbol noise standard deviation for unit signal power.
pub fn noise_std_for(snr_db: f64) -> f64 {
    math::sqrt(1.0 / math::powf(10.0, snr_db / 10.0))
}

/// `emb / rms(emb)`, giving unit mean squared magnitude across all symbols.
pub fn power_normalize(emb: &Tensor) -> Result<Tensor> {
    let ms = emb.norm_sq() / emb.len() as f64;
    if ms == 0.0 || emb.is_empty() {
        return Err(Error::DegenerateSignal);
    }
    let inv = 1.0 / math::sqrt(ms);
    Ok(emb.map(|x| x * inv))
}

/// Fading model of a realization.
#[derive(Debug, Clone, PartialEq)]
pub enum Fading {
    /// `H = I`: additive white Gaussian noise only.
    Awgn,
    /// General square fading matrix with its zero-forcing inverse
    /// `(H^T H)^-1 H^T`.
    Matrix {
        h: DMatrix<f64>,
        zero_forcing: DMatrix<f64>,
    },
}

/// One channel draw: fading, SNR and the implied noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    fading: Fading,
    snr_db: f64,
    noise_std: f64,
}

impl ChannelRealization {
    pub fn awgn(snr_db: f64) -> Self {
        Self {
            fading: Fading::Awgn,
            snr_db,
            noise_std: noise_std_for(snr_db),
        }
    }

    /// Builds a realization with fading matrix `h`; rejects matrices whose
    /// normal matrix `H^T H` is not invertible.
    pub fn with_fading(h: DMatrix<f64>, snr_db: f64) -> Result<Self> {
        if !h.is_square() || h.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "fading matrix must be square, got {}x{}",
                h.nrows(),
                h.ncols()
            )));
        }
        let hth = h.transpose() * &h;
        let svals = hth.clone().singular_values();
        let (lo, hi) = svals.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
        if !(lo > hi * 1e-14) {
            return Err(Error::ChannelSingular(format!(
                "singular values of H^T H span [{lo:e}, {hi:e}]"
            )));
        }
        // (H^T H)^-1 H^T = R^-1 Q^T for H = QR, without squaring the
        // condition number.
        let qr = h.clone().qr();
        let zero_forcing = qr
            .r()
            .solve_upper_triangular(&qr.q().transpose())
            .ok_or_else(|| Error::ChannelSingular("R factor of H is singular".into()))?;
        Ok(Self {
            fading: Fading::Matrix { h, zero_forcing },
            snr_db,
            noise_std: noise_std_for(snr_db),
        })
    }

    /// Diagonal fading with i.i.d. gains drawn uniformly from `[lo, hi]`,
    /// `0 < lo <= hi`.
    pub fn diagonal_fading(
        symbols: usize,
        lo: f64,
        hi: f64,
        snr_db: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config("fading.gain", "need 0 < lo <= hi"));
        }
        let gains: Vec<f64> = (0..symbols).map(|_| rng.uniform_range(lo, hi)).collect();
        Self::with_fading(DMatrix::from_diagonal(&gains.into()), snr_db)
    }

    /// Overrides the noise level, e.g. for noiseless identity checks.
    pub fn with_noise_std(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn snr_db(&self) -> f64 {
        self.snr_db
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn fading(&self) -> &Fading {
        &self.fading
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if let Fading::Matrix { h, .. } = &self.fading {
            if h.ncols() != n {
                return Err(Error::Dimension(format!(
                    "fading matrix is {}x{}, signal has {n} symbols",
                    h.nrows(),
                    h.ncols()
                )));
            }
        }
        Ok(())
    }

    /// `Y = H * emb + N`, `N ~ N(0, noise_std^2)` i.i.d. per symbol.
    pub fn transmit(&self, emb: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
        self.check_dim(emb.len())?;
        let mut y = match &self.fading {
            Fading::Awgn => emb.data().to_vec(),
            Fading::Matrix { h, .. } => (h * nalgebra::DVector::from_column_slice(emb.data()))
                .as_slice()
                .to_vec(),
        };
        if self.noise_std > 0.0 {
            for v in &mut y {
                *v += self.noise_std * rng.normal();
            }
        }
        Tensor::new(emb.shape(), y)
    }

    /// Zero-forcing estimate `(H^T H)^-1 H^T Y`.
    pub fn equalize(&self, y: &Tensor) -> Result<Tensor> {
        self.check_dim(y.len())?;
        match &self.fading {
            Fading::Awgn => Ok(y.clone()),
            Fading::Matrix { zero_forcing, .. } => Tensor::new(
                y.shape(),
                (zero_forcing * nalgebra::DVector::from_column_slice(y.data()))
                    .as_slice()
                    .to_vec(),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamId};

    fn rng(step: u32) -> RngStream {
        RngStream::new(11, StreamId::new(0, 0, step), Purpose::Test)
    }

    #[test]
    fn degenerate_std_returns_mean() {
        let mut r = rng(0);
        for mean in [7.5, 10.0] {
            let d = SnrDistribution::new(mean, 0.0).unwrap();
            assert_eq!(d.sample(&mut r), mean);
        }
    }

    #[test]
    fn invalid_distributions_rejected() {
        assert!(SnrDistribution::new(0.0, -1.0).is_err());
        assert!(SnrDistribution::with_clamp(30.0, 1.0, -5.0, 25.0).is_err());
    }

    #[test]
    fn truncated_gaussian_mean() {
        // Clamping (not rejection) puts the tail mass on the bounds; by
        // symmetry of [-2, 2] around 0 the expected value is exactly 0.
        let d = SnrDistribution::with_clamp(0.0, 1.0, -2.0, 2.0).unwrap();
        let mut r = rng(1);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| d.sample(&mut r)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "{mean}");
    }

    #[test]
    fn power_normalization() {
        let ones = Tensor::from_slice(&[1.0; 4]);
        assert_eq!(power_normalize(&ones).unwrap(), ones);
        let spike = Tensor::from_slice(&[2.0, 0.0, 0.0, 0.0]);
        assert_eq!(power_normalize(&spike).unwrap(), spike);
        assert_eq!(
            power_normalize(&Tensor::zeros(&[2])),
            Err(Error::DegenerateSignal)
        );
    }

    #[test]
    fn noise_std_at_zero_db_is_one() {
        assert_eq!(noise_std_for(0.0), 1.0);
        assert!((noise_std_for(10.0) - 10f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn identity_channel_without_noise() {
        let c = ChannelRealization::awgn(0.0).with_noise_std(0.0);
        let e = Tensor::from_slice(&[0.3, -1.2, 0.9]);
        let y = c.transmit(&e, &mut rng(2)).unwrap();
        assert_eq!(y, e);
        assert_eq!(c.equalize(&y).unwrap(), e);
    }

    #[test]
    fn scaled_identity_fading() {
        let h = DMatrix::from_diagonal_element(2, 2, 2.0);
        let c = ChannelRealization::with_fading(h, 0.0)
            .unwrap()
            .with_noise_std(0.0);
        let e = Tensor::from_slice(&[1.0, -1.0]);
        let y = c.transmit(&e, &mut rng(3)).unwrap();
        assert_eq!(y.data(), &[2.0, -2.0]);
        let r = c.equalize(&y).unwrap();
        assert!((r.data()[0] - 1.0).abs() < 1e-12 && (r.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_fading_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            ChannelRealization::with_fading(h, 0.0),
            Err(Error::ChannelSingular(_))
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let c = ChannelRealization::with_fading(DMatrix::identity(3, 3), 0.0).unwrap();
        assert!(matches!(
            c.transmit(&Tensor::from_slice(&[1.0, 2.0]), &mut rng(4)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn diagonal_fading_round_trip() {
        let mut r = rng(5);
        let c = ChannelRealization::diagonal_fading(8, 0.2, 1.5, 10.0, &mut r)
            .unwrap()
            .with_noise_std(0.0);
        let e = power_normalize(&Tensor::from_slice(&[
            1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0,
        ]))
        .unwrap();
        let back = c.equalize(&c.transmit(&e, &mut r).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(e.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
