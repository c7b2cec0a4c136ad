//! Frequency analysis of the tangent kernel along a line of samples.
//!
//! The kernel matrix of points on a 1-D line is close to Toeplitz for
//! translation-comparable kernels, so it compresses to a lag profile
//! `p(delta) = avg G_ij over |i - j| = delta` with little loss. The DFT of
//! that profile shows how much kernel mass sits at high frequencies, which
//! is what separates filter kernels from plain interpolation.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::grid::GridModel;
use crate::gtk::gtk_compute;

/// A sampling segment: `samples` uniformly spaced points from `start` to
/// `end` inclusive.
#[derive(Debug, Clone)]
pub struct LineSpec {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub samples: usize,
}

#[derive(Debug, Error)]
pub enum SpectrumError {
    #[error("sample count {0} must be even and at least 8")]
    BadSampleCount(usize),
    #[error("line endpoints are {line}-dimensional but the grid is {geometry}-dimensional")]
    DimMismatch { line: usize, geometry: usize },
    #[error("line endpoint has a non-finite coordinate")]
    NonFiniteEndpoint,
}

/// Spectral summary of the kernel along one line.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// The sampled coordinates, `samples` of them.
    pub positions: Vec<Vec<f64>>,
    /// Lag profile of the max-normalized kernel matrix, length `samples`.
    pub profile: Vec<f64>,
    /// DFT magnitudes of the profile, bins `0..=samples/2`.
    pub magnitudes: Vec<f64>,
    /// Share of spectral energy in bins strictly above `samples/8`.
    pub high_freq_fraction: f64,
}

/// `n` uniformly spaced points from `start` to `end` inclusive.
pub fn line_points(start: &[f64], end: &[f64], n: usize) -> Vec<Vec<f64>> {
    assert_eq!(start.len(), end.len());
    assert!(n >= 2);
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            start
                .iter()
                .zip(end)
                .map(|(a, b)| a + (b - a) * t)
                .collect()
        })
        .collect()
}

/// Average of the matrix entries at each index lag. Entry `delta` averages
/// `g[i][j]` over all pairs with `|i - j| = delta`.
pub fn symmetrized_profile(g: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let n = g.nrows();
    let mut profile = vec![0.0; n];
    for (delta, slot) in profile.iter_mut().enumerate() {
        let count = n - delta;
        let sum: f64 = (0..count).map(|i| g[(i + delta, i)]).sum();
        *slot = sum / count as f64;
    }
    profile
}

/// DFT magnitudes of a real signal, bins `0..=n/2`.
pub fn magnitude_spectrum(profile: &[f64]) -> Vec<f64> {
    let n = profile.len();
    let mut buf: Vec<Complex<f64>> = profile.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..=n / 2].iter().map(|c| c.norm()).collect()
}

/// Fraction of the energy (squared magnitude over the reported bins) lying
/// strictly above bin `n_s/8`. Zero when the spectrum is all zero.
pub fn high_freq_fraction(magnitudes: &[f64], n_s: usize) -> f64 {
    let cutoff = n_s as f64 / 8.0;
    let mut high = 0.0;
    let mut total = 0.0;
    for (bin, &m) in magnitudes.iter().enumerate() {
        let e = m * m;
        total += e;
        if bin as f64 > cutoff {
            high += e;
        }
    }
    if total > 0.0 {
        high / total
    } else {
        0.0
    }
}

/// Sample the kernel along a line and report its lag-profile spectrum.
///
/// The kernel matrix is normalized by its largest entry before profiling,
/// so reports from differently scaled kernels compare directly.
pub fn gtk_spectrum(model: &GridModel, line: &LineSpec) -> Result<SpectrumReport, SpectrumError> {
    if line.samples < 8 || line.samples % 2 != 0 {
        return Err(SpectrumError::BadSampleCount(line.samples));
    }
    let dim = model.geometry.dim();
    if line.start.len() != dim || line.end.len() != dim {
        return Err(SpectrumError::DimMismatch {
            line: line.start.len().max(line.end.len()),
            geometry: dim,
        });
    }
    if line
        .start
        .iter()
        .chain(&line.end)
        .any(|c| !c.is_finite())
    {
        return Err(SpectrumError::NonFiniteEndpoint);
    }
    let positions = line_points(&line.start, &line.end, line.samples);
    let gtk = gtk_compute(model, &positions);
    let mut g = gtk.matrix().clone();
    let max = g.max();
    if max > 0.0 {
        g /= max;
    }
    let profile = symmetrized_profile(&g);
    let magnitudes = magnitude_spectrum(&profile);
    let high_freq = high_freq_fraction(&magnitudes, line.samples);
    Ok(SpectrumReport {
        positions,
        profile,
        magnitudes,
        high_freq_fraction: high_freq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FeatureGrid, GridGeometry};
    use crate::kernel::{KernelSpec, MulFaParams};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook DFT, one output bin at a time. Slow on purpose: this is the
    /// reference the fast path is checked against.
    fn dft_magnitudes_reference(profile: &[f64]) -> Vec<f64> {
        let n = profile.len();
        (0..=n / 2)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (j, &v) in profile.iter().enumerate() {
                    let angle = -2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64;
                    re += v * angle.cos();
                    im += v * angle.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn line_points_hit_endpoints_uniformly() {
        let pts = line_points(&[0.0, 1.0], &[1.0, 0.0], 5);
        assert_eq!(pts.len(), 5);
        assert_eq!(pts[0], vec![0.0, 1.0]);
        assert_eq!(pts[4], vec![1.0, 0.0]);
        assert_eq!(pts[2], vec![0.5, 0.5]);
        for w in pts.windows(2) {
            assert!((w[1][0] - w[0][0] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn profile_of_banded_matrix_by_hand() {
        let g = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.5, 0.0, 0.0, //
                0.5, 1.0, 0.5, 0.0, //
                0.0, 0.5, 1.0, 0.5, //
                0.0, 0.0, 0.5, 1.0,
            ],
        );
        assert_eq!(symmetrized_profile(&g), vec![1.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn fast_dft_matches_reference_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [8, 12, 100] {
            let profile: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = magnitude_spectrum(&profile);
            let slow = dft_magnitudes_reference(&profile);
            assert_eq!(fast.len(), n / 2 + 1);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn constant_kernel_is_all_dc() {
        // Degenerate segment: every sample is the same point, so the kernel
        // matrix is constant and all spectral energy sits in bin 0.
        let g = GridGeometry::regular(vec![4]).unwrap();
        let model =
            GridModel::new(g, KernelSpec::Multilinear, FeatureGrid::zeros(4, 1)).unwrap();
        let line = LineSpec {
            start: vec![0.4],
            end: vec![0.4],
            samples: 16,
        };
        let report = gtk_spectrum(&model, &line).unwrap();
        assert!(report.profile.iter().all(|&p| (p - 1.0).abs() < 1e-12));
        assert!(report.magnitudes[0] > 0.0);
        for &m in &report.magnitudes[1..] {
            assert!(m < 1e-10, "non-DC bin should be empty, got {m}");
        }
        assert_eq!(report.high_freq_fraction, 0.0);
    }

    #[test]
    fn filter_kernel_spectrum_is_wider_than_interpolation() {
        // Zero-centered parameter draw: full node contrast, the setting
        // where the filter kernel's spectral character shows. The biased
        // draw used for training starts near-uniform and does not.
        let geometry = GridGeometry::regular(vec![16]).unwrap();
        let line = LineSpec {
            start: vec![0.02],
            end: vec![0.98],
            samples: 100,
        };
        let plain = GridModel::new(
            geometry.clone(),
            KernelSpec::Multilinear,
            FeatureGrid::zeros(16, 1),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let params = MulFaParams::init_centered(1, 8, 2, 8, &mut rng);
        let filtered = GridModel::new(
            geometry,
            KernelSpec::MulFa(params),
            FeatureGrid::zeros(16, 1),
        )
        .unwrap();
        let f_plain = gtk_spectrum(&plain, &line).unwrap().high_freq_fraction;
        let f_filtered = gtk_spectrum(&filtered, &line).unwrap().high_freq_fraction;
        assert!(
            f_filtered > f_plain,
            "filter kernel {f_filtered} vs interpolation {f_plain}"
        );
    }

    #[test]
    fn rejects_odd_or_tiny_sample_counts() {
        let g = GridGeometry::regular(vec![4]).unwrap();
        let model =
            GridModel::new(g, KernelSpec::Multilinear, FeatureGrid::zeros(4, 1)).unwrap();
        for samples in [0, 4, 7, 9, 15] {
            let line = LineSpec {
                start: vec![0.0],
                end: vec![1.0],
                samples,
            };
            assert!(matches!(
                gtk_spectrum(&model, &line),
                Err(SpectrumError::BadSampleCount(_))
            ));
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let g = GridGeometry::regular(vec![4, 4]).unwrap();
        let model =
            GridModel::new(g, KernelSpec::Multilinear, FeatureGrid::zeros(16, 1)).unwrap();
        let line = LineSpec {
            start: vec![0.0],
            end: vec![1.0],
            samples: 16,
        };
        assert!(matches!(
            gtk_spectrum(&model, &line),
            Err(SpectrumError::DimMismatch { .. })
        ));
    }

    #[test]
    fn energy_fraction_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let profile: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mags = magnitude_spectrum(&profile);
            let f = high_freq_fraction(&mags, 24);
            assert!((0.0..=1.0).contains(&f), "fraction {f}");
        }
        assert_eq!(high_freq_fraction(&[0.0, 0.0, 0.0], 4), 0.0);
    }
}

