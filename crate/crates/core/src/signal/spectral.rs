use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Per-patch prediction targets: the wave itself and its one-sided Fourier
/// amplitude and phase.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectroTarget {
    pub wave: Vec<f64>,
    /// `|X[k]|` for `k = 0..=P/2`, not doubled.
    pub amplitude: Vec<f64>,
    /// `atan2(Im X[k], Re X[k])` in `(-pi, pi]`.
    pub phase: Vec<f64>,
}

pub fn num_freq_bins(patch_len: usize) -> usize {
    patch_len / 2 + 1
}

/// Computes [`SpectroTarget`] for one patch (`P >= 2`).
pub fn fft_components(patch: &[f64]) -> SpectroTarget {
    let mut planner = FftPlanner::<f64>::new();
    fft_components_with(&mut planner, patch)
}

/// As [`fft_components`], reusing a planner across calls.
pub fn fft_components_with(planner: &mut FftPlanner<f64>, patch: &[f64]) -> SpectroTarget {
    let p = patch.len();
    let fft = planner.plan_fft_forward(p);
    let mut buf: Vec<Complex<f64>> = patch.iter().map(|v| Complex::new(*v, 0.0)).collect();
    fft.process(&mut buf);
    let k = num_freq_bins(p);
    let amplitude = buf[..k].iter().map(|z| z.norm()).collect();
    let phase = buf[..k]
        .iter()
        .map(|z| {
            let a = z.im.atan2(z.re);
            // atan2 yields -pi for (-x, -0.0); fold onto the closed end
            if a <= -std::f64::consts::PI {
                std::f64::consts::PI
            } else {
                a
            }
        })
        .collect();
    SpectroTarget {
        wave: patch.to_vec(),
        amplitude,
        phase,
    }
}

/// Energy of the two-sided spectrum rebuilt from one-sided amplitudes,
/// divided by `P` (equals the time-domain energy by Parseval).
pub fn parseval_energy(amplitude: &[f64], patch_len: usize) -> f64 {
    let mut total = 0.0;
    for (k, a) in amplitude.iter().enumerate() {
        let mirrored = k != 0 && !(patch_len % 2 == 0 && k == patch_len / 2);
        total += a * a * if mirrored { 2.0 } else { 1.0 };
    }
    total / patch_len as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn brute_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let p = x.len();
        (0..p)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (n, v) in x.iter().enumerate() {
                    let w = -2.0 * PI * (k * n % p) as f64 / p as f64;
                    re += v * w.cos();
                    im += v * w.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn constant_patch() {
        let t = fft_components(&[0.7; 25]);
        assert_eq!(t.amplitude.len(), 13);
        assert!((t.amplitude[0] - 25.0 * 0.7).abs() < 1e-9);
        assert!(t.amplitude[1..].iter().all(|a| *a < 1e-9));
    }

    #[test]
    fn cosine_and_sine_bins() {
        let p = 25;
        let c: Vec<f64> = (0..p).map(|n| (2.0 * PI * 3.0 * n as f64 / p as f64).cos()).collect();
        let t = fft_components(&c);
        for (k, a) in t.amplitude.iter().enumerate() {
            if k == 3 {
                assert!((a - 12.5).abs() < 1e-9);
            } else {
                assert!(*a <= 1e-9);
            }
        }
        let s: Vec<f64> = (0..p).map(|n| (2.0 * PI * 3.0 * n as f64 / p as f64).sin()).collect();
        let t = fft_components(&s);
        assert!((t.phase[3] + PI / 2.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn matches_brute_force(x in proptest::collection::vec(-5.0f64..5.0, 2..64)) {
            let t = fft_components(&x);
            let dft = brute_dft(&x);
            for k in 0..t.amplitude.len() {
                let (re, im) = dft[k];
                let amp = (re * re + im * im).sqrt();
                prop_assert!((t.amplitude[k] - amp).abs() < 1e-9);
                prop_assert!(t.amplitude[k] >= 0.0);
                prop_assert!(t.phase[k] > -PI && t.phase[k] <= PI);
                // compare phase through the complex value to avoid wrap issues
                let (zr, zi) = (t.amplitude[k] * t.phase[k].cos(), t.amplitude[k] * t.phase[k].sin());
                prop_assert!((zr - re).abs() < 1e-9 && (zi - im).abs() < 1e-9);
            }
            let energy: f64 = x.iter().map(|v| v * v).sum();
            let spec = parseval_energy(&t.amplitude, x.len());
            prop_assert!((energy - spec).abs() <= 1e-6 * energy.max(1e-12));
        }
    }
}
