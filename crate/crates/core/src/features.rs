//! Waveform to log-mel spectrogram conversion and masking-based
//! augmentation.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// All waveforms in this crate are fixed at this rate.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mel energies below this are clamped before the log, so silence maps
/// to `ln(LOG_FLOOR)` instead of negative infinity.
pub const LOG_FLOOR: f64 = 1e-10;

/// Log-mel feature matrix, row-major by frame: `values[t * bins + m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<S: Scalar> {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<S>,
}

impl<S: Scalar> MelSpectrogram<S> {
    pub fn new(frames: usize, bins: usize, values: Vec<S>) -> Self {
        assert!(frames >= 1 && bins >= 1, "spectrogram must be at least 1x1");
        assert_eq!(
            values.len(),
            frames * bins,
            "spectrogram: {} values do not fill {frames}x{bins}",
            values.len()
        );
        MelSpectrogram { frames, bins, values }
    }

    pub fn at(&self, t: usize, m: usize) -> S {
        self.values[t * self.bins + m]
    }

    /// Mean 0, variance 1 across all entries of this utterance. The
    /// standard deviation is floored at 1e-10 so constant inputs map
    /// to all zeros.
    pub fn normalized(&self) -> Self {
        let n = S::of(self.values.len() as f64);
        let mean = self.values.iter().copied().sum::<S>() / n;
        let var = self
            .values
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<S>()
            / n;
        let std = var.sqrt().max(S::of(1e-10));
        let values = self.values.iter().map(|&v| (v - mean) / std).collect();
        MelSpectrogram::new(self.frames, self.bins, values)
    }
}

/// Masking plan for one augmented view. Widths are upper bounds; each
/// applied mask draws its width uniformly from `[0, max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub n_time_masks: usize,
    pub max_time_mask_width: usize,
    pub n_freq_masks: usize,
    pub max_freq_mask_width: usize,
    pub mask_value: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            n_time_masks: 2,
            max_time_mask_width: 10,
            n_freq_masks: 2,
            max_freq_mask_width: 8,
            mask_value: 0.0,
        }
    }
}

impl AugmentPolicy {
    pub fn no_op() -> Self {
        AugmentPolicy {
            n_time_masks: 0,
            max_time_mask_width: 0,
            n_freq_masks: 0,
            max_freq_mask_width: 0,
            mask_value: 0.0,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank, `n_mels` rows of `n_bins` weights over the
/// one-sided spectrum of an `n_fft`-point transform.
fn mel_filterbank(n_mels: usize, n_fft: usize) -> Vec<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut bank = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * SAMPLE_RATE as f64 / n_fft as f64;
            let w = ((f - lo) / (center - lo)).min((hi - f) / (hi - center));
            if w > 0.0 {
                bank[m * n_bins + k] = w;
            }
        }
    }
    bank
}

/// Log-mel spectrogram of a 16 kHz waveform: Hann-windowed frames,
/// magnitude spectrum, triangular mel filterbank, natural log clamped
/// at [`LOG_FLOOR`]. Frame count is `1 + (len - frame_len) / hop`.
pub fn mel_spectrogram<S: Scalar>(
    waveform: &[S],
    n_mels: usize,
    frame_len: usize,
    hop: usize,
) -> Result<MelSpectrogram<S>> {
    assert!(n_mels >= 1, "mel_spectrogram: n_mels must be at least 1");
    assert!(frame_len >= 2 && hop >= 1, "mel_spectrogram: degenerate framing");
    if waveform.len() < frame_len {
        return Err(Error::data(format!(
            "waveform of {} samples is shorter than one {frame_len}-sample frame",
            waveform.len()
        )));
    }
    let frames = 1 + (waveform.len() - frame_len) / hop;
    let n_bins = frame_len / 2 + 1;
    let bank = mel_filterbank(n_mels, frame_len);
    let window: Vec<f64> = (0..frame_len)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / frame_len as f64).cos()))
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(frame_len);
    let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
    let mut mags = vec![0.0; n_bins];
    let mut values = Vec::with_capacity(frames * n_mels);
    for t in 0..frames {
        for n in 0..frame_len {
            let s = waveform[t * hop + n].to_f64_value();
            buf[n] = Complex::new(s * window[n], 0.0);
        }
        fft.process(&mut buf);
        for (k, m) in mags.iter_mut().enumerate() {
            *m = buf[k].norm();
        }
        for m in 0..n_mels {
            let row = &bank[m * n_bins..(m + 1) * n_bins];
            let energy: f64 = row.iter().zip(&mags).map(|(w, x)| w * x).sum();
            values.push(S::of(energy.max(LOG_FLOOR).ln()));
        }
    }
    Ok(MelSpectrogram::new(frames, n_mels, values))
}

/// Randomly masked copy of `spec`: `n_time_masks` contiguous frame
/// ranges and `n_freq_masks` contiguous bin ranges set to
/// `mask_value`, everything else untouched.
///
/// The draw order (time masks before frequency masks; per mask a width,
/// then a start only when the width is nonzero) is part of the
/// reproducibility contract and must not be reordered.
pub fn spec_augment<S: Scalar>(
    spec: &MelSpectrogram<S>,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
) -> MelSpectrogram<S> {
    let mut out = spec.clone();
    let mask = S::of(policy.mask_value);
    // Upper bounds wider than the spectrogram are cut to dim - 1 so a
    // short utterance can never be blanked out entirely.
    let max_t = policy.max_time_mask_width.min(spec.frames - 1);
    for _ in 0..policy.n_time_masks {
        let w = rng.random_range(0..=max_t);
        if w == 0 {
            continue;
        }
        let start = rng.random_range(0..=spec.frames - w);
        for t in start..start + w {
            for m in 0..spec.bins {
                out.values[t * spec.bins + m] = mask;
            }
        }
    }
    let max_f = policy.max_freq_mask_width.min(spec.bins - 1);
    for _ in 0..policy.n_freq_masks {
        let w = rng.random_range(0..=max_f);
        if w == 0 {
            continue;
        }
        let start = rng.random_range(0..=spec.bins - w);
        for t in 0..spec.frames {
            for m in start..start + w {
                out.values[t * spec.bins + m] = mask;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect()
    }

    #[test]
    fn silence_maps_every_entry_to_log_floor() {
        let spec = mel_spectrogram(&vec![0.0f64; 4000], 80, 400, 160).unwrap();
        for &v in &spec.values {
            assert_eq!(v, LOG_FLOOR.ln());
        }
    }

    #[test]
    fn one_second_at_default_framing_gives_98_frames() {
        let spec = mel_spectrogram(&vec![0.1f64; 16000], 80, 400, 160).unwrap();
        assert_eq!(spec.frames, 98);
        assert_eq!(spec.bins, 80);
    }

    #[test]
    fn sine_at_band_center_peaks_in_that_band() {
        // Centers recomputed here from the HTK formulas, independently
        // of the filterbank construction.
        let n_mels = 80;
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let top = mel(8000.0);
        let band = 40;
        let center = hz(top * (band + 1) as f64 / (n_mels + 1) as f64);
        let spec = mel_spectrogram(&sine(center, 16000), n_mels, 400, 160).unwrap();
        let mut mean = vec![0.0; n_mels];
        for t in 0..spec.frames {
            for m in 0..n_mels {
                mean[m] += spec.at(t, m);
            }
        }
        let argmax = mean
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, band, "peak landed in band {argmax}");
    }

    #[test]
    fn short_waveform_is_a_data_error() {
        let err = mel_spectrogram(&vec![0.0f64; 399], 80, 400, 160).unwrap_err();
        assert!(matches!(err, crate::Error::Data(_)), "got {err}");
    }

    #[test]
    fn normalized_has_zero_mean_unit_variance() {
        let spec = mel_spectrogram(&sine(440.0, 8000), 40, 400, 160)
            .unwrap()
            .normalized();
        let n = spec.values.len() as f64;
        let mean: f64 = spec.values.iter().sum::<f64>() / n;
        let var: f64 = spec.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    fn ramp_spec(frames: usize, bins: usize) -> MelSpectrogram<f64> {
        let values = (0..frames * bins).map(|i| 1.0 + i as f64).collect();
        MelSpectrogram::new(frames, bins, values)
    }

    #[test]
    fn no_op_policy_returns_identical_values() {
        let spec = ramp_spec(30, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = spec_augment(&spec, &AugmentPolicy::no_op(), &mut rng);
        assert_eq!(out.values, spec.values);
    }

    #[test]
    fn single_time_mask_blanks_whole_frames() {
        let spec = ramp_spec(40, 8);
        let policy = AugmentPolicy {
            n_time_masks: 1,
            max_time_mask_width: 10,
            n_freq_masks: 0,
            max_freq_mask_width: 0,
            mask_value: -1000.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = spec_augment(&spec, &policy, &mut rng);
        let changed: Vec<usize> = (0..spec.values.len())
            .filter(|&i| out.values[i] != spec.values[i])
            .collect();
        assert!(!changed.is_empty(), "seed 3 drew a zero-width mask; pick another");
        let rows: std::collections::BTreeSet<usize> =
            changed.iter().map(|i| i / spec.bins).collect();
        // Whole contiguous frames, each fully set to the mask value.
        assert_eq!(changed.len(), rows.len() * spec.bins);
        let (first, last) = (*rows.first().unwrap(), *rows.last().unwrap());
        assert_eq!(last - first + 1, rows.len());
        assert!(rows.len() <= policy.max_time_mask_width);
        for &i in &changed {
            assert_eq!(out.values[i], policy.mask_value);
        }
    }

    #[test]
    fn same_seed_gives_identical_augmentation() {
        let spec = ramp_spec(50, 16);
        let policy = AugmentPolicy::default();
        let a = spec_augment(&spec, &policy, &mut ChaCha8Rng::seed_from_u64(11));
        let b = spec_augment(&spec, &policy, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn oversized_mask_bounds_are_cut_to_fit() {
        let spec = ramp_spec(4, 3);
        let policy = AugmentPolicy {
            n_time_masks: 1,
            max_time_mask_width: 100,
            n_freq_masks: 1,
            max_freq_mask_width: 100,
            mask_value: 0.0,
        };
        let out = spec_augment(&spec, &policy, &mut ChaCha8Rng::seed_from_u64(5));
        // At least one frame and one bin always survive.
        let live_rows = (0..4).filter(|&t| (0..3).any(|m| out.at(t, m) != 0.0)).count();
        assert!(live_rows >= 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn augment_only_writes_mask_value_inside_rectangles(
            frames in 8usize..40,
            bins in 4usize..20,
            n_t in 0usize..3,
            max_t in 0usize..6,
            n_f in 0usize..3,
            max_f in 0usize..5,
            seed in 0u64..1000,
        ) {
            let spec = ramp_spec(frames, bins);
            let policy = AugmentPolicy {
                n_time_masks: n_t,
                max_time_mask_width: max_t,
                n_freq_masks: n_f,
                max_freq_mask_width: max_f,
                mask_value: -500.0,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = spec_augment(&spec, &policy, &mut rng);
            prop_assert_eq!(out.frames, spec.frames);
            prop_assert_eq!(out.bins, spec.bins);
            // Every change is the mask value, inside a fully masked row
            // or a fully masked column.
            let row_masked: Vec<bool> = (0..frames)
                .map(|t| (0..bins).all(|m| out.at(t, m) == -500.0))
                .collect();
            let col_masked: Vec<bool> = (0..bins)
                .map(|m| (0..frames).all(|t| out.at(t, m) == -500.0))
                .collect();
            let masked_rows = row_masked.iter().filter(|&&b| b).count();
            let masked_cols = col_masked.iter().filter(|&&b| b).count();
            // Width budgets. A row can only be pinned on the time masks
            // when the frequency masks left some column open, and vice
            // versa; otherwise the full grid is masked either way.
            if masked_cols < bins {
                prop_assert!(masked_rows <= n_t * max_t.min(frames - 1));
            }
            if masked_rows < frames {
                prop_assert!(masked_cols <= n_f * max_f.min(bins - 1));
            }
            for t in 0..frames {
                for m in 0..bins {
                    if out.at(t, m) != spec.at(t, m) {
                        prop_assert_eq!(out.at(t, m), -500.0);
                        prop_assert!(row_masked[t] || col_masked[m],
                            "stray change at ({}, {})", t, m);
                    }
                }
            }
        }
    }
}
