//! MFCC feature maps: 26 mel filterbank coefficients by 99 frames per
//! 1 s window.
//!
//! The pipeline per frame: Hamming window, power spectrum (FFT 512),
//! 26 triangular mel filters spanning 0-600 Hz, floored log, orthonormal
//! DCT-II. Frames are 432 samples (216 ms) advancing by 16 samples
//! (8 ms), which tiles a 2000-sample window into exactly 99 frames and
//! is long enough that every filter in the crowded low-mel region owns
//! at least one spectral bin.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::Fft;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CANONICAL_RATE_HZ};
use crate::error::{Error, Result};

/// Coefficients per frame (also the mel filter count).
pub const N_COEFFS: usize = 26;
/// Frames per 1 s window.
pub const FRAME_COLS: usize = 99;
/// Samples per frame at the canonical rate.
pub const FRAME_LEN: usize = 432;
/// Frame advance in samples.
pub const FRAME_HOP: usize = 16;
/// FFT length (next power of two above the frame length).
pub const N_FFT: usize = 512;
/// Filterbank band edges in Hz.
pub const F_MIN_HZ: f64 = 0.0;
pub const F_MAX_HZ: f64 = 600.0;
/// Energies are floored here before the log.
pub const LOG_FLOOR: f64 = 1e-10;
/// Standardization divides by at least this.
pub const STD_FLOOR: f64 = 1e-8;

/// Samples expected per window.
pub const WINDOW_SAMPLES: usize = CANONICAL_RATE_HZ as usize;

/// Mel scale: mel(f) = 2595 log10(1 + f/700).
pub fn mel_scale(f_hz: f64) -> Result<f64> {
    if !(f_hz >= 0.0) {
        return Err(Error::Argument(format!("mel scale needs f >= 0, got {f_hz}")));
    }
    Ok(2595.0 * (1.0 + f_hz / 700.0).log10())
}

/// Inverse mel scale.
pub fn mel_inverse(mel: f64) -> Result<f64> {
    if !(mel >= 0.0) {
        return Err(Error::Argument(format!("inverse mel needs m >= 0, got {mel}")));
    }
    Ok(700.0 * (10f64.powf(mel / 2595.0) - 1.0))
}

/// A 26x99 coefficient-by-frame map, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// Identifier of the window this map came from.
    pub source: String,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn from_values(source: String, values: Vec<f32>) -> Result<Self> {
        if values.len() != N_COEFFS * FRAME_COLS {
            return Err(Error::shape(
                format!("{N_COEFFS}x{FRAME_COLS} values"),
                format!("{} values", values.len()),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Format(format!("feature map {source} has non-finite entries")));
        }
        Ok(FeatureMap { source, values })
    }

    pub fn rows(&self) -> usize {
        N_COEFFS
    }

    pub fn cols(&self) -> usize {
        FRAME_COLS
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * FRAME_COLS + col]
    }
}

/// Per-coefficient standardization statistics, estimated on training
/// folds only and carried inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Identity transform (mean 0, std 1).
    pub fn identity() -> Self {
        FeatureStats { mean: vec![0.0; N_COEFFS], std: vec![1.0; N_COEFFS] }
    }

    /// Estimates per-row mean and population std over every frame of
    /// every map.
    pub fn fit(maps: &[FeatureMap]) -> Result<Self> {
        Self::fit_refs(&maps.iter().collect::<Vec<_>>())
    }

    /// `fit` over borrowed maps, for callers holding references into a
    /// larger collection.
    pub fn fit_refs(maps: &[&FeatureMap]) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::EmptyInput("cannot fit feature stats on no maps".into()));
        }
        let n = (maps.len() * FRAME_COLS) as f64;
        let mut mean = vec![0.0f64; N_COEFFS];
        let mut sq = vec![0.0f64; N_COEFFS];
        for map in maps {
            for r in 0..N_COEFFS {
                for c in 0..FRAME_COLS {
                    let v = f64::from(map.get(r, c));
                    mean[r] += v;
                    sq[r] += v * v;
                }
            }
        }
        let mut std = vec![0.0f64; N_COEFFS];
        for r in 0..N_COEFFS {
            mean[r] /= n;
            std[r] = (sq[r] / n - mean[r] * mean[r]).max(0.0).sqrt();
        }
        Ok(FeatureStats { mean, std })
    }

    /// Applies (x - mean) / max(std, floor) per coefficient row.
    pub fn apply(&self, map: &FeatureMap) -> Result<FeatureMap> {
        if self.mean.len() != N_COEFFS || self.std.len() != N_COEFFS {
            return Err(Error::shape(
                format!("{N_COEFFS} per-row stats"),
                format!("{}/{}", self.mean.len(), self.std.len()),
            ));
        }
        let mut out = Vec::with_capacity(map.values.len());
        for r in 0..N_COEFFS {
            let inv = 1.0 / self.std[r].max(STD_FLOOR);
            for c in 0..FRAME_COLS {
                out.push(((f64::from(map.get(r, c)) - self.mean[r]) * inv) as f32);
            }
        }
        FeatureMap::from_values(map.source.clone(), out)
    }
}

/// Shared read-only extractor: window, filterbank, DCT basis, FFT plan.
pub struct FeatureExtractor {
    hamming: Vec<f64>,
    /// Sparse triangular filters: per filter, (fft bin, weight).
    filters: Vec<Vec<(usize, f64)>>,
    centers_hz: Vec<f64>,
    /// Orthonormal DCT-II basis, row k = basis for coefficient k.
    dct: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let hamming: Vec<f64> = (0..FRAME_LEN)
            .map(|n| {
                0.54 - 0.46
                    * (2.0 * std::f64::consts::PI * n as f64 / (FRAME_LEN - 1) as f64).cos()
            })
            .collect();

        // 28 edges linear in mel: filter i spans edges [i, i+2] and
        // peaks at edge i+1, so adjacent triangles cross at half height.
        let mel_hi = mel_scale(F_MAX_HZ).expect("static band edge");
        let edges_mel: Vec<f64> =
            (0..N_COEFFS + 2).map(|j| mel_hi * j as f64 / (N_COEFFS + 1) as f64).collect();
        let bin_hz = f64::from(CANONICAL_RATE_HZ) / N_FFT as f64;
        let mut filters = Vec::with_capacity(N_COEFFS);
        let mut centers_hz = Vec::with_capacity(N_COEFFS);
        for i in 0..N_COEFFS {
            let (lo, mid, hi) = (edges_mel[i], edges_mel[i + 1], edges_mel[i + 2]);
            centers_hz.push(mel_inverse(mid).expect("static center"));
            let mut taps = Vec::new();
            for b in 0..=N_FFT / 2 {
                let m = mel_scale(b as f64 * bin_hz).expect("bin freq >= 0");
                let w = if m >= lo && m <= mid && mid > lo {
                    (m - lo) / (mid - lo)
                } else if m > mid && m <= hi && hi > mid {
                    (hi - m) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    taps.push((b, w));
                }
            }
            filters.push(taps);
        }

        let scale0 = (1.0 / N_COEFFS as f64).sqrt();
        let scale = (2.0 / N_COEFFS as f64).sqrt();
        let mut dct = vec![0.0; N_COEFFS * N_COEFFS];
        for k in 0..N_COEFFS {
            for n in 0..N_COEFFS {
                let a = if k == 0 { scale0 } else { scale };
                dct[k * N_COEFFS + n] = a
                    * (std::f64::consts::PI * k as f64 * (2 * n + 1) as f64
                        / (2.0 * N_COEFFS as f64))
                        .cos();
            }
        }

        let fft = rustfft::FftPlanner::new().plan_fft_forward(N_FFT);
        FeatureExtractor { hamming, filters, centers_hz, dct, fft }
    }

    /// Peak frequencies of the 26 filters, in Hz.
    pub fn center_frequencies_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    fn check_window(samples: &[f64]) -> Result<()> {
        if samples.len() != WINDOW_SAMPLES {
            return Err(Error::shape(
                format!("{WINDOW_SAMPLES} samples"),
                format!("{} samples", samples.len()),
            ));
        }
        Ok(())
    }

    /// Splits a window into 99 Hamming-windowed frames. Frame t covers
    /// samples [16t, 16t + 432).
    pub fn frame_signal(&self, samples: &[f64]) -> Result<Vec<Vec<f64>>> {
        Self::check_window(samples)?;
        Ok((0..FRAME_COLS)
            .map(|t| {
                let start = t * FRAME_HOP;
                samples[start..start + FRAME_LEN]
                    .iter()
                    .zip(&self.hamming)
                    .map(|(s, w)| s * w)
                    .collect()
            })
            .collect())
    }

    fn frame_power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(N_FFT)
            .collect();
        self.fft.process(&mut buf);
        buf[..=N_FFT / 2].iter().map(|c| c.norm_sqr()).collect()
    }

    /// Raw (pre-log) filterbank energies, one 26-vector per frame.
    pub fn filter_energies(&self, samples: &[f64]) -> Result<Vec<Vec<f64>>> {
        let frames = self.frame_signal(samples)?;
        Ok(frames
            .iter()
            .map(|frame| {
                let power = self.frame_power_spectrum(frame);
                self.filters
                    .iter()
                    .map(|taps| taps.iter().map(|&(b, w)| w * power[b]).sum())
                    .collect()
            })
            .collect())
    }

    /// Full MFCC map for one window.
    pub fn extract_labeled(&self, samples: &[f64], source: String) -> Result<FeatureMap> {
        let energies = self.filter_energies(samples)?;
        let mut values = vec![0.0f32; N_COEFFS * FRAME_COLS];
        let mut log_e = [0.0f64; N_COEFFS];
        for (t, frame_e) in energies.iter().enumerate() {
            for (le, e) in log_e.iter_mut().zip(frame_e) {
                *le = e.max(LOG_FLOOR).ln();
            }
            for k in 0..N_COEFFS {
                let row = &self.dct[k * N_COEFFS..(k + 1) * N_COEFFS];
                let c: f64 = row.iter().zip(&log_e).map(|(d, l)| d * l).sum();
                values[k * FRAME_COLS + t] = c as f32;
            }
        }
        FeatureMap::from_values(source, values)
    }

    pub fn extract(&self, samples: &[f64]) -> Result<FeatureMap> {
        self.extract_labeled(samples, String::new())
    }
}

const CACHE_DTYPE_TAG: &[u8; 4] = b"f32<";

/// Writes a map as `u32 rows, u32 cols, dtype tag, row-major f32 LE`.
pub fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut out = Vec::with_capacity(12 + map.values.len() * 4);
    out.extend_from_slice(&(map.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(map.cols() as u32).to_le_bytes());
    out.extend_from_slice(CACHE_DTYPE_TAG);
    for v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a feature cache file written by [`write_feature_map`].
pub fn read_feature_map(path: &Path, source: String) -> Result<FeatureMap> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    let rows = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    if &header[8..12] != CACHE_DTYPE_TAG {
        return Err(Error::Format(format!("{}: unknown dtype tag", path.display())));
    }
    if rows != N_COEFFS || cols != FRAME_COLS {
        return Err(Error::shape(
            format!("{N_COEFFS}x{FRAME_COLS}"),
            format!("{rows}x{cols}"),
        ));
    }
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() != rows * cols * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} data bytes, found {}",
            path.display(),
            rows * cols * 4,
            raw.len()
        )));
    }
    let values: Vec<f32> =
        raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    FeatureMap::from_values(source, values)
}

/// Extracts and caches features for every instance of a domain,
/// recording paths in the instance list. Returns the number of maps
/// computed (cached maps are skipped unless `overwrite`).
pub fn extract_domain(corpus: &mut Corpus, domain_id: &str, overwrite: bool) -> Result<usize> {
    let extractor = FeatureExtractor::new();
    let root = corpus.root.clone();
    let dom = corpus.domain(domain_id)?.clone();
    let feat_dir = root.join(domain_id).join("features");
    fs::create_dir_all(&feat_dir)?;

    let mut instances = dom.instances.clone();
    let mut written = 0usize;
    for row in instances.iter_mut() {
        let stem = crate::corpus::store::window_stem(&row.record_id, row.window_start_s);
        let rel = format!("{domain_id}/features/{stem}.f32");
        let abs = root.join(&rel);
        if !overwrite && row.feature_path.as_deref() == Some(rel.as_str()) && abs.exists() {
            continue;
        }
        let samples = corpus.load_window_samples(row)?;
        let map = extractor.extract_labeled(&samples, stem)?;
        write_feature_map(&abs, &map)?;
        row.feature_path = Some(rel);
        written += 1;
    }
    crate::corpus::store::save_instances(&root, domain_id, &instances)?;
    corpus
        .domains
        .get_mut(domain_id)
        .expect("domain existence checked above")
        .instances = instances;
    Ok(written)
}

/// Loads the cached feature map behind an instance row.
pub fn load_instance_features(corpus: &Corpus, row: &crate::corpus::InstanceRow) -> Result<FeatureMap> {
    let rel = row.feature_path.as_deref().ok_or_else(|| {
        Error::State(format!(
            "no cached features for {} at {:.3} s; run `biodg features extract` first",
            row.record_id, row.window_start_s
        ))
    })?;
    let stem = crate::corpus::store::window_stem(&row.record_id, row.window_start_s);
    read_feature_map(&corpus.root.join(rel), stem)
}
