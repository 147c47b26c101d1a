//! Synthetic multi-domain heart-sound generator.
//!
//! Each record is a periodic train of two Gaussian-enveloped tone
//! bursts (the S1 and S2 sounds), plus, for the abnormal class, a
//! band-limited murmur noise bed sustained across the record. A domain
//! is a recording condition: it fixes the burst center frequencies, the
//! heart-rate range, the murmur band, a device coloration (low/high
//! shelf EQ), and a sensor noise floor. Everything is a pure function
//! of the configuration and seed, so a corpus regenerates bit-for-bit.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

use super::{ClassLabel, DomainRole, SignalRecord, CANONICAL_RATE_HZ};

/// Generator settings for one synthetic domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Heart-rate range in beats per minute, sampled per record.
    pub heart_rate_bpm: (f64, f64),
    /// Center frequency of the S1 burst in Hz.
    pub s1_center_hz: f64,
    /// Center frequency of the S2 burst in Hz.
    pub s2_center_hz: f64,
    /// Murmur noise band in Hz (abnormal records only).
    pub murmur_band_hz: (f64, f64),
    /// RMS amplitude of the murmur bed.
    pub murmur_gain: f64,
    /// Device coloration: low-shelf gain at 100 Hz, in dB.
    pub low_shelf_gain_db: f64,
    /// Device coloration: high-shelf gain at 300 Hz, in dB.
    pub high_shelf_gain_db: f64,
    /// Standard deviation of the additive sensor noise.
    pub noise_std: f64,
    pub n_normal_records: usize,
    pub n_abnormal_records: usize,
    pub record_duration_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            heart_rate_bpm: (60.0, 75.0),
            s1_center_hz: 60.0,
            s2_center_hz: 102.0,
            murmur_band_hz: (180.0, 250.0),
            murmur_gain: 0.35,
            low_shelf_gain_db: 0.0,
            high_shelf_gain_db: 0.0,
            noise_std: 0.01,
            n_normal_records: 7,
            n_abnormal_records: 7,
            record_duration_s: 8.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = f64::from(CANONICAL_RATE_HZ) / 2.0;
        let (hr_lo, hr_hi) = self.heart_rate_bpm;
        if !(hr_lo >= 20.0 && hr_hi <= 220.0 && hr_lo <= hr_hi) {
            return Err(Error::Config(format!(
                "heart rate range [{hr_lo}, {hr_hi}] bpm is implausible"
            )));
        }
        for (name, f) in [("s1", self.s1_center_hz), ("s2", self.s2_center_hz)] {
            if !(f > 0.0 && f < nyquist) {
                return Err(Error::Config(format!(
                    "{name} center {f} Hz is outside (0, {nyquist})"
                )));
            }
        }
        let (m_lo, m_hi) = self.murmur_band_hz;
        if !(m_lo > 0.0 && m_lo < m_hi && m_hi < nyquist) {
            return Err(Error::Config(format!(
                "murmur band [{m_lo}, {m_hi}] Hz is not a valid sub-Nyquist interval"
            )));
        }
        if !(self.murmur_gain >= 0.0 && self.murmur_gain.is_finite()) {
            return Err(Error::Config("murmur gain must be finite and non-negative".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise std must be finite and non-negative".into()));
        }
        if !self.low_shelf_gain_db.is_finite() || !self.high_shelf_gain_db.is_finite() {
            return Err(Error::Config("shelf gains must be finite".into()));
        }
        if self.n_normal_records == 0 || self.n_abnormal_records == 0 {
            return Err(Error::Config("each class needs at least one record".into()));
        }
        if !(self.record_duration_s >= 2.0 && self.record_duration_s.is_finite()) {
            return Err(Error::Config(format!(
                "record duration {} s is too short",
                self.record_duration_s
            )));
        }
        Ok(())
    }
}

/// A synthetic domain plus its windowing protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub role: DomainRole,
    pub window_shift_s: f64,
    pub trim_s: f64,
    pub synth: SynthConfig,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.domain_id.is_empty()
            || !self
                .domain_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(Error::Config(format!(
                "domain id {:?} must be non-empty and filesystem-safe",
                self.domain_id
            )));
        }
        if self.synth.record_duration_s < 2.0 * self.trim_s + super::WINDOW_S {
            return Err(Error::Config(format!(
                "duration {} s leaves no usable span after trimming {} s per end",
                self.synth.record_duration_s, self.trim_s
            )));
        }
        Ok(())
    }
}

/// A full synthetic corpus: several basis domains plus held-out ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub domains: Vec<DomainSpec>,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("corpus spec has no domains".into()));
        }
        let mut ids: Vec<&str> = self.domains.iter().map(|d| d.domain_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.domains.len() {
            return Err(Error::Config("duplicate domain ids in corpus spec".into()));
        }
        for d in &self.domains {
            d.validate()?;
        }
        Ok(())
    }

    /// The standard evaluation corpus: six basis domains sweeping burst
    /// frequency, heart rate, murmur band, coloration, and noise floor,
    /// plus two held-out domains. `unseen-overlap` sits inside the
    /// basis parameter span (near the last basis domain); `unseen-shifted`
    /// sits outside it on every axis.
    pub fn standard(master_seed: u64) -> CorpusSpec {
        let mut domains = Vec::new();
        for i in 0..6u64 {
            let fi = i as f64;
            let s1 = 45.0 + 25.0 * fi;
            let shelves = [(4.0, -3.0), (0.0, 0.0), (-4.0, 3.0)][(i % 3) as usize];
            domains.push(DomainSpec {
                domain_id: format!("basis{i}"),
                role: DomainRole::Basis,
                window_shift_s: 0.2,
                trim_s: 0.5,
                synth: SynthConfig {
                    seed: rng::derive(master_seed, &[tag::SYNTH, i]),
                    heart_rate_bpm: (55.0 + 8.0 * fi, 70.0 + 8.0 * fi),
                    s1_center_hz: s1,
                    s2_center_hz: 1.7 * s1,
                    murmur_band_hz: (150.0 + 60.0 * fi, 220.0 + 60.0 * fi),
                    murmur_gain: 0.35,
                    low_shelf_gain_db: shelves.0,
                    high_shelf_gain_db: shelves.1,
                    noise_std: 0.008 + 0.002 * fi,
                    n_normal_records: 7,
                    n_abnormal_records: 7,
                    record_duration_s: 8.0,
                },
            });
        }
        domains.push(DomainSpec {
            domain_id: "unseen-overlap".into(),
            role: DomainRole::Unseen,
            window_shift_s: 0.2,
            trim_s: 0.5,
            synth: SynthConfig {
                seed: rng::derive(master_seed, &[tag::SYNTH, 100]),
                heart_rate_bpm: (95.0, 110.0),
                s1_center_hz: 168.0,
                s2_center_hz: 285.6,
                murmur_band_hz: (455.0, 525.0),
                murmur_gain: 0.35,
                low_shelf_gain_db: 4.0,
                high_shelf_gain_db: -3.0,
                noise_std: 0.02,
                n_normal_records: 7,
                n_abnormal_records: 7,
                record_duration_s: 8.0,
            },
        });
        domains.push(DomainSpec {
            domain_id: "unseen-shifted".into(),
            role: DomainRole::Unseen,
            window_shift_s: 0.2,
            trim_s: 0.5,
            synth: SynthConfig {
                seed: rng::derive(master_seed, &[tag::SYNTH, 101]),
                heart_rate_bpm: (40.0, 50.0),
                s1_center_hz: 220.0,
                s2_center_hz: 374.0,
                murmur_band_hz: (520.0, 590.0),
                murmur_gain: 0.35,
                low_shelf_gain_db: 6.0,
                high_shelf_gain_db: -6.0,
                noise_std: 0.03,
                n_normal_records: 7,
                n_abnormal_records: 7,
                record_duration_s: 8.0,
            },
        });
        CorpusSpec { domains }
    }
}

/// RBJ-cookbook biquad shelving filter, direct form I.
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn shelf(f0_hz: f64, gain_db: f64, rate_hz: f64, high: bool) -> Biquad {
        let a = 10f64.powf(gain_db / 40.0);
        let w = 2.0 * std::f64::consts::PI * f0_hz / rate_hz;
        let (cw, sw) = (w.cos(), w.sin());
        let alpha = sw / 2.0 * std::f64::consts::SQRT_2;
        let two_rt = 2.0 * a.sqrt() * alpha;
        let (b0, b1, b2, a0, a1, a2) = if high {
            (
                a * ((a + 1.0) + (a - 1.0) * cw + two_rt),
                -2.0 * a * ((a - 1.0) + (a + 1.0) * cw),
                a * ((a + 1.0) + (a - 1.0) * cw - two_rt),
                (a + 1.0) - (a - 1.0) * cw + two_rt,
                2.0 * ((a - 1.0) - (a + 1.0) * cw),
                (a + 1.0) - (a - 1.0) * cw - two_rt,
            )
        } else {
            (
                a * ((a + 1.0) - (a - 1.0) * cw + two_rt),
                2.0 * a * ((a - 1.0) - (a + 1.0) * cw),
                a * ((a + 1.0) - (a - 1.0) * cw - two_rt),
                (a + 1.0) + (a - 1.0) * cw + two_rt,
                -2.0 * ((a - 1.0) + (a + 1.0) * cw),
                (a + 1.0) + (a - 1.0) * cw - two_rt,
            )
        };
        Biquad {
            b: [b0 / a0, b1 / a0, b2 / a0],
            a: [a1 / a0, a2 / a0],
        }
    }

    fn apply(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 =
                self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }
}

/// Adds a Gaussian-enveloped tone burst centered at `t_c` seconds.
fn add_burst(x: &mut [f64], rate: f64, t_c: f64, f_hz: f64, sigma_s: f64, amp: f64, phase: f64) {
    let lo = (((t_c - 4.0 * sigma_s) * rate).floor().max(0.0)) as usize;
    let hi = ((((t_c + 4.0 * sigma_s) * rate).ceil()) as usize).min(x.len());
    for (i, v) in x.iter_mut().enumerate().take(hi).skip(lo) {
        let dt = i as f64 / rate - t_c;
        let env = (-0.5 * (dt / sigma_s).powi(2)).exp();
        *v += amp * env * (2.0 * std::f64::consts::PI * f_hz * dt + phase).sin();
    }
}

/// Number of sinusoid components in the murmur bed.
const MURMUR_COMPONENTS: usize = 40;
const S1_SIGMA_S: f64 = 0.045;
const S2_SIGMA_S: f64 = 0.035;

fn synthesize_record(cfg: &SynthConfig, domain_id: &str, class: ClassLabel, idx: u64) -> SignalRecord {
    let class_tag = match class {
        ClassLabel::Normal => 0u64,
        ClassLabel::Abnormal => 1u64,
    };
    let mut rng = rng::stream(cfg.seed, &[tag::RECORD, class_tag, idx]);
    let rate = f64::from(CANONICAL_RATE_HZ);
    let n = (cfg.record_duration_s * rate).round() as usize;
    let mut x = vec![0.0f64; n];

    // Draw order is part of the format: heart rate, beat phase, then per
    // beat (amplitude jitter x2, timing jitter x2, carrier phase x2),
    // then murmur components, then per-sample noise.
    let hr = rng.gen_range(cfg.heart_rate_bpm.0..=cfg.heart_rate_bpm.1);
    let period = 60.0 / hr;
    let phase0 = rng.gen_range(0.0..period);
    let n_beats = (cfg.record_duration_s / period).ceil() as usize + 2;
    for k in 0..n_beats {
        let a1_j: f64 = rng.sample(StandardNormal);
        let a2_j: f64 = rng.sample(StandardNormal);
        let t1_j: f64 = rng.sample(StandardNormal);
        let t2_j: f64 = rng.sample(StandardNormal);
        let p1 = rng.gen_range(0.0..std::f64::consts::TAU);
        let p2 = rng.gen_range(0.0..std::f64::consts::TAU);
        // Start one period early so a partial beat can leak into t=0.
        let t1 = phase0 + (k as f64 - 1.0) * period + 0.005 * t1_j;
        let t2 = t1 + 0.35 * period + 0.005 * t2_j;
        add_burst(&mut x, rate, t1, cfg.s1_center_hz, S1_SIGMA_S, 0.75 * (1.0 + 0.08 * a1_j), p1);
        add_burst(&mut x, rate, t2, cfg.s2_center_hz, S2_SIGMA_S, 0.55 * (1.0 + 0.08 * a2_j), p2);
    }

    if class == ClassLabel::Abnormal {
        // Equal-amplitude random sinusoids approximate Gaussian band
        // noise; the scale makes murmur_gain the RMS of the bed.
        let comp_amp = cfg.murmur_gain * (2.0 / MURMUR_COMPONENTS as f64).sqrt();
        let comps: Vec<(f64, f64)> = (0..MURMUR_COMPONENTS)
            .map(|_| {
                let f = rng.gen_range(cfg.murmur_band_hz.0..cfg.murmur_band_hz.1);
                let p = rng.gen_range(0.0..std::f64::consts::TAU);
                (2.0 * std::f64::consts::PI * f / rate, p)
            })
            .collect();
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64;
            let mut m = 0.0;
            for &(w, p) in &comps {
                m += (w * t + p).sin();
            }
            *v += comp_amp * m;
        }
    }

    for v in x.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += cfg.noise_std * e;
    }

    Biquad::shelf(100.0, cfg.low_shelf_gain_db, rate, false).apply(&mut x);
    Biquad::shelf(300.0, cfg.high_shelf_gain_db, rate, true).apply(&mut x);

    // Rescale only when clipping would occur, so inter-domain level
    // differences survive quantization.
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.97 {
        let g = 0.97 / peak;
        for v in x.iter_mut() {
            *v *= g;
        }
    }

    let record_id = format!(
        "{domain_id}-{}{idx:02}",
        match class {
            ClassLabel::Normal => 'n',
            ClassLabel::Abnormal => 'a',
        }
    );
    SignalRecord {
        record_id,
        domain_id: domain_id.to_string(),
        class_label: class,
        sample_rate_hz: CANONICAL_RATE_HZ,
        samples: x,
        patient_id: None,
    }
}

/// Generates every record of a synthetic domain, normals first.
pub fn generate_records(cfg: &SynthConfig, domain_id: &str) -> Result<Vec<SignalRecord>> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.n_normal_records + cfg.n_abnormal_records);
    for i in 0..cfg.n_normal_records {
        records.push(synthesize_record(cfg, domain_id, ClassLabel::Normal, i as u64));
    }
    for i in 0..cfg.n_abnormal_records {
        records.push(synthesize_record(cfg, domain_id, ClassLabel::Abnormal, i as u64));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_records(&cfg, "d").unwrap();
        let b = generate_records(&cfg, "d").unwrap();
        assert_eq!(a.len(), b.len());
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.record_id, rb.record_id);
            assert_eq!(ra.samples, rb.samples);
        }
    }

    #[test]
    fn seeds_change_the_signal() {
        let cfg = SynthConfig::default();
        let mut cfg2 = cfg.clone();
        cfg2.seed = cfg.seed + 1;
        let a = generate_records(&cfg, "d").unwrap();
        let b = generate_records(&cfg2, "d").unwrap();
        assert_ne!(a[0].samples, b[0].samples);
    }

    #[test]
    fn records_are_in_range_and_correct_length() {
        let cfg = SynthConfig::default();
        for rec in generate_records(&cfg, "d").unwrap() {
            assert_eq!(rec.samples.len(), 16000);
            assert_eq!(rec.sample_rate_hz, CANONICAL_RATE_HZ);
            assert!(rec.samples.iter().all(|v| v.is_finite() && v.abs() <= 0.97 + 1e-9));
        }
    }

    #[test]
    fn abnormal_records_carry_band_energy_normals_lack() {
        // Goertzel power in the murmur band must separate the classes.
        let cfg = SynthConfig::default();
        let records = generate_records(&cfg, "d").unwrap();
        let band_mid = (cfg.murmur_band_hz.0 + cfg.murmur_band_hz.1) / 2.0;
        let power = |samples: &[f64]| -> f64 {
            let w = 2.0 * std::f64::consts::PI * band_mid / f64::from(CANONICAL_RATE_HZ);
            let (mut s1, mut s2) = (0.0f64, 0.0f64);
            for &v in samples {
                let s0 = v + 2.0 * w.cos() * s1 - s2;
                s2 = s1;
                s1 = s0;
            }
            s1 * s1 + s2 * s2 - 2.0 * w.cos() * s1 * s2
        };
        let normal_max = records
            .iter()
            .filter(|r| r.class_label == ClassLabel::Normal)
            .map(|r| power(&r.samples))
            .fold(0.0f64, f64::max);
        let abnormal_min = records
            .iter()
            .filter(|r| r.class_label == ClassLabel::Abnormal)
            .map(|r| power(&r.samples))
            .fold(f64::INFINITY, f64::min);
        assert!(
            abnormal_min > 4.0 * normal_max,
            "murmur band power: abnormal min {abnormal_min:.3e} vs normal max {normal_max:.3e}"
        );
    }

    #[test]
    fn zero_db_shelf_is_identity() {
        let mut x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let y = x.clone();
        Biquad::shelf(100.0, 0.0, 2000.0, false).apply(&mut x);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn low_shelf_boosts_low_band_only() {
        let rate = 2000.0;
        let n = 4000;
        let tone = |f: f64| -> Vec<f64> {
            (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / rate).sin()).collect()
        };
        let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        let shelf = Biquad::shelf(100.0, 6.0, rate, false);
        let mut low = tone(30.0);
        let mut high = tone(600.0);
        let (low_in, high_in) = (rms(&low), rms(&high));
        shelf.apply(&mut low);
        shelf.apply(&mut high);
        let low_gain_db = 20.0 * (rms(&low) / low_in).log10();
        let high_gain_db = 20.0 * (rms(&high) / high_in).log10();
        assert!(low_gain_db > 5.0, "low band gain {low_gain_db} dB");
        assert!(high_gain_db.abs() < 1.0, "high band gain {high_gain_db} dB");
    }

    #[test]
    fn standard_spec_is_valid_and_separates_roles() {
        let spec = CorpusSpec::standard(42);
        spec.validate().unwrap();
        let basis = spec.domains.iter().filter(|d| d.role == DomainRole::Basis).count();
        let unseen = spec.domains.iter().filter(|d| d.role == DomainRole::Unseen).count();
        assert_eq!(basis, 6);
        assert_eq!(unseen, 2);
        // Per-domain seeds must differ or domains would be clones.
        let mut seeds: Vec<u64> = spec.domains.iter().map(|d| d.synth.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 8);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.murmur_band_hz = (900.0, 1200.0);
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.heart_rate_bpm = (80.0, 60.0);
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.n_normal_records = 0;
        assert!(cfg.validate().is_err());
    }
}
