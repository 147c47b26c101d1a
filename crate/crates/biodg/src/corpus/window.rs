//! Resampling and the windowing protocol.

use crate::error::{Error, Result};

use super::{ClassCounts, SignalRecord, WindowedInstance, CANONICAL_RATE_HZ, WINDOW_S};

/// Slack for float comparisons on second-denominated boundaries.
const TIME_EPS: f64 = 1e-9;

/// Resamples a record to `target_hz` by linear interpolation. A record
/// already at the target rate is returned with its samples untouched.
pub fn resample(record: &SignalRecord, target_hz: u32) -> Result<SignalRecord> {
    if target_hz == 0 {
        return Err(Error::Config("target rate must be positive".into()));
    }
    if record.sample_rate_hz == target_hz {
        return Ok(record.clone());
    }
    let src = &record.samples;
    let ratio = f64::from(record.sample_rate_hz) / f64::from(target_hz);
    let n_out = ((src.len() as f64) / ratio).floor() as usize;
    if n_out == 0 {
        return Err(Error::TooShort {
            min_s: 1.0 / f64::from(target_hz),
            actual_s: record.duration_s(),
        });
    }
    let mut out = Vec::with_capacity(n_out);
    let last = src.len() - 1;
    for i in 0..n_out {
        let pos = i as f64 * ratio;
        let lo = (pos.floor() as usize).min(last);
        let hi = (lo + 1).min(last);
        let frac = pos - lo as f64;
        out.push(src[lo] * (1.0 - frac) + src[hi] * frac);
    }
    let mut resampled = record.clone();
    resampled.sample_rate_hz = target_hz;
    resampled.samples = out;
    Ok(resampled)
}

/// Number of windows produced for a usable span of `usable_s` seconds.
pub fn window_count(usable_s: f64, shift_s: f64) -> usize {
    ((usable_s - WINDOW_S + TIME_EPS) / shift_s).floor() as usize + 1
}

/// Slices a canonical-rate record into 1 s windows.
///
/// `trim_s` is removed from both ends; windows start at the trimmed
/// origin and advance by `shift_s` while a full second still fits in
/// the trimmed span. A record whose trimmed span is shorter than one
/// window is rejected with the minimum admissible duration.
pub fn window_record(
    record: &SignalRecord,
    shift_s: f64,
    trim_s: f64,
) -> Result<Vec<WindowedInstance>> {
    if record.sample_rate_hz != CANONICAL_RATE_HZ {
        return Err(Error::Argument(format!(
            "record {} is at {} Hz; resample to {} Hz before windowing",
            record.record_id, record.sample_rate_hz, CANONICAL_RATE_HZ
        )));
    }
    if !(shift_s > 0.0) || !shift_s.is_finite() {
        return Err(Error::Config(format!("window shift must be positive, got {shift_s}")));
    }
    if !(trim_s >= 0.0) || !trim_s.is_finite() {
        return Err(Error::Config(format!("trim must be non-negative, got {trim_s}")));
    }
    let duration = record.duration_s();
    let usable = duration - 2.0 * trim_s;
    if usable < WINDOW_S - TIME_EPS {
        return Err(Error::TooShort {
            min_s: 2.0 * trim_s + WINDOW_S,
            actual_s: duration,
        });
    }

    let rate = f64::from(CANONICAL_RATE_HZ);
    let win_len = (WINDOW_S * rate).round() as usize;
    let count = window_count(usable, shift_s);
    let mut windows = Vec::with_capacity(count);
    for w in 0..count {
        let start_s = trim_s + w as f64 * shift_s;
        let start = (start_s * rate).round() as usize;
        debug_assert!(start + win_len <= record.samples.len());
        windows.push(WindowedInstance {
            source_record_id: record.record_id.clone(),
            domain_id: record.domain_id.clone(),
            class_label: record.class_label,
            samples: record.samples[start..start + win_len].to_vec(),
            window_start_s: start_s,
        });
    }
    Ok(windows)
}

/// Windows every record and tallies per-class window counts.
pub fn window_all(
    records: &[SignalRecord],
    shift_s: f64,
    trim_s: f64,
) -> Result<(Vec<WindowedInstance>, ClassCounts)> {
    let mut all = Vec::new();
    let mut counts = ClassCounts::default();
    for record in records {
        let windows = window_record(record, shift_s, trim_s)?;
        for w in &windows {
            counts.bump(w.class_label);
        }
        all.extend(windows);
    }
    Ok((all, counts))
}
