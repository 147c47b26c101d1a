//! Corpus directory layout: building, ingesting, and loading domains.
//!
//! ```text
//! corpus/
//!   <domain>.manifest.json     domain header
//!   <domain>.instances.jsonl   one window per line
//!   <domain>/records/*.wav     canonical-rate mono recordings
//!   <domain>/features/*.f32    feature cache (written by extraction)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::synth::{generate_records, CorpusSpec};
use super::wav;
use super::window::window_all;
use super::{
    ClassLabel, DomainManifest, DomainRole, InstanceRow, Provenance, SignalRecord,
    WindowedInstance, CANONICAL_RATE_HZ,
};

/// One domain as loaded from disk.
#[derive(Debug, Clone)]
pub struct LoadedDomain {
    pub manifest: DomainManifest,
    pub instances: Vec<InstanceRow>,
}

impl LoadedDomain {
    /// Distinct source records in first-appearance order.
    pub fn records(&self) -> Vec<(String, ClassLabel)> {
        let mut seen = Vec::new();
        for row in &self.instances {
            if seen.iter().all(|(id, _)| id != &row.record_id) {
                seen.push((row.record_id.clone(), row.class));
            }
        }
        seen
    }
}

/// A corpus directory held in memory (manifests and instance rows;
/// audio and features stay on disk until asked for).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub domains: BTreeMap<String, LoadedDomain>,
}

impl Corpus {
    pub fn basis_ids(&self) -> Vec<String> {
        self.domains
            .values()
            .filter(|d| d.manifest.role == DomainRole::Basis)
            .map(|d| d.manifest.domain_id.clone())
            .collect()
    }

    pub fn unseen_ids(&self) -> Vec<String> {
        self.domains
            .values()
            .filter(|d| d.manifest.role == DomainRole::Unseen)
            .map(|d| d.manifest.domain_id.clone())
            .collect()
    }

    pub fn domain(&self, id: &str) -> Result<&LoadedDomain> {
        self.domains
            .get(id)
            .ok_or_else(|| Error::Domain(format!("domain {id:?} is not in the corpus")))
    }

    /// Reads the 1 s window behind an instance row from its WAV file.
    pub fn load_window_samples(&self, row: &InstanceRow) -> Result<Vec<f64>> {
        let path = self.root.join(&row.sample_path);
        let (rate, samples) = wav::read_wav(&path)?;
        if rate != CANONICAL_RATE_HZ {
            return Err(Error::Format(format!(
                "{}: expected canonical rate {CANONICAL_RATE_HZ} Hz, found {rate}",
                path.display()
            )));
        }
        let start = (row.window_start_s * f64::from(CANONICAL_RATE_HZ)).round() as usize;
        let len = CANONICAL_RATE_HZ as usize;
        if start + len > samples.len() {
            return Err(Error::Format(format!(
                "{}: window at {:.3} s overruns the record",
                path.display(),
                row.window_start_s
            )));
        }
        Ok(samples[start..start + len].to_vec())
    }
}

fn manifest_path(root: &Path, domain_id: &str) -> PathBuf {
    root.join(format!("{domain_id}.manifest.json"))
}

fn instances_path(root: &Path, domain_id: &str) -> PathBuf {
    root.join(format!("{domain_id}.instances.jsonl"))
}

/// File stem for a window: record id plus start offset in milliseconds.
pub fn window_stem(record_id: &str, start_s: f64) -> String {
    format!("{record_id}_{:05}", (start_s * 1000.0).round() as u64)
}

fn write_domain(
    root: &Path,
    manifest: &DomainManifest,
    records: &[SignalRecord],
    windows: &[WindowedInstance],
) -> Result<()> {
    let records_dir = root.join(&manifest.domain_id).join("records");
    fs::create_dir_all(&records_dir)?;
    for rec in records {
        wav::write_wav_mono16(
            &records_dir.join(format!("{}.wav", rec.record_id)),
            rec.sample_rate_hz,
            &rec.samples,
        )?;
    }
    let mut out = fs::File::create(instances_path(root, &manifest.domain_id))?;
    for w in windows {
        let row = InstanceRow {
            record_id: w.source_record_id.clone(),
            window_start_s: w.window_start_s,
            class: w.class_label,
            sample_path: format!("{}/records/{}.wav", manifest.domain_id, w.source_record_id),
            feature_path: None,
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    fs::write(
        manifest_path(root, &manifest.domain_id),
        serde_json::to_string_pretty(manifest)? + "\n",
    )?;
    Ok(())
}

/// Generates and materializes every domain of a synthetic corpus spec.
pub fn build_synthetic_corpus(spec: &CorpusSpec, root: &Path) -> Result<Vec<DomainManifest>> {
    spec.validate()?;
    fs::create_dir_all(root)?;
    let mut manifests = Vec::new();
    for dom in &spec.domains {
        let records = generate_records(&dom.synth, &dom.domain_id)?;
        let (windows, counts) = window_all(&records, dom.window_shift_s, dom.trim_s)?;
        let mut record_counts = super::ClassCounts::default();
        for r in &records {
            record_counts.bump(r.class_label);
        }
        let manifest = DomainManifest {
            domain_id: dom.domain_id.clone(),
            role: dom.role,
            window_shift_s: dom.window_shift_s,
            trim_s: dom.trim_s,
            canonical_rate_hz: CANONICAL_RATE_HZ,
            provenance: Provenance::Synthetic,
            seed: Some(dom.synth.seed),
            counts,
            record_counts,
        };
        write_domain(root, &manifest, &records, &windows)?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

/// Parses a class map file: one `<record_stem><sep><class>` per line,
/// separator comma or whitespace, `#` comments allowed.
fn parse_class_map(path: &Path) -> Result<BTreeMap<String, ClassLabel>> {
    let mut map = BTreeMap::new();
    for (ln, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(2, |c: char| c == ',' || c.is_whitespace());
        let stem = parts.next().unwrap_or_default().trim();
        let class = parts.next().unwrap_or_default().trim();
        if stem.is_empty() || class.is_empty() {
            return Err(Error::Config(format!(
                "{}:{}: expected `<record> <class>`",
                path.display(),
                ln + 1
            )));
        }
        map.insert(stem.to_string(), ClassLabel::from_str_loose(class)?);
    }
    if map.is_empty() {
        return Err(Error::Config(format!("{}: class map is empty", path.display())));
    }
    Ok(map)
}

/// Ingests a directory of WAV files as one domain: resamples to the
/// canonical rate, rewrites normalized audio into the corpus, windows
/// every record, and writes the manifest and instance list.
#[allow(clippy::too_many_arguments)]
pub fn ingest_directory(
    root: &Path,
    src_dir: &Path,
    domain_id: &str,
    role: DomainRole,
    class_map_path: &Path,
    window_shift_s: f64,
    trim_s: f64,
) -> Result<DomainManifest> {
    let class_map = parse_class_map(class_map_path)?;
    let mut wav_paths: Vec<PathBuf> = fs::read_dir(src_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e.eq_ignore_ascii_case("wav")).unwrap_or(false))
        .collect();
    wav_paths.sort();
    if wav_paths.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{}: no wav files to ingest",
            src_dir.display()
        )));
    }

    let mut records = Vec::new();
    for path in &wav_paths {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format(format!("{}: bad file name", path.display())))?;
        let class = *class_map.get(stem).ok_or_else(|| {
            Error::Config(format!("class map has no entry for record {stem:?}"))
        })?;
        let (rate, samples) = wav::read_wav(path)?;
        let rec = SignalRecord::new(
            stem.to_string(),
            domain_id.to_string(),
            class,
            rate,
            samples,
        )?;
        records.push(super::window::resample(&rec, CANONICAL_RATE_HZ)?);
    }

    let (windows, counts) = window_all(&records, window_shift_s, trim_s)?;
    let mut record_counts = super::ClassCounts::default();
    for r in &records {
        record_counts.bump(r.class_label);
    }
    let manifest = DomainManifest {
        domain_id: domain_id.to_string(),
        role,
        window_shift_s,
        trim_s,
        canonical_rate_hz: CANONICAL_RATE_HZ,
        provenance: Provenance::Ingested,
        seed: None,
        counts,
        record_counts,
    };
    write_domain(root, &manifest, &records, &windows)?;
    Ok(manifest)
}

/// Loads every domain found in a corpus directory.
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let mut domains = BTreeMap::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.ends_with(".manifest.json"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{}: no domain manifests found",
            root.display()
        )));
    }
    for path in entries {
        let manifest: DomainManifest = serde_json::from_reader(fs::File::open(&path)?)?;
        let inst_path = instances_path(root, &manifest.domain_id);
        let mut instances = Vec::new();
        for line in BufReader::new(fs::File::open(&inst_path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            instances.push(serde_json::from_str::<InstanceRow>(&line)?);
        }
        if instances.len() != manifest.counts.total() {
            return Err(Error::Format(format!(
                "domain {}: manifest promises {} instances, found {}",
                manifest.domain_id,
                manifest.counts.total(),
                instances.len()
            )));
        }
        domains.insert(manifest.domain_id.clone(), LoadedDomain { manifest, instances });
    }
    Ok(Corpus { root: root.to_path_buf(), domains })
}

/// Rewrites a domain's instance list (used by feature extraction to
/// record feature paths).
pub fn save_instances(root: &Path, domain_id: &str, instances: &[InstanceRow]) -> Result<()> {
    let mut out = fs::File::create(instances_path(root, domain_id))?;
    for row in instances {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Record-atomic stratified fold assignments for every basis domain,
/// as record ids. Written to `folds.json` by the CLI and recomputed
/// identically by the cross-validation harness.
pub fn fold_assignments(
    corpus: &Corpus,
    k: usize,
    seed: u64,
) -> Result<BTreeMap<String, Vec<Vec<String>>>> {
    let mut out = BTreeMap::new();
    for id in corpus.basis_ids() {
        let dom = corpus.domain(&id)?;
        let records = dom.records();
        let classes: Vec<ClassLabel> = records.iter().map(|(_, c)| *c).collect();
        let folds = super::folds::split_folds(&classes, k, seed)?;
        let named: Vec<Vec<String>> = folds
            .iter()
            .map(|f| f.iter().map(|&i| records[i].0.clone()).collect())
            .collect();
        out.insert(id, named);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{DomainSpec, SynthConfig};

    fn tiny_spec() -> CorpusSpec {
        let mut base = SynthConfig {
            record_duration_s: 3.0,
            n_normal_records: 2,
            n_abnormal_records: 2,
            ..SynthConfig::default()
        };
        base.seed = 31;
        let mut other = base.clone();
        other.seed = 32;
        other.s1_center_hz = 120.0;
        other.s2_center_hz = 204.0;
        CorpusSpec {
            domains: vec![
                DomainSpec {
                    domain_id: "alpha".into(),
                    role: DomainRole::Basis,
                    window_shift_s: 0.5,
                    trim_s: 0.5,
                    synth: base,
                },
                DomainSpec {
                    domain_id: "beta".into(),
                    role: DomainRole::Unseen,
                    window_shift_s: 0.5,
                    trim_s: 0.5,
                    synth: other,
                },
            ],
        }
    }

    #[test]
    fn build_and_reload_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let manifests = build_synthetic_corpus(&tiny_spec(), dir.path()).unwrap();
        assert_eq!(manifests.len(), 2);
        // 3 s record, trim 0.5, shift 0.5: usable 2 s -> 3 windows.
        assert_eq!(manifests[0].counts.total(), 4 * 3);
        assert_eq!(manifests[0].record_counts.normal, 2);

        let corpus = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.basis_ids(), vec!["alpha".to_string()]);
        assert_eq!(corpus.unseen_ids(), vec!["beta".to_string()]);
        let alpha = corpus.domain("alpha").unwrap();
        assert_eq!(alpha.instances.len(), 12);
        assert_eq!(alpha.records().len(), 4);

        // Window loading matches the generated signal up to the 16-bit
        // quantization done by the WAV writer.
        let records = generate_records(&tiny_spec().domains[0].synth, "alpha").unwrap();
        let row = &alpha.instances[0];
        let loaded = corpus.load_window_samples(row).unwrap();
        assert_eq!(loaded.len(), 2000);
        let src = &records[0].samples[1000..3000];
        for (a, b) in loaded.iter().zip(src) {
            assert!((a - b).abs() <= 1.0 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        build_synthetic_corpus(&tiny_spec(), d1.path()).unwrap();
        build_synthetic_corpus(&tiny_spec(), d2.path()).unwrap();
        for name in ["alpha.manifest.json", "alpha.instances.jsonl"] {
            assert_eq!(
                fs::read(d1.path().join(name)).unwrap(),
                fs::read(d2.path().join(name)).unwrap(),
                "{name} differs between rebuilds"
            );
        }
        let wav = "alpha/records/alpha-n00.wav";
        assert_eq!(
            fs::read(d1.path().join(wav)).unwrap(),
            fs::read(d2.path().join(wav)).unwrap()
        );
    }

    #[test]
    fn ingest_builds_a_domain_from_wavs() {
        let src = tempfile::tempdir().unwrap();
        let root = tempfile::tempdir().unwrap();
        // Two records at 4 kHz so ingest must resample.
        for (name, f) in [("recA", 80.0), ("recB", 200.0)] {
            let samples: Vec<f64> = (0..12000)
                .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 4000.0).sin() * 0.5)
                .collect();
            wav::write_wav_mono16(&src.path().join(format!("{name}.wav")), 4000, &samples)
                .unwrap();
        }
        fs::write(src.path().join("classes.txt"), "recA,normal\nrecB,abnormal\n").unwrap();
        let manifest = ingest_directory(
            root.path(),
            src.path(),
            "clinic",
            DomainRole::Basis,
            &src.path().join("classes.txt"),
            0.5,
            0.5,
        )
        .unwrap();
        // 3 s at canonical rate, usable 2 s, shift 0.5 -> 3 windows each.
        assert_eq!(manifest.counts.normal, 3);
        assert_eq!(manifest.counts.abnormal, 3);
        assert_eq!(manifest.provenance, Provenance::Ingested);
        let corpus = load_corpus(root.path()).unwrap();
        let w = corpus
            .load_window_samples(&corpus.domain("clinic").unwrap().instances[0])
            .unwrap();
        assert_eq!(w.len(), 2000);
    }

    #[test]
    fn ingest_rejects_unmapped_records() {
        let src = tempfile::tempdir().unwrap();
        let root = tempfile::tempdir().unwrap();
        wav::write_wav_mono16(&src.path().join("x.wav"), 2000, &vec![0.1; 6000]).unwrap();
        fs::write(src.path().join("classes.txt"), "other,normal\n").unwrap();
        let err = ingest_directory(
            root.path(),
            src.path(),
            "d",
            DomainRole::Basis,
            &src.path().join("classes.txt"),
            0.5,
            0.5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn fold_assignments_are_record_atomic() {
        let dir = tempfile::tempdir().unwrap();
        build_synthetic_corpus(&tiny_spec(), dir.path()).unwrap();
        let corpus = load_corpus(dir.path()).unwrap();
        let folds = fold_assignments(&corpus, 2, 5).unwrap();
        assert!(folds.contains_key("alpha"));
        assert!(!folds.contains_key("beta"), "unseen domains are never folded");
        let alpha = &folds["alpha"];
        let mut all: Vec<&String> = alpha.iter().flatten().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 4, "each record appears in exactly one fold");
    }
}
