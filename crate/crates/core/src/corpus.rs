//! Manifests, batching and the synthetic speaker corpus.
//!
//! A manifest is a JSON-lines file with one object per utterance:
//!
//! ```json
//! {"audio_path": "spk00/utt000.wav", "speaker_id": "spk00", "split": "train"}
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::frontend::{self, AudioWaveform, FrontendConfig, LogMelFrames};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const METADATA_FILE: &str = "corpus.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio_path: PathBuf,
    pub speaker_id: String,
    pub split: Split,
}

/// Parsed entries and the speaker vocabulary in first-seen order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub speakers: Vec<String>,
}

impl Manifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut speakers = Vec::new();
        let mut known = HashSet::new();
        for e in &entries {
            if !seen.insert(e.audio_path.clone()) {
                return Err(Error::DuplicatePath(e.audio_path.display().to_string()));
            }
            if known.insert(e.speaker_id.clone()) {
                speakers.push(e.speaker_id.clone());
            }
        }
        Ok(Self { entries, speakers })
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.speakers.clone())
    }

    pub fn split(&self, split: Split) -> Vec<ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).cloned().collect()
    }
}

/// Speaker name ↔ label id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub speakers: Vec<String>,
}

impl Vocabulary {
    pub fn new(speakers: Vec<String>) -> Self {
        Self { speakers }
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn id(&self, speaker: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == speaker)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.speakers.get(id).map(String::as_str)
    }

    /// JSON object mapping id (as a string key) to speaker name.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<String, &str> = self
            .speakers
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("{i}"), s.as_str()))
            .collect();
        serde_json::to_value(map).expect("string map serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let map: BTreeMap<String, String> = serde_json::from_value(v.clone())?;
        let mut speakers = vec![None; map.len()];
        for (k, name) in map {
            let i: usize = k
                .parse()
                .map_err(|_| Error::Config(format!("vocabulary key `{k}` is not an id")))?;
            *speakers
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("vocabulary ids are not contiguous (saw {i})")))? = Some(name);
        }
        Ok(Self::new(speakers.into_iter().map(Option::unwrap).collect()))
    }
}

#[derive(Deserialize)]
struct RawEntry {
    audio_path: Option<PathBuf>,
    speaker_id: Option<String>,
    split: Option<Split>,
}

/// Parses a JSON-lines manifest. Blank lines are skipped; paths are resolved
/// against the manifest directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest { line: line_no, message };
        let raw: RawEntry = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let audio_path = raw.audio_path.ok_or_else(|| bad("missing audio_path".into()))?;
        let speaker_id = raw.speaker_id.ok_or_else(|| bad("missing speaker_id".into()))?;
        if speaker_id.is_empty() {
            return Err(bad("empty speaker_id".into()));
        }
        let split = raw.split.ok_or_else(|| bad("missing split".into()))?;
        let audio_path = if audio_path.is_relative() {
            base.join(audio_path)
        } else {
            audio_path
        };
        entries.push(ManifestEntry {
            audio_path,
            speaker_id,
            split,
        });
    }
    Manifest::from_entries(entries)
}

/// Writes entries as JSON lines, storing paths relative to the manifest
/// directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        let rel = e.audio_path.strip_prefix(base).unwrap_or(&e.audio_path);
        let out = ManifestEntry {
            audio_path: rel.to_path_buf(),
            ..e.clone()
        };
        serde_json::to_writer(&mut w, &out)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub snr_db: f64,
    /// Fraction of each speaker's utterances assigned to the test split.
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 10,
            utts_per_speaker: 20,
            duration_s: 3.0,
            seed: 0,
            sample_rate_hz: 16_000,
            snr_db: 20.0,
            test_fraction: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::Config("synthetic corpus needs at least two speakers".into()));
        }
        if self.utts_per_speaker == 0 {
            return Err(Error::Config("utts_per_speaker must be positive".into()));
        }
        if !(self.duration_s > 0.0) || self.sample_rate_hz == 0 {
            return Err(Error::Config("duration and sample rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction {} outside [0, 1)", self.test_fraction)));
        }
        Ok(())
    }

    pub fn test_utts_per_speaker(&self) -> usize {
        (self.utts_per_speaker as f64 * self.test_fraction).round() as usize
    }
}

/// Fundamental and three formant-like frequencies of one synthetic speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoiceProfile {
    pub speaker_id: String,
    /// `[f0, f1, f2, f3]` in Hz.
    pub frequencies: [f64; 4],
}

pub const MIN_SEPARATION_HZ: f64 = 30.0;
const FREQ_RANGES: [(f64, f64); 4] = [(90.0, 260.0), (300.0, 900.0), (950.0, 2200.0), (2300.0, 3600.0)];
const COMPONENT_GAIN: [f64; 4] = [1.0, 0.7, 0.5, 0.35];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub spec: SynthSpec,
    pub profiles: Vec<VoiceProfile>,
}

/// Draws profiles until every pair differs by at least
/// [`MIN_SEPARATION_HZ`] in some component.
pub fn draw_profiles(n: usize, rng: &mut impl Rng) -> Vec<VoiceProfile> {
    let mut out: Vec<VoiceProfile> = Vec::with_capacity(n);
    while out.len() < n {
        let mut f = [0.0; 4];
        for (fi, (lo, hi)) in f.iter_mut().zip(FREQ_RANGES) {
            *fi = rng.random_range(lo..hi);
        }
        let distinct = out.iter().all(|p| {
            p.frequencies
                .iter()
                .zip(&f)
                .any(|(a, b)| (a - b).abs() >= MIN_SEPARATION_HZ)
        });
        if distinct {
            out.push(VoiceProfile {
                speaker_id: format!("spk{:02}", out.len()),
                frequencies: f,
            });
        }
    }
    out
}

/// One utterance: the profile's sinusoids with random phases and ±20 %
/// amplitude jitter, gated by a random on/off syllable envelope, plus white
/// noise at `snr_db` relative to the voiced signal.
///
/// The envelope matters because features are standardized per utterance: a
/// stationary mixture would leave every normalized channel with the same
/// statistics, erasing the spectral profile.
pub fn synth_utterance(profile: &VoiceProfile, spec: &SynthSpec, rng: &mut impl Rng) -> AudioWaveform {
    let sr = spec.sample_rate_hz as f64;
    let n = (spec.duration_s * sr).round() as usize;
    let phases: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let gains: Vec<f64> = COMPONENT_GAIN.iter().map(|g| g * rng.random_range(0.8..1.2)).collect();
    let envelope = syllable_envelope(n, sr, rng);
    let mut signal: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let s: f64 = profile
                .frequencies
                .iter()
                .zip(&phases)
                .zip(&gains)
                .map(|((f, p), g)| g * (2.0 * PI * f * t + p).sin())
                .sum();
            s * envelope[i]
        })
        .collect();
    let power = signal.iter().map(|s| s * s).sum::<f64>() / n as f64;
    let noise_std = (power / 10f64.powf(spec.snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, noise_std.max(1e-12)).expect("finite std");
    signal.iter_mut().for_each(|s| *s += noise.sample(rng));
    let peak = signal.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
    let samples = signal.into_iter().map(|s| s * gain).collect();
    AudioWaveform::new(samples, spec.sample_rate_hz).expect("non-empty synthetic waveform")
}

/// Alternating voiced and silent segments of 80–300 ms with 10 ms raised-
/// cosine ramps.
fn syllable_envelope(n: usize, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut env = vec![0.0; n];
    let ramp = (0.01 * sr) as usize;
    let mut pos = 0;
    let mut voiced = rng.random_bool(0.5);
    while pos < n {
        let len = ((rng.random_range(0.08..0.3)) * sr) as usize;
        let end = (pos + len).min(n);
        if voiced {
            for (k, e) in env[pos..end].iter_mut().enumerate() {
                let edge = k.min(end - pos - 1 - k);
                *e = if edge < ramp {
                    0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
                } else {
                    1.0
                };
            }
        }
        voiced = !voiced;
        pos = end;
    }
    env
}

/// Writes the synthetic corpus under `out_dir`: one directory of WAVs per
/// speaker, [`MANIFEST_FILE`] and [`METADATA_FILE`]. Returns the manifest
/// path.
pub fn synth_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let profiles = draw_profiles(spec.n_speakers, &mut rng);
    let n_test = spec.test_utts_per_speaker();
    let mut entries = Vec::new();
    for p in &profiles {
        let dir = out_dir.join(&p.speaker_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for u in 0..spec.utts_per_speaker {
            let wave = synth_utterance(p, spec, &mut rng);
            let path = dir.join(format!("utt{u:03}.wav"));
            frontend::write_wav(&path, &wave)?;
            let split = if u + n_test >= spec.utts_per_speaker {
                Split::Test
            } else {
                Split::Train
            };
            entries.push(ManifestEntry {
                audio_path: path,
                speaker_id: p.speaker_id.clone(),
                split,
            });
        }
    }
    let meta = SynthMetadata {
        spec: *spec,
        profiles,
    };
    let meta_path = out_dir.join(METADATA_FILE);
    let json = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    let manifest = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

pub fn read_metadata(path: impl AsRef<Path>) -> Result<SynthMetadata> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Visit order for one epoch: a Fisher–Yates shuffle seeded by
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn label_of(entry: &ManifestEntry, vocab: &Vocabulary) -> Result<usize> {
    vocab
        .id(&entry.speaker_id)
        .ok_or_else(|| Error::Config(format!("speaker `{}` not in the vocabulary", entry.speaker_id)))
}

fn features_of(entry: &ManifestEntry, frontend_cfg: &FrontendConfig) -> Result<LogMelFrames> {
    let wave = frontend::load_audio(&entry.audio_path)?;
    frontend::extract(&wave, frontend_cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub frames: Vec<LogMelFrames>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One epoch of feature batches in seeded shuffled order; the last batch may
/// be short. Unreadable files are skipped with a warning and counted.
pub struct Batches<'a> {
    entries: &'a [ManifestEntry],
    vocab: &'a Vocabulary,
    frontend: &'a FrontendConfig,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    skipped: usize,
}

impl Batches<'_> {
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

pub fn batches<'a>(
    entries: &'a [ManifestEntry],
    vocab: &'a Vocabulary,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
    frontend_cfg: &'a FrontendConfig,
) -> Result<Batches<'a>> {
    if entries.is_empty() {
        return Err(Error::Empty("no manifest entries to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    Ok(Batches {
        entries,
        vocab,
        frontend: frontend_cfg,
        order: epoch_order(entries.len(), shuffle_seed, epoch),
        pos: 0,
        batch_size,
        skipped: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut batch = Batch {
            frames: Vec::new(),
            labels: Vec::new(),
            paths: Vec::new(),
        };
        while batch.len() < self.batch_size && self.pos < self.order.len() {
            let entry = &self.entries[self.order[self.pos]];
            self.pos += 1;
            let label = match label_of(entry, self.vocab) {
                Ok(l) => l,
                Err(e) => return Some(Err(e)),
            };
            match features_of(entry, self.frontend) {
                Ok(f) => {
                    batch.frames.push(f);
                    batch.labels.push(label);
                    batch.paths.push(entry.audio_path.clone());
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", entry.audio_path.display());
                    self.skipped += 1;
                }
            }
        }
        (!batch.is_empty()).then_some(Ok(batch))
    }
}

/// Features of a whole split, extracted once and kept in memory.
#[derive(Clone, Debug, Default)]
pub struct FeatureSet {
    pub frames: Vec<LogMelFrames>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
    pub skipped: usize,
}

impl FeatureSet {
    pub fn load(entries: &[ManifestEntry], vocab: &Vocabulary, frontend_cfg: &FrontendConfig) -> Result<Self> {
        let mut set = Self::default();
        for entry in entries {
            let label = label_of(entry, vocab)?;
            match features_of(entry, frontend_cfg) {
                Ok(f) => {
                    set.frames.push(f);
                    set.labels.push(label);
                    set.paths.push(entry.audio_path.clone());
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", entry.audio_path.display());
                    set.skipped += 1;
                }
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Index groups for one epoch, in the same order [`batches`] uses.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        epoch_order(self.len(), seed, epoch)
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}
