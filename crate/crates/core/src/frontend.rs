//! Audio front end: mono PCM16 WAVE I/O, fixed-length cropping/tiling,
//! log-mel spectrograms and per-channel normalization.
//!
//! Geometry is deterministic: frames are centred on multiples of the hop with
//! reflect padding, so an input of `L` samples yields exactly
//! `ceil(L / hop)` frames (240 000 samples at 16 kHz → 1500 frames).

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Floor added inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;
/// Lower bound on the standard deviation used by [`normalize`].
pub const STD_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioWaveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioWaveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Empty("waveform has no samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Where the statistics used by normalization come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Each utterance is standardized with its own per-channel statistics.
    #[default]
    Utterance,
    /// Features are left unnormalized (callers may apply corpus statistics
    /// with [`ChannelStats`]).
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub target_seconds: f64,
    pub fmin_hz: f64,
    /// Upper filterbank edge; `None` means the Nyquist frequency.
    pub fmax_hz: Option<f64>,
    pub normalization: NormScope,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            win_ms: 25.0,
            hop_ms: 10.0,
            target_seconds: 15.0,
            fmin_hz: 0.0,
            fmax_hz: None,
            normalization: NormScope::Utterance,
        }
    }
}

impl FrontendConfig {
    pub fn with_target_seconds(mut self, seconds: f64) -> Self {
        self.target_seconds = seconds;
        self
    }

    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.win_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Frames produced for a `target_seconds` input.
    pub fn frames_for(&self, sample_rate: u32) -> usize {
        let len = (self.target_seconds * sample_rate as f64).round() as usize;
        len.div_ceil(self.hop_samples(sample_rate))
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.win_ms) {
            return Err(Error::Config(format!(
                "need 0 < hop_ms ({}) <= win_ms ({})",
                self.hop_ms, self.win_ms
            )));
        }
        if self.hop_samples(sample_rate) == 0 {
            return Err(Error::Config("hop shorter than one sample".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let fmax = self.fmax_hz.unwrap_or(nyquist);
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < fmax && fmax <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= fmin ({}) < fmax ({fmax}) <= nyquist ({nyquist})",
                self.fmin_hz
            )));
        }
        if self.target_seconds <= 0.0 {
            return Err(Error::Config("target_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// Time-major `[frames, n_mels]` log-mel features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelFrames {
    pub data: Tensor,
    pub frame_hop_ms: f64,
}

impl LogMelFrames {
    pub fn new(data: Tensor, frame_hop_ms: f64) -> Self {
        assert_eq!(data.ndim(), 2, "log-mel frames are [frames, n_mels]");
        Self { data, frame_hop_ms }
    }

    pub fn num_frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Reads a mono 16-bit PCM WAVE file, scaling samples by 1/32768.
pub fn load_audio(path: impl AsRef<Path>) -> Result<AudioWaveform> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let reader = hound::WavReader::open(path).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!(
            "{:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|source| Error::Wav {
            path: path.to_path_buf(),
            source,
        })?;
    AudioWaveform::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAVE file; samples are clipped to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, wave: &AudioWaveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Crops (from `offset`) or tiles the waveform to exactly
/// `round(target_seconds · sample_rate)` samples.
pub fn fix_length(wave: &AudioWaveform, target_seconds: f64, offset: usize) -> Result<AudioWaveform> {
    if !(target_seconds > 0.0) {
        return Err(Error::Config(format!(
            "target length must be positive, got {target_seconds}"
        )));
    }
    let target = (target_seconds * wave.sample_rate_hz as f64).round() as usize;
    let n = wave.samples.len();
    let samples = if n >= target {
        let start = offset.min(n - target);
        wave.samples[start..start + target].to_vec()
    } else {
        wave.samples.iter().copied().cycle().take(target).collect()
    };
    AudioWaveform::new(samples, wave.sample_rate_hz)
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the triangular filters.
pub fn mel_centers(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (1..=n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// HTK-scale triangular filterbank, `[n_mels, n_fft / 2 + 1]`, peak 1 and no
/// area normalization. Fails when some filter covers no FFT bin.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Tensor> {
    let n_bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut fb = Tensor::zeros(vec![n_mels, n_bins]);
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = fb.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            *w = up.min(down).max(0.0);
        }
        if row.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "n_mels = {n_mels} exceeds the usable FFT bins: filter {m} ({center:.1} Hz) covers no bin of a {n_fft}-point transform"
            )));
        }
    }
    Ok(fb)
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

/// Log-mel spectrogram: Hann window of `win_ms`, centred frames every
/// `hop_ms` with reflect padding, power spectrum through the mel filterbank,
/// `ln(energy + 1e-10)`.
pub fn log_mel(wave: &AudioWaveform, cfg: &FrontendConfig) -> Result<LogMelFrames> {
    let sr = wave.sample_rate_hz;
    cfg.validate(sr)?;
    let n_fft = cfg.win_samples(sr);
    let hop = cfg.hop_samples(sr);
    if wave.len() < hop {
        return Err(Error::Empty(format!(
            "waveform of {} samples is shorter than one hop ({hop})",
            wave.len()
        )));
    }
    let fmax = cfg.fmax_hz.unwrap_or(sr as f64 / 2.0);
    let fb = mel_filterbank(cfg.n_mels, n_fft, sr, cfg.fmin_hz, fmax)?;
    let n_bins = n_fft / 2 + 1;
    let window: Vec<f64> = (0..n_fft)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / n_fft as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_frames = wave.len().div_ceil(hop);
    let half = (n_fft / 2) as isize;
    let mut out = Tensor::zeros(vec![n_frames, cfg.n_mels]);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_bins];
    let samples = wave.samples();
    for t in 0..n_frames {
        let start = (t * hop) as isize - half;
        for (n, slot) in buf.iter_mut().enumerate() {
            let s = samples[reflect_index(start + n as isize, samples.len())];
            *slot = Complex::new(s * window[n], 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, dst) in out.row_mut(t).iter_mut().enumerate() {
            let energy: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            *dst = (energy + LOG_FLOOR).ln();
        }
    }
    Ok(LogMelFrames::new(out, cfg.hop_ms))
}

/// Per-channel standardization over time: mean 0 and population standard
/// deviation 1, with the deviation floored at [`STD_FLOOR`] so constant
/// channels map to zeros.
pub fn normalize(frames: &LogMelFrames) -> LogMelFrames {
    let stats = ChannelStats::of(std::slice::from_ref(frames));
    stats.apply(frames)
}

/// Per-channel mean and (floored) population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics pooled over every frame of every utterance given.
    pub fn of(utterances: &[LogMelFrames]) -> Self {
        let c = utterances.first().map_or(0, LogMelFrames::n_mels);
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for u in utterances {
            for row in u.data.rows() {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; c];
        for u in utterances {
            for row in u.data.rows() {
                for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = sq.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, frames: &LogMelFrames) -> LogMelFrames {
        let mut data = frames.data.clone();
        let c = frames.n_mels();
        for (i, v) in data.data_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        LogMelFrames::new(data, frames.frame_hop_ms)
    }
}

/// `fix_length → log_mel → normalize` as configured.
pub fn extract(wave: &AudioWaveform, cfg: &FrontendConfig) -> Result<LogMelFrames> {
    let fixed = fix_length(wave, cfg.target_seconds, 0)?;
    let frames = log_mel(&fixed, cfg)?;
    Ok(match cfg.normalization {
        NormScope::Utterance => normalize(&frames),
        NormScope::None => frames,
    })
}
