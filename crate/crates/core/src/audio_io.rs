//! PCM WAV ingestion, 1 s cropping and dataset manifests.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Sample rate of every clip after [`ingest`].
pub const SAMPLE_RATE: u32 = 16_000;
/// Samples in one second at [`SAMPLE_RATE`].
pub const ONE_SECOND: usize = SAMPLE_RATE as usize;

pub const SUPPORTED_RATES: [u32; 5] = [8_000, 16_000, 22_050, 44_100, 48_000];

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    /// Mono amplitudes in `[-1, 1]`.
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
    pub source_path: String,
    pub speaker_label: Option<String>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, source_path: impl Into<String>) -> Self {
        Self {
            samples,
            sample_rate_hz: SAMPLE_RATE,
            source_path: source_path.into(),
            speaker_label: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Decoded contents of a PCM WAV file before any channel mixing or resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmData {
    pub sample_rate: u32,
    pub channels: u16,
    /// Interleaved signed 16-bit samples.
    pub samples: Vec<i16>,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a RIFF/WAVE byte buffer holding 16-bit PCM.
pub fn parse_wav(bytes: &[u8]) -> Result<PcmData> {
    if bytes.len() < 12 {
        return Err(Error::MalformedWav("file shorter than RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedWav("missing RIFF/WAVE magic".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .ok_or_else(|| Error::MalformedWav("chunk size overflow".into()))?;
        if body_end > bytes.len() {
            return Err(Error::MalformedWav(format!(
                "chunk {:?} truncated: declares {size} bytes, {} available",
                String::from_utf8_lossy(id),
                bytes.len() - body_start
            )));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::MalformedWav("fmt chunk too short".into()));
                }
                fmt = Some((
                    le_u16(body, 0),
                    le_u16(body, 2),
                    le_u32(body, 4),
                    le_u16(body, 14),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
    }

    let (format_tag, channels, sample_rate, bits) =
        fmt.ok_or_else(|| Error::MalformedWav("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::MalformedWav("missing data chunk".into()))?;

    if format_tag != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "format tag {format_tag} (only PCM = 1)"
        )));
    }
    if bits != 16 {
        return Err(Error::UnsupportedFormat(format!("{bits}-bit samples")));
    }
    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedFormat(format!("{channels} channels")));
    }
    if !SUPPORTED_RATES.contains(&sample_rate) {
        return Err(Error::UnsupportedFormat(format!(
            "sample rate {sample_rate}"
        )));
    }
    let frame_bytes = 2 * channels as usize;
    if data.len() % frame_bytes != 0 {
        return Err(Error::MalformedWav(format!(
            "data length {} is not a multiple of the {frame_bytes}-byte frame",
            data.len()
        )));
    }

    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(PcmData {
        sample_rate,
        channels,
        samples,
    })
}

/// Encodes interleaved 16-bit samples as a canonical 44-byte-header WAV.
pub fn encode_wav(pcm: &PcmData) -> Vec<u8> {
    let data_len = (pcm.samples.len() * 2) as u32;
    let block_align = 2 * pcm.channels;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&pcm.channels.to_le_bytes());
    out.extend_from_slice(&pcm.sample_rate.to_le_bytes());
    out.extend_from_slice(&(pcm.sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &pcm.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Quantizes a float amplitude to signed 16-bit, the inverse of the `1/32768` scaling.
pub fn quantize(sample: f32) -> i16 {
    (sample as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a mono clip as 16-bit PCM at its own sample rate.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let pcm = PcmData {
        sample_rate: clip.sample_rate_hz,
        channels: 1,
        samples: clip.samples.iter().map(|&s| quantize(s)).collect(),
    };
    let path = path.as_ref();
    fs::write(path, encode_wav(&pcm)).map_err(|e| Error::io(path, e))
}

/// Linear-interpolation resampler. Output length is `floor(n * to / from)` (at least 1).
pub fn resample_linear(input: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    if from_hz == to_hz || input.is_empty() {
        return input.to_vec();
    }
    let n_out = ((input.len() as u64 * to_hz as u64) / from_hz as u64).max(1) as usize;
    let step = from_hz as f64 / to_hz as f64;
    let last = input.len() - 1;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let base = pos.floor() as usize;
            if base >= last {
                return input[last];
            }
            let frac = pos - base as f64;
            let a = input[base] as f64;
            let b = input[base + 1] as f64;
            (a + frac * (b - a)) as f32
        })
        .collect()
}

/// Converts decoded PCM into a 16 kHz mono clip.
pub fn pcm_to_clip(pcm: &PcmData, source_path: impl Into<String>) -> Result<AudioClip> {
    let ch = pcm.channels as usize;
    let mono: Vec<f32> = pcm
        .samples
        .chunks_exact(ch)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64 / 32768.0).sum();
            (sum / ch as f64) as f32
        })
        .collect();
    if mono.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let samples = resample_linear(&mono, pcm.sample_rate, SAMPLE_RATE);
    Ok(AudioClip::new(samples, source_path))
}

/// Reads a WAV file and returns a mono 16 kHz clip.
pub fn ingest(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let pcm = parse_wav(&bytes)?;
    pcm_to_clip(&pcm, path.to_string_lossy())
}

/// Exactly one second starting at `offset_samples`, zero-padded at the tail.
pub fn crop_1s(clip: &AudioClip, offset_samples: usize) -> Result<AudioClip> {
    if offset_samples >= clip.samples.len() {
        return Err(Error::OffsetBeyondClip {
            offset: offset_samples,
            len: clip.samples.len(),
        });
    }
    let end = (offset_samples + ONE_SECOND).min(clip.samples.len());
    let mut samples = Vec::with_capacity(ONE_SECOND);
    samples.extend_from_slice(&clip.samples[offset_samples..end]);
    samples.resize(ONE_SECOND, 0.0);
    Ok(AudioClip {
        samples,
        sample_rate_hz: clip.sample_rate_hz,
        source_path: clip.source_path.clone(),
        speaker_label: clip.speaker_label.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_path: String,
    pub speaker_id: String,
}

/// Utterance list with a dense speaker index assigned in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    speakers: Vec<String>,
    index: HashMap<String, usize>,
}

impl DatasetManifest {
    /// Builds a manifest from `(path, speaker)` pairs.
    pub fn from_entries<I, P, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (P, S)>,
        P: Into<String>,
        S: Into<String>,
    {
        let mut m = DatasetManifest::default();
        for (p, s) in entries {
            m.push(p.into(), s.into())?;
        }
        Ok(m)
    }

    fn push(&mut self, utterance_path: String, speaker_id: String) -> Result<()> {
        if self
            .entries
            .iter()
            .any(|e| e.utterance_path == utterance_path)
        {
            return Err(Error::DuplicatePath(utterance_path));
        }
        if !self.index.contains_key(&speaker_id) {
            self.index.insert(speaker_id.clone(), self.speakers.len());
            self.speakers.push(speaker_id.clone());
        }
        self.entries.push(ManifestEntry {
            utterance_path,
            speaker_id,
        });
        Ok(())
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn class_of(&self, speaker_id: &str) -> Option<usize> {
        self.index.get(speaker_id).copied()
    }

    /// Class index of every entry, in entry order.
    pub fn labels(&self) -> Vec<usize> {
        self.entries
            .iter()
            .map(|e| self.index[&e.speaker_id])
            .collect()
    }

    /// Entry indices grouped by class.
    pub fn utterances_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.speakers.len()];
        for (i, e) in self.entries.iter().enumerate() {
            out[self.index[&e.speaker_id]].push(i);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = DatasetManifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (path, speaker) = match (fields.next(), fields.next(), fields.next()) {
                (Some(p), Some(s), None) if !p.is_empty() && !s.is_empty() => (p, s),
                _ => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        msg: "expected `<utterance_path>\\t<speaker_id>`".into(),
                    })
                }
            };
            m.push(path.to_string(), speaker.to_string())?;
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&e.utterance_path);
            s.push('\t');
            s.push_str(&e.speaker_id);
            s.push('\n');
        }
        s
    }

    /// Resolves an utterance path relative to the manifest's directory.
    pub fn resolve(&self, base_dir: &Path, entry: usize) -> PathBuf {
        let p = Path::new(&self.entries[entry].utterance_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm(rate: u32, channels: u16, samples: Vec<i16>) -> PcmData {
        PcmData {
            sample_rate: rate,
            channels,
            samples,
        }
    }

    #[test]
    fn mono_16k_passthrough() {
        let samples: Vec<i16> = (0..16000).map(|i| (i % 200 - 100) as i16 * 50).collect();
        let bytes = encode_wav(&pcm(16000, 1, samples.clone()));
        let clip = pcm_to_clip(&parse_wav(&bytes).unwrap(), "x.wav").unwrap();
        assert_eq!(clip.samples.len(), 16000);
        assert_eq!(clip.sample_rate_hz, 16000);
        for (a, b) in clip.samples.iter().zip(&samples) {
            assert_eq!(*a, *b as f32 / 32768.0);
        }
    }

    #[test]
    fn upsample_8k_doubles_length() {
        let bytes = encode_wav(&pcm(8000, 1, vec![100; 8000]));
        let clip = pcm_to_clip(&parse_wav(&bytes).unwrap(), "x.wav").unwrap();
        assert_eq!(clip.samples.len(), 16000);
    }

    #[test]
    fn four_sample_upsampling_by_hand() {
        let out = resample_linear(&[0.0, 1.0, 2.0, 3.0], 8000, 16000);
        assert_eq!(out, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.0]);
    }

    #[test]
    fn stereo_opposite_channels_cancel() {
        let mut s = Vec::new();
        for _ in 0..1000 {
            s.push(16384);
            s.push(-16384);
        }
        let clip = pcm_to_clip(&pcm(16000, 2, s), "x.wav").unwrap();
        assert_eq!(clip.samples.len(), 1000);
        assert!(clip.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_survives_resampling() {
        for &rate in &SUPPORTED_RATES {
            let out = resample_linear(&vec![0.25f32; rate as usize / 10], rate, 16000);
            assert!(out.iter().all(|&v| (v - 0.25).abs() < 1.0 / 32768.0));
        }
    }

    #[test]
    fn header_errors() {
        assert!(matches!(parse_wav(b"RIFF"), Err(Error::MalformedWav(_))));
        let mut bytes = encode_wav(&pcm(16000, 1, vec![1, 2, 3, 4]));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(parse_wav(&bytes), Err(Error::MalformedWav(_))));

        let mut float_fmt = encode_wav(&pcm(16000, 1, vec![1, 2]));
        float_fmt[20] = 3;
        assert!(matches!(
            parse_wav(&float_fmt),
            Err(Error::UnsupportedFormat(_))
        ));

        let mut eight_bit = encode_wav(&pcm(16000, 1, vec![1, 2]));
        eight_bit[34] = 8;
        assert!(matches!(
            parse_wav(&eight_bit),
            Err(Error::UnsupportedFormat(_))
        ));

        let odd_rate = encode_wav(&pcm(11025, 1, vec![1, 2]));
        assert!(matches!(
            parse_wav(&odd_rate),
            Err(Error::UnsupportedFormat(_))
        ));

        let empty = encode_wav(&pcm(16000, 1, vec![]));
        assert!(matches!(
            pcm_to_clip(&parse_wav(&empty).unwrap(), "e.wav"),
            Err(Error::EmptyAudio)
        ));
    }

    #[test]
    fn skips_unknown_chunks() {
        let base = encode_wav(&pcm(16000, 1, vec![7, 8, 9]));
        let mut bytes = base[..12].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]);
        bytes.extend_from_slice(&base[12..]);
        assert_eq!(parse_wav(&bytes).unwrap().samples, vec![7, 8, 9]);
    }

    #[test]
    fn crop_examples() {
        let clip = AudioClip::new((0..32000).map(|i| i as f32 / 32000.0).collect(), "c");
        let a = crop_1s(&clip, 0).unwrap();
        assert_eq!(a.samples[..], clip.samples[..16000]);
        let b = crop_1s(&clip, 16000).unwrap();
        assert_eq!(b.samples[..], clip.samples[16000..]);

        let short = AudioClip::new(vec![0.5; 10000], "s");
        let c = crop_1s(&short, 0).unwrap();
        assert_eq!(c.samples.len(), 16000);
        assert!(c.samples[..10000].iter().all(|&v| v == 0.5));
        assert!(c.samples[10000..].iter().all(|&v| v == 0.0));

        assert!(matches!(
            crop_1s(&short, 10000),
            Err(Error::OffsetBeyondClip { .. })
        ));
    }

    #[test]
    fn manifest_indexing() {
        let m = DatasetManifest::parse("a.wav\ta\nb.wav\tb\n").unwrap();
        assert_eq!(m.n_speakers(), 2);
        assert_eq!(m.class_of("a"), Some(0));
        assert_eq!(m.class_of("b"), Some(1));

        let m = DatasetManifest::parse("# header\n1.wav\tb\n2.wav\ta\n\n3.wav\tb\n").unwrap();
        assert_eq!(m.n_speakers(), 2);
        assert_eq!(m.class_of("b"), Some(0));
        assert_eq!(m.class_of("a"), Some(1));
        assert_eq!(m.labels(), vec![0, 1, 0]);
        assert_eq!(m.entries[2].utterance_path, "3.wav");
    }

    #[test]
    fn manifest_errors() {
        match DatasetManifest::parse("a.wav\ta\nbroken-line\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            DatasetManifest::parse("a.wav\tx\na.wav\ty\n"),
            Err(Error::DuplicatePath(_))
        ));
    }
}
