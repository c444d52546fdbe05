//! Synthetic task generation and the on-disk data formats: a simple binary
//! feature container, a CSV debug alternative, and UTF-8 TSV transcripts.

use crate::error::{Error, Result};
use crate::units::{grapheme_index, grapheme_inventory};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const FEAT_MAGIC: &[u8; 8] = b"RNNTFEAT";

/// Generator spec: latent label sequences rendered as noisy
/// class-conditional feature frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTask {
    /// Latent acoustic class count. In word mode this must cover the
    /// grapheme inventory and is filled in automatically.
    pub vocab_size: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub frames_per_label: usize,
    /// Frame-count jitter per label, +/- this many frames (min 1 frame).
    pub jitter: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub seed: u64,
    /// When set, utterances are sentences over this word list; latent
    /// labels are the grapheme indices of the sentence (spaces included).
    pub words: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub frames: Vec<Array1<f64>>,
    /// Ground-truth transcript: words in text mode, space-joined label
    /// tokens in abstract mode.
    pub transcript: String,
    /// Latent class sequence that produced the frames.
    pub latent: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Deterministic class codebook: one-hot when the feature dimension covers
/// the vocabulary, otherwise seeded unit-norm random codes.
pub fn class_codebook(task: &SyntheticTask) -> Vec<Array1<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed ^ 0xc0de_b00c);
    (0..task.vocab_size)
        .map(|k| {
            if task.feature_dim >= task.vocab_size {
                let mut v = Array1::zeros(task.feature_dim);
                v[k] = 1.0;
                v
            } else {
                let mut v: Array1<f64> =
                    Array1::from_vec((0..task.feature_dim).map(|_| standard_normal(&mut rng)).collect());
                let norm = v.dot(&v).sqrt();
                v /= norm.max(1e-12);
                v
            }
        })
        .collect()
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates `n` utterances and splits them train/dev/test (8:1:1 by
/// index). Deterministic under the task seed.
pub fn generate_task(task: &SyntheticTask, n: usize) -> Result<Dataset> {
    let mut task = task.clone();
    if task.min_labels == 0 || task.max_labels < task.min_labels {
        return Err(Error::Invalid(
            "label count range must satisfy 1 <= min <= max".into(),
        ));
    }
    if task.frames_per_label == 0 {
        return Err(Error::Invalid("frames_per_label must be >= 1".into()));
    }
    if let Some(words) = &task.words {
        if words.is_empty() {
            return Err(Error::Invalid("word list must be nonempty".into()));
        }
        for w in words {
            if w.is_empty() || w.chars().any(|c| grapheme_index(c).is_none() || c == ' ') {
                return Err(Error::Invalid(format!("word {w:?} outside inventory")));
            }
        }
        task.vocab_size = grapheme_inventory().len();
    } else if task.vocab_size == 0 {
        return Err(Error::Invalid("vocab_size must be >= 1".into()));
    }

    let codebook = class_codebook(&task);
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut dataset = Dataset::default();
    for i in 0..n {
        let (latent, transcript) = match &task.words {
            None => {
                let len = rng.gen_range(task.min_labels..=task.max_labels);
                let labels: Vec<usize> =
                    (0..len).map(|_| rng.gen_range(0..task.vocab_size)).collect();
                let text = labels
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                (labels, text)
            }
            Some(words) => {
                let len = rng.gen_range(task.min_labels..=task.max_labels);
                let sentence = (0..len)
                    .map(|_| words[rng.gen_range(0..words.len())].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                let labels = sentence
                    .chars()
                    .map(|c| grapheme_index(c).expect("validated inventory"))
                    .collect();
                (labels, sentence)
            }
        };
        let mut frames = Vec::new();
        for &label in &latent {
            let jitter = if task.jitter > 0 {
                rng.gen_range(0..=2 * task.jitter) as i64 - task.jitter as i64
            } else {
                0
            };
            let count = ((task.frames_per_label as i64) + jitter).max(1) as usize;
            for _ in 0..count {
                let mut frame = codebook[label].clone();
                if task.noise > 0.0 {
                    for v in frame.iter_mut() {
                        *v += task.noise * standard_normal(&mut rng);
                    }
                }
                frames.push(frame);
            }
        }
        let utt = Utterance {
            id: format!("utt{i:05}"),
            frames,
            transcript,
            latent,
        };
        match i % 10 {
            8 => dataset.dev.push(utt),
            9 => dataset.test.push(utt),
            _ => dataset.train.push(utt),
        }
    }
    Ok(dataset)
}

/// Optional preprocessing: stacks `factor` consecutive frames into one
/// wider frame (non-overlapping, last window zero-padded).
pub fn stack_frames(frames: &[Array1<f64>], factor: usize) -> Vec<Array1<f64>> {
    if factor <= 1 || frames.is_empty() {
        return frames.to_vec();
    }
    let dim = frames[0].len();
    frames
        .chunks(factor)
        .map(|window| {
            let mut out = Array1::zeros(dim * factor);
            for (j, f) in window.iter().enumerate() {
                out.slice_mut(ndarray::s![j * dim..(j + 1) * dim]).assign(f);
            }
            out
        })
        .collect()
}

/// Binary feature container: magic, u32 record count, then per utterance
/// u32 id length, id bytes, u32 frame count, u32 dim, f32 LE frames.
pub fn write_features<W: Write>(mut w: W, utterances: &[Utterance]) -> Result<()> {
    w.write_all(FEAT_MAGIC)?;
    w.write_u32::<LittleEndian>(utterances.len() as u32)?;
    for utt in utterances {
        w.write_u32::<LittleEndian>(utt.id.len() as u32)?;
        w.write_all(utt.id.as_bytes())?;
        w.write_u32::<LittleEndian>(utt.frames.len() as u32)?;
        let dim = utt.frames.first().map_or(0, |f| f.len());
        w.write_u32::<LittleEndian>(dim as u32)?;
        for frame in &utt.frames {
            for &v in frame.iter() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
    }
    Ok(())
}

/// Reads a feature container; transcripts and latents are left empty and
/// filled from the transcript TSV when available.
pub fn read_features<R: Read>(mut r: R) -> Result<Vec<Utterance>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FEAT_MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = r.read_u32::<LittleEndian>()? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| Error::Format(format!("bad UTF-8 id: {e}")))?;
        let frame_count = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let mut frames = Vec::with_capacity(frame_count);
        for _ in 0..frame_count {
            let mut buf = vec![0f32; dim];
            r.read_f32_into::<LittleEndian>(&mut buf)?;
            frames.push(Array1::from_vec(buf.into_iter().map(f64::from).collect()));
        }
        out.push(Utterance {
            id,
            frames,
            transcript: String::new(),
            latent: Vec::new(),
        });
    }
    Ok(out)
}

/// CSV debug alternative: id,frame,v0,v1,...
pub fn write_features_csv<W: Write>(mut w: W, utterances: &[Utterance]) -> Result<()> {
    for utt in utterances {
        for (i, frame) in utt.frames.iter().enumerate() {
            let values: Vec<String> = frame.iter().map(|v| format!("{v:.9e}")).collect();
            writeln!(w, "{},{},{}", utt.id, i, values.join(","))?;
        }
    }
    Ok(())
}

/// Transcript TSV: `id<TAB>transcript`, one per line. Also carries the
/// latent labels in a third column when present (abstract-mode datasets).
pub fn write_transcripts<W: Write>(mut w: W, utterances: &[Utterance]) -> Result<()> {
    for utt in utterances {
        let latent = utt
            .latent
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(w, "{}\t{}\t{}", utt.id, utt.transcript, latent)?;
    }
    Ok(())
}

pub fn read_transcripts(path: &Path) -> Result<Vec<(String, String, Vec<usize>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields
            .next()
            .ok_or_else(|| Error::Format(format!("transcripts line {}: empty", lineno + 1)))?;
        let transcript = fields.next().unwrap_or("");
        let latent = fields
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad latent label {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((id.to_string(), transcript.to_string(), latent));
    }
    Ok(out)
}

/// Loads a (features, transcripts) pair back into utterances.
pub fn load_split(features_path: &Path, transcripts_path: &Path) -> Result<Vec<Utterance>> {
    let file = std::io::BufReader::new(std::fs::File::open(features_path)?);
    let mut utterances = read_features(file)?;
    let transcripts = read_transcripts(transcripts_path)?;
    let by_id: std::collections::HashMap<&str, (&str, &Vec<usize>)> = transcripts
        .iter()
        .map(|(id, t, l)| (id.as_str(), (t.as_str(), l)))
        .collect();
    for utt in &mut utterances {
        if let Some((t, l)) = by_id.get(utt.id.as_str()) {
            utt.transcript = t.to_string();
            utt.latent = (*l).clone();
        }
    }
    Ok(utterances)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_task() -> SyntheticTask {
        SyntheticTask {
            vocab_size: 5,
            min_labels: 2,
            max_labels: 4,
            frames_per_label: 3,
            jitter: 1,
            feature_dim: 5,
            noise: 0.1,
            seed: 11,
            words: None,
        }
    }

    #[test]
    fn noiseless_single_frame_is_exact_code() {
        let task = SyntheticTask {
            noise: 0.0,
            jitter: 0,
            frames_per_label: 1,
            ..toy_task()
        };
        let data = generate_task(&task, 10).unwrap();
        let codebook = class_codebook(&task);
        for utt in &data.train {
            assert_eq!(utt.frames.len(), utt.latent.len());
            for (frame, &label) in utt.frames.iter().zip(&utt.latent) {
                assert_eq!(frame, &codebook[label]);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let task = toy_task();
        let a = generate_task(&task, 30).unwrap();
        let b = generate_task(&task, 30).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.transcript, y.transcript);
            assert_eq!(x.frames, y.frames);
        }
    }

    #[test]
    fn zero_labels_rejected() {
        let task = SyntheticTask {
            min_labels: 0,
            ..toy_task()
        };
        assert!(generate_task(&task, 5).is_err());
    }

    #[test]
    fn split_proportions() {
        let data = generate_task(&toy_task(), 100).unwrap();
        assert_eq!(data.train.len(), 80);
        assert_eq!(data.dev.len(), 10);
        assert_eq!(data.test.len(), 10);
    }

    #[test]
    fn word_mode_latents_are_graphemes() {
        let task = SyntheticTask {
            words: Some(vec!["cat".into(), "dog".into()]),
            ..toy_task()
        };
        let data = generate_task(&task, 10).unwrap();
        for utt in &data.train {
            let expected: Vec<usize> = utt
                .transcript
                .chars()
                .map(|c| grapheme_index(c).unwrap())
                .collect();
            assert_eq!(utt.latent, expected);
        }
    }

    #[test]
    fn feature_file_roundtrip() {
        let data = generate_task(&toy_task(), 12).unwrap();
        let mut bytes = Vec::new();
        write_features(&mut bytes, &data.train).unwrap();
        let back = read_features(&bytes[..]).unwrap();
        assert_eq!(back.len(), data.train.len());
        for (a, b) in back.iter().zip(&data.train) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.frames.len(), b.frames.len());
            // f32 storage: values round but stay close.
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                for (x, y) in fa.iter().zip(fb.iter()) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn frame_stacking_shapes() {
        let frames: Vec<Array1<f64>> = (0..7).map(|i| Array1::from_elem(4, i as f64)).collect();
        let stacked = stack_frames(&frames, 3);
        assert_eq!(stacked.len(), 3);
        assert_eq!(stacked[0].len(), 12);
        // Last window zero-padded.
        assert_eq!(stacked[2][4], 0.0);
    }
}
