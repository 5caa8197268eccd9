//! Sequence encoding, datasets and resampling.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel order of the one-hot encoding.
pub const ALPHABET: [char; 4] = ['A', 'C', 'G', 'T'];

/// Number of redraws `bootstrap_indices` attempts before giving up on
/// getting both classes into a resample.
pub const BOOTSTRAP_MAX_RETRIES: usize = 100;

/// Seeded generator used everywhere a run seed is consumed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An `L x 4` encoded DNA sequence, channels ordered A, C, G, T.
///
/// Rows for `A/C/G/T` are exact one-hot vectors, rows for `N` are uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotSequence {
    matrix: Array2<f64>,
}

impl OneHotSequence {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.matrix.view()
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    /// Rotates rows toward higher indices by `n` (negative `n` rotates left).
    pub fn circular_shift(&self, n: i64) -> OneHotSequence {
        OneHotSequence {
            matrix: circular_shift_rows(self.matrix.view(), n),
        }
    }

    /// Index of the active channel at each position, `None` for uniform rows.
    pub fn active_channels(&self) -> Vec<Option<usize>> {
        self.matrix
            .rows()
            .into_iter()
            .map(|row| row.iter().position(|&v| v == 1.0))
            .collect()
    }

    /// Decodes back to text, writing `N` for non one-hot rows.
    pub fn to_text(&self) -> String {
        self.active_channels()
            .into_iter()
            .map(|c| c.map_or('N', |c| ALPHABET[c]))
            .collect()
    }
}

/// Encodes a string over `{A,C,G,T,N}` (case-insensitive).
pub fn encode_sequence(text: &str) -> Result<OneHotSequence> {
    if text.is_empty() {
        return Err(Error::EmptySequence);
    }
    let chars: Vec<char> = text.chars().collect();
    let mut matrix = Array2::<f64>::zeros((chars.len(), 4));
    for (i, &ch) in chars.iter().enumerate() {
        match channel_of(ch) {
            Some(c) => matrix[[i, c]] = 1.0,
            None if ch.eq_ignore_ascii_case(&'N') => {
                matrix.row_mut(i).fill(0.25);
            }
            None => return Err(Error::IllegalCharacter { position: i, ch }),
        }
    }
    Ok(OneHotSequence { matrix })
}

fn channel_of(ch: char) -> Option<usize> {
    match ch.to_ascii_uppercase() {
        'A' => Some(0),
        'C' => Some(1),
        'G' => Some(2),
        'T' => Some(3),
        _ => None,
    }
}

/// Checks that `text` is a nonempty string over `{A,C,G,T,N}`.
pub fn validate_sequence(text: &str) -> Result<()> {
    encode_sequence(text).map(|_| ())
}

/// Row `j` of the result is row `(j - n) mod L` of `m`.
pub fn circular_shift_rows(m: ArrayView2<'_, f64>, n: i64) -> Array2<f64> {
    let len = m.nrows();
    if len == 0 {
        return m.to_owned();
    }
    let shift = n.rem_euclid(len as i64) as usize;
    let mut out = Array2::<f64>::zeros(m.raw_dim());
    for (j, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        row.assign(&m.row((j + len - shift) % len));
    }
    out
}

/// Reverse complement of an ACGT string.
pub fn reverse_complement(motif: &str) -> String {
    motif
        .chars()
        .rev()
        .map(|c| match c.to_ascii_uppercase() {
            'A' => 'T',
            'C' => 'G',
            'G' => 'C',
            'T' => 'A',
            other => other,
        })
        .collect()
}

/// Labelled sequences of one common length.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    sequences: Vec<OneHotSequence>,
    labels: Vec<u8>,
    texts: Option<Vec<String>>,
}

impl LabeledDataset {
    pub fn new(
        sequences: Vec<OneHotSequence>,
        labels: Vec<u8>,
        texts: Option<Vec<String>>,
    ) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if sequences.len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} sequences but {} labels",
                sequences.len(),
                labels.len()
            )));
        }
        if let Some(t) = &texts {
            if t.len() != sequences.len() {
                return Err(Error::Dataset("source text count differs".into()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Dataset(format!("label {bad} is not 0 or 1")));
        }
        let len = sequences[0].len();
        if let Some(i) = sequences.iter().position(|s| s.len() != len) {
            return Err(Error::Dataset(format!(
                "example {i} has length {} but the dataset length is {len}",
                sequences[i].len()
            )));
        }
        Ok(Self {
            sequences,
            labels,
            texts,
        })
    }

    /// Encodes `(text, label)` pairs.
    pub fn from_texts(examples: &[(String, u8)]) -> Result<Self> {
        let sequences = examples
            .iter()
            .map(|(t, _)| encode_sequence(t))
            .collect::<Result<Vec<_>>>()?;
        let labels = examples.iter().map(|(_, y)| *y).collect();
        let texts = examples.iter().map(|(t, _)| t.clone()).collect();
        Self::new(sequences, labels, Some(texts))
    }

    pub fn sequences(&self) -> &[OneHotSequence] {
        &self.sequences
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn texts(&self) -> Option<&[String]> {
        self.texts.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences[0].len()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let p = self.positives();
        p > 0 && p < self.len()
    }

    /// Dataset made of the examples at `indices` (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.texts
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i].clone()).collect()),
        )
    }

    /// Concatenates datasets of equal sequence length.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<Self> {
        let mut sequences = Vec::new();
        let mut labels = Vec::new();
        let mut texts = Some(Vec::new());
        for p in parts {
            sequences.extend(p.sequences.iter().cloned());
            labels.extend_from_slice(&p.labels);
            match (&mut texts, &p.texts) {
                (Some(acc), Some(t)) => acc.extend(t.iter().cloned()),
                _ => texts = None,
            }
        }
        Self::new(sequences, labels, texts)
    }

    /// Serializes in the `SEQUENCE<TAB>LABEL` line format.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, y) in self.labels.iter().enumerate() {
            let text = match &self.texts {
                Some(t) => t[i].clone(),
                None => self.sequences[i].to_text(),
            };
            let _ = writeln!(out, "{text}\t{y}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses the `SEQUENCE<TAB>LABEL` format; `#` lines and blank lines are skipped.
pub fn parse_dataset(content: &str, path: &Path) -> Result<LabeledDataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut sequences = Vec::new();
    let mut labels = Vec::new();
    let mut texts = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (seq, label) = match (fields.next(), fields.next(), fields.next()) {
            (Some(s), Some(l), None) => (s.trim(), l.trim()),
            _ => return Err(parse_err(lineno, "expected SEQUENCE<TAB>LABEL".to_string())),
        };
        let label = match label {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(parse_err(lineno, format!("label {other:?} is not 0 or 1"))),
        };
        let encoded = encode_sequence(seq).map_err(|e| parse_err(lineno, e.to_string()))?;
        if let Some(first) = sequences.first() {
            let first: &OneHotSequence = first;
            if first.len() != encoded.len() {
                return Err(parse_err(
                    lineno,
                    format!(
                        "sequence length {} differs from dataset length {}",
                        encoded.len(),
                        first.len()
                    ),
                ));
            }
        }
        sequences.push(encoded);
        labels.push(label);
        texts.push(seq.to_ascii_uppercase());
    }
    if sequences.is_empty() {
        return Err(Error::Dataset(format!("{}: no examples", path.display())));
    }
    LabeledDataset::new(sequences, labels, Some(texts))
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&content, path)
}

/// Parameters of a motif-planted corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub motif: String,
    /// Plant the reverse complement half of the time.
    pub include_reverse: bool,
    pub length: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub mutation_rate: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.motif.is_empty() {
            return Err(Error::Config("motif is empty".into()));
        }
        if let Some((i, ch)) = self
            .motif
            .chars()
            .enumerate()
            .find(|(_, c)| channel_of(*c).is_none())
        {
            return Err(Error::IllegalCharacter { position: i, ch });
        }
        if self.motif.len() >= self.length {
            return Err(Error::Config(format!(
                "motif length {} must be shorter than sequence length {}",
                self.motif.len(),
                self.length
            )));
        }
        if !(0.0..=0.5).contains(&self.mutation_rate) {
            return Err(Error::Config(format!(
                "mutation rate {} outside [0, 0.5]",
                self.mutation_rate
            )));
        }
        if self.n_positive == 0 || self.n_negative == 0 {
            return Err(Error::Config("class counts must be positive".into()));
        }
        Ok(())
    }

    /// Patterns whose exact presence marks a positive.
    pub fn planted_patterns(&self) -> Vec<String> {
        let motif = self.motif.to_ascii_uppercase();
        let mut out = vec![motif.clone()];
        if self.include_reverse {
            let rc = reverse_complement(&motif);
            if rc != motif {
                out.push(rc);
            }
        }
        out
    }
}

fn random_bases(rng: &mut impl Rng, len: usize) -> Vec<u8> {
    (0..len)
        .map(|_| ALPHABET[rng.random_range(0..4)] as u8)
        .collect()
}

/// Motif-planted positives and motif-free negatives, shuffled together.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let patterns = spec.planted_patterns();
    let mut examples: Vec<(String, u8)> = Vec::with_capacity(spec.n_positive + spec.n_negative);

    for _ in 0..spec.n_positive {
        let mut seq = random_bases(&mut rng, spec.length);
        let pattern = if patterns.len() > 1 && rng.random_bool(0.5) {
            &patterns[1]
        } else {
            &patterns[0]
        };
        let mut planted = pattern.as_bytes().to_vec();
        for base in planted.iter_mut() {
            if rng.random_bool(spec.mutation_rate) {
                let others: Vec<u8> = ALPHABET
                    .iter()
                    .map(|&c| c as u8)
                    .filter(|&c| c != *base)
                    .collect();
                *base = others[rng.random_range(0..3)];
            }
        }
        let offset = rng.random_range(0..=spec.length - planted.len());
        seq[offset..offset + planted.len()].copy_from_slice(&planted);
        examples.push((String::from_utf8(seq).expect("ascii"), 1));
    }

    let mut produced = 0;
    while produced < spec.n_negative {
        let seq = String::from_utf8(random_bases(&mut rng, spec.length)).expect("ascii");
        if patterns.iter().any(|p| seq.contains(p.as_str())) {
            continue;
        }
        examples.push((seq, 0));
        produced += 1;
    }

    examples.shuffle(&mut rng);
    LabeledDataset::from_texts(&examples)
}

/// Indices drawn i.i.d. uniformly with replacement.
///
/// When the source holds both classes the draw is repeated until the
/// resample does too, up to [`BOOTSTRAP_MAX_RETRIES`] attempts.
pub fn bootstrap_indices(labels: &[u8], seed: u64) -> Result<Vec<usize>> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Dataset("cannot resample an empty dataset".into()));
    }
    let source_has_both = labels.contains(&0) && labels.contains(&1);
    let mut rng = seeded_rng(seed);
    for _ in 0..=BOOTSTRAP_MAX_RETRIES {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        if !source_has_both {
            return Ok(idx);
        }
        let pos = idx.iter().filter(|&&i| labels[i] == 1).count();
        if pos > 0 && pos < n {
            return Ok(idx);
        }
    }
    Err(Error::Dataset(format!(
        "bootstrap resample lacked one class after {BOOTSTRAP_MAX_RETRIES} retries"
    )))
}

pub fn bootstrap_resample(data: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let idx = bootstrap_indices(data.labels(), seed)?;
    data.subset(&idx)
}

/// Seeded shuffle split into train/val/test by the given fractions.
pub fn split_dataset(
    data: &LabeledDataset,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    if train_frac <= 0.0 || val_frac <= 0.0 || train_frac + val_frac >= 1.0 {
        return Err(Error::Config(format!(
            "split fractions {train_frac}/{val_frac} leave no room for all three splits"
        )));
    }
    let n = data.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_val = (n as f64 * val_frac).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Dataset(format!("{n} examples are too few to split")));
    }
    Ok((
        data.subset(&idx[..n_train])?,
        data.subset(&idx[n_train..n_train + n_val])?,
        data.subset(&idx[n_train + n_val..])?,
    ))
}
