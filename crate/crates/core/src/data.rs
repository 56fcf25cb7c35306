//! Synthetic corpus generation, manifest and feature-file round trips,
//! stratified splitting, and contrastive batch assembly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, AugmentPolicy, MelSpectrogram};
use crate::seeds::{self, derive_seed, fnv1a64};

/// Noise level the synthetic generator adds to every spectrogram cell;
/// group signature strength is specified relative to this.
pub const NOISE_STD: f64 = 1.0;

/// Ordered attribute-name to category-value map for one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Demographics {
    pub attributes: IndexMap<String, String>,
}

impl Demographics {
    pub fn new(attributes: IndexMap<String, String>) -> Self {
        Demographics { attributes }
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }

    /// All attribute values joined in schema order; two utterances share
    /// a composite key iff they agree on every attribute.
    pub fn composite_key(&self) -> String {
        self.attributes
            .values()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join("|")
    }

    /// Key over a subset of attributes, schema order preserved.
    pub fn key_over(&self, names: &[String]) -> Result<String> {
        let mut parts = Vec::with_capacity(names.len());
        for name in names {
            let v = self
                .get(name)
                .ok_or_else(|| Error::data(format!("unknown demographic attribute `{name}`")))?;
            parts.push(v);
        }
        Ok(parts.join("|"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub spec: MelSpectrogram<f64>,
    /// Token ids in `[1, vocab_size - 1]`; 0 is the CTC blank.
    pub transcript: Vec<usize>,
    pub demographics: Demographics,
}

/// Which demographic label the fairness-supervised loss groups by.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FscAttribute {
    /// The tuple of all attributes; the strictest invariance target.
    Composite,
    Single(String),
}

impl FscAttribute {
    pub fn parse(s: &str) -> Self {
        if s == "composite" {
            FscAttribute::Composite
        } else {
            FscAttribute::Single(s.to_string())
        }
    }

    pub fn key_of(&self, d: &Demographics) -> Result<String> {
        match self {
            FscAttribute::Composite => Ok(d.composite_key()),
            FscAttribute::Single(name) => Ok(d
                .get(name)
                .ok_or_else(|| Error::data(format!("unknown demographic attribute `{name}`")))?
                .to_string()),
        }
    }
}

impl std::fmt::Display for FscAttribute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FscAttribute::Composite => f.write_str("composite"),
            FscAttribute::Single(name) => f.write_str(name),
        }
    }
}

/// Doubled batch for contrastive training: originals at `0..n`, their
/// augmented views at `n..2n`.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub samples: Vec<MelSpectrogram<f64>>,
    pub pair_of: Vec<usize>,
    pub group_key: Vec<String>,
    pub is_augmented: Vec<bool>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusConfig {
    pub n_utterances: usize,
    /// Token ids run over `[1, vocab_size - 1]`; 0 stays free for blank.
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub frames_per_token: usize,
    pub n_mels: usize,
    /// Norm of the additive per-group spectral signature, in units of
    /// the noise standard deviation.
    pub sigma_g: f64,
    /// Attribute name to category count, in schema order.
    pub attributes: IndexMap<String, usize>,
    pub seed: u64,
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_utterances == 0 {
            return Err(Error::data("n_utterances must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(Error::data("vocab_size must be at least 2 (blank plus one symbol)"));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::data(format!(
                "token range {}..={} is invalid",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.frames_per_token == 0 || self.n_mels == 0 {
            return Err(Error::data("frames_per_token and n_mels must be positive"));
        }
        if !(self.sigma_g >= 0.0) {
            return Err(Error::data(format!("sigma_g must be >= 0, got {}", self.sigma_g)));
        }
        if self.attributes.is_empty() {
            return Err(Error::data("attribute schema must name at least one attribute"));
        }
        if self.attributes.values().any(|&c| c == 0) {
            return Err(Error::data("every attribute needs at least one category"));
        }
        Ok(())
    }
}

fn group_signature(seed: u64, key: &str, n_mels: usize, sigma_g: f64) -> Vec<f64> {
    if sigma_g == 0.0 {
        return vec![0.0; n_mels];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        seeds::salt::CORPUS_GROUP + fnv1a64(key.as_bytes()),
    ));
    let mut b: Vec<f64> = (0..n_mels).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in b.iter_mut() {
            *x *= sigma_g / norm;
        }
    }
    b
}

/// Deterministic synthetic corpus: every utterance is a sequence of
/// per-token spectral templates, shifted by its demographic group's
/// signature vector on every frame, plus i.i.d. noise.
///
/// Per-utterance draws happen in a fixed order (attribute values, token
/// count, tokens, noise); changing it changes every corpus downstream.
pub fn generate_synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let template_cells = cfg.frames_per_token * cfg.n_mels;
    let templates: Vec<Vec<f64>> = (0..cfg.vocab_size)
        .map(|tok| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                seeds::salt::CORPUS_TEMPLATE + tok as u64,
            ));
            (0..template_cells).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();

    let mut signatures: IndexMap<String, Vec<f64>> = IndexMap::new();
    let mut corpus = Vec::with_capacity(cfg.n_utterances);
    for i in 0..cfg.n_utterances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            seeds::salt::CORPUS_UTTERANCE + i as u64,
        ));
        let mut attributes = IndexMap::with_capacity(cfg.attributes.len());
        for (name, &count) in &cfg.attributes {
            let pick = rng.random_range(0..count);
            attributes.insert(name.clone(), format!("{name}_{pick}"));
        }
        let demographics = Demographics::new(attributes);
        let key = demographics.composite_key();
        let b = signatures
            .entry(key.clone())
            .or_insert_with(|| group_signature(cfg.seed, &key, cfg.n_mels, cfg.sigma_g));

        let n_tokens = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
        let transcript: Vec<usize> =
            (0..n_tokens).map(|_| rng.random_range(1..cfg.vocab_size)).collect();

        let frames = n_tokens * cfg.frames_per_token;
        let mut values = Vec::with_capacity(frames * cfg.n_mels);
        for &tok in &transcript {
            values.extend_from_slice(&templates[tok]);
        }
        for t in 0..frames {
            for m in 0..cfg.n_mels {
                let noise: f64 = StandardNormal.sample(&mut rng);
                values[t * cfg.n_mels + m] += b[m] + noise * NOISE_STD;
            }
        }
        corpus.push(Utterance {
            id: format!("utt{i:05}"),
            spec: MelSpectrogram::new(frames, cfg.n_mels, values),
            transcript,
            demographics,
        });
    }
    Ok(corpus)
}

/// Mean/variance-normalize every utterance in place. Call once before
/// batching so the augmentation mask value 0 is corpus-neutral.
pub fn normalize_corpus(corpus: &mut [Utterance]) {
    for utt in corpus {
        utt.spec = utt.spec.normalized();
    }
}

// ---- manifest and file formats ---------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    audio: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<String>,
    transcript: String,
    demographics: IndexMap<String, String>,
}

/// Feature files are flat binary: u32 frame count, u32 bin count, then
/// frames x bins little-endian f32 values, row-major by frame.
pub fn write_feature_file(path: &Path, spec: &MelSpectrogram<f64>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io_err = |e| Error::io(path, e);
    w.write_all(&(spec.frames as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(spec.bins as u32).to_le_bytes()).map_err(io_err)?;
    for &v in &spec.values {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_feature_file(path: &Path) -> Result<MelSpectrogram<f64>> {
    let mut r = BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let mut u32buf = [0u8; 4];
    let io_err = |e| Error::io(path, e);
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let frames = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let bins = u32::from_le_bytes(u32buf) as usize;
    if frames == 0 || bins == 0 {
        return Err(Error::data(format!(
            "feature file {} declares a {frames}x{bins} matrix",
            path.display()
        )));
    }
    let mut values = Vec::with_capacity(frames * bins);
    let mut f32buf = [0u8; 4];
    for _ in 0..frames * bins {
        r.read_exact(&mut f32buf).map_err(io_err)?;
        values.push(f32::from_le_bytes(f32buf) as f64);
    }
    Ok(MelSpectrogram::new(frames, bins, values))
}

/// Waveform files are flat binary: u32 sample count, then little-endian
/// f32 samples at 16 kHz.
pub fn write_audio_file(path: &Path, samples: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io_err = |e| Error::io(path, e);
    w.write_all(&(samples.len() as u32).to_le_bytes()).map_err(io_err)?;
    for &s in samples {
        w.write_all(&(s as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_audio_file(path: &Path) -> Result<Vec<f64>> {
    let mut r = BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let io_err = |e| Error::io(path, e);
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io_err)?;
    let n = u32::from_le_bytes(u32buf) as usize;
    let mut samples = Vec::with_capacity(n);
    let mut f32buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut f32buf).map_err(io_err)?;
        samples.push(f32::from_le_bytes(f32buf) as f64);
    }
    Ok(samples)
}

/// How manifests resolve waveform references and filter lengths.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub n_mels: usize,
    pub frame_len: usize,
    pub hop: usize,
    /// Drop utterances longer than this many frames when set.
    pub max_frames: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            n_mels: 80,
            frame_len: 400,
            hop: 160,
            max_frames: None,
        }
    }
}

/// Read a line-per-record manifest. Each record names either a feature
/// file (loaded directly) or a waveform file (converted through
/// `mel_spectrogram`); paths are relative to the manifest's directory.
/// The first record fixes the demographic schema for the whole file.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    load_manifest_with(path, &LoadOptions::default())
}

pub fn load_manifest_with(path: &Path, opts: &LoadOptions) -> Result<Vec<Utterance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut corpus = Vec::new();
    let mut schema: Option<Vec<String>> = None;
    let mut dropped = 0usize;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: line_no,
            msg: e.to_string(),
        })?;
        let utt = record_to_utterance(rec, line_no, &base, opts, &mut schema)?;
        match (opts.max_frames, &utt) {
            (Some(cap), u) if u.spec.frames > cap => dropped += 1,
            _ => corpus.push(utt),
        }
    }
    if dropped > 0 {
        log::info!("dropped {dropped} utterances over the {:?}-frame cap", opts.max_frames);
    }
    Ok(corpus)
}

fn record_to_utterance(
    rec: ManifestRecord,
    line: usize,
    base: &Path,
    opts: &LoadOptions,
    schema: &mut Option<Vec<String>>,
) -> Result<Utterance> {
    let fail = |msg: String| Error::Manifest { line, msg };
    let mut transcript = Vec::new();
    for tok in rec.transcript.split_whitespace() {
        let id: usize = tok
            .parse()
            .map_err(|_| fail(format!("transcript token `{tok}` is not a number")))?;
        if id == 0 {
            return Err(fail("transcript token 0 is reserved for the blank".into()));
        }
        transcript.push(id);
    }
    if transcript.is_empty() {
        return Err(fail("transcript is empty".into()));
    }

    match schema {
        None => *schema = Some(rec.demographics.keys().cloned().collect()),
        Some(names) => {
            for name in names.iter() {
                if !rec.demographics.contains_key(name) {
                    return Err(fail(format!("missing demographic attribute `{name}`")));
                }
            }
            for name in rec.demographics.keys() {
                if !names.contains(name) {
                    return Err(fail(format!(
                        "demographic attribute `{name}` is not in the schema set by the first record"
                    )));
                }
            }
        }
    }

    let spec = match (&rec.features, &rec.audio) {
        (Some(f), None) => read_feature_file(&base.join(f))?,
        (None, Some(a)) => {
            let samples = read_audio_file(&base.join(a))?;
            features::mel_spectrogram(&samples, opts.n_mels, opts.frame_len, opts.hop)?
        }
        _ => return Err(fail("record must name exactly one of `features` or `audio`".into())),
    };
    Ok(Utterance {
        id: rec.id,
        spec,
        transcript,
        demographics: Demographics::new(rec.demographics),
    })
}

/// Write a manifest plus one feature file per utterance in a sibling
/// `<stem>_features/` directory, referenced by relative path.
pub fn write_corpus(corpus: &[Utterance], manifest_path: &Path) -> Result<()> {
    let stem = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    let dir_name = format!("{stem}_features");
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let feat_dir = base.join(&dir_name);
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let mut w = BufWriter::new(
        fs::File::create(manifest_path).map_err(|e| Error::io(manifest_path, e))?,
    );
    for utt in corpus {
        let rel: PathBuf = [dir_name.as_str(), &format!("{}.fbin", utt.id)].iter().collect();
        write_feature_file(&base.join(&rel), &utt.spec)?;
        let rec = ManifestRecord {
            id: utt.id.clone(),
            audio: None,
            features: Some(rel.to_string_lossy().into_owned()),
            transcript: utt
                .transcript
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            demographics: utt.demographics.attributes.clone(),
        };
        let json = serde_json::to_string(&rec)
            .map_err(|e| Error::data(format!("cannot serialize record {}: {e}", utt.id)))?;
        writeln!(w, "{json}").map_err(|e| Error::io(manifest_path, e))?;
    }
    w.flush().map_err(|e| Error::io(manifest_path, e))
}

// ---- splitting and batching -------------------------------------------------

/// Partition `corpus` so every composite-key stratum sends
/// `round(test_fraction * size)` utterances to test (never all of them).
/// Strata smaller than two stay wholly in train.
pub fn stratified_split(
    corpus: Vec<Utterance>,
    test_fraction: f64,
    key_attributes: &[String],
    seed: u64,
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::data(format!(
            "test_fraction must lie strictly between 0 and 1, got {test_fraction}"
        )));
    }
    let mut strata: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for (i, utt) in corpus.iter().enumerate() {
        let key = if key_attributes.is_empty() {
            utt.demographics.composite_key()
        } else {
            utt.demographics.key_over(key_attributes)?
        };
        strata.entry(key).or_default().push(i);
    }
    let mut to_test = vec![false; corpus.len()];
    for (key, mut members) in strata {
        if members.len() < 2 {
            log::warn!("stratum `{key}` has {} utterance(s); keeping it in train", members.len());
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, seeds::salt::SPLIT_STRATUM + fnv1a64(key.as_bytes())));
        shuffle(&mut members, &mut rng);
        let n_test = ((test_fraction * members.len() as f64).round() as usize).min(members.len() - 1);
        for &i in &members[..n_test] {
            to_test[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, utt) in corpus.into_iter().enumerate() {
        if to_test[i] {
            test.push(utt);
        } else {
            train.push(utt);
        }
    }
    Ok((train, test))
}

/// Fisher-Yates, kept local so the draw sequence is pinned by this crate
/// rather than by a library's shuffle implementation.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Seed for the augmentation of original index `i` within a batch.
pub fn augment_seed(batch_seed: u64, i: usize) -> u64 {
    derive_seed(batch_seed, seeds::salt::BATCH_AUGMENT + i as u64)
}

/// Double `utterances` into originals plus one augmented view each.
/// Index `i < n` pairs with `i + n`; the view inherits its original's
/// group key.
pub fn make_contrastive_batch(
    utterances: &[Utterance],
    fsc_attribute: &FscAttribute,
    policy: &AugmentPolicy,
    batch_seed: u64,
) -> Result<ContrastiveBatch> {
    let n = utterances.len();
    if n < 2 {
        return Err(Error::data(format!(
            "contrastive batch needs at least 2 utterances (one negative), got {n}"
        )));
    }
    let mut samples = Vec::with_capacity(2 * n);
    let mut group_key = Vec::with_capacity(2 * n);
    for utt in utterances {
        samples.push(utt.spec.clone());
        group_key.push(fsc_attribute.key_of(&utt.demographics)?);
    }
    for (i, utt) in utterances.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(augment_seed(batch_seed, i));
        samples.push(features::spec_augment(&utt.spec, policy, &mut rng));
        group_key.push(group_key[i].clone());
    }
    let pair_of = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    let is_augmented = (0..2 * n).map(|i| i >= n).collect();
    Ok(ContrastiveBatch {
        samples,
        pair_of,
        group_key,
        is_augmented,
    })
}
