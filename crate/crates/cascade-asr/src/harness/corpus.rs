//! Synthetic speech-like corpus: every token owns a fixed random
//! feature template, an utterance is the concatenation of its tokens'
//! templates, and Gaussian noise of configurable strength is layered on
//! top.  Deterministic per seed, down to the byte when materialized.

use crate::model::ModelConfig;
use crate::numerics::Tensor;
use crate::trainer::Sample;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Generation parameters for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Number of distinct content tokens (ids 1..=vocab).
    pub vocab: usize,
    pub utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub frames_per_token: usize,
    pub input_dim: usize,
    /// Standard deviation of the additive noise; 0 reproduces the
    /// templates exactly.
    pub noise_std: f64,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!(
                "corpus.vocab must be at least 2, got {}",
                self.vocab
            )));
        }
        // 10 utterances is the smallest count that keeps every split
        // non-empty under the 80/10/10 rule.
        if self.utterances < 10 {
            return Err(Error::Config(format!(
                "corpus.utterances must be at least 10, got {}",
                self.utterances
            )));
        }
        if self.min_tokens < 1 {
            return Err(Error::Config("corpus.min_tokens must be at least 1".into()));
        }
        if self.max_tokens < self.min_tokens {
            return Err(Error::Config(format!(
                "corpus.max_tokens {} is below corpus.min_tokens {}",
                self.max_tokens, self.min_tokens
            )));
        }
        if self.frames_per_token < 1 {
            return Err(Error::Config("corpus.frames_per_token must be at least 1".into()));
        }
        if self.input_dim < 1 {
            return Err(Error::Config("corpus.input_dim must be at least 1".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "corpus.noise_std must be finite and non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    /// The corpus and the model must agree on feature width and
    /// token inventory.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if self.input_dim != model.input_dim {
            return Err(Error::Config(format!(
                "corpus.input_dim {} does not match model.input_dim {}",
                self.input_dim, model.input_dim
            )));
        }
        if self.vocab != model.vocab {
            return Err(Error::Config(format!(
                "corpus.vocab {} does not match model.vocab {}",
                self.vocab, model.vocab
            )));
        }
        Ok(())
    }
}

/// A generated corpus with its 80/10/10 index split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    n_train: usize,
    n_dev: usize,
}

impl Corpus {
    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.n_train]
    }

    pub fn dev(&self) -> &[Sample] {
        &self.samples[self.n_train..self.n_train + self.n_dev]
    }

    pub fn test(&self) -> &[Sample] {
        &self.samples[self.n_train + self.n_dev..]
    }

    pub fn splits(&self) -> [(&'static str, &[Sample]); 3] {
        [("train", self.train()), ("dev", self.dev()), ("test", self.test())]
    }

    fn from_samples(samples: Vec<Sample>) -> Corpus {
        let n = samples.len();
        let n_train = n * 8 / 10;
        let n_dev = n / 10;
        Corpus { samples, n_train, n_dev }
    }
}

/// Draw the per-token templates: one frames_per_token x input_dim
/// standard-normal matrix per content token, in token order.
fn draw_templates(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    (0..cfg.vocab)
        .map(|_| {
            let data: Vec<f64> = (0..cfg.frames_per_token * cfg.input_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            Tensor::new(cfg.frames_per_token, cfg.input_dim, data)
                .expect("template shape is positive")
        })
        .collect()
}

/// Generate the corpus in memory.  Adjacent repeated tokens are
/// resampled away so that every utterance stays alignable after
/// temporal subsampling (a repeat needs a separating blank frame that
/// short templates cannot spare).
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates = draw_templates(cfg, &mut rng);

    let mut samples = Vec::with_capacity(cfg.utterances);
    for _ in 0..cfg.utterances {
        let len = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
        let mut tokens = Vec::with_capacity(len);
        for i in 0..len {
            let mut tok = rng.gen_range(1..=cfg.vocab);
            while i > 0 && tok == tokens[i - 1] {
                tok = rng.gen_range(1..=cfg.vocab);
            }
            tokens.push(tok);
        }

        let frames = len * cfg.frames_per_token;
        let mut data = Vec::with_capacity(frames * cfg.input_dim);
        for &tok in &tokens {
            data.extend_from_slice(templates[tok - 1].data());
        }
        if cfg.noise_std > 0.0 {
            for v in data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.noise_std * z;
            }
        }
        let feats = Tensor::new(frames, cfg.input_dim, data)?;
        samples.push(Sample { feats, tokens });
    }
    Ok(Corpus::from_samples(samples))
}

fn utt_id(index: usize) -> String {
    format!("utt_{index:05}")
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 2],
    frame_period_ms: f64,
}

/// Materialize a corpus: `manifest.tsv` (utt_id, feature path,
/// space-separated token ids) plus one raw little-endian f64 feature
/// file and one JSON shape sidecar per utterance.  Byte-identical for
/// identical inputs.
pub fn write_corpus(corpus: &Corpus, frame_period_ms: f64, dir: &Path) -> Result<()> {
    let feats_dir = dir.join("feats");
    std::fs::create_dir_all(&feats_dir)?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.tsv"))?);
    for (i, sample) in corpus.samples.iter().enumerate() {
        let id = utt_id(i);
        let rel = format!("feats/{id}.f64");
        let tokens: Vec<String> = sample.tokens.iter().map(|t| t.to_string()).collect();
        writeln!(manifest, "{id}\t{rel}\t{}", tokens.join(" "))?;

        let mut bytes = Vec::with_capacity(sample.feats.data().len() * 8);
        for v in sample.feats.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(feats_dir.join(format!("{id}.f64")), &bytes)?;

        let sidecar = Sidecar {
            shape: [sample.feats.rows(), sample.feats.cols()],
            frame_period_ms,
        };
        let json = serde_json::to_string(&sidecar)?;
        std::fs::write(feats_dir.join(format!("{id}.json")), json.as_bytes())?;
    }
    manifest.flush()?;
    Ok(())
}

/// Load a materialized corpus from its manifest directory.  Returns the
/// corpus (manifest order, same 80/10/10 split rule) and the frame
/// period recorded in the sidecars, which must all agree.
pub fn load_corpus(dir: &Path) -> Result<(Corpus, f64)> {
    let manifest_path = dir.join("manifest.tsv");
    let file = std::fs::File::open(&manifest_path).map_err(|e| {
        Error::Data(format!("cannot open {}: {e}", manifest_path.display()))
    })?;
    let mut samples = Vec::new();
    let mut frame_period: Option<f64> = None;
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "manifest.tsv:{}: expected 3 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let rel = fields[1];
        let tokens: Vec<usize> = fields[2]
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>().map_err(|_| {
                    Error::Data(format!("manifest.tsv:{}: bad token id {t:?}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;

        let feat_path = dir.join(rel);
        let sidecar_path = feat_path.with_extension("json");
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)?;
        match frame_period {
            None => frame_period = Some(sidecar.frame_period_ms),
            Some(p) if p == sidecar.frame_period_ms => {}
            Some(p) => {
                return Err(Error::Data(format!(
                    "{}: frame period {} disagrees with earlier {}",
                    sidecar_path.display(),
                    sidecar.frame_period_ms,
                    p
                )));
            }
        }

        let bytes = std::fs::read(&feat_path)?;
        let expect = sidecar.shape[0] * sidecar.shape[1] * 8;
        if bytes.len() != expect {
            return Err(Error::Data(format!(
                "{}: {} bytes but sidecar shape {}x{} needs {}",
                feat_path.display(),
                bytes.len(),
                sidecar.shape[0],
                sidecar.shape[1],
                expect
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let feats = Tensor::new(sidecar.shape[0], sidecar.shape[1], data)?;
        samples.push(Sample { feats, tokens });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: empty manifest", manifest_path.display())));
    }
    let period = frame_period.expect("non-empty corpus has a frame period");
    Ok((Corpus::from_samples(samples), period))
}
