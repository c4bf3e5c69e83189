//! Text-side token sets for one prompt.
//!
//! Two simulated branches stand in for pretrained language models:
//!
//! * the encoder branch gives one narrow-range token per word, fully
//!   determined by the word and its position;
//! * the decoder-only branch gives wide-range query tokens (deterministic per
//!   prompt) followed by answer tokens whose content depends on an answer
//!   seed, mimicking a generative model that answers differently each run.
//!
//! Real embeddings exported from actual models can be loaded from a dump
//! directory instead.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, Rng};
use crate::tensor::{read_tensor, write_tensor, DType, Tensor};

/// Four attribute probes fed through the decoder branch.
pub const DEFAULT_INSTRUCTIONS: [&str; 4] = [
    "Describe the detailed objects in the video.",
    "Describe the colors of the objects in the video.",
    "Describe the motion of the objects in the video.",
    "Describe the spatial relations between the objects in the video.",
];

pub const INSTRUCTION_COUNT: usize = 4;

/// Encoder values are clipped to this magnitude.
pub const ENCODER_CLIP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextSimulator {
    pub d: usize,
    pub sigma_encoder: f64,
    pub sigma_decoder: f64,
    pub sigma_answer: f64,
}

impl Default for TextSimulator {
    fn default() -> Self {
        Self { d: 32, sigma_encoder: 0.17, sigma_decoder: 1.2, sigma_answer: 0.5 }
    }
}

fn words(prompt: &str) -> Result<Vec<&str>> {
    let w: Vec<&str> = prompt.split_whitespace().collect();
    if w.is_empty() {
        return Err(Error::Input("prompt has no words".into()));
    }
    Ok(w)
}

fn token_seed(domain: &str, word: &str, position: Option<usize>) -> u64 {
    let mut key = Vec::with_capacity(domain.len() + word.len() + 10);
    key.extend_from_slice(domain.as_bytes());
    key.push(0);
    key.extend_from_slice(word.as_bytes());
    if let Some(p) = position {
        key.push(0);
        key.extend_from_slice(&(p as u64).to_le_bytes());
    }
    fnv1a(&key)
}

impl TextSimulator {
    fn gaussian_row(&self, seed: u64, sigma: f64) -> impl Iterator<Item = f64> {
        let mut rng = Rng::new(seed);
        (0..self.d).map(move |_| sigma * rng.normal())
    }

    /// One clipped narrow-range token per whitespace word.
    pub fn encode_encoder(&self, prompt: &str) -> Result<Tensor> {
        let words = words(prompt)?;
        let data = words
            .iter()
            .enumerate()
            .flat_map(|(i, w)| {
                self.gaussian_row(token_seed("encoder", w, Some(i)), self.sigma_encoder)
                    .map(|v| v.clamp(-ENCODER_CLIP, ENCODER_CLIP))
            })
            .collect();
        Tensor::new(data, &[words.len(), self.d], DType::F32)
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        self.gaussian_row(token_seed("decoder-word", word, None), self.sigma_decoder).collect()
    }

    /// Deterministic wide-range query tokens.
    pub fn encode_query(&self, prompt: &str) -> Result<Tensor> {
        let words = words(prompt)?;
        let data = words
            .iter()
            .enumerate()
            .flat_map(|(i, w)| self.gaussian_row(token_seed("decoder-query", w, Some(i)), self.sigma_decoder))
            .collect();
        Tensor::new(data, &[words.len(), self.d], DType::F32)
    }

    /// `max(4, m)` answer tokens: each restates a randomly chosen prompt word
    /// with a seed-dependent perturbation.
    pub fn encode_answer(&self, prompt: &str, answer_seed: u64) -> Result<Tensor> {
        let words = words(prompt)?;
        let count = words.len().max(4);
        let mut rng = Rng::stream(answer_seed ^ fnv1a(prompt.as_bytes()), "answer");
        let mut data = Vec::with_capacity(count * self.d);
        for _ in 0..count {
            let base = self.word_vector(words[rng.below(words.len())]);
            data.extend(base.into_iter().map(|v| v + self.sigma_answer * rng.normal()));
        }
        Tensor::new(data, &[count, self.d], DType::F32)
    }

    pub fn encode_decoder(&self, prompt: &str, answer_seed: u64) -> Result<(Tensor, Tensor)> {
        Ok((self.encode_query(prompt)?, self.encode_answer(prompt, answer_seed)?))
    }

    /// Mean-pooled decoder query tokens of each of exactly four instructions.
    pub fn instruction_tokens(&self, instructions: &[&str]) -> Result<Tensor> {
        if instructions.len() != INSTRUCTION_COUNT {
            return Err(Error::Arity { expected: INSTRUCTION_COUNT, actual: instructions.len() });
        }
        let rows = instructions
            .iter()
            .map(|text| self.encode_query(text)?.mean_axis(0)?.reshape(&[1, self.d]))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&rows, 0)
    }

    pub fn bundle(&self, prompt: &str, answer_seed: u64) -> Result<TokenBundle> {
        let (decoder_query, decoder_answer) = self.encode_decoder(prompt, answer_seed)?;
        TokenBundle::new(
            prompt,
            answer_seed,
            self.encode_encoder(prompt)?,
            decoder_query,
            decoder_answer,
            self.instruction_tokens(&DEFAULT_INSTRUCTIONS)?,
        )
    }
}

#[derive(Debug, Clone)]
pub struct TokenBundle {
    pub prompt: String,
    pub answer_seed: u64,
    pub encoder: Tensor,
    pub decoder_query: Tensor,
    pub decoder_answer: Tensor,
    pub instruction: Tensor,
}

impl TokenBundle {
    pub fn new(
        prompt: &str,
        answer_seed: u64,
        encoder: Tensor,
        decoder_query: Tensor,
        decoder_answer: Tensor,
        instruction: Tensor,
    ) -> Result<Self> {
        let b = Self { prompt: prompt.to_string(), answer_seed, encoder, decoder_query, decoder_answer, instruction };
        b.validate(None)?;
        Ok(b)
    }

    pub fn width(&self) -> usize {
        self.encoder.shape().get(1).copied().unwrap_or(0)
    }

    /// Checks ranks, common width (optionally equal to `d`) and the four
    /// instruction rows.
    pub fn validate(&self, d: Option<usize>) -> Result<()> {
        let d = d.unwrap_or_else(|| self.width());
        for (name, t) in [
            ("encoder", &self.encoder),
            ("decoder_query", &self.decoder_query),
            ("decoder_answer", &self.decoder_answer),
            ("instruction", &self.instruction),
        ] {
            let (_, w) = t.dims2().map_err(|_| Error::Ingest(format!("{name} must be rank 2, got {:?}", t.shape())))?;
            if w != d {
                return Err(Error::Ingest(format!("{name} has width {w}, expected {d}")));
            }
        }
        if self.instruction.shape()[0] != INSTRUCTION_COUNT {
            return Err(Error::Ingest(format!(
                "instruction must have {INSTRUCTION_COUNT} rows, got {}",
                self.instruction.shape()[0]
            )));
        }
        if self.encoder.shape()[0] == 0 {
            return Err(Error::Ingest("encoder has no tokens".into()));
        }
        Ok(())
    }

    /// e_β: query tokens followed by answer tokens.
    pub fn decoder_tokens(&self) -> Result<Tensor> {
        Tensor::concat(&[self.decoder_query.clone(), self.decoder_answer.clone()], 0)
    }

    /// Writes MTF1 files plus `manifest.json` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, t) in [
            ("encoder", &self.encoder),
            ("decoder_query", &self.decoder_query),
            ("decoder_answer", &self.decoder_answer),
            ("instruction", &self.instruction),
        ] {
            write_tensor(t, dir.join(format!("{name}.mtf")))?;
        }
        let manifest = serde_json::json!({
            "prompt": self.prompt,
            "answer_seed": self.answer_seed,
            "encoder": "encoder.mtf",
            "decoder_query": "decoder_query.mtf",
            "decoder_answer": "decoder_answer.mtf",
            "instruction": "instruction.mtf",
            "d": self.width(),
        });
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }
}

/// Loads and validates a dump written by [`TokenBundle::export`] or by an
/// external exporter following the same manifest layout.
pub fn load_embedding_dump(dir: impl AsRef<Path>, d: usize) -> Result<TokenBundle> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let manifest: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Ingest(format!("manifest.json: {e}")))?;
    let field = |key: &str| -> Result<&serde_json::Value> {
        manifest.get(key).ok_or_else(|| Error::Ingest(format!("manifest is missing `{key}`")))
    };
    let string = |key: &str| -> Result<String> {
        field(key)?.as_str().map(str::to_string).ok_or_else(|| Error::Ingest(format!("`{key}` must be a string")))
    };
    let load = |key: &str| -> Result<Tensor> {
        let file = string(key)?;
        read_tensor(dir.join(&file)).map_err(|e| Error::Ingest(format!("`{key}` ({file}): {e}")))
    };
    let prompt = string("prompt")?;
    let declared = field("d")?.as_u64().ok_or_else(|| Error::Ingest("`d` must be an integer".into()))? as usize;
    if declared != d {
        return Err(Error::Ingest(format!("dump declares d = {declared}, expected {d}")));
    }
    let bundle = TokenBundle {
        answer_seed: manifest.get("answer_seed").and_then(|v| v.as_u64()).unwrap_or(0),
        encoder: load("encoder")?,
        decoder_query: load("decoder_query")?,
        decoder_answer: load("decoder_answer")?,
        instruction: load("instruction")?,
        prompt,
    };
    bundle.validate(Some(d))?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim() -> TextSimulator {
        TextSimulator::default()
    }

    fn stds(t: &Tensor) -> f64 {
        let v = t.var_axis(0).unwrap();
        v.data().iter().map(|x| x.sqrt()).sum::<f64>() / v.numel() as f64
    }

    #[test]
    fn encoder_is_deterministic_and_word_counted() {
        let a = sim().encode_encoder("two red squares").unwrap();
        let b = sim().encode_encoder("two red squares").unwrap();
        assert_eq!(a.shape(), &[3, 32]);
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&sim().encode_encoder("two blue squares").unwrap()));
    }

    #[test]
    fn empty_prompt_is_an_input_error() {
        assert!(matches!(sim().encode_encoder("   "), Err(Error::Input(_))));
        assert!(matches!(sim().encode_decoder("", 1), Err(Error::Input(_))));
    }

    #[test]
    fn encoder_values_concentrate_in_half_unit_band() {
        let s = TextSimulator { d: 100, ..sim() };
        let prompt: String = (0..100).map(|i| format!("w{i} ")).collect();
        let t = s.encode_encoder(&prompt).unwrap();
        assert_eq!(t.numel(), 10_000);
        let inside = t.data().iter().filter(|v| v.abs() <= 0.5).count();
        assert!(inside as f64 >= 0.99 * 10_000.0);
    }

    #[test]
    fn decoder_values_exceed_unit_band() {
        let s = TextSimulator { d: 100, ..sim() };
        let prompt: String = (0..50).map(|i| format!("w{i} ")).collect();
        let (q, a) = s.encode_decoder(&prompt, 3).unwrap();
        let outside = q.data().iter().chain(a.data()).filter(|v| v.abs() > 1.0).count();
        assert!(outside > 0);
    }

    #[test]
    fn answers_vary_with_seed_but_queries_do_not() {
        let prompt = "2 red squares moving left";
        let runs: Vec<(Tensor, Tensor)> = (0..50).map(|s| sim().encode_decoder(prompt, s).unwrap()).collect();
        assert!(runs.iter().all(|(q, _)| q.bit_eq(&runs[0].0)));
        assert_eq!(runs[0].1.shape(), &[5, 32]);
        let first = &runs[0].1;
        assert!(runs.iter().skip(1).any(|(_, a)| !a.bit_eq(first)));
        let again = sim().encode_decoder(prompt, 7).unwrap();
        assert!(again.1.bit_eq(&runs[7].1));
    }

    #[test]
    fn short_prompts_still_get_four_answers() {
        let (q, a) = sim().encode_decoder("hi", 0).unwrap();
        assert_eq!(q.shape(), &[1, 32]);
        assert_eq!(a.shape(), &[4, 32]);
    }

    #[test]
    fn decoder_spread_dominates_encoder_spread() {
        let prompt = "3 green squares moving up quickly across the frame";
        let enc = sim().encode_encoder(prompt).unwrap();
        let bundle = sim().bundle(prompt, 1).unwrap();
        let dec = bundle.decoder_tokens().unwrap();
        assert!(stds(&dec) >= 4.0 * stds(&enc), "{} vs {}", stds(&dec), stds(&enc));
    }

    #[test]
    fn instruction_rows_follow_instruction_order() {
        let s = sim();
        let fwd = s.instruction_tokens(&DEFAULT_INSTRUCTIONS).unwrap();
        assert_eq!(fwd.shape(), &[4, 32]);
        let rev: Vec<&str> = DEFAULT_INSTRUCTIONS.iter().rev().copied().collect();
        let back = s.instruction_tokens(&rev).unwrap();
        for r in 0..4 {
            assert_eq!(fwd.data()[r * 32..(r + 1) * 32], back.data()[(3 - r) * 32..(4 - r) * 32]);
        }
        assert!(matches!(s.instruction_tokens(&DEFAULT_INSTRUCTIONS[..3]), Err(Error::Arity { expected: 4, actual: 3 })));
    }

    #[test]
    fn dump_roundtrip_and_ingestion_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = sim().bundle("1 blue squares moving up", 9).unwrap();
        bundle.export(dir.path()).unwrap();
        let back = load_embedding_dump(dir.path(), 32).unwrap();
        assert!(back.encoder.bit_eq(&bundle.encoder));
        assert!(back.decoder_query.bit_eq(&bundle.decoder_query));
        assert!(back.decoder_answer.bit_eq(&bundle.decoder_answer));
        assert!(back.instruction.bit_eq(&bundle.instruction));
        assert_eq!(back.prompt, bundle.prompt);
        assert_eq!(back.answer_seed, 9);

        assert!(matches!(load_embedding_dump(dir.path(), 16), Err(Error::Ingest(_))));

        let manifest_path = dir.path().join("manifest.json");
        let mut manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
        manifest.as_object_mut().unwrap().remove("instruction");
        std::fs::write(&manifest_path, manifest.to_string()).unwrap();
        let err = load_embedding_dump(dir.path(), 32).unwrap_err();
        assert!(err.to_string().contains("instruction"), "{err}");

        // restore the key but ship only three instruction rows
        bundle.export(dir.path()).unwrap();
        write_tensor(&bundle.instruction.narrow(0, 0, 3).unwrap(), dir.path().join("instruction.mtf")).unwrap();
        let err = load_embedding_dump(dir.path(), 32).unwrap_err();
        assert!(matches!(err, Error::Ingest(_)) && err.to_string().contains("4 rows"), "{err}");
    }
}
