//! Inference: the re-normalized token/entity distribution, the copy
//! confidence threshold, and beam search over joint token/entity actions.
//!
//! A hypothesis extends either by one token or by all tokens of a dictionary
//! entity; either way it costs one action and contributes a single log-Q
//! term, which is what makes copying attractive for multi-token entities.
//! Beams are synchronized by action count; finished hypotheses are parked
//! and compared by raw cumulative score at the end.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{Graph, Tensor};
use crate::corpus::AcousticFrames;
use crate::dict::EntityDict;
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::vocab::{BOS, EOS, RESERVED};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub gamma: f64,
    pub max_actions: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_width: 8, gamma: 0.9, max_actions: 64 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_actions == 0 {
            return Err(Error::Config("beam_width and max_actions must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// A copied entity span in emitted-token coordinates (bos/eos stripped),
/// end-exclusive, with the dictionary index that was copied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopiedSpan {
    pub start: usize,
    pub end: usize,
    pub dict_index: usize,
}

/// A partial decode: bos-prefixed token history (entity copies flattened),
/// cumulative log-Q score over exactly `actions` terms, and a finished flag
/// set once eos has been emitted.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub actions: usize,
    pub finished: bool,
    pub copied_spans: Vec<CopiedSpan>,
}

impl Hypothesis {
    fn start() -> Self {
        Hypothesis { tokens: vec![BOS], score: 0.0, actions: 0, finished: false, copied_spans: Vec::new() }
    }

    /// Emitted tokens with the bos prefix stripped (eos is never stored).
    pub fn emitted(&self) -> &[u32] {
        &self.tokens[1..]
    }
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub copied_spans: Vec<CopiedSpan>,
    pub truncated: bool,
}

/// The mixed distribution over tokens and real entities. `tokens[v]` covers
/// the vocabulary (blank always 0); `entities[e]` covers dictionary indices
/// (entry 0, the no-copy marker, always 0 — its mass lives inside the token
/// part). The whole thing sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct QDist {
    pub tokens: Vec<f64>,
    pub entities: Vec<f64>,
}

impl QDist {
    pub fn total(&self) -> f64 {
        self.tokens.iter().sum::<f64>() + self.entities.iter().sum::<f64>()
    }
}

/// Re-normalize token and copy probabilities into one distribution, applying
/// the confidence threshold first: when the best real-entity copy probability
/// is below `gamma`, copying is disabled for this step and the token
/// distribution passes through exactly.
pub fn renormalized_q(p_token: &[f64], p_c: &[f64], gamma: f64) -> QDist {
    debug_assert!(!p_c.is_empty());
    let max_real = p_c.iter().skip(1).cloned().fold(f64::NEG_INFINITY, f64::max);
    let blocked = p_c.len() == 1 || max_real < gamma;
    if blocked {
        QDist { tokens: p_token.to_vec(), entities: vec![0.0; p_c.len()] }
    } else {
        let scale = p_c[0];
        let tokens = p_token.iter().map(|&p| scale * p).collect();
        let mut entities = p_c.to_vec();
        entities[0] = 0.0;
        QDist { tokens, entities }
    }
}

/// Per-step distribution source for the beam search: token probabilities
/// over the vocabulary and copy probabilities over the dictionary.
pub trait StepScorer: Sync {
    fn distributions(&self, history: &[u32]) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Production scorer: encoder output (and entity representations) are
/// evaluated once, then each step runs the decoder over the flattened token
/// history and reads the heads' last row.
pub struct ModelScorer<'a> {
    model: &'a Model,
    h: Tensor,
    z: Option<Tensor>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, frames: &AcousticFrames, z: Option<&Tensor>) -> Result<Self> {
        let frames = model.frames_to_tensor(frames)?;
        let mut g = Graph::new(&model.params);
        let h = model.encode_audio(&mut g, &frames)?;
        let h = g.value(h).clone();
        if model.mode == Mode::CopyNe && z.is_none() {
            return Err(Error::Decode("copy-mode scorer needs entity representations".into()));
        }
        Ok(ModelScorer { model, h, z: z.cloned() })
    }
}

/// Evaluate the dictionary's entity representations once for reuse across a
/// batch of utterances.
pub fn encode_entities_values(model: &Model, dict: &EntityDict) -> Result<Tensor> {
    let mut g = Graph::new(&model.params);
    let z = model.encode_entities(&mut g, dict)?;
    Ok(g.value(z).clone())
}

impl StepScorer for ModelScorer<'_> {
    fn distributions(&self, history: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new(&self.model.params);
        let h = g.constant(self.h.clone());
        let d = self.model.decoder_states(&mut g, history, h)?;
        let last = g.slice(d, 0, history.len() - 1, history.len())?;
        match self.model.mode {
            Mode::Baseline => {
                let p = self.model.baseline_step(&mut g, last)?;
                Ok((g.value(p).data().to_vec(), vec![1.0]))
            }
            Mode::CopyNe => {
                let z = g.constant(self.z.clone().expect("checked in constructor"));
                let (_, pc) = self.model.copy_attention(&mut g, last, z)?;
                let (_, pt) = self.model.dict_enhanced_step(&mut g, last, z, pc)?;
                Ok((g.value(pt).data().to_vec(), g.value(pc).data().to_vec()))
            }
        }
    }
}

/// Mixed token/entity beam search over the dictionary. Returns the finished
/// hypothesis with the highest raw cumulative score; if nothing finishes
/// within `max_actions`, the best unfinished hypothesis is returned with the
/// truncation flag set.
pub fn beam_search_copyne(
    model: &Model,
    frames: &AcousticFrames,
    dict: &EntityDict,
    config: &BeamConfig,
) -> Result<DecodeResult> {
    if model.mode != Mode::CopyNe {
        return Err(Error::Decode("copy decoding requires a copy-mode checkpoint".into()));
    }
    let z = encode_entities_values(model, dict)?;
    let scorer = ModelScorer::new(model, frames, Some(&z))?;
    beam_search(&scorer, dict, true, config)
}

/// Token-only beam search. For a baseline-mode model this scores with the
/// plain head; for a copy-mode model it scores with the dictionary-enhanced
/// head over `dict` (defaulting to the marker-only dictionary) but never
/// takes copy actions.
pub fn beam_search_baseline(
    model: &Model,
    frames: &AcousticFrames,
    dict: Option<&EntityDict>,
    config: &BeamConfig,
) -> Result<DecodeResult> {
    let marker_only = EntityDict::new();
    let dict = dict.unwrap_or(&marker_only);
    let z;
    let scorer = match model.mode {
        Mode::Baseline => ModelScorer::new(model, frames, None)?,
        Mode::CopyNe => {
            z = encode_entities_values(model, dict)?;
            ModelScorer::new(model, frames, Some(&z))?
        }
    };
    beam_search(&scorer, dict, false, config)
}

/// Candidate ordering: score (desc), then fewer tokens, then lexicographically
/// smaller token ids. Deterministic for testing.
fn better(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Core search, generic over the distribution source so tests can drive it
/// with hand-built scorers.
pub fn beam_search(
    scorer: &dyn StepScorer,
    dict: &EntityDict,
    copy_enabled: bool,
    config: &BeamConfig,
) -> Result<DecodeResult> {
    config.validate()?;
    let mut live = vec![Hypothesis::start()];
    let mut done: Vec<Hypothesis> = Vec::new();

    for _round in 0..config.max_actions {
        if live.is_empty() {
            break;
        }
        // Scores only decrease, so once the best parked hypothesis beats
        // every live one the search cannot improve.
        if let Some(best_done) = done.first() {
            if live.iter().all(|h| h.score < best_done.score) {
                break;
            }
        }
        let mut pool: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let (p_token, p_c) = scorer.distributions(&hyp.tokens)?;
            let q = if copy_enabled {
                renormalized_q(&p_token, &p_c, config.gamma)
            } else {
                QDist { tokens: p_token, entities: vec![0.0; p_c.len()] }
            };
            // Token actions: content tokens and eos. Blank is masked by the
            // head; bos and unk are structurally excluded from emission.
            for v in std::iter::once(EOS as usize).chain(RESERVED..q.tokens.len()) {
                let p = q.tokens[v];
                if p <= 0.0 {
                    continue;
                }
                let mut next = hyp.clone();
                next.score += p.ln();
                next.actions += 1;
                if v == EOS as usize {
                    next.finished = true;
                } else {
                    next.tokens.push(v as u32);
                }
                pool.push(next);
            }
            for e in 1..q.entities.len() {
                let p = q.entities[e];
                if p <= 0.0 {
                    continue;
                }
                let entry = dict.entry(e);
                let mut next = hyp.clone();
                let start = next.tokens.len() - 1;
                next.tokens.extend_from_slice(entry);
                next.copied_spans.push(CopiedSpan { start, end: start + entry.len(), dict_index: e });
                next.score += p.ln();
                next.actions += 1;
                pool.push(next);
            }
        }
        pool.sort_by(better);
        pool.truncate(config.beam_width);
        live = Vec::new();
        for hyp in pool {
            if hyp.finished {
                done.push(hyp);
            } else {
                live.push(hyp);
            }
        }
        done.sort_by(better);
    }

    let (hyp, truncated) = match done.first() {
        Some(best) => (best.clone(), false),
        None => {
            live.sort_by(better);
            let best = live
                .first()
                .ok_or_else(|| Error::Decode("beam search exhausted all hypotheses".into()))?;
            (best.clone(), true)
        }
    };
    Ok(DecodeResult {
        tokens: hyp.emitted().to_vec(),
        score: hyp.score,
        copied_spans: hyp.copied_spans,
        truncated,
    })
}

/// Decode a list of utterances, in manifest order, in parallel. `dict` is
/// required for copy-mode models.
pub fn decode_utterances(
    model: &Model,
    utterances: &[crate::corpus::Utterance],
    dict: Option<&EntityDict>,
    config: &BeamConfig,
) -> Result<Vec<(String, DecodeResult)>> {
    let z = match (model.mode, dict) {
        (Mode::CopyNe, Some(d)) => Some(encode_entities_values(model, d)?),
        (Mode::CopyNe, None) => {
            return Err(Error::Decode("copy-mode decoding requires a dictionary".into()))
        }
        (Mode::Baseline, _) => None,
    };
    let marker_only = EntityDict::new();
    let dict_ref = dict.unwrap_or(&marker_only);
    utterances
        .par_iter()
        .map(|u| {
            let scorer = ModelScorer::new(model, &u.frames, z.as_ref())?;
            let result = beam_search(&scorer, dict_ref, model.mode == Mode::CopyNe, config)?;
            Ok((u.utt_id.clone(), result))
        })
        .collect()
}

/// One decode-output line: utterance id, hypothesis text, score, and the
/// copied spans as `start-end:dictIndex` joined by semicolons.
pub fn format_decode_line(utt_id: &str, text: &str, score: f64, spans: &[CopiedSpan]) -> String {
    let spans = spans
        .iter()
        .map(|s| format!("{}-{}:{}", s.start, s.end, s.dict_index))
        .collect::<Vec<_>>()
        .join(";");
    format!("{utt_id}\t{text}\t{score:.6}\t{spans}\n")
}

/// Parse a decode-output file back into (utt_id, hypothesis text) pairs.
pub fn load_decode_output(path: &Path) -> Result<Vec<(String, String)>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let pathname = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                &pathname,
                i + 1,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        out.push((fields[0].to_string(), fields[1].to_string()));
    }
    Ok(out)
}

/// Hypotheses keyed by utterance id, as the scorer wants them.
pub fn hypotheses_by_id(rows: &[(String, String)]) -> HashMap<String, Vec<char>> {
    rows.iter().map(|(id, text)| (id.clone(), text.chars().collect())).collect()
}
