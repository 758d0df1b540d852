//! Entity dictionary handling and copy supervision targets.
//!
//! A dictionary is an ordered list of token sequences with index 0 reserved
//! for the no-copy marker. Per-batch dictionaries collect the batch's gold
//! entities, pseudo-entities sampled from entity-free transcripts, and
//! negative examples sampled from the global training inventory. Copy targets
//! come from greedy left-to-right maximum matching of the transcript against
//! the dictionary.

use std::collections::HashSet;
use std::path::Path;

use crate::corpus::EntitySpan;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Index 0: the no-copy marker.
    NoCopy,
    Gold,
    Pseudo,
    Negative,
}

/// Ordered entity dictionary. Entry 0 is the no-copy marker (an empty token
/// sequence); every other entry is a deduplicated token sequence of length
/// at least 2 containing only content tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityDict {
    entries: Vec<Vec<u32>>,
    provenance: Vec<Provenance>,
    seen: HashSet<Vec<u32>>,
}

impl Default for EntityDict {
    fn default() -> Self {
        EntityDict::new()
    }
}

impl EntityDict {
    pub fn new() -> Self {
        EntityDict {
            entries: vec![Vec::new()],
            provenance: vec![Provenance::NoCopy],
            seen: HashSet::new(),
        }
    }

    /// Number of entries including the no-copy marker.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.len() == 1
    }

    /// Non-marker entry count.
    pub fn n_entities(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn entry(&self, idx: usize) -> &[u32] {
        &self.entries[idx]
    }

    pub fn provenance(&self, idx: usize) -> Provenance {
        self.provenance[idx]
    }

    pub fn entries(&self) -> impl Iterator<Item = &[u32]> {
        self.entries.iter().map(|e| e.as_slice())
    }

    pub fn contains(&self, tokens: &[u32]) -> bool {
        self.seen.contains(tokens)
    }

    /// Append an entity if not already present. Returns its index, or None
    /// if it was a duplicate.
    pub fn push(&mut self, tokens: Vec<u32>, provenance: Provenance) -> Result<Option<usize>> {
        if tokens.len() < 2 {
            return Err(Error::Dict(format!(
                "entity must have at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        if tokens.iter().any(|&t| (t as usize) < crate::vocab::RESERVED) {
            return Err(Error::Dict("entity contains a reserved token".into()));
        }
        if self.seen.contains(&tokens) {
            return Ok(None);
        }
        self.seen.insert(tokens.clone());
        self.entries.push(tokens);
        self.provenance.push(provenance);
        Ok(Some(self.entries.len() - 1))
    }
}

/// One training instance as the batch-dictionary builder sees it.
#[derive(Debug, Clone, Copy)]
pub struct BatchInstance<'a> {
    pub tokens: &'a [u32],
    pub spans: &'a [EntitySpan],
}

/// Build the per-batch dictionary: the no-copy marker, every gold entity of
/// the batch (deduplicated, in encounter order), one or two pseudo-entities
/// (contiguous substrings of length 2 or 3) per entity-free instance, and
/// floor(beta * m) negatives sampled uniformly without replacement from the
/// global inventory minus entries already present, where m is the non-marker
/// count before negatives.
pub fn build_batch_dict(
    batch: &[BatchInstance<'_>],
    global: &[Vec<u32>],
    beta: f64,
    rng: &StreamRng,
) -> Result<EntityDict> {
    assert!(beta >= 0.0);
    let mut dict = EntityDict::new();
    for inst in batch {
        for span in inst.spans {
            dict.push(inst.tokens[span.start..span.end].to_vec(), Provenance::Gold)?;
        }
    }
    let mut pseudo_rng = rng.stream("pseudo");
    for inst in batch {
        if !inst.spans.is_empty() {
            continue;
        }
        let len = inst.tokens.len();
        if len < 2 {
            continue; // too short to sample from; not an error
        }
        let count = pseudo_rng.range_inclusive(1, 2);
        for _ in 0..count {
            // Rejection on duplicates, bounded so a saturated transcript
            // cannot loop forever.
            for _attempt in 0..16 {
                let max_sub = 3.min(len);
                let sub_len = pseudo_rng.range_inclusive(2, max_sub);
                let start = pseudo_rng.below(len - sub_len + 1);
                let candidate = inst.tokens[start..start + sub_len].to_vec();
                if dict.push(candidate, Provenance::Pseudo)?.is_some() {
                    break;
                }
            }
        }
    }
    let m = dict.n_entities();
    let want = (beta * m as f64).floor() as usize;
    if want > 0 {
        let candidates: Vec<&Vec<u32>> =
            global.iter().filter(|e| !dict.contains(e)).collect();
        let take = want.min(candidates.len());
        let mut neg_rng = rng.stream("negatives");
        for idx in neg_rng.sample_indices(candidates.len(), take) {
            dict.push(candidates[idx].clone(), Provenance::Negative)?;
        }
    }
    Ok(dict)
}

/// Copy supervision: `sigma[u]` is the dictionary index the decoder should
/// copy at decoding step u (0 = copy nothing). If `sigma[i] = k` for an
/// entity of length L, positions i+1 .. i+L-1 are 0 and the transcript slice
/// at i..i+L equals entry k exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyTargets {
    pub sigma: Vec<usize>,
}

/// Greedy left-to-right maximum matching of the transcript against the
/// dictionary. At each position the longest matching entry wins (ties are
/// impossible after deduplication); unmatched positions advance by one.
pub fn build_copy_targets(tokens: &[u32], dict: &EntityDict) -> CopyTargets {
    let u = tokens.len();
    let mut sigma = vec![0usize; u];
    let mut pos = 0;
    while pos < u {
        let mut best: Option<(usize, usize)> = None; // (len, idx)
        for idx in 1..dict.len() {
            let entry = dict.entry(idx);
            let l = entry.len();
            if l >= 2 && pos + l <= u && &tokens[pos..pos + l] == entry {
                if best.map_or(true, |(bl, _)| l > bl) {
                    best = Some((l, idx));
                }
            }
        }
        match best {
            Some((l, idx)) => {
                sigma[pos] = idx;
                pos += l;
            }
            None => pos += 1,
        }
    }
    CopyTargets { sigma }
}

impl CopyTargets {
    /// Check the structural invariant against the transcript and dictionary.
    pub fn validate(&self, tokens: &[u32], dict: &EntityDict) -> bool {
        if self.sigma.len() != tokens.len() {
            return false;
        }
        let mut i = 0;
        while i < self.sigma.len() {
            let k = self.sigma[i];
            if k == 0 {
                i += 1;
                continue;
            }
            let entry = dict.entry(k);
            let l = entry.len();
            if i + l > tokens.len() || &tokens[i..i + l] != entry {
                return false;
            }
            if self.sigma[i + 1..i + l].iter().any(|&s| s != 0) {
                return false;
            }
            i += l;
        }
        true
    }
}

/// Load an entity dictionary file: UTF-8, one entity per line. Duplicates
/// are dropped silently, single-character entries are dropped with a warning,
/// and out-of-vocabulary symbols are an error.
pub fn load_dict(path: &Path, vocab: &Vocab) -> Result<(EntityDict, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let pathname = path.display().to_string();
    let mut dict = EntityDict::new();
    let mut warnings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            return Err(Error::parse(&pathname, i + 1, "blank line in dictionary"));
        }
        let tokens = vocab
            .encode(line)
            .map_err(|e| Error::parse(&pathname, i + 1, e.to_string()))?;
        if tokens.len() < 2 {
            warnings.push(format!("line {}: dropped length-1 entity `{line}`", i + 1));
            continue;
        }
        dict.push(tokens, Provenance::Gold)?;
    }
    Ok((dict, warnings))
}
