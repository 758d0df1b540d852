//! Synthetic homophone corpus.
//!
//! The generator builds a character lexicon whose characters are many-to-one
//! mapped onto "syllables": acoustics depend only on the syllable, so two
//! characters sharing one are acoustically identical. Filler text is drawn
//! from a Zipf unigram over filler characters; entity characters appear only
//! inside entities, which makes them rare and pushes a token-level model
//! toward the frequent homophonic filler character — exactly the error mode
//! the copy mechanism is meant to fix. Test-split entities are disjoint from
//! training ones so inference always faces unseen entity strings.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

const CHAR_POOL: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

const FRAMES_MAGIC: &[u8; 4] = b"CPNF";
const FRAMES_VERSION: u16 = 1;

/// A T x D matrix of acoustic frames, stored as f32 to match the file format.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFrames {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl AcousticFrames {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 || data.len() != rows * dim {
            return Err(Error::shape(
                "frames",
                format!("{rows}x{dim} frames need {} values, got {}", rows * dim, data.len()),
            ));
        }
        Ok(AcousticFrames { rows, dim, data })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }
}

/// Character lexicon: characters, their syllable ids, and the per-syllable
/// embedding matrix fixed at generation time.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub chars: Vec<char>,
    pub syllable_of: Vec<usize>,
    pub n_syllables: usize,
    /// S x D row-major syllable embeddings.
    pub embeddings: Vec<f32>,
    pub dim: usize,
}

impl Lexicon {
    pub fn syllable_of_char(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| self.syllable_of[i])
    }

    pub fn embedding(&self, syllable: usize) -> &[f32] {
        &self.embeddings[syllable * self.dim..(syllable + 1) * self.dim]
    }
}

/// Everything the generator decided about the lexicon, including the
/// filler/entity character split that is not persisted in the lexicon file.
#[derive(Debug, Clone)]
pub struct LexiconBuild {
    pub lexicon: Lexicon,
    pub filler_chars: Vec<char>,
    pub entity_chars: Vec<char>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_chars: usize,
    pub n_syllables: usize,
    pub frame_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub noise_stddev: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_train_entities: usize,
    pub n_test_entities: usize,
    pub entity_min_len: usize,
    pub entity_max_len: usize,
    /// Fraction of utterances that embed 1-2 entities.
    pub entity_fraction: f64,
    /// Probability that an entity character is assigned a syllable shared
    /// with at least one filler character.
    pub trap_rate: f64,
    pub filler_min: usize,
    pub filler_max: usize,
    pub zipf_exponent: f64,
    /// Minimum pairwise distance between syllable embeddings, enforced by
    /// rejection sampling; together with noise_stddev this sets how hard the
    /// acoustic recognition task is.
    pub embed_min_dist: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_chars: 60,
            n_syllables: 24,
            frame_dim: 16,
            frames_min: 2,
            frames_max: 3,
            noise_stddev: 0.3,
            n_train: 2000,
            n_dev: 300,
            n_test: 300,
            n_train_entities: 40,
            n_test_entities: 30,
            entity_min_len: 2,
            entity_max_len: 4,
            entity_fraction: 0.6,
            trap_rate: 1.0,
            filler_min: 4,
            filler_max: 9,
            zipf_exponent: 1.0,
            embed_min_dist: 1.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_syllables < 2 {
            return Err(Error::Config("n_syllables must be at least 2".into()));
        }
        if self.n_chars <= self.n_syllables {
            return Err(Error::Config(format!(
                "n_chars ({}) must exceed n_syllables ({}) so homophones exist",
                self.n_chars, self.n_syllables
            )));
        }
        if self.n_chars > CHAR_POOL.chars().count() {
            return Err(Error::Config(format!(
                "n_chars ({}) exceeds the available symbol pool ({})",
                self.n_chars,
                CHAR_POOL.chars().count()
            )));
        }
        if self.frame_dim == 0 || self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::Config("bad frame settings".into()));
        }
        if self.noise_stddev < 0.0 {
            return Err(Error::Config("noise_stddev must be nonnegative".into()));
        }
        if self.entity_min_len < 2 || self.entity_min_len > self.entity_max_len {
            return Err(Error::Config("entity lengths must satisfy 2 <= min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.entity_fraction) || !(0.0..=1.0).contains(&self.trap_rate) {
            return Err(Error::Config("entity_fraction and trap_rate must be in [0,1]".into()));
        }
        if self.filler_min > self.filler_max {
            return Err(Error::Config("filler_min must not exceed filler_max".into()));
        }
        if !(0.0..2.0).contains(&self.embed_min_dist) {
            return Err(Error::Config("embed_min_dist must be in [0, 2)".into()));
        }
        Ok(())
    }

    /// All characters beyond one filler per syllable become entity
    /// characters. At trap_rate 1.0 this leaves filler characters without
    /// filler homophones (each shares its syllable only with entity chars),
    /// so filler text stays decodable while entities require the dictionary.
    fn n_entity_chars(&self) -> usize {
        (self.n_chars - self.n_syllables).max(2)
    }
}

/// Entity span in a transcript: [start, end) character positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub utt_id: String,
    pub frames: AcousticFrames,
    pub transcript: String,
    pub entity_spans: Vec<EntitySpan>,
}

impl Utterance {
    pub fn span_text(&self, span: EntitySpan) -> String {
        self.transcript.chars().skip(span.start).take(span.end - span.start).collect()
    }
}

/// One manifest line before the frames file has been read.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub frames_path: String,
    pub transcript: String,
    pub spans: Vec<EntitySpan>,
}

/// Build the character-to-syllable lexicon.
///
/// Characters are taken from a fixed pool; the first part of the list is
/// filler characters, the rest are entity characters. Syllable sizes are
/// balanced. Trapped entity characters land in syllables that contain at
/// least one filler character; untrapped ones get entity-only syllables.
pub fn gen_lexicon(config: &SynthConfig, rng: &StreamRng) -> Result<LexiconBuild> {
    config.validate()?;
    let chars: Vec<char> = CHAR_POOL.chars().take(config.n_chars).collect();
    let n_entity = config.n_entity_chars();
    if n_entity >= config.n_chars {
        return Err(Error::Config("entity chars exceed available characters".into()));
    }
    let n_filler = config.n_chars - n_entity;
    let filler_chars: Vec<char> = chars[..n_filler].to_vec();
    let entity_chars: Vec<char> = chars[n_filler..].to_vec();

    let mut lex_rng = rng.stream("lexicon");
    let trapped: Vec<bool> = (0..n_entity).map(|_| lex_rng.bernoulli(config.trap_rate)).collect();
    let untrapped_count = trapped.iter().filter(|&&t| !t).count();

    // Balanced target sizes, larger ones first.
    let k = config.n_syllables;
    let base = config.n_chars / k;
    let rem = config.n_chars % k;
    let sizes: Vec<usize> = (0..k).map(|i| base + usize::from(i < rem)).collect();

    // Entity-only syllables are taken from the tail.
    let mut entity_only = 0;
    let mut cap = 0;
    while cap < untrapped_count {
        entity_only += 1;
        if entity_only > k {
            return Err(Error::Config(
                "infeasible lexicon: entity chars exceed available syllable capacity".into(),
            ));
        }
        cap += sizes[k - entity_only];
    }
    let mixed = k - entity_only;
    let trapped_count = n_entity - untrapped_count;
    if (n_filler + trapped_count > 0 && mixed == 0) || (mixed > 0 && n_filler < mixed) {
        return Err(Error::Config(
            "infeasible lexicon: not enough filler characters to seed every mixed syllable".into(),
        ));
    }

    let mut syllable_of = vec![usize::MAX; config.n_chars];
    // Untrapped entity chars spread balanced over the entity-only syllables.
    let mut untrapped_iter =
        (0..n_entity).filter(|&i| !trapped[i]).map(|i| n_filler + i).collect::<Vec<_>>().into_iter();
    if entity_only > 0 {
        for (pos, char_idx) in untrapped_iter.by_ref().enumerate() {
            syllable_of[char_idx] = mixed + pos % entity_only;
        }
    }
    // Fillers round-robin first so every mixed syllable holds one, then
    // trapped entity chars, then remaining capacity is already consumed.
    let mut next = 0usize;
    for char_idx in 0..n_filler {
        syllable_of[char_idx] = next % mixed;
        next += 1;
    }
    for char_idx in (0..n_entity).filter(|&i| trapped[i]).map(|i| n_filler + i) {
        syllable_of[char_idx] = next % mixed;
        next += 1;
    }
    debug_assert!(syllable_of.iter().all(|&s| s < k));

    // Unit-norm embeddings with a minimum pairwise distance, by rejection.
    let min_dist = config.embed_min_dist;
    let mut embeddings: Vec<f32> = Vec::with_capacity(k * config.frame_dim);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(k);
    for s in 0..k {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 1_000_000 {
                return Err(Error::Config(format!(
                    "could not place embedding for syllable {s}: space too crowded (dim {})",
                    config.frame_dim
                )));
            }
            let mut v: Vec<f64> = (0..config.frame_dim).map(|_| lex_rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            for x in v.iter_mut() {
                *x /= norm;
            }
            let ok = accepted.iter().all(|w| {
                let d2: f64 = v.iter().zip(w.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= min_dist
            });
            if ok {
                embeddings.extend(v.iter().map(|&x| x as f32));
                accepted.push(v);
                break;
            }
        }
    }

    Ok(LexiconBuild {
        lexicon: Lexicon {
            chars,
            syllable_of,
            n_syllables: k,
            embeddings,
            dim: config.frame_dim,
        },
        filler_chars,
        entity_chars,
    })
}

/// Synthesize frames for a transcript: per character, `k` frames (k uniform
/// in [frames_min, frames_max]) equal to its syllable embedding plus i.i.d.
/// Gaussian noise. Frames depend only on the syllable, never the character.
pub fn synth_frames(
    text: &str,
    lexicon: &Lexicon,
    frames_min: usize,
    frames_max: usize,
    noise_stddev: f64,
    rng: &mut StreamRng,
) -> Result<AcousticFrames> {
    let mut data: Vec<f32> = Vec::new();
    let mut rows = 0;
    for c in text.chars() {
        let syll = lexicon
            .syllable_of_char(c)
            .ok_or_else(|| Error::Vocab(format!("`{c}` not in lexicon")))?;
        let emb = lexicon.embedding(syll);
        let k = rng.range_inclusive(frames_min, frames_max);
        for _ in 0..k {
            for &e in emb {
                let noise = if noise_stddev > 0.0 { rng.normal() * noise_stddev } else { 0.0 };
                data.push((e as f64 + noise) as f32);
            }
            rows += 1;
        }
    }
    AcousticFrames::new(rows, lexicon.dim, data)
}

/// Summary of a generated corpus directory.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub dir: PathBuf,
    pub train_entities: Vec<String>,
    pub test_entities: Vec<String>,
    pub counts: Vec<(String, usize)>,
}

struct ZipfSampler {
    cumulative: Vec<f64>,
}

impl ZipfSampler {
    fn new(n: usize, exponent: f64) -> Self {
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for i in 0..n {
            acc += 1.0 / ((i + 1) as f64).powf(exponent);
            cumulative.push(acc);
        }
        ZipfSampler { cumulative }
    }

    fn sample(&self, rng: &mut StreamRng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.uniform() * total;
        self.cumulative.partition_point(|&c| c <= u)
    }
}

/// Sample the train/test entity inventories. The union is substring-free
/// (no entity contains another), so "a dictionary entry matches the upcoming
/// text" always means "this step's copy target is that entry": maximum
/// matching never has to null out a position that still looks copyable,
/// which is what makes confident copy probabilities learnable.
fn gen_entity_inventories(
    config: &SynthConfig,
    entity_chars: &[char],
    rng: &StreamRng,
) -> Result<(Vec<String>, Vec<String>)> {
    let mut er = rng.stream("entities");
    let total = config.n_train_entities + config.n_test_entities;
    let mut all: Vec<String> = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while all.len() < total {
        attempts += 1;
        if attempts > 1000 * total.max(64) {
            return Err(Error::Config(format!(
                "cannot sample {total} substring-free entities from {} characters",
                entity_chars.len()
            )));
        }
        let len = sample_entity_len(config, &mut er);
        let s: String = (0..len).map(|_| entity_chars[er.below(entity_chars.len())]).collect();
        if all.iter().any(|t| t.contains(&s) || s.contains(t.as_str())) {
            continue;
        }
        all.push(s);
    }
    let test = all.split_off(config.n_train_entities);
    Ok((all, test))
}

struct SplitSpec<'a> {
    name: &'a str,
    count: usize,
    inventory: &'a [String],
}

/// Generate the full corpus into `dir`: lexicon, per-utterance frames,
/// train/dev/test manifests, NE-only dev/test manifests, and the two
/// dictionary files (training inventory and evaluation inventory).
pub fn gen_corpus(config: &SynthConfig, dir: &Path) -> Result<GeneratedCorpus> {
    config.validate()?;
    let root = StreamRng::new(config.seed);
    let build = gen_lexicon(config, &root)?;
    let (train_entities, test_entities) =
        gen_entity_inventories(config, &build.entity_chars, &root)?;
    debug_assert!(train_entities.iter().all(|e| !test_entities.contains(e)));

    fs::create_dir_all(dir.join("frames")).map_err(|e| Error::io(dir.display().to_string(), e))?;
    write_lexicon(&dir.join("lexicon.bin"), &build.lexicon)?;

    let zipf = ZipfSampler::new(build.filler_chars.len(), config.zipf_exponent);
    let mut counts = Vec::new();

    // Dev and test draw entities from the evaluation inventory so inference
    // always sees entity strings absent from training transcripts.
    let splits = [
        SplitSpec { name: "train", count: config.n_train, inventory: &train_entities },
        SplitSpec { name: "dev", count: config.n_dev, inventory: &test_entities },
        SplitSpec { name: "test", count: config.n_test, inventory: &test_entities },
    ];

    for split in &splits {
        let mut text_rng = root.stream("text").stream(split.name);
        let mut noise_rng = root.stream("noise").stream(split.name);
        let mut manifest = String::new();
        let mut ne_manifest = String::new();
        let mut ne_count = 0;
        for i in 0..split.count {
            let utt_id = format!("{}-{:05}", split.name, i);
            let (transcript, spans) = gen_transcript(config, &build, &zipf, split.inventory, &mut text_rng);
            let frames = synth_frames(
                &transcript,
                &build.lexicon,
                config.frames_min,
                config.frames_max,
                config.noise_stddev,
                &mut noise_rng,
            )?;
            let rel = format!("frames/{utt_id}.cpnf");
            write_frames(&dir.join(&rel), &frames)?;
            let span_field = spans
                .iter()
                .map(|s| format!("{}-{}", s.start, s.end))
                .collect::<Vec<_>>()
                .join(";");
            let line = format!("{utt_id}\t{rel}\t{transcript}\t{span_field}\n");
            manifest.push_str(&line);
            if !spans.is_empty() {
                ne_manifest.push_str(&line);
                ne_count += 1;
            }
        }
        write_text(&dir.join(format!("{}.tsv", split.name)), &manifest)?;
        counts.push((split.name.to_string(), split.count));
        if split.name != "train" {
            write_text(&dir.join(format!("{}-ne.tsv", split.name)), &ne_manifest)?;
            counts.push((format!("{}-ne", split.name), ne_count));
        }
    }

    write_text(&dir.join("dict-train.txt"), &join_lines(&train_entities))?;
    write_text(&dir.join("dict-test.txt"), &join_lines(&test_entities))?;

    Ok(GeneratedCorpus { dir: dir.to_path_buf(), train_entities, test_entities, counts })
}

fn join_lines(xs: &[String]) -> String {
    let mut s = String::new();
    for x in xs {
        s.push_str(x);
        s.push('\n');
    }
    s
}

/// Entity lengths are skewed toward the short end of the configured range
/// (weights 1/(1+offset)), mirroring natural name-length statistics.
fn sample_entity_len(config: &SynthConfig, rng: &mut StreamRng) -> usize {
    let lens: Vec<usize> = (config.entity_min_len..=config.entity_max_len).collect();
    let weights: Vec<f64> = (0..lens.len()).map(|i| 1.0 / (1.0 + i as f64)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (l, w) in lens.iter().zip(weights.iter()) {
        if u < *w {
            return *l;
        }
        u -= w;
    }
    *lens.last().unwrap()
}

fn gen_transcript(
    config: &SynthConfig,
    build: &LexiconBuild,
    zipf: &ZipfSampler,
    inventory: &[String],
    rng: &mut StreamRng,
) -> (String, Vec<EntitySpan>) {
    let filler_len = rng.range_inclusive(config.filler_min, config.filler_max);
    let filler: Vec<char> =
        (0..filler_len).map(|_| build.filler_chars[zipf.sample(rng)]).collect();

    let with_entities = !inventory.is_empty() && rng.bernoulli(config.entity_fraction);
    if !with_entities {
        return (filler.into_iter().collect(), Vec::new());
    }
    let k = if inventory.len() >= 2 && rng.bernoulli(0.75) { 2 } else { 1 };
    let mut picks: Vec<&String> = Vec::with_capacity(k);
    for idx in rng.sample_indices(inventory.len(), k) {
        picks.push(&inventory[idx]);
    }
    // Cut the filler into k+1 segments (ends may be empty) and interleave.
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.range_inclusive(0, filler_len)).collect();
    cuts.sort_unstable();
    let mut transcript = String::new();
    let mut spans = Vec::with_capacity(k);
    let mut consumed = 0;
    for (e, &cut) in picks.iter().zip(cuts.iter()) {
        for &c in &filler[consumed..cut] {
            transcript.push(c);
        }
        consumed = cut;
        let start = transcript.chars().count();
        transcript.push_str(e);
        spans.push(EntitySpan { start, end: start + e.chars().count() });
    }
    for &c in &filler[consumed..] {
        transcript.push(c);
    }
    (transcript, spans)
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

fn write_text(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_frames(path: &Path, frames: &AcousticFrames) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + frames.data.len() * 4);
    buf.extend_from_slice(FRAMES_MAGIC);
    buf.extend_from_slice(&FRAMES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frames.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.dim as u32).to_le_bytes());
    for v in &frames.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_frames(path: &Path) -> Result<AcousticFrames> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_frames(&bytes, &path.display().to_string())
}

fn parse_frames(bytes: &[u8], path: &str) -> Result<AcousticFrames> {
    if bytes.len() < 14 {
        return Err(Error::parse(path, 0, format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != FRAMES_MAGIC {
        return Err(Error::parse(path, 0, "bad magic, expected CPNF"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FRAMES_VERSION {
        return Err(Error::parse(path, 0, format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = 14 + rows * dim * 4;
    if bytes.len() != expected {
        return Err(Error::parse(
            path,
            0,
            format!("expected {expected} bytes for {rows}x{dim} frames, found {}", bytes.len()),
        ));
    }
    let data = bytes[14..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    AcousticFrames::new(rows, dim, data)
}

pub fn write_lexicon(path: &Path, lexicon: &Lexicon) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("{}\t{}\n", lexicon.chars.len(), lexicon.n_syllables).as_bytes());
    for (c, s) in lexicon.chars.iter().zip(lexicon.syllable_of.iter()) {
        out.extend_from_slice(format!("{c}\t{s}\n").as_bytes());
    }
    out.extend_from_slice(FRAMES_MAGIC);
    out.extend_from_slice(&FRAMES_VERSION.to_le_bytes());
    out.extend_from_slice(&(lexicon.n_syllables as u32).to_le_bytes());
    out.extend_from_slice(&(lexicon.dim as u32).to_le_bytes());
    for v in &lexicon.embeddings {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let pathname = path.display().to_string();
    let mut offset = 0usize;
    let mut next_line = |line_no: usize| -> Result<String> {
        let rest = &bytes[offset..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(&pathname, line_no, "unexpected end of file"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::parse(&pathname, line_no, "invalid UTF-8"))?
            .to_string();
        offset += nl + 1;
        Ok(line)
    };
    let header = next_line(1)?;
    let (nc, ns) = header
        .split_once('\t')
        .ok_or_else(|| Error::parse(&pathname, 1, "expected `chars<TAB>syllables`"))?;
    let n_chars: usize =
        nc.parse().map_err(|_| Error::parse(&pathname, 1, "bad char count"))?;
    let n_syllables: usize =
        ns.parse().map_err(|_| Error::parse(&pathname, 1, "bad syllable count"))?;
    let mut chars = Vec::with_capacity(n_chars);
    let mut syllable_of = Vec::with_capacity(n_chars);
    for i in 0..n_chars {
        let line = next_line(i + 2)?;
        let (c, s) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(&pathname, i + 2, "expected `char<TAB>syllableId`"))?;
        let mut it = c.chars();
        let ch = it
            .next()
            .filter(|_| it.next().is_none())
            .ok_or_else(|| Error::parse(&pathname, i + 2, "expected a single character"))?;
        let syll: usize =
            s.parse().map_err(|_| Error::parse(&pathname, i + 2, "bad syllable id"))?;
        if syll >= n_syllables {
            return Err(Error::parse(&pathname, i + 2, format!("syllable id {syll} out of range")));
        }
        chars.push(ch);
        syllable_of.push(syll);
    }
    let emb = parse_frames(&bytes[offset..], &pathname)?;
    if emb.rows != n_syllables {
        return Err(Error::parse(
            &pathname,
            0,
            format!("embedding rows {} do not match syllable count {n_syllables}", emb.rows),
        ));
    }
    Ok(Lexicon { chars, syllable_of, n_syllables, embeddings: emb.data, dim: emb.dim })
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let pathname = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                &pathname,
                line_no,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let transcript = fields[2].to_string();
        let len = transcript.chars().count();
        let mut spans = Vec::new();
        if !fields[3].is_empty() {
            for frag in fields[3].split(';') {
                let (s, e) = frag.split_once('-').ok_or_else(|| {
                    Error::parse(&pathname, line_no, format!("bad span `{frag}`"))
                })?;
                let start: usize = s
                    .parse()
                    .map_err(|_| Error::parse(&pathname, line_no, format!("bad span `{frag}`")))?;
                let end: usize = e
                    .parse()
                    .map_err(|_| Error::parse(&pathname, line_no, format!("bad span `{frag}`")))?;
                if start >= end || end > len {
                    return Err(Error::parse(
                        &pathname,
                        line_no,
                        format!("span {start}-{end} out of range for transcript of length {len}"),
                    ));
                }
                spans.push(EntitySpan { start, end });
            }
        }
        for w in spans.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::parse(
                    &pathname,
                    line_no,
                    format!(
                        "spans {}-{} and {}-{} overlap or are unsorted",
                        w[0].start, w[0].end, w[1].start, w[1].end
                    ),
                ));
            }
        }
        out.push(ManifestEntry {
            utt_id: fields[0].to_string(),
            frames_path: fields[1].to_string(),
            transcript,
            spans,
        });
    }
    Ok(out)
}

/// Load a manifest and its frames files (paths are relative to the manifest's
/// directory).
pub fn load_utterances(manifest_path: &Path) -> Result<Vec<Utterance>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let entries = load_manifest(manifest_path)?;
    entries
        .into_iter()
        .map(|e| {
            let frames = read_frames(&base.join(&e.frames_path))?;
            Ok(Utterance {
                utt_id: e.utt_id,
                frames,
                transcript: e.transcript,
                entity_spans: e.spans,
            })
        })
        .collect()
}
