//! Shared fixtures for the benchmark suite: a small trained-shape model,
//! a dictionary, and synthetic utterances, all deterministic.

use copyne_core::corpus::{gen_lexicon, synth_frames, AcousticFrames, SynthConfig};
use copyne_core::dict::{EntityDict, Provenance};
use copyne_core::model::{Mode, Model, ModelConfig};
use copyne_core::rng::StreamRng;
use copyne_core::vocab::Vocab;

pub struct BenchSetup {
    pub model: Model,
    pub dict: EntityDict,
    pub frames: AcousticFrames,
    pub tokens: Vec<u32>,
}

/// Deterministic model + utterance fixture at desk scale.
pub fn setup(mode: Mode) -> BenchSetup {
    let synth = SynthConfig { seed: 17, ..SynthConfig::default() };
    let root = StreamRng::new(synth.seed);
    let build = gen_lexicon(&synth, &root).expect("lexicon");
    let vocab = Vocab::new(build.lexicon.chars.clone()).expect("vocab");
    let model =
        Model::new(ModelConfig::default(), vocab.clone(), mode, &root).expect("model");

    let mut dict = EntityDict::new();
    let mut er = root.stream("entities");
    while dict.n_entities() < 30 {
        let len = er.range_inclusive(2, 4);
        let entity: Vec<u32> = (0..len)
            .map(|_| {
                let c = build.entity_chars[er.below(build.entity_chars.len())];
                vocab.id_of(c).unwrap()
            })
            .collect();
        dict.push(entity, Provenance::Gold).ok();
    }

    let text: String = {
        let mut t: String = build.filler_chars.iter().take(6).collect();
        let entity = dict.entry(1).to_vec();
        for id in entity {
            t.push(vocab.char_of(id).unwrap());
        }
        t
    };
    let mut noise = root.stream("noise");
    let frames = synth_frames(&text, &build.lexicon, 2, 3, 0.3, &mut noise).expect("frames");
    let tokens = vocab.encode(&text).expect("tokens");
    BenchSetup { model, dict, frames, tokens }
}
