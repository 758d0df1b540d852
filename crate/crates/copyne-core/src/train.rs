//! Teacher-forced training with adaptive-moment updates.
//!
//! Each epoch: seeded shuffle, per-batch dictionary construction (copy mode),
//! per-instance forward/backward in parallel with a fixed reduction order
//! (instance gradients are summed in batch order, then averaged), global
//! gradient-norm clipping, and an adaptive-moment parameter update. After
//! every epoch the dev split is decoded greedily and scored, the metrics log
//! gains a line, and the checkpoint files are refreshed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::autodiff::{Gradients, Graph, ParamSet, Tensor};
use crate::checkpoint;
use crate::corpus::{self, EntitySpan, Utterance};
use crate::decode::{decode_utterances, BeamConfig};
use crate::dict::{build_batch_dict, build_copy_targets, load_dict, BatchInstance, EntityDict};
use crate::error::{Error, Result};
use crate::eval::{score_corpus, Reference};
use crate::loss::{graph_ctc_loss, graph_nll, graph_total_loss};
use crate::model::{Mode, Model, ModelConfig};
use crate::rng::StreamRng;
use crate::vocab::{Vocab, BOS, EOS};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Train the copy-mode architecture without the copy loss term.
    pub no_copy_loss: bool,
    /// Confidence threshold used for the per-epoch dev decode.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            mode: Mode::CopyNe,
            epochs: 15,
            batch_size: 8,
            lr: 1e-3,
            grad_clip: 5.0,
            lambda: 0.7,
            beta: 2.0,
            no_copy_loss: false,
            gamma: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must be in [0,1]".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        if self.lr <= 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::Config("lr and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_trans: f64,
    pub l_ctc: f64,
    pub l_copy: f64,
    pub dev_cer: f64,
    pub dev_ne_cer: f64,
}

impl EpochMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\n",
            self.epoch, self.l_trans, self.l_ctc, self.l_copy, self.dev_cer, self.dev_ne_cer
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_dev_cer: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

/// Adaptive-moment optimizer over the flat parameter list.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    // 0.98 adapts the second moment fast enough for short desk-scale runs.
    const BETA2: f64 = 0.98;
    const EPS: f64 = 1e-8;

    fn new(params: &ParamSet, lr: f64) -> Self {
        let m = (0..params.len()).map(|i| vec![0.0; params.value(i).numel()]).collect();
        let v = (0..params.len()).map(|i| vec![0.0; params.value(i).numel()]).collect();
        Adam { m, v, step: 0, lr }
    }

    fn update(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads.get(i).data();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * g[j];
                v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
        }
    }
}

struct Encoded {
    tokens: Vec<u32>,
    spans: Vec<EntitySpan>,
    frames: Tensor,
}

/// Per-instance forward/backward. Returns the gradient of the instance's
/// total loss together with the loss components.
#[allow(clippy::too_many_arguments)]
fn instance_pass(
    model: &Model,
    inst: &Encoded,
    batch_dict: Option<&EntityDict>,
    lambda: f64,
    use_copy_loss: bool,
) -> Result<(Gradients, f64, f64, f64, f64)> {
    let mut g = Graph::new(&model.params);
    let h = model.encode_audio(&mut g, &inst.frames)?;
    let log_probs = model.ctc_log_probs(&mut g, h)?;
    let l_ctc = graph_ctc_loss(&mut g, log_probs, &inst.tokens)?;

    let mut history = Vec::with_capacity(inst.tokens.len() + 1);
    history.push(BOS);
    history.extend_from_slice(&inst.tokens);
    let d = model.decoder_states(&mut g, &history, h)?;

    let mut targets: Vec<usize> = inst.tokens.iter().map(|&t| t as usize).collect();
    targets.push(EOS as usize);

    let (l_trans, l_copy) = match (model.mode, batch_dict) {
        (Mode::CopyNe, Some(dict)) => {
            let z = model.encode_entities(&mut g, dict)?;
            let (_, pc) = model.copy_attention(&mut g, d, z)?;
            let (_, pt) = model.dict_enhanced_step(&mut g, d, z, pc)?;
            let l_trans = graph_nll(&mut g, pt, &targets)?;
            let l_copy = if use_copy_loss && !inst.tokens.is_empty() {
                let sigma = build_copy_targets(&inst.tokens, dict);
                let pc_steps = g.slice(pc, 0, 0, inst.tokens.len())?;
                Some(graph_nll(&mut g, pc_steps, &sigma.sigma)?)
            } else {
                None
            };
            (l_trans, l_copy)
        }
        (Mode::Baseline, _) => {
            let pt = model.baseline_step(&mut g, d)?;
            (graph_nll(&mut g, pt, &targets)?, None)
        }
        (Mode::CopyNe, None) => {
            return Err(Error::Train("copy-mode training requires a batch dictionary".into()))
        }
    };

    let total = graph_total_loss(&mut g, l_trans, l_ctc, l_copy, lambda)?;
    let l_trans_v = g.value(l_trans).data()[0];
    let l_ctc_v = g.value(l_ctc).data()[0];
    let l_copy_v = l_copy.map(|n| g.value(n).data()[0]).unwrap_or(0.0);
    let total_v = g.value(total).data()[0];
    let grads = g.backward(total)?;
    Ok((grads, l_trans_v, l_ctc_v, l_copy_v, total_v))
}

fn load_split(dir: &Path, name: &str) -> Result<Vec<Utterance>> {
    corpus::load_utterances(&dir.join(format!("{name}.tsv")))
}

fn encode_utterances(utts: &[Utterance], vocab: &Vocab, model: &Model) -> Result<Vec<Encoded>> {
    utts.iter()
        .map(|u| {
            Ok(Encoded {
                tokens: vocab.encode(&u.transcript)?,
                spans: u.entity_spans.clone(),
                frames: model.frames_to_tensor(&u.frames)?,
            })
        })
        .collect()
}

fn references(utts: &[Utterance]) -> Vec<Reference> {
    utts.iter()
        .map(|u| Reference {
            utt_id: u.utt_id.clone(),
            text: u.transcript.chars().collect(),
            spans: u.entity_spans.clone(),
        })
        .collect()
}

/// Train on a generated corpus directory, writing `metrics.tsv`,
/// `checkpoint.last.cpne`, and `checkpoint.best.cpne` (best dev CER) into
/// `out_dir`. Deterministic given the seed.
pub fn train(corpus_dir: &Path, out_dir: &Path, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let lexicon = corpus::load_lexicon(&corpus_dir.join("lexicon.bin"))?;
    if lexicon.dim != cfg.model.frame_dim {
        return Err(Error::Config(format!(
            "model frame_dim {} does not match corpus frame dim {}",
            cfg.model.frame_dim, lexicon.dim
        )));
    }
    let vocab = Vocab::new(lexicon.chars.clone())?;
    let root = StreamRng::new(cfg.seed);
    let mut model = Model::new(cfg.model.clone(), vocab.clone(), cfg.mode, &root)?;

    let train_utts = load_split(corpus_dir, "train")?;
    if train_utts.is_empty() {
        return Err(Error::Train("training split is empty".into()));
    }
    let dev_utts = load_split(corpus_dir, "dev")?;
    let train_data = encode_utterances(&train_utts, &vocab, &model)?;
    let dev_refs = references(&dev_utts);

    // Global training inventory for negative sampling; evaluation inventory
    // for the per-epoch dev decode.
    let (train_dict, _) = load_dict(&corpus_dir.join("dict-train.txt"), &vocab)?;
    let global: Vec<Vec<u32>> = train_dict.entries().skip(1).map(|e| e.to_vec()).collect();
    let (dev_dict, _) = load_dict(&corpus_dir.join("dict-test.txt"), &vocab)?;

    let mut adam = Adam::new(&model.params, cfg.lr);
    let shuffle_root = root.stream("shuffle");
    let dict_root = root.stream("batch-dict");

    let metrics_path = out_dir.join("metrics.tsv");
    let mut metrics_file = fs::File::create(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    let best_path = out_dir.join("checkpoint.best.cpne");
    let last_path = out_dir.join("checkpoint.last.cpne");

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::INFINITY);
    let dev_beam = BeamConfig {
        beam_width: 1,
        gamma: cfg.gamma,
        max_actions: cfg.model.max_tokens,
    };

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        shuffle_root.substream(epoch as u64).shuffle(&mut order);

        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let instances: Vec<&Encoded> = chunk.iter().map(|&i| &train_data[i]).collect();
            let batch_dict = if model.mode == Mode::CopyNe {
                let views: Vec<BatchInstance<'_>> = instances
                    .iter()
                    .map(|e| BatchInstance { tokens: &e.tokens, spans: &e.spans })
                    .collect();
                let rng = dict_root.substream(epoch as u64).substream(batch_idx as u64);
                Some(build_batch_dict(&views, &global, cfg.beta, &rng)?)
            } else {
                None
            };

            let results: Vec<Result<(Gradients, f64, f64, f64, f64)>> = instances
                .par_iter()
                .map(|inst| {
                    instance_pass(&model, inst, batch_dict.as_ref(), cfg.lambda, !cfg.no_copy_loss)
                })
                .collect();

            let mut batch_grads = Gradients::zeros_like(&model.params);
            for r in results {
                let (g, lt, lc, lcp, total) = r?;
                if !total.is_finite() {
                    return Err(Error::Train(format!(
                        "non-finite loss in epoch {epoch}, batch {batch_idx} \
                         (trans {lt}, ctc {lc}, copy {lcp})"
                    )));
                }
                batch_grads.add_assign(&g);
                sums.0 += lt;
                sums.1 += lc;
                sums.2 += lcp;
                seen += 1;
            }
            batch_grads.scale(1.0 / chunk.len() as f64);
            let norm = batch_grads.global_norm();
            if norm > cfg.grad_clip {
                batch_grads.scale(cfg.grad_clip / norm);
            }
            adam.update(&mut model.params, &batch_grads);
        }

        let dict_for_dev = if model.mode == Mode::CopyNe { Some(&dev_dict) } else { None };
        let (dev_cer, dev_ne_cer) = if dev_utts.is_empty() {
            (0.0, 0.0)
        } else {
            let hyps = decode_utterances(&model, &dev_utts, dict_for_dev, &dev_beam)?;
            let map = hyps
                .iter()
                .map(|(id, r)| {
                    Ok((id.clone(), model.vocab.decode(&r.tokens)?.chars().collect()))
                })
                .collect::<Result<std::collections::HashMap<String, Vec<char>>>>()?;
            let scores = score_corpus(&dev_refs, &map)?;
            (scores.cer, scores.ne_cer)
        };

        let m = EpochMetrics {
            epoch,
            l_trans: sums.0 / seen as f64,
            l_ctc: sums.1 / seen as f64,
            l_copy: sums.2 / seen as f64,
            dev_cer,
            dev_ne_cer,
        };
        metrics_file
            .write_all(m.log_line().as_bytes())
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        metrics.push(m);

        checkpoint::save(&last_path, &model)?;
        if dev_cer < best.1 {
            best = (epoch, dev_cer);
            checkpoint::save(&best_path, &model)?;
        }
    }

    Ok(TrainReport {
        metrics,
        best_epoch: best.0,
        best_dev_cer: best.1,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, SynthConfig};

    fn micro_corpus(dir: &Path, n: usize) -> SynthConfig {
        let config = SynthConfig {
            n_chars: 12,
            n_syllables: 5,
            frame_dim: 6,
            frames_min: 2,
            frames_max: 2,
            noise_stddev: 0.1,
            n_train: n,
            n_dev: 4,
            n_test: 4,
            n_train_entities: 4,
            n_test_entities: 3,
            entity_fraction: 0.5,
            filler_min: 3,
            filler_max: 5,
            seed: 5,
            ..SynthConfig::default()
        };
        gen_corpus(&config, dir).unwrap();
        config
    }

    fn micro_train_config(mode: Mode, epochs: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d_model: 16,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                d_attn: 16,
                ne_hidden: 16,
                ne_lstm_layers: 1,
                frame_dim: 6,
                max_frames: 64,
                max_tokens: 24,
                positional: true,
            },
            mode,
            epochs,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_smoke_emits_checkpoint_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        micro_corpus(dir.path(), 10);
        let out = dir.path().join("run");
        let report = train(dir.path(), &out, &micro_train_config(Mode::CopyNe, 1)).unwrap();
        assert_eq!(report.metrics.len(), 1);
        assert!(report.best_checkpoint.exists());
        assert!(report.last_checkpoint.exists());
        let log = fs::read_to_string(out.join("metrics.tsv")).unwrap();
        assert_eq!(log.lines().count(), 1);
        assert_eq!(log.lines().next().unwrap().split('\t').count(), 6);
        let loaded = checkpoint::load(&report.best_checkpoint).unwrap();
        assert_eq!(loaded.mode, Mode::CopyNe);
    }

    #[test]
    fn identical_seeds_give_identical_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        micro_corpus(dir.path(), 8);
        let cfg = micro_train_config(Mode::CopyNe, 2);
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        train(dir.path(), &out_a, &cfg).unwrap();
        train(dir.path(), &out_b, &cfg).unwrap();
        let a = fs::read(out_a.join("checkpoint.last.cpne")).unwrap();
        let b = fs::read(out_b.join("checkpoint.last.cpne")).unwrap();
        assert_eq!(a, b);
        let ma = fs::read(out_a.join("metrics.tsv")).unwrap();
        let mb = fs::read(out_b.join("metrics.tsv")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn baseline_mode_logs_zero_copy_loss() {
        let dir = tempfile::tempdir().unwrap();
        micro_corpus(dir.path(), 8);
        let report = train(
            dir.path(),
            &dir.path().join("run"),
            &micro_train_config(Mode::Baseline, 1),
        )
        .unwrap();
        assert_eq!(report.metrics[0].l_copy, 0.0);
        assert!(report.metrics[0].l_trans > 0.0);
        assert!(report.metrics[0].l_ctc > 0.0);
    }

    #[test]
    fn loss_decreases_on_micro_corpus() {
        let dir = tempfile::tempdir().unwrap();
        micro_corpus(dir.path(), 12);
        let report =
            train(dir.path(), &dir.path().join("run"), &micro_train_config(Mode::CopyNe, 8))
                .unwrap();
        let first = &report.metrics[0];
        let last = report.metrics.last().unwrap();
        let total =
            |m: &EpochMetrics| 0.7 * m.l_trans + 0.3 * m.l_ctc + m.l_copy;
        assert!(
            total(last) < total(first),
            "no learning: first {:.4}, last {:.4}",
            total(first),
            total(last)
        );
    }

    #[test]
    fn no_copy_loss_ablation_trains_and_logs_zero() {
        let dir = tempfile::tempdir().unwrap();
        micro_corpus(dir.path(), 8);
        let cfg = TrainConfig { no_copy_loss: true, ..micro_train_config(Mode::CopyNe, 1) };
        let report = train(dir.path(), &dir.path().join("run"), &cfg).unwrap();
        assert_eq!(report.metrics[0].l_copy, 0.0);
    }
}
