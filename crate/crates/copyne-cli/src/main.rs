//! Command-line surface for the span-copying transduction pipeline.
//!
//! Subcommands: `gen-data`, `train`, `decode`, `eval`, `gamma-sweep`.
//! Exit codes: 2 invalid config, 3 I/O or parse failure, 4 non-finite loss,
//! 5 missing dictionary in copy mode, 6 reference/hypothesis id mismatch.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use copyne_core::checkpoint;
use copyne_core::corpus;
use copyne_core::decode::{
    decode_utterances, format_decode_line, hypotheses_by_id, load_decode_output,
};
use copyne_core::dict::load_dict;
use copyne_core::error::Error;
use copyne_core::eval::{score_corpus, Reference};
use copyne_core::model::Mode;
use copyne_core::train;
use copyne_core::RunConfig;

#[derive(Parser)]
#[command(name = "copyne", version, about = "Entity-copying sequence transduction at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat key=value config file ('#' comments allowed)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key (repeatable), e.g. --set seed=7
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> copyne_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::new(),
        };
        for pair in &self.sets {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic homophone corpus
    GenData {
        /// Output directory for manifests, frames, lexicon, and dictionaries
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model on a generated corpus
    Train {
        /// Corpus directory produced by gen-data
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for checkpoints and the metrics log
        #[arg(long)]
        out: PathBuf,
        /// baseline or copyne (overrides the config key)
        #[arg(long)]
        mode: Option<String>,
        /// Number of epochs (overrides the config key)
        #[arg(long)]
        epochs: Option<usize>,
        /// Random seed (overrides the config key)
        #[arg(long)]
        seed: Option<u64>,
        /// Train the copy architecture without the copy loss term
        #[arg(long)]
        no_copy_loss: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Decode a manifest with a trained checkpoint
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Hypothesis output file
        #[arg(long)]
        out: PathBuf,
        /// Entity dictionary (required for copy-mode checkpoints)
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Expected decode mode; fails if the checkpoint differs
        #[arg(long)]
        mode: Option<String>,
        /// Copy confidence threshold (overrides the config key)
        #[arg(long)]
        gamma: Option<f64>,
        /// Beam width (overrides the config key)
        #[arg(long)]
        beam_width: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a hypothesis file against a reference manifest
    Eval {
        /// Reference manifest (with entity spans)
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Hypothesis file produced by decode
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Decode once per gamma value and tabulate CER
    GammaSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        /// Output TSV of (gamma, CER) rows
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated gamma values
        #[arg(long, default_value = "0,0.3,0.6,0.9,1.0")]
        gammas: String,
        #[arg(long)]
        beam_width: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Vocab(_) | Error::Dict(_) | Error::Shape { .. } => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint(_) => 3,
        Error::Train(_) | Error::NoValidAlignment { .. } => 4,
        Error::Decode(_) => 5,
        Error::Eval(_) => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(command: Command) -> copyne_core::Result<()> {
    match command {
        Command::GenData { out, config } => cmd_gen_data(&out, &config),
        Command::Train { corpus, out, mode, epochs, seed, no_copy_loss, config } => {
            cmd_train(&corpus, &out, mode, epochs, seed, no_copy_loss, &config)
        }
        Command::Decode { checkpoint, manifest, out, dict, mode, gamma, beam_width, config } => {
            cmd_decode(&checkpoint, &manifest, &out, dict.as_deref(), mode, gamma, beam_width, &config)
        }
        Command::Eval { reference, hyp } => cmd_eval(&reference, &hyp),
        Command::GammaSweep { checkpoint, manifest, dict, out, gammas, beam_width, config } => {
            cmd_gamma_sweep(&checkpoint, &manifest, &dict, &out, &gammas, beam_width, &config)
        }
    }
}

fn cmd_gen_data(out: &Path, config: &ConfigArgs) -> copyne_core::Result<()> {
    let cfg = config.resolve()?;
    let synth = cfg.synth_config()?;
    let generated = corpus::gen_corpus(&synth, out)?;
    cfg.write_echo(&out.join("config.txt"))?;
    for (name, count) in &generated.counts {
        println!("{name}: {count} utterances");
    }
    println!(
        "dictionaries: {} train entities, {} evaluation entities",
        generated.train_entities.len(),
        generated.test_entities.len()
    );
    Ok(())
}

fn cmd_train(
    corpus_dir: &Path,
    out: &Path,
    mode: Option<String>,
    epochs: Option<usize>,
    seed: Option<u64>,
    no_copy_loss: bool,
    config: &ConfigArgs,
) -> copyne_core::Result<()> {
    let mut cfg = config.resolve()?;
    if let Some(m) = mode {
        cfg.set("mode", &m)?;
    }
    if let Some(e) = epochs {
        cfg.set("epochs", &e.to_string())?;
    }
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    if no_copy_loss {
        cfg.set("no_copy_loss", "true")?;
    }
    let train_cfg = cfg.train_config()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    cfg.write_echo(&out.join("config.txt"))?;
    let report = train::train(corpus_dir, out, &train_cfg)?;
    for m in &report.metrics {
        print!("{}", m.log_line());
    }
    println!(
        "best dev CER {:.4} at epoch {}; checkpoints in {}",
        report.best_dev_cer,
        report.best_epoch,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_decode(
    checkpoint_path: &Path,
    manifest: &Path,
    out: &Path,
    dict_path: Option<&Path>,
    mode: Option<String>,
    gamma: Option<f64>,
    beam_width: Option<usize>,
    config: &ConfigArgs,
) -> copyne_core::Result<()> {
    let mut cfg = config.resolve()?;
    if let Some(g) = gamma {
        cfg.set("gamma", &g.to_string())?;
    }
    if let Some(w) = beam_width {
        cfg.set("beam_width", &w.to_string())?;
    }
    let beam = cfg.beam_config()?;
    let model = checkpoint::load(checkpoint_path)?;
    if let Some(m) = mode {
        let requested = Mode::parse(&m)?;
        if requested != model.mode {
            return Err(Error::Config(format!(
                "checkpoint mode is `{}` but `{}` was requested",
                model.mode.as_str(),
                requested.as_str()
            )));
        }
    }
    let dict = match (model.mode, dict_path) {
        (Mode::CopyNe, Some(p)) => {
            let (d, warnings) = load_dict(p, &model.vocab)?;
            for w in warnings {
                eprintln!("warning: {}: {w}", p.display());
            }
            if d.is_empty() {
                eprintln!(
                    "warning: {}: dictionary has no usable entities; decoding without copies",
                    p.display()
                );
            }
            Some(d)
        }
        (Mode::CopyNe, None) => {
            return Err(Error::Decode("copy-mode decoding requires --dict".into()))
        }
        (Mode::Baseline, Some(_)) => {
            eprintln!("warning: --dict is ignored for a baseline checkpoint");
            None
        }
        (Mode::Baseline, None) => None,
    };

    let utts = corpus::load_utterances(manifest)?;
    let results = decode_utterances(&model, &utts, dict.as_ref(), &beam)?;
    let mut output = String::new();
    for (utt_id, r) in &results {
        if r.truncated {
            eprintln!("warning: {utt_id}: no hypothesis finished within max_actions");
        }
        let text = model.vocab.decode(&r.tokens)?;
        output.push_str(&format_decode_line(utt_id, &text, r.score, &r.copied_spans));
    }
    std::fs::write(out, output).map_err(|e| Error::io(out.display().to_string(), e))?;
    cfg.write_echo(&sibling_config_path(out))?;
    println!("decoded {} utterances into {}", results.len(), out.display());
    Ok(())
}

fn sibling_config_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config");
    out.with_file_name(name)
}

fn cmd_eval(reference: &Path, hyp: &Path) -> copyne_core::Result<()> {
    let entries = corpus::load_manifest(reference)?;
    let refs: Vec<Reference> = entries
        .iter()
        .map(|e| Reference {
            utt_id: e.utt_id.clone(),
            text: e.transcript.chars().collect(),
            spans: e.spans.clone(),
        })
        .collect();
    let rows = load_decode_output(hyp)?;
    let ref_ids: HashSet<&str> = refs.iter().map(|r| r.utt_id.as_str()).collect();
    for (id, _) in &rows {
        if !ref_ids.contains(id.as_str()) {
            return Err(Error::Eval(format!("hypothesis id `{id}` not present in the reference")));
        }
    }
    let hyps = hypotheses_by_id(&rows);
    let scores = score_corpus(&refs, &hyps)?;
    print!("{}", scores.report());
    Ok(())
}

fn cmd_gamma_sweep(
    checkpoint_path: &Path,
    manifest: &Path,
    dict_path: &Path,
    out: &Path,
    gammas: &str,
    beam_width: Option<usize>,
    config: &ConfigArgs,
) -> copyne_core::Result<()> {
    let mut cfg = config.resolve()?;
    if let Some(w) = beam_width {
        cfg.set("beam_width", &w.to_string())?;
    }
    let model = checkpoint::load(checkpoint_path)?;
    if model.mode != Mode::CopyNe {
        return Err(Error::Decode("gamma-sweep requires a copy-mode checkpoint".into()));
    }
    let (dict, warnings) = load_dict(dict_path, &model.vocab)?;
    for w in warnings {
        eprintln!("warning: {}: {w}", dict_path.display());
    }
    let utts = corpus::load_utterances(manifest)?;
    let refs: Vec<Reference> = utts
        .iter()
        .map(|u| Reference {
            utt_id: u.utt_id.clone(),
            text: u.transcript.chars().collect(),
            spans: u.entity_spans.clone(),
        })
        .collect();

    let mut rows = String::new();
    for field in gammas.split(',') {
        let gamma: f64 = field
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad gamma value `{field}`")))?;
        let mut beam = cfg.beam_config()?;
        beam.gamma = gamma;
        beam.validate()?;
        let results = decode_utterances(&model, &utts, Some(&dict), &beam)?;
        let hyps = results
            .iter()
            .map(|(id, r)| Ok((id.clone(), model.vocab.decode(&r.tokens)?.chars().collect())))
            .collect::<copyne_core::Result<std::collections::HashMap<String, Vec<char>>>>()?;
        let scores = score_corpus(&refs, &hyps)?;
        rows.push_str(&format!("{gamma}\t{:.4}\n", scores.cer));
    }
    std::fs::write(out, &rows).map_err(|e| Error::io(out.display().to_string(), e))?;
    cfg.write_echo(&sibling_config_path(out))?;
    print!("{rows}");
    Ok(())
}
