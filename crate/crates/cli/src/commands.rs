use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hhir_core::corpus::{
    build_manifest, build_vocabulary, bundled_sources, parse_sources, parse_templates,
    summary_table, AliasTable, CaptionExpander, InteractionRecord, Manifest, TemplateExpander,
    UnifiedVocabulary,
};
use hhir_core::eval::{
    ClassifierPromptSpec, EchoResponder, EvalReport, EvalSample, Evaluator, HashedEmbedder,
    LmResponder, Responder,
};
use hhir_core::fusion_lm::Tokenizer;
use hhir_core::synth::{generate_corpus, write_corpus};
use hhir_core::trainer::{prepare_examples, Model, ModelConfig, TrainError, TrainState, QUESTION};
use hhir_core::video_io::{apply_masks, letterbox, load_clip, MaskSet, StreamTriplet};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::{
    BuildDataArgs, CliError, EvalArgs, EvalConfig, GenerateArgs, MaskArgs, ResponderKind,
    RunConfig, TrainArgs,
};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn read(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{what} {}: {e}", path.display())))
}

fn write_run_info(out: &Path, command: &str, seed: u64) -> Result<(), CliError> {
    let info = serde_json::json!({
        "command": command,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write(
        &out.join("run.json"),
        serde_json::to_string_pretty(&info).expect("json") + "\n",
    )
}

fn sibling_vocab(manifest: &Path, given: Option<&Path>) -> PathBuf {
    given
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest.with_file_name("vocab.json"))
}

fn read_vocab(path: &Path) -> Result<UnifiedVocabulary, CliError> {
    Ok(UnifiedVocabulary::from_json(&read(path, "vocabulary")?)?)
}

fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    Manifest::read(path).map_err(|e| CliError::Data(e.to_string()))
}

/// Writes `manifest.jsonl`, `vocab.json`, `chat.txt` (one chat record per
/// manifest line), `summary.txt` and `run.json`. Nothing is written unless
/// every source was scanned successfully.
pub fn cmd_build_data(
    cfg: &RunConfig,
    args: &BuildDataArgs,
    out: &Path,
) -> Result<Manifest, CliError> {
    let sources = match &args.sources {
        Some(p) => parse_sources(&read(p, "sources")?)?,
        None => bundled_sources(),
    };
    if sources.is_empty() {
        return Err(CliError::Usage("the source list is empty".into()));
    }
    let rules = match &args.rules {
        Some(p) => AliasTable::parse_tsv(&read(p, "alias rules")?)?,
        None => AliasTable::bundled(),
    };
    let expander = match &args.templates {
        Some(p) => TemplateExpander::new(parse_templates(&read(p, "templates")?)?)
            .with_aliases(rules.clone()),
        None => TemplateExpander::bundled().with_aliases(rules.clone()),
    };
    let vocab = build_vocabulary(&sources, &rules)?;
    let manifest = build_manifest(&sources, &args.data_root, &vocab, &expander)?;
    let summary = summary_table(&sources, &vocab, &manifest);

    create_dir(out)?;
    manifest.write(&out.join("manifest.jsonl"))?;
    write(&out.join("vocab.json"), vocab.to_json() + "\n")?;
    let mut chat = String::new();
    for r in &manifest.records {
        let rec = hhir_core::corpus::ChatRecord::prompt(
            QUESTION,
            cfg.model.background_branch_enabled,
            &r.soft_caption,
        )
        .map_err(|e| CliError::Data(format!("{}: {e}", r.id)))?;
        chat.push_str(&rec.to_line());
        chat.push('\n');
    }
    write(&out.join("chat.txt"), chat)?;
    write(&out.join("summary.txt"), &summary)?;
    write_run_info(out, "build-data", cfg.seed)?;
    print!("{summary}");
    Ok(manifest)
}

/// Writes `p1.raw`, `p2.raw` and `bg.raw` for one clip.
pub fn cmd_mask(cfg: &RunConfig, args: &MaskArgs, out: &Path) -> Result<(), CliError> {
    let clip = load_clip(&args.clip, None)?;
    let masks = MaskSet::read(&args.masks)?;
    let mut streams = apply_masks(&clip, &masks)?;
    if let Some(k) = args.frames {
        if k == 0 {
            return Err(CliError::Usage("--frames must be positive".into()));
        }
        streams = streams.sampled(k);
    }
    create_dir(out)?;
    streams.p1.write_raw(&out.join("p1.raw"))?;
    streams.p2.write_raw(&out.join("p2.raw"))?;
    streams.bg.write_raw(&out.join("bg.raw"))?;
    write_run_info(out, "mask", cfg.seed)?;
    println!(
        "{} frames, {}x{}",
        streams.bg.len(),
        streams.bg.height(),
        streams.bg.width()
    );
    Ok(())
}

/// Writes the synthetic clips, `manifest.jsonl`, `vocab.json` and `run.json`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    let names: Vec<&str> = cfg.synth.classes.iter().map(|c| c.name.as_str()).collect();
    let vocab = UnifiedVocabulary::from_classes(&names)?;
    if cfg.synth.per_class > hhir_core::synth::PALETTE.len() || cfg.synth.per_class == 0 {
        return Err(CliError::Usage(format!(
            "synth.per_class must be in 1..={}",
            hhir_core::synth::PALETTE.len()
        )));
    }
    let samples = generate_corpus(&cfg.synth);
    create_dir(out)?;
    let manifest = write_corpus(out, &samples, &vocab)?;
    manifest.write(&out.join("manifest.jsonl"))?;
    write(&out.join("vocab.json"), vocab.to_json() + "\n")?;
    write_run_info(out, "synth", cfg.seed)?;
    println!(
        "{} clips in {} classes",
        manifest.records.len(),
        vocab.len()
    );
    Ok(manifest)
}

/// Masked streams of one record at the model's resolution. Records without
/// masks put the whole clip in the background stream.
fn load_streams(r: &InteractionRecord, model: &ModelConfig) -> Result<StreamTriplet, CliError> {
    let clip = load_clip(&r.clip_path, None)?;
    let masks = match &r.mask_path {
        Some(p) => MaskSet::read(p)?,
        None => {
            warn!("{}: no masks, person streams are blank", r.id);
            MaskSet::empty(clip.len(), clip.height(), clip.width())
        }
    };
    let streams = apply_masks(&clip, &masks)?;
    if (clip.height(), clip.width()) == (model.height, model.width) {
        return Ok(streams);
    }
    Ok(StreamTriplet {
        p1: letterbox(&streams.p1, model.height, model.width)?,
        p2: letterbox(&streams.p2, model.height, model.width)?,
        bg: letterbox(&streams.bg, model.height, model.width)?,
    })
}

fn examples_for(
    state: &TrainState,
    records: &[InteractionRecord],
) -> Result<Vec<hhir_core::trainer::TrainExample>, CliError> {
    let model_cfg = state.model.cfg.clone();
    prepare_examples(
        &state.model,
        records.to_vec(),
        state.cfg.frames_per_clip,
        |r| {
            let streams = load_streams(&r, &model_cfg)?;
            Ok::<_, CliError>((r.id, r.soft_caption, streams))
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub seed: u64,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    #[serde(skip)]
    pub final_checkpoint: PathBuf,
}

/// Trains until `steps` total optimizer steps. Writes `train.log` (one
/// `step`, `loss`, `wall` line per step), periodic `checkpoint_<step>.snap`
/// files, `final.snap` and `train_summary.json`. A non-finite loss aborts
/// after saving the untouched state as `last_good.snap`.
pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs, out: &Path) -> Result<TrainOutcome, CliError> {
    let manifest = read_manifest(&args.manifest)?;
    if manifest.records.is_empty() {
        return Err(CliError::Data(format!(
            "{} holds no records",
            args.manifest.display()
        )));
    }
    let mut train_cfg = cfg.train.clone();
    if let Some(s) = args.steps {
        train_cfg.steps = s;
    }
    let mut state = match &args.resume {
        Some(p) => {
            let mut s = TrainState::load_checkpoint(p)?;
            s.cfg.steps = train_cfg.steps;
            s
        }
        None => {
            let vocab_path = sibling_vocab(&args.manifest, args.vocab.as_deref());
            let classes = if vocab_path.exists() {
                read_vocab(&vocab_path)?.classes().to_vec()
            } else {
                Vec::new()
            };
            let texts: Vec<&str> = manifest
                .records
                .iter()
                .map(|r| r.soft_caption.as_str())
                .chain(classes.iter().map(String::as_str))
                .chain([QUESTION])
                .collect();
            let model = Model::new(cfg.model.clone(), Tokenizer::build(texts))?;
            TrainState::new(model, train_cfg)?
        }
    };
    let seed = state.cfg.seed;
    let examples = examples_for(&state, &manifest.records)?;
    create_dir(out)?;
    let initial_loss = state.batch_loss(&examples)?;
    info!(
        "initial loss {initial_loss:.6} over {} records",
        examples.len()
    );

    let log_path = out.join("train.log");
    let mut log = fs::File::create(&log_path)
        .map_err(|e| CliError::Other(format!("{}: {e}", log_path.display())))?;
    let io = |e: std::io::Error| TrainError::Config(format!("train log: {e}"));
    writeln!(log, "# seed {seed}").map_err(|e| CliError::Other(e.to_string()))?;
    let start = Instant::now();
    let interval = state.cfg.checkpoint_interval;
    let result = state.fit(&examples, |step, loss, st| {
        writeln!(
            log,
            "step {step} loss {loss:.6} wall {:.3}s",
            start.elapsed().as_secs_f64()
        )
        .map_err(io)?;
        if interval > 0 && step % interval == 0 {
            st.save_checkpoint(&out.join(format!("checkpoint_{step:06}.snap")))?;
        }
        Ok(())
    });
    let losses = match result {
        Ok(l) => l,
        Err(e @ TrainError::NonFinite { .. }) => {
            state.save_checkpoint(&out.join("last_good.snap"))?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let final_checkpoint = out.join("final.snap");
    state.save_checkpoint(&final_checkpoint)?;
    let final_loss = state.batch_loss(&examples)?;
    let outcome = TrainOutcome {
        seed,
        steps: state.step,
        initial_loss,
        final_loss,
        losses,
        final_checkpoint,
    };
    write(
        &out.join("train_summary.json"),
        serde_json::to_string_pretty(&outcome).expect("json") + "\n",
    )?;
    println!(
        "loss {initial_loss:.6} -> {final_loss:.6} after {} steps",
        outcome.steps
    );
    Ok(outcome)
}

fn caption_records(
    state: &TrainState,
    records: &[InteractionRecord],
    eval: &EvalConfig,
) -> Result<Vec<(String, String)>, CliError> {
    let examples = examples_for(state, records)?;
    examples
        .par_iter()
        .map(|ex| {
            let c = state
                .model
                .caption(&ex.features, &eval.decode, eval.max_caption_len)?;
            Ok((ex.id.clone(), c))
        })
        .collect()
}

fn captions_tsv(seed: u64, captions: &[(String, String)]) -> String {
    let mut s = format!("# seed {seed}\n");
    for (id, c) in captions {
        s.push_str(&format!("{id}\t{c}\n"));
    }
    s
}

/// Parses `id<TAB>caption` lines; `#` lines are comments.
pub fn read_captions(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let (id, cap) = line
            .split_once('\t')
            .ok_or_else(|| CliError::Data(format!("captions line {}: missing tab", n + 1)))?;
        out.insert(id.to_string(), cap.to_string());
    }
    Ok(out)
}

/// Writes `captions.tsv` for every record of the manifest.
pub fn cmd_generate(
    cfg: &RunConfig,
    seed: Option<u64>,
    args: &GenerateArgs,
    out: &Path,
) -> Result<Vec<(String, String)>, CliError> {
    let state = TrainState::load_checkpoint(&args.checkpoint)?;
    let manifest = read_manifest(&args.manifest)?;
    let captions = caption_records(&state, &manifest.records, &cfg.eval)?;
    create_dir(out)?;
    write(
        &out.join("captions.tsv"),
        captions_tsv(seed.unwrap_or(state.cfg.seed), &captions),
    )?;
    println!("{} captions", captions.len());
    Ok(captions)
}

fn read_unseen(path: &Path) -> Result<Vec<String>, CliError> {
    Ok(read(path, "unseen classes")?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Canonical caption of each class: the first manifest caption of that
/// class, else the bundled template, else the class name.
fn class_captions(
    classes: &[String],
    manifest: &Manifest,
    vocab: &UnifiedVocabulary,
) -> Vec<String> {
    let templates = TemplateExpander::bundled();
    classes
        .iter()
        .map(|c| {
            manifest
                .records
                .iter()
                .find(|r| vocab.name(r.canonical_class) == Some(c.as_str()))
                .map(|r| r.soft_caption.clone())
                .or_else(|| templates.expand(c).ok())
                .unwrap_or_else(|| c.clone())
        })
        .collect()
}

/// Writes `report.json`, `report.txt` and (when captions were generated)
/// `captions.tsv`. Records of classes outside the seen vocabulary are
/// scored by the open-set protocol.
pub fn cmd_eval(
    cfg: &RunConfig,
    seed: Option<u64>,
    args: &EvalArgs,
    out: &Path,
) -> Result<EvalReport, CliError> {
    let unseen = match (&args.unseen, args.open_set) {
        (Some(p), _) => {
            let u = read_unseen(p)?;
            if u.is_empty() {
                return Err(CliError::Usage(format!(
                    "{} lists no unseen classes",
                    p.display()
                )));
            }
            Some(u)
        }
        (None, true) => return Err(CliError::Usage("--open-set requires --unseen".into())),
        (None, false) => None,
    };
    let vocab = read_vocab(&sibling_vocab(&args.manifest, args.vocab.as_deref()))?;
    let seen = match &args.seen_vocab {
        Some(p) => read_vocab(p)?,
        None => vocab.clone(),
    };
    if let Some(u) = &unseen {
        seen.extended(u)?;
    }
    let mut manifest = read_manifest(&args.manifest)?;
    manifest.check_integrity(&vocab)?;
    if let Some(s) = &args.slice {
        manifest = manifest.slice(s);
        if manifest.records.is_empty() {
            return Err(CliError::Data(format!("slice `{s}` holds no records")));
        }
    }
    let state = TrainState::load_checkpoint(&args.checkpoint)?;
    let seed = seed.unwrap_or(state.cfg.seed);
    create_dir(out)?;
    let captions: BTreeMap<String, String> = match &args.captions {
        Some(p) => read_captions(&read(p, "captions")?)?,
        None => {
            let generated = caption_records(&state, &manifest.records, &cfg.eval)?;
            write(&out.join("captions.tsv"), captions_tsv(seed, &generated))?;
            generated.into_iter().collect()
        }
    };

    let unseen_set: BTreeSet<&str> = unseen.iter().flatten().map(String::as_str).collect();
    let (mut closed, mut open) = (Vec::new(), Vec::new());
    for r in &manifest.records {
        let class_name = vocab.classes()[r.canonical_class].clone();
        let generated = captions
            .get(&r.id)
            .cloned()
            .ok_or_else(|| CliError::Data(format!("no caption for record `{}`", r.id)))?;
        let sample = EvalSample {
            id: r.id.clone(),
            generated,
            reference: r.soft_caption.clone(),
            class_name,
        };
        if seen.index_of(&sample.class_name).is_some() {
            closed.push(sample);
        } else if unseen_set.contains(sample.class_name.as_str()) {
            open.push(sample);
        } else {
            return Err(CliError::Data(format!(
                "record `{}` has class `{}` outside the seen and unseen lists",
                r.id, sample.class_name
            )));
        }
    }

    let embedder = HashedEmbedder {
        dim: cfg.eval.embedder_dim,
        seed: cfg.eval.embedder_seed,
    };
    let lm_responder = LmResponder {
        lm: &state.model.lm,
        tokenizer: &state.model.tokenizer,
        max_len: cfg.eval.responder_max_len,
    };
    let responder: &dyn Responder = match cfg.eval.responder {
        ResponderKind::Lm => &lm_responder,
        ResponderKind::Echo => &EchoResponder,
    };
    let evaluator = Evaluator {
        spec: ClassifierPromptSpec {
            template: cfg.eval.prompt.template.clone(),
        },
        responder,
        embedder: &embedder,
    };
    let seen_captions = class_captions(seen.classes(), &manifest, &vocab);
    let slice = args.slice.clone().unwrap_or_else(|| "all".into());
    let mut report = evaluator.closed_set(&closed, &seen, &seen_captions, seed, &slice)?;
    if let Some(u) = &unseen {
        let unseen_captions = class_captions(u, &manifest, &vocab);
        report.open_set =
            Some(evaluator.open_set(&open, &seen, &seen_captions, u, &unseen_captions)?);
    }
    write(&out.join("report.json"), report.to_json() + "\n")?;
    write(&out.join("report.txt"), report.to_table())?;
    Ok(report)
}
