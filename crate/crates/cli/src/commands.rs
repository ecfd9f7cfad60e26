//! Command implementations. Each command applies its flag overrides onto
//! the run config, opens the run directory (stamping the effective config),
//! performs its work through the core library, writes validated artifacts,
//! and returns a one-line JSON summary for stdout.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use atelier_core::data::{
    gen_dataset, image_to_png_bytes, load_dataset, save_dataset, Dataset,
};
use atelier_core::diffusion::{make_schedule, sample, NoiseSchedule, SampleRequest};
use atelier_core::lora::{ComposedModel, LoraPlugin};
use atelier_core::merge::{easymerge, merge_fidelity_report, MergeMode, MergeSpec};
use atelier_core::metrics::{
    discrepancy_report, train_embedder, FeatureEmbedder, SampleCache,
};
use atelier_core::model::Denoiser;
use atelier_core::registry::{RegisterFields, Registry};
use atelier_core::training::{extract, train_addition};
use atelier_core::util::sha256_hex;
use atelier_core::vocab::{Prompt, Vocabulary};
use atelier_core::weights::ModelWeights;

use crate::config::{Overrides, RunConfig};
use crate::rundir::RunDir;
use crate::{CliError, Command, RegistryCmd};

// ---------------------------------------------------------------------------
// Override application (flags shadow config values; both are recorded)
// ---------------------------------------------------------------------------

pub fn apply_overrides(cfg: &mut RunConfig, ovr: &mut Overrides, cmd: &Command) {
    match cmd {
        Command::GenData { seed, per_prompt } => {
            ovr.apply(&mut cfg.data.seed, "seed", seed);
            ovr.apply(&mut cfg.data.per_prompt_train, "per-prompt", per_prompt);
        }
        Command::TrainBase { epochs, seed } => {
            ovr.apply(&mut cfg.base_train.epochs, "epochs", epochs);
            ovr.apply(&mut cfg.base_train.seed, "seed", seed);
        }
        Command::Add { rank, seed, .. } => {
            ovr.apply(&mut cfg.extraction.rank, "rank", rank);
            ovr.apply(&mut cfg.extraction.seed, "seed", seed);
        }
        Command::Extract { rank, recontext_rate, seed, .. } => {
            ovr.apply(&mut cfg.extraction.rank, "rank", rank);
            ovr.apply(&mut cfg.extraction.recontext_rate, "recontext-rate", recontext_rate);
            ovr.apply(&mut cfg.extraction.seed, "seed", seed);
        }
        Command::Combine { rank, iterations, seed, .. } => {
            ovr.apply(&mut cfg.merge.rank, "rank", rank);
            ovr.apply(&mut cfg.merge.max_iterations, "iterations", iterations);
            ovr.apply(&mut cfg.merge.seed, "seed", seed);
        }
        Command::Generate { n, seed, guidance, user, .. } => {
            ovr.apply(&mut cfg.generate.n, "n", n);
            ovr.apply(&mut cfg.generate.seed, "seed", seed);
            ovr.apply(&mut cfg.generate.guidance_scale, "guidance", guidance);
            ovr.apply(&mut cfg.generate.user_id, "user", user);
        }
        Command::Evaluate { n, seed, guidance, .. } => {
            ovr.apply(&mut cfg.eval.n_per_group, "n", n);
            ovr.apply(&mut cfg.eval.seed, "seed", seed);
            ovr.apply(&mut cfg.eval.guidance_scale, "guidance", guidance);
        }
        Command::Registry { .. } => {}
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule, CliError> {
    Ok(make_schedule(cfg.schedule.t_max, cfg.schedule.beta_min, cfg.schedule.beta_max)?)
}

fn open_registry(cfg: &RunConfig) -> Result<Registry, CliError> {
    Ok(Registry::open(&cfg.paths.registry())?)
}

fn base_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.run_dir.join("models/base.bin")
}

fn load_base(cfg: &RunConfig) -> Result<(Vec<u8>, ModelWeights<f32>), CliError> {
    let path = base_path(cfg);
    let bytes = std::fs::read(&path).map_err(|e| {
        CliError::usage(format!(
            "no base model at {} (run `train-base` first): {e}",
            path.display()
        ))
    })?;
    let weights = ModelWeights::<f32>::from_bytes(&bytes)?;
    Ok((bytes, weights))
}

fn load_corpus(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Dataset, CliError> {
    let dir = cfg.paths.run_dir.join("data/train");
    if !dir.join("index.json").exists() {
        return Err(CliError::usage(format!(
            "no training corpus at {} (run `gen-data` first)",
            dir.display()
        )));
    }
    Ok(load_dataset(&dir, vocab)?)
}

fn load_embedder(cfg: &RunConfig) -> Result<FeatureEmbedder, CliError> {
    let path = cfg.paths.run_dir.join("models/embedder.bin");
    if !path.exists() {
        return Err(CliError::usage(format!(
            "no feature embedder at {} (run `train-base` first)",
            path.display()
        )));
    }
    Ok(FeatureEmbedder::load(&path)?)
}

fn fetch_plugin(reg: &Registry, id: &str) -> Result<LoraPlugin<f32>, CliError> {
    let (bytes, _manifest) = reg.fetch(id).map_err(|e| match e {
        atelier_core::CoreError::NotRegistered(what) => CliError::refused(format!(
            "plug-in access refused: {what} is not registered"
        )),
        other => CliError::from(other),
    })?;
    Ok(LoraPlugin::from_bytes(&bytes)?)
}

/// Splits `item` or `item@sign` (sign in +1/-1).
fn parse_signed(spec: &str) -> Result<(String, i8), CliError> {
    if let Some((head, tail)) = spec.rsplit_once('@') {
        match tail {
            "+1" | "1" => return Ok((head.to_string(), 1)),
            "-1" => return Ok((head.to_string(), -1)),
            _ => {
                return Err(CliError::usage(format!(
                    "bad attachment sign `{tail}` in `{spec}` (use +1 or -1)"
                )))
            }
        }
    }
    Ok((spec.to_string(), 1))
}

/// Hash over the index of a saved dataset plus every image file, so a
/// corpus has one stable content digest.
fn dataset_digest(dir: &Path) -> Result<String, CliError> {
    let index_bytes = std::fs::read(dir.join("index.json"))?;
    #[derive(serde::Deserialize)]
    struct Entry {
        file: String,
        #[allow(dead_code)]
        prompt: String,
    }
    let index: Vec<Entry> = serde_json::from_slice(&index_bytes)?;
    let mut acc = String::new();
    acc.push_str(&sha256_hex(&index_bytes));
    acc.push('\n');
    for e in &index {
        let bytes = std::fs::read(dir.join(&e.file))?;
        acc.push_str(&format!("{}:{}\n", e.file, sha256_hex(&bytes)));
    }
    Ok(sha256_hex(acc.as_bytes()))
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

pub fn dispatch(cfg: &RunConfig, ovr: &Overrides, cmd: Command) -> Result<String, CliError> {
    let mut run = RunDir::open(cfg, ovr, cmd.name())?;
    match cmd {
        Command::GenData { .. } => gen_data(cfg, &mut run),
        Command::TrainBase { .. } => train_base_cmd(cfg, &mut run),
        Command::Add { concept, .. } => add(cfg, &mut run, &concept),
        Command::Extract { concept, from_corpus, .. } => {
            extract_cmd(cfg, &mut run, &concept, from_corpus)
        }
        Command::Combine { plugins, mode, prompts, fidelity, .. } => {
            combine(cfg, &mut run, &plugins, &mode, &prompts, fidelity)
        }
        Command::Generate { prompt, plugins, minus, request_id, stem, .. } => {
            generate(cfg, &mut run, &prompt, &plugins, &minus, request_id, stem)
        }
        Command::Evaluate { concept, attach, attach_id, contents, label, .. } => {
            evaluate(cfg, &mut run, &concept, &attach, &attach_id, contents, label)
        }
        Command::Registry { cmd } => registry_cmd(cfg, &mut run, cmd),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn gen_data(cfg: &RunConfig, run: &mut RunDir) -> Result<String, CliError> {
    let vocab = Vocabulary::standard();
    let data = &cfg.data;
    let contents = data.contents();
    if contents.is_empty() {
        return Err(CliError::config("data.n_contents must be at least 1"));
    }
    for c in &data.holdout_concepts {
        if !data.concepts.contains(c) {
            return Err(CliError::config(format!(
                "holdout concept `{c}` is not in data.concepts"
            )));
        }
    }
    let specs = data
        .concepts
        .iter()
        .map(|c| Ok(vocab.concept_spec(c)?))
        .collect::<Result<Vec<_>, CliError>>()?;

    let requests_for = |contents: &[String], per: usize| -> Vec<(String, usize)> {
        let mut reqs = Vec::new();
        for content in contents {
            for spec in &specs {
                reqs.push((spec.target_prompt(content), per));
            }
            reqs.push((format!("painting of {content}"), per));
            reqs.push((format!("cartoon of {content}"), per));
        }
        reqs
    };

    let train_reqs = requests_for(&contents, data.per_prompt_train);
    let eval_contents: Vec<String> = atelier_core::vocab::EVAL_CONTENTS
        .iter()
        .take(data.n_contents)
        .map(|s| s.to_string())
        .collect();
    let eval_reqs = requests_for(&eval_contents, data.per_prompt_eval);

    let mut summaries = Vec::new();
    for (name, reqs) in [("train", &train_reqs), ("eval", &eval_reqs)] {
        let ds = gen_dataset(&vocab, reqs, data.seed)?;
        let dir = run.root().join("data").join(name);
        save_dataset(&ds, &dir)?;
        let digest = dataset_digest(&dir)?;
        let summary = json!({
            "corpus": name,
            "n_items": ds.len(),
            "n_prompts": reqs.len(),
            "seed": data.seed,
            "digest": digest,
            "class_labels": ds.class_labels(),
        });
        run.put_json(&format!("data/{name}.summary.json"), &format!("{name}-corpus"), &summary)?;
        summaries.push(summary);
    }

    Ok(json!({
        "command": "gen-data",
        "ok": true,
        "train": summaries[0],
        "eval": summaries[1],
        "config_hash": run.config_hash(),
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// train-base
// ---------------------------------------------------------------------------

fn train_base_cmd(cfg: &RunConfig, run: &mut RunDir) -> Result<String, CliError> {
    let vocab = Vocabulary::standard();
    let sched = schedule(cfg)?;
    let ds_all = load_corpus(cfg, &vocab)?;
    let holdout: BTreeSet<&str> =
        cfg.data.holdout_concepts.iter().map(|s| s.as_str()).collect();
    let ds_base = Dataset {
        items: ds_all
            .items
            .iter()
            .filter(|it| {
                it.parsed.concept.as_deref().map_or(true, |c| !holdout.contains(c))
            })
            .cloned()
            .collect(),
    };

    let trained =
        atelier_core::diffusion::train_base::<f32>(&ds_base, &cfg.arch, &vocab, &cfg.base_train, &sched)?;
    let base_bytes = trained.weights.to_bytes()?;
    let base_hash = trained.weights.content_hash();
    run.put("models/base.bin", "base-model", &base_bytes)?;

    let emb = train_embedder(&ds_all, &cfg.embedder)?;
    run.put("models/embedder.bin", "feature-embedder", &emb.to_bytes()?)?;

    let mut reg = open_registry(cfg)?;
    let enrolled = reg.enroll_base(&base_bytes, &format!("base-{}", &base_hash[..12]))?;

    run.put_json(
        "models/base-train.json",
        "base-train-record",
        &json!({
            "base_hash": base_hash,
            "enrolled_base_hash": enrolled,
            "items_total": ds_all.len(),
            "items_trained_on": ds_base.len(),
            "holdout_concepts": cfg.data.holdout_concepts,
            "epoch_losses": trained.epoch_losses,
            "embedder_version": emb.version(),
        }),
    )?;

    Ok(json!({
        "command": "train-base",
        "ok": true,
        "base_hash": base_hash,
        "embedder_version": emb.version(),
        "final_epoch_loss": trained.epoch_losses.last(),
        "config_hash": run.config_hash(),
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// add
// ---------------------------------------------------------------------------

fn add(cfg: &RunConfig, run: &mut RunDir, concept: &str) -> Result<String, CliError> {
    let vocab = Vocabulary::standard();
    let sched = schedule(cfg)?;
    let (_, weights) = load_base(cfg)?;
    let base = ComposedModel::from_base(Arc::new(weights));
    let corpus = load_corpus(cfg, &vocab)?;
    let data = corpus.filter_concept(concept);
    if data.is_empty() {
        return Err(CliError::usage(format!(
            "the training corpus holds no `{concept}` images; add the concept to data.concepts and re-run gen-data"
        )));
    }
    let result = train_addition(&base, &data, &vocab, &sched, &cfg.extraction)?;
    let plugin_id = result.plugin.plugin_id()?;
    run.put(
        &format!("plugins/add-{concept}.bin"),
        &format!("plugin-add-{concept}"),
        &result.plugin.to_bytes()?,
    )?;
    run.put_json(
        &format!("plugins/add-{concept}.json"),
        &format!("plugin-add-{concept}-record"),
        &json!({
            "concept": concept,
            "plugin_id": plugin_id,
            "base_hash": base.effective_hash(),
            "rank": cfg.extraction.rank,
            "n_images": data.len(),
            "iteration_loss_means": result.trace.iteration_means(),
        }),
    )?;
    Ok(json!({
        "command": "add",
        "ok": true,
        "concept": concept,
        "plugin_id": plugin_id,
        "plugin_path": format!("plugins/add-{concept}.bin"),
        "config_hash": run.config_hash(),
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

fn extract_cmd(
    cfg: &RunConfig,
    run: &mut RunDir,
    concept: &str,
    from_corpus: bool,
) -> Result<String, CliError> {
    let vocab = Vocabulary::standard();
    let sched = schedule(cfg)?;
    let (_, weights) = load_base(cfg)?;
    let base = ComposedModel::from_base(Arc::new(weights));
    let cspec = vocab.concept_spec(concept)?;
    let contents = cfg.data.contents();
    let corpus = if from_corpus { Some(load_corpus(cfg, &vocab)?) } else { None };

    let result = extract(
        &base,
        &cspec,
        &contents,
        &vocab,
        &sched,
        &cfg.extraction,
        corpus.as_ref(),
    )?;
    let plugin_id = result.plugin.plugin_id()?;
    run.put(
        &format!("plugins/extract-{concept}.bin"),
        &format!("plugin-extract-{concept}"),
        &result.plugin.to_bytes()?,
    )?;
    run.put(
        &format!("plugins/extract-{concept}-deconcept.bin"),
        &format!("plugin-extract-{concept}-deconcept"),
        &result.plugin_post_deconcept.to_bytes()?,
    )?;
    run.put_json(
        &format!("plugins/extract-{concept}.json"),
        &format!("plugin-extract-{concept}-record"),
        &json!({
            "record": result.record,
            "curation_source": if from_corpus { "corpus" } else { "base" },
            "deconcept_iteration_means": result.deconcept_trace.iteration_means(),
            "recontext_iteration_means": result.recontext_trace.iteration_means(),
        }),
    )?;
    Ok(json!({
        "command": "extract",
        "ok": true,
        "concept": concept,
        "plugin_id": plugin_id,
        "plugin_path": format!("plugins/extract-{concept}.bin"),
        "non_infringing_hash": result.record.non_infringing_hash,
        "config_hash": run.config_hash(),
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// combine
// ---------------------------------------------------------------------------

fn combine(
    cfg: &RunConfig,
    run: &mut RunDir,
    plugin_ids: &[String],
    mode: &str,
    prompts: &[String],
    fidelity: usize,
) -> Result<String, CliError> {
    let vocab = Vocabulary::standard();
    let sched = schedule(cfg)?;
    let (_, weights) = load_base(cfg)?;
    let base = ComposedModel::from_base(Arc::new(weights));
    let reg = open_registry(cfg)?;

    let mode = match mode {
        "additive" => MergeMode::Additive,
        "subtractive" => MergeMode::Subtractive,
        other => {
            return Err(CliError::usage(format!(
                "unknown merge mode `{other}` (use additive or subtractive)"
            )))
        }
    };
    if !prompts.is_empty() && prompts.len() != plugin_ids.len() {
        return Err(CliError::usage(format!(
            "{} --prompt flags for {} --plugin flags (give none, or one per plug-in)",
            prompts.len(),
            plugin_ids.len()
        )));
    }
    let contents = cfg.data.contents();
    let mut entries: Vec<(Arc<LoraPlugin<f32>>, Prompt)> = Vec::new();
    for (i, id) in plugin_ids.iter().enumerate() {
        let plugin = fetch_plugin(&reg, id)?;
        let text = match prompts.get(i) {
            Some(p) => p.clone(),
            None => {
                let cspec = vocab.concept_spec(&plugin.meta.concept).map_err(|_| {
                    CliError::usage(format!(
                        "plug-in {id} has concept `{}` with no default prompt; pass --prompt",
                        plugin.meta.concept
                    ))
                })?;
                cspec.target_prompt(contents.first().map(String::as_str).unwrap_or("circle"))
            }
        };
        entries.push((Arc::new(plugin), vocab.encode(&text)?));
    }
    let prompt_texts: Vec<String> =
        entries.iter().map(|(_, p)| p.text.clone()).collect();

    let spec = MergeSpec::new(entries, mode, cfg.merge.clone())?;
    let result = easymerge(&base, &spec, &sched)?;
    let merged_id = result.plugin.plugin_id()?;
    let stem = format!("merge-{}-{}", mode.as_str(), &merged_id[..12]);

    run.put(
        &format!("plugins/{stem}.bin"),
        &format!("plugin-{stem}"),
        &result.plugin.to_bytes()?,
    )?;
    run.put_json(
        &format!("plugins/{stem}.json"),
        &format!("plugin-{stem}-record"),
        &json!({
            "merged_id": merged_id,
            "mode": mode.as_str(),
            "concept": result.plugin.meta.concept,
            "parents": spec.parent_ids()?,
            "prompts": prompt_texts,
            "rank": cfg.merge.rank,
            "iterations": result.iterations,
            "entry_losses": result.entry_losses,
            "final_loss_mean": result.loss_trace.last(),
        }),
    )?;

    let mut fidelity_summary = serde_json::Value::Null;
    if fidelity > 0 {
        let emb = load_embedder(cfg)?;
        let mut cache = SampleCache::new();
        let report = merge_fidelity_report(
            &base,
            &result.plugin,
            &spec,
            &vocab,
            &sched,
            &emb,
            &mut cache,
            fidelity,
            cfg.eval.guidance_scale,
            cfg.eval.seed,
        )?;
        run.put_json(
            &format!("reports/{stem}-fidelity.json"),
            &format!("{stem}-fidelity"),
            &report,
        )?;
        fidelity_summary = serde_json::to_value(&report)?;
    }

    Ok(json!({
        "command": "combine",
        "ok": true,
        "merged_id": merged_id,
        "plugin_path": format!("plugins/{stem}.bin"),
        "iterations": result.iterations,
        "entry_losses": result.entry_losses,
        "fidelity": fidelity_summary,
        "config_hash": run.config_hash(),
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

fn generate(
    cfg: &RunConfig,
    run: &mut RunDir,
    prompt: &str,
    plugins: &[String],
    minus: &[String],
    request_id: Option<String>,
    stem: Option<String>,
) -> Result<String, CliError> {
    let vocab = Vocabulary::standard();
    let sched = schedule(cfg)?;
    let gen = &cfg.generate;
    let prompt_encoded = vocab.encode(prompt)?;

    let (_, weights) = load_base(cfg)?;
    let base_hash = weights.content_hash();
    let mut composed = ComposedModel::from_base(Arc::new(weights));

    // Authorization: every named plug-in must be registered (fetch fails
    // otherwise) and must target this base.
    let mut reg = open_registry(cfg)?;
    for (ids, sign) in [(minus, -1i8), (plugins, 1i8)] {
        for id in ids {
            let plugin = fetch_plugin(&reg, id)?;
            if !reg.verify_compatibility(id, &base_hash)? {
                return Err(CliError::refused(format!(
                    "plug-in {id} targets base {}, not this run's base {base_hash}",
                    plugin.meta.base_model_hash
                )));
            }
            composed = composed.attach(Arc::new(plugin), sign)?;
        }
    }

    // Metering: exactly one usage record per generation that uses plug-ins;
    // none when only the bare (or reduced) base is sampled.
    let request_id = request_id.unwrap_or_else(|| {
        let mut key = format!(
            "{}|{}|{}|{}|{}",
            gen.user_id, prompt, gen.seed, gen.n, gen.guidance_scale
        );
        for id in plugins {
            key.push_str(&format!("|+{id}"));
        }
        for id in minus {
            key.push_str(&format!("|-{id}"));
        }
        sha256_hex(key.as_bytes())[..32].to_string()
    });
    let metered = if plugins.is_empty() {
        None
    } else {
        Some(reg.record_use(&request_id, &gen.user_id, plugins, prompt, gen.seed)?)
    };

    let den = Denoiser::from_composed(&composed)?;
    let req = SampleRequest {
        prompt: prompt_encoded,
        negative: None,
        guidance_scale: gen.guidance_scale,
        n: gen.n,
        seed: gen.seed,
    };
    let images = sample(&den, &sched, &vocab, &req)?;

    let stem = stem.unwrap_or_else(|| format!("gen-{}", &request_id[..12]));
    let mut paths = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let rel = format!("images/{stem}-{i:03}.png");
        run.put(&rel, &format!("{stem}-{i:03}"), &image_to_png_bytes(img)?)?;
        paths.push(rel);
    }
    run.put_json(
        &format!("images/{stem}.json"),
        &format!("{stem}-record"),
        &json!({
            "prompt": prompt,
            "seed": gen.seed,
            "n": gen.n,
            "guidance_scale": gen.guidance_scale,
            "plugin_ids": plugins,
            "minus_ids": minus,
            "effective_hash": composed.effective_hash(),
            "request_id": metered.as_ref().map(|r| r.request_id.clone()),
            "user_id": metered.as_ref().map(|r| r.user_id.clone()),
            "images": paths,
        }),
    )?;

    Ok(json!({
        "command": "generate",
        "ok": true,
        "images": paths,
        "metered": metered.is_some(),
        "request_id": metered.as_ref().map(|r| r.request_id.clone()),
        "effective_hash": composed.effective_hash(),
        "config_hash": run.config_hash(),
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn evaluate(
    cfg: &RunConfig,
    run: &mut RunDir,
    concept: &str,
    attach: &[String],
    attach_id: &[String],
    contents: Option<String>,
    label: Option<String>,
) -> Result<String, CliError> {
    let vocab = Vocabulary::standard();
    let sched = schedule(cfg)?;
    let (_, weights) = load_base(cfg)?;
    let base_den = Denoiser::from_weights(&weights);
    let mut composed = ComposedModel::from_base(Arc::new(weights));

    for spec in attach {
        let (path, sign) = parse_signed(spec)?;
        let bytes = std::fs::read(&path)
            .map_err(|e| CliError::usage(format!("cannot read plug-in {path}: {e}")))?;
        composed = composed.attach(Arc::new(LoraPlugin::from_bytes(&bytes)?), sign)?;
    }
    if !attach_id.is_empty() {
        let reg = open_registry(cfg)?;
        for spec in attach_id {
            let (id, sign) = parse_signed(spec)?;
            composed = composed.attach(Arc::new(fetch_plugin(&reg, &id)?), sign)?;
        }
    }

    let cspec = vocab.concept_spec(concept)?;
    let contents: Vec<String> = match contents {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => cfg.data.contents(),
    };
    let emb = load_embedder(cfg)?;
    let cand_den = Denoiser::from_composed(&composed)?;
    let mut cache = SampleCache::new();
    let report = discrepancy_report(
        &base_den, &cand_den, &cspec, &contents, &vocab, &sched, &emb, &mut cache, &cfg.eval,
    )?;

    let stem = label.unwrap_or_else(|| concept.to_string());
    run.put_json(
        &format!("reports/discrepancy-{stem}.json"),
        &format!("discrepancy-{stem}"),
        &report,
    )?;

    Ok(json!({
        "command": "evaluate",
        "ok": true,
        "concept": concept,
        "report_path": format!("reports/discrepancy-{stem}.json"),
        "target_kid_x1000": report.target.kid_x1000,
        "surrounding_kid_x1000": report.surrounding.kid_x1000,
        "surrounding_baseline_x1000": report.surrounding_baseline_x1000,
        "candidate_hash": report.candidate_hash,
        "config_hash": run.config_hash(),
    })
    .to_string())
}

// ---------------------------------------------------------------------------
// registry subcommands
// ---------------------------------------------------------------------------

fn registry_cmd(cfg: &RunConfig, run: &mut RunDir, cmd: RegistryCmd) -> Result<String, CliError> {
    match cmd {
        RegistryCmd::EnrollBase { model_file, label } => {
            let bytes = std::fs::read(&model_file).map_err(|e| {
                CliError::usage(format!("cannot read {}: {e}", model_file.display()))
            })?;
            let mut reg = open_registry(cfg)?;
            let hash = reg.enroll_base(&bytes, &label)?;
            run.put_json(
                &format!("receipts/enroll-{}.json", &hash[..12]),
                "registry-enroll-record",
                &json!({ "base_hash": hash, "label": label }),
            )?;
            Ok(json!({
                "command": "registry-enroll-base",
                "ok": true,
                "base_hash": hash,
                "config_hash": run.config_hash(),
            })
            .to_string())
        }
        RegistryCmd::Register { plugin_file, owner, license } => {
            let bytes = std::fs::read(&plugin_file).map_err(|e| {
                CliError::usage(format!("cannot read {}: {e}", plugin_file.display()))
            })?;
            let mut reg = open_registry(cfg)?;
            let id = reg.register(
                &bytes,
                &RegisterFields { owner_id: owner.clone(), license_note: license.clone() },
            )?;
            let manifest = reg.manifest(&id).cloned();
            run.put_json(
                &format!("receipts/register-{}.json", &id[..12]),
                "registry-register-record",
                &json!({ "plugin_id": id, "manifest": manifest }),
            )?;
            Ok(json!({
                "command": "registry-register",
                "ok": true,
                "plugin_id": id,
                "owner": owner,
                "config_hash": run.config_hash(),
            })
            .to_string())
        }
        RegistryCmd::Fetch { id, out } => {
            let reg = open_registry(cfg)?;
            let (bytes, manifest) = reg.fetch(&id)?;
            let rel = match out {
                Some(path) => {
                    if let Some(parent) = path.parent() {
                        if !parent.as_os_str().is_empty() {
                            std::fs::create_dir_all(parent)?;
                        }
                    }
                    std::fs::write(&path, &bytes)?;
                    let back = std::fs::read(&path)?;
                    if sha256_hex(&back) != id {
                        return Err(CliError::internal(format!(
                            "fetched plug-in failed write-back verification at {}",
                            path.display()
                        )));
                    }
                    path.display().to_string()
                }
                None => {
                    let rel = format!("plugins/fetched-{}.bin", &id[..12]);
                    run.put(&rel, &format!("fetched-{}", &id[..12]), &bytes)?;
                    rel
                }
            };
            Ok(json!({
                "command": "registry-fetch",
                "ok": true,
                "plugin_id": id,
                "out": rel,
                "owner": manifest.owner_id,
                "concept": manifest.concept,
                "config_hash": run.config_hash(),
            })
            .to_string())
        }
        RegistryCmd::Report { from, to } => {
            let reg = open_registry(cfg)?;
            let period = match (from, to) {
                (None, None) => None,
                (lo, hi) => Some((lo.unwrap_or(0), hi.unwrap_or(u64::MAX))),
            };
            let statement = reg.attribution_report(period)?;
            run.put_json("reports/attribution.json", "attribution-report", &statement)?;
            Ok(json!({
                "command": "registry-report",
                "ok": true,
                "statement": statement,
                "config_hash": run.config_hash(),
            })
            .to_string())
        }
        RegistryCmd::Verify { id, base_hash } => {
            let reg = open_registry(cfg)?;
            let base_hash = match base_hash {
                Some(h) => h,
                None => {
                    let (bytes, _) = load_base(cfg)?;
                    sha256_hex(&bytes)
                }
            };
            let compatible = reg.verify_compatibility(&id, &base_hash)?;
            run.put_json(
                &format!("receipts/verify-{}.json", &id[..12.min(id.len())]),
                "registry-verify-record",
                &json!({ "plugin_id": id, "base_hash": base_hash, "compatible": compatible }),
            )?;
            Ok(json!({
                "command": "registry-verify",
                "ok": true,
                "plugin_id": id,
                "base_hash": base_hash,
                "compatible": compatible,
                "config_hash": run.config_hash(),
            })
            .to_string())
        }
    }
}
