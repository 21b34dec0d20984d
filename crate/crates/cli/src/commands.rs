//! Subcommand implementations. Each writes only under its `--out` directory.

use std::path::Path;

use rawcnn::crf::{train_transitions, EmissionSequence};
use rawcnn::data::{
    collect_alphabet, load_manifest, synth_corpus, write_manifest, write_utterance, FrameSequence, Frontend,
    InputRef, LabeledUtterance, LoadOptions, ManifestEntry, SynthSpec,
};
use rawcnn::eval::{align, collapse_path, pooled_accuracy, Alignment, LabelAlphabet, LabelMapping};
use rawcnn::gradcheck::{check_gradients, random_case};
use rawcnn::model::Model;
use rawcnn::nn::{NetworkConfig, NetworkParams};
use rawcnn::seed::derive_seed;
use rawcnn::signal::{default_hop, read_wav};
use rawcnn::train::{grid_csv, grid_search, history_csv, train_network, TrainOutcome};
use rawcnn::{Error, Result};
use serde_json::json;

use crate::config::{echo_config, parse_stages, RunConfig};
use crate::decode::{decode_phonemes, Decoder};
use crate::spectra::{filter_spectra, first_layer_filters, peaks_csv, spectra_csv};
use crate::{
    AblateArgs, CheckGradArgs, CommonArgs, DataArgs, DecodeArgs, EvalArgs, FiltersArgs, GridArgs, NetworkArgs,
    SynthArgs, TrainArgs, TrainingArgs,
};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// Config file (or defaults), then `overrides`, then the master seed.
fn resolve(common: &CommonArgs, overrides: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    overrides(&mut cfg)?;
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    create_dir(&common.out)?;
    Ok(cfg)
}

fn apply_network(cfg: &mut RunConfig, a: &NetworkArgs) -> Result<()> {
    if let Some(ms) = a.window_ms {
        cfg.network.window_ms = ms;
    }
    if let Some(s) = &a.stages {
        cfg.network.stages = parse_stages(s).map_err(|m| Error::InvalidArgument(format!("--stages: {m}")))?;
    }
    if let Some(h) = a.hidden {
        cfg.network.hidden_units = h;
    }
    Ok(())
}

fn apply_training(cfg: &mut RunConfig, a: &TrainingArgs) {
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = a.patience {
        cfg.train.patience = v;
    }
    if let Some(v) = a.crf_epochs {
        cfg.crf.epochs = v;
    }
    if let Some(v) = a.crf_lr {
        cfg.crf.learning_rate = v;
    }
    if let Some(v) = a.min_duration {
        cfg.min_duration = v;
    }
}

fn path_json(p: &Path) -> serde_json::Value {
    json!(p.display().to_string())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = resolve(&a.common, |cfg| {
        if let Some(k) = a.classes {
            cfg.synth.num_classes = k;
        }
        if let Some(f) = a.bigram_factor {
            cfg.synth.bigram = Some(SynthSpec::cyclic_bigram(cfg.synth.num_classes, f));
        }
        if let Some(s) = a.noise {
            cfg.synth.noise_sigma = s;
        }
        for (slot, v) in [
            (&mut cfg.counts.train, a.num_train),
            (&mut cfg.counts.cv, a.num_cv),
            (&mut cfg.counts.test, a.num_test),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        Ok(())
    })?;
    let spec = &cfg.synth;
    let corpus = synth_corpus(spec, cfg.counts.train, cfg.counts.cv, cfg.counts.test)?;
    let alphabet = spec.alphabet();
    let out = &a.common.out;
    for (name, utts) in [("train", &corpus.train), ("cv", &corpus.cv), ("test", &corpus.test)] {
        let dir = out.join(name);
        create_dir(&dir)?;
        let entries = utts
            .iter()
            .map(|u| write_utterance(&dir, u, &alphabet))
            .collect::<Result<Vec<_>>>()?;
        write_manifest(&out.join(format!("{name}.jsonl")), &entries)?;
    }
    alphabet.write(&out.join("alphabet.txt"))?;
    echo_config(out, "synth", json!({}), &cfg)?;
    println!(
        "wrote {} train, {} cv, {} test utterances to {}",
        corpus.train.len(),
        corpus.cv.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

/// Labelled data with everything needed to turn it into frame sequences.
struct LabeledData {
    alphabet: LabelAlphabet,
    frontend: Frontend,
    splits: Vec<Vec<LabeledUtterance>>,
}

fn frontend_for(entries: &[ManifestEntry], feature_dim: Option<usize>) -> Result<Frontend> {
    match entries.first().map(|e| &e.input) {
        None => Err(Error::Data("manifest has no utterances".into())),
        Some(InputRef::Wav(p)) => {
            let sample_rate = read_wav(p)?.sample_rate();
            Ok(Frontend::Raw {
                sample_rate,
                hop_samples: default_hop(sample_rate),
            })
        }
        Some(InputRef::Feat(_)) => match feature_dim {
            Some(dim) if dim > 0 => Ok(Frontend::Features { dim }),
            _ => Err(Error::InvalidArgument("feature manifests need --feature-dim >= 1".into())),
        },
    }
}

/// Loads every manifest with one alphabet. The first manifest fixes the
/// input frontend.
fn load_labeled(data: &DataArgs, manifests: &[&Path]) -> Result<LabeledData> {
    let entries = manifests
        .iter()
        .map(|p| load_manifest(p))
        .collect::<Result<Vec<_>>>()?;
    let mapping = data.mapping.as_deref().map(LabelMapping::read).transpose()?;
    let garbage = data.garbage.as_deref();
    let alphabet = match &data.alphabet {
        Some(p) => LabelAlphabet::read(p, garbage)?,
        None => collect_alphabet(&entries.concat(), mapping.as_ref(), garbage)?,
    };
    if let Some(m) = &mapping {
        m.check_targets(&alphabet)?;
    }
    let frontend = frontend_for(&entries[0], data.feature_dim)?;
    let opts = LoadOptions {
        alphabet: &alphabet,
        mapping: mapping.as_ref(),
        feature_dim: data.feature_dim,
    };
    let splits = entries
        .iter()
        .map(|es| es.iter().map(|e| e.load(&opts)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledData {
        alphabet,
        frontend,
        splits,
    })
}

fn sequences(utts: &[LabeledUtterance], frontend: &Frontend, window: usize, garbage: Option<usize>) -> Result<Vec<FrameSequence>> {
    utts.iter()
        .map(|u| FrameSequence::new(u, frontend, window, garbage))
        .collect()
}

/// Trains the network, then CRF transitions on its training-set emissions
/// when `cfg.crf.epochs > 0`.
fn fit(
    train: &[FrameSequence],
    cv: &[FrameSequence],
    config: &NetworkConfig,
    cfg: &RunConfig,
    data: &LabeledData,
) -> Result<(Model, TrainOutcome)> {
    let outcome = train_network(train, cv, config, &cfg.train)?;
    let model = Model::new(config.clone(), data.alphabet.clone(), data.frontend, outcome.params.clone())?;
    if cfg.crf.epochs == 0 {
        return Ok((model, outcome));
    }
    let crf_data = train
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| Ok((model.emissions(s)?, s.labels().to_vec())))
        .collect::<Result<Vec<(EmissionSequence<f64>, Vec<usize>)>>>()?;
    let a = train_transitions(&crf_data, config.num_classes, &cfg.crf)?;
    Ok((model.with_transitions(a.cast())?, outcome))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve(&a.common, |cfg| {
        apply_network(cfg, &a.network)?;
        apply_training(cfg, &a.training);
        Ok(())
    })?;
    let data = load_labeled(&a.data, &[&a.train, &a.cv])?;
    let config = cfg.network.resolve(&data.frontend, data.alphabet.len())?;
    let garbage = data.alphabet.garbage();
    let train = sequences(&data.splits[0], &data.frontend, config.input_window, garbage)?;
    let cv = sequences(&data.splits[1], &data.frontend, config.input_window, garbage)?;
    let (model, outcome) = fit(&train, &cv, &config, &cfg, &data)?;

    let out = &a.common.out;
    model.save(&out.join("model.rcn"))?;
    write_file(&out.join("history.csv"), &history_csv(&outcome.history))?;
    echo_config(
        out,
        "train",
        json!({ "train": path_json(&a.train), "cv": path_json(&a.cv), "network": config }),
        &cfg,
    )?;
    let best = outcome.best();
    println!(
        "best epoch {} of {}: cv frame accuracy {:.2}%",
        best.epoch,
        outcome.history.len(),
        best.cv_frame_accuracy
    );
    Ok(())
}

pub fn grid(a: &GridArgs) -> Result<()> {
    let cfg = resolve(&a.common, |cfg| {
        apply_network(cfg, &a.network)?;
        apply_training(cfg, &a.training);
        if a.sample.is_some() {
            cfg.grid.sample = a.sample;
        }
        Ok(())
    })?;
    if a.threads == 0 {
        return Err(Error::InvalidArgument("--threads must be >= 1".into()));
    }
    let data = load_labeled(&a.data, &[&a.train, &a.cv])?;
    let base = cfg.network.resolve(&data.frontend, data.alphabet.len())?;
    let results = grid_search(
        &data.splits[0],
        &data.splits[1],
        &data.frontend,
        data.alphabet.garbage(),
        &cfg.grid,
        &base,
        &cfg.train,
        a.threads,
    )?;
    let out = &a.common.out;
    write_file(&out.join("grid.csv"), &grid_csv(&results))?;
    echo_config(out, "grid", json!({ "train": path_json(&a.train), "cv": path_json(&a.cv) }), &cfg)?;
    match results.first().map(|r| (&r.outcome, r.ordinal)) {
        Some((Ok(score), ordinal)) => println!("best of {}: configuration {ordinal}, cv {score:.2}", results.len()),
        _ => println!("no grid configuration trained successfully"),
    }
    Ok(())
}

fn safe_id(id: &str) -> bool {
    !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\'])
}

pub fn decode(a: &DecodeArgs) -> Result<()> {
    let cfg = resolve(&a.common, |cfg| {
        if let Some(d) = a.min_duration {
            cfg.min_duration = d;
        }
        Ok(())
    })?;
    let model = Model::load(&a.model)?;
    let entries = load_manifest(&a.test)?;
    let feature_dim = match model.frontend {
        Frontend::Features { dim } => Some(dim),
        Frontend::Raw { .. } => None,
    };
    let out = &a.common.out;
    let hyp_dir = out.join("hyp");
    create_dir(&hyp_dir)?;
    let mut report = String::from("id,frames,phonemes,status\n");
    let mut failures = 0;
    for e in &entries {
        let result = (|| {
            if !safe_id(&e.id) {
                return Err(Error::Data(format!("utterance id `{}` is not a file name", e.id)));
            }
            let input = e.load_input(feature_dim)?;
            let seq = FrameSequence::unlabeled(&e.id, &input, &model.frontend, model.config.input_window)?;
            let phonemes = decode_phonemes(&model, &seq, a.decoder, cfg.min_duration)?;
            Ok((seq.len(), phonemes))
        })();
        match result {
            Ok((frames, phonemes)) => {
                let labels: Vec<&str> = phonemes.iter().map(|&p| model.alphabet.label(p)).collect();
                write_file(&hyp_dir.join(format!("{}.hyp", e.id)), &(labels.join(" ") + "\n"))?;
                report.push_str(&format!("{},{frames},{},ok\n", csv_field(&e.id), phonemes.len()));
            }
            Err(err) => {
                failures += 1;
                eprintln!("warning: {}: {err}", e.id);
                report.push_str(&format!("{},,,{}\n", csv_field(&e.id), csv_field(&format!("error: {err}"))));
            }
        }
    }
    write_file(&out.join("decode.csv"), &report)?;
    echo_config(
        out,
        "decode",
        json!({ "model": path_json(&a.model), "test": path_json(&a.test), "decoder": a.decoder }),
        &cfg,
    )?;
    println!(
        "decoded {} of {} utterances with {:?}",
        entries.len() - failures,
        entries.len(),
        a.decoder
    );
    Ok(())
}

/// Quotes a CSV field when it contains a delimiter or quote.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn read_hypothesis(path: &Path) -> Result<Vec<String>> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(text.split_whitespace().map(String::from).collect()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(io_err(path)(e)),
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = resolve(&a.common, |_| Ok(()))?;
    let entries = load_manifest(&a.reference)?;
    let mapping = a.mapping.as_deref().map(LabelMapping::read).transpose()?;
    let garbage = a.garbage.clone();
    let mut report = String::from("id,ref_len,hyp_len,substitutions,deletions,insertions,accuracy\n");
    let mut alignments = Vec::new();
    for e in &entries {
        if !safe_id(&e.id) {
            return Err(Error::Data(format!("utterance id `{}` is not a file name", e.id)));
        }
        let reference = collapse_path(&e.label_strings(mapping.as_ref())?, garbage.as_ref());
        let hyp = collapse_path(&read_hypothesis(&a.hyp.join(format!("{}.hyp", e.id)))?, garbage.as_ref());
        let al = align(&reference, &hyp);
        let acc = if al.reference_len > 0 {
            format!("{:.4}", al.accuracy())
        } else {
            String::new()
        };
        report.push_str(&format!(
            "{},{},{},{},{},{},{acc}\n",
            csv_field(&e.id),
            al.reference_len,
            hyp.len(),
            al.substitutions,
            al.deletions,
            al.insertions
        ));
        alignments.push((al, hyp.len()));
    }
    let sum = |f: fn(&Alignment) -> usize| alignments.iter().map(|(a, _)| f(a)).sum::<usize>();
    let pooled = pooled_accuracy(&alignments.iter().map(|(a, _)| *a).collect::<Vec<_>>());
    report.push_str(&format!(
        "TOTAL,{},{},{},{},{},{}\n",
        sum(|a| a.reference_len),
        alignments.iter().map(|(_, h)| h).sum::<usize>(),
        sum(|a| a.substitutions),
        sum(|a| a.deletions),
        sum(|a| a.insertions),
        pooled.map(|p| format!("{p:.4}")).unwrap_or_default()
    ));
    let out = &a.common.out;
    write_file(&out.join("eval.csv"), &report)?;
    echo_config(
        out,
        "eval",
        json!({ "ref": path_json(&a.reference), "hyp": path_json(&a.hyp), "garbage": garbage }),
        &cfg,
    )?;
    match pooled {
        Some(p) => println!("phoneme accuracy {p:.2}% over {} utterances", entries.len()),
        None => println!("no reference phonemes to score"),
    }
    Ok(())
}

pub fn filters(a: &FiltersArgs) -> Result<()> {
    let cfg = resolve(&a.common, |_| Ok(()))?;
    let model = Model::load(&a.model)?;
    let (taps, sample_rate) = first_layer_filters(&model)?;
    let spectra = filter_spectra(&taps, a.n_fft)?;
    let out = &a.common.out;
    write_file(&out.join("filters.csv"), &spectra_csv(&spectra, sample_rate, a.n_fft))?;
    write_file(&out.join("peaks.csv"), &peaks_csv(&spectra, sample_rate, a.n_fft))?;
    echo_config(out, "filters", json!({ "model": path_json(&a.model), "n_fft": a.n_fft }), &cfg)?;
    println!("wrote spectra of {} filters", spectra.len());
    Ok(())
}

/// Base stages with the last `3 - p` pool widths set to 1. Shifts are kept:
/// removing pooling only lengthens intermediate outputs, so a window that
/// fits the base configuration fits every row.
pub fn ablation_config(base: &NetworkConfig, pooling_layers: usize) -> NetworkConfig {
    let mut c = base.clone();
    for (i, s) in c.stages.iter_mut().enumerate() {
        if i >= pooling_layers {
            s.pool_width = 1;
        }
    }
    c
}

pub fn ablate_pool(a: &AblateArgs) -> Result<()> {
    let cfg = resolve(&a.common, |cfg| {
        apply_network(cfg, &a.network)?;
        apply_training(cfg, &a.training);
        Ok(())
    })?;
    if cfg.network.stages.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "pooling ablation needs 3 stages, configuration has {}",
            cfg.network.stages.len()
        )));
    }
    let data = load_labeled(&a.data, &[&a.train, &a.cv, &a.test])?;
    let garbage = data.alphabet.garbage();
    let base = cfg.network.resolve(&data.frontend, data.alphabet.len())?;
    let no_crf = RunConfig {
        crf: rawcnn::crf::CrfTrainConfig { epochs: 0, ..cfg.crf.clone() },
        ..cfg.clone()
    };

    let mut report =
        String::from("pooling_layers,pool_widths,shifts,param_count,cv_frame_accuracy,test_phoneme_accuracy,status\n");
    for p in 0..=3 {
        let config = ablation_config(&base, p);
        let join = |f: fn(&rawcnn::nn::StageConfig) -> usize| {
            config.stages.iter().map(|s| f(s).to_string()).collect::<Vec<_>>().join(" ")
        };
        let (pools, shifts) = (join(|s| s.pool_width), join(|s| s.shift));
        let row = (|| {
            config.validate()?;
            let w = config.input_window;
            let train = sequences(&data.splits[0], &data.frontend, w, garbage)?;
            let cv = sequences(&data.splits[1], &data.frontend, w, garbage)?;
            let test = sequences(&data.splits[2], &data.frontend, w, garbage)?;
            let (model, outcome) = fit(&train, &cv, &config, &no_crf, &data)?;
            let alignments = test
                .iter()
                .map(|s| {
                    let hyp = match decode_phonemes(&model, s, Decoder::Hmm, cfg.min_duration) {
                        Err(Error::NoLegalPath(_)) => Vec::new(),
                        other => other?,
                    };
                    Ok(align(&collapse_path(s.reference(), garbage.as_ref()), &hyp))
                })
                .collect::<Result<Vec<_>>>()?;
            let acc = pooled_accuracy(&alignments)
                .ok_or_else(|| Error::Data("test set has no reference phonemes".into()))?;
            Ok::<_, Error>((config.param_count()?, outcome.best().cv_frame_accuracy, acc))
        })();
        match row {
            Ok((params, cv_acc, test_acc)) => {
                println!("{p} pooling layers: {params} parameters, test phoneme accuracy {test_acc:.2}%");
                report.push_str(&format!("{p},{pools},{shifts},{params},{cv_acc:.4},{test_acc:.4},ok\n"));
            }
            Err(e) => {
                eprintln!("warning: {p} pooling layers: {e}");
                let params = config.param_count().map(|n| n.to_string()).unwrap_or_default();
                report.push_str(&format!(
                    "{p},{pools},{shifts},{params},,,{}\n",
                    csv_field(&format!("error: {e}"))
                ));
            }
        }
    }
    let out = &a.common.out;
    write_file(&out.join("ablation.csv"), &report)?;
    echo_config(
        out,
        "ablate-pool",
        json!({ "train": path_json(&a.train), "cv": path_json(&a.cv), "test": path_json(&a.test), "network": base }),
        &cfg,
    )?;
    Ok(())
}

pub fn check_grad(a: &CheckGradArgs) -> Result<()> {
    let cfg = resolve(&a.common, |cfg| {
        if let Some(e) = a.epsilon {
            cfg.gradcheck.epsilon = e;
        }
        if let Some(t) = a.tolerance {
            cfg.gradcheck.tolerance = t;
        }
        Ok(())
    })?;
    if a.cases == 0 {
        return Err(Error::InvalidArgument("--cases must be >= 1".into()));
    }
    let mut report = String::from("case,tensor,entries,max_rel_error,worst_index,passed\n");
    let mut failed: Vec<String> = Vec::new();
    let mut corrupted = false;
    for case in 0..a.cases {
        let (params, window, target) = random_case(derive_seed(cfg.seed, case as u64));
        let slot = a
            .corrupt
            .as_ref()
            .and_then(|name| params.tensor_infos().iter().position(|t| &t.name == name));
        corrupted |= slot.is_some();
        let corrupt = move |g: &mut NetworkParams<f64>| {
            if let Some(i) = slot {
                g.tensors_mut()[i][0] += 0.1;
            }
        };
        let r = check_gradients(&params, &window, target, &cfg.gradcheck, Some(&corrupt))?;
        for t in &r.tensors {
            report.push_str(&format!(
                "{case},{},{},{:.3e},{},{}\n",
                t.name, t.entries, t.max_rel_error, t.worst_index, t.passed
            ));
            if !t.passed {
                failed.push(format!("case {case} {}", t.name));
            }
        }
        println!(
            "case {case}: {} tensors, max relative error {:.2e}: {}",
            r.tensors.len(),
            r.max_rel_error(),
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    if let (Some(name), false) = (&a.corrupt, corrupted) {
        return Err(Error::InvalidArgument(format!("no case has a tensor named `{name}`")));
    }
    let out = &a.common.out;
    write_file(&out.join("gradcheck.csv"), &report)?;
    echo_config(out, "check-grad", json!({ "cases": a.cases }), &cfg)?;
    if failed.is_empty() {
        println!("all {} cases pass", a.cases);
        Ok(())
    } else {
        Err(Error::Invariant(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
