use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hrvconformer::attn::{attn_stats, relevance_per_sample, rollout, write_relevance_csv, write_stats_csv, AttnStack};
use hrvconformer::ecg::{read_annotations_csv, read_ecg_csv, synth_ecg, write_annotations_csv, write_ecg_csv, CorpusPreset};
use hrvconformer::hr::store::{read_labels, read_store, write_epoch_file};
use hrvconformer::hr::{
    filter_epochs, fit_normalizer, hourly_segments, make_windows, normalize, propagate_weak_labels, reject_noisy,
    HrWindow, LabelKind, Normalizer,
};
use hrvconformer::model::{HrvConformer, ModelOutput};
use hrvconformer::nn::{ParamStore, Tensor};
use hrvconformer::qrs::{detect, match_beats, write_peaks_csv, DetectorConfig};
use hrvconformer::rr::{correct_with, read_corrected_csv, write_corrected_csv, RrSeries};
use hrvconformer::train::{evaluate, stratified_split, train_with, variance_task};
use hrvconformer::{Error, Result};
use serde_json::json;

use crate::config::{parse_override, RunConfig};
use crate::manifest::{digest_inputs, prepare_output, read_manifest, write_manifest, RunManifest};
use crate::{Cli, Command};

/// Tolerance for matching detections to annotations, seconds.
const MATCH_TOLERANCE_S: f64 = 0.05;
const CONFIG_FILE: &str = "config.toml";
const BEST_PARAMS: &str = "best.params.json";
const LAST_PARAMS: &str = "last.params.json";
const NORMALIZER: &str = "normalizer.json";

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: RunConfig,
    started: Instant,
}

impl Ctx<'_> {
    fn finish(
        &self,
        out: &Path,
        command: &str,
        seed: u64,
        inputs: &[PathBuf],
        outputs: Vec<String>,
        details: serde_json::Value,
    ) -> Result<()> {
        let m = RunManifest {
            tool: "hrvc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config: serde_json::to_value(&self.cfg)?,
            seed,
            deterministic: self.cli.deterministic,
            inputs: digest_inputs(inputs)?,
            outputs,
            details,
            elapsed_s: self.started.elapsed().as_secs_f64(),
        };
        write_manifest(out, &m)
    }
}

fn overrides(cli: &Cli) -> Result<Vec<(String, toml::Value)>> {
    let mut o: Vec<(String, toml::Value)> = cli.set.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
    if let Some(seed) = cli.seed {
        let v = toml::Value::Integer(
            i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} does not fit a TOML integer")))?,
        );
        o.push(("synth.seed".into(), v.clone()));
        o.push(("train.seed".into(), v));
    }
    Ok(o)
}

pub fn run(cli: &Cli) -> Result<()> {
    let o = overrides(cli)?;
    // Evaluation and attention default to the configuration the run was
    // trained with.
    let cfg = match (&cli.command, &cli.config) {
        (Command::Eval { run, .. } | Command::Attn { run, .. }, None) => {
            RunConfig::load(Some(&run.join(CONFIG_FILE)), &o)?
        }
        _ => RunConfig::load(cli.config.as_deref(), &o)?,
    };
    let ctx = Ctx {
        cli,
        cfg,
        started: Instant::now(),
    };
    match &cli.command {
        Command::Synth { out, preset } => synth(&ctx, out, preset.as_deref()),
        Command::Detect { out, standard, inputs } => detect_cmd(&ctx, out, *standard, inputs),
        Command::Preprocess { labels, out, inputs } => preprocess(&ctx, labels, out, inputs),
        Command::Train { data, val, out } => train_cmd(&ctx, data, val.as_deref(), out),
        Command::Eval { run, data, out } => eval_cmd(&ctx, run, data, out),
        Command::Attn { run, data, out } => attn_cmd(&ctx, run, data, out),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    w.flush()?;
    Ok(())
}

/// File name with `suffix` removed, e.g. `a.rr.csv` minus `.rr.csv`.
fn stem(path: &Path, suffixes: &[&str]) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for s in suffixes {
        if let Some(base) = name.strip_suffix(s) {
            return base.to_string();
        }
    }
    name
}

fn synth(ctx: &Ctx, out: &Path, preset: Option<&str>) -> Result<()> {
    let s = &ctx.cfg.synth;
    let preset = preset.unwrap_or(&s.preset);
    prepare_output(out, ctx.cli.force)?;
    let mut outputs = Vec::new();
    if preset == "toy" {
        let ws = variance_task(s.toy_epochs, s.toy_windows_per_epoch, ctx.cfg.model.window_samples, "toy", s.seed);
        for group in filter_epochs(ws, 1).values() {
            let p = write_epoch_file(out, group)?;
            outputs.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
    } else {
        let corpus = CorpusPreset::parse(preset).ok_or_else(|| {
            Error::Config(format!("synth.preset: unknown preset {preset:?} (clean, artifacts, inverted, toy)"))
        })?;
        for i in 0..s.records {
            let params = corpus.params(s.duration_s, s.seed + i as u64)?;
            let (rec, truth) = synth_ecg(&params)?;
            let name = format!("rec{i:03}");
            let mut w = create(&out.join(format!("{name}.csv")))?;
            write_ecg_csv(&rec, &mut w)?;
            w.flush()?;
            let mut w = create(&out.join(format!("{name}.ann.csv")))?;
            write_annotations_csv(&truth.r_times, &mut w)?;
            w.flush()?;
            write_json(&out.join(format!("{name}.truth.json")), &truth)?;
            outputs.extend([format!("{name}.csv"), format!("{name}.ann.csv"), format!("{name}.truth.json")]);
        }
    }
    ctx.finish(out, "synth", s.seed, &[], outputs, json!({ "preset": preset }))
}

fn detect_cmd(ctx: &Ctx, out: &Path, standard: bool, inputs: &[PathBuf]) -> Result<()> {
    let det_cfg = if standard {
        DetectorConfig::standard()
    } else {
        ctx.cfg.detector.clone()
    };
    prepare_output(out, ctx.cli.force)?;
    let mut outputs = Vec::new();
    let mut report = BTreeMap::new();
    for input in inputs {
        let rec = read_ecg_csv(open(input)?)?;
        let d = detect(&rec, &det_cfg)?;
        let name = stem(input, &[".csv"]);
        if d.peaks.len() < 3 {
            return Err(Error::Data(format!("{}: fewer than three beats detected", input.display())));
        }
        let mut series = RrSeries::from_beat_times(d.peaks.times.clone())?;
        series.fs = Some(rec.fs);
        let corrected = correct_with(&series, &d.potential.times, &ctx.cfg.correction)?;

        let mut w = create(&out.join(format!("{name}.peaks.csv")))?;
        write_peaks_csv(&d.peaks, &mut w)?;
        w.flush()?;
        let mut w = create(&out.join(format!("{name}.rr.csv")))?;
        write_corrected_csv(&corrected, &mut w)?;
        w.flush()?;
        outputs.extend([format!("{name}.peaks.csv"), format!("{name}.rr.csv")]);

        let ann = input.with_file_name(format!("{name}.ann.csv"));
        let mut entry = json!({
            "beats": d.peaks.len(),
            "flipped": d.flipped,
            "duration_s": rec.duration(),
        });
        if ann.is_file() {
            let truth = read_annotations_csv(open(&ann)?)?;
            let m = match_beats(&d.peaks.times, &truth, MATCH_TOLERANCE_S);
            entry["metrics"] = serde_json::to_value(m)?;
        }
        report.insert(name, entry);
    }
    write_json(&out.join("detect_metrics.json"), &report)?;
    outputs.push("detect_metrics.json".into());
    ctx.finish(
        out,
        "detect",
        0,
        inputs,
        outputs,
        json!({ "preset": if standard { "standard" } else { "config" } }),
    )
}

fn preprocess(ctx: &Ctx, labels: &Path, out: &Path, inputs: &[PathBuf]) -> Result<()> {
    let p = &ctx.cfg.preprocess;
    let rows = read_labels(open(labels)?)?;
    let mut by_subject: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for r in rows {
        by_subject.entry(r.subject).or_default().push(r.annotation);
    }
    let label_of: BTreeMap<(String, i64), (u8, LabelKind)> = by_subject
        .iter()
        .flat_map(|(s, ann)| {
            propagate_weak_labels(ann)
                .into_iter()
                .map(move |a| ((s.clone(), a.epoch_hour), (a.grade.class(), a.kind)))
        })
        .collect();

    prepare_output(out, ctx.cli.force)?;
    let mut windows = Vec::new();
    let mut unlabelled = 0usize;
    for input in inputs {
        let subject = stem(input, &[".rr.csv", ".csv"]);
        let series = read_corrected_csv(open(input)?)?;
        for (hour, seg) in hourly_segments(&series, &subject, p.max_rr_s)? {
            match label_of.get(&(subject.clone(), hour)) {
                Some(&(label, kind)) => windows.extend(make_windows(&seg, p.window_s, p.overlap, label, kind)?),
                None => unlabelled += 1,
            }
        }
    }
    let cut = windows.len();
    let kept = reject_noisy(windows, p.sd_max);
    let noisy = cut - kept.len();
    let epochs = filter_epochs(kept, p.min_windows);
    let mut outputs = Vec::new();
    let mut counts = BTreeMap::new();
    for (id, ws) in &epochs {
        let path = write_epoch_file(out, ws)?;
        outputs.push(path.file_name().unwrap().to_string_lossy().into_owned());
        counts.insert(id.clone(), ws.len());
    }
    let mut inputs_all = inputs.to_vec();
    inputs_all.push(labels.to_path_buf());
    ctx.finish(
        out,
        "preprocess",
        0,
        &inputs_all,
        outputs,
        json!({
            "windows_cut": cut,
            "windows_noisy": noisy,
            "unlabelled_segments": unlabelled,
            "epochs": counts,
        }),
    )
}

fn load_windows(dir: &Path) -> Result<Vec<HrWindow>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("window store {} does not exist", dir.display())));
    }
    let ws: Vec<HrWindow> = read_store(dir)?.into_iter().flatten().collect();
    if ws.is_empty() {
        return Err(Error::Data(format!("window store {} is empty", dir.display())));
    }
    Ok(ws)
}

fn apply_normalizer(ws: &[HrWindow], n: &Normalizer) -> Vec<HrWindow> {
    ws.iter().map(|w| normalize(w, n)).collect()
}

fn train_cmd(ctx: &Ctx, data: &Path, val: Option<&Path>, out: &Path) -> Result<()> {
    let tc = &ctx.cfg.train;
    let all = load_windows(data)?;
    let (train_ws, val_ws) = match val {
        Some(v) => (all, load_windows(v)?),
        None => stratified_split(all, tc.val_fraction, tc.seed)?,
    };
    let norm = fit_normalizer(&train_ws)?;
    let train_ws = apply_normalizer(&train_ws, &norm);
    let val_ws = apply_normalizer(&val_ws, &norm);

    prepare_output(out, ctx.cli.force)?;
    let (model, mut store) = HrvConformer::build(ctx.cfg.model.clone(), tc.seed)?;
    let outcome = train_with(&model, &mut store, &train_ws, &val_ws, tc, |r| {
        eprintln!(
            "epoch {:>5}  lr {:.3e}  train loss {:.4} acc {:.3}  val loss {:.4} epoch-auc {:.4} (ma {:.4})",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_epoch_auc, r.val_epoch_auc_ma
        );
    })?;

    outcome.best.save(create(&out.join(BEST_PARAMS))?)?;
    store.save(create(&out.join(LAST_PARAMS))?)?;
    let mut w = create(&out.join("history.csv"))?;
    outcome.history.write_csv(&mut w)?;
    w.flush()?;
    write_json(&out.join(NORMALIZER), &norm)?;
    fs::write(out.join(CONFIG_FILE), ctx.cfg.to_toml()?)?;
    let ev = evaluate(&model, &outcome.best, &val_ws, tc.batch, tc.tie_positive)?;
    write_json(&out.join("metrics.json"), &ev.metrics)?;

    let mut inputs = vec![data.to_path_buf()];
    inputs.extend(val.map(Path::to_path_buf));
    ctx.finish(
        out,
        "train",
        tc.seed,
        &inputs,
        [BEST_PARAMS, LAST_PARAMS, "history.csv", NORMALIZER, CONFIG_FILE, "metrics.json"]
            .map(String::from)
            .to_vec(),
        json!({
            "normalizer": norm,
            "train_windows": train_ws.len(),
            "val_windows": val_ws.len(),
            "best_eval": outcome.best_eval,
            "stopped_early": outcome.stopped_early,
            "parameters": store.num_trainable(),
            "val_metrics": ev.metrics,
        }),
    )
}

struct LoadedRun {
    model: HrvConformer,
    store: ParamStore,
    norm: Normalizer,
}

fn load_run(ctx: &Ctx, run: &Path) -> Result<LoadedRun> {
    let m = read_manifest(run)?;
    if m.command != "train" {
        return Err(Error::Data(format!("{} is not a training run", run.display())));
    }
    let (model, mut store) = HrvConformer::build(ctx.cfg.model.clone(), 0)?;
    let saved = ParamStore::load(open(&run.join(BEST_PARAMS))?)?;
    store.copy_from(&saved)?;
    let norm: Normalizer = serde_json::from_reader(open(&run.join(NORMALIZER))?)?;
    Ok(LoadedRun { model, store, norm })
}

fn eval_cmd(ctx: &Ctx, run: &Path, data: &Path, out: &Path) -> Result<()> {
    let r = load_run(ctx, run)?;
    let ws = apply_normalizer(&load_windows(data)?, &r.norm);
    let tc = &ctx.cfg.train;
    prepare_output(out, ctx.cli.force)?;
    let ev = evaluate(&r.model, &r.store, &ws, tc.batch, tc.tie_positive)?;
    write_json(&out.join("metrics.json"), &ev.metrics)?;

    let mut w = create(&out.join("window_predictions.csv"))?;
    writeln!(w, "epoch_id,window,label,prob")?;
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (win, p) in ws.iter().zip(&ev.window_probs) {
        let k = seen.entry(&win.epoch_id).or_default();
        writeln!(w, "{},{},{},{}", win.epoch_id, k, win.label, p)?;
        *k += 1;
    }
    w.flush()?;
    let mut w = create(&out.join("epoch_predictions.csv"))?;
    writeln!(w, "epoch_id,label,pred,prob,n_windows")?;
    for (id, (label, e)) in &ev.epochs {
        writeln!(w, "{id},{label},{},{},{}", e.label, e.prob, e.n_windows)?;
    }
    w.flush()?;
    ctx.finish(
        out,
        "eval",
        tc.seed,
        &[run.join(BEST_PARAMS), run.join(NORMALIZER), data.to_path_buf()],
        ["metrics.json", "window_predictions.csv", "epoch_predictions.csv"]
            .map(String::from)
            .to_vec(),
        json!({ "metrics": ev.metrics, "windows": ws.len(), "epochs": ev.epochs.len() }),
    )
}

fn attn_cmd(ctx: &Ctx, run: &Path, data: &Path, out: &Path) -> Result<()> {
    let r = load_run(ctx, run)?;
    let raw = load_windows(data)?;
    let ws = apply_normalizer(&raw, &r.norm);
    let cfg = &r.model.cfg;
    let n = cfg.window_samples;
    let class_token = cfg.head == hrvconformer::model::Head::ClassToken;
    prepare_output(out, ctx.cli.force)?;

    let mut stacks = Vec::with_capacity(ws.len());
    for chunk in ws.chunks(ctx.cfg.train.batch) {
        let data: Vec<f64> = chunk.iter().flat_map(|w| w.values.iter().copied()).collect();
        let ModelOutput { attn_maps, .. } = r.model.infer(&r.store, &Tensor::new(vec![chunk.len(), n], data)?)?;
        stacks.extend(AttnStack::from_model_maps(&attn_maps, cfg.patch_samples(), class_token)?);
    }
    let stats = attn_stats(&stacks)?;
    let mut w = create(&out.join("attn_stats.csv"))?;
    write_stats_csv(&stats, &mut w)?;
    w.flush()?;

    let mut rows = Vec::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (k, stack) in stacks.iter().enumerate().take(ctx.cfg.attn.relevance_windows) {
        let idx = seen.entry(&raw[k].epoch_id).or_default();
        let rel = relevance_per_sample(&rollout(stack)?, cfg.patch_samples());
        rows.push((format!("{}#{}", raw[k].epoch_id, idx), raw[k].values.clone(), rel));
        *idx += 1;
    }
    let mut w = create(&out.join("relevance.csv"))?;
    write_relevance_csv(&rows, &mut w)?;
    w.flush()?;

    let per_layer: Vec<serde_json::Value> = (0..cfg.n_layers)
        .map(|l| {
            let layer: Vec<_> = stats.iter().filter(|s| s.layer == l).collect();
            let k = layer.len() as f64;
            json!({
                "layer": l,
                "mean_distance": layer.iter().map(|s| s.distance_mean).sum::<f64>() / k,
                "mean_entropy": layer.iter().map(|s| s.entropy_mean).sum::<f64>() / k,
            })
        })
        .collect();
    ctx.finish(
        out,
        "attn",
        ctx.cfg.train.seed,
        &[run.join(BEST_PARAMS), run.join(NORMALIZER), data.to_path_buf()],
        ["attn_stats.csv", "relevance.csv"].map(String::from).to_vec(),
        json!({ "windows": stacks.len(), "layers": per_layer }),
    )
}
