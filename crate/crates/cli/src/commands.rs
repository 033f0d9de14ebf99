use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use snf_core::checkpoint::{self, write_atomic};
use snf_core::data::{load_corpus, synthetic_text, Split, TokenizedCorpus};
use snf_core::exec::with_workers;
use snf_core::importance::{compute_tables, weight_magnitude_tables, ImportanceTables};
use snf_core::model::{count_params, DenseModel, Supernet};
use snf_core::search::{history_csv, BinState, EvoParams, HistoryRow, Metric, Search};
use snf_core::space::SearchSpace;
use snf_core::train::{
    distill, evaluate_perplexity, pretrain, validation_batches, DistillSpec, RunOptions, Teacher, TrainSpec,
    METRICS_FILE, MODEL_FILE,
};
use snf_core::{Error, Execution};

use crate::manifest::RunManifest;
use crate::specs;
use crate::{DistillArgs, EvalArgs, ExtractArgs, GenCorpusArgs, InitArgs, MetricKind, Sources, SearchArgs, TrainArgs};

pub const HISTORY_FILE: &str = "history.csv";
pub const STATUS_FILE: &str = "status.json";
pub const IMPORTANCE_FILE: &str = "importance.snfw";
const STATE_DIR: &str = "state";

/// How a command ended, when it did not fail outright.
pub enum Outcome {
    Done,
    /// Some bins had no feasible candidates; the rest completed.
    Infeasible,
}

pub fn init(a: &InitArgs) -> Result<Outcome, Error> {
    let cfg = specs::supernet_config(&a.config)?;
    let sup = Supernet::new(cfg, a.seed)?;
    checkpoint::save_model(&a.out, sup.weights())?;
    println!("supernet with {} parameters written to {}", sup.weights().param_count(), a.out.display());
    Ok(Outcome::Done)
}

pub fn gen_corpus(a: &GenCorpusArgs) -> Result<Outcome, Error> {
    write_atomic(&a.out, &synthetic_text(a.bytes, a.seed))?;
    println!("{} bytes written to {}", a.bytes, a.out.display());
    Ok(Outcome::Done)
}

pub fn extract(a: &ExtractArgs) -> Result<Outcome, Error> {
    let sup = checkpoint::load_supernet(&a.supernet)?;
    let cfg = specs::subnetwork(&a.config)?;
    let params = count_params(sup.config(), &cfg)?;
    let dense = sup.extract_dense(&cfg)?;
    debug_assert_eq!(dense.param_count(), params);
    checkpoint::save_model(&a.out, &dense)?;
    println!("params {params}");
    Ok(Outcome::Done)
}

fn eval_batches(corpus: &TokenizedCorpus, args: &SearchArgs, max_seq: usize) -> Result<Vec<snf_core::data::Batch>, Error> {
    let seq = args.seq_len.unwrap_or(max_seq.min(64));
    if seq > max_seq {
        return Err(Error::validation("bounds", format!("seq_len {seq} exceeds the supernet's {max_seq}")));
    }
    corpus.fixed_batches(Split::Validation, args.eval_batches, args.batch_size, seq)
}

fn state_path(out: &Path, bin: usize) -> PathBuf {
    out.join(STATE_DIR).join(format!("bin{bin}.json"))
}

fn best_file(bin: usize) -> String {
    format!("best_bin{bin}.toml")
}

pub fn search(a: &SearchArgs) -> Result<Outcome, Error> {
    let space = SearchSpace::from_toml(&String::from_utf8_lossy(&specs::read(&a.space)?))
        .map_err(|e| Error::validation("space", e.to_string()))?;
    let bins = specs::bins(&a.bins)?;
    let mut evo: EvoParams = specs::parse_or_default(a.evo.as_deref(), "evo")?;
    if let Some(s) = a.seed {
        evo.seed = s;
    }
    evo.validate()?;
    let needs_corpus = a.metric == MetricKind::Ppl || (a.importance.is_none() && a.source == Sources::Activation);
    if needs_corpus && a.corpus.is_none() {
        return Err(Error::validation("args", "--corpus is required for this metric"));
    }

    let mut inputs: Vec<&Path> = vec![&a.space, &a.supernet, &a.bins];
    inputs.extend(a.evo.as_deref());
    inputs.extend(a.corpus.as_deref());
    inputs.extend(a.importance.as_deref());
    let config = json!({
        "space": space,
        "bins": bins,
        "evo": evo,
        "metric": format!("{:?}", a.metric).to_lowercase(),
        "importance_source": format!("{:?}", a.source).to_lowercase(),
        "eval_batches": a.eval_batches,
        "batch_size": a.batch_size,
        "seq_len": a.seq_len,
        "workers": a.workers,
    });
    let mut manifest = RunManifest::begin(&a.out, "search", config, evo.seed, &inputs)?;

    let model = checkpoint::load_supernet(&a.supernet)?;
    let sup = *model.config();
    space.check(&sup)?;
    let batches = match &a.corpus {
        Some(p) if needs_corpus => eval_batches(&load_corpus(p)?, a, sup.max_seq)?,
        _ => Vec::new(),
    };
    let tables: Option<ImportanceTables> = match a.metric {
        MetricKind::Ppl => None,
        MetricKind::Importance => {
            let t = match (&a.importance, a.source) {
                (Some(p), _) => ImportanceTables::load(p)?,
                (None, Sources::Activation) => compute_tables(&model, &batches)?,
                (None, Sources::Weight) => weight_magnitude_tables(&model),
            };
            t.check_shape(&sup)?;
            t.save(&a.out.join(IMPORTANCE_FILE))?;
            manifest.add(IMPORTANCE_FILE);
            Some(t)
        }
    };
    let metric = match &tables {
        Some(t) => Metric::Importance(t),
        None => Metric::Perplexity(&batches),
    };
    let search = Search { model: &model, space: &space, evo: &evo, metric, exec: Execution::from_workers(a.workers) };

    fs::create_dir_all(a.out.join(STATE_DIR))?;
    let mut done_rows: Vec<HistoryRow> = Vec::new();
    let mut report = Vec::new();
    let mut infeasible = false;
    let mut failed = None;
    for (i, &bin) in bins.iter().enumerate() {
        let sp = state_path(&a.out, i);
        let resume = if a.resume && sp.exists() {
            let s: BinState = serde_json::from_slice(&specs::read(&sp)?)
                .map_err(|e| Error::Format(format!("{}: {e}", sp.display())))?;
            if s.bin != bin || s.bin_index != i {
                return Err(Error::validation("resume", format!("{} belongs to a different bin", sp.display())));
            }
            Some(s)
        } else {
            None
        };
        let out = &a.out;
        let finished = &done_rows;
        let mut save_epoch = |s: &BinState| -> Result<(), Error> {
            let state = serde_json::to_vec(s).expect("state serializes");
            write_atomic(&state_path(out, i), &state)?;
            let mut rows = finished.clone();
            rows.extend(s.history.iter().cloned());
            write_atomic(&out.join(HISTORY_FILE), history_csv(&rows).as_bytes())
        };
        let result = with_workers(a.workers, || search.run_bin(i, bin, resume, &mut save_epoch));
        manifest.add(&format!("{STATE_DIR}/bin{i}.json"));
        match result {
            Ok(state) => {
                let best = state.best().expect("non-empty population");
                let text = format!(
                    "# bin {i}: [{}, {}], params {}, fitness {}\n{}",
                    bin.lower,
                    bin.upper,
                    best.params,
                    best.fitness,
                    specs::subnetwork_toml(&best.cfg)
                );
                write_atomic(&a.out.join(best_file(i)), text.as_bytes())?;
                manifest.add(&best_file(i));
                println!("bin {i} [{}, {}]: params {} fitness {}", bin.lower, bin.upper, best.params, best.fitness);
                report.push(json!({
                    "bin": i, "lower": bin.lower, "upper": bin.upper, "status": "ok",
                    "params": best.params, "fitness": best.fitness, "config": best_file(i),
                }));
                done_rows.extend(state.history);
            }
            Err(e) => {
                let status = if matches!(e, Error::Rejection { .. }) {
                    infeasible = true;
                    "infeasible"
                } else {
                    "error"
                };
                eprintln!("bin {i} [{}, {}]: {status}: {e}", bin.lower, bin.upper);
                report.push(json!({
                    "bin": i, "lower": bin.lower, "upper": bin.upper, "status": status, "message": e.to_string(),
                }));
                if status == "error" && failed.is_none() {
                    failed = Some(e);
                }
            }
        }
    }
    write_atomic(&a.out.join(HISTORY_FILE), history_csv(&done_rows).as_bytes())?;
    let status = serde_json::to_string_pretty(&json!({ "bins": report })).expect("status serializes");
    write_atomic(&a.out.join(STATUS_FILE), status.as_bytes())?;
    manifest.add(HISTORY_FILE);
    manifest.add(STATUS_FILE);
    if let Some(e) = failed {
        manifest.finish("failed")?;
        return Err(e);
    }
    manifest.finish(if infeasible { "infeasible" } else { "ok" })?;
    Ok(if infeasible { Outcome::Infeasible } else { Outcome::Done })
}

fn train_spec(a: &TrainArgs, model: &DenseModel) -> Result<TrainSpec, Error> {
    let mut spec: TrainSpec = specs::parse_or_default(a.train.as_deref(), "train")?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    if spec.seq_len > model.config.max_seq {
        return Err(Error::validation(
            "bounds",
            format!("seq_len {} exceeds the model's {}", spec.seq_len, model.config.max_seq),
        ));
    }
    Ok(spec)
}

fn prepare(a: &TrainArgs) -> Result<(DenseModel, TokenizedCorpus, TrainSpec), Error> {
    let mut model = checkpoint::load_model(&a.model)?;
    let spec = train_spec(a, &model)?;
    let corpus = load_corpus(&a.corpus)?;
    if a.init == crate::Init::Random {
        model.reinit(spec.seed);
    }
    Ok((model, corpus, spec))
}

fn finish_training(
    manifest: &mut RunManifest,
    result: Result<snf_core::train::TrainOutcome, Error>,
) -> Result<Outcome, Error> {
    manifest.add(MODEL_FILE);
    manifest.add(snf_core::train::OPTIMIZER_FILE);
    manifest.add(METRICS_FILE);
    match result {
        Ok(out) => {
            manifest.finish("ok")?;
            let last = out.log.last().expect("metric log starts at step 0");
            println!("step {} val_ppl {}", last.step, last.val_ppl);
            Ok(Outcome::Done)
        }
        Err(e) => {
            manifest.finish(if matches!(e, Error::Divergence { .. }) { "diverged" } else { "failed" })?;
            Err(e)
        }
    }
}

pub fn pretrain_cmd(a: &TrainArgs) -> Result<Outcome, Error> {
    let (model, corpus, spec) = prepare(a)?;
    let config = json!({ "train": spec, "init": format!("{:?}", a.init).to_lowercase() });
    let mut inputs: Vec<&Path> = vec![&a.model, &a.corpus];
    inputs.extend(a.train.as_deref());
    let mut manifest = RunManifest::begin(&a.out, "pretrain", config, spec.seed, &inputs)?;
    let opts = RunOptions { out_dir: Some(a.out.clone()), resume: a.resume, stop_after: a.stop_after };
    let result = pretrain(model, &corpus, &spec, &opts);
    finish_training(&mut manifest, result)
}

pub fn distill_cmd(a: &DistillArgs) -> Result<Outcome, Error> {
    let (model, corpus, spec) = prepare(&a.train)?;
    let dspec: DistillSpec = specs::parse_or_default(a.distill.as_deref(), "distill")?;
    dspec.validate(model.config.vocab_size)?;
    let teacher_model = checkpoint::load_model(&a.teacher)?;
    let teacher_sup = Supernet::from_dense(teacher_model.clone()).ok();
    let teacher = match &teacher_sup {
        Some(s) => Teacher::Supernet(s),
        None => Teacher::Dense(&teacher_model),
    };
    let config = json!({
        "train": spec,
        "distill": dspec,
        "init": format!("{:?}", a.train.init).to_lowercase(),
    });
    let mut inputs: Vec<&Path> = vec![&a.train.model, &a.teacher, &a.train.corpus];
    inputs.extend(a.train.train.as_deref());
    inputs.extend(a.distill.as_deref());
    let mut manifest = RunManifest::begin(&a.train.out, "distill", config, spec.seed, &inputs)?;
    let opts = RunOptions {
        out_dir: Some(a.train.out.clone()),
        resume: a.train.resume,
        stop_after: a.train.stop_after,
    };
    let result = distill(model, teacher, &corpus, &spec, &dspec, &opts);
    finish_training(&mut manifest, result)
}

pub fn eval(a: &EvalArgs) -> Result<Outcome, Error> {
    let model = checkpoint::load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    let spec = match &a.train {
        Some(p) => specs::parse(p, "train")?,
        None => TrainSpec { seq_len: TrainSpec::default().seq_len.min(model.config.max_seq), ..TrainSpec::default() },
    };
    let ppl = evaluate_perplexity(&model, &validation_batches(&corpus, &spec)?)?;
    println!("{ppl}");
    Ok(Outcome::Done)
}
