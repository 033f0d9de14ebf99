//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset by passing criterion numbers, e.g.
//! `cargo test -p snf-cli --test acceptance -- 4 8`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::HashSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::{random_batches, reference_forward, scramble, tiny, toy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use snf_core::autodiff::{Graph, TopKSource};
use snf_core::data::{synthetic_text, tokenize_bytes, Batch};
use snf_core::importance::compute_tables;
use snf_core::model::{count_params, DenseModel, LayerChoice, Supernet, SubnetworkConfig, SupernetConfig};
use snf_core::search::{masked_perplexity, run_search, BinState, EvoParams, Metric, ParamBin, Search};
use snf_core::space::{Granularity, Layering, SearchSpace};
use snf_core::train::{
    combined_loss, evaluate_perplexity, pretrain, validation_batches, DistillSpec, LogitMode, MetricRow, RunOptions,
    TrainSpec,
};
use snf_core::{Execution, Tensor};

const SPACES: [(Granularity, Layering); 4] = [
    (Granularity::Coarse, Layering::Uniform),
    (Granularity::Coarse, Layering::LayerWise),
    (Granularity::FineGrained, Layering::Uniform),
    (Granularity::FineGrained, Layering::LayerWise),
];

/// `(lower, upper, params)` for every candidate any search in this suite
/// evaluated or logged.
static SEARCHED: Mutex<Vec<(usize, usize, usize)>> = Mutex::new(Vec::new());

fn record(state: &BinState) {
    let mut log = SEARCHED.lock().unwrap();
    let (lo, hi) = (state.bin.lower, state.bin.upper);
    log.extend(state.evaluated.iter().map(|c| (lo, hi, c.params)));
    log.extend(state.history.iter().map(|r| (lo, hi, r.params)));
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scrambled(sup: SupernetConfig, seed: u64, scale: f32) -> Supernet {
    let mut s = Supernet::new(sup, seed).unwrap();
    scramble(s.weights_mut(), seed + 1, scale);
    s
}

fn masking_equivalence() -> Outcome {
    let sup = toy();
    let s = scrambled(sup, 1, 0.3);
    let batches = random_batches(2, 16, sup.vocab_size, 2, sup.max_seq);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut configs = 0;
    for i in 0..50 {
        let (g, l) = SPACES[i % 4];
        let cfg = SearchSpace::full_range(&sup, g, l).sample(&sup, &mut rng);
        let dense = s.extract_dense(&cfg).unwrap();
        for b in &batches {
            let m = s.forward_masked(&cfg, &b.inputs, b.batch, b.seq_len).unwrap();
            let d = dense.logits(&b.inputs, b.batch, b.seq_len).unwrap();
            worst = worst.max(m.max_abs_diff(&d));
        }
        configs += 1;
    }
    check(worst < 1e-5, format!("{configs} configs x 16 batches, max |masked - extracted| = {worst:.2e}"))
}

fn param_count_oracle() -> Outcome {
    let sup = toy();
    let s = Supernet::new(sup, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for i in 0..200 {
        let (g, l) = SPACES[i % 4];
        let cfg = SearchSpace::full_range(&sup, g, l).sample(&sup, &mut rng);
        let summed: usize = s.extract_dense(&cfg).unwrap().named_params().iter().map(|(_, t)| t.len()).sum();
        if count_params(&sup, &cfg).unwrap() != summed {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("200 configs, {mismatches} mismatches"))
}

/// Every coarse configuration of `sup`, by nested loops.
fn brute_force(sup: &SupernetConfig, uniform: bool) -> HashSet<String> {
    let mut per_layer = Vec::new();
    for h in 1..=sup.n_head {
        for q in 1..=sup.n_query_groups {
            for hs in 1..=sup.head_size {
                for d in 1..=sup.intermediate_size {
                    let lc = LayerChoice::coarse(h, hs, d, q);
                    if SubnetworkConfig::uniform(1, 1, lc.clone()).validate(sup).is_ok() {
                        per_layer.push(lc);
                    }
                }
            }
        }
    }
    let mut out = HashSet::new();
    for e in 1..=sup.n_embd {
        if uniform {
            for l in 1..=sup.n_layer {
                for lc in &per_layer {
                    out.insert(SubnetworkConfig::uniform(l, e, lc.clone()).key());
                }
            }
        } else {
            for a in &per_layer {
                for b in &per_layer {
                    let cfg = SubnetworkConfig {
                        embed_dim: e,
                        layers: vec![a.clone(), b.clone()],
                        embd_indices: None,
                        layer_indices: None,
                    };
                    out.insert(cfg.key());
                }
            }
        }
    }
    out
}

fn cardinality() -> Outcome {
    let sup = tiny();
    let mut parts = Vec::new();
    let mut ok = true;
    for (layering, uniform, expected) in [(Layering::Uniform, true, 96u32), (Layering::LayerWise, false, 768)] {
        let space = SearchSpace::full_range(&sup, Granularity::Coarse, layering);
        let formula = space.cardinality(&sup).unwrap();
        let listed: HashSet<String> = space.enumerate(&sup).unwrap().iter().map(SubnetworkConfig::key).collect();
        let brute = brute_force(&sup, uniform);
        ok &= formula == expected.into() && listed == brute && brute.len() == expected as usize;
        parts.push(format!("{layering:?}: formula {formula}, enumerated {}, brute force {}", listed.len(), brute.len()));
    }
    check(ok, parts.join("; "))
}

fn tiny_model() -> Supernet {
    scrambled(tiny(), 10, 1.0)
}

fn tiny_batches() -> Vec<Batch> {
    random_batches(100, 2, tiny().vocab_size, 2, 8)
}

fn search_optimality() -> Outcome {
    let model = tiny_model();
    let batches = tiny_batches();
    let sup = model.config();
    let space = SearchSpace::full_range(sup, Granularity::Coarse, Layering::Uniform);
    let all = space.enumerate(sup).unwrap();
    let scored: Vec<(String, f64)> =
        all.iter().map(|c| (c.key(), masked_perplexity(&model, c, &batches).unwrap())).collect();
    let best = scored.iter().map(|(_, f)| *f).fold(f64::INFINITY, f64::min);
    let optimal: HashSet<&str> = scored.iter().filter(|(_, f)| *f == best).map(|(k, _)| k.as_str()).collect();

    let mut hits = 0;
    for seed in 0..20 {
        let evo = EvoParams { population: 16, elites: 4, epochs: 20, seed, ..EvoParams::default() };
        let search = Search {
            model: &model,
            space: &space,
            evo: &evo,
            metric: Metric::Perplexity(&batches),
            exec: Execution::Parallel,
        };
        let out = run_search(&search, &[ParamBin::new(1, usize::MAX).unwrap()]);
        let state = out[0].result.as_ref().map_err(|e| e.to_string())?;
        record(state);
        let found = state.best().unwrap();
        if found.fitness == best && optimal.contains(found.cfg.key().as_str()) {
            hits += 1;
        }
    }
    check(hits >= 19, format!("{hits}/20 seeds found the optimum of {} configs (ppl {best:.4})", all.len()))
}

/// Extra searches over the remaining spaces with bins that exclude most of
/// each space, so rejection sampling is exercised.
fn bin_searches() -> Result<(), String> {
    let model = tiny_model();
    let batches = tiny_batches();
    let sup = *model.config();
    let full = count_params(&sup, &SubnetworkConfig::full(&sup)).unwrap();
    let bins = [ParamBin::new(full / 4, full / 2).unwrap(), ParamBin::new(full / 2 + 1, full).unwrap()];
    for (g, l) in &SPACES[1..] {
        let space = SearchSpace::full_range(&sup, *g, *l);
        let evo = EvoParams { epochs: 6, seed: 9, ..EvoParams::default() };
        let search = Search {
            model: &model,
            space: &space,
            evo: &evo,
            metric: Metric::Perplexity(&batches),
            exec: Execution::Sequential,
        };
        for r in run_search(&search, &bins) {
            record(&r.result.map_err(|e| e.to_string())?);
        }
    }
    Ok(())
}

fn bin_constraint() -> Outcome {
    bin_searches()?;
    let log = SEARCHED.lock().unwrap();
    let outside = log.iter().filter(|(lo, hi, p)| p < lo || p > hi).count();
    check(!log.is_empty() && outside == 0, format!("{} logged candidates, {outside} outside their bin", log.len()))
}

fn gradients() -> Outcome {
    let f64s = common::gradcheck::errors::<f64>(1e-6);
    let f32s = common::gradcheck::errors::<f32>(1e-2);
    let combined = common::gradcheck::combined_loss_error();
    let worst = |v: &[(&str, f64)]| v.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let bad: Vec<String> = f64s
        .iter()
        .filter(|(_, e)| !(*e < 1e-6))
        .map(|(n, e)| format!("f64 {n} {e:.1e}"))
        .chain(f32s.iter().filter(|(_, e)| !(*e < 1e-3)).map(|(n, e)| format!("f32 {n} {e:.1e}")))
        .collect();
    let detail = format!(
        "{} ops, worst f64 {:.1e}, worst f32 {:.1e}, combined loss {combined:.1e}{}",
        f64s.len(),
        worst(&f64s),
        worst(&f32s),
        if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(", ")) }
    );
    check(bad.is_empty() && combined < 1e-3, detail)
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let g = Graph::<f64>::new();
    let t = g.constant(common::gradcheck::random::<f64>(&mut rng, &[6, 10], -4.0, 4.0));
    let s = g.constant(common::gradcheck::random::<f64>(&mut rng, &[6, 10], -4.0, 4.0));
    let full = g.forward_kl(t, s, 0.9).unwrap().item();
    let topk = g.topk_kl(t, s, 0.9, 10, TopKSource::Teacher).unwrap().item();
    let self_kl = g.forward_kl(t, t, 0.9).unwrap().item();

    let gs = Graph::<f32>::new();
    let student = common::gradcheck::random::<f32>(&mut rng, &[6, 10], -4.0, 4.0);
    let teacher = common::gradcheck::random::<f32>(&mut rng, &[6, 10], -4.0, 4.0);
    let y = [3, 0, 9, 9, 4, 1];
    let ce = gs.cross_entropy(gs.param(student.clone()), &y, None).unwrap().item();
    let spec = DistillSpec { alpha: 1.0, beta: 0.0, logit_mode: LogitMode::Full, ..DistillSpec::default() };
    let combined =
        combined_loss(&gs, gs.param(student), Some(gs.constant(teacher)), &y, &spec).unwrap().total.item();

    let two = |v: [f64; 2]| g.constant(Tensor::new(&[1, 2], v.to_vec()).unwrap());
    let example = g.forward_kl(two([3f64.ln(), 0.0]), two([0.0, 0.0]), 1.0).unwrap().item();

    let ok = (topk - full).abs() < 1e-6
        && self_kl == 0.0
        && combined.to_bits() == ce.to_bits()
        && (example - 0.130812).abs() < 1e-5;
    check(
        ok,
        format!(
            "|topk(k=C) - full| = {:.1e}, KL(p,p) = {self_kl}, CE-only combined == CE bitwise: {}, example KL = {example:.6}",
            (topk - full).abs(),
            combined.to_bits() == ce.to_bits()
        ),
    )
}

const WARM_SEEDS: u64 = 5;

/// Dimensions of the supernet trained for the warm-start comparison.
fn warm_supernet() -> SupernetConfig {
    SupernetConfig { max_seq: 32, ..toy() }
}

fn supernet_spec() -> TrainSpec {
    TrainSpec {
        tokens: 1_600_000,
        global_batch: 16,
        micro_batch: 16,
        seq_len: 32,
        lr: 3e-3,
        min_lr: 3e-4,
        warmup_steps: 100,
        eval_interval: 500,
        eval_batches: 8,
        ..TrainSpec::default()
    }
}

fn student_spec(seed: u64) -> TrainSpec {
    TrainSpec {
        tokens: 320_000,
        global_batch: 16,
        micro_batch: 16,
        seq_len: 32,
        lr: 3e-3,
        min_lr: 3e-4,
        warmup_steps: 50,
        eval_interval: 25,
        eval_batches: 8,
        seed,
        ..TrainSpec::default()
    }
}

/// Tokens the run needed before its validation perplexity first reached
/// `target`, if it ever did.
fn tokens_to_reach(log: &[MetricRow], target: f64) -> Option<usize> {
    log.iter().find(|r| r.val_ppl <= target).map(|r| r.tokens_seen)
}

fn warm_start() -> Outcome {
    let corpus = tokenize_bytes(&synthetic_text(5_000_000, 2024)).map_err(|e| e.to_string())?;
    let split = corpus.len() * 4 / 5;
    let teacher_data = corpus.subrange(0, split).map_err(|e| e.to_string())?;
    let fresh = corpus.subrange(split, corpus.len()).map_err(|e| e.to_string())?;

    let sup = warm_supernet();
    let init = DenseModel::init(sup.dense(), 7).map_err(|e| e.to_string())?;
    let trained = pretrain(init, &teacher_data, &supernet_spec(), &RunOptions::default()).map_err(|e| e.to_string())?;
    let tail: Vec<f64> = trained.log.iter().rev().take(2).map(|r| r.val_ppl).collect();
    let teacher = Supernet::from_dense(trained.model).map_err(|e| e.to_string())?;

    let half = SubnetworkConfig::uniform(
        sup.n_layer,
        sup.n_embd / 2,
        LayerChoice::coarse(sup.n_head / 2, sup.head_size, sup.intermediate_size / 2, sup.n_query_groups / 2),
    );
    let extracted = teacher.extract_dense(&half).map_err(|e| e.to_string())?;

    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..WARM_SEEDS {
        let spec = student_spec(seed);
        let random = DenseModel::init(extracted.config.clone(), 100 + seed).map_err(|e| e.to_string())?;
        let cold = pretrain(random, &fresh, &spec, &RunOptions::default()).map_err(|e| e.to_string())?;
        let warm = pretrain(extracted.clone(), &fresh, &spec, &RunOptions::default()).map_err(|e| e.to_string())?;
        let last = cold.log.last().unwrap();
        let needed = tokens_to_reach(&warm.log, last.val_ppl);
        if needed.is_some_and(|t| t < last.tokens_seen) {
            wins += 1;
        }
        rows.push(format!(
            "seed {seed}: random {:.3} after {} tokens, warm reached it after {}",
            last.val_ppl,
            last.tokens_seen,
            needed.map_or("never".to_string(), |t| t.to_string())
        ));
    }
    let val = validation_batches(&fresh, &student_spec(0)).map_err(|e| e.to_string())?;
    let start = evaluate_perplexity(&extracted, &val).map_err(|e| e.to_string())?;
    check(
        wins >= 4,
        format!(
            "{wins}/{WARM_SEEDS} seeds; supernet val ppl {:.3} -> {:.3} over its last eval interval, extracted start ppl {start:.3}; {}",
            tail[1],
            tail[0],
            rows.join("; ")
        ),
    )
}

fn importance_oracles() -> Outcome {
    let sup = SupernetConfig { n_layer: 1, ..toy() };
    let model = scrambled(sup, 30, 0.5);
    let batches = random_batches(31, 3, sup.vocab_size, 2, 8);
    let tables = compute_tables(&model, &batches).map_err(|e| e.to_string())?;

    let mut ffn = vec![0.0; sup.intermediate_size];
    let mut emb = vec![0.0; sup.n_embd];
    let mut heads = vec![0.0; sup.n_head];
    let mut block = 0.0;
    for b in &batches {
        let tr = reference_forward(model.weights(), &b.inputs, b.batch, b.seq_len);
        let rows = tr.logits.len() as f64;
        for r in &tr.mlp_preact[0] {
            for (a, x) in ffn.iter_mut().zip(r) {
                *a += x.abs() / rows;
            }
        }
        for norm in &tr.norms {
            for r in norm {
                for (a, x) in emb.iter_mut().zip(r) {
                    *a += x.abs() / rows / tr.norms.len() as f64;
                }
            }
        }
        for r in &tr.attn_heads[0] {
            for (h, a) in heads.iter_mut().enumerate() {
                let seg = &r[h * sup.head_size..(h + 1) * sup.head_size];
                *a += seg.iter().map(|x| x * x).sum::<f64>().sqrt() / rows;
            }
        }
        let mut cos = 0.0;
        for (i, o) in tr.block_inputs[0].iter().zip(&tr.block_outputs[0]) {
            let dot: f64 = i.iter().zip(o).map(|(a, b)| a * b).sum();
            let ni = i.iter().map(|a| a * a).sum::<f64>().sqrt();
            let no = o.iter().map(|a| a * a).sum::<f64>().sqrt();
            cos += dot / (ni * no);
        }
        block += 1.0 - cos / rows;
    }
    let n = batches.len() as f64;
    let mut worst = 0.0f64;
    let mut diff = |t: f32, o: f64| worst = worst.max((t as f64 - o / n).abs() / (1.0 + (o / n).abs()));
    for (t, o) in tables.ffn[0].iter().zip(&ffn).chain(tables.emb.iter().zip(&emb)).chain(tables.heads[0].iter().zip(&heads)) {
        diff(*t, *o);
    }
    diff(tables.blocks[0], block);

    let mut identity = scrambled(toy(), 32, 0.5);
    let blk = &mut identity.weights_mut().blocks[1];
    for t in [&mut blk.wo, &mut blk.bo, &mut blk.w_proj, &mut blk.b_proj] {
        t.data_mut().fill(0.0);
    }
    let id_tables = compute_tables(&identity, &random_batches(33, 2, 256, 2, 8)).map_err(|e| e.to_string())?;
    let id_score = id_tables.blocks[1];

    let mut zero_head = scrambled(toy(), 34, 0.5);
    let hs = toy().head_size;
    let blk = &mut zero_head.weights_mut().blocks[2];
    let w = blk.wv.last_dim();
    blk.wv.data_mut()[..hs * w].fill(0.0);
    blk.bv.data_mut()[..hs].fill(0.0);
    let zh = compute_tables(&zero_head, &random_batches(35, 2, 256, 2, 8)).map_err(|e| e.to_string())?;
    let zero_scores = [zh.heads[2][0], zh.heads[2][1]];

    check(
        worst < 1e-5 && id_score.abs() < 1e-6 && zero_scores == [0.0, 0.0],
        format!("max relative table error {worst:.1e}, identity block {id_score:.1e}, zero-value heads {zero_scores:?}"),
    )
}

const SUPERNET_TOML: &str = "n_layer = 4\nn_embd = 32\nn_head = 4\nhead_size = 8\nintermediate_size = 64\n\
                             n_query_groups = 2\nvocab_size = 256\nmax_seq = 16\n";
const SPACE_TOML: &str = "granularity = \"fine_grained\"\nlayering = \"layer_wise\"\n\n[choices]\n\
                          layers = [2, 3, 4]\nembed_dim = [16, 24, 32]\nheads = [1, 2, 4]\nhead_size = [4, 8]\n\
                          intermediate_size = [16, 32, 64]\nquery_groups = [1, 2]\n";
const BINS: [(usize, usize); 2] = [(8000, 25000), (25001, 47000)];
const EVO_TOML: &str = "population = 8\nelites = 2\nepochs = 4\noffspring = 4\nrandom = 4\n";
const TRAIN_TOML: &str = "tokens = 20480\nglobal_batch = 8\nmicro_batch = 4\nseq_len = 16\nlr = 0.003\n\
                          min_lr = 0.0003\nwarmup_steps = 5\neval_interval = 10\neval_batches = 2\n";

fn snf(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_snf"))
        .args(args)
        .current_dir(dir)
        .env_remove("SNF_WORKERS")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("snf {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let bins: String = BINS.iter().map(|(lo, hi)| format!("[[bins]]\nlower = {lo}\nupper = {hi}\n\n")).collect();
    for (name, text) in
        [("sup.toml", SUPERNET_TOML), ("space.toml", SPACE_TOML), ("bins.toml", &bins), ("evo.toml", EVO_TOML), ("train.toml", TRAIN_TOML)]
    {
        fs::write(dir.join(name), text).map_err(|e| e.to_string())?;
    }
    snf(dir, &["init", "--config", "sup.toml", "--out", "sup.snfw", "--seed", "3"])?;
    snf(dir, &["gen-corpus", "--bytes", "80000", "--seed", "4", "--out", "corpus.txt"])?;
    let read = |p: &str| fs::read(dir.join(p)).map_err(|e| format!("{p}: {e}"));
    let mut same = Vec::new();
    for run in ["s1", "s2"] {
        snf(
            dir,
            &[
                "search", "--space", "space.toml", "--supernet", "sup.snfw", "--bins", "bins.toml", "--evo", "evo.toml",
                "--corpus", "corpus.txt", "--seed", "11", "--out", run,
            ],
        )?;
        snf(
            dir,
            &[
                "pretrain", "--model", "sup.snfw", "--corpus", "corpus.txt", "--train", "train.toml", "--seed", "12",
                "--out", &format!("p{}", &run[1..]),
            ],
        )?;
    }
    let history = read("s1/history.csv")?;
    same.push(history == read("s2/history.csv")?);
    same.push(read("p1/metrics.csv")? == read("p2/metrics.csv")?);

    let text = String::from_utf8_lossy(&history);
    let mut log = SEARCHED.lock().unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let bin: usize = cols[1].parse().map_err(|_| format!("bad row {line}"))?;
        let params: usize = cols[3].parse().map_err(|_| format!("bad row {line}"))?;
        log.push((BINS[bin].0, BINS[bin].1, params));
        rows += 1;
    }
    check(
        same == [true, true] && rows > 0,
        format!("history.csv identical: {} ({rows} rows), metrics.csv identical: {}", same[0], same[1]),
    )
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "masking/extraction equivalence", budget: Duration::from_secs(120), run: masking_equivalence },
        Criterion { id: 2, name: "parameter-count oracle", budget: Duration::from_secs(30), run: param_count_oracle },
        Criterion { id: 3, name: "cardinality vs enumeration", budget: Duration::from_secs(5), run: cardinality },
        Criterion { id: 4, name: "search optimality", budget: Duration::from_secs(600), run: search_optimality },
        Criterion { id: 6, name: "gradient correctness", budget: Duration::from_secs(60), run: gradients },
        Criterion { id: 7, name: "distillation-loss identities", budget: Duration::MAX, run: loss_identities },
        Criterion { id: 8, name: "warm-start effect", budget: Duration::from_secs(1800), run: warm_start },
        Criterion { id: 9, name: "importance oracles", budget: Duration::MAX, run: importance_oracles },
        Criterion { id: 10, name: "search and pretrain determinism", budget: Duration::MAX, run: determinism },
        // Last, so it sees every search the suite ran.
        Criterion { id: 5, name: "bin constraint", budget: Duration::MAX, run: bin_constraint },
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > c.budget => Err(format!("{d}; over the {:?} budget", c.budget)),
            r => r,
        };
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("AC{} {tag} {}: {detail} ({:.1}s)", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
