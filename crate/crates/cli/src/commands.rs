use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use d2dlstm::cascade::{self, DatasetSplit, DiffusionTree};
use d2dlstm::d2dlstm::check_random_trees;
use d2dlstm::features::{self, read_features, read_records, write_features, UserId};
use d2dlstm::generation::{compare_trees, diff_to_dot, generate_trees, TreeDiff};
use d2dlstm::io::write_json;
use d2dlstm::kmeans::ClusterModel;
use d2dlstm::pipeline::{normalize_features, stage_seeds};
use d2dlstm::prototypes::{self, map_users, PrototypeModel};
use d2dlstm::synth::CascadeGenerator;
use d2dlstm::training::{
    self as training, ablation_grid, evaluate_any, AblationRow, Checkpoint, ModelKind, SweepInput, SweepRow, TrainData,
};
use serde_json::{json, Value};

use crate::{CliError, PipelineConfig};

type Res = Result<Value, CliError>;

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub quiet: bool,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.cfg.path(p)
    }

    /// Resolves an input path and fails early when it is missing.
    fn input(&self, p: &Path, hint: &str) -> Result<PathBuf, CliError> {
        let full = self.path(p);
        if !full.exists() {
            return Err(CliError::Input(format!("missing {} (run `d2d {hint}` first)", full.display())));
        }
        Ok(full)
    }

    /// Resolves an output path and creates its parent directory.
    fn output(&self, p: &Path) -> Result<PathBuf, CliError> {
        let full = self.path(p);
        if let Some(dir) = full.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(full)
    }

    fn output_dir(&self, p: &Path) -> Result<PathBuf, CliError> {
        let full = self.path(p);
        std::fs::create_dir_all(&full)?;
        Ok(full)
    }

    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn split_file(&self, part: &str) -> PathBuf {
        self.cfg.paths.split.join(format!("{part}.jsonl"))
    }

    fn load_split(&self) -> Result<DatasetSplit, CliError> {
        let mut parts = Vec::new();
        for part in ["train", "val", "test"] {
            parts.push(cascade::read_trees(self.input(&self.split_file(part), "split")?)?);
        }
        let test = parts.pop().expect("three parts");
        let val = parts.pop().expect("three parts");
        let train = parts.pop().expect("three parts");
        Ok(DatasetSplit { train, val, test })
    }

    fn load_prototypes(&self) -> Result<PrototypeModel, CliError> {
        let p = self.input(&self.cfg.paths.prototypes, "build-prototypes")?;
        Ok(PrototypeModel::from_json(&std::fs::read_to_string(p)?)?)
    }

    fn model_path(&self, kind: ModelKind, best: bool) -> PathBuf {
        let name = serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let file = if best { format!("{name}.best.json") } else { format!("{name}.json") };
        self.cfg.paths.models.join(file)
    }

    fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf, CliError> {
        let p = self.output(&self.cfg.paths.reports.join(rel))?;
        std::fs::write(&p, text)?;
        Ok(p)
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

pub fn simulate(ctx: &Ctx) -> Res {
    let g = CascadeGenerator::new(ctx.cfg.generator.clone())?;
    let n = ctx.cfg.generator.n_trees;
    ctx.progress(format!("simulating {n} trees"));
    let (trees, records) = g.generate(n);
    let rp = ctx.output(&ctx.cfg.paths.records)?;
    d2dlstm::io::write_jsonl(&rp, &records)?;
    let tp = ctx.output(&ctx.cfg.paths.truth_trees)?;
    cascade::write_trees(&tp, &trees)?;
    let bayes = g.bayes_accuracy(&trees, ctx.cfg.train.arch.terminal_targets)?;
    Ok(json!({
        "records": records.len(),
        "trees": trees.len(),
        "users": g.user_map().len(),
        "bayes_accuracy": bayes,
        "records_path": show(&rp),
        "truth_trees_path": show(&tp),
    }))
}

pub fn cluster_gps(ctx: &Ctx) -> Res {
    let records = read_records(ctx.input(&ctx.cfg.paths.records, "simulate")?)?;
    let (gps_seed, _) = stage_seeds(ctx.cfg.seed);
    ctx.progress(format!("clustering {} positions into {} regions", records.len(), ctx.cfg.features.regions));
    let gps = features::cluster_gps(&records, ctx.cfg.features.regions, gps_seed)?;
    let p = ctx.output(&ctx.cfg.paths.gps)?;
    std::fs::write(&p, gps.to_json())?;
    Ok(json!({ "regions": gps.k, "points": records.len(), "gps_path": show(&p) }))
}

pub fn build_features(ctx: &Ctx) -> Res {
    let records = read_records(ctx.input(&ctx.cfg.paths.records, "simulate")?)?;
    let gps = ClusterModel::from_json(&std::fs::read_to_string(ctx.input(&ctx.cfg.paths.gps, "cluster-gps")?)?)?;
    let raw = features::build_all_features(&records, &gps)?;
    let (norm, normalized) = normalize_features(&raw)?;
    let fp = ctx.output(&ctx.cfg.paths.features)?;
    write_features(&fp, &normalized)?;
    let np = ctx.output(&ctx.cfg.paths.norm)?;
    write_json(&np, &norm)?;
    Ok(json!({
        "users": normalized.len(),
        "dim": norm.per_dim_max.len(),
        "features_path": show(&fp),
        "norm_path": show(&np),
    }))
}

pub fn build_prototypes(ctx: &Ctx) -> Res {
    let feats = read_features(ctx.input(&ctx.cfg.paths.features, "build-features")?)?;
    let rows: Vec<Vec<f64>> = feats.values().cloned().collect();
    let (_, seed) = stage_seeds(ctx.cfg.seed);
    ctx.progress(format!("clustering {} users into {} prototypes", rows.len(), ctx.cfg.features.k));
    let protos = prototypes::build_prototypes(&rows, ctx.cfg.features.k, seed)?;
    let p = ctx.output(&ctx.cfg.paths.prototypes)?;
    std::fs::write(&p, protos.to_json())?;
    let map = map_users(&feats, &protos)?;
    let mut sizes = vec![0usize; protos.k()];
    map.values().for_each(|&c| sizes[c] += 1);
    Ok(json!({
        "k": protos.k(),
        "users": feats.len(),
        "inertia": protos.cluster.inertia,
        "min_cluster": sizes.iter().min(),
        "max_cluster": sizes.iter().max(),
        "prototypes_path": show(&p),
    }))
}

pub fn make_trees(ctx: &Ctx) -> Res {
    let records = read_records(ctx.input(&ctx.cfg.paths.records, "simulate")?)?;
    let report = cascade::build_trees(&records)?;
    let mut trees = report.trees;
    let (fp, pp) = (ctx.path(&ctx.cfg.paths.features), ctx.path(&ctx.cfg.paths.prototypes));
    let labeled = fp.exists() && pp.exists();
    if labeled {
        let feats = read_features(&fp)?;
        let map = map_users(&feats, &ctx.load_prototypes()?)?;
        cascade::label_trees(&mut trees, &map)?;
    } else {
        ctx.progress("no prototypes yet: writing unlabeled trees");
    }
    let p = ctx.output(&ctx.cfg.paths.trees)?;
    cascade::write_trees(&p, &trees)?;
    Ok(json!({
        "trees": trees.len(),
        "nodes": trees.iter().map(DiffusionTree::len).sum::<usize>(),
        "labeled": labeled,
        "self_records": report.self_records,
        "dropped_edges": report.dropped_edges,
        "trees_path": show(&p),
    }))
}

pub fn split(ctx: &Ctx) -> Res {
    let trees = cascade::read_trees(ctx.input(&ctx.cfg.paths.trees, "make-trees")?)?;
    let parts = cascade::split(&trees, ctx.cfg.split.ratios(), ctx.cfg.seed)?;
    ctx.output_dir(&ctx.cfg.paths.split)?;
    for (name, part) in [("train", &parts.train), ("val", &parts.val), ("test", &parts.test)] {
        cascade::write_trees(ctx.path(&ctx.split_file(name)), part)?;
    }
    Ok(json!({
        "train": parts.train.len(),
        "val": parts.val.len(),
        "test": parts.test.len(),
        "split_dir": show(&ctx.path(&ctx.cfg.paths.split)),
    }))
}

pub fn train_data(ctx: &Ctx) -> Result<(TrainData, PrototypeModel), CliError> {
    let protos = ctx.load_prototypes()?;
    let parts = ctx.load_split()?;
    let tc = &ctx.cfg.train;
    Ok((TrainData::new(&protos, &parts, tc.mask, tc.arch.terminal_targets)?, protos))
}

pub fn train(ctx: &Ctx) -> Res {
    let (data, _) = train_data(ctx)?;
    let tc = ctx.cfg.train.clone();
    let last_path = ctx.output(&ctx.model_path(tc.model, false))?;
    let best_path = ctx.output(&ctx.model_path(tc.model, true))?;
    ctx.progress(format!("training {} on {} trees for {} epochs", tc.model.name(), data.train.len(), tc.epochs));
    let (model, hist) = training::train(&tc, &data, &mut |e| {
        let r = e.history.last().expect("epoch recorded");
        ctx.progress(format!(
            "epoch {:>3} lr {:.1e} train {:.4}/{:.4} val {:.4}/{:.4} test {:.4}/{:.4}",
            e.epoch, r.lr, r.train.loss, r.train.accuracy, r.val.loss, r.val.accuracy, r.test.loss, r.test.accuracy
        ));
        let ck = Checkpoint::new(e.model, Some(e.epoch)).with_mask(tc.mask);
        ck.save(&last_path)?;
        if e.is_best {
            ck.save(&best_path)?;
        }
        Ok(())
    })?;
    let name = ctx.model_path(tc.model, false).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let csv = ctx.write_text(&format!("train_{name}.csv"), &hist.to_csv())?;
    let hp = ctx.output(&ctx.cfg.paths.reports.join(format!("train_{name}.json")))?;
    write_json(&hp, &hist)?;
    let last = hist.last().expect("at least one epoch");
    Ok(json!({
        "model": model.kind().name(),
        "epochs": hist.epochs.len(),
        "steps": hist.total_steps(),
        "train_accuracy": last.train.accuracy,
        "test_accuracy": last.test.accuracy,
        "train_loss": last.train.loss,
        "test_loss": last.test.loss,
        "convergence_step": hist.convergence_step,
        "lr_reduced_after_epoch": hist.lr_reduced_after_epoch,
        "best_val_epoch": hist.best_val_epoch,
        "checkpoint": show(&last_path),
        "best_checkpoint": show(&best_path),
        "metrics_csv": show(&csv),
        "history_json": show(&hp),
    }))
}

/// Loads a checkpoint and a data set masked the way the model was trained.
fn load_for_model(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<(d2dlstm::training::AnyModel, TrainData), CliError> {
    let ck_path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => ctx.input(&ctx.model_path(ctx.cfg.train.model, false), "train")?,
    };
    let ck = Checkpoint::load(&ck_path)?;
    let mask = ck.header.mask;
    let policy = ck.header.arch.terminal_targets;
    let model = ck.into_model()?;
    let protos = ctx.load_prototypes()?;
    let parts = ctx.load_split()?;
    let data = TrainData::new(&protos, &parts, mask, policy)?;
    if data.input_dim() != model.input_dim() || data.k != model.num_classes() - 1 {
        return Err(CliError::Input(format!(
            "checkpoint expects input dimension {} and k = {}, data has {} and {}",
            model.input_dim(),
            model.num_classes() - 1,
            data.input_dim(),
            data.k
        )));
    }
    Ok((model, data))
}

pub fn eval(ctx: &Ctx, checkpoint: Option<&Path>, bayes: bool) -> Res {
    let (model, data) = load_for_model(ctx, checkpoint)?;
    let mut out = json!({ "model": model.kind().name() });
    for (name, set) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let r = evaluate_any(&model, &data.table, set)?;
        out[format!("{name}_accuracy")] = r.accuracy.into();
        out[format!("{name}_loss")] = r.loss.into();
        out[format!("{name}_pairs")] = r.pairs.into();
    }
    if bayes {
        let g = CascadeGenerator::new(ctx.cfg.generator.clone())?;
        let test = ctx.load_split()?.test;
        out["bayes_accuracy"] = g.bayes_accuracy(&test, model.arch().terminal_targets)?.into();
        out["depth_aware_bayes_accuracy"] = g.depth_aware_bayes_accuracy(&test, model.arch().terminal_targets)?.into();
    }
    let p = ctx.output(&ctx.cfg.paths.reports.join("eval.json"))?;
    write_json(&p, &out)?;
    out["report"] = show(&p).into();
    Ok(out)
}

pub fn ablate(ctx: &Ctx) -> Res {
    let protos = ctx.load_prototypes()?;
    let parts = ctx.load_split()?;
    let table = protos.input_table()?;
    ctx.progress("training the six comparison rows");
    let report = ablation_grid(&ctx.cfg.train, &table, &parts, &mut |r: &AblationRow| {
        ctx.progress(format!("{:<9} {:<32} test accuracy {:.4}", r.model.name(), r.mask.label(), r.test_accuracy));
    })?;
    let txt = ctx.write_text("ablation.txt", &report.to_text())?;
    let csv = ctx.write_text("ablation.csv", &report.to_csv())?;
    let jp = ctx.output(&ctx.cfg.paths.reports.join("ablation.json"))?;
    write_json(&jp, &report)?;
    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| json!({ "model": r.model.name(), "mask": r.mask.label(), "test_accuracy": r.test_accuracy }))
        .collect();
    Ok(json!({ "rows": rows, "text": show(&txt), "csv": show(&csv), "json": show(&jp) }))
}

pub fn sweep_k(ctx: &Ctx) -> Res {
    let feats: BTreeMap<UserId, Vec<f64>> = read_features(ctx.input(&ctx.cfg.paths.features, "build-features")?)?;
    let trees = cascade::read_trees(ctx.input(&ctx.cfg.paths.trees, "make-trees")?)?;
    let input = SweepInput {
        features: feats,
        trees,
        split_ratios: ctx.cfg.split.ratios(),
        split_seed: ctx.cfg.seed,
        cluster_seed: stage_seeds(ctx.cfg.seed).1,
    };
    let report = training::prototype_sweep(&ctx.cfg.sweep.ks, &input, &ctx.cfg.train, &mut |r: &SweepRow| {
        ctx.progress(format!("k = {:>4} test accuracy {:.4}", r.k, r.test_accuracy));
    })?;
    for (k, why) in &report.skipped {
        ctx.progress(format!("warning: skipped k = {k}: {why}"));
    }
    let txt = ctx.write_text("sweep.txt", &report.to_text())?;
    let csv = ctx.write_text("sweep.csv", &report.to_csv())?;
    let jp = ctx.output(&ctx.cfg.paths.reports.join("sweep.json"))?;
    write_json(&jp, &report)?;
    let rows: Vec<Value> = report.rows.iter().map(|r| json!({ "k": r.k, "test_accuracy": r.test_accuracy })).collect();
    Ok(json!({
        "rows": rows,
        "best_k": report.best().map(|r| r.k),
        "skipped": report.skipped.iter().map(|(k, _)| *k).collect::<Vec<_>>(),
        "text": show(&txt),
        "csv": show(&csv),
        "json": show(&jp),
    }))
}

pub fn gradcheck(ctx: &Ctx) -> Res {
    let c = &ctx.cfg.gradcheck;
    ctx.progress(format!("checking {} trees (hidden {}, k {})", c.trees, c.hidden, c.k));
    let r = check_random_trees(c)?;
    let v = to_json(&r);
    if r.passed {
        Ok(v)
    } else {
        Err(CliError::Verification(v))
    }
}

pub fn generate(ctx: &Ctx, checkpoint: Option<&Path>, count: Option<usize>) -> Res {
    let (model, data) = load_for_model(ctx, checkpoint)?;
    let test = ctx.load_split()?.test;
    let n = count.unwrap_or(test.len()).min(test.len());
    let requests: Vec<(usize, usize)> = test[..n]
        .iter()
        .map(|t| {
            let root = t.nodes[0].proto.ok_or_else(|| CliError::Input("test trees are not labeled".into()))?;
            Ok((root, t.category))
        })
        .collect::<Result<_, CliError>>()?;
    let mut gc = ctx.cfg.generate.clone();
    gc.use_content = data.mask.use_content;
    gc.validate()?;
    let trees = generate_trees(&model, &data.table, &requests, &gc)?;
    let p = ctx.output(&ctx.cfg.paths.generated)?;
    cascade::write_trees(&p, &trees)?;
    let nodes: usize = trees.iter().map(DiffusionTree::len).sum();
    Ok(json!({
        "trees": trees.len(),
        "nodes": nodes,
        "max_depth": trees.iter().map(DiffusionTree::depth).max(),
        "max_branch": trees.iter().map(DiffusionTree::max_branch).max(),
        "mode": to_json(&gc.mode),
        "generated_path": show(&p),
    }))
}

pub fn compare(ctx: &Ctx, predicted: Option<&Path>, truth: Option<&Path>, dots: usize) -> Res {
    let pp = match predicted {
        Some(p) => p.to_path_buf(),
        None => ctx.input(&ctx.cfg.paths.generated, "generate")?,
    };
    let tp = match truth {
        Some(p) => p.to_path_buf(),
        None => ctx.input(&ctx.split_file("test"), "split")?,
    };
    let pred = cascade::read_trees(&pp)?;
    let truth = cascade::read_trees(&tp)?;
    if pred.len() > truth.len() {
        return Err(CliError::Input(format!("{} predicted trees but only {} reference trees", pred.len(), truth.len())));
    }
    let diffs: Vec<TreeDiff> = pred.iter().zip(&truth).map(|(p, t)| compare_trees(p, t)).collect::<Result<_, _>>()?;
    let sum = |f: fn(&TreeDiff) -> usize| diffs.iter().map(f).sum::<usize>();
    let (correct, wrong, missing, extra) = (sum(|d| d.correct), sum(|d| d.wrong), sum(|d| d.missing), sum(|d| d.extra));
    let truth_nodes: usize = truth[..pred.len()].iter().map(DiffusionTree::len).sum();
    let per_tree: String = diffs.iter().map(|d| d.to_json() + "\n").collect();
    let jl = ctx.write_text("compare.jsonl", &per_tree)?;
    let dot_dir = ctx.output_dir(&ctx.cfg.paths.reports.join("compare_dot"))?;
    for (i, ((p, t), d)) in pred.iter().zip(&truth).zip(&diffs).take(dots).enumerate() {
        std::fs::write(dot_dir.join(format!("tree_{i}.dot")), diff_to_dot(p, t, d)?)?;
    }
    let mut out = json!({
        "pairs": diffs.len(),
        "identical": diffs.iter().filter(|d| d.is_identical()).count(),
        "correct": correct,
        "wrong": wrong,
        "missing": missing,
        "extra": extra,
        "truth_nodes": truth_nodes,
        "node_recall": if truth_nodes > 0 { correct as f64 / truth_nodes as f64 } else { 0.0 },
    });
    let sp = ctx.output(&ctx.cfg.paths.reports.join("compare.json"))?;
    write_json(&sp, &out)?;
    out["per_tree"] = show(&jl).into();
    out["dot_dir"] = show(&dot_dir).into();
    out["report"] = show(&sp).into();
    Ok(out)
}
