use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use aplearn_core::data::{generate_synthetic, load_hpatches, load_ubc, read_container};
use aplearn_core::eval::{
    fpr95, matching_pr_map, mean_by_tag, mutual_nn_match, retrieval_map, verification_map, Descriptors, EvalReport, Match, RetrievalProtocol,
    VerificationSet,
};
use aplearn_core::gradcheck::{run_check, registry, GradCheckConfig};
use aplearn_core::mining::{mine_dataset, mined_labels_text, read_mined_labels, DistractorSet};
use aplearn_core::model::checkpoint;
use aplearn_core::{DescriptorModel, PatchDataset, Split};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{RunConfig, SplitName, Source, Task};
use crate::Failure;

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::data(format!("{}: {e}", path.display()))
}

/// Loads the configured source at the side the model consumes.
pub fn load_dataset(cfg: &RunConfig, side: usize) -> Result<PatchDataset, Failure> {
    let path = || cfg.data.path.as_deref().expect("validated");
    let ds = match cfg.data.source {
        Source::Synthetic => generate_synthetic(&cfg.data.synthetic)?,
        Source::Ubc => load_ubc(path(), side)?,
        Source::Hpatches => load_hpatches(path(), side, &cfg.data.test_sequences)?,
        Source::Container => read_container(path())?,
    };
    log::info!("{} patches in {} groups over {} sequences", ds.len(), ds.num_groups(), ds.num_sequences());
    Ok(if ds.side() == side { ds } else { ds.resized(side) })
}

fn mined_set(cfg: &RunConfig, ds: &PatchDataset) -> Result<Option<DistractorSet>, Failure> {
    if !cfg.mining.enabled {
        return Ok(None);
    }
    let mut set = DistractorSet::default();
    if let Some(dir) = &cfg.mining.labels {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        for f in &files {
            set.extend(&read_mined_labels(f)?);
        }
        log::info!("read {} distractor pairs from {} label files", set.len(), files.len());
    } else {
        let train_seqs: Vec<usize> = (0..ds.num_sequences())
            .filter(|&s| ds.sequence_groups(s).iter().any(|&g| ds.groups()[g].split == Split::Train))
            .collect();
        for m in mine_dataset(ds, &train_seqs, &cfg.mining_config())? {
            set.extend(&m.set);
        }
        log::info!("mined {} distractor pairs over {} sequences", set.len(), train_seqs.len());
    }
    Ok(Some(set))
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let spec = cfg.model_spec();
    let ds = load_dataset(cfg, spec.input_side())?;
    let mined = mined_set(cfg, &ds)?;
    let tcfg = cfg.train_config(!ds.patches_in(Split::Val).is_empty())?;
    let mut model = DescriptorModel::new(spec, cfg.sgd.seed)?;
    create_dir(out)?;

    let log_path = out.join("train.log");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let echo = cfg.echo();
    writeln!(log, "# config = {echo}").map_err(io_err(&log_path))?;
    writeln!(log, "# train = {}", serde_json::to_string(&tcfg).expect("serializes")).map_err(io_err(&log_path))?;
    let mut write_err = None;
    let result = aplearn_core::train::train(&mut model, &ds, &tcfg, mined.as_ref(), |rec| {
        if let Err(e) = writeln!(log, "{}", rec.log_line()).and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
    });
    log.flush().map_err(io_err(&log_path))?;
    if let Some(e) = write_err {
        return Err(io_err(&log_path)(e));
    }
    let history = result?;

    let ckpt = out.join("model.apl");
    checkpoint::save(&model, &echo, &ckpt)?;
    let last = history.last().expect("at least one epoch");
    println!("trained {} epochs, final loss {:.6}; wrote {}", history.len(), last.loss, ckpt.display());
    Ok(())
}

fn split_indices(ds: &PatchDataset, split: SplitName) -> Vec<usize> {
    match split {
        SplitName::All => (0..ds.len()).collect(),
        SplitName::Train => ds.patches_in(Split::Train),
        SplitName::Val => ds.patches_in(Split::Val),
        SplitName::Test => ds.patches_in(Split::Test),
    }
}

/// Per-query AP means keyed by patch tier and by sequence tag, when present.
fn stratify(report: &mut EvalReport, rows: &[usize], ds: &PatchDataset, idx: &[usize]) {
    let tiers: Vec<Option<&String>> = rows.iter().map(|&r| ds.records()[idx[r]].tier.as_ref()).collect();
    if tiers.iter().any(Option::is_some) {
        let tags: Vec<String> = tiers.iter().map(|t| t.cloned().unwrap_or_else(|| "none".into())).collect();
        for (t, v) in mean_by_tag(&report.per_query_ap, &tags) {
            report.set(format!("map_tier_{t}"), v);
        }
    }
    let seq_tags: Vec<Option<&String>> = rows.iter().map(|&r| ds.sequences()[ds.sequence_of(idx[r])].tag.as_ref()).collect();
    if seq_tags.iter().any(Option::is_some) {
        let tags: Vec<String> = seq_tags.iter().map(|t| t.cloned().unwrap_or_else(|| "none".into())).collect();
        for (t, v) in mean_by_tag(&report.per_query_ap, &tags) {
            report.set(format!("map_seq_{t}"), v);
        }
    }
}

fn eval_retrieval(cfg: &RunConfig, ds: &PatchDataset, idx: &[usize], desc: &Descriptors) -> Result<EvalReport, Failure> {
    let groups: Vec<usize> = idx.iter().map(|&i| ds.group_of(i)).collect();
    let seqs: Vec<usize> = idx.iter().map(|&i| ds.sequence_of(i)).collect();
    let protocol = RetrievalProtocol::all_queries(&groups, &seqs, cfg.eval.distractors)?;
    let mut report = retrieval_map(&protocol, desc)?;
    stratify(&mut report, protocol.queries(), ds, idx);
    Ok(report)
}

fn eval_verification(cfg: &RunConfig, ds: &PatchDataset, idx: &[usize], desc: &Descriptors) -> Result<EvalReport, Failure> {
    let labels: Vec<usize> = idx.iter().map(|&i| ds.group_of(i)).collect();
    let set = VerificationSet::from_labels(&labels, &mut ChaCha8Rng::seed_from_u64(cfg.eval.seed))?;
    let (pos, neg) = set.split_distances(desc);
    let mut report = EvalReport::new("verification");
    report.set("fpr95", fpr95(&pos, &neg)?);
    report.set("map", verification_map(&set, desc)?);
    report.set("pairs", set.pairs().len() as f64);
    Ok(report)
}

/// Within each sequence, the first member of every group is matched against
/// the second. Matches from all sequences are pooled into one curve.
fn eval_matching(ds: &PatchDataset, idx: &[usize], desc: &Descriptors) -> Result<EvalReport, Failure> {
    let mut by_seq: BTreeMap<usize, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for (r, &i) in idx.iter().enumerate() {
        by_seq.entry(ds.sequence_of(i)).or_default().entry(ds.group_of(i)).or_default().push(r);
    }
    let (mut pooled, mut correct, mut truth) = (Vec::new(), Vec::new(), 0usize);
    let mut per_seq = Vec::new();
    for groups in by_seq.values() {
        let pairs: Vec<(usize, usize)> = groups.values().filter(|rows| rows.len() >= 2).map(|rows| (rows[0], rows[1])).collect();
        if pairs.is_empty() {
            continue;
        }
        let pick = |which: fn(&(usize, usize)) -> usize| Array2::from_shape_fn((pairs.len(), desc.data.ncols()), |(k, c)| desc.data[[which(&pairs[k]), c]]);
        let (a, b) = (pick(|p| p.0), pick(|p| p.1));
        let matches: Vec<Match> = mutual_nn_match(a.view(), b.view(), desc.metric)?;
        let ok: Vec<bool> = matches.iter().map(|m| m.a == m.b).collect();
        per_seq.push(matching_pr_map(&matches, &ok, pairs.len())?.metric("map").unwrap_or(0.0));
        truth += pairs.len();
        pooled.extend(matches);
        correct.extend(ok);
    }
    let mut report = matching_pr_map(&pooled, &correct, truth)?;
    report.set("map_sequence_mean", per_seq.iter().sum::<f64>() / per_seq.len() as f64);
    report.set("sequences", per_seq.len() as f64);
    Ok(report)
}

pub fn eval(cfg: &RunConfig, checkpoint_path: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let wanted = cfg.model_spec();
    let model = match checkpoint_path {
        Some(p) => {
            let (model, header) = checkpoint::load(p)?;
            if header.spec != wanted {
                return Err(Failure::usage(format!(
                    "checkpoint {} holds a {:?} model (dim {}), the config describes {:?} (dim {})",
                    p.display(),
                    header.spec.arch,
                    header.spec.dim,
                    wanted.arch,
                    wanted.dim
                )));
            }
            model
        }
        None => DescriptorModel::new(wanted, cfg.sgd.seed)?,
    };
    let ds = load_dataset(cfg, wanted.input_side())?;
    let idx = split_indices(&ds, cfg.eval.split);
    if idx.is_empty() {
        return Err(Failure::usage(format!("the {:?} split of this dataset is empty", cfg.eval.split)));
    }
    let desc = Descriptors::from_model(&model, &ds, &idx)?;
    let echo = json!({
        "run": cfg.echo(),
        "checkpoint": checkpoint_path.map_or_else(|| "random_init".to_string(), |p| p.display().to_string()),
        "patches": idx.len(),
    });
    create_dir(out)?;
    for task in &cfg.eval.tasks {
        let (stem, mut report) = match task {
            Task::Retrieval => ("retrieval", eval_retrieval(cfg, &ds, &idx, &desc)?),
            Task::Verification => ("verification", eval_verification(cfg, &ds, &idx, &desc)?),
            Task::Matching => ("matching", eval_matching(&ds, &idx, &desc)?),
        };
        report.config = echo.clone();
        report.write(out, stem)?;
        let headline: Vec<String> = report.metrics.iter().filter(|(k, _)| !k.starts_with("map_")).map(|(k, v)| format!("{k}={v:.4}")).collect();
        println!("{stem}: {}", headline.join(" "));
    }
    Ok(())
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn mine(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let mcfg = cfg.mining_config();
    mcfg.validate()?;
    let ds = load_dataset(cfg, cfg.model_spec().input_side())?;
    let seqs: Vec<usize> = (0..ds.num_sequences()).collect();
    let mined = mine_dataset(&ds, &seqs, &mcfg)?;
    create_dir(out)?;
    let mut seen = std::collections::HashSet::new();
    for m in &mined {
        let name = &ds.sequences()[m.sequence].name;
        let mut stem = file_stem(name);
        if !seen.insert(stem.clone()) {
            stem = format!("{stem}_{}", m.sequence);
        }
        let path = out.join(format!("{stem}.txt"));
        std::fs::write(&path, mined_labels_text(name, &mcfg, m)).map_err(io_err(&path))?;
        println!("{name}: tau={:.6} pairs={}", m.tau, m.set.len());
    }
    Ok(())
}

pub fn gradcheck(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>, corrupt: Option<String>) -> Result<(), Failure> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<GradCheckConfig>(&text).map_err(|e| Failure::usage(format!("config {}: {e}", p.display())))?
        }
        None => GradCheckConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if corrupt.is_some() {
        cfg.corrupt = corrupt;
    }
    let checks = registry();
    if let Some(name) = &cfg.corrupt {
        if !checks.iter().any(|c| c.name == name) {
            return Err(Failure::usage(format!("no gradient check named {name:?}")));
        }
    }
    let mut lines = vec![json!({ "config": cfg }).to_string()];
    let mut failed = Vec::new();
    for check in &checks {
        let result = run_check(check, &cfg)?;
        if !result.passed {
            failed.push(result.name.clone());
        }
        let line = serde_json::to_string(&result).expect("serializes");
        println!("{line}");
        lines.push(line);
    }
    if let Some(path) = out {
        std::fs::write(path, lines.join("\n") + "\n").map_err(io_err(path))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}
