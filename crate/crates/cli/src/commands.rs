use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use fusereader::autodiff::ParamStore;
use fusereader::datasets::{
    load_cloze, load_factoid, save_json, synth_cloze, synth_factoid, ClozeInstance, ClozeSynthConfig,
    FactoidInstance, FactoidSynthConfig,
};
use fusereader::metrics::{cloze_report, csv_row, factoid_report, BleuMode, MetricReport, CLOZE_CSV_HEADER, FACTOID_CSV_HEADER};
use fusereader::pretrain::pretrain_role;
use fusereader::reader::{encode_cloze, ClozeModel, ClozePreset};
use fusereader::tokenizer::Vocab;
use fusereader::training::{apply_freeze, fit, split_dataset, threads_from_env, Monitor};
use fusereader::unilm::{encode_factoid, FactoidPreset, FactoidTask};

use crate::config::{resolve, ConfigFile, Method, RunConfig, TrainFlags};
use crate::manifest::{blob_hash, hash_inputs, now, run_hash, FitSummary, GroupHashes, RunManifest};
use crate::{AnswerArgs, CliError, DataKind, EvalArgs, GenDataArgs, TrainArgs};

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let write = |r: fusereader::Result<()>| {
        r.map_err(|e| CliError::Usage(format!("cannot write {}: {e}", a.out.display())))
    };
    match a.kind {
        DataKind::Cloze => {
            let data = synth_cloze(&ClozeSynthConfig {
                n: a.n,
                vocab_size: a.vocab_size.unwrap_or(200),
                num_entities: a.num_entities,
                signal: a.signal,
                seed: a.seed,
            })?;
            write(save_json(&data, &a.out))
        }
        DataKind::Factoid => {
            let mut cfg = FactoidSynthConfig::new(a.n, a.vocab_size.unwrap_or(60), a.seed);
            cfg.non_extractable = a.non_extractable;
            write(save_json(&synth_factoid(&cfg)?, &a.out))
        }
    }
}

pub enum Model {
    Cloze(ClozeModel),
    Factoid(FactoidTask),
}

impl Model {
    fn encoder_roles(&self) -> Vec<char> {
        let prefixes: Vec<&str> = match self {
            Model::Cloze(m) => m.encoders.iter().map(|e| e.prefix()).collect(),
            Model::Factoid(t) => t.model.encoders.iter().map(|e| e.prefix()).collect(),
        };
        prefixes.into_iter().map(|p| if p == "encoder1" { 'A' } else { 'B' }).collect()
    }
}

/// Builds the preset, applies its freezing and ties the output projection.
pub fn build_model(cfg: &RunConfig, vocab: &Vocab, store: &mut ParamStore) -> Result<Model, CliError> {
    let enc = cfg.encoder.config(vocab.len());
    let model = match cfg.method {
        Method::ClozeAoa => Model::Cloze(ClozeModel::build(ClozePreset::parse(&cfg.preset)?, &enc, store, cfg.seed)?),
        Method::FactoidGen => {
            let preset = FactoidPreset::parse(&cfg.preset)?;
            let mut rng = StdRng::seed_from_u64(cfg.seed ^ 0x6A7E);
            let model = preset.build(&enc, &cfg.gate, store, cfg.seed, &mut rng)?;
            Model::Factoid(FactoidTask {
                model,
                vocab: vocab.clone(),
                gen: cfg.generation.clone(),
                generate_in_eval: cfg.train.early_stop.metric == Monitor::ValF1,
            })
        }
    };
    apply_freeze(store, &cfg.train.freeze)?;
    Ok(match model {
        Model::Factoid(mut t) => {
            t.model.tie_to_trainable(store);
            Model::Factoid(t)
        }
        m => m,
    })
}

enum Data {
    Cloze(Vec<ClozeInstance>),
    Factoid(Vec<FactoidInstance>),
}

impl Data {
    fn load(method: Method, path: &Path) -> Result<Self, CliError> {
        Ok(match method {
            Method::ClozeAoa => Data::Cloze(load_cloze(path)?),
            Method::FactoidGen => {
                let set = load_factoid(path)?;
                for w in &set.warnings {
                    eprintln!("warning: {}: {w}", path.display());
                }
                Data::Factoid(set.instances)
            }
        })
    }

    fn len(&self) -> usize {
        match self {
            Data::Cloze(v) => v.len(),
            Data::Factoid(v) => v.len(),
        }
    }

    fn subset(&self, idx: &[usize]) -> Self {
        match self {
            Data::Cloze(v) => Data::Cloze(idx.iter().map(|&i| v[i].clone()).collect()),
            Data::Factoid(v) => Data::Factoid(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    fn texts(&self) -> Vec<String> {
        match self {
            Data::Cloze(v) => v
                .iter()
                .flat_map(|d| {
                    let mut t = vec![d.passage.clone(), d.query.clone()];
                    t.extend(d.candidates.iter().cloned());
                    t
                })
                .collect(),
            Data::Factoid(v) => v
                .iter()
                .flat_map(|d| [d.question.clone(), d.context.clone(), d.answer.clone()])
                .collect(),
        }
    }

    fn save(&self, path: &Path) -> Result<(), CliError> {
        match self {
            Data::Cloze(v) => save_json(v, path)?,
            Data::Factoid(v) => save_json(v, path)?,
        }
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

/// Paths inside a run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint")
    }
    pub fn params(&self) -> PathBuf {
        self.checkpoint().join("params")
    }
    pub fn vocab(&self) -> PathBuf {
        self.checkpoint().join("vocab.txt")
    }
    pub fn run_config(&self) -> PathBuf {
        self.checkpoint().join("run.json")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.json"))
    }
}

pub fn train(a: &TrainArgs) -> Result<RunManifest, CliError> {
    let started = now();
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let flags = TrainFlags {
        preset: a.preset.clone(),
        data: a.data.clone(),
        val: a.val.clone(),
        test: a.test.clone(),
        seed: a.seed,
        out: a.out.clone(),
        max_epochs: a.max_epochs,
        patience: a.patience,
        lr: a.lr,
        batch: a.batch,
        pretrain_steps: a.pretrain_steps,
    };
    let cfg = resolve(file, flags)?;
    let mut input_files: Vec<(&str, &Path)> = vec![("data", cfg.data.as_path())];
    if let Some(p) = &cfg.val {
        input_files.push(("val", p));
    }
    if let Some(p) = &cfg.test {
        input_files.push(("test", p));
    }
    if let Some(p) = &a.config {
        input_files.push(("config", p));
    }
    let inputs = hash_inputs(&input_files)?;
    let input_hash = run_hash(&cfg, &inputs)?;

    let all = Data::load(cfg.method, &cfg.data)?;
    let (train_set, val_set, test_set) = match &cfg.val {
        Some(v) => {
            let test = cfg.test.as_ref().map(|t| Data::load(cfg.method, t)).transpose()?;
            (all, Data::load(cfg.method, v)?, test)
        }
        None => {
            let split = split_dataset(all.len(), (0.8, 0.1, 0.1), cfg.seed)?;
            let test = match &cfg.test {
                Some(t) => Data::load(cfg.method, t)?,
                None => all.subset(&split.test),
            };
            (all.subset(&split.train), all.subset(&split.val), Some(test))
        }
    };

    let layout = RunLayout::new(&cfg.out);
    create_dir(&layout.params())?;
    create_dir(&layout.root.join("data"))?;

    let vocab = Vocab::build(train_set.texts().iter().map(String::as_str), cfg.encoder.max_vocab)?;
    let threads = threads_from_env();
    let mut store = ParamStore::new();
    let model = build_model(&cfg, &vocab, &mut store)?;
    if cfg.pretrain.steps > 0 {
        let enc = cfg.encoder.config(vocab.len());
        let pcfg = fusereader::pretrain::PretrainConfig {
            threads,
            ..cfg.pretrain.clone()
        };
        for role in model.encoder_roles() {
            log::info!("pretraining encoder role {role}");
            let p = pretrain_role(&enc, &vocab, role, &pcfg)?;
            store.load_from(&p.store)?;
        }
    }
    let frozen: Vec<String> = cfg.train.freeze.groups.iter().cloned().collect();
    let before: Vec<String> = frozen.iter().map(|g| store.group_hash(g)).collect();

    let mut tcfg = cfg.train.clone();
    tcfg.threads = threads;
    let result = match (&model, &train_set, &val_set) {
        (Model::Cloze(m), Data::Cloze(tr), Data::Cloze(va)) => {
            let enc = |d: &[ClozeInstance]| {
                d.iter()
                    .map(|i| encode_cloze(i, &vocab, cfg.encoder.max_len))
                    .collect::<fusereader::Result<Vec<_>>>()
            };
            fit(m, &mut store, &enc(tr)?, &enc(va)?, &tcfg)?
        }
        (Model::Factoid(t), Data::Factoid(tr), Data::Factoid(va)) => {
            let enc = |d: &[FactoidInstance]| {
                d.iter()
                    .map(|i| encode_factoid(i, &t.model, &vocab, &t.gen))
                    .collect::<fusereader::Result<Vec<_>>>()
            };
            fit(t, &mut store, &enc(tr)?, &enc(va)?, &tcfg)?
        }
        _ => unreachable!("data and model follow the same method"),
    };

    store.save_dir(layout.params())?;
    vocab.save(layout.vocab())?;
    std::fs::write(layout.run_config(), serde_json::to_vec_pretty(&cfg)?)?;
    result.log.write_jsonl(layout.log())?;
    let mut outputs = BTreeMap::new();
    outputs.insert("checkpoint".to_string(), layout.checkpoint());
    outputs.insert("log".to_string(), layout.log());
    outputs.insert("manifest".to_string(), layout.manifest());
    for (name, set) in [("train", Some(&train_set)), ("val", Some(&val_set)), ("test", test_set.as_ref())] {
        if let Some(set) = set {
            set.save(&layout.split(name))?;
            outputs.insert(format!("{name}_split"), layout.split(name));
        }
    }
    let frozen_groups = frozen
        .iter()
        .zip(before)
        .map(|(g, before)| {
            let after = store.group_hash(g);
            let unchanged = before == after;
            (g.clone(), GroupHashes { before, after, unchanged })
        })
        .collect();
    let manifest = RunManifest {
        config: cfg,
        input_hash,
        inputs,
        started,
        finished: now(),
        outputs,
        frozen_groups,
        fit: FitSummary {
            best_epoch: result.best_epoch,
            best_value: result.best_value,
            steps: result.steps,
            stopped_early: result.stopped_early,
        },
    };
    manifest.write(&layout.manifest())?;
    Ok(manifest)
}

/// A trained run restored from its directory.
pub struct Loaded {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub model: Model,
}

pub fn load_run(dir: &Path) -> Result<Loaded, CliError> {
    let layout = RunLayout::new(dir);
    let cfg_path = layout.run_config();
    let bytes = std::fs::read(&cfg_path)
        .map_err(|e| CliError::Usage(format!("missing checkpoint {}: {e}", cfg_path.display())))?;
    let config: RunConfig = serde_json::from_slice(&bytes)?;
    let vocab = Vocab::load(layout.vocab())?;
    let mut store = ParamStore::new();
    let model = build_model(&config, &vocab, &mut store)?;
    let saved = ParamStore::load_dir(layout.params())?;
    if saved.len() != store.len() {
        return Err(CliError::Usage(format!(
            "checkpoint has {} parameters, the model {}",
            saved.len(),
            store.len()
        )));
    }
    store.load_from(&saved)?;
    Ok(Loaded { config, vocab, store, model })
}

/// The deterministic content of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub method: Method,
    pub data_sha256: String,
    pub metrics: MetricReport,
}

pub fn eval(a: &EvalArgs) -> Result<EvalReport, CliError> {
    let run = load_run(&a.checkpoint)?;
    let data_path = a.data.clone().unwrap_or_else(|| RunLayout::new(&a.checkpoint).split("test"));
    let bytes = std::fs::read(&data_path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", data_path.display())))?;
    let data = Data::load(run.config.method, &data_path)?;
    let threads = threads_from_env();
    let metrics = match (&run.model, &data) {
        (Model::Cloze(m), Data::Cloze(d)) => {
            let ex = d
                .iter()
                .map(|i| encode_cloze(i, &run.vocab, run.config.encoder.max_len))
                .collect::<fusereader::Result<Vec<_>>>()?;
            let out = m.predict_all(&run.store, &ex, threads)?;
            let preds: Vec<usize> = out.iter().map(|p| p.0).collect();
            let gold: Vec<usize> = ex.iter().map(|e| e.answer).collect();
            cloze_report(&preds, &gold)?
        }
        (Model::Factoid(t), Data::Factoid(d)) => {
            let ex = d
                .iter()
                .map(|i| encode_factoid(i, &t.model, &run.vocab, &t.gen))
                .collect::<fusereader::Result<Vec<_>>>()?;
            let answers = t.answer_all(&run.store, &ex, threads)?;
            let refs: Vec<String> = d.iter().map(|i| i.answer.clone()).collect();
            factoid_report(&answers, &refs, BleuMode::Sentence)?
        }
        _ => unreachable!("data and model follow the same method"),
    };
    let report = EvalReport {
        model: run.config.preset.clone(),
        method: run.config.method,
        data_sha256: blob_hash(&bytes),
        metrics,
    };
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    std::fs::write(&a.out, json).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", a.out.display())))?;
    if let Some(csv) = &a.csv {
        let header = if report.metrics.accuracy.is_some() {
            CLOZE_CSV_HEADER
        } else {
            FACTOID_CSV_HEADER
        };
        let text = format!("{header}\n{}\n", csv_row(&report.model, &report.metrics));
        std::fs::write(csv, text).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", csv.display())))?;
    }
    Ok(report)
}

/// Answers each `question<TAB>context` line. Blank lines are skipped. In
/// lenient mode a malformed line prints an empty answer line so outputs stay
/// aligned with inputs.
pub fn answer<R: BufRead, W: Write, E: Write>(
    a: &AnswerArgs,
    input: R,
    out: &mut W,
    err: &mut E,
) -> Result<(), CliError> {
    let run = load_run(&a.checkpoint)?;
    let Model::Factoid(task) = &run.model else {
        return Err(CliError::Usage(format!(
            "preset {} is a cloze reader; answer needs a factoid checkpoint",
            run.config.preset
        )));
    };
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let result = match line.split_once('\t') {
            Some((q, c)) => task
                .model
                .frame_source(q, c, &run.vocab, &task.gen)
                .and_then(|src| task.model.generate_ids(&run.store, &src, &task.gen))
                .and_then(|ids| run.vocab.decode(&ids))
                .map_err(|e| e.to_string()),
            None => Err("expected question<TAB>context".to_string()),
        };
        match result {
            Ok(ans) => writeln!(out, "{ans}")?,
            Err(msg) => {
                writeln!(err, "line {}: {msg}", i + 1)?;
                if !a.lenient {
                    return Err(CliError::Usage(format!("malformed input on line {}", i + 1)));
                }
                writeln!(out)?;
            }
        }
    }
    Ok(())
}
