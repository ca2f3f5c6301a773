use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::json;

use cirm_core::datagen::{build_world, sample_splits, Dataset, GenerativeWorld, WorldSpec};
use cirm_core::evalharness::{
    run_ablation, run_benchmark, write_ablation_csv, write_auc_table_csv, write_curves_csv, AblationSpec,
    BenchmarkReport, BenchmarkSpec, SuiteConfig, WorldChoice,
};
use cirm_core::intervene::{run_trajectory, PolicyKind, SelectionUnits};
use cirm_core::models::{
    init_model, load_model, save_model, ArchConfig, ConceptModel, ModelDims, ModelKind, ModelTraining, SavedModel,
    TrainConfig,
};
use cirm_core::realign::{
    load_realigner, save_realigner, train_realigner_posthoc, ConceptRealigner, Realigner, RealignerConfig,
    SavedRealigner,
};
use cirm_service::{AppState, ModelEntry, ModelRegistry, ServiceConfig};

use crate::args::*;
use crate::{CliError, CliResult};

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let out = Out::create(&cli.out)?;
    match &cli.command {
        Command::GenWorld(a) => gen_world(&out, a),
        Command::GenData(a) => gen_data(&out, a),
        Command::Train(a) => train(&out, a),
        Command::TrainRealigner(a) => train_realigner(&out, a),
        Command::Simulate(a) => simulate(&out, a),
        Command::Benchmark(a) => benchmark(&out, a),
        Command::Ablate(a) => ablate(&out, a),
        Command::Serve(a) => serve(&out, a),
        Command::Export(a) => export(&out, a),
    }
}

/// The output directory. Inputs default to files inside it.
struct Out {
    dir: PathBuf,
}

impl Out {
    fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.path(name))
    }

    /// The given path, or the default file if it exists.
    fn optional_input(&self, given: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
        given.clone().or_else(|| Some(self.path(name)).filter(|p| p.exists()))
    }

    fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let path = self.path(name);
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        Ok(wrote(path))
    }

    fn create_file(&self, name: &str) -> CliResult<(PathBuf, BufWriter<File>)> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok((path, BufWriter::new(f)))
    }
}

fn wrote(path: PathBuf) -> PathBuf {
    eprintln!("wrote {}", path.display());
    path
}

/// Names the missing file, which core i/o errors do not.
fn existing(path: &Path) -> CliResult<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::io(path, std::io::ErrorKind::NotFound.into()))
    }
}

fn load_world(path: &Path) -> CliResult<GenerativeWorld> {
    Ok(build_world(WorldSpec::load(existing(path)?)?)?)
}

fn read_model(path: &Path) -> CliResult<ConceptModel> {
    Ok(load_model(existing(path)?)?.model)
}

fn read_realigner(path: &Path) -> CliResult<Realigner> {
    Ok(load_realigner(existing(path)?)?.realigner)
}

fn read_data(path: &Path, num_classes: usize) -> CliResult<Dataset> {
    Ok(Dataset::read_csv(existing(path)?, num_classes)?)
}

fn units_for(world: Option<&GenerativeWorld>, k: usize) -> CliResult<SelectionUnits> {
    match world {
        Some(w) if w.num_concepts() != k => Err(CliError::Invalid(format!(
            "world has {} concepts but the model has {k}",
            w.num_concepts()
        ))),
        Some(w) => Ok(SelectionUnits::from_groups(k, w.groups())?),
        None => Ok(SelectionUnits::singletons(k)),
    }
}

fn apply_training(cfg: &mut TrainConfig, flags: &TrainingFlags) {
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = flags.lr {
        cfg.lr = lr;
    }
    if let Some(b) = flags.batch_size {
        cfg.batch_size = b;
    }
    if let Some(p) = flags.patience {
        cfg.early_stop_patience = p;
    }
}

fn seeded(policy: &PolicyKind, seed: Option<u64>) -> PolicyKind {
    match seed {
        Some(s) => policy.clone().reseeded(s),
        None => policy.clone(),
    }
}

fn gen_world(out: &Out, a: &GenWorldArgs) -> CliResult<()> {
    let mut spec = WorldSpec::preset(a.preset, a.seed);
    if let Some(s) = a.noise_sigma {
        spec.noise_sigma = s;
    }
    if let Some(f) = a.flip_rate {
        spec.flip_rate = vec![f; spec.num_concepts];
    }
    // Validates the overrides before anything is written.
    let world = build_world(spec)?;
    let path = out.path("world.json");
    world.spec().save(&path)?;
    wrote(path);
    Ok(())
}

fn gen_data(out: &Out, a: &GenDataArgs) -> CliResult<()> {
    let world = load_world(&out.input(&a.world, "world.json"))?;
    let splits = sample_splits(&world, (a.n_train, a.n_val, a.n_test), a.seed)?;
    for (name, d) in [
        ("train.csv", &splits.train),
        ("val.csv", &splits.val),
        ("test.csv", &splits.test),
    ] {
        let path = out.path(name);
        d.write_csv(&path)?;
        wrote(path);
    }
    Ok(())
}

fn read_split(dir: &Path, name: &str, num_classes: usize) -> CliResult<Dataset> {
    read_data(&dir.join(name), num_classes)
}

fn train(out: &Out, a: &TrainArgs) -> CliResult<()> {
    let world = load_world(&out.input(&a.world, "world.json"))?;
    let data_dir = a.data_dir.clone().unwrap_or_else(|| out.dir.clone());
    let train = read_split(&data_dir, "train.csv", world.num_classes())?;
    let val = read_split(&data_dir, "val.csv", world.num_classes())?;
    let mut arch = ArchConfig::default();
    if let Some(l) = a.hidden_layers {
        arch.hidden_layers = l;
    }
    if a.hidden_width.is_some() {
        arch.hidden_width = a.hidden_width;
    }
    if let Some(m) = a.embedding_width {
        arch.embedding_width = m;
    }
    let mut training = ModelTraining::default();
    apply_training(&mut training.train, &a.training);
    let units = units_for(Some(&world), world.num_concepts())?;
    let mut model = init_model(a.kind, ModelDims::of_world(&world), &arch, &training, a.seed)?;
    eprintln!("training {} on {} samples", a.kind, train.len());
    let histories = cirm_core::models::train_model(&mut model, &training, &train, &val, Some(&units), a.seed)?;
    for h in &histories {
        eprintln!("{}: best validation loss {:.6}", h.stage, h.best_val_loss);
    }
    model.freeze();
    let config = json!({ "kind": a.kind, "training": training });
    let path = out.path("model.json");
    save_model(&path, &SavedModel::new(model, arch, a.seed, config))?;
    wrote(path);
    Ok(())
}

fn train_realigner(out: &Out, a: &TrainRealignerArgs) -> CliResult<()> {
    let mut base = read_model(&out.input(&a.model, "model.json"))?;
    base.freeze();
    let world = out
        .optional_input(&a.world, "world.json")
        .map(|p| load_world(&p))
        .transpose()?;
    let units = units_for(world.as_ref(), base.num_concepts())?;
    let data_dir = a.data_dir.clone().unwrap_or_else(|| out.dir.clone());
    let train = read_split(&data_dir, "train.csv", base.num_classes())?;
    let val = read_split(&data_dir, "val.csv", base.num_classes())?;
    let mut cfg = RealignerConfig {
        arch: a.arch,
        input_mode: a.input_mode,
        hidden_layers: a.hidden_layers,
        hidden_width: a.hidden_width,
        training_policy: seeded(&a.policy, a.policy_seed),
        train_horizon: a.train_horizon,
        include_initial_step: a.include_initial_step,
        ..RealignerConfig::default()
    };
    apply_training(&mut cfg.train, &a.training);
    eprintln!("training realigner on {} samples", train.len());
    let (realigner, history) = train_realigner_posthoc(&base, &train, &val, &cfg, Some(&units), a.seed)?;
    eprintln!("realigner: best validation loss {:.6}", history.best_val_loss);
    let path = out.path("realigner.json");
    save_realigner(&path, &SavedRealigner::new(realigner, a.seed))?;
    wrote(path);
    Ok(())
}

fn simulate(out: &Out, a: &SimulateArgs) -> CliResult<()> {
    let model = read_model(&out.input(&a.model, "model.json"))?;
    let realigner = a.realigner.as_deref().map(read_realigner).transpose()?;
    let world = out
        .optional_input(&a.world, "world.json")
        .map(|p| load_world(&p))
        .transpose()?;
    let units = units_for(world.as_ref(), model.num_concepts())?;
    let data = read_data(&out.input(&a.data, "test.csv"), model.num_classes())?;
    let sample = data.records.get(a.sample_index).ok_or_else(|| {
        CliError::Invalid(format!(
            "sample index {} is out of range for {} samples",
            a.sample_index,
            data.len()
        ))
    })?;
    let horizon = a.horizon.unwrap_or(units.len());
    let policy = seeded(&a.policy, a.policy_seed);
    let r = realigner.as_ref().map(|r| r as &dyn ConceptRealigner);
    let traj = run_trajectory(&model, r, &policy, horizon, sample, Some(&units))?;
    out.write_json("trajectory.json", &traj)?;
    Ok(())
}

fn suite_config(flags: &SuiteFlags, out: &Out) -> CliResult<SuiteConfig> {
    let mut c = SuiteConfig::for_preset(flags.world);
    if let Some(s) = &flags.sizes {
        let [tr, va, te] = s[..] else {
            return Err(CliError::Invalid("--sizes takes three comma-separated counts".into()));
        };
        c.sizes = (tr, va, te);
    }
    if let Some(e) = flags.epochs {
        c.training.train.epochs = e;
    }
    if let Some(e) = flags.realigner_epochs {
        c.realigner.train.epochs = e;
    }
    c.horizon = flags.horizon;
    c.cache_dir = (!flags.no_cache).then(|| out.path("cache"));
    Ok(c)
}

fn benchmark(out: &Out, a: &BenchmarkArgs) -> CliResult<()> {
    let f = &a.suite_flags;
    let mut spec = BenchmarkSpec::table1(f.world, f.world_seed, f.seeds.clone());
    if a.suite == Suite::Full {
        spec.kinds.push(ModelKind::IntCem);
    }
    spec.config = suite_config(f, out)?;
    spec.jobs = f.jobs;
    eprintln!(
        "benchmark: {} kinds x {} seeds on {}",
        spec.kinds.len(),
        spec.seeds.len(),
        f.world.name()
    );
    let report = run_benchmark(&spec)?;
    out.write_json("benchmark.json", &report)?;
    write_report_csv(out, &report)?;
    for failure in &report.failures {
        eprintln!(
            "cell {} {} seed {} failed: {}",
            failure.world, failure.kind, failure.seed, failure.error
        );
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::FailedCells(report.failures.len()))
    }
}

/// `auc_table.csv` plus one curve file per cell and arm under `curves/`.
fn write_report_csv(out: &Out, report: &BenchmarkReport) -> CliResult<()> {
    let (path, w) = out.create_file("auc_table.csv")?;
    write_auc_table_csv(w, &report.table())?;
    wrote(path);
    for cell in &report.cells {
        for arm in &cell.arms {
            let tag = if arm.realigned { "realigned" } else { "base" };
            let name = format!("curves/{}-{}-{}-{tag}.csv", cell.world, cell.kind, cell.seed);
            let (path, w) = out.create_file(&name)?;
            write_curves_csv(w, &[&arm.concept, &arm.accuracy])?;
            wrote(path);
        }
    }
    Ok(())
}

fn ablate(out: &Out, a: &AblateArgs) -> CliResult<()> {
    let f = &a.suite_flags;
    let mut spec = AblationSpec::new(a.kind, WorldChoice::preset(f.world, f.world_seed), f.seeds.clone());
    spec.model = a.model;
    spec.config = suite_config(f, out)?;
    spec.jobs = f.jobs;
    eprintln!("ablation {} over {} seeds", a.kind, spec.seeds.len());
    let report = run_ablation(&spec)?;
    out.write_json(&format!("ablation-{}.json", a.kind), &report)?;
    let (path, w) = out.create_file(&format!("ablation-{}.csv", a.kind))?;
    write_ablation_csv(w, &report)?;
    wrote(path);
    Ok(())
}

fn export(out: &Out, a: &ExportArgs) -> CliResult<()> {
    let path = out.input(&a.report, "benchmark.json");
    let bytes = fs::read(existing(&path)?).map_err(|e| CliError::io(&path, e))?;
    let report: BenchmarkReport = serde_json::from_slice(&bytes)?;
    write_report_csv(out, &report)
}

fn serve(out: &Out, a: &ServeArgs) -> CliResult<()> {
    let model = read_model(&out.input(&a.model, "model.json"))?;
    let num_classes = model.num_classes();
    let mut entry = ModelEntry::new(a.id.clone(), model);
    if let Some(p) = out.optional_input(&a.world, "world.json") {
        entry = entry.with_world(&load_world(&p)?)?;
    }
    if let Some(p) = &a.realigner {
        entry = entry.with_realigner(read_realigner(p)?)?;
    }
    if let Some(p) = out.optional_input(&a.data, "test.csv") {
        entry = entry.with_samples(read_data(&p, num_classes)?);
    }
    let mut registry = ModelRegistry::new();
    registry.insert(entry);
    let config = ServiceConfig {
        session_ttl: Duration::from_secs(a.ttl_secs),
        expose_truth: a.expose_truth,
    };
    let state = AppState::new(registry, config);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Invalid(format!("cannot start runtime: {e}")))?;
    eprintln!("listening on {}", a.addr);
    rt.block_on(cirm_service::serve(a.addr, state))
        .map_err(|e| CliError::Invalid(format!("server error: {e}")))
}
