use std::fs;
use std::path::{Path, PathBuf};

use tvseg::engine::{infer_volume, logs_to_csv, train_until, TrainSetup, TrainState, LESION_CHANNEL};
use tvseg::experiment::{preset_loss, run_trend, TrendConfig};
use tvseg::gradcheck::{run_gradcheck, GradcheckConfig};
use tvseg::losses::LossPreset;
use tvseg::metrics::{aggregate, evaluate_subject, reports_to_csv, render_table, SubjectMetrics};
use tvseg::postproc::postprocess;
use tvseg::storage::{
    self, load_params, load_train_state, parse_config, read_dataset, read_manifest, read_mask, save_params,
    save_train_state, subject_file, write_atomic, write_config, write_dataset, write_mask, write_volume,
    RunConfig, GT_KIND, MANIFEST_FILE,
};
use tvseg::synth::{generate_dataset, Split};
use tvseg::volume::mask_from_threshold;
use tvseg::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_IO: u8 = 4;

pub const PROB_KIND: &str = "prob";
pub const MASK_KIND: &str = "mask";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("{0}")]
    Usage(String),

    #[error("cannot read configuration {path}: {source}")]
    ConfigFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::ConfigFile { .. } => EXIT_USAGE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) => match e {
                Error::NonFinite { .. } | Error::StaleTape => EXIT_NUMERICAL,
                Error::Io { .. }
                | Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::DtypeMismatch { .. }
                | Error::Format { .. } => EXIT_IO,
                _ => EXIT_USAGE,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn init_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(CliError::Usage("thread count must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

/// Reads the configuration file or falls back to the defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    match parse_config(path) {
        Err(Error::Io { path, source }) => Err(CliError::ConfigFile { path, source }),
        other => Ok(other?),
    }
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(io_err(dir)(e)),
    }
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if !force && is_nonempty_dir(dir)? {
        return Err(CliError::Usage(format!(
            "{} exists and is not empty; pass --force to write into it",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn gen(config: Option<&Path>, out_dir: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.gen.seed = s;
    }
    prepare_out_dir(out_dir, force)?;
    let data = generate_dataset(&cfg.gen)?;
    write_dataset(out_dir, &data)?;
    write_config(&out_dir.join("config.toml"), &cfg)?;
    println!(
        "train {} validation {} test {}",
        cfg.gen.n_train, cfg.gen.n_validation, cfg.gen.n_test
    );
    Ok(())
}

pub struct TrainOptions {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub preset: LossPreset,
    pub seed: Option<u64>,
    pub resume: Option<PathBuf>,
    pub epochs: Option<usize>,
}

pub fn train(o: &TrainOptions) -> Result<()> {
    let mut cfg = load_config(o.config.as_deref())?;
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    cfg.loss = preset_loss(&cfg.loss, o.preset);
    let data = read_dataset(&o.data, None)?;
    fs::create_dir_all(&o.out).map_err(io_err(&o.out))?;
    let mut state = match &o.resume {
        Some(p) => {
            let s = load_train_state(p)?;
            if *s.params.config() != cfg.net {
                return Err(Error::CheckpointMismatch(format!(
                    "{} was trained with {:?}, configuration asks for {:?}",
                    p.display(),
                    s.params.config(),
                    cfg.net
                ))
                .into());
            }
            s
        }
        None => TrainState::new(&cfg.net, &cfg.train)?,
    };
    write_config(&o.out.join("config.toml"), &cfg)?;
    let setup = TrainSetup {
        train: &cfg.train,
        augment: &cfg.augment,
        loss: &cfg.loss,
        subjects: &data,
    };
    let last = o.out.join("last.ckpt");
    let mut saved = Ok(());
    train_until(&mut state, &setup, o.epochs, |st, log| {
        println!(
            "epoch {:>3} lr {:.3e} train {:.5} val {:.5} dc {:.4}",
            log.epoch, log.lr, log.train_loss, log.val_loss, log.val_dc
        );
        if saved.is_ok() {
            saved = save_train_state(&last, st);
        }
    })?;
    saved?;
    save_train_state(&last, &state)?;
    save_params(&o.out.join("best.ckpt"), &state.best, state.best_epoch)?;
    write_atomic(&o.out.join("epochs.csv"), logs_to_csv(&state.logs)?.as_bytes())?;
    println!(
        "{} epochs, best epoch {}, loss {}",
        state.epoch,
        state.best_epoch.map_or("-".into(), |e| e.to_string()),
        o.preset.key()
    );
    Ok(())
}

pub fn predict(ckpt: &Path, data: &Path, split: Split, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let (params, _) = load_params(ckpt, config.map(|_| &cfg.net))?;
    let subjects = read_dataset(data, Some(split))?;
    if subjects.is_empty() {
        return Err(CliError::Usage(format!("no {split} subjects in {}", data.display())));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    for s in &subjects {
        let probs = infer_volume(&params, &s.image, cfg.infer.window, cfg.infer.overlap)?;
        if !probs.is_finite() {
            return Err(CliError::Numerical(format!("non-finite probabilities for {}", s.id)));
        }
        let mask = mask_from_threshold(&probs.extract_channel(LESION_CHANNEL)?, cfg.infer.threshold)?;
        write_volume(&subject_file(out, &s.id, PROB_KIND), &probs)?;
        write_mask(&subject_file(out, &s.id, MASK_KIND), &mask)?;
    }
    println!("predicted {} {split} subjects", subjects.len());
    Ok(())
}

/// Mask files (`*.vsg` with the binary dtype) directly inside `dir`, sorted.
fn mask_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "vsg") {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if bytes.get(4) == Some(&storage::DTYPE_MASK) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn postproc(input: &Path, out: &Path, config: Option<&Path>, check_idempotence: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let files = mask_files(input)?;
    if files.is_empty() {
        return Err(CliError::Usage(format!("no mask files in {}", input.display())));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut differing = 0usize;
    for f in &files {
        let cleaned = postprocess(&read_mask(f)?, &cfg.postproc)?;
        if check_idempotence {
            let again = postprocess(&cleaned, &cfg.postproc)?;
            differing += cleaned.data().iter().zip(again.data()).filter(|(a, b)| a != b).count();
        }
        write_mask(&out.join(f.file_name().expect("file name")), &cleaned)?;
    }
    println!("post-processed {} masks", files.len());
    if check_idempotence {
        println!("idempotence: {differing} voxels differ after a second pass");
    }
    Ok(())
}

/// Subject ids to evaluate: the manifest split when `gt` is a dataset,
/// otherwise every mask file in `gt`.
fn eval_ids(gt: &Path, split: Split) -> Result<Vec<String>> {
    let manifest = gt.join(MANIFEST_FILE);
    if manifest.exists() {
        return Ok(read_manifest(&manifest)?
            .into_iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect());
    }
    let mut ids: Vec<String> = mask_files(gt)?
        .iter()
        .filter_map(|p| {
            let stem = p.file_stem()?.to_str()?;
            let (id, _) = stem.rsplit_once('_')?;
            Some(id.to_string())
        })
        .collect();
    ids.dedup();
    Ok(ids)
}

fn find_mask(dir: &Path, id: &str, kinds: [&str; 2]) -> Result<PathBuf> {
    kinds
        .iter()
        .map(|k| subject_file(dir, id, k))
        .find(|p| p.exists())
        .ok_or_else(|| CliError::Usage(format!("no mask for {id} in {}", dir.display())))
}

pub fn eval(runs: &[PathBuf], gt: &Path, split: Split, out: &Path, label: &str, postprocessed: bool) -> Result<()> {
    let ids = eval_ids(gt, split)?;
    if ids.is_empty() {
        return Err(CliError::Usage(format!("no subjects to evaluate in {}", gt.display())));
    }
    let mut per_run: Vec<Vec<SubjectMetrics>> = Vec::with_capacity(runs.len());
    let mut rows = String::from("run,id,sens,prec,dice,detected,n_fp_clusters\n");
    for (r, dir) in runs.iter().enumerate() {
        let mut metrics = Vec::with_capacity(ids.len());
        for id in &ids {
            let g = read_mask(&find_mask(gt, id, [GT_KIND, MASK_KIND])?)?;
            let p = read_mask(&find_mask(dir, id, [MASK_KIND, GT_KIND])?)?;
            let m = evaluate_subject(&p, &g)?;
            rows.push_str(&format!(
                "{r},{id},{},{},{},{},{}\n",
                m.sens, m.prec, m.dice, m.detected, m.n_fp_clusters
            ));
            metrics.push(m);
        }
        per_run.push(metrics);
    }
    let report = aggregate(&per_run, label, postprocessed)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let table = render_table(std::slice::from_ref(&report));
    write_atomic(&out.join("report.csv"), reports_to_csv(std::slice::from_ref(&report))?.as_bytes())?;
    write_atomic(&out.join("report.txt"), table.as_bytes())?;
    write_atomic(&out.join("subjects.csv"), rows.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck(cfg: &GradcheckConfig, network: bool) -> Result<()> {
    let report = run_gradcheck(cfg, network)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Numerical("gradient check exceeded tolerance".into()))
    }
}

pub fn repro_trend(config: Option<&Path>, out: &Path, presets: Vec<LossPreset>, seeds: u64, force: bool) -> Result<()> {
    let run = load_config(config)?;
    if seeds == 0 || presets.is_empty() {
        return Err(CliError::Usage("need at least one seed and one preset".into()));
    }
    prepare_out_dir(out, force)?;
    write_config(&out.join("config.toml"), &run)?;
    let cfg = TrendConfig {
        run,
        presets,
        seeds: (0..seeds).collect(),
    };
    let report = run_trend(&cfg, |r| {
        println!(
            "{} seed {} epochs {} best {}",
            r.preset.key(),
            r.seed,
            r.epochs,
            r.best_epoch.map_or("-".into(), |e| e.to_string())
        );
    })?;
    let mut rows = String::from("loss,seed,epochs,postprocessed,id_index,sens,prec,dice,detected,n_fp_clusters\n");
    for r in &report.runs {
        for (post, list) in [(false, &r.pre), (true, &r.post)] {
            for (i, m) in list.iter().enumerate() {
                rows.push_str(&format!(
                    "{},{},{},{post},{i},{},{},{},{},{}\n",
                    r.preset.key(),
                    r.seed,
                    r.epochs,
                    m.sens,
                    m.prec,
                    m.dice,
                    m.detected,
                    m.n_fp_clusters
                ));
            }
        }
    }
    let (pre, post): (Vec<_>, Vec<_>) = report.reports.iter().cloned().partition(|r| !r.postprocessed);
    let text = format!(
        "before post-processing\n{}\nafter post-processing\n{}",
        render_table(&pre),
        render_table(&post)
    );
    write_atomic(&out.join("report.csv"), reports_to_csv(&report.reports)?.as_bytes())?;
    write_atomic(&out.join("report.txt"), text.as_bytes())?;
    write_atomic(&out.join("subjects.csv"), rows.as_bytes())?;
    print!("{text}");
    Ok(())
}
