use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use btn::bounds::{certify as certify_image, NormKind, PerturbationSpec};
use btn::datagen::{generate_split, load_dataset, save_dataset, Dataset, Split, MANIFEST_FILE};
use btn::metrics::{evaluate, EvalReport, ImageEval};
use btn::model::MultiColumnModel;
use btn::oracle::sample_attack;
use btn::trainer::{load_checkpoint, save_checkpoint, write_epoch_csv, Checkpoint, Trainer};
use btn::IntervalTensor;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const REPORT_SCHEMA: u32 = 1;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// `dir` itself when it holds a manifest, otherwise its `split` subdirectory.
fn load_split(dir: &Path, split: &str) -> CliResult<Dataset> {
    if dir.join(MANIFEST_FILE).exists() {
        Ok(load_dataset(dir)?)
    } else {
        Ok(load_dataset(dir.join(split))?)
    }
}

fn optional_config(path: Option<&Path>) -> CliResult<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

struct LoadedCheckpoint {
    ck: Checkpoint,
    model: MultiColumnModel<f64>,
    sha256: String,
}

fn load_model(path: &Path) -> CliResult<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let ck = load_checkpoint(path)?;
    let model = Trainer::from_checkpoint(ck.clone())?.model().clone();
    Ok(LoadedCheckpoint {
        ck,
        model,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// The checkpoint's model and training sections with `eval` taken from the
/// optional config.
fn resolved_for_checkpoint(ck: &Checkpoint, cfg: RunConfig) -> RunConfig {
    RunConfig {
        model: ck.model.clone(),
        train: ck.train.clone(),
        ..cfg
    }
}

pub fn generate_data(config: &Path, out: &Path) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    create_dir(out)?;
    let sizes = [cfg.data.n_train, cfg.data.n_val, cfg.data.n_test];
    for (split, n) in Split::ALL.into_iter().zip(sizes) {
        let data = generate_split(&cfg.data.scene, n, split)?;
        save_dataset(out.join(split.name()), &data)?;
        let counts: Vec<usize> = data.samples.iter().map(|s| s.true_count).collect();
        let mean = counts.iter().sum::<usize>() as f64 / n as f64;
        println!(
            "{}: {} samples, heads {}..={}, mean {:.2}",
            split.name(),
            n,
            counts.iter().min().expect("n > 0"),
            counts.iter().max().expect("n > 0"),
            mean
        );
    }
    write_json(&out.join(&cfg.paths.resolved_config), &cfg)
}

/// Checkpoint holding the best parameters in place of the current ones.
fn best_checkpoint(trainer: &Trainer) -> Option<Checkpoint> {
    let best = trainer.best()?;
    let mut ck = trainer.checkpoint();
    let mut off = 0;
    for p in &mut ck.params {
        let n = p.len();
        p.data_mut().copy_from_slice(&best.params[off..off + n]);
        off += n;
    }
    Some(ck)
}

fn write_outputs(trainer: &Trainer, cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let csv = out.join(&cfg.paths.epoch_csv);
    let f = fs::File::create(&csv).map_err(|e| io_err(&csv, e))?;
    write_epoch_csv(std::io::BufWriter::new(f), trainer.log()).map_err(|e| io_err(&csv, e))?;
    save_checkpoint(out.join(&cfg.paths.final_checkpoint), &trainer.checkpoint())?;
    if let Some(ck) = best_checkpoint(trainer) {
        save_checkpoint(out.join(&cfg.paths.best_checkpoint), &ck)?;
    }
    Ok(())
}

pub fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>, until: Option<usize>) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model != cfg.model || ck.train != cfg.train {
                return Err(CliError::Config(format!(
                    "model/train sections of {} differ from checkpoint {}",
                    config.display(),
                    p.display()
                )));
            }
            Trainer::from_checkpoint(ck)?
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone()).map_err(CliError::config)?,
    };
    let train = load_dataset(data.join(Split::Train.name()))?;
    let val = load_dataset(data.join(Split::Val.name()))?;
    let input = trainer.model_config().input_shape;
    if let Some(s) = train.samples.iter().chain(&val.samples).find(|s| s.image.shape() != input) {
        return Err(CliError::Config(format!(
            "model.input_shape {input:?} does not match image shape {:?} in {}",
            s.image.shape(),
            data.display()
        )));
    }
    create_dir(out)?;
    write_json(&out.join(&cfg.paths.resolved_config), &cfg)?;
    let stop = until.unwrap_or(cfg.train.total_epochs).min(cfg.train.total_epochs);
    while trainer.epoch() < stop {
        let row = match trainer.run_epoch(&train.samples, &val.samples) {
            Ok(row) => row,
            Err(e) => {
                write_outputs(&trainer, &cfg, out)?;
                return Err(e.into());
            }
        };
        println!(
            "epoch {:>3}  kappa {:.3}  eps {:.5}  loss {:.5}  val_mae {:.3}  val_ct_mae {:.3}",
            row.epoch, row.kappa, row.epsilon, row.total, row.val_mae, row.val_ct_mae
        );
        write_outputs(&trainer, &cfg, out)?;
    }
    if let Some(b) = trainer.best() {
        println!("best epoch {} (score {:.4})", b.epoch, b.score);
    }
    Ok(())
}

#[derive(Serialize)]
struct CertifyEntry {
    epsilon: f64,
    summary: EvalReport,
    /// Global `epsilon * M` deviation bound (`L∞` only).
    theorem1_bound: Option<f64>,
    images: Vec<ImageEval>,
}

#[derive(Serialize)]
struct CertifyReport {
    schema: u32,
    command: &'static str,
    checkpoint_sha256: String,
    config: RunConfig,
    norm: NormKind,
    results: Vec<CertifyEntry>,
}

pub fn certify(
    ckpt: &Path,
    data: &Path,
    eps: Option<Vec<f64>>,
    norm: NormKind,
    out: &Path,
    config: Option<&Path>,
) -> CliResult<()> {
    let loaded = load_model(ckpt)?;
    let mut cfg = resolved_for_checkpoint(&loaded.ck, optional_config(config)?);
    if let Some(e) = eps {
        cfg.eval.epsilons = e;
    }
    cfg.eval.norms = vec![norm];
    cfg.validate()?;
    let test = load_split(data, &cfg.eval.split)?;
    let mut results = Vec::new();
    for &e in &cfg.eval.epsilons {
        let spec = PerturbationSpec::new(norm, e);
        let (summary, images) = evaluate(&loaded.model, &test.samples, &spec)?;
        println!(
            "{} eps {:.6}: clean_mae {:.4}  ct_mae {:.4}  cp_mae {:.4}",
            norm.as_str(),
            e,
            summary.clean_mae,
            summary.ct_mae,
            summary.cp_mae
        );
        results.push(CertifyEntry {
            epsilon: e,
            theorem1_bound: images.first().and_then(|i| i.theorem1_bound),
            summary,
            images,
        });
    }
    write_json(
        out,
        &CertifyReport {
            schema: REPORT_SCHEMA,
            command: "certify",
            checkpoint_sha256: loaded.sha256,
            config: cfg,
            norm,
            results,
        },
    )
}

pub struct AttackArgs<'a> {
    pub ckpt: &'a Path,
    pub data: &'a Path,
    pub eps: f64,
    pub norm: NormKind,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub out: &'a Path,
    pub config: Option<&'a Path>,
    pub shrink_upper: Option<f64>,
}

#[derive(Serialize)]
struct AttackImage {
    index: usize,
    n_samples: usize,
    violations: usize,
    count_lower: f64,
    count_upper: f64,
    empirical_count_min: f64,
    empirical_count_max: f64,
    worst_count_deviation: f64,
}

#[derive(Serialize)]
struct AttackReport {
    schema: u32,
    command: &'static str,
    checkpoint_sha256: String,
    config: RunConfig,
    norm: NormKind,
    epsilon: f64,
    shrink_upper: Option<f64>,
    total_violations: usize,
    images: Vec<AttackImage>,
}

pub fn attack(a: AttackArgs<'_>) -> CliResult<()> {
    let loaded = load_model(a.ckpt)?;
    let mut cfg = resolved_for_checkpoint(&loaded.ck, optional_config(a.config)?);
    cfg.eval.epsilons = vec![a.eps];
    cfg.eval.norms = vec![a.norm];
    if let Some(n) = a.samples {
        cfg.eval.attack_samples = n;
    }
    if let Some(s) = a.seed {
        cfg.eval.attack_seed = s;
    }
    cfg.validate()?;
    if let Some(s) = a.shrink_upper {
        if !s.is_finite() || s < 0.0 {
            return Err(CliError::Config("--shrink-upper must be finite and non-negative".into()));
        }
    }
    let test = load_split(a.data, &cfg.eval.split)?;
    let spec = PerturbationSpec::new(a.norm, a.eps);
    let mut images = Vec::with_capacity(test.len());
    for (index, s) in test.samples.iter().enumerate() {
        let mut cert = certify_image(&loaded.model, &s.image, &spec)?;
        if let Some(shrink) = a.shrink_upper {
            let (lower, upper) = cert.output_interval.into_parts();
            let upper = upper.map(|u| u - shrink).maximum(&lower)?;
            cert.output_interval = IntervalTensor::new(lower, upper)?;
            cert.count_upper -= shrink;
        }
        let seed = cfg.eval.attack_seed.wrapping_add(index as u64);
        let r = sample_attack(
            &loaded.model,
            &s.image,
            &spec,
            cfg.eval.attack_samples,
            seed,
            &cert,
            cfg.eval.attack_tolerance,
        )?;
        images.push(AttackImage {
            index,
            n_samples: r.n_samples,
            violations: r.violations,
            count_lower: cert.count_lower,
            count_upper: cert.count_upper,
            empirical_count_min: r.empirical_count_min,
            empirical_count_max: r.empirical_count_max,
            worst_count_deviation: r.worst_count_deviation,
        });
    }
    let total: usize = images.iter().map(|i| i.violations).sum();
    let worst = images.iter().map(|i| i.worst_count_deviation).fold(0.0, f64::max);
    println!(
        "{} eps {:.6}: {} images, {} samples each, worst count deviation {:.6}, violations {}",
        a.norm.as_str(),
        a.eps,
        images.len(),
        cfg.eval.attack_samples,
        worst,
        total
    );
    write_json(
        a.out,
        &AttackReport {
            schema: REPORT_SCHEMA,
            command: "attack",
            checkpoint_sha256: loaded.sha256,
            shrink_upper: a.shrink_upper,
            config: cfg,
            norm: a.norm,
            epsilon: a.eps,
            total_violations: total,
            images,
        },
    )?;
    if total > 0 {
        return Err(CliError::Violations(total));
    }
    Ok(())
}

