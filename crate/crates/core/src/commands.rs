//! Implementations behind the CLI subcommands.  Everything here is a plain
//! function over paths and `RunConfig`, so integration tests and the
//! acceptance suite can drive the full pipeline without spawning processes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{ConfigError, RunConfig};
use crate::diffusion::{
    generate, hybrid_loss_var, q_sample, sample_noise, DitModel, GenerateOptions, SizeSampler,
};
use crate::encoding::{encode_molecule, read_tensor_records, write_tensor_records, TensorRecord};
use crate::metrics::{self, MetricReport, CLASS_ACYCLIC, CLASS_CYCLIC};
use crate::molgraph::{
    detect_rings, parse_structure, sdf_record, strip_hydrogens, BondMode, Molecule, StructureFormat,
};
use crate::params::{Adam, Ema};
use crate::tape::Tape;

/// Failure classes aligned with the process exit codes: usage errors (1),
/// data errors (2), numerical failures (3).
#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Usage(_) => 1,
            CommandError::Data(_) => 2,
            CommandError::Numerical(_) => 3,
        }
    }
}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> CommandError {
        CommandError::Usage(e.to_string())
    }
}

fn data_err(e: impl std::fmt::Display) -> CommandError {
    CommandError::Data(e.to_string())
}

pub fn tensor_cache_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.cache_dir).join("tensors.bin")
}

pub fn sizes_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.cache_dir).join("sizes.txt")
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.cache_dir).join("model.ckpt")
}

fn parse_any(path: &Path) -> Result<Vec<Molecule>, CommandError> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("sdf") => StructureFormat::Sdf,
        Some("xyz") => StructureFormat::Xyz,
        other => {
            return Err(CommandError::Usage(format!(
                "cannot infer structure format from extension {other:?} ({})",
                path.display()
            )))
        }
    };
    parse_structure(path, format).map_err(data_err)
}

fn write_size_file(path: &Path, sizes: &SizeSampler) -> Result<(), CommandError> {
    let mut text = String::new();
    for (label, size, count) in sizes.entries() {
        let label = label.map_or("-".to_string(), |l| l.to_string());
        text.push_str(&format!("{label} {size} {count}\n"));
    }
    std::fs::write(path, text).map_err(data_err)
}

fn read_size_file(path: &Path) -> Result<SizeSampler, CommandError> {
    let text = std::fs::read_to_string(path).map_err(data_err)?;
    let mut rows = Vec::new();
    for line in text.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(CommandError::Data(format!("bad size row '{line}'")));
        }
        let label = if f[0] == "-" {
            None
        } else {
            Some(f[0].parse().map_err(data_err)?)
        };
        rows.push((
            label,
            f[1].parse().map_err(data_err)?,
            f[2].parse().map_err(data_err)?,
        ));
    }
    SizeSampler::from_entries(&rows).map_err(data_err)
}

#[derive(Debug)]
pub struct PrepareOutcome {
    pub encoded: usize,
    pub skipped: usize,
    pub cache: PathBuf,
}

/// Parses the raw structures, strips hydrogens, assigns ring-class labels,
/// and writes the tensor cache plus the heavy-atom size histogram.
/// Unusable molecules (over capacity, empty, or with out-of-vocabulary
/// elements) are skipped with a logged count; zero usable molecules is an
/// error.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareOutcome, CommandError> {
    cfg.validate()?;
    let vocab = cfg.vocab_elements()?;
    let mols = parse_any(Path::new(&cfg.data_path))?;

    let mut records = Vec::new();
    let mut labeled_sizes = Vec::new();
    let mut skipped = 0usize;
    for (k, m) in mols.iter().enumerate() {
        let heavy = strip_hydrogens(m);
        let n = heavy.atoms.len();
        if n == 0 || n > cfg.n_max {
            log::warn!(
                "skipping molecule {k}: {n} heavy atoms vs capacity {}",
                cfg.n_max
            );
            skipped += 1;
            continue;
        }
        let label = if detect_rings(&heavy) {
            CLASS_CYCLIC
        } else {
            CLASS_ACYCLIC
        };
        match encode_molecule(&heavy, cfg.n_max, &vocab) {
            Ok(tensor) => {
                records.push(TensorRecord {
                    tensor,
                    class_label: Some(label),
                });
                labeled_sizes.push((Some(label), n));
            }
            Err(e) => {
                log::warn!("skipping molecule {k}: {e}");
                skipped += 1;
            }
        }
    }
    if records.is_empty() {
        return Err(CommandError::Data(format!(
            "no usable molecules in {} ({skipped} skipped)",
            cfg.data_path
        )));
    }
    std::fs::create_dir_all(&cfg.cache_dir).map_err(data_err)?;
    let cache = tensor_cache_path(cfg);
    write_tensor_records(&cache, &records).map_err(data_err)?;
    let sizes = SizeSampler::from_labeled_counts(&labeled_sizes).map_err(data_err)?;
    write_size_file(&sizes_path(cfg), &sizes)?;
    log::info!("prepared {} tensors ({skipped} skipped)", records.len());
    Ok(PrepareOutcome {
        encoded: records.len(),
        skipped,
        cache,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: Vec<TrainLogRow>,
}

/// Minibatch training of the denoiser on the prepared cache with a
/// fixed-seed RNG.  Loss components are logged every `log_every` steps;
/// checkpoints are written every `checkpoint_every` steps and at the end.
/// A non-finite loss aborts with a diagnostic dump of the offending batch.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CommandError> {
    cfg.validate()?;
    let records = read_tensor_records(&tensor_cache_path(cfg)).map_err(data_err)?;
    if records.is_empty() {
        return Err(CommandError::Data("tensor cache is empty".into()));
    }
    let sizes = read_size_file(&sizes_path(cfg))?;
    let schedule = cfg.schedule()?;
    let model = cfg.model_config();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.init_params(&mut rng);
    params.snap_to_f32();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut ema = cfg.ema.then(|| Ema::new(&params, cfg.ema_decay));
    let mut log_rows = Vec::new();

    let save_now = |params: &crate::params::ParamStore,
                    ema: &Option<Ema>,
                    path: &Path|
     -> Result<(), CommandError> {
        let snapshot = match ema {
            Some(e) => e.snapshot(),
            None => params.clone(),
        };
        checkpoint::save(
            path,
            &Checkpoint {
                config: cfg.clone(),
                params: snapshot,
                sizes: sizes.clone(),
            },
        )
        .map_err(data_err)
    };

    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..records.len()))
            .collect();
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..cfg.t_max))
            .collect();
        let xs0: Vec<_> = idx.iter().map(|&i| records[i].tensor.clone()).collect();
        let labels: Vec<Option<u32>> = idx
            .iter()
            .map(|&i| {
                if cfg.conditional {
                    records[i].class_label
                } else {
                    None
                }
            })
            .collect();
        let noises: Vec<Array3<f64>> = xs0.iter().map(|x| sample_noise(x, &mut rng)).collect();
        let xts: Vec<_> = xs0
            .iter()
            .zip(&ts)
            .zip(&noises)
            .map(|((x, &t), eps)| q_sample(x, t, eps, &schedule).map_err(data_err))
            .collect::<Result<_, _>>()?;

        let tape = Tape::new();
        let bound = params.bind(&tape, true);
        let out = crate::dit::dit_forward_var(&tape, &model, &bound, &xts, &ts, &labels)
            .map_err(data_err)?;
        let loss = hybrid_loss_var(&tape, &xs0, &ts, &noises, &out, &schedule).map_err(data_err)?;
        let total = loss.total.value()[[]];
        if !total.is_finite() {
            let dump = Path::new(&cfg.cache_dir).join("diagnostic.txt");
            let body = format!(
                "non-finite loss at step {step}\nindices {idx:?}\nsteps {ts:?}\nmse {}\nkl {}\n",
                loss.mse, loss.kl
            );
            let _ = std::fs::write(&dump, body);
            return Err(CommandError::Numerical(format!(
                "non-finite loss at step {step} (diagnostic in {})",
                dump.display()
            )));
        }

        let grads = tape.backward(&loss.total);
        let grad_map: BTreeMap<String, ArrayD<f64>> = bound
            .iter()
            .map(|(name, var)| (name.clone(), grads.wrt(var)))
            .collect();
        opt.step(&mut params, &grad_map);
        if let Some(e) = &mut ema {
            e.update(&params);
        }

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            log::info!(
                "step {step}: loss {total:.6} (mse {:.6}, kl {:.6})",
                loss.mse,
                loss.kl
            );
            log_rows.push(TrainLogRow {
                step,
                total,
                mse: loss.mse,
                kl: loss.kl,
            });
        }
        if (step + 1) % cfg.checkpoint_every == 0 && step + 1 != cfg.steps {
            let path = Path::new(&cfg.cache_dir).join(format!("model-{:06}.ckpt", step + 1));
            save_now(&params, &ema, &path)?;
        }
    }

    let final_path = checkpoint_path(cfg);
    save_now(&params, &ema, &final_path)?;
    Ok(TrainOutcome {
        checkpoint: final_path,
        log: log_rows,
    })
}

#[derive(Debug)]
pub struct SampleOutcome {
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub molecules: Vec<Molecule>,
}

/// Draws `n` molecules from a trained checkpoint and writes one SDF per
/// sample plus a manifest.  A class label requires a checkpoint trained
/// conditionally.
pub fn cmd_sample(
    checkpoint_file: &Path,
    out_dir: &Path,
    n: usize,
    label: Option<u32>,
    bond_mode: BondMode,
    seed: u64,
) -> Result<SampleOutcome, CommandError> {
    let ckpt = checkpoint::load(checkpoint_file).map_err(data_err)?;
    if let Some(l) = label {
        if !ckpt.config.conditional {
            return Err(CommandError::Usage(
                "checkpoint was trained unconditionally; drop the label".into(),
            ));
        }
        if l as usize >= ckpt.config.classes {
            return Err(CommandError::Usage(format!(
                "label {l} out of range for {} classes",
                ckpt.config.classes
            )));
        }
    }
    let model_cfg = ckpt.config.model_config();
    let model = DitModel {
        cfg: &model_cfg,
        params: &ckpt.params,
    };
    let schedule = ckpt.config.schedule()?;
    let opts = GenerateOptions {
        grid: ckpt.config.n_max,
        vocab: ckpt.config.vocab_elements()?,
        bond_mode,
        batch: ckpt.config.batch_size,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mols =
        generate(n, label, &ckpt.sizes, &model, &schedule, &opts, &mut rng).map_err(data_err)?;

    std::fs::create_dir_all(out_dir).map_err(data_err)?;
    let mut files = Vec::with_capacity(mols.len());
    let mut manifest = format!(
        "checkpoint {}\nseed {seed}\nlabel {}\ncount {}\n",
        checkpoint_file.display(),
        label.map_or("-".to_string(), |l| l.to_string()),
        mols.len()
    );
    for (i, m) in mols.iter().enumerate() {
        let name = format!("sample_{i:03}.sdf");
        let path = out_dir.join(&name);
        std::fs::write(&path, sdf_record(m, &format!("sample{i}"))).map_err(data_err)?;
        manifest.push_str(&name);
        manifest.push('\n');
        files.push(path);
    }
    let manifest_path = out_dir.join("manifest.txt");
    std::fs::write(&manifest_path, manifest).map_err(data_err)?;
    Ok(SampleOutcome {
        files,
        manifest: manifest_path,
        molecules: mols,
    })
}

/// Scores molecules from the given structure files.  Unreadable files are
/// skipped with a warning; zero molecules overall is an error.  When
/// `assume_label` is set, every molecule is scored against that ring class
/// (used for conditional sample directories, since SDF carries no label).
pub fn cmd_evaluate(
    paths: &[PathBuf],
    assume_label: Option<u32>,
    report_path: Option<&Path>,
) -> Result<MetricReport, CommandError> {
    let mut mols = Vec::new();
    for p in paths {
        match parse_any(p) {
            Ok(ms) => mols.extend(ms),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if let Some(l) = assume_label {
        for m in &mut mols {
            m.class_label = Some(l);
        }
    }
    if mols.is_empty() {
        return Err(CommandError::Data("no molecules to evaluate".into()));
    }
    let report = metrics::evaluate(&mols);
    if let Some(path) = report_path {
        std::fs::write(path, report.key_value_text()).map_err(data_err)?;
        std::fs::write(path.with_extension("csv"), report.csv()).map_err(data_err)?;
    }
    Ok(report)
}
