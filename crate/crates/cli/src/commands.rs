use std::path::{Path, PathBuf};

use hstyle_core::image_io::load_rgb;
use hstyle_core::{
    evaluate_testset, fast_finetune, generate, generate_mixed, load_checkpoint, toy, train, DatasetManifest, Error,
    FinetuneOptions, FinetuneResidual, Preset, Result, SampleOptions, TestSet, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::{Cli, Command, SamplingFlags};

/// Contents of the `--config` file. Every table is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub sample: SampleOptions,
    pub finetune: FinetuneOptions,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// A command with every option fixed; printing it is enough to rerun it.
#[derive(Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Resolved {
    Train {
        data: PathBuf,
        out: PathBuf,
        train: TrainConfig,
    },
    Finetune {
        ckpt: PathBuf,
        style: Vec<PathBuf>,
        out: PathBuf,
        finetune: FinetuneOptions,
    },
    Sample {
        ckpt: PathBuf,
        prompt: String,
        style: Vec<PathBuf>,
        residual: Option<PathBuf>,
        out: PathBuf,
        sample: SampleOptions,
    },
    Mix {
        ckpt: PathBuf,
        prompt: String,
        low: PathBuf,
        mid: PathBuf,
        high: PathBuf,
        residual: Option<PathBuf>,
        force_residual: bool,
        out: PathBuf,
        sample: SampleOptions,
    },
    Eval {
        ckpt: PathBuf,
        testset: PathBuf,
        embedder_cmd: Option<String>,
        out: PathBuf,
        sample: SampleOptions,
    },
    MakeCorpus {
        out: PathBuf,
        count: usize,
        size: usize,
        seed: u64,
    },
}

impl Resolved {
    pub fn describe(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|e| format!("<unprintable: {e}>"))
    }
}

fn sampling(mut base: SampleOptions, f: &SamplingFlags) -> Result<SampleOptions> {
    if let Some(v) = f.steps {
        base.steps = v;
    }
    if let Some(v) = f.cfg {
        base.cfg_scale = v;
    }
    if let Some(v) = f.seed {
        base.seed = v;
    }
    if let Some(v) = f.alpha_scale {
        base.alpha_scale = v;
    }
    if let Some(v) = f.eta {
        base.eta = v;
    }
    base.validate()?;
    Ok(base)
}

/// Applies flag > file > default precedence and validates the result.
pub fn resolve(cli: &Cli) -> Result<Resolved> {
    let file = FileConfig::load(cli.config.as_deref())?;
    Ok(match &cli.command {
        Command::Train(a) => {
            let mut t = file.train;
            if let Some(p) = &a.preset {
                t.preset = Preset::from_name(p)?;
            }
            if let Some(v) = a.seed {
                t.seed = v;
            }
            if let Some(v) = a.max_steps {
                t.max_steps = v;
            }
            if let Some(v) = a.pretrain_steps {
                t.pretrain_steps = v;
            }
            if let Some(v) = a.batch_size {
                t.batch_size = v;
            }
            if let Some(v) = &a.init_checkpoint {
                t.init_checkpoint = Some(v.clone());
            }
            t.validate()?;
            Resolved::Train {
                data: a.data.clone(),
                out: a.out.clone(),
                train: t,
            }
        }
        Command::Finetune(a) => {
            let mut f = file.finetune;
            if let Some(v) = a.steps {
                f.steps = v;
            }
            if let Some(v) = a.lr {
                f.lr = v;
            }
            if let Some(v) = a.batch_size {
                f.batch_size = v;
            }
            if let Some(v) = &a.caption {
                f.caption = v.clone();
            }
            if let Some(v) = a.seed {
                f.seed = v;
            }
            if f.steps == 0 || f.batch_size == 0 || !(f.lr > 0.0) {
                return Err(Error::Argument("steps, batch size and lr must be positive".into()));
            }
            Resolved::Finetune {
                ckpt: a.ckpt.clone(),
                style: a.style.clone(),
                out: a.out.clone(),
                finetune: f,
            }
        }
        Command::Sample(a) => Resolved::Sample {
            ckpt: a.ckpt.clone(),
            prompt: a.prompt.clone(),
            style: a.style.clone(),
            residual: a.sampling.residual.clone(),
            out: a.out.clone(),
            sample: sampling(file.sample, &a.sampling)?,
        },
        Command::Mix(a) => Resolved::Mix {
            ckpt: a.ckpt.clone(),
            prompt: a.prompt.clone(),
            low: a.low.clone(),
            mid: a.mid.clone(),
            high: a.high.clone(),
            residual: a.sampling.residual.clone(),
            force_residual: a.force_residual,
            out: a.out.clone(),
            sample: sampling(file.sample, &a.sampling)?,
        },
        Command::Eval(a) => {
            if a.sampling.residual.is_some() {
                return Err(Error::Argument("eval runs zero-shot; --residual is not accepted".into()));
            }
            Resolved::Eval {
                ckpt: a.ckpt.clone(),
                testset: a.testset.clone(),
                embedder_cmd: a.embedder_cmd.clone(),
                out: a.out.clone(),
                sample: sampling(file.sample, &a.sampling)?,
            }
        }
        Command::MakeCorpus(a) => {
            if a.count == 0 || a.size < 8 {
                return Err(Error::Argument("count must be positive and size at least 8".into()));
            }
            Resolved::MakeCorpus {
                out: a.out.clone(),
                count: a.count,
                size: a.size,
                seed: a.seed,
            }
        }
    })
}

fn load_sidecar(path: Option<&PathBuf>) -> Result<Option<FinetuneResidual>> {
    path.map(FinetuneResidual::load).transpose()
}

pub fn execute(cmd: Resolved) -> Result<()> {
    match cmd {
        Resolved::Train { data, out, train: cfg } => {
            let manifest = DatasetManifest::load(&data)?;
            let outcome = train(&cfg, &manifest, &out, &mut |phase, step, loss| {
                if step == 1 || step % 50 == 0 {
                    log::info!("{phase} step {step} loss {loss:.5}");
                }
            })?;
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Resolved::Finetune {
            ckpt,
            style,
            out,
            finetune,
        } => {
            let (mut model, _) = load_checkpoint(&ckpt)?;
            let refs = style.iter().map(load_rgb).collect::<Result<Vec<_>>>()?;
            let residual = fast_finetune(&mut model, &refs, &finetune)?;
            residual.save(&out)?;
            println!(
                "sidecar: {} ({} steps, {} parameters)",
                out.display(),
                residual.meta.steps,
                residual.parameter_count()
            );
        }
        Resolved::Sample {
            ckpt,
            prompt,
            style,
            residual,
            out,
            sample,
        } => {
            let (mut model, _) = load_checkpoint(&ckpt)?;
            let refs = style.iter().map(load_rgb).collect::<Result<Vec<_>>>()?;
            let sidecar = load_sidecar(residual.as_ref())?;
            generate(&mut model, &prompt, &refs, sidecar.as_ref(), &sample)?.save(&out)?;
            println!("image: {}", out.display());
        }
        Resolved::Mix {
            ckpt,
            prompt,
            low,
            mid,
            high,
            residual,
            force_residual,
            out,
            sample,
        } => {
            let (mut model, _) = load_checkpoint(&ckpt)?;
            let [l, m, h] = [&low, &mid, &high].map(load_rgb);
            let sidecar = load_sidecar(residual.as_ref())?;
            let g = generate_mixed(&mut model, &prompt, [&l?, &m?, &h?], sidecar.as_ref(), force_residual, &sample)?;
            g.save(&out)?;
            println!("image: {} (sidecar applied: {})", out.display(), g.metadata["sidecar_applied"]);
        }
        Resolved::Eval {
            ckpt,
            testset,
            embedder_cmd,
            out,
            sample,
        } => {
            let (mut model, _) = load_checkpoint(&ckpt)?;
            let set = TestSet::load(&testset)?;
            let report = evaluate_testset(&mut model, &set, embedder_cmd.as_deref(), &sample, &out)?;
            let path = out.join("report.json");
            report.save(&path)?;
            println!(
                "report: {} (mean style {:.4} over {} pairs)",
                path.display(),
                report.aggregates.mean_style,
                report.aggregates.count
            );
        }
        Resolved::MakeCorpus { out, count, size, seed } => {
            let corpus = toy::write_toy_corpus(&out, count, size, seed)?;
            println!("manifest: {}", corpus.manifest.display());
        }
    }
    Ok(())
}
