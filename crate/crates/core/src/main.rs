use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use micfer::codec::{decode_frame, encode_gop, read_gop, read_raw, write_gop, write_raw, CodecConfig};
use micfer::eval::{evaluate, measure_mi, probe_identity, MiMeasureConfig, ProbeConfig};
use micfer::mine::{estimate_mi_converged, gaussian_mi, gaussian_pairs, MineConfig};
use micfer::model::{
    fit, identity_pretrain, load_checkpoint, load_identity, prepare_all, save_checkpoint, save_identity,
    write_metrics_csv, ModelBundle, PretrainConfig, Prepared, TrainConfig,
};
use micfer::synth::{generate_dataset, load_split, DatasetConfig, Profile, Split};

#[derive(Parser)]
#[command(name = "micfer", version, about = "Identity-disentangled expression recognition on compressed video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Encode an RRAW sequence into an RGOP container.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        mb: usize,
        #[arg(long, default_value_t = 4)]
        search: usize,
    },
    /// Decode frame `t` of an RGOP container into a one-frame RRAW file.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Render a synthetic dataset with train/test manifests.
    GenData {
        #[arg(long, default_value_t = 20)]
        identities: usize,
        #[arg(long, default_value_t = 7)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        per_cell: usize,
        #[arg(long, default_value = "ramp")]
        profile: Profile,
        #[arg(long, default_value_t = 16)]
        length: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain and freeze the identity encoder on the training split.
    PretrainId {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the expression model; writes the best checkpoint and a metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint path with a `.metrics.csv` suffix.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Expression accuracy, identity probe and MI on one split, as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 2000)]
        mi_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include wall-clock fps in the report (makes it run-dependent).
        #[arg(long)]
        timing: bool,
    },
    /// Linear identity probe on frozen z_E.
    ProbeId {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON result here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// MINE on correlated Gaussians; per-step CSV.
    MiBench {
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 512)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn load_data(dir: &Path, split: SplitArg, with_motion: bool) -> Result<Vec<Prepared>> {
    let splits: &[Split] = match split {
        SplitArg::Train => &[Split::Train],
        SplitArg::Test => &[Split::Test],
        SplitArg::All => &[Split::Train, Split::Test],
    };
    let mut out = Vec::new();
    for &s in splits {
        let seqs = load_split(dir, s).with_context(|| format!("loading {s:?} split from {}", dir.display()))?;
        out.extend(prepare_all(&seqs, with_motion)?);
    }
    if out.is_empty() {
        bail!("no sequences in {}", dir.display());
    }
    Ok(out)
}

fn load_model(path: &Path) -> Result<ModelBundle> {
    load_checkpoint(&mut open(path)?).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode {
            input,
            output,
            mb,
            search,
        } => {
            let frames = read_raw(&mut open(&input)?).with_context(|| format!("parsing {}", input.display()))?;
            let config = CodecConfig {
                macroblock: mb,
                search_range: search,
            };
            let gop = encode_gop(&frames, config)?;
            let mut sink = create(&output)?;
            write_gop(&gop, &mut sink)?;
            sink.flush()?;
        }
        Command::Decode { input, frame, output } => {
            let gop = read_gop(&mut open(&input)?).with_context(|| format!("parsing {}", input.display()))?;
            let f = decode_frame(&gop, frame)?;
            let mut sink = create(&output)?;
            write_raw(&[f], &mut sink)?;
            sink.flush()?;
        }
        Command::GenData {
            identities,
            classes,
            per_cell,
            profile,
            length,
            out,
            seed,
        } => {
            let config = DatasetConfig {
                n_identities: identities,
                n_classes: classes,
                per_cell,
                profile,
                length,
                seed,
                ..DatasetConfig::default()
            };
            let m = generate_dataset(&config, &out)?;
            eprintln!("{} train / {} test sequences in {}", m.train.len(), m.test.len(), out.display());
        }
        Command::PretrainId { data, out, epochs, seed } => {
            let train = load_data(&data, SplitArg::Train, false)?;
            let config = PretrainConfig {
                epochs,
                seed,
                ..PretrainConfig::default()
            };
            let (encoder, report) = identity_pretrain(&train, &config)?;
            let mut sink = create(&out)?;
            save_identity(&encoder, &mut sink)?;
            sink.flush()?;
            eprintln!(
                "identity encoder: {:.3} held-out accuracy over {} identities",
                report.heldout_accuracy, report.n_identities
            );
        }
        Command::Train {
            config,
            data,
            id_ckpt,
            out,
            metrics,
        } => {
            let text = fs::read_to_string(&config).with_context(|| format!("cannot read {}", config.display()))?;
            let cfg = TrainConfig::parse(&text).with_context(|| format!("in {}", config.display()))?;
            let ident = load_identity(&mut open(&id_ckpt)?).with_context(|| format!("reading {}", id_ckpt.display()))?;
            let train = load_data(&data, SplitArg::Train, cfg.input_mode.with_motion())?;
            let n_classes = train.iter().map(|p| p.label).max().unwrap_or(0) + 1;
            let outcome = fit(&cfg, &train, ident, n_classes, |m| {
                eprintln!(
                    "epoch {:3}  ce {:.4}  mi {:.4}  rec {:.4}  train {:.3}  val {:.3}",
                    m.epoch, m.loss_ce, m.mi_hat, m.loss_recon, m.train_acc, m.val_acc
                )
            })?;
            let mut sink = create(&out)?;
            save_checkpoint(&outcome.bundle, &mut sink)?;
            sink.flush()?;
            let metrics = metrics.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".metrics.csv");
                p.into()
            });
            write_metrics_csv(&metrics, &outcome.metrics)?;
            eprintln!("best epoch {}; wrote {} and {}", outcome.best_epoch, out.display(), metrics.display());
        }
        Command::Eval {
            model,
            data,
            split,
            report,
            mi_steps,
            seed,
            timing,
        } => {
            let bundle = load_model(&model)?;
            let rows = load_data(&data, split, bundle.dims.with_motion)?;
            let name = match split {
                SplitArg::Train => "train",
                SplitArg::Test => "test",
                SplitArg::All => "all",
            };
            let mut r = evaluate(&bundle, &rows, name)?;
            let probe = probe_identity(
                &bundle,
                &rows,
                &ProbeConfig {
                    seed,
                    ..ProbeConfig::default()
                },
            )?;
            let mi = measure_mi(
                &bundle,
                &rows,
                &MiMeasureConfig {
                    steps: mi_steps,
                    seed,
                    ..MiMeasureConfig::default()
                },
            )?;
            r.identity_probe_accuracy = Some(probe.accuracy);
            r.chance = Some(probe.chance);
            r.mi_ze_zi = Some(mi.reported);
            r.mi_saturated = Some(mi.saturated);
            eprintln!("accuracy {:.4}  fps {:.1}", r.accuracy, r.fps.unwrap_or(0.0));
            if !timing {
                r.fps = None;
            }
            write_json(&r, Some(&report))?;
        }
        Command::ProbeId {
            model,
            data,
            split,
            epochs,
            seed,
            report,
        } => {
            let bundle = load_model(&model)?;
            let rows = load_data(&data, split, bundle.dims.with_motion)?;
            let probe = probe_identity(
                &bundle,
                &rows,
                &ProbeConfig {
                    epochs,
                    seed,
                    ..ProbeConfig::default()
                },
            )?;
            write_json(&probe, report.as_deref())?;
        }
        Command::MiBench {
            rho,
            dim,
            steps,
            batch,
            seed,
            out,
        } => {
            if !(rho > -1.0 && rho < 1.0) {
                bail!("--rho must lie in (-1, 1), got {rho}");
            }
            if dim == 0 || batch < 2 {
                bail!("--dim must be positive and --batch at least 2");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let config = MineConfig {
                steps,
                ..MineConfig::default()
            };
            let res = estimate_mi_converged(|r| gaussian_pairs(r, batch, dim, rho), dim, dim, &config, &mut rng)?;
            let sink: Box<dyn Write> = match &out {
                Some(p) => Box::new(create(p)?),
                None => Box::new(std::io::stdout().lock()),
            };
            let mut w = csv::Writer::from_writer(sink);
            w.write_record(["step", "estimate", "joint_term", "marginal_log_term"])?;
            for (i, e) in res.trace.iter().enumerate() {
                w.write_record([
                    i.to_string(),
                    e.value.to_string(),
                    e.joint_term.to_string(),
                    e.marginal_log_term.to_string(),
                ])?;
            }
            w.flush()?;
            eprintln!("final estimate {:.4} nats (closed form {:.4})", res.raw, gaussian_mi(rho, dim));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
