use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use contrastnet_core::contrast::{
    compute_magnitude, ExtractConfig, Extraction, Extractor, FeatureDump, LossKind,
};
use contrastnet_core::explain::{
    contrastive_cam, contrastive_maps, gradcam, read_pnm, render, ContrastLoss,
};
use contrastnet_core::harness::{
    fit_head, init_threads, run_clean_parity, run_distortion_sweep, run_limited,
    run_loss_comparison, save_idx, BenchConfig, Dataset, ExperimentReport, LimitedMode,
    ReportFormat, ReportRow, Split,
};
use contrastnet_core::head::{ContrastiveHead, ContrastivePipeline};
use contrastnet_core::nn::{desk_cnn, train, Checkpoint, Network, Role};
use contrastnet_core::Tensor;

const IMAGES_FILE: &str = "images.idx";
const LABELS_FILE: &str = "labels.idx";

#[derive(Parser)]
#[command(
    name = "contrastnet",
    version,
    about = "Contrastive reasoning on a small CNN"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base network (and optionally a head) from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Base checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Also train a contrastive head on the training split and write it here.
        #[arg(long)]
        head_out: Option<PathBuf>,
    },
    /// Extract contrastive features for every sample of an IDX directory.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory holding images.idx and labels.idx.
        #[arg(long)]
        data: PathBuf,
        /// Loss kind (mse-m, ce, bce, l1, l1-m, smoothl1, smoothl1-m, nll,
        /// softmargin) or `fgsm`.
        #[arg(long, default_value = "mse-m")]
        loss: String,
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        /// Keep raw gradients instead of unit-normalizing.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render Grad-CAM and contrastive maps for one PGM/PPM image.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Contrast class index, `all`, or `self`.
        #[arg(long, default_value = "all")]
        q: String,
        /// Backpropagate the MSE-M loss instead of the exponential one.
        #[arg(long)]
        mse_m: bool,
        #[arg(long, default_value_t = 0.5)]
        blend: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare feed-forward and contrastive inference on an IDX directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV report to write.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run one of the robustness experiments.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: BenchMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic train/test splits of a config as IDX directories.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    Parity,
    Sweep,
    LimitedData,
    LimitedEpochs,
    Losses,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            out,
            head_out,
        } => cmd_train(&config, &out, head_out.as_deref()),
        Command::Extract {
            ckpt,
            data,
            loss,
            epsilon,
            max_iters,
            raw,
            out,
        } => {
            let extraction = if loss == "fgsm" {
                Extraction::Fgsm { epsilon, max_iters }
            } else {
                Extraction::Gradient(loss.parse::<LossKind>()?)
            };
            cmd_extract(
                &ckpt,
                &data,
                ExtractConfig {
                    extraction,
                    normalize: !raw,
                },
                &out,
            )
        }
        Command::Explain {
            ckpt,
            image,
            q,
            mse_m,
            blend,
            out,
        } => cmd_explain(&ckpt, &image, &q, mse_m, blend, &out),
        Command::Infer {
            ckpt,
            head,
            data,
            report,
        } => cmd_infer(&ckpt, &head, &data, &report),
        Command::Bench { config, mode, out } => cmd_bench(config.as_deref(), mode, &out),
        Command::Synth { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let (train_set, test_set) = cfg.datasets()?;
            for (name, ds) in [("train", &train_set), ("test", &test_set)] {
                let dir = out.join(name);
                fs::create_dir_all(&dir)?;
                save_idx(ds, dir.join(IMAGES_FILE), dir.join(LABELS_FILE))?;
            }
            println!(
                "wrote {} train and {} test samples under {}",
                train_set.len(),
                test_set.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<BenchConfig> {
    match path {
        Some(p) => BenchConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(BenchConfig::default()),
    }
}

fn load_base(path: &Path) -> Result<(Network<f32>, Option<f64>)> {
    let ck =
        Checkpoint::<f32>::load(path).with_context(|| format!("loading {}", path.display()))?;
    if ck.role != Role::Base {
        bail!("{} holds a head, not a base network", path.display());
    }
    Ok((ck.network, ck.magnitude))
}

fn load_data(dir: &Path, classes: usize) -> Result<Dataset<f32>> {
    Dataset::load_idx(
        dir.join(IMAGES_FILE),
        dir.join(LABELS_FILE),
        classes,
        Split::Test,
    )
    .with_context(|| format!("loading IDX data from {}", dir.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn cmd_train(config: &Path, out: &Path, head_out: Option<&Path>) -> Result<()> {
    let cfg = load_config(Some(config))?;
    let (train_set, test_set) = cfg.datasets()?;
    let mut base = desk_cnn::<f32>(train_set.sample_shape(), train_set.num_classes, cfg.seed)?;
    let outcome = train(&mut base, &train_set.images, &train_set.labels, &cfg.base)?;
    for s in &outcome.history {
        eprintln!(
            "epoch {:>3}  lr {:<7} loss {:.4}  train acc {:.2}%",
            s.epoch, s.lr, s.loss, s.accuracy
        );
    }
    let magnitude = compute_magnitude(&base, &train_set.images)?;
    create_parent(out)?;
    let ck = Checkpoint {
        network: base.clone(),
        epoch: cfg.base.epochs as u32,
        magnitude: Some(magnitude),
        role: Role::Base,
    };
    ck.save(out)?;
    if let Some(every) = cfg.base.checkpoint_every {
        for (epoch, net) in outcome.checkpoints {
            let snap = Checkpoint {
                network: net,
                epoch: epoch as u32,
                magnitude: None,
                role: Role::Base,
            };
            snap.save(out.with_extension(format!("e{epoch}.cnmf")))?;
        }
        eprintln!("wrote snapshots every {every} epochs");
    }
    let ff = contrastnet_core::nn::accuracy(&base, &test_set.images, &test_set.labels)?;
    println!(
        "base: {}  M = {magnitude:.4}  test accuracy {ff:.2}%",
        out.display()
    );

    if let Some(head_out) = head_out {
        let (m, head, _) = fit_head(
            &base,
            &train_set,
            cfg.extraction,
            &cfg.head,
            cfg.seed.wrapping_add(7),
        )?;
        debug_assert_eq!(m, magnitude);
        create_parent(head_out)?;
        head.checkpoint(cfg.head.epochs as u32).save(head_out)?;
        let pipeline = ContrastivePipeline::new(&base, Some(magnitude), &head)?;
        let preds = pipeline.predict_batch(&test_set.images)?;
        let hits = preds
            .iter()
            .zip(&test_set.labels)
            .filter(|(p, &l)| p.label == l)
            .count();
        println!(
            "head: {}  contrastive test accuracy {:.2}%",
            head_out.display(),
            100.0 * hits as f64 / test_set.len() as f64
        );
    }
    Ok(())
}

fn cmd_extract(ckpt: &Path, data: &Path, config: ExtractConfig, out: &Path) -> Result<()> {
    let (net, magnitude) = load_base(ckpt)?;
    let ds = load_data(data, net.num_classes())?;
    let extractor = Extractor::new(&net, config, magnitude)?;
    let features = extractor.extract_batch(&ds.images, 0)?;
    let mut dump = FeatureDump::new(
        net.num_classes(),
        net.feature_dim(),
        config.extraction.loss(),
        config.normalize,
    );
    for f in &features {
        dump.push(f)?;
    }
    create_parent(out)?;
    dump.save(out)?;
    let nonconverged = features
        .iter()
        .filter(|f| !f.nonconverged.is_empty())
        .count();
    println!(
        "{} features of length {} -> {}{}",
        features.len(),
        dump.feature_len(),
        out.display(),
        if nonconverged > 0 {
            format!(" ({nonconverged} samples had FGSM walks that did not converge)")
        } else {
            String::new()
        }
    );
    Ok(())
}

fn read_image(path: &Path, net: &Network<f32>) -> Result<Tensor<f32>> {
    let (w, h, ch, bytes) =
        read_pnm(path).with_context(|| format!("reading {}", path.display()))?;
    let shape = net.input_shape();
    let want_ch = shape[0];
    if shape[1..] != [h, w] {
        bail!(
            "image is {w}x{h}, network expects {}x{}",
            shape[2],
            shape[1]
        );
    }
    // interleaved -> planar, converting color to gray when needed
    let mut data = vec![0f32; want_ch * h * w];
    for p in 0..h * w {
        let px = &bytes[p * ch..(p + 1) * ch];
        for c in 0..want_ch {
            let v = match (ch, want_ch) {
                (a, b) if a == b => px[c] as f32,
                (3, 1) => (px[0] as f32 + px[1] as f32 + px[2] as f32) / 3.0,
                (1, _) => px[0] as f32,
                _ => bail!("cannot map {ch} image channels onto {want_ch}"),
            };
            data[c * h * w + p] = v / 255.0;
        }
    }
    Ok(Tensor::new(shape.to_vec(), data)?)
}

fn cmd_explain(
    ckpt: &Path,
    image: &Path,
    q: &str,
    mse_m: bool,
    blend: f64,
    out: &Path,
) -> Result<()> {
    let (net, magnitude) = load_base(ckpt)?;
    let x = read_image(image, &net)?;
    let loss = if mse_m {
        match magnitude {
            Some(m) => ContrastLoss::MseM(m),
            None => bail!("the checkpoint stores no magnitude M; --mse-m is unavailable"),
        }
    } else {
        ContrastLoss::Exponential
    };
    let p = net.predict(&x)?.label;
    fs::create_dir_all(out)?;
    let base_map = gradcam(&net, &x, p)?;
    let mut written = vec![render(&base_map, &x, out, &format!("gradcam_p{p}"), blend)?];
    let maps = match q {
        "all" => contrastive_maps(&net, &x, loss)?,
        "self" => vec![contrastive_cam(&net, &x, p, loss)?],
        k => {
            let k: usize = k.parse().with_context(|| {
                format!("--q expects a class index, `all` or `self`, got `{k}`")
            })?;
            vec![contrastive_cam(&net, &x, k, loss)?]
        }
    };
    for m in &maps {
        written.push(render(
            m,
            &x,
            out,
            &format!("contrast_p{}_q{}", m.p, m.q),
            blend,
        )?);
    }
    println!(
        "predicted class {p}; wrote {} maps to {}",
        written.len(),
        out.display()
    );
    Ok(())
}

fn cmd_infer(ckpt: &Path, head_path: &Path, data: &Path, report_path: &Path) -> Result<()> {
    let (net, magnitude) = load_base(ckpt)?;
    let head = ContrastiveHead::from_checkpoint(
        Checkpoint::<f32>::load(head_path)
            .with_context(|| format!("loading {}", head_path.display()))?,
    )?;
    let pipeline = ContrastivePipeline::new(&net, magnitude, &head)?;
    let ds = load_data(data, net.num_classes())?;
    let preds = pipeline.predict_batch(&ds.images)?;
    let n = ds.len() as f64;
    let ff = preds
        .iter()
        .zip(&ds.labels)
        .filter(|(p, &l)| p.base_label == l)
        .count() as f64
        * 100.0
        / n;
    let ca = preds
        .iter()
        .zip(&ds.labels)
        .filter(|(p, &l)| p.label == l)
        .count() as f64
        * 100.0
        / n;
    let mut report = ExperimentReport::new("infer");
    report
        .rows
        .push(ReportRow::new("clean", 0, ds.len(), ff, ca));
    create_parent(report_path)?;
    report.write(report_path, ReportFormat::Csv)?;
    println!(
        "feed-forward {ff:.2}%  contrastive {ca:.2}%  gain {:+.2}",
        ca - ff
    );
    Ok(())
}

fn cmd_bench(config: Option<&Path>, mode: BenchMode, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    fs::create_dir_all(out)?;
    let reports = match mode {
        BenchMode::Parity => vec![run_clean_parity(&cfg)?.0],
        BenchMode::Sweep => vec![run_distortion_sweep(&cfg)?.0],
        BenchMode::LimitedData => run_limited(&cfg, LimitedMode::Data)?,
        BenchMode::LimitedEpochs => run_limited(&cfg, LimitedMode::Epochs)?,
        BenchMode::Losses => vec![run_loss_comparison(&cfg)?],
    };
    for r in &reports {
        r.write(out.join(format!("{}.csv", r.name)), ReportFormat::Csv)?;
        r.write(out.join(format!("{}.json", r.name)), ReportFormat::Json)?;
        for row in &r.rows {
            println!(
                "{:<12} {:<28} level {:>3}  ff {:6.2}  contrastive {:6.2}  gain {:+6.2}",
                r.name, row.kind, row.level, row.ff_acc, row.contrastive_acc, row.gain
            );
        }
    }
    Ok(())
}
