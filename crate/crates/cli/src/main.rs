//! `emd`: corpus rendering, typeface training/generation/evaluation and
//! feed-forward style transfer from the command line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use emd_core::checkpoint::Checkpoint;
use emd_core::font_net::{FontNet, FontNetConfig};
use emd_core::glyph::{build_eval_sets, training_triplet, Corpus};
use emd_core::nst::{fit_decoder, LossExtractor, NstConfig, NstNet};
use emd_core::trainer::{evaluate, restore_model, LogEntry, TrainConfig, Trainer};
use emd_core::{pnm, Error, Tensor};

#[derive(Parser, Debug)]
#[command(name = "emd", version, about = "Style/content separation for glyph and image style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic glyph corpus as PGM files plus a manifest.
    Corpus(CorpusArgs),
    /// Train the typeface network and write a checkpoint.
    Train(TrainArgs),
    /// Generate one glyph from style and content reference images.
    Generate(GenerateArgs),
    /// Print mean L1 / RMSE / PDAR over D1..D4 as CSV.
    Eval(EvalArgs),
    /// Stylize an image with a trained transfer network.
    Nst(NstArgs),
    /// Fit a transfer network decoder on one style/content pair.
    NstTrain(NstTrainArgs),
}

#[derive(Args, Debug)]
struct CorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    styles: usize,
    #[arg(long, default_value_t = 60)]
    contents: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 4)]
    r: usize,
    #[arg(long, default_value_t = 20_000)]
    nt: usize,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Base channel count of the encoders and decoder.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Feed zeros instead of encoder activations to the decoder.
    #[arg(long)]
    no_skips: bool,
    #[arg(long)]
    out: PathBuf,
    /// Loss log; defaults to the checkpoint path with `.log` appended.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Images of the wanted style, one per content.
    #[arg(long, num_args = 1.., required = true)]
    style_refs: Vec<PathBuf>,
    /// Images of the wanted character, one per style.
    #[arg(long, num_args = 1.., required = true)]
    content_refs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 4)]
    r: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Targets per evaluation cell.
    #[arg(long, default_value_t = 50)]
    per_set: usize,
}

#[derive(Args, Debug)]
struct NstArgs {
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// One or more comma-separated weights in [0, 1]. With several values
    /// one file per weight is written, suffixed `_a<weight>`.
    #[arg(long, value_delimiter = ',', default_value = "1", value_parser = parse_alpha)]
    alpha: Vec<f64>,
    /// Interpolate between `--style` (alpha 0) and this style (alpha 1)
    /// instead of trading off against the content.
    #[arg(long)]
    interp_style2: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct NstTrainArgs {
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    content: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&a) {
        Ok(a)
    } else {
        Err(format!("alpha {a} is outside [0, 1]"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Corpus(a) => corpus(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Nst(a) => nst(a),
        Command::NstTrain(a) => nst_train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for bad arguments, 4 for numeric failures, 3 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::InvalidArgument(_)) => 2,
        Some(Error::NonFinite { .. } | Error::MissingGradient(_) | Error::NonScalar { .. }) => 4,
        _ => 3,
    }
}

fn corpus(a: CorpusArgs) -> Result<()> {
    let c = Corpus::render(a.styles, a.contents, a.size, a.seed)?;
    c.export(&a.out)?;
    eprintln!("wrote {} images to {}", a.styles * a.contents, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let corpus = Corpus::load(&a.corpus)?;
    // Surfaces an oversized r before any work is done.
    training_triplet(&corpus.partition, a.r, a.seed, 0)?;
    let mut net_cfg = FontNetConfig::new(corpus.size, a.r, a.channels)?;
    net_cfg.skips = !a.no_skips;
    let net = FontNet::new(net_cfg, a.seed)?;
    let cfg = TrainConfig {
        lr: a.lr,
        batch: a.batch,
        n_t: a.nt,
        steps: a.steps,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(net, cfg)?;
    let log_path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log"));
    let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{}", LogEntry::HEADER)?;
    let mut io_err = None;
    trainer.train(&corpus, |e| {
        if let Err(err) = writeln!(log, "{}", e.csv()) {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = io_err {
        return Err(err).with_context(|| format!("writing {}", log_path.display()));
    }
    log.flush()?;
    trainer.checkpoint()?.save(&a.out)?;
    if let Some(last) = trainer.log.last() {
        eprintln!("step {} loss {:.6}", last.step, last.loss);
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Stacks single-channel images on the channel axis.
fn read_references(files: &[PathBuf], r: usize, size: usize, what: &str) -> Result<Tensor> {
    let expect = || format!("expected r = {r} {what} references of {size}×{size} pixels");
    if files.len() != r {
        bail!(Error::InvalidArgument(format!("{}, got {} files", expect(), files.len())));
    }
    let mut data = Vec::with_capacity(r * size * size);
    for f in files {
        let img = pnm::read(f)?;
        if img.channels != 1 || img.width != size || img.height != size {
            bail!(Error::InvalidArgument(format!(
                "{}: {}, got a {}×{} image with {} channel(s)",
                f.display(),
                expect(),
                img.width,
                img.height,
                img.channels
            )));
        }
        data.extend_from_slice(img.to_tensor().data());
    }
    Ok(Tensor::new(vec![1, r, size, size], data)?)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let net = restore_model(&Checkpoint::load(&a.ckpt)?)?;
    let (r, size) = (net.config.r, net.config.image_size);
    let style = read_references(&a.style_refs, r, size, "style")?;
    let content = read_references(&a.content_refs, r, size, "content")?;
    let out = net.generate(&style, &content)?;
    pnm::write(&a.out, &pnm::encode_tensor(&out)?)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let net = restore_model(&Checkpoint::load(&a.ckpt)?)?;
    if net.config.r != a.r {
        bail!(Error::InvalidArgument(format!("checkpoint was trained with r = {}, not {}", net.config.r, a.r)));
    }
    let corpus = Corpus::load(&a.corpus)?;
    let suites = build_eval_sets(&corpus.partition, a.r, a.seed, a.per_set)?;
    print!("{}", evaluate(&net, &corpus, &suites)?.csv());
    Ok(())
}

/// Grayscale to RGB by replication, RGB to grayscale by channel mean.
fn to_channels(t: &Tensor, channels: usize) -> Result<Tensor> {
    let (_, c, h, w) = t.dims4()?;
    let hw = h * w;
    let data = match (c, channels) {
        (a, b) if a == b => return Ok(t.clone()),
        (1, 3) => t.data().repeat(3),
        (3, 1) => (0..hw).map(|i| (t.data()[i] + t.data()[hw + i] + t.data()[2 * hw + i]) / 3.0).collect(),
        _ => bail!(Error::InvalidArgument(format!("cannot convert {c} channels to {channels}"))),
    };
    Ok(Tensor::new(vec![1, channels, h, w], data)?)
}

fn plane(t: &Tensor, ch: usize) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    Ok(Tensor::new(vec![1, 1, h, w], t.data()[ch * h * w..(ch + 1) * h * w].to_vec())?)
}

fn nst(a: NstArgs) -> Result<()> {
    let net = NstNet::from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let style = pnm::read(&a.style)?.to_tensor();
    let content = pnm::read(&a.content)?.to_tensor();
    let style2 = a.interp_style2.as_deref().map(pnm::read).transpose()?.map(|p| p.to_tensor());
    let run = |s: &Tensor, c: &Tensor, s2: Option<&Tensor>, alpha: f64| -> emd_core::Result<Tensor> {
        match s2 {
            Some(s2) => net.interpolate(s, s2, c, alpha),
            None => net.tradeoff(s, c, alpha),
        }
    };
    let cin = net.config.in_channels;
    let content_channels = content.shape()[1];
    for &alpha in &a.alpha {
        let out = if cin == 1 && content_channels == 3 {
            // Colour input through a grayscale network: one plane at a time,
            // each against the matching style plane.
            let s = to_channels(&style, 3)?;
            let s2 = style2.as_ref().map(|t| to_channels(t, 3)).transpose()?;
            let mut planes = Vec::with_capacity(3);
            for ch in 0..3 {
                let s2p = s2.as_ref().map(|t| plane(t, ch)).transpose()?;
                planes.push(run(&plane(&s, ch)?, &plane(&content, ch)?, s2p.as_ref(), alpha)?);
            }
            let (_, _, h, w) = planes[0].dims4()?;
            Tensor::new(vec![1, 3, h, w], planes.iter().flat_map(|p| p.data().iter().copied()).collect())?
        } else {
            let s = to_channels(&style, cin)?;
            let c = to_channels(&content, cin)?;
            let s2 = style2.as_ref().map(|t| to_channels(t, cin)).transpose()?;
            run(&s, &c, s2.as_ref(), alpha)?
        };
        let path = if a.alpha.len() > 1 { alpha_path(&a.out, alpha) } else { a.out.clone() };
        pnm::write(&path, &pnm::encode_tensor(&out)?)?;
    }
    Ok(())
}

fn alpha_path(out: &Path, alpha: f64) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}_a{alpha}.{}", ext.to_string_lossy()),
        None => format!("{stem}_a{alpha}"),
    };
    out.with_file_name(name)
}

fn nst_train(a: NstTrainArgs) -> Result<()> {
    let content = pnm::read(&a.content)?.to_tensor();
    let channels = content.shape()[1];
    let style = to_channels(&pnm::read(&a.style)?.to_tensor(), channels)?;
    let mut net = NstNet::new(NstConfig::new(channels), a.seed)?;
    let extractor = LossExtractor::for_config(&net.config)?;
    let log = fit_decoder(&mut net, &extractor, &[(style, content)], a.steps, a.lr)?;
    net.to_checkpoint()?.save(&a.out)?;
    if let (Some(first), Some(last)) = (log.total.first(), log.total.last()) {
        eprintln!("total loss {first:.6} -> {last:.6}");
    }
    Ok(())
}
