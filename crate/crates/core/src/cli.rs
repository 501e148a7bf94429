//! Command-line entry point.
//!
//! Exit status: 0 success, 1 usage error, 2 data or validation error,
//! 3 numeric failure (non-finite values, failed gradient check).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::{
    append_pseudo_spots, read_checkpoint, read_slide, synth_dataset, write_checkpoint, write_slide,
    Manifest, PseudoFeatures, SlideRecord, SynthConfig,
};
use crate::error::{Error, Result};
use crate::model::{FeastModel, ModelConfig};
use crate::training::{gradcheck_model, metrics, predict, train, PccAggregation, TrainConfig};

/// Tolerance for the `gradcheck` subcommand.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "feast",
    version,
    about = "Negative-aware hierarchical attention for spot expression prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Fill {
    NearestMean,
    Zero,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Pcc {
    PerGene,
    PerSpot,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset: manifest, slides and generator description.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace a slide's pseudo-spots with freshly sampled ones.
    Pseudo {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Feature fill for new pseudo-spots.
        #[arg(long, value_enum, default_value = "nearest-mean")]
        fill: Fill,
    },
    /// Train on the manifest's training slides.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        train_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: PathBuf,
    },
    /// Score a checkpoint and write per-slide predictions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        pred_out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, value_enum, default_value = "per-gene")]
        pcc: Pcc,
    },
    /// Export every head's attention row for one original spot.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        target_spot: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter gradient on a toy slide.
    Gradcheck {
        /// Model configuration; the toy profile when omitted.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Status for a failed subcommand.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Scientific notation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out } => synth_cmd(&config, &out),
        Command::Pseudo { input, out, fill } => {
            let slide = read_slide(&input)?;
            let fill = match fill {
                Fill::NearestMean => PseudoFeatures::NearestMean,
                Fill::Zero => PseudoFeatures::Zero,
            };
            let with = append_pseudo_spots(&slide, fill)?;
            ensure_parent(&out)?;
            write_slide(&with, &out)?;
            println!(
                "{}: {} originals, {} pseudo-spots",
                with.slide_id,
                with.n_orig(),
                with.n_pseudo()
            );
            Ok(())
        }
        Command::Train {
            manifest,
            model_config,
            train_config,
            out,
            history,
        } => train_cmd(&manifest, &model_config, &train_config, &out, &history),
        Command::Eval {
            ckpt,
            manifest,
            metrics,
            pred_out,
            split,
            pcc,
        } => eval_cmd(&ckpt, &manifest, &metrics, &pred_out, split, pcc),
        Command::Attn {
            ckpt,
            slide,
            target_spot,
            out,
        } => attn_cmd(&ckpt, &slide, target_spot, &out),
        Command::Gradcheck {
            model_config,
            seed,
            eps,
        } => gradcheck_cmd(model_config.as_deref(), seed, eps),
    }
}

fn synth_cmd(config: &Path, out: &Path) -> Result<()> {
    let cfg: SynthConfig = read_json(config)?;
    let ds = synth_dataset(&cfg)?;
    fs::create_dir_all(out.join("train"))?;
    fs::create_dir_all(out.join("test"))?;
    let save = |dir: &str, slides: &[SlideRecord]| -> Result<Vec<PathBuf>> {
        slides
            .iter()
            .map(|s| {
                let rel = PathBuf::from(dir).join(format!("{}.fst", s.slide_id));
                write_slide(s, out.join(&rel))?;
                Ok(rel)
            })
            .collect()
    };
    let manifest = Manifest {
        train: save("train", &ds.train)?,
        test: save("test", &ds.test)?,
        d: cfg.d,
        n_genes: cfg.n_genes,
    };
    manifest.write(out.join("manifest.json"))?;
    write_json(&out.join("generator.json"), &ds.generator)?;
    println!(
        "wrote {} train and {} test slides to {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(
    manifest: &Path,
    model_config: &Path,
    train_config: &Path,
    out: &Path,
    history: &Path,
) -> Result<()> {
    let (manifest, root) = Manifest::read(manifest)?;
    let mcfg: ModelConfig = read_json(model_config)?;
    let tcfg: TrainConfig = read_json(train_config)?;
    if mcfg.d_model != manifest.d || mcfg.n_genes != manifest.n_genes {
        return Err(Error::InvalidArgument(format!(
            "model expects d = {}, G = {}; manifest has d = {}, G = {}",
            mcfg.d_model, mcfg.n_genes, manifest.d, manifest.n_genes
        )));
    }
    let slides = manifest.load_train(&root)?;
    let outcome = train(&slides, &tcfg, &mcfg)?;
    ensure_parent(out)?;
    write_checkpoint(&outcome.model, out)?;
    let mut csv = String::from("epoch,lr,mean_loss\n");
    for r in &outcome.history {
        writeln!(
            csv,
            "{},{},{}",
            r.epoch,
            fmt_f64(r.lr),
            fmt_f64(r.mean_loss)
        )
        .expect("string write");
    }
    ensure_parent(history)?;
    fs::write(history, csv)?;
    if let Some(last) = outcome.history.last() {
        println!(
            "trained {} epochs, final mean loss {:.6}",
            outcome.history.len(),
            last.mean_loss
        );
    }
    Ok(())
}

fn prediction_csv(slide: &SlideRecord, pred: &crate::numerics::Matrix) -> String {
    let mut csv = String::from("spot_id,x,y");
    for g in &slide.gene_names {
        csv.push(',');
        csv.push_str(g);
    }
    csv.push('\n');
    for i in 0..pred.rows() {
        let [x, y] = slide.coords.phys[i];
        write!(csv, "{i},{},{}", fmt_f64(x), fmt_f64(y)).expect("string write");
        for v in pred.row(i) {
            write!(csv, ",{}", fmt_f64(*v)).expect("string write");
        }
        csv.push('\n');
    }
    csv
}

fn eval_cmd(
    ckpt: &Path,
    manifest: &Path,
    metrics_out: &Path,
    pred_out: &Path,
    split: Split,
    pcc: Pcc,
) -> Result<()> {
    let model = read_checkpoint(ckpt)?;
    let (manifest, root) = Manifest::read(manifest)?;
    let slides = match split {
        Split::Train => manifest.load_train(&root)?,
        Split::Test => manifest.load_test(&root)?,
    };
    let preds = predict(&model, &slides)?;
    let targets: Vec<_> = slides.iter().map(|s| s.targets.clone()).collect();
    let aggregation = match pcc {
        Pcc::PerGene => PccAggregation::PerGene,
        Pcc::PerSpot => PccAggregation::PerSpot,
    };
    let report = metrics(&preds, &targets, aggregation)?;
    fs::create_dir_all(pred_out)?;
    for (slide, pred) in slides.iter().zip(&preds) {
        fs::write(
            pred_out.join(format!("{}.csv", slide.slide_id)),
            prediction_csv(slide, pred),
        )?;
    }
    ensure_parent(metrics_out)?;
    write_json(metrics_out, &report)?;
    println!(
        "mse {:.6} mae {:.6} pcc {:.6}",
        report.mse, report.mae, report.pcc
    );
    Ok(())
}

fn attn_cmd(ckpt: &Path, slide_path: &Path, target: usize, out: &Path) -> Result<()> {
    let model = read_checkpoint(ckpt)?;
    let slide = read_slide(slide_path)?;
    if target >= slide.n_orig() {
        return Err(Error::InvalidArgument(format!(
            "target spot {target} is not an original spot (slide has {})",
            slide.n_orig()
        )));
    }
    let (_, cache) = model.forward(&slide, true)?;
    let cache = cache.expect("maps requested");
    fs::create_dir_all(out)?;
    let mut files = 0;
    for (l, layer) in cache.layers.iter().enumerate() {
        for (stage, maps) in [("local", &layer.local), ("global", &layer.global)] {
            for (h, m) in maps.iter().enumerate() {
                let mut csv = String::from("query,key,a_pos,a_neg,a_final\n");
                for (key, pos, neg, fin) in m.row_entries(target) {
                    writeln!(
                        csv,
                        "{target},{key},{},{},{}",
                        fmt_f64(pos),
                        fmt_f64(neg),
                        fmt_f64(fin)
                    )
                    .expect("string write");
                }
                fs::write(out.join(format!("layer{l}_{stage}_head{h}.csv")), csv)?;
                files += 1;
            }
        }
    }
    println!("wrote {files} attention rows for spot {target}");
    Ok(())
}

fn gradcheck_cmd(model_config: Option<&Path>, seed: u64, eps: f64) -> Result<()> {
    let mut cfg = match model_config {
        Some(p) => read_json(p)?,
        None => ModelConfig::toy(),
    };
    cfg.seed = seed;
    let model = FeastModel::new(cfg.clone())?;
    let slide = crate::data::toy_slide(seed, cfg.d_model, cfg.n_genes);
    let report = gradcheck_model(&model, &slide, eps)?;
    let worst = report
        .worst
        .map(|(t, i)| (model.params.specs[t].name.clone(), i));
    let summary = serde_json::json!({
        "checked": report.checked(),
        "max_rel_err": report.max_rel_err,
        "mean_rel_err": report.mean_rel_err,
        "worst": worst,
        "tolerance": GRADCHECK_TOLERANCE,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if report.passes(GRADCHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_rel_err
        )))
    }
}
