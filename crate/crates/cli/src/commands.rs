//! One function per subcommand. Each writes its outputs into a run
//! directory and returns it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use eqar_core::analysis::{
    column_stationarity, flop_report, frechet_distance, transfer_matrix, write_json, zero_shot_eval, DistStats, DIST_LABEL,
};
use eqar_core::data_io::bundle::{load_tokenizer, save_tokenizer};
use eqar_core::data_io::image::image_png;
use eqar_core::data_io::{load_generator_bundle, save_generator_bundle, write_etb, Corpus, ModelBundle, Provenance, SyntheticSpec};
use eqar_core::generator::Generator;
use eqar_core::numerics::Tensor;
use eqar_core::sampler::{extrapolate_long, generate_sequence, SamplerConfig};
use eqar_core::tokenizer::{concat_strips, Codec, CodecConfig, ConvTokenizer, LinearTokenizer};
use eqar_core::training::{crop_len_for, train, LossLog, ProbeSet, TokenCorpus, TrainConfig, TrainTaskMask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{self, RunConfig};
use crate::{rundir, Cli, CliError, Command, Report, CHECKPOINT_ENV};

pub const CHECKPOINT_SUBDIR: &str = "checkpoint";
pub const TOKENIZER_SUBDIR: &str = "tokenizer";
pub const LOSS_LOG_JSON: &str = "loss_log.json";

type Out = Result<Option<PathBuf>, CliError>;

pub fn run(cli: Cli) -> Out {
    let mut cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
    if let Command::Sample { seed: Some(s), .. } = &cli.command {
        cfg.sampler.seed = *s;
    }
    if matches!(cli.command, Command::GenTrain) {
        cfg = resolve_generator(cfg)?;
    }
    // Checkpoints load before the run directory exists, so a bad path leaves nothing behind.
    let needs = match &cli.command {
        Command::Sample { checkpoint, .. } | Command::Serve { checkpoint, .. } => Some(checkpoint),
        Command::Analyze { report: Report::ZeroShot { checkpoint } | Report::Stationarity { checkpoint } | Report::Dist { checkpoint } } => {
            Some(checkpoint)
        }
        _ => None,
    };
    let bundle = needs.map(|c| load_bundle(c.as_deref(), &cfg)).transpose()?;
    if let Command::Serve { bind, .. } = &cli.command {
        return serve(bundle.expect("loaded"), *bind).map(|_| None);
    }
    let dir = rundir::create(&cli.out, cli.run_dir.as_deref(), &cfg)?;
    log::info!("run directory {}", dir.display());
    match (&cli.command, bundle) {
        (Command::DatasetGen, _) => dataset_gen(&cfg, &dir)?,
        (Command::TokTrain, _) => tok_train(&cfg, &dir)?,
        (Command::GenTrain, _) => gen_train(&cfg, &dir)?,
        (Command::Analyze { report: Report::Transfer }, _) => transfer(&cfg, &dir)?,
        (Command::Analyze { report: Report::Flops }, _) => flops(&cfg, &dir)?,
        (Command::Sample { class, .. }, Some(b)) => sample(&cfg, &b, class, &dir)?,
        (Command::Analyze { report: Report::ZeroShot { .. } }, Some(b)) => zero_shot(&cfg, &b, &dir)?,
        (Command::Analyze { report: Report::Stationarity { .. } }, Some(b)) => stationarity(&cfg, &b, &dir)?,
        (Command::Analyze { report: Report::Dist { .. } }, Some(b)) => dist(&cfg, &b, &dir)?,
        _ => unreachable!("checkpoint commands always load a bundle"),
    }
    Ok(Some(dir))
}

fn config_err(pointer: &str, message: impl Into<String>) -> CliError {
    CliError::Config { pointer: pointer.into(), message: message.into() }
}

/// The codec described by `tokenizer`; a learned codec needs its weights.
pub fn build_codec(cfg: &RunConfig) -> Result<Codec, CliError> {
    match &cfg.tokenizer.codec {
        CodecConfig::Linear { config } => {
            LinearTokenizer::new(config.clone()).map(Codec::Linear).map_err(|e| config_err("/tokenizer/codec/config", e.to_string()))
        }
        CodecConfig::Conv { config } => {
            let path = cfg.tokenizer.checkpoint.as_ref().ok_or_else(|| CliError::MissingCheckpoint {
                path: PathBuf::new(),
                message: "a conv codec needs tokenizer.checkpoint".into(),
            })?;
            let tok = load_tokenizer(path).map_err(|e| CliError::MissingCheckpoint { path: path.clone(), message: e.to_string() })?;
            if tok.config() != config {
                return Err(config_err("/tokenizer/codec/config", "does not match the tokenizer checkpoint"));
            }
            Ok(Codec::Conv(Box::new(tok)))
        }
    }
}

/// Tie the generator's shape to the codec and the corpus.
fn resolve_generator(mut cfg: RunConfig) -> Result<RunConfig, CliError> {
    let (n, c) = match &cfg.tokenizer.codec {
        CodecConfig::Linear { config } => {
            let t = LinearTokenizer::new(config.clone()).map_err(|e| config_err("/tokenizer/codec/config", e.to_string()))?;
            (t.n_tokens(), t.token_channels())
        }
        CodecConfig::Conv { config } => (config.n_tokens(), config.token_channels),
    };
    cfg.generator.max_len = n;
    cfg.generator.token_channels = c;
    cfg.generator.n_classes = cfg.data.n_classes;
    cfg.generator.validate().map_err(|e| config_err("/generator", e.to_string()))?;
    Ok(cfg)
}

fn corpus(spec: &SyntheticSpec, split: u64, size: usize) -> Result<Corpus, CliError> {
    let spec = SyntheticSpec { split, size, ..spec.clone() };
    Corpus::new(spec).map_err(|e| config_err("/data", e.to_string()))
}

fn token_corpus(spec: &SyntheticSpec, split: u64, size: usize, codec: &Codec) -> Result<TokenCorpus, CliError> {
    TokenCorpus::new(corpus(spec, split, size)?, codec.clone()).map_err(|e| config_err("/data", e.to_string()))
}

/// Images `[N, H, W, 3]` of the first `n` corpus items.
fn corpus_images(c: &Corpus, n: usize) -> Result<(Tensor<f32>, Vec<usize>), CliError> {
    let idx: Vec<usize> = (0..n.min(c.len())).collect();
    Ok(c.batch(&idx)?)
}

fn first(images: &Tensor<f32>, i: usize) -> Result<Tensor<f32>, CliError> {
    let img = images.slice(0, i, i + 1)?;
    let shape = img.shape()[1..].to_vec();
    Ok(img.into_reshape(shape)?)
}

fn write_png(path: &Path, img: &Tensor<f32>) -> Result<(), CliError> {
    std::fs::write(path, image_png(img)?)?;
    Ok(())
}

fn dataset_gen(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let c = corpus(&cfg.data, cfg.data.split, cfg.data.size)?;
    let (images, labels) = corpus_images(&c, c.len())?;
    write_etb(&dir.join("images.etb"), &images)?;
    let labels = Tensor::new([labels.len()], labels.iter().map(|&l| l as f32).collect())?;
    write_etb(&dir.join("labels.etb"), &labels)?;
    let preview: Vec<Tensor<f32>> = (0..images.dim(0).min(8)).map(|i| first(&images, i)).collect::<Result<_, _>>()?;
    write_png(&dir.join("preview.png"), &concat_strips(&preview)?)?;
    write_json(&dir.join("dataset.json"), &json!({"spec": c.spec(), "count": c.len()}))?;
    Ok(())
}

fn tok_train(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let CodecConfig::Conv { config: tcfg } = &cfg.tokenizer.codec else {
        return Err(config_err("/tokenizer/codec/kind", "tok-train trains a conv codec"));
    };
    if (tcfg.image_h, tcfg.image_w) != (cfg.data.image_h, cfg.data.image_w) {
        return Err(config_err("/tokenizer/codec/config", "image size differs from the corpus"));
    }
    let tc = &cfg.tokenizer.train;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut tok = ConvTokenizer::<f32>::new(tcfg.clone(), &mut rng).map_err(|e| config_err("/tokenizer/codec/config", e.to_string()))?;
    let c = corpus(&cfg.data, cfg.data.split, cfg.data.size)?;
    let (images, _) = corpus_images(&c, c.len())?;
    let report = tok.fit(&images, tc, &mut rng)?;
    log::info!("tokenizer: {} steps, recon mse {:.5}", report.steps, report.recon_mse);
    save_tokenizer(&dir.join(TOKENIZER_SUBDIR), &tok, Provenance { epochs: 0, seed: tc.seed, steps: report.steps as u64 })?;
    write_json(&dir.join("tok_report.json"), &report)?;
    Ok(())
}

fn gen_train(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let codec = build_codec(cfg)?;
    let data = token_corpus(&cfg.data, cfg.data.split, cfg.data.size, &codec)?;
    let probe_data = token_corpus(&cfg.data, cfg.analysis.eval_split, cfg.train.probe_size, &codec)?;
    let probe = ProbeSet::from_corpus(&probe_data, cfg.train.probe_size)?;
    let mut model = Generator::<f32>::new(cfg.generator.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))
        .map_err(|e| config_err("/generator", e.to_string()))?;
    let out = train(&mut model, &data, &probe, &cfg.train, |_| {})?;
    out.log.write_csv(&dir.join("loss_log.csv"))?;
    write_json(&dir.join(LOSS_LOG_JSON), &out.log)?;
    let provenance = Provenance { epochs: cfg.train.epochs, seed: cfg.train.seed, steps: out.steps };
    let extra = json!({"train": cfg.train, "data": cfg.data});
    save_generator_bundle(&dir.join(CHECKPOINT_SUBDIR), &model, Some(&out.ema), &codec, &cfg.sampler, &[], provenance, extra)?;
    let last = out.log.last();
    write_json(
        &dir.join("train_report.json"),
        &json!({
            "steps": out.steps,
            "skipped": out.skipped,
            "final_train_loss": last.map(|e| e.train_loss),
            "wall_secs": last.map(|e| e.wall_secs),
        }),
    )?;
    Ok(())
}

/// The checkpoint named on the command line, in the config, or by
/// [`CHECKPOINT_ENV`], in that order.
pub fn checkpoint_path(flag: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.analysis.checkpoint.clone())
        .or_else(|| std::env::var_os(CHECKPOINT_ENV).map(PathBuf::from))
        .ok_or_else(|| CliError::MissingCheckpoint {
            path: PathBuf::new(),
            message: format!("no checkpoint: pass --checkpoint, set analysis.checkpoint or {CHECKPOINT_ENV}"),
        })
}

fn load_bundle(flag: Option<&Path>, cfg: &RunConfig) -> Result<ModelBundle, CliError> {
    let path = checkpoint_path(flag, cfg)?;
    load_generator_bundle(&path, cfg.analysis.use_ema).map_err(|e| CliError::MissingCheckpoint { path, message: e.to_string() })
}

/// Decode `[n, C′]` tokens to one image; sequences longer than the codec's
/// are assembled band by band.
pub fn render(codec: &Codec, tokens: &Tensor<f32>) -> Result<Tensor<f32>, CliError> {
    let (n, c) = (tokens.dim(0), tokens.dim(1));
    if n == codec.n_tokens() {
        let img = codec.decode(&tokens.reshape([1, n, c])?)?;
        return first(&img, 0);
    }
    let strips: Vec<Tensor<f32>> = (0..n).map(|p| codec.decode_strip(tokens, p)).collect::<Result<_, _>>()?;
    Ok(concat_strips(&strips)?)
}

fn cycle_classes(n_classes: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i % n_classes).collect()
}

fn sample(cfg: &RunConfig, bundle: &ModelBundle, classes: &[usize], dir: &Path) -> Result<(), CliError> {
    let n_classes = bundle.generator.config().n_classes;
    let classes = if classes.is_empty() { (0..n_classes).collect() } else { classes.to_vec() };
    if let Some(&c) = classes.iter().find(|&&c| c >= n_classes) {
        return Err(CliError::usage(format!("class {c} outside [0, {n_classes})")));
    }
    let (tokens, _) = generate_sequence(&bundle.generator, &classes, &cfg.sampler).map_err(|e| config_err("/sampler", e.to_string()))?;
    write_etb(&dir.join("tokens.etb"), &tokens)?;
    for (i, &c) in classes.iter().enumerate() {
        let img = render(&bundle.codec, &first(&tokens, i)?)?;
        write_png(&dir.join(format!("sample_{i:03}_class{c}.png")), &img)?;
    }
    Ok(())
}

fn stored<T: serde::de::DeserializeOwned>(bundle: &ModelBundle, key: &str) -> Option<T> {
    bundle.manifest.extra.get(key).and_then(|v| serde_json::from_value(v.clone()).ok())
}

fn zero_shot(cfg: &RunConfig, bundle: &ModelBundle, dir: &Path) -> Result<(), CliError> {
    let train_cfg: TrainConfig = stored(bundle, "train").unwrap_or_else(|| cfg.train.clone());
    let data: SyntheticSpec = stored(bundle, "data").unwrap_or_else(|| cfg.data.clone());
    let mask: TrainTaskMask = train_cfg.task_mask.clone();
    let probe_data = token_corpus(&data, cfg.analysis.eval_split, train_cfg.probe_size, &bundle.codec)?;
    let probe = ProbeSet::from_corpus(&probe_data, train_cfg.probe_size)?;
    let crop = crop_len_for(&bundle.generator, &train_cfg);
    let report = zero_shot_eval(&bundle.generator, &probe, &mask, crop, cfg.analysis.eval_seed)?;
    log::info!("held-out / trained loss ratio {:.3}", report.ratio);
    write_json(&dir.join("zero_shot.json"), &report)?;
    report.write_csv(&dir.join("zero_shot.csv"))?;
    Ok(())
}

fn read_log(path: &Path) -> Result<LossLog, CliError> {
    if path.extension().is_some_and(|e| e == "csv") {
        return Ok(LossLog::read_csv(path)?);
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn transfer(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let t = &cfg.analysis.transfer;
    let base_path = t.baseline_log.as_ref().ok_or_else(|| config_err("/analysis/transfer/baseline_log", "required"))?;
    if t.runs.is_empty() {
        return Err(config_err("/analysis/transfer/runs", "list at least one single-task loss log"));
    }
    let base = read_log(base_path)?;
    let profile = base
        .at_epoch(t.baseline_epoch)
        .ok_or_else(|| config_err("/analysis/transfer/baseline_epoch", format!("epoch {} not in the baseline log", t.baseline_epoch)))?;
    let runs: Vec<LossLog> = t.runs.iter().map(|p| read_log(p)).collect::<Result<_, _>>()?;
    let matrix = transfer_matrix(&runs, &profile.per_position)?;
    write_json(&dir.join("transfer.json"), &matrix)?;
    matrix.write_csv(&dir.join("transfer.csv"))?;
    Ok(())
}

fn flops(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let g = &cfg.generator;
    let n = cfg.analysis.flops.n.unwrap_or(g.max_len);
    let w = cfg.analysis.flops.w.unwrap_or(g.window_w);
    let report = flop_report(n, w, g.n_layers, g.n_heads, g.head_dim()).map_err(|e| config_err("/analysis/flops", e.to_string()))?;
    for v in &report.variants {
        println!("{:?}: {} pairs, {} FLOPs", v.variant, v.pairs, v.flops);
    }
    write_json(&dir.join("flops.json"), &report)?;
    report.write_csv(&dir.join("flops.csv"))?;
    Ok(())
}

fn stationarity(cfg: &RunConfig, bundle: &ModelBundle, dir: &Path) -> Result<(), CliError> {
    let s = &cfg.analysis.stationarity;
    let train_len = bundle.train_len();
    let sampler = SamplerConfig { target_len: s.target_len.unwrap_or(8 * train_len), ..cfg.sampler.clone() };
    let classes = cycle_classes(bundle.generator.config().n_classes, s.batch);
    let tokens = extrapolate_long(&bundle.generator, &classes, &sampler).map_err(|e| config_err("/analysis/stationarity", e.to_string()))?;
    let report = column_stationarity(&tokens, train_len, bundle.generator.config().window_w)
        .map_err(|e| config_err("/analysis/stationarity", e.to_string()))?;
    write_etb(&dir.join("tokens.etb"), &tokens)?;
    write_json(&dir.join("stationarity.json"), &report)?;
    report.write_csv(&dir.join("stationarity.csv"))?;
    Ok(())
}

fn dist(cfg: &RunConfig, bundle: &ModelBundle, dir: &Path) -> Result<(), CliError> {
    let n = cfg.analysis.dist.n_samples;
    if n < 2 {
        return Err(config_err("/analysis/dist/n_samples", "need at least two samples"));
    }
    let data: SyntheticSpec = stored(bundle, "data").unwrap_or_else(|| cfg.data.clone());
    let classes = cycle_classes(bundle.generator.config().n_classes, n);
    let sampler = SamplerConfig { target_len: bundle.train_len(), ..cfg.sampler.clone() };
    let (tokens, _) = generate_sequence(&bundle.generator, &classes, &sampler)?;
    let generated = bundle.codec.decode(&tokens)?;
    let (held_out, _) = corpus_images(&corpus(&data, cfg.analysis.eval_split, n)?, n)?;
    let (train_images, _) = corpus_images(&corpus(&data, data.split, n)?, n)?;
    let stats = DistStats::from_samples(&held_out)?;
    let distance = frechet_distance(&DistStats::from_samples(&generated)?, &stats)?;
    let floor = frechet_distance(&DistStats::from_samples(&train_images)?, &stats)?;
    write_json(
        &dir.join("dist.json"),
        &json!({"label": DIST_LABEL, "distance": distance, "train_vs_held_out": floor, "n_samples": n}),
    )?;
    Ok(())
}

fn serve(bundle: ModelBundle, bind: Option<std::net::SocketAddr>) -> Result<(), CliError> {
    let addr = match bind {
        Some(a) => a,
        None => eqar_service::bind_addr_from_env().map_err(|e| CliError::usage(format!("{}: {e}", eqar_service::BIND_ENV)))?,
    };
    let state = Arc::new(eqar_service::AppState::new(Some(bundle), eqar_service::ServiceConfig::default())?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(eqar_service::serve(addr, state))?;
    Ok(())
}
