use std::cell::RefCell;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charprior::{CharSequence, PriorExtractor, SegmentMode};
use crate::degrade::degrade;
use crate::denoiser::{DenoiserModel, ForwardTrace, PriorMode};
use crate::diffusion::{restore_with, training_loss, NoisePredictor, SamplerMode};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{evaluate_run, restored_path, Aggregate, MetricReport};
use crate::numerics::{derive_seed, AdamW, AdamWConfig, Rng, Scalar, Tape, Tensor, Var};
use crate::plates::{generate_dataset, resolve, DatasetSplits, Manifest, PixelBox, SPLITS};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;

const DEGRADE_KEY: u64 = 0x4445_4752;
const INIT_KEY: u64 = 0x494E_4954;
const BATCH_KEY: u64 = 0x4241_5443;
const NOISE_KEY: u64 = 0x4E4F_4953;

pub const CHECKPOINT_FILE: &str = "model.chdf";
pub const TRACE_FILE: &str = "loss.jsonl";

pub fn manifest_path(data_dir: &Path, split: &str) -> PathBuf {
    data_dir.join(format!("{split}.jsonl"))
}

/// Renders the dataset into `out_dir`.
pub fn cmd_gen_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetSplits> {
    cfg.validate()?;
    let splits = generate_dataset(&cfg.plates, cfg.seed, out_dir)?;
    log::info!(
        "wrote {} train / {} val / {} test plates to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out_dir.display()
    );
    Ok(splits)
}

/// Writes `lq/<id>` for every record of every split manifest present in
/// `data_dir` and records the path. Returns the number of images written.
pub fn cmd_degrade(cfg: &RunConfig, data_dir: &Path) -> Result<usize> {
    cfg.validate()?;
    let lq_dir = data_dir.join("lq");
    fs::create_dir_all(&lq_dir).map_err(|e| Error::io(&lq_dir, e))?;
    let mut total = 0;
    let mut found = false;
    for split in SPLITS {
        let mp = manifest_path(data_dir, split);
        if !mp.exists() {
            continue;
        }
        found = true;
        let mut m = Manifest::read(&mp)?;
        let paths: Vec<Result<String>> =
            m.records
                .par_iter()
                .map(|r| {
                    let hq_rel = r.hq_path.as_ref().ok_or_else(|| {
                        Error::invalid("degrade", format!("record {} has no high-quality image", r.id))
                    })?;
                    let hq = Image::read(&resolve(&mp, hq_rel))?;
                    let lq = degrade(&hq, &cfg.degrade, derive_seed(cfg.seed ^ DEGRADE_KEY, r.seed))?;
                    let name = restored_path(Path::new("lq"), &r.id, lq.channels());
                    lq.write(&data_dir.join(&name))?;
                    Ok(name.to_string_lossy().into_owned())
                })
                .collect();
        for (r, p) in m.records.iter_mut().zip(paths) {
            r.lq_path = Some(p?);
            total += 1;
        }
        m.write(&mp)?;
    }
    if !found {
        return Err(Error::io(
            manifest_path(data_dir, "train"),
            std::io::ErrorKind::NotFound.into(),
        ));
    }
    log::info!("degraded {total} images");
    Ok(total)
}

/// One loaded example in model space.
struct Example {
    id: String,
    x0: Option<Tensor<f32>>,
    lq: Tensor<f32>,
    prior: CharSequence,
}

fn extract_prior(
    extractor: &PriorExtractor,
    lq: &Image,
    boxes: Option<&[PixelBox]>,
    max_chars: usize,
) -> Result<CharSequence> {
    let dets = extractor.detect(lq, boxes)?;
    Ok(CharSequence::from_detections(
        &dets,
        (lq.width(), lq.height()),
        max_chars,
    ))
}

fn load_examples(
    cfg: &RunConfig,
    mp: &Path,
    m: &Manifest,
    extractor: &PriorExtractor,
    need_hq: bool,
) -> Result<Vec<Example>> {
    let text = cfg.model.prior_mode.uses_text();
    m.records
        .par_iter()
        .map(|r| {
            let lq_rel = r.lq_path.as_ref().ok_or_else(|| {
                Error::invalid(
                    "dataset",
                    format!("record {} has no low-quality image; run degrade first", r.id),
                )
            })?;
            let lq = Image::read(&resolve(mp, lq_rel))?;
            let x0 = match (&r.hq_path, need_hq) {
                (Some(p), _) => Some(Image::read(&resolve(mp, p))?.to_model()),
                (None, true) => {
                    return Err(Error::invalid(
                        "dataset",
                        format!("record {} has no high-quality image", r.id),
                    ))
                }
                (None, false) => None,
            };
            let prior = if text {
                extract_prior(extractor, &lq, Some(&r.boxes), cfg.plates.style.max_chars)?
            } else {
                CharSequence::default()
            };
            Ok(Example {
                id: r.id.clone(),
                x0,
                lq: lq.to_model(),
                prior,
            })
        })
        .collect()
}

pub fn extractor_for(cfg: &RunConfig) -> Result<PriorExtractor> {
    PriorExtractor::new(&cfg.plates.style, cfg.priors.segmenter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub final_loss: Option<f64>,
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Trains on the train split of `data_dir`, writing the checkpoint and loss
/// trace into `out_dir`. Uses the config's own segmenter.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let extractor = extractor_for(cfg)?;
    train_with(cfg, data_dir, out_dir, &extractor)
}

/// [`cmd_train`] with a caller-owned prior extractor, which is only ever
/// read.
pub fn train_with(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    extractor: &PriorExtractor,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mp = manifest_path(data_dir, "train");
    let manifest = Manifest::read(&mp)?;
    if manifest.is_empty() {
        return Err(Error::invalid("train", format!("{} has no records", mp.display())));
    }
    let examples = load_examples(cfg, &mp, &manifest, extractor, true)?;
    let style = &cfg.plates.style;
    let vocab = style.vocab()?;
    let schedule = cfg.schedule.build()?;
    let tc = &cfg.train;
    let mut model = DenoiserModel::<f32>::new(
        cfg.model.clone(),
        vocab.len(),
        style.max_chars,
        schedule.timesteps(),
        derive_seed(tc.seed, INIT_KEY),
    )?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: tc.lr,
            weight_decay: tc.weight_decay,
            ..Default::default()
        },
        &model.store,
    );
    let mut batch_rng = Rng::new(derive_seed(tc.seed, BATCH_KEY));
    let mut noise_rng = Rng::new(derive_seed(tc.seed, NOISE_KEY));

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let trace_path = out_dir.join(TRACE_FILE);
    let mut trace = std::io::BufWriter::new(fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?);
    let save = |model: &DenoiserModel<f32>, step: usize| {
        Checkpoint {
            config: cfg.clone(),
            step: step as u64,
            params: model.store.clone(),
        }
        .save(&ckpt_path)
    };

    let text = cfg.model.prior_mode.uses_text();
    let mut final_loss = None;
    let mut window = 0.0;
    for step in 1..=tc.steps {
        let idx: Vec<usize> = (0..tc.batch).map(|_| batch_rng.below(examples.len())).collect();
        let x0 = Tensor::stack(
            &idx.iter()
                .map(|&i| examples[i].x0.clone().expect("loaded"))
                .collect::<Vec<_>>(),
        )?;
        let lq = Tensor::stack(&idx.iter().map(|&i| examples[i].lq.clone()).collect::<Vec<_>>())?;
        let priors: Vec<CharSequence> = if text {
            idx.iter().map(|&i| examples[i].prior.clone()).collect()
        } else {
            Vec::new()
        };
        let mut tape = Tape::new();
        let loss = training_loss(&mut tape, &model, &schedule, &x0, &lq, &priors, &mut noise_rng)?;
        let value = tape.value(loss).item().f64();
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = tape.backward(loss)?.param_grads(&model.store.shapes());
        opt.step(&mut model.store, &grads)?;
        let rec = serde_json::to_string(&TraceRecord { step, loss: value }).expect("trace serializes");
        writeln!(trace, "{rec}").map_err(|e| Error::io(&trace_path, e))?;
        final_loss = Some(value);
        window += value;
        if step % 100 == 0 {
            log::info!("step {step}/{}: mean loss {:.5}", tc.steps, window / 100.0);
            window = 0.0;
        }
        if tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && step < tc.steps {
            trace.flush().map_err(|e| Error::io(&trace_path, e))?;
            save(&model, step)?;
        }
    }
    trace.flush().map_err(|e| Error::io(&trace_path, e))?;
    save(&model, tc.steps)?;
    Ok(TrainSummary {
        steps: tc.steps,
        checkpoint: ckpt_path,
        trace: trace_path,
        final_loss,
    })
}

/// Keeps the trace of the latest forward pass.
struct Tracing<'a> {
    model: &'a DenoiserModel<f32>,
    last: RefCell<Option<ForwardTrace<f32>>>,
}

impl NoisePredictor<f32> for Tracing<'_> {
    fn predict_eps(
        &self,
        tape: &mut Tape<f32>,
        x_t: Var,
        x_lq: Var,
        t: &[usize],
        priors: &[CharSequence],
    ) -> Result<Var> {
        let (out, trace) = self.model.forward(tape, x_t, x_lq, t, priors)?;
        *self.last.borrow_mut() = Some(trace);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct RestoreOptions {
    pub checkpoint: PathBuf,
    /// A split manifest (`.jsonl`, restoring every record's low-quality
    /// image) or a single PGM/PPM image.
    pub input: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to the sampler named in the checkpoint's config.
    pub mode: Option<SamplerMode>,
    pub seed: u64,
    /// Write one attention heatmap per prior under `out_dir/attn`.
    pub dump_attn: bool,
    /// When given, must match the checkpoint.
    pub prior_mode: Option<PriorMode>,
}

/// Seed of one sample's sampler chain; independent of batch composition.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, crc32fast::hash(id.as_bytes()) as u64)
}

fn heatmap(attn: &[f32], fw: usize, fh: usize, w: usize, h: usize) -> Image {
    let peak = attn.iter().fold(0.0f32, |a, &v| a.max(v));
    let scale = if peak > 0.0 { 255.0 / peak as f64 } else { 0.0 };
    let mut img = Image::filled(w, h, 1, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = attn[(y * fh / h) * fw + x * fw / w] as f64 * scale;
            img.set(0, y, x, v);
        }
    }
    img
}

/// Restores every input with the checkpointed model. Returns the written
/// image paths in input order.
pub fn cmd_restore(opts: &RestoreOptions) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::<f32>::load(&opts.checkpoint)?;
    let cfg = ckpt.config;
    if let Some(pm) = opts.prior_mode {
        if pm != cfg.model.prior_mode {
            return Err(Error::config(
                "prior_mode",
                format!(
                    "requested {} but the checkpoint was trained with {}",
                    pm.name(),
                    cfg.model.prior_mode.name()
                ),
            ));
        }
    }
    let schedule = cfg.schedule.build()?;
    let style = &cfg.plates.style;
    let model = DenoiserModel::from_store(cfg.model.clone(), ckpt.params, style.max_chars, schedule.timesteps())?;
    let extractor = extractor_for(&cfg)?;
    let mode = opts.mode.unwrap_or(cfg.schedule.sampler);

    let examples = if opts.input.extension().is_some_and(|e| e == "jsonl") {
        let m = Manifest::read(&opts.input)?;
        load_examples(&cfg, &opts.input, &m, &extractor, false)?
    } else {
        if extractor.mode == SegmentMode::Oracle && cfg.model.prior_mode.uses_text() {
            return Err(Error::config(
                "priors.segmenter",
                "oracle segmentation needs a manifest with boxes",
            ));
        }
        let lq = Image::read(&opts.input)?;
        let id = opts
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let prior = if cfg.model.prior_mode.uses_text() {
            extract_prior(&extractor, &lq, None, style.max_chars)?
        } else {
            CharSequence::default()
        };
        vec![Example {
            id,
            x0: None,
            lq: lq.to_model(),
            prior,
        }]
    };

    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let attn_dir = opts.out_dir.join("attn");
    if opts.dump_attn {
        fs::create_dir_all(&attn_dir).map_err(|e| Error::io(&attn_dir, e))?;
    }
    let tracer = Tracing {
        model: &model,
        last: RefCell::new(None),
    };
    let mut written = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(cfg.train.batch) {
        let lq = Tensor::stack(&chunk.iter().map(|e| e.lq.clone()).collect::<Vec<_>>())?;
        let priors: Vec<CharSequence> = if cfg.model.prior_mode.uses_text() {
            chunk.iter().map(|e| e.prior.clone()).collect()
        } else {
            Vec::new()
        };
        let seeds: Vec<u64> = chunk.iter().map(|e| sample_seed(opts.seed, &e.id)).collect();
        let out = restore_with(&tracer, &schedule, &lq, &priors, mode, &seeds, &mut |_, _| {})?;
        let trace = tracer.last.borrow_mut().take();
        for (b, ex) in chunk.iter().enumerate() {
            let img = Image::from_model(&out.select(b)?)?;
            let path = restored_path(&opts.out_dir, &ex.id, img.channels());
            img.write(&path)?;
            written.push(path);
            if !opts.dump_attn {
                continue;
            }
            let Some(Some(attn)) = trace.as_ref().and_then(|t| t.attention.get(b)) else {
                continue;
            };
            let (fw, fh) = cfg.model.mid_size(img.width(), img.height());
            for (i, row) in attn.data().chunks(fw * fh).enumerate() {
                heatmap(row, fw, fh, img.width(), img.height())
                    .write(&attn_dir.join(format!("{}_{i:02}.pgm", ex.id)))?;
            }
        }
        log::info!("restored {}/{}", written.len(), examples.len());
    }
    Ok(written)
}

/// Scores `restored_dir` against a manifest, writing the JSONL report.
pub fn cmd_evaluate(cfg: &RunConfig, manifest: &Path, restored_dir: &Path, report: &Path) -> Result<MetricReport> {
    let m = Manifest::read(manifest)?;
    let extractor = PriorExtractor::new(&cfg.plates.style, SegmentMode::Projection)?;
    let r = evaluate_run(manifest, &m, restored_dir, &extractor);
    r.write(report)?;
    Ok(r)
}

/// One line of the ablation table; `seed` is `None` on seed-averaged rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub metrics: Option<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// Per-seed rows, variants in table order within each seed.
    pub runs: Vec<AblationRow>,
    /// One seed-averaged row per variant.
    pub means: Vec<AblationRow>,
}

impl AblationReport {
    pub fn mean(&self, mode: PriorMode) -> Option<&Aggregate> {
        self.means.iter().find(|r| r.variant == mode.name())?.metrics.as_ref()
    }

    pub fn run(&self, mode: PriorMode, seed: u64) -> Option<&Aggregate> {
        self.runs
            .iter()
            .find(|r| r.variant == mode.name() && r.seed == Some(seed))?
            .metrics
            .as_ref()
    }

    pub fn table(&self) -> String {
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let mut out = format!(
            "{:<12} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
            "variant", "seed", "cer", "acc", "psnr", "ssim"
        );
        for r in self.runs.iter().chain(&self.means) {
            let seed = r.seed.map_or("mean".to_string(), |s| s.to_string());
            match (&r.metrics, &r.error) {
                (Some(a), _) => out.push_str(&format!(
                    "{:<12} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
                    r.variant,
                    seed,
                    f(a.mean_cer, 4),
                    f(a.lpr_accuracy, 3),
                    f(a.mean_psnr, 2),
                    f(a.mean_ssim, 4)
                )),
                (None, e) => out.push_str(&format!(
                    "{:<12} {:>6} failed: {}\n",
                    r.variant,
                    seed,
                    e.as_deref().unwrap_or("unknown")
                )),
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.runs
            .iter()
            .chain(&self.means)
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .collect()
    }
}

fn ablation_run(cfg: &RunConfig, data_dir: &Path, run_dir: &Path, seed: u64) -> Result<Aggregate> {
    let summary = cmd_train(cfg, data_dir, run_dir)?;
    let test = manifest_path(data_dir, "test");
    let restored = run_dir.join("restored");
    cmd_restore(&RestoreOptions {
        checkpoint: summary.checkpoint,
        input: test.clone(),
        out_dir: restored.clone(),
        mode: None,
        seed,
        dump_attn: false,
        prior_mode: Some(cfg.model.prior_mode),
    })?;
    let report = cmd_evaluate(cfg, &test, &restored, &run_dir.join("report.jsonl"))?;
    if !report.errors.is_empty() {
        return Err(Error::invalid(
            "ablate",
            format!("{} samples failed to evaluate", report.errors.len()),
        ));
    }
    Ok(report.aggregate)
}

/// Trains, restores and scores the four prior variants for every seed on
/// one shared dataset under `work_dir`, then writes `ablation.jsonl` and
/// `ablation.txt`. A failed run becomes a failed row.
pub fn cmd_ablate(cfg: &RunConfig, seeds: &[u64], work_dir: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let data_dir = work_dir.join("data");
    cmd_gen_dataset(cfg, &data_dir)?;
    cmd_degrade(cfg, &data_dir)?;
    let jobs: Vec<(u64, PriorMode)> = seeds.iter().flat_map(|&s| PriorMode::ALL.map(|m| (s, m))).collect();
    let runs: Vec<AblationRow> = jobs
        .par_iter()
        .map(|&(seed, mode)| {
            let mut c = cfg.clone();
            c.model.prior_mode = mode;
            c.train.seed = seed;
            let run_dir = work_dir.join(format!("seed{seed}")).join(mode.name());
            let res = ablation_run(&c, &data_dir, &run_dir, seed);
            if let Err(e) = &res {
                log::error!("{} seed {seed}: {e}", mode.name());
            }
            AblationRow {
                variant: mode.name().to_string(),
                seed: Some(seed),
                error: res.as_ref().err().map(|e| e.to_string()),
                metrics: res.ok(),
            }
        })
        .collect();
    let means = PriorMode::ALL
        .iter()
        .map(|m| {
            let ok: Vec<&Aggregate> = runs
                .iter()
                .filter(|r| r.variant == m.name())
                .filter_map(|r| r.metrics.as_ref())
                .collect();
            let avg = |f: fn(&Aggregate) -> Option<f64>| {
                let v: Vec<f64> = ok.iter().filter_map(|a| f(a)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            let metrics = (!ok.is_empty()).then(|| Aggregate {
                count: ok.iter().map(|a| a.count).sum(),
                errors: ok.iter().map(|a| a.errors).sum(),
                mean_psnr: avg(|a| a.mean_psnr),
                mean_ssim: avg(|a| a.mean_ssim),
                mean_cer: avg(|a| a.mean_cer),
                lpr_accuracy: avg(|a| a.lpr_accuracy),
            });
            AblationRow {
                variant: m.name().to_string(),
                seed: None,
                error: metrics.is_none().then(|| "every seed failed".to_string()),
                metrics,
            }
        })
        .collect();
    let report = AblationReport { runs, means };
    let jsonl = work_dir.join("ablation.jsonl");
    fs::write(&jsonl, report.to_jsonl()).map_err(|e| Error::io(&jsonl, e))?;
    let txt = work_dir.join("ablation.txt");
    fs::write(&txt, report.table()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}
