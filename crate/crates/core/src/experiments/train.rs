use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::datasets::DatasetBundle;
use crate::diffcore::{
    adam_step, read_checkpoint, write_checkpoint, AdamState, Checkpoint, GumbelMode, Tape, TAU_MIN,
};
use crate::error::{Error, Result};
use crate::grammar::ConceptString;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::Vae;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FAILURE_FILE: &str = "failure.json";

const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_EVAL: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Mean ELBO terms over a set of strings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboSummary {
    pub loss: f64,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
}

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub digest: String,
    pub step: u64,
    /// Mean −ELBO of the most recent minibatch (the first batch at step 0).
    pub batch_loss: f64,
    /// ELBO terms over the whole train split with one straight-through sample.
    pub train: ElboSummary,
    pub tau: f64,
    pub metrics: MetricsReport,
    pub param_count: usize,
}

/// Wall-clock for one record, kept apart from the records so that those
/// stay bitwise reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub step: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    StoppedEarly,
}

/// Final state of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub digest: String,
    pub status: RunStatus,
    pub steps_run: u64,
    pub latent_bits: usize,
    pub alpha: f64,
    pub seed: u64,
    pub param_count: usize,
    pub final_record: RunRecord,
}

/// Diagnostic written when a run aborts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub digest: String,
    pub step: u64,
    pub error: String,
    pub exit_code: i32,
    pub non_finite_param: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Vae,
    pub dataset: DatasetBundle,
    pub records: Vec<RunRecord>,
    pub timings: Vec<Timing>,
    pub summary: RunSummary,
}

/// Receives records as they are produced.
pub trait RecordSink {
    fn record(&mut self, record: &RunRecord, timing: &Timing, model: &Vae) -> Result<()>;
}

impl RecordSink for () {
    fn record(&mut self, _: &RunRecord, _: &Timing, _: &Vae) -> Result<()> {
        Ok(())
    }
}

/// Epoch-shuffled minibatches.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, size: usize, rng: ChaCha8Rng) -> Self {
        Batches {
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
            rng,
        }
    }

    fn next(&mut self) -> &[usize] {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        b
    }
}

/// Mean ELBO terms over `strings` with one straight-through sample each.
pub fn elbo_summary(
    model: &Vae,
    strings: &[ConceptString],
    rng: &mut ChaCha8Rng,
) -> Result<ElboSummary> {
    let mut acc = [0.0; 3];
    for chunk in strings.chunks(2048) {
        let s = model.elbo_loss(chunk, rng)?;
        acc[0] += s.elbo.iter().sum::<f64>();
        acc[1] += s.recon.iter().sum::<f64>();
        acc[2] += s.kl.iter().sum::<f64>();
    }
    let n = strings.len() as f64;
    Ok(ElboSummary {
        loss: -acc[0] / n,
        elbo: acc[0] / n,
        recon: acc[1] / n,
        kl: acc[2] / n,
    })
}

fn one_step(
    model: &mut Vae,
    adam: &mut AdamState,
    batch: &[ConceptString],
    noise_rng: &mut ChaCha8Rng,
    mode: GumbelMode,
) -> Result<f64> {
    let noise = model.sample_noise(batch.len(), noise_rng);
    let (loss, grads) = {
        let mut tape = Tape::new(&model.params);
        let vars = model.elbo_tape(&mut tape, batch, &noise, mode)?;
        let loss = tape.scalar(vars.loss);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss is {loss}")));
        }
        (loss, tape.backward(vars.loss)?)
    };
    model.params.zero_grad();
    model.params.accumulate(&grads)?;
    adam_step(&mut model.params, adam)?;
    let tau = model.tau_id();
    let t = &mut model.params.get_mut(tau).value[[0, 0]];
    *t = t.max(TAU_MIN);
    if let Some(name) = model.params.first_non_finite() {
        return Err(Error::Numerical(format!(
            "parameter {name} is not finite after the update"
        )));
    }
    Ok(loss)
}

/// Failure of a run together with the step it happened at.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub record: FailureRecord,
}

/// Trains one configuration in memory. Records are produced at steps
/// `0, c, 2c, …` below `steps` and once more at the end.
pub fn train_run<S: RecordSink + ?Sized>(
    cfg: &RunConfig,
    sink: &mut S,
) -> std::result::Result<RunOutput, RunFailure> {
    let digest = cfg.digest();
    let fail = |step: u64, error: Error, model: Option<&Vae>| RunFailure {
        record: FailureRecord {
            digest: digest.clone(),
            step,
            error: error.to_string(),
            exit_code: error.exit_code(),
            non_finite_param: model.and_then(|m| m.params.first_non_finite().map(str::to_string)),
        },
        error,
    };
    cfg.validate().map_err(|e| fail(0, e, None))?;
    let dataset = cfg
        .split
        .build(&cfg.grammar)
        .map_err(|e| fail(0, e, None))?;
    if dataset.train.is_empty() {
        return Err(fail(
            0,
            Error::InfeasibleSplit("empty train split".into()),
            None,
        ));
    }
    let mut model = Vae::init(&cfg.grammar, &cfg.model, &mut stream(cfg.seed, STREAM_INIT))
        .map_err(|e| fail(0, e, None))?;
    let param_count = cfg.model.param_count(&cfg.grammar).total;
    let mut adam = AdamState::new(cfg.optimizer.adam, &model.params);
    let mut batches = Batches::new(
        dataset.train.len(),
        cfg.optimizer.batch_size,
        stream(cfg.seed, STREAM_BATCH),
    );
    let mut noise_rng = stream(cfg.seed, STREAM_NOISE);
    let mut eval_rng = stream(cfg.seed, STREAM_EVAL);
    let start = Instant::now();

    let mut records = Vec::new();
    let mut timings = Vec::new();
    let mut last_loss = f64::NAN;
    let mut step = 0u64;
    let mut status = RunStatus::Completed;
    loop {
        let at_end = step == cfg.steps;
        let batch: Vec<ConceptString> = if at_end {
            Vec::new()
        } else {
            batches
                .next()
                .iter()
                .map(|&i| dataset.train[i].clone())
                .collect()
        };
        if step == 0 {
            let noise = model.sample_noise(batch.len(), &mut noise_rng.clone());
            let mut tape = Tape::new(&model.params);
            let v = model
                .elbo_tape(&mut tape, &batch, &noise, cfg.optimizer.gumbel)
                .map_err(|e| fail(0, e, Some(&model)))?;
            last_loss = tape.scalar(v.loss);
        }
        if at_end || step.is_multiple_of(cfg.eval_every) {
            let rec = (|| -> Result<RunRecord> {
                let train = elbo_summary(&model, &dataset.train, &mut eval_rng)?;
                let metrics = evaluate(
                    &model,
                    &cfg.grammar,
                    &dataset.train,
                    &dataset.val,
                    &dataset.test,
                    &cfg.eval,
                    &mut eval_rng,
                )?;
                Ok(RunRecord {
                    digest: digest.clone(),
                    step,
                    batch_loss: last_loss,
                    train,
                    tau: model.tau(),
                    metrics,
                    param_count,
                })
            })()
            .map_err(|e| fail(step, e, Some(&model)))?;
            let timing = Timing {
                step,
                seconds: start.elapsed().as_secs_f64(),
            };
            sink.record(&rec, &timing, &model)
                .map_err(|e| fail(step, e, Some(&model)))?;
            let done = at_end
                || cfg
                    .stop_at_train_accuracy
                    .is_some_and(|a| rec.metrics.train_accuracy >= a);
            records.push(rec);
            timings.push(timing);
            if done {
                if !at_end {
                    status = RunStatus::StoppedEarly;
                }
                break;
            }
        }
        last_loss = one_step(
            &mut model,
            &mut adam,
            &batch,
            &mut noise_rng,
            cfg.optimizer.gumbel,
        )
        .map_err(|e| fail(step, e, Some(&model)))?;
        step += 1;
    }

    let final_record = records.last().expect("at least one record").clone();
    let summary = RunSummary {
        digest,
        status,
        steps_run: step,
        latent_bits: cfg.model.latent_bits,
        alpha: cfg.model.alpha,
        seed: cfg.seed,
        param_count,
        final_record,
    };
    Ok(RunOutput {
        model,
        dataset,
        records,
        timings,
        summary,
    })
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_string(value).expect("record serializes");
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn checkpoint_of(model: &Vae, digest: &str) -> Checkpoint {
    Checkpoint {
        digest: digest.as_bytes().to_vec(),
        params: model.params.clone(),
    }
}

/// Writes records and timings as they arrive and checkpoints on cadence.
struct DirSink {
    dir: PathBuf,
    digest: String,
}

impl RecordSink for DirSink {
    fn record(&mut self, record: &RunRecord, timing: &Timing, model: &Vae) -> Result<()> {
        append_line(&self.dir.join(RECORDS_FILE), record)?;
        append_line(&self.dir.join(TIMING_FILE), timing)?;
        write_checkpoint(
            &self.dir.join(CHECKPOINT_FILE),
            &checkpoint_of(model, &self.digest),
        )
    }
}

/// Trains one configuration into `dir`: `config.toml`, `records.jsonl`,
/// `timing.jsonl`, `checkpoint.bin` and, on success, `summary.json`. On
/// failure `failure.json` holds the diagnostic. Existing run files in `dir`
/// are replaced.
pub fn train_to_dir(cfg: &RunConfig, dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for name in [
        RECORDS_FILE,
        TIMING_FILE,
        CHECKPOINT_FILE,
        SUMMARY_FILE,
        FAILURE_FILE,
    ] {
        let p = dir.join(name);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let mut sink = DirSink {
        dir: dir.to_path_buf(),
        digest: cfg.digest(),
    };
    match train_run(cfg, &mut sink) {
        Ok(out) => {
            write_json(&dir.join(SUMMARY_FILE), &out.summary)?;
            Ok(out)
        }
        Err(f) => {
            write_json(&dir.join(FAILURE_FILE), &f.record)?;
            Err(f.error)
        }
    }
}

/// Reads a run directory's records.
pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let path = dir.join(RECORDS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(f).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Restores the model of a finished run directory.
pub fn load_model(dir: &Path) -> Result<(RunConfig, Vae)> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let ckpt = read_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    if ckpt.digest != cfg.digest().as_bytes() {
        return Err(Error::Checkpoint(
            "checkpoint digest does not match config.toml".into(),
        ));
    }
    let model = Vae::from_params(&cfg.grammar, &cfg.model, ckpt.params)?;
    Ok((cfg, model))
}
