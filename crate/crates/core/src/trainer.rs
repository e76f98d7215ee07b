//! The training loop: shuffled user batches, Adam steps, validation-based
//! early stopping, loss logging and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataio::{IdMap, SplitDataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricReport, Stage};
use crate::model::{draw_samples, estimate_step_mb, forward_batch, init_model_params, ForwardOptions, Graphs, Snapshot};
use crate::objectives::LossBundle;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::seq_encoder::ITEM_EMBEDDINGS;
use crate::tape::Tape;

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const LAST_GOOD: &str = "checkpoint_last_good.json";
pub const METRICS: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_l_rec: f64,
    pub valid_ndcg10: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub params: ParamStore,
    pub epochs: Vec<EpochRecord>,
    pub losses: Vec<LossBundle>,
    pub best_epoch: usize,
    pub valid: MetricReport,
    pub test: MetricReport,
    pub steps_per_epoch: usize,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsFile<'a> {
    pub best_epoch: usize,
    pub steps_per_epoch: usize,
    pub wall_clock_secs: f64,
    pub epochs: &'a [EpochRecord],
    pub valid: &'a MetricReport,
    pub test: &'a MetricReport,
}

/// Users with at least two training items contribute one sample per epoch.
pub fn trainable_users(split: &SplitDataset) -> usize {
    split.train_sequences.iter().filter(|s| s.items.len() >= 2).count()
}

pub fn steps_per_epoch(split: &SplitDataset, batch_size: usize) -> usize {
    trainable_users(split).div_ceil(batch_size)
}

fn zero_pad_rows(grads: &mut ParamStore) {
    for (name, g) in grads.iter_mut() {
        if name == ITEM_EMBEDDINGS || name == crate::model::GRAPH_EMBEDDINGS {
            g.row_mut(0).fill(0.0);
        }
    }
}

struct Outputs {
    dir: PathBuf,
    loss_log: BufWriter<File>,
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOSS_LOG);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), loss_log: BufWriter::new(file) })
    }

    fn log(&mut self, step: usize, bundle: &LossBundle) -> Result<()> {
        writeln!(self.loss_log, "{}", bundle.log_line(step)).map_err(|e| Error::io(self.dir.join(LOSS_LOG), e))
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Run one epoch of steps in `order`; returns the per-step losses.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    config: &TrainConfig,
    split: &SplitDataset,
    graphs: &Graphs,
    params: &mut ParamStore,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
    global_step: &mut usize,
    mut on_step: impl FnMut(usize, &LossBundle, &crate::conformity::ConformityWeights) -> Result<()>,
) -> Result<Vec<LossBundle>> {
    let mut samples = draw_samples(split, config.prefix_augment, rng);
    samples.shuffle(rng);
    let mut losses = Vec::new();
    for chunk in samples.chunks(config.batch_size) {
        *global_step += 1;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let options = ForwardOptions { dropout: true, weight_override: None };
        let out = forward_batch(&mut tape, &bound, config, graphs, chunk, rng, options).map_err(|e| match e {
            Error::NonFinite { diagnostics, .. } => Error::NonFinite { step: *global_step, diagnostics },
            other => other,
        })?;
        let grads = tape.backward(out.total);
        let mut g = bound.collect_grads(&grads, params);
        if let Some((name, _)) = g.iter().find(|(_, m)| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { step: *global_step, diagnostics: format!("gradient of {name}") });
        }
        zero_pad_rows(&mut g);
        adam.step(params, &g);
        on_step(*global_step, &out.bundle, &out.conformity)?;
        losses.push(out.bundle);
    }
    Ok(losses)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

/// Train from scratch. When `out_dir` is given, the loss log, checkpoints,
/// metrics and (with `diagnostics`) conformity CSVs are written there.
pub fn train(config: &TrainConfig, split: &SplitDataset, id_map: &IdMap, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let estimate = estimate_step_mb(config, split.catalog_size);
    if estimate > config.memory_limit_mb as f64 {
        return Err(Error::TooLarge { estimated_mb: estimate.ceil() as u64, limit_mb: config.memory_limit_mb as u64 });
    }
    if trainable_users(split) == 0 {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let graphs = Graphs::build(split, config.top_k)?;
    let mut params = init_model_params(config, split.catalog_size, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = Adam::new(config.lr);
    let mut outputs = out_dir.map(Outputs::open).transpose()?;

    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut epochs = Vec::new();
    let mut all_losses = Vec::new();
    let mut stale = 0usize;
    let mut global_step = 0usize;
    let mut last_good = params.clone();

    for epoch in 1..=config.max_epochs {
        let mut conformity_csv = String::new();
        let result = run_epoch(config, split, &graphs, &mut params, &mut adam, &mut rng, &mut global_step, |step, bundle, weights| {
            if let Some(o) = outputs.as_mut() {
                o.log(step, bundle)?;
            }
            if config.diagnostics {
                let csv = weights.to_csv();
                let body = if conformity_csv.is_empty() { csv.as_str() } else { csv.split_once('\n').map_or("", |x| x.1) };
                conformity_csv.push_str(body);
            }
            Ok(())
        });
        let losses = match result {
            Ok(l) => l,
            Err(Error::NonFinite { step, diagnostics }) => {
                let mut diagnostics = diagnostics;
                if let Some(o) = outputs.as_ref() {
                    let ck = Checkpoint::new(config, &last_good, epoch - 1, best.0, id_map);
                    ck.save(&o.dir.join(LAST_GOOD))?;
                    diagnostics.push_str(&format!("; last good checkpoint at {}", o.dir.join(LAST_GOOD).display()));
                }
                return Err(Error::NonFinite { step, diagnostics });
            }
            Err(e) => return Err(e),
        };
        if let Some(o) = outputs.as_mut() {
            o.loss_log.flush().map_err(|e| Error::io(o.dir.join(LOSS_LOG), e))?;
            if config.diagnostics {
                o.write(&format!("conformity_epoch_{epoch}.csv"), &conformity_csv)?;
            }
        }
        last_good = params.clone();
        let snapshot = Snapshot::new(config, &params, &graphs)?;
        let valid = evaluate(&snapshot, split, Stage::Valid)?;
        let ndcg = valid.overall.ndcg_at(10);
        let record = EpochRecord {
            epoch,
            steps: losses.len(),
            mean_total: mean(losses.iter().map(|b| b.total)),
            mean_l_rec: mean(losses.iter().map(|b| b.l_rec)),
            valid_ndcg10: ndcg,
        };
        info!(
            "epoch {epoch}: loss {:.5} (rec {:.5}) valid NDCG@10 {:.5}",
            record.mean_total, record.mean_l_rec, ndcg
        );
        epochs.push(record);
        all_losses.extend(losses);
        if ndcg > best.0 {
            best = (ndcg, epoch, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                info!("early stop after epoch {epoch}; best epoch {}", best.1);
                break;
            }
        }
    }

    let (best_metric, best_epoch, best_params) = best;
    let snapshot = Snapshot::new(config, &best_params, &graphs)?;
    let valid = evaluate(&snapshot, split, Stage::Valid)?;
    let test = evaluate(&snapshot, split, Stage::Test)?;
    if valid.overall.ndcg_at(10) != best_metric {
        warn!("re-evaluated validation NDCG@10 differs from the recorded best");
    }
    let checkpoint = Checkpoint::new(config, &best_params, best_epoch, best_metric, id_map);
    let steps = steps_per_epoch(split, config.batch_size);
    let wall = start.elapsed().as_secs_f64();
    if let Some(o) = outputs.as_ref() {
        checkpoint.save(&o.dir.join(CHECKPOINT))?;
        let metrics = MetricsFile { best_epoch, steps_per_epoch: steps, wall_clock_secs: wall, epochs: &epochs, valid: &valid, test: &test };
        o.write(METRICS, &serde_json::to_string_pretty(&metrics)?)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        params: best_params,
        epochs,
        losses: all_losses,
        best_epoch,
        valid,
        test,
        steps_per_epoch: steps,
        wall_clock_secs: wall,
    })
}

/// Rebuild the scoring snapshot of a checkpoint against its dataset split.
pub fn restore(checkpoint: &Checkpoint, split: &SplitDataset) -> Result<Snapshot> {
    if checkpoint.catalog_size != split.catalog_size {
        return Err(Error::Checkpoint(format!(
            "checkpoint catalog has {} items, dataset has {}",
            checkpoint.catalog_size, split.catalog_size
        )));
    }
    let graphs = Graphs::build(split, checkpoint.config.top_k)?;
    Snapshot::new(&checkpoint.config, &checkpoint.params()?, &graphs)
}
