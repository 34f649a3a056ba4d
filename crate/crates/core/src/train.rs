//! Adam with a cosine learning-rate schedule, a seeded training loop and
//! checkpoints that carry their run config.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::config::{OptimConfig, RunConfig, ScheduleConfig};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::loss::{silog_loss, LossConfig};
use crate::net::DepthNet;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Learning rate for optimizer step `step` of `total`: `lr_start` at the
/// first step, `lr_end` at the last.
pub fn lr_at(s: &ScheduleConfig, step: usize, total: usize) -> f64 {
    if !s.cosine || total <= 1 {
        return s.lr_start;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    s.lr_end + 0.5 * (s.lr_start - s.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: OptimConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update. `grads` is indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::config(format!("adam: {} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.t += 1;
        let OptimConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = store.get_mut(id).data_mut();
            for (j, &gj) in grads[i].data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean silog loss over the batch, measured before the update.
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: DepthNet,
    /// Weights after the last step.
    pub params: ParamStore,
    /// Weights at the end of the epoch with the lowest mean loss.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub curve: Vec<StepRecord>,
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    /// Writes `final.ecdw`, `best.ecdw`, a `.cfg` sidecar for each and
    /// `loss_curve.csv` into `dir`.
    pub fn save(&self, cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, store) in [("final", &self.params), ("best", &self.best)] {
            let path = dir.join(format!("{name}.ecdw"));
            save_checkpoint(&path, cfg, store)?;
            written.push(path);
        }
        let curve = dir.join("loss_curve.csv");
        write_curve(&curve, &self.curve)?;
        written.push(curve);
        Ok(written)
    }
}

pub fn write_curve(path: &Path, curve: &[StepRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,epoch,lr,loss")?;
    for r in curve {
        writeln!(f, "{},{},{:e},{:e}", r.step, r.epoch, r.lr, r.loss)?;
    }
    f.flush()?;
    Ok(())
}

/// Sidecar holding the run config next to a weight file.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, store: &ParamStore) -> Result<()> {
    store.save(path)?;
    std::fs::write(sidecar_path(path), cfg.to_kv())?;
    Ok(())
}

/// Rebuilds the network from the sidecar config and loads its weights.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, DepthNet, ParamStore)> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::config(format!("checkpoint: missing config sidecar {}", side.display())));
    }
    let cfg = RunConfig::from_file(&side, "desk")?;
    cfg.validate()?;
    let mut store = ParamStore::new();
    let net = DepthNet::new(&cfg.model, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load(path)?;
    Ok((cfg, net, store))
}

/// Optimizer steps the run will take.
pub fn total_steps(cfg: &RunConfig, n_samples: usize) -> usize {
    let per_epoch = n_samples.div_ceil(cfg.batch_size);
    let all = cfg.epochs * per_epoch;
    if cfg.max_steps > 0 {
        all.min(cfg.max_steps)
    } else {
        all
    }
}

fn check_extents(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let m = &cfg.model;
    for (id, s) in data.ids.iter().zip(&data.samples) {
        if (s.height(), s.width()) != (m.input_h, m.input_w) {
            return Err(Error::config(format!(
                "model.input_h/input_w: sample {id} is {}×{}, model expects {}×{}",
                s.height(),
                s.width(),
                m.input_h,
                m.input_w
            )));
        }
    }
    Ok(())
}

/// The network and the weights [`train`] starts from.
pub fn init_model(cfg: &RunConfig) -> Result<(DepthNet, ParamStore)> {
    let mut params = ParamStore::new();
    let net = DepthNet::new(&cfg.model, &mut params, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    Ok((net, params))
}

/// Trains from scratch. `on_step` sees every record as it is produced.
///
/// Initialization, shuffling and augmentation draw from independent ChaCha8
/// streams keyed by `cfg.seed`, so a seed fixes the whole run.
pub fn train(cfg: &RunConfig, data: &Dataset, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("data.train_split: no samples".to_string()));
    }
    check_extents(cfg, data)?;

    let (net, mut params) = init_model(cfg)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);

    let mut adam = Adam::new(&params, cfg.optim);
    let total = total_steps(cfg, data.len());

    let mut curve = Vec::with_capacity(total);
    let mut epoch_losses = Vec::new();
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            if step == total {
                break 'epochs;
            }
            let lr = lr_at(&cfg.schedule, step, total);
            let (loss, grads) = batch_gradient(cfg, &net, &params, data, batch, &mut aug_rng, step)?;
            adam.step(&mut params, &grads, lr)?;
            let rec = StepRecord { step, epoch, lr, loss };
            on_step(&rec);
            curve.push(rec);
            sum += loss;
            batches += 1;
            step += 1;
        }
        let mean = sum / batches as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
        if mean < best_loss {
            best_loss = mean;
            best_epoch = epoch;
            best = params.clone();
        }
    }
    // A step budget can end mid-epoch; that partial epoch still counts.
    if epoch_losses.len() < curve.last().map_or(0, |r| r.epoch + 1) {
        let last = curve.last().unwrap().epoch;
        let tail: Vec<f64> = curve.iter().filter(|r| r.epoch == last).map(|r| r.loss).collect();
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        epoch_losses.push(mean);
        if mean < best_loss {
            best_epoch = last;
            best = params.clone();
        }
    }
    Ok(TrainOutcome { net, params, best, best_epoch, curve, epoch_losses })
}

/// Mean silog over every sample of `data` as stored, without jitter.
pub fn dataset_loss(net: &DepthNet, params: &ParamStore, data: &Dataset, cfg: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in &data.samples {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g)?;
        let x = g.constant(s.rgb.clone())?;
        let out = net.forward(&mut g, &p, x)?;
        let l = silog_loss(&mut g, out.depth, &s.depth, &s.mask, cfg)?;
        total += g.value(l).item();
    }
    Ok(total / data.len() as f64)
}

/// Mean loss and mean gradient over one batch. Each sample gets its own
/// graph so memory stays at one sample's worth.
fn batch_gradient(
    cfg: &RunConfig,
    net: &DepthNet,
    params: &ParamStore,
    data: &Dataset,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let diverged = |loss: f64| Error::Diverged { step, loss };
    let mut grads: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut total = 0.0;
    for &i in batch {
        let s = augment(&data.samples[i], &cfg.augment, rng);
        let mut g = Graph::new();
        let p = params.bind(&mut g)?;
        let forward = (|| {
            let x = g.constant(s.rgb.clone())?;
            let out = net.forward(&mut g, &p, x)?;
            silog_loss(&mut g, out.depth, &s.depth, &s.mask, &cfg.loss)
        })();
        let loss = match forward {
            Ok(v) => v,
            Err(Error::Numeric { .. }) => return Err(diverged(f64::NAN)),
            // gt is positive wherever the mask is set, so this is a
            // prediction that collapsed to zero: ln 0
            Err(Error::Domain(_)) => return Err(diverged(f64::INFINITY)),
            Err(e) => return Err(e),
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(diverged(value));
        }
        match g.backward(loss) {
            Err(Error::Numeric { .. }) => return Err(diverged(value)),
            r => r?,
        }
        total += value;
        for (acc, &v) in grads.iter_mut().zip(p.vars()) {
            if let Some(gv) = g.grad(v) {
                if !gv.is_finite() {
                    return Err(diverged(value));
                }
                for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                    *a += b;
                }
            }
        }
    }
    let n = batch.len() as f64;
    for t in &mut grads {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((total / n, grads))
}
