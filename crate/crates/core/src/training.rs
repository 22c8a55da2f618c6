//! Reverse-KL training of a transport map against an action.

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Action;
use crate::metrics;
use crate::nn::{clip_global_norm, AdamW, AdamWConfig, CosineSchedule};
use crate::transport::{base_logdensity, MapOutput, TriangularMap};

pub const TRAIN_CSV_HEADER: &str = "epoch,loss,lr,ess";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub optimizer: AdamWConfig,
    pub clip_norm: f64,
    /// ESS is evaluated every `ess_every` epochs and after the last one; 0 disables it.
    pub ess_every: usize,
    pub ess_batch: usize,
    /// Checkpoint cadence in epochs for callers that persist the map; 0 disables it.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            batch: 256,
            lr: 1e-3,
            lr_min: 1e-6,
            optimizer: AdamWConfig::default(),
            clip_norm: 10.0,
            ess_every: 50,
            ess_batch: 1024,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

/// Loss of one batch with the cotangents needed by [`TriangularMap::gradient`].
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub output: MapOutput,
    pub dphi: Array2<f64>,
    pub dlogdet: Array1<f64>,
}

/// `mean_b (S[T(z_b)] − logdet_b)` with its cotangents `∇S / B` and `−1 / B`.
pub fn reverse_kl_loss<A: Action + ?Sized>(map: &TriangularMap, action: &A, z: ArrayView2<f64>) -> Result<LossEval> {
    let output = map.forward(z)?;
    let b = z.nrows() as f64;
    let mut dphi = Array2::zeros(output.phi.dim());
    let mut total = 0.0;
    for (i, (phi, mut d)) in output.phi.outer_iter().zip(dphi.outer_iter_mut()).enumerate() {
        let phi = phi.as_slice().expect("standard layout");
        let d = d.as_slice_mut().expect("standard layout");
        total += action.action(phi) - output.logdet[i];
        action.gradient(phi, d);
        d.iter_mut().for_each(|v| *v /= b);
    }
    let dlogdet = Array1::from_elem(z.nrows(), -1.0 / b);
    Ok(LossEval {
        loss: total / b,
        output,
        dphi,
        dlogdet,
    })
}

/// `ln w' = −S[φ] − ln p_Z(z) + logdet` per batch row.
pub fn log_weights<A: Action + ?Sized>(action: &A, z: ArrayView2<f64>, out: &MapOutput) -> Vec<f64> {
    out.phi
        .outer_iter()
        .zip(z.outer_iter())
        .zip(&out.logdet)
        .map(|((phi, zb), &ld)| -action.action(phi.as_slice().expect("standard layout")) - base_logdensity(zb) + ld)
        .collect()
}

/// ESS of the map as an importance sampler on a fixed base batch.
pub fn evaluate_ess<A: Action + ?Sized>(map: &TriangularMap, action: &A, z: ArrayView2<f64>) -> Result<f64> {
    let out = map.forward(z)?;
    Ok(metrics::ess(&log_weights(action, z, &out)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub ess: Option<f64>,
}

impl EpochRow {
    pub fn csv_line(&self) -> String {
        let ess = self.ess.map(|e| e.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.epoch, self.loss, self.lr, ess)
    }
}

/// Per-epoch history; epochs are numbered from 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainRecord {
    /// ESS of the map before the first update.
    pub initial_ess: Option<f64>,
    pub rows: Vec<EpochRow>,
}

impl TrainRecord {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAIN_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    /// ESS at the last evaluated epoch.
    pub fn final_ess(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.ess)
    }
}

fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Trains `map` in place. `on_epoch` sees every finished epoch with the updated map.
///
/// On divergence the map keeps the parameters of the last successful epoch.
pub fn train_with<A, F>(
    map: &mut TriangularMap,
    action: &A,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainRecord>
where
    A: Action + ?Sized,
    F: FnMut(&EpochRow, &TriangularMap) -> Result<()>,
{
    if config.batch == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let n = map.n_sites();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed);
    eval_rng.set_stream(1);
    let eval_z = (config.ess_every > 0).then(|| standard_normal(&mut eval_rng, config.ess_batch, n));
    let diverged = |epoch| Error::Diverged {
        epoch,
        seed: config.seed,
    };

    let mut record = TrainRecord::default();
    if let Some(z) = &eval_z {
        record.initial_ess = Some(evaluate_ess(map, action, z.view()).map_err(|_| diverged(0))?);
    }
    let schedule = CosineSchedule::new(config.lr, config.lr_min, config.epochs);
    let mut opt = AdamW::new(map.n_params(), config.optimizer);
    for epoch in 1..=config.epochs {
        let lr = schedule.lr(epoch - 1);
        let z = standard_normal(&mut rng, config.batch, n);
        let eval = reverse_kl_loss(map, action, z.view()).map_err(|_| diverged(epoch))?;
        if !eval.loss.is_finite() {
            return Err(diverged(epoch));
        }
        let mut grad = map
            .gradient(z.view(), &eval.output, eval.dphi.view(), eval.dlogdet.view())
            .map_err(|_| diverged(epoch))?;
        clip_global_norm(&mut grad, config.clip_norm);
        let mut next = map.params().to_vec();
        opt.step(&mut next, &grad, lr).map_err(|_| diverged(epoch))?;
        map.params_mut().copy_from_slice(&next);

        let evaluate = config.ess_every > 0 && (epoch % config.ess_every == 0 || epoch == config.epochs);
        let ess = match (&eval_z, evaluate) {
            (Some(z), true) => Some(evaluate_ess(map, action, z.view()).map_err(|_| diverged(epoch))?),
            _ => None,
        };
        let row = EpochRow {
            epoch,
            loss: eval.loss,
            lr,
            ess,
        };
        on_epoch(&row, map)?;
        record.rows.push(row);
    }
    Ok(record)
}

pub fn train<A: Action + ?Sized>(map: &mut TriangularMap, action: &A, config: &TrainConfig) -> Result<TrainRecord> {
    train_with(map, action, config, |_, _| Ok(()))
}
