//! Training loop: seeded shuffling, mini-batch gradients, AdamW updates,
//! per-epoch validation, and optional early stopping on fine-resolution
//! validation error.
//!
//! A batch gradient is computed in two phases. Each tile gets its own
//! forward graph; the batch loss (mean coarse term plus the smoothness term
//! over pixels sampled across the whole batch) is then built over the tiles'
//! prediction maps as leaves. One backward pass over the loss graph yields a
//! cotangent per prediction map, and a seeded backward pass through each
//! tile's graph turns those into parameter gradients. This keeps the loss
//! wiring independent of the network and lets the smoothness term couple
//! pixels from different tiles.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::masked_mean_forward;
use crate::autodiff::Graph;
use crate::data::prep::{eval_pixel_set, EVAL_MIN_SOUNDINGS, EVAL_MIN_VALUE};
use crate::data::synth::stream;
use crate::data::{Dataset, SplitTag, Tile};
use crate::error::{Error, Result};
use crate::eval::{nrmse, train_label_mean};
use crate::losses::{build_similarity_matrix, sample_pixels, LossConfig, TileView};
use crate::model::{forward, model_graph, GradSet, ModelParams};
use crate::optim::{AdamWConfig, AdamWState};
use crate::scalar::Scalar;
use crate::tensor::{Mask, TensorBase};

/// Optimization hyperparameters and loop control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Tiles per optimizer step; clipped to the train-split size.
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Return the epoch with the lowest fine-validation error instead of the
    /// last one.
    pub early_stopping: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            early_stopping: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adamw().validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// What the optimizer minimizes.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// Coarse tile-mean loss plus the similarity-gated smoothness term; the
    /// only supervision available in deployment.
    Coarse(LossConfig),
    /// Mean squared error against fine observations on trusted pixels; the
    /// upper bound that coarse supervision is measured against.
    FineSupervised,
}

/// Metrics logged after each epoch. All values are finite by contract.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-tile coarse loss over the epoch's batches.
    pub train_coarse_loss: f64,
    /// NRMSE of predicted valid-pixel tile means against validation labels.
    pub val_coarse_nrmse: f64,
    /// NRMSE against fine observations on trusted validation pixels; the
    /// early-stopping signal.
    pub val_fine_nrmse: f64,
    /// NRMSE against the synthetic fine truth on all train pixels; a
    /// diagnostic only possible because the data is synthetic.
    pub train_fine_nrmse: f64,
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<S: Scalar> {
    /// The selected checkpoint: the best epoch under early stopping, the
    /// final epoch otherwise.
    pub params: ModelParams<S>,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
}

/// Gradients and logged values for one mini-batch at fixed parameters.
pub struct BatchStep<S: Scalar> {
    pub grads: GradSet<S>,
    /// Mean per-tile coarse loss, logged for both objectives.
    pub coarse_loss: f64,
    /// Value of the optimized objective.
    pub objective_value: f64,
    /// Tiles that contributed gradients; the fine objective skips tiles
    /// without trusted pixels.
    pub tiles_used: usize,
}

/// Compute one batch's gradients without touching the parameters.
pub fn batch_gradients<S: Scalar, R: rand::Rng + ?Sized>(
    params: &ModelParams<S>,
    tiles: &[&Tile<S>],
    objective: &Objective,
    rng: &mut R,
) -> Result<BatchStep<S>> {
    if tiles.is_empty() {
        return Err(Error::Shape { op: "batch_gradients", details: "empty batch".into() });
    }
    match objective {
        Objective::Coarse(loss) => coarse_batch(params, tiles, loss, rng),
        Objective::FineSupervised => fine_batch(params, tiles),
    }
}

fn coarse_batch<S: Scalar, R: rand::Rng + ?Sized>(
    params: &ModelParams<S>,
    tiles: &[&Tile<S>],
    loss: &LossConfig,
    rng: &mut R,
) -> Result<BatchStep<S>> {
    let b = tiles.len();

    // Phase 1: one forward graph per tile, kept alive for the seeded
    // backward pass.
    let mut graphs = Vec::with_capacity(b);
    let mut predictions: Vec<Vec<S>> = Vec::with_capacity(b);
    for tile in tiles {
        let mut g = Graph::new();
        let handles = model_graph(&mut g, params, tile.input_tensor()?)?;
        predictions.push(g.value(handles.output).data().to_vec());
        graphs.push((g, handles));
    }

    // Phase 2: the batch loss over the prediction maps as leaves.
    let mut lg = Graph::<S>::new();
    let mut leaves = Vec::with_capacity(b);
    let mut se_nodes = Vec::with_capacity(b);
    let mut coarse_sum = 0.0f64;
    for (tile, pred) in tiles.iter().zip(&predictions) {
        let plane =
            TensorBase::new(vec![1, tile.height(), tile.width()], pred.clone())?;
        let leaf = lg.leaf(plane);
        let mean = lg.masked_mean(leaf, Arc::new(tile.valid.clone()))?;
        let se = lg.square_error(mean, tile.coarse_label)?;
        coarse_sum += lg.value(se).item()?.to_f64c();
        leaves.push(leaf);
        se_nodes.push(se);
    }
    let inv_b = S::from_f64c(1.0 / b as f64);
    let coarse_mean = lg.affine_sum(&se_nodes, &vec![inv_b; b])?;

    let mut total = coarse_mean;
    if loss.lambda > 0.0 {
        let views: Vec<TileView<'_, S>> =
            tiles.iter().zip(&predictions).map(|(t, p)| t.view_with(p)).collect();
        let mut samples =
            sample_pixels(&views, &loss.reflectance_channels, loss.sample_size, rng)?;
        // Tile-major order lets per-tile gathers concatenate into the same
        // order the similarity matrix is built in.
        samples.sort_by_key(|s| (s.tile, s.pixel));
        if samples.len() >= 2 {
            let sim = Arc::new(build_similarity_matrix(&samples, S::from_f64c(loss.tau)));
            let mut gathers = Vec::new();
            let mut k = 0;
            for (t, leaf) in leaves.iter().enumerate() {
                let start = k;
                while k < samples.len() && samples[k].tile == t {
                    k += 1;
                }
                if k > start {
                    let idx: Vec<usize> = samples[start..k].iter().map(|s| s.pixel).collect();
                    gathers.push(lg.gather(*leaf, Arc::new(idx))?);
                }
            }
            let z = lg.concat_vec(&gathers)?;
            let smooth = lg.pairwise_smoothness(z, sim)?;
            total = lg.affine_sum(&[coarse_mean, smooth], &[S::one(), S::from_f64c(loss.lambda)])?;
        }
    }

    let objective_value = lg.value(total).item()?.to_f64c();

    // Phase 3: loss cotangents seed each tile graph's backward pass.
    lg.backward(total)?;
    let mut grads = GradSet::zeros_like(params);
    for (i, (g, handles)) in graphs.iter_mut().enumerate() {
        let Some(seed) = lg.grad(leaves[i]) else { continue };
        g.backward_seeded(handles.output, seed)?;
        accumulate_param_grads(&mut grads, g, &handles.params);
    }

    Ok(BatchStep { grads, coarse_loss: coarse_sum / b as f64, objective_value, tiles_used: b })
}

fn fine_batch<S: Scalar>(params: &ModelParams<S>, tiles: &[&Tile<S>]) -> Result<BatchStep<S>> {
    let min_value = S::from_f64c(EVAL_MIN_VALUE);
    let mut grads = GradSet::zeros_like(params);
    let mut used = 0usize;
    let mut loss_sum = 0.0f64;
    let mut coarse_sum = 0.0f64;
    let mut coarse_tiles = 0usize;
    for tile in tiles {
        let mut g = Graph::new();
        let handles = model_graph(&mut g, params, tile.input_tensor()?)?;

        if tile.valid.count() > 0 {
            let mean = masked_mean_forward(g.value(handles.output).data(), &tile.valid);
            let d = (tile.coarse_label - mean).to_f64c();
            coarse_sum += d * d;
            coarse_tiles += 1;
        }

        let trusted = eval_pixel_set(tile, EVAL_MIN_SOUNDINGS, min_value);
        if trusted.is_empty() {
            continue;
        }
        let mut bits = vec![false; tile.pixel_count()];
        for p in trusted {
            bits[p] = true;
        }
        let mask = Mask::new(tile.height(), tile.width(), bits)?;
        let target =
            TensorBase::new(vec![1, tile.height(), tile.width()], tile.fine_observed.clone())?;
        let mse = g.masked_mse(handles.output, target, Arc::new(mask))?;
        loss_sum += g.value(mse).item()?.to_f64c();
        g.backward(mse)?;
        accumulate_param_grads(&mut grads, &g, &handles.params);
        used += 1;
    }
    if used > 0 {
        grads.scale(S::from_f64c(1.0 / used as f64));
    }
    Ok(BatchStep {
        grads,
        coarse_loss: if coarse_tiles > 0 { coarse_sum / coarse_tiles as f64 } else { 0.0 },
        objective_value: if used > 0 { loss_sum / used as f64 } else { 0.0 },
        tiles_used: used,
    })
}

fn accumulate_param_grads<S: Scalar>(
    grads: &mut GradSet<S>,
    g: &Graph<S>,
    param_nodes: &[crate::autodiff::NodeId],
) {
    for (slot, node) in grads.by_entry.iter_mut().zip(param_nodes) {
        if let Some(gp) = g.grad(*node) {
            for (a, b) in slot.iter_mut().zip(gp) {
                *a += *b;
            }
        }
    }
}

/// Run the optimization loop and return the selected checkpoint plus the
/// full per-epoch log.
///
/// Each epoch draws a fresh shuffle and pixel-sampling stream from
/// `(seed, epoch)` so a run is reproducible bit for bit. Validation after
/// every epoch scores the current parameters on the validation split: the
/// coarse score compares predicted tile means against labels, the fine score
/// compares pixels against fine observations on trusted pixels (falling back
/// to all valid pixels when the split has no trusted ones and early stopping
/// is off). With early stopping the returned parameters are a snapshot from
/// the epoch with the lowest fine-validation NRMSE, earliest on ties.
pub fn train<S: Scalar>(
    initial: &ModelParams<S>,
    dataset: &Dataset<S>,
    objective: &Objective,
    config: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if let Objective::Coarse(loss) = objective {
        loss.validate(dataset.layout.total())?;
    }

    let train_idx = dataset.indices_in(SplitTag::Train);
    if train_idx.is_empty() {
        return Err(Error::Train("no train tiles".into()));
    }
    let train_mean = train_label_mean(dataset)?;
    if !(train_mean > 0.0) {
        return Err(Error::Data(format!(
            "train label mean must be positive to normalize errors, got {}",
            train_mean
        )));
    }

    let val_idx = dataset.indices_in(SplitTag::Val);
    if val_idx.is_empty() {
        return Err(Error::Train("no validation tiles".into()));
    }
    let min_value = S::from_f64c(EVAL_MIN_VALUE);
    let mut val_fine_pixels: Vec<(usize, Vec<usize>)> = val_idx
        .iter()
        .filter(|&&i| !dataset.tiles[i].coarse_only)
        .map(|&i| (i, eval_pixel_set(&dataset.tiles[i], EVAL_MIN_SOUNDINGS, min_value)))
        .filter(|(_, px)| !px.is_empty())
        .collect();
    if val_fine_pixels.is_empty() {
        if config.early_stopping {
            return Err(Error::Train(format!(
                "early stopping needs trusted validation pixels (>= {} soundings, observed > {})",
                EVAL_MIN_SOUNDINGS, EVAL_MIN_VALUE
            )));
        }
        val_fine_pixels = val_idx
            .iter()
            .filter(|&&i| !dataset.tiles[i].coarse_only)
            .map(|&i| (i, dataset.tiles[i].valid.indices().collect::<Vec<usize>>()))
            .filter(|(_, px)| !px.is_empty())
            .collect();
        if val_fine_pixels.is_empty() {
            return Err(Error::Train("validation split has no usable fine pixels".into()));
        }
    }
    if matches!(objective, Objective::FineSupervised)
        && !train_idx
            .iter()
            .any(|&i| !eval_pixel_set(&dataset.tiles[i], EVAL_MIN_SOUNDINGS, min_value).is_empty())
    {
        return Err(Error::Train("fine supervision has no trusted train pixels".into()));
    }

    let mut params = initial.clone();
    let adamw = config.adamw();
    let mut state = AdamWState::new(&params);
    let batch = config.batch_size.min(train_idx.len());
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ModelParams<S>)> = None;

    for epoch in 0..config.epochs {
        let mut rng = stream(config.seed, "train", epoch as u64);
        let order = index::sample(&mut rng, train_idx.len(), train_idx.len());
        let shuffled: Vec<usize> = order.iter().map(|k| train_idx[k]).collect();

        let mut coarse_sum = 0.0f64;
        for (b, chunk) in shuffled.chunks(batch).enumerate() {
            let tiles: Vec<&Tile<S>> = chunk.iter().map(|&i| &dataset.tiles[i]).collect();
            let step = batch_gradients(&params, &tiles, objective, &mut rng)?;
            if !step.objective_value.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {} batch {}",
                    epoch, b
                )));
            }
            if !step.grads.all_finite() {
                return Err(Error::Train(format!(
                    "non-finite gradient at epoch {} batch {}",
                    epoch, b
                )));
            }
            coarse_sum += step.coarse_loss * tiles.len() as f64;
            if step.tiles_used > 0 {
                state.step(&mut params, &step.grads, &adamw)?;
            }
        }

        let (val_coarse_nrmse, val_fine_nrmse) =
            validation_scores(&params, dataset, &val_idx, &val_fine_pixels, train_mean)?;
        let train_fine_nrmse = train_truth_score(&params, dataset, &train_idx, train_mean)?;
        let record = EpochRecord {
            epoch,
            train_coarse_loss: coarse_sum / train_idx.len() as f64,
            val_coarse_nrmse,
            val_fine_nrmse,
            train_fine_nrmse,
        };
        let finite = record.train_coarse_loss.is_finite()
            && record.val_coarse_nrmse.is_finite()
            && record.val_fine_nrmse.is_finite()
            && record.train_fine_nrmse.is_finite();
        if !finite {
            return Err(Error::Train(format!("non-finite validation metric at epoch {}", epoch)));
        }
        if config.early_stopping
            && best.as_ref().is_none_or(|(_, v, _)| record.val_fine_nrmse < *v)
        {
            best = Some((epoch, record.val_fine_nrmse, params.clone()));
        }
        records.push(record);
    }

    let (best_epoch, params) = match (config.early_stopping, best) {
        (true, Some((epoch, _, snapshot))) => (epoch, snapshot),
        _ => (config.epochs - 1, params),
    };
    Ok(TrainOutcome { params, best_epoch, records })
}

fn validation_scores<S: Scalar>(
    params: &ModelParams<S>,
    dataset: &Dataset<S>,
    val_idx: &[usize],
    fine_pixels: &[(usize, Vec<usize>)],
    train_mean: f64,
) -> Result<(f64, f64)> {
    let mut labels = Vec::new();
    let mut means = Vec::new();
    let mut predictions: BTreeMap<usize, Vec<S>> = BTreeMap::new();
    for &i in val_idx {
        let tile = &dataset.tiles[i];
        let out = forward(params, &tile.input_tensor()?)?;
        if tile.valid.count() > 0 {
            labels.push(tile.coarse_label.to_f64c());
            means.push(masked_mean_forward(out.data(), &tile.valid).to_f64c());
        }
        predictions.insert(i, out.data().to_vec());
    }
    let val_coarse = nrmse(&labels, &means, train_mean)?;

    let mut observed = Vec::new();
    let mut predicted = Vec::new();
    for (i, pixels) in fine_pixels {
        let tile = &dataset.tiles[*i];
        let pred = &predictions[i];
        for &p in pixels {
            observed.push(tile.fine_observed[p].to_f64c());
            predicted.push(pred[p].to_f64c());
        }
    }
    let val_fine = nrmse(&observed, &predicted, train_mean)?;
    Ok((val_coarse, val_fine))
}

fn train_truth_score<S: Scalar>(
    params: &ModelParams<S>,
    dataset: &Dataset<S>,
    train_idx: &[usize],
    train_mean: f64,
) -> Result<f64> {
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for &i in train_idx {
        let tile = &dataset.tiles[i];
        let out = forward(params, &tile.input_tensor()?)?;
        truth.extend(tile.fine_truth.iter().map(|v| v.to_f64c()));
        predicted.extend(out.data().iter().map(|v| v.to_f64c()));
    }
    nrmse(&truth, &predicted, train_mean)
}

/// Index of the record with the lowest fine-validation NRMSE, earliest on
/// ties.
pub fn select_best_epoch(records: &[EpochRecord]) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::Train("no epoch records to select from".into()));
    }
    let mut best = 0;
    for (i, r) in records.iter().enumerate() {
        if r.val_fine_nrmse < records[best].val_fine_nrmse {
            best = i;
        }
    }
    Ok(best)
}

/// Write the per-epoch log as CSV, with `# `-prefixed comment lines above
/// the header.
pub fn write_curves_csv(path: &Path, comments: &[String], records: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for comment in comments {
        text.push_str("# ");
        text.push_str(comment);
        text.push('\n');
    }
    text.push_str("epoch,train_coarse_loss,val_coarse_nrmse,val_fine_nrmse,train_fine_nrmse\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_coarse_loss, r.val_coarse_nrmse, r.val_fine_nrmse, r.train_fine_nrmse
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
