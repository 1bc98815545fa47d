//! The split training protocol: parallel client forward passes, server-side
//! loss and update, cut-layer gradient hand-back, weighted gradient
//! averaging, and the synchronized client update. Also the centralized
//! baseline and evaluation.

mod checkpoint;
mod net;
mod optimizer;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use net::{
    backward, forward, init_params, softmax_cross_entropy, Activation, Architecture, ForwardCache,
    LayerSpec, Matrix,
};
pub use optimizer::{OptimizerConfig, OptimizerState};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::deviation::l1_deviation;
use crate::error::{Error, Result};
use crate::partition::{class_distribution, Partition};
use crate::rng;
use crate::sampling::{BatchSchedule, DepletionState};

/// Client-side parameter replicas plus the server-side parameters of a split
/// network. All replicas are bit-identical at initialization and stay so
/// through the synchronized update.
#[derive(Debug, Clone)]
pub struct SplitModel {
    architecture: Architecture,
    client_replicas: Vec<Vec<f64>>,
    server_params: Vec<f64>,
}

impl SplitModel {
    pub fn new(architecture: Architecture, num_clients: usize, seed: u64) -> Result<Self> {
        if num_clients == 0 {
            return Err(Error::InvalidConfig("at least one client".into()));
        }
        let client = init_params(
            architecture.client_layers(),
            &mut rng::stream(seed, "init-client", 0),
        );
        let server = init_params(
            architecture.server_layers(),
            &mut rng::stream(seed, "init-server", 0),
        );
        Ok(Self {
            architecture,
            client_replicas: vec![client; num_clients],
            server_params: server,
        })
    }

    pub fn from_parts(
        architecture: Architecture,
        client_params: Vec<f64>,
        server_params: Vec<f64>,
        num_clients: usize,
    ) -> Result<Self> {
        if client_params.len() != architecture.client_param_count()
            || server_params.len() != architecture.server_param_count()
        {
            return Err(Error::ShapeMismatch(
                "parameter vectors disagree with the architecture".into(),
            ));
        }
        if num_clients == 0 {
            return Err(Error::InvalidConfig("at least one client".into()));
        }
        Ok(Self {
            architecture,
            client_replicas: vec![client_params; num_clients],
            server_params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn num_clients(&self) -> usize {
        self.client_replicas.len()
    }

    pub fn client_params(&self, client: usize) -> &[f64] {
        &self.client_replicas[client]
    }

    pub fn client_params_mut(&mut self, client: usize) -> &mut [f64] {
        &mut self.client_replicas[client]
    }

    pub fn server_params(&self) -> &[f64] {
        &self.server_params
    }

    pub fn server_params_mut(&mut self) -> &mut [f64] {
        &mut self.server_params
    }

    /// Bitwise equality of all client replicas.
    pub fn replicas_identical(&self) -> bool {
        let first = &self.client_replicas[0];
        self.client_replicas.iter().all(|replica| {
            replica.len() == first.len()
                && replica
                    .iter()
                    .zip(first)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }

    pub fn optimizer_state(&self, config: OptimizerConfig) -> OptimizerState {
        OptimizerState::new(
            config,
            self.architecture.client_param_count(),
            self.architecture.server_param_count(),
        )
    }
}

/// How substep-5 weights the per-client gradients. The protocol prescribes
/// dataset fractions D_k/D_0; batch fractions are exposed for ablation only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientWeighting {
    #[default]
    DatasetFraction,
    BatchFraction,
}

/// Cached client forward pass; consumed by [`client_backward`].
pub struct ClientCache {
    cache: ForwardCache,
}

/// Cached server forward pass; consumed by [`server_backward`].
pub struct ServerCache {
    cache: ForwardCache,
    dlogits: Matrix,
}

/// Substep 1: run the client-side layers of replica `client` over a batch,
/// one sample per row. Returns the cut-layer activations.
pub fn client_forward(
    model: &SplitModel,
    client: usize,
    features: &Matrix,
) -> Result<(Matrix, ClientCache)> {
    if features.cols() != model.architecture.input_dim() || features.rows() == 0 {
        return Err(Error::ShapeMismatch(format!(
            "client batch is {}x{}, expected non-empty rows of width {}",
            features.rows(),
            features.cols(),
            model.architecture.input_dim()
        )));
    }
    let (activations, cache) = forward(
        model.architecture.client_layers(),
        &model.client_replicas[client],
        features,
    );
    Ok((activations, ClientCache { cache }))
}

/// Substep 2: run the server-side layers over the concatenated activations
/// and compute the mean cross-entropy over the global batch.
pub fn server_forward_loss(
    model: &SplitModel,
    activations: &Matrix,
    labels: &[usize],
) -> Result<(f64, Matrix, ServerCache)> {
    if activations.cols() != model.architecture.cut_dim() {
        return Err(Error::ShapeMismatch(format!(
            "activation width {} does not match cut width {}",
            activations.cols(),
            model.architecture.cut_dim()
        )));
    }
    let (logits, cache) = forward(
        model.architecture.server_layers(),
        &model.server_params,
        activations,
    );
    let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
    Ok((loss, logits, ServerCache { cache, dlogits }))
}

/// Gradients of the cached server pass: the server parameter gradients and
/// the loss gradient at the cut-layer activations. Pure; used by
/// [`server_backward`] and by finite-difference checks.
pub fn server_gradients(model: &SplitModel, cache: &ServerCache) -> (Vec<f64>, Matrix) {
    backward(
        model.architecture.server_layers(),
        &model.server_params,
        &cache.cache,
        &cache.dlogits,
    )
}

/// Substep 3: update the server parameters and hand back the cut-layer
/// gradient, still partitioned by the concatenation order.
pub fn server_backward(
    model: &mut SplitModel,
    opt: &mut OptimizerState,
    cache: ServerCache,
) -> Result<Matrix> {
    let (server_grads, cut_grads) = server_gradients(model, &cache);
    opt.step_server(&mut model.server_params, &server_grads)?;
    Ok(cut_grads)
}

/// Substep 4: continue backpropagation through replica `client` from its
/// slice of the cut-layer gradient. Does not update parameters.
pub fn client_backward(
    model: &SplitModel,
    client: usize,
    cache: &ClientCache,
    cut_grad_rows: &Matrix,
) -> Result<Vec<f64>> {
    if cut_grad_rows.rows() != cache.cache.batch_rows()
        || cut_grad_rows.cols() != model.architecture.cut_dim()
    {
        return Err(Error::ShapeMismatch(format!(
            "cut gradient slice is {}x{}, cached batch is {} rows of width {}",
            cut_grad_rows.rows(),
            cut_grad_rows.cols(),
            cache.cache.batch_rows(),
            model.architecture.cut_dim()
        )));
    }
    let (grads, _) = backward(
        model.architecture.client_layers(),
        &model.client_replicas[client],
        &cache.cache,
        cut_grad_rows,
    );
    Ok(grads)
}

/// Substep 5: weighted sum of the client gradients, weights `w_k` summing in
/// ascending client order so the floating-point result is deterministic.
pub fn average_client_gradients(gradients: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if gradients.is_empty() || gradients.len() != weights.len() {
        return Err(Error::ShapeMismatch(
            "one gradient per weight is required".into(),
        ));
    }
    let len = gradients[0].len();
    let mut averaged = vec![0.0; len];
    for (grad, &weight) in gradients.iter().zip(weights) {
        if grad.len() != len {
            return Err(Error::ShapeMismatch(
                "client gradients disagree on shape".into(),
            ));
        }
        for (a, &g) in averaged.iter_mut().zip(grad) {
            *a += weight * g;
        }
    }
    Ok(averaged)
}

/// Dataset-fraction weights D_k / D_0.
pub fn dataset_fraction_weights(client_sizes: &[usize]) -> Vec<f64> {
    let total: usize = client_sizes.iter().sum();
    client_sizes
        .iter()
        .map(|&s| s as f64 / total as f64)
        .collect()
}

/// Substep 6: apply the identical averaged-gradient update to every replica.
/// Fails with a desync error if the replicas are not bit-identical going in.
pub fn client_update(
    model: &mut SplitModel,
    opt: &mut OptimizerState,
    averaged_gradient: &[f64],
) -> Result<()> {
    if !model.replicas_identical() {
        return Err(Error::ClientDesync);
    }
    let updated = opt.step_client(&model.client_replicas[0], averaged_gradient)?;
    for replica in &mut model.client_replicas {
        replica.copy_from_slice(&updated);
    }
    Ok(())
}

/// The protocol's loss of one step: every `(client, features, labels)` batch
/// runs through that client's replica, activations concatenate in the given
/// order, and the server computes the global mean loss. This is the function
/// finite-difference checks probe.
pub fn split_loss(model: &SplitModel, batches: &[(usize, Matrix, Vec<usize>)]) -> Result<f64> {
    let mut activation_parts = Vec::new();
    let mut labels = Vec::new();
    for (client, features, batch_labels) in batches {
        let (act, _) = client_forward(model, *client, features)?;
        activation_parts.push(act);
        labels.extend_from_slice(batch_labels);
    }
    let refs: Vec<&Matrix> = activation_parts.iter().collect();
    let global = Matrix::vstack(&refs)?;
    let (loss, _, _) = server_forward_loss(model, &global, &labels)?;
    Ok(loss)
}

/// Per-step measurements of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// 1-based step index within the epoch.
    pub step: usize,
    pub local_batch_sizes: Vec<usize>,
    pub global_batch_size: usize,
    pub loss: f64,
    pub cut_gradient_norm: f64,
    pub avg_client_gradient_norm: f64,
    pub l1_deviation: f64,
}

fn gather_batch(dataset: &LabeledDataset, indices: &[usize]) -> (Matrix, Vec<usize>) {
    let mut data = Vec::with_capacity(indices.len() * dataset.feature_dim());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(dataset.row(i));
        labels.push(dataset.label(i));
    }
    (
        Matrix::from_vec(indices.len(), dataset.feature_dim(), data).expect("consistent rows"),
        labels,
    )
}

/// Run one epoch of the six-substep protocol along `schedule`. Client forward
/// and backward passes run in parallel; the two aggregation points reduce in
/// ascending client order, so the result is identical at any worker count.
pub fn train_epoch(
    model: &mut SplitModel,
    opt: &mut OptimizerState,
    dataset: &LabeledDataset,
    partition: &Partition,
    schedule: &BatchSchedule,
    seed: u64,
    weighting: GradientWeighting,
) -> Result<Vec<StepTrace>> {
    train_epoch_with(
        model,
        opt,
        dataset,
        partition,
        schedule,
        seed,
        weighting,
        |_, _| {},
    )
}

/// [`train_epoch`] with a per-step observer, called after each synchronized
/// client update.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch_with(
    model: &mut SplitModel,
    opt: &mut OptimizerState,
    dataset: &LabeledDataset,
    partition: &Partition,
    schedule: &BatchSchedule,
    seed: u64,
    weighting: GradientWeighting,
    mut on_step: impl FnMut(&SplitModel, &StepTrace),
) -> Result<Vec<StepTrace>> {
    schedule.validate_against(partition.client_sizes())?;
    if partition.num_clients() != model.num_clients() {
        return Err(Error::ScheduleMismatch(format!(
            "partition has {} clients, model has {}",
            partition.num_clients(),
            model.num_clients()
        )));
    }
    let clients = partition.num_clients();
    let pool_dist = class_distribution(dataset.labels(), dataset.num_classes())?;
    let mut depletion = DepletionState::from_partition(partition);
    let mut draw_rngs: Vec<_> = (0..clients)
        .map(|k| rng::stream(seed, "client-draw", k as u64))
        .collect();
    let client_param_count = model.architecture.client_param_count();

    let mut traces = Vec::with_capacity(schedule.steps.len());
    for (t, step) in schedule.steps.iter().enumerate() {
        let global: usize = step.iter().sum();
        if global == 0 {
            continue;
        }
        // Substep 1 (parallel client FP). Draws stay serial per client on the
        // client's own stream.
        let mut batches: Vec<Option<(Matrix, Vec<usize>)>> = Vec::with_capacity(clients);
        for (k, &count) in step.iter().enumerate() {
            if count == 0 {
                batches.push(None);
                continue;
            }
            let indices = depletion.draw_local_batch(k, count, &mut draw_rngs[k])?;
            batches.push(Some(gather_batch(dataset, &indices)));
        }
        let forwards: Vec<Option<(Matrix, ClientCache)>> = batches
            .par_iter()
            .enumerate()
            .map(|(k, batch)| {
                batch
                    .as_ref()
                    .map(|(features, _)| client_forward(model, k, features))
                    .transpose()
            })
            .collect::<Result<_>>()?;

        // Substep 2: concatenate in ascending client order.
        let mut activation_parts = Vec::new();
        let mut labels = Vec::new();
        let mut row_spans = vec![(0usize, 0usize); clients];
        let mut row = 0;
        for (k, (forward_pass, batch)) in forwards.iter().zip(&batches).enumerate() {
            if let (Some((act, _)), Some((_, batch_labels))) = (forward_pass, batch) {
                row_spans[k] = (row, act.rows());
                row += act.rows();
                activation_parts.push(act);
                labels.extend_from_slice(batch_labels);
            }
        }
        let global_activations = Matrix::vstack(&activation_parts)?;
        let (loss, _, server_cache) = server_forward_loss(model, &global_activations, &labels)?;

        // Substep 3.
        let cut_grads = server_backward(model, opt, server_cache)?;
        let cut_gradient_norm = cut_grads.frobenius_norm();

        // Substep 4 (parallel client BP); absent clients contribute zeros.
        let gradients: Vec<Vec<f64>> = forwards
            .par_iter()
            .enumerate()
            .map(|(k, forward_pass)| match forward_pass {
                Some((_, cache)) => {
                    let (start, count) = row_spans[k];
                    client_backward(model, k, cache, &cut_grads.slice_rows(start, count))
                }
                None => Ok(vec![0.0; client_param_count]),
            })
            .collect::<Result<_>>()?;

        // Substeps 5 and 6.
        let weights = match weighting {
            GradientWeighting::DatasetFraction => {
                dataset_fraction_weights(partition.client_sizes())
            }
            GradientWeighting::BatchFraction => {
                step.iter().map(|&b| b as f64 / global as f64).collect()
            }
        };
        let averaged = average_client_gradients(&gradients, &weights)?;
        let avg_norm = averaged.iter().map(|g| g * g).sum::<f64>().sqrt();
        client_update(model, opt, &averaged)?;
        debug_assert!(model.replicas_identical());

        let trace = StepTrace {
            step: t + 1,
            local_batch_sizes: step.clone(),
            global_batch_size: global,
            loss,
            cut_gradient_norm,
            avg_client_gradient_norm: avg_norm,
            l1_deviation: l1_deviation(&labels, &pool_dist)?,
        };
        on_step(model, &trace);
        traces.push(trace);
    }
    Ok(traces)
}

/// Centralized baseline: standard mini-batch SGD with uniform
/// without-replacement batches over the pooled data, same optimizer
/// semantics as the split path.
pub fn centralized_train_epoch(
    model: &mut SplitModel,
    opt: &mut OptimizerState,
    dataset: &LabeledDataset,
    global_batch: usize,
    seed: u64,
) -> Result<Vec<StepTrace>> {
    if global_batch < 1 {
        return Err(Error::InvalidBatchSize);
    }
    if global_batch > dataset.len() {
        return Err(Error::ScheduleMismatch(format!(
            "batch {global_batch} exceeds pool {}",
            dataset.len()
        )));
    }
    let pool_dist = class_distribution(dataset.labels(), dataset.num_classes())?;
    let mut depletion = DepletionState::new(vec![(0..dataset.len()).collect()]);
    let mut draw_rng = rng::stream(seed, "client-draw", 0);
    let arch = model.architecture.clone();

    let mut traces = Vec::new();
    let mut t = 0;
    while depletion.total_remaining() > 0 {
        let count = global_batch.min(depletion.remaining(0));
        let indices = depletion.draw_local_batch(0, count, &mut draw_rng)?;
        let (features, labels) = gather_batch(dataset, &indices);

        let (activations, client_cache) =
            forward(arch.client_layers(), model.client_params(0), &features);
        let (logits, server_cache) =
            forward(arch.server_layers(), model.server_params(), &activations);
        let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;

        let (server_grads, cut_grads) = backward(
            arch.server_layers(),
            model.server_params(),
            &server_cache,
            &dlogits,
        );
        let (client_grads, _) = backward(
            arch.client_layers(),
            model.client_params(0),
            &client_cache,
            &cut_grads,
        );

        opt.step_server(&mut model.server_params, &server_grads)?;
        client_update(model, opt, &client_grads)?;

        t += 1;
        let avg_norm = client_grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        traces.push(StepTrace {
            step: t,
            local_batch_sizes: vec![count],
            global_batch_size: count,
            loss,
            cut_gradient_norm: cut_grads.frobenius_norm(),
            avg_client_gradient_norm: avg_norm,
            l1_deviation: l1_deviation(&labels, &pool_dist)?,
        });
    }
    Ok(traces)
}

/// Top-1 accuracy of the composed model (replica 0 plus server) on a test
/// set. Argmax ties resolve to the lowest class index.
pub fn evaluate(model: &SplitModel, test_set: &LabeledDataset) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::EmptyPool);
    }
    let indices: Vec<usize> = (0..test_set.len()).collect();
    let (features, labels) = gather_batch(test_set, &indices);
    let (activations, _) = forward(
        model.architecture.client_layers(),
        model.client_params(0),
        &features,
    );
    let (logits, _) = forward(
        model.architecture.server_layers(),
        model.server_params(),
        &activations,
    );
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}
