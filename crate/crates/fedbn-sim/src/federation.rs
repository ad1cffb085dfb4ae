//! Federated training engine: per-client local SGD, parameter aggregation
//! with or without the batch-norm exclusion, round scheduling, trace
//! recording, and admission of new clients into a trained federation.
//!
//! Determinism contract: each client draws from its own `(seed, client_id)`
//! stream, aggregation sums clients in ascending id, and per-client work is
//! arithmetically independent within a round — so traces are bitwise
//! identical at any worker count.

use serde::{Deserialize, Serialize};

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{
    accuracy, add_proximal_term, apply_running_stat_update, mlp_backward, mlp_forward_eval,
    recompute_running_stats, scale_grads, sgd_step, Layer, LossKind, MlpParams,
    TheoryClientParams,
};
use crate::numerics::{fmt_f64, DenseMatrix, Rng};

/// Loss used when a run diverged: anything non-finite or above this aborts.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Strategy {
    /// Average every parameter each round.
    FedAvg,
    /// FedAvg plus a proximal pull toward the last broadcast model during
    /// local updates (applied to every trainable tensor, batch norm included).
    FedProx { mu: f64 },
    /// Average everything except batch-norm state, which stays client-local.
    FedBn,
    /// No communication: every client trains alone.
    SingleSet,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx { .. } => "fedprox",
            Strategy::FedBn => "fedbn",
            Strategy::SingleSet => "singleset",
        }
    }
}

/// Mini-batch size; serializes as the string "full" or a positive integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Count(usize),
}

impl BatchSize {
    fn resolve(&self, m: usize) -> usize {
        match self {
            BatchSize::Full => m,
            BatchSize::Count(b) => (*b).min(m).max(1),
        }
    }
}

impl Serialize for BatchSize {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => serializer.serialize_str("full"),
            BatchSize::Count(n) => serializer.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(u64),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Text(s) if s == "full" => Ok(BatchSize::Full),
            Raw::Text(s) => Err(DeError::custom(format!(
                "batch_size must be \"full\" or a positive integer, got \"{s}\""
            ))),
            Raw::Number(0) => Err(DeError::custom("batch_size must be positive")),
            Raw::Number(n) => Ok(BatchSize::Count(n as usize)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Theory,
    Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub n_clients: usize,
    /// Local epochs per communication round.
    pub local_epochs: usize,
    /// Total epochs; must be a multiple of `local_epochs`.
    pub total_epochs: usize,
    pub lr: f64,
    pub batch_size: BatchSize,
    pub strategy: Strategy,
    pub seed: u64,
    pub loss: LossKind,
    pub model_kind: ModelKind,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::InvalidArgument("n_clients must be positive".into()));
        }
        if self.local_epochs == 0 || self.total_epochs == 0 {
            return Err(Error::InvalidArgument("epoch counts must be positive".into()));
        }
        if self.total_epochs % self.local_epochs != 0 {
            return Err(Error::InvalidArgument(format!(
                "total_epochs {} is not a multiple of local_epochs {}",
                self.total_epochs, self.local_epochs
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be >= 0, got {}", self.lr)));
        }
        if let Strategy::FedProx { mu } = self.strategy {
            if !(mu >= 0.0) {
                return Err(Error::InvalidArgument(format!("mu must be >= 0, got {mu}")));
            }
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.total_epochs / self.local_epochs
    }
}

/// Model parameters held by a single client.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ModelParams {
    Theory(TheoryClientParams),
    Mlp(MlpParams),
}

impl ModelParams {
    fn structurally_matches(&self, other: &ModelParams) -> bool {
        match (self, other) {
            (ModelParams::Theory(a), ModelParams::Theory(b)) => {
                a.v.rows == b.v.rows && a.v.cols == b.v.cols && a.gamma.len() == b.gamma.len()
            }
            (ModelParams::Mlp(a), ModelParams::Mlp(b)) => {
                a.layers.len() == b.layers.len()
                    && a.layers.iter().zip(&b.layers).all(|(x, y)| match (x, y) {
                        (Layer::Dense { w: wa, .. }, Layer::Dense { w: wb, .. }) => {
                            wa.rows == wb.rows && wa.cols == wb.cols
                        }
                        (Layer::BatchNorm { gamma: ga, .. }, Layer::BatchNorm { gamma: gb, .. }) => {
                            ga.len() == gb.len()
                        }
                        _ => false,
                    })
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub params: ModelParams,
    pub dataset: ClientDataset,
    pub rng: Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round: usize,
    pub epoch: usize,
    pub client: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FederationTrace {
    pub records: Vec<TraceRecord>,
}

impl FederationTrace {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("round,epoch,client,train_loss,train_acc,test_loss,test_acc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.round,
                r.epoch,
                r.client,
                fmt_f64(r.train_loss),
                fmt_f64(r.train_acc),
                fmt_f64(r.test_loss),
                fmt_f64(r.test_acc)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    /// Mean training loss across clients at each epoch, in epoch order.
    pub fn mean_train_loss_per_epoch(&self) -> Vec<f64> {
        let max_epoch = self.records.iter().map(|r| r.epoch).max().unwrap_or(0);
        let mut sums = vec![0.0; max_epoch];
        let mut counts = vec![0usize; max_epoch];
        for r in &self.records {
            sums[r.epoch - 1] += r.train_loss;
            counts[r.epoch - 1] += 1;
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &c)| s / c.max(1) as f64)
            .collect()
    }

    /// Trailing-window moving average of the per-epoch mean training loss.
    pub fn smoothed_train_loss(&self, window: usize) -> Vec<f64> {
        let per_epoch = self.mean_train_loss_per_epoch();
        per_epoch
            .iter()
            .enumerate()
            .map(|(t, _)| {
                let start = (t + 1).saturating_sub(window);
                let slice = &per_epoch[start..=t];
                slice.iter().sum::<f64>() / slice.len() as f64
            })
            .collect()
    }

    pub fn final_records(&self) -> Vec<&TraceRecord> {
        let max_epoch = self.records.iter().map(|r| r.epoch).max().unwrap_or(0);
        self.records.iter().filter(|r| r.epoch == max_epoch).collect()
    }
}

struct EpochMetrics {
    train_loss: f64,
    train_acc: f64,
    test_loss: f64,
    test_acc: f64,
}

fn eval_mlp(params: &MlpParams, data: &ClientDataset, loss: LossKind) -> Result<(f64, f64)> {
    let logits = mlp_forward_eval(params, &data.features)?;
    let (loss_value, acc) = match loss {
        LossKind::CrossEntropy => {
            let mut total = 0.0;
            for r in 0..logits.rows {
                let row = logits.row(r);
                let target = data.labels[r] as usize;
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let exp_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                total += -(row[target] - max - exp_sum.ln());
            }
            (total / logits.rows as f64, accuracy(&logits, &data.labels))
        }
        LossKind::Squared => {
            let mut total = 0.0;
            let mut correct = 0usize;
            for r in 0..logits.rows {
                let pred = logits.get(r, 0);
                let diff = pred - data.labels[r];
                total += diff * diff;
                if (pred >= 0.5) == (data.labels[r] >= 0.5) {
                    correct += 1;
                }
            }
            (total / logits.rows as f64, correct as f64 / logits.rows as f64)
        }
    };
    Ok((loss_value, acc))
}

fn eval_theory(params: &TheoryClientParams, data: &ClientDataset) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut correct = 0usize;
    for r in 0..data.num_samples() {
        let pred = params.forward(data.features.row(r), &data.cov)?;
        let diff = pred - data.labels[r];
        total += diff * diff;
        if (pred >= 0.5) == (data.labels[r] >= 0.5) {
            correct += 1;
        }
    }
    Ok((
        total / data.num_samples() as f64,
        correct as f64 / data.num_samples() as f64,
    ))
}

fn check_divergence(loss: f64, round: usize, epoch: usize, client: usize) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
        return Err(Error::Divergence {
            round,
            epoch,
            client,
            loss,
        });
    }
    Ok(())
}

/// Runs `epochs` epochs of mini-batch SGD on one client's own data.
///
/// The SGD step minimizes the batch-summed loss (gradients from the batch
/// mean are rescaled by the batch size); recorded losses stay per-sample
/// means. Under FedProx, mu * (w - anchor) is added to every trainable
/// gradient, batch-norm parameters included.
pub fn local_update(
    client: &mut ClientState,
    epochs: usize,
    cfg: &FederationConfig,
    anchor: &ModelParams,
    test_set: Option<&ClientDataset>,
    round: usize,
    epoch_offset: usize,
) -> Result<Vec<TraceRecord>> {
    if !client.params.structurally_matches(anchor) {
        return Err(Error::StructuralMismatch(format!(
            "client {} does not match the broadcast structure",
            client.client_id
        )));
    }
    let m = client.dataset.num_samples();
    let batch = cfg.batch_size.resolve(m);
    let mu = match cfg.strategy {
        Strategy::FedProx { mu } => Some(mu),
        _ => None,
    };
    let mut records = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let epoch = epoch_offset + e + 1;
        // full-batch passes keep a fixed order; mini-batches reshuffle per epoch
        let order: Vec<usize> = if batch == m {
            (0..m).collect()
        } else {
            let mut idx: Vec<usize> = (0..m).collect();
            client.rng.shuffle(&mut idx);
            idx
        };
        let mut epoch_loss = 0.0;
        let mut epoch_acc = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch) {
            let metrics = match (&mut client.params, anchor) {
                (ModelParams::Mlp(params), ModelParams::Mlp(anchor_params)) => {
                    let rows: Vec<Vec<f64>> = chunk
                        .iter()
                        .map(|&r| client.dataset.features.row(r).to_vec())
                        .collect();
                    let x = DenseMatrix::from_rows(&rows)?;
                    let labels: Vec<f64> =
                        chunk.iter().map(|&r| client.dataset.labels[r]).collect();
                    let mut back = mlp_backward(params, &x, &labels, cfg.loss)?;
                    check_divergence(back.loss, round, epoch, client.client_id)?;
                    // batch-sum convention for the step itself
                    scale_grads(&mut back.grads, chunk.len() as f64);
                    if let Some(mu) = mu {
                        add_proximal_term(&mut back.grads, params, anchor_params, mu);
                    }
                    apply_running_stat_update(params, &back.bn_stats);
                    sgd_step(params, &back.grads, cfg.lr);
                    (back.loss, accuracy(&back.logits, &labels))
                }
                (ModelParams::Theory(params), ModelParams::Theory(anchor_params)) => {
                    let (mut d_v, mut d_gamma, loss, preds) = params.batch_grads(
                        &client.dataset.features,
                        &client.dataset.labels,
                        chunk,
                        &client.dataset.cov,
                    )?;
                    check_divergence(loss, round, epoch, client.client_id)?;
                    let scale = chunk.len() as f64;
                    for g in &mut d_v.entries {
                        *g *= scale;
                    }
                    for g in &mut d_gamma {
                        *g *= scale;
                    }
                    if let Some(mu) = mu {
                        for i in 0..d_v.entries.len() {
                            d_v.entries[i] +=
                                mu * (params.v.entries[i] - anchor_params.v.entries[i]);
                        }
                        for k in 0..d_gamma.len() {
                            d_gamma[k] += mu * (params.gamma[k] - anchor_params.gamma[k]);
                        }
                    }
                    for i in 0..params.v.entries.len() {
                        params.v.entries[i] -= cfg.lr * d_v.entries[i];
                    }
                    for k in 0..params.gamma.len() {
                        params.gamma[k] -= cfg.lr * d_gamma[k];
                    }
                    let correct = preds
                        .iter()
                        .zip(chunk)
                        .filter(|(p, &r)| (**p >= 0.5) == (client.dataset.labels[r] >= 0.5))
                        .count();
                    (loss, correct as f64 / chunk.len() as f64)
                }
                _ => {
                    return Err(Error::StructuralMismatch(
                        "model kind differs between client and broadcast".into(),
                    ))
                }
            };
            epoch_loss += metrics.0 * chunk.len() as f64;
            epoch_acc += metrics.1 * chunk.len() as f64;
            seen += chunk.len();
        }
        let (test_loss, test_acc) = match test_set {
            Some(test) => match &client.params {
                ModelParams::Mlp(params) => eval_mlp(params, test, cfg.loss)?,
                ModelParams::Theory(params) => eval_theory(params, test)?,
            },
            None => (f64::NAN, f64::NAN),
        };
        let metrics = EpochMetrics {
            train_loss: epoch_loss / seen as f64,
            train_acc: epoch_acc / seen as f64,
            test_loss,
            test_acc,
        };
        records.push(TraceRecord {
            round,
            epoch,
            client: client.client_id,
            train_loss: metrics.train_loss,
            train_acc: metrics.train_acc,
            test_loss: metrics.test_loss,
            test_acc: metrics.test_acc,
        });
    }
    Ok(records)
}

/// Unweighted mean of every parameter tensor across clients, summed in
/// ascending client id. Batch-norm slots are averaged too; [`broadcast`]
/// decides per strategy whether clients receive them.
pub fn aggregate(clients: &[ClientState]) -> Result<ModelParams> {
    let first = clients
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot aggregate zero clients".into()))?;
    for c in clients.iter().skip(1) {
        if !c.params.structurally_matches(&first.params) {
            return Err(Error::StructuralMismatch(format!(
                "client {} differs structurally from client {}",
                c.client_id, first.client_id
            )));
        }
    }
    let inv_n = 1.0 / clients.len() as f64;
    match &first.params {
        ModelParams::Theory(_) => {
            let views: Vec<&TheoryClientParams> = clients
                .iter()
                .map(|c| match &c.params {
                    ModelParams::Theory(p) => p,
                    _ => unreachable!(),
                })
                .collect();
            let mut mean = views[0].clone();
            for entry in &mut mean.v.entries {
                *entry = 0.0;
            }
            for g in &mut mean.gamma {
                *g = 0.0;
            }
            for view in &views {
                for (acc, value) in mean.v.entries.iter_mut().zip(&view.v.entries) {
                    *acc += value;
                }
                for (acc, value) in mean.gamma.iter_mut().zip(&view.gamma) {
                    *acc += value;
                }
            }
            for entry in &mut mean.v.entries {
                *entry *= inv_n;
            }
            for g in &mut mean.gamma {
                *g *= inv_n;
            }
            Ok(ModelParams::Theory(mean))
        }
        ModelParams::Mlp(_) => {
            let views: Vec<&MlpParams> = clients
                .iter()
                .map(|c| match &c.params {
                    ModelParams::Mlp(p) => p,
                    _ => unreachable!(),
                })
                .collect();
            let mut mean = views[0].clone();
            for layer in &mut mean.layers {
                zero_layer(layer);
            }
            for view in &views {
                for (acc, layer) in mean.layers.iter_mut().zip(&view.layers) {
                    add_layer(acc, layer);
                }
            }
            for layer in &mut mean.layers {
                scale_layer(layer, inv_n);
            }
            Ok(ModelParams::Mlp(mean))
        }
    }
}

fn zero_layer(layer: &mut Layer) {
    match layer {
        Layer::Dense { w, b } => {
            w.entries.iter_mut().for_each(|v| *v = 0.0);
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } => {
            gamma.iter_mut().for_each(|v| *v = 0.0);
            beta.iter_mut().for_each(|v| *v = 0.0);
            running_mean.iter_mut().for_each(|v| *v = 0.0);
            running_var.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn add_layer(acc: &mut Layer, other: &Layer) {
    match (acc, other) {
        (Layer::Dense { w, b }, Layer::Dense { w: ow, b: ob }) => {
            for (a, v) in w.entries.iter_mut().zip(&ow.entries) {
                *a += v;
            }
            for (a, v) in b.iter_mut().zip(ob) {
                *a += v;
            }
        }
        (
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            },
            Layer::BatchNorm {
                gamma: og,
                beta: ob,
                running_mean: orm,
                running_var: orv,
                ..
            },
        ) => {
            for (a, v) in gamma.iter_mut().zip(og) {
                *a += v;
            }
            for (a, v) in beta.iter_mut().zip(ob) {
                *a += v;
            }
            for (a, v) in running_mean.iter_mut().zip(orm) {
                *a += v;
            }
            for (a, v) in running_var.iter_mut().zip(orv) {
                *a += v;
            }
        }
        _ => unreachable!("structural mismatch checked by aggregate"),
    }
}

fn scale_layer(layer: &mut Layer, factor: f64) {
    match layer {
        Layer::Dense { w, b } => {
            w.entries.iter_mut().for_each(|v| *v *= factor);
            b.iter_mut().for_each(|v| *v *= factor);
        }
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            ..
        } => {
            gamma.iter_mut().for_each(|v| *v *= factor);
            beta.iter_mut().for_each(|v| *v *= factor);
            running_mean.iter_mut().for_each(|v| *v *= factor);
            running_var.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Installs the aggregated record on every client. FedAvg/FedProx replace
/// everything; under the batch-norm exclusion only non-BN tensors are
/// replaced (for the analytic model, the scale vector is the BN-tagged part).
/// SingleSet broadcasts nothing.
pub fn broadcast(global: &ModelParams, clients: &mut [ClientState], strategy: Strategy) {
    match strategy {
        Strategy::SingleSet => {}
        Strategy::FedAvg | Strategy::FedProx { .. } => {
            for client in clients {
                client.params = global.clone();
            }
        }
        Strategy::FedBn => match global {
            ModelParams::Theory(global_params) => {
                for client in clients {
                    if let ModelParams::Theory(params) = &mut client.params {
                        params.v = global_params.v.clone();
                        params.c = global_params.c.clone();
                    }
                }
            }
            ModelParams::Mlp(global_params) => {
                for client in clients {
                    if let ModelParams::Mlp(params) = &mut client.params {
                        for (mine, theirs) in params.layers.iter_mut().zip(&global_params.layers) {
                            if let (Layer::Dense { w, b }, Layer::Dense { w: gw, b: gb }) =
                                (mine, theirs)
                            {
                                *w = gw.clone();
                                *b = gb.clone();
                            }
                        }
                    }
                }
            }
        },
    }
}

fn worker_count(n_clients: usize) -> usize {
    let from_env = std::env::var("FEDBN_SIM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1);
    let available = std::thread::available_parallelism().map(|v| v.get()).unwrap_or(1);
    from_env.unwrap_or(available).min(n_clients).max(1)
}

/// Alternates E local epochs on every client with one aggregation, for T/E
/// rounds, recording every client's metrics each epoch.
pub fn run_federation(
    cfg: &FederationConfig,
    clients: &mut Vec<ClientState>,
    test_sets: &[ClientDataset],
) -> Result<FederationTrace> {
    run_federation_with_threads(cfg, clients, test_sets, worker_count(cfg.n_clients))
}

/// Same as [`run_federation`] with an explicit worker count. Results are
/// identical for every `threads` value.
pub fn run_federation_with_threads(
    cfg: &FederationConfig,
    clients: &mut Vec<ClientState>,
    test_sets: &[ClientDataset],
    threads: usize,
) -> Result<FederationTrace> {
    cfg.validate()?;
    if clients.len() != cfg.n_clients {
        return Err(Error::InvalidArgument(format!(
            "config says {} clients, got {}",
            cfg.n_clients,
            clients.len()
        )));
    }
    if !test_sets.is_empty() && test_sets.len() != clients.len() {
        return Err(Error::InvalidArgument(format!(
            "{} test sets for {} clients",
            test_sets.len(),
            clients.len()
        )));
    }
    let threads = threads.max(1);
    let mut trace = FederationTrace::default();
    for round in 1..=cfg.rounds() {
        let epoch_offset = (round - 1) * cfg.local_epochs;
        // broadcast snapshot from the previous aggregation (round 1 uses the
        // identical initial parameters); FedProx anchors its proximal term here
        let anchor = clients[0].params.clone();

        let mut results: Vec<Option<Result<Vec<TraceRecord>>>> =
            (0..clients.len()).map(|_| None).collect();
        if threads <= 1 || clients.len() <= 1 {
            for (i, client) in clients.iter_mut().enumerate() {
                results[i] = Some(local_update(
                    client,
                    cfg.local_epochs,
                    cfg,
                    &anchor,
                    test_sets.get(i),
                    round,
                    epoch_offset,
                ));
            }
        } else {
            let chunk_size = clients.len().div_ceil(threads);
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                let mut offset = 0usize;
                for chunk in clients.chunks_mut(chunk_size) {
                    let start = offset;
                    offset += chunk.len();
                    let anchor_ref = &anchor;
                    handles.push(scope.spawn(move || {
                        let mut local: Vec<(usize, Result<Vec<TraceRecord>>)> = Vec::new();
                        for (j, client) in chunk.iter_mut().enumerate() {
                            let idx = start + j;
                            local.push((
                                idx,
                                local_update(
                                    client,
                                    cfg.local_epochs,
                                    cfg,
                                    anchor_ref,
                                    test_sets.get(idx),
                                    round,
                                    epoch_offset,
                                ),
                            ));
                        }
                        local
                    }));
                }
                for handle in handles {
                    for (idx, result) in handle.join().expect("worker panicked") {
                        results[idx] = Some(result);
                    }
                }
            });
        }
        // interleave per epoch, clients ascending, regardless of thread layout
        let mut per_client: Vec<Vec<TraceRecord>> = Vec::with_capacity(clients.len());
        for result in results.into_iter() {
            per_client.push(result.expect("one result per client")?);
        }
        for e in 0..cfg.local_epochs {
            for records in &per_client {
                trace.records.push(records[e].clone());
            }
        }

        if !matches!(cfg.strategy, Strategy::SingleSet) {
            let global = aggregate(clients)?;
            broadcast(&global, clients, cfg.strategy);
        }
    }
    Ok(trace)
}

/// Builds a new client from the federation: non-BN tensors come from the
/// aggregated record, BN trainables are the mean over existing clients, and
/// BN running statistics are recomputed on the new client's own data.
/// Existing clients are never mutated.
pub fn admit_new_client(
    global: &ModelParams,
    existing: &[ClientState],
    new_data: ClientDataset,
    new_id: usize,
    rng: Rng,
) -> Result<ClientState> {
    if existing.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot admit a client into an empty federation".into(),
        ));
    }
    let mut params = global.clone();
    match &mut params {
        ModelParams::Theory(p) => {
            let views: Vec<&TheoryClientParams> = existing
                .iter()
                .map(|c| match &c.params {
                    ModelParams::Theory(t) => t,
                    _ => unreachable!(),
                })
                .collect();
            let inv_n = 1.0 / views.len() as f64;
            for k in 0..p.gamma.len() {
                p.gamma[k] = views.iter().map(|v| v.gamma[k]).sum::<f64>() * inv_n;
            }
        }
        ModelParams::Mlp(p) => {
            for (li, layer) in p.layers.iter_mut().enumerate() {
                if let Layer::BatchNorm { gamma, beta, .. } = layer {
                    let inv_n = 1.0 / existing.len() as f64;
                    for j in 0..gamma.len() {
                        let mut g_sum = 0.0;
                        let mut b_sum = 0.0;
                        for c in existing {
                            if let ModelParams::Mlp(mp) = &c.params {
                                if let Layer::BatchNorm {
                                    gamma: cg,
                                    beta: cb,
                                    ..
                                } = &mp.layers[li]
                                {
                                    g_sum += cg[j];
                                    b_sum += cb[j];
                                }
                            }
                        }
                        gamma[j] = g_sum * inv_n;
                        beta[j] = b_sum * inv_n;
                    }
                }
            }
            recompute_running_stats(p, &new_data.features)?;
        }
    }
    Ok(ClientState {
        client_id: new_id,
        params,
        dataset: new_data,
        rng,
    })
}
