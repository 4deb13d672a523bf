//! The federated protocol: broadcast the global model, train every client
//! locally, aggregate with client weights `p_i`. Also the warm-up phase that
//! produces the shared initialization and the end-to-end experiment driver.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    dirichlet_partition, feature_shift_partition, gen_blobs, iid_partition, load_idx, train_val_test_split,
    AffineTransform, Dataset, PartitionPlan, ShiftPolicy,
};
use crate::error::{Error, Result};
use crate::local::{fedprox_local_train, lss_local_train, sgd_local_train, LocalConfig, MiniBatcher};
use crate::model::{evaluate, init_params, loss_and_grad, Activation, MlpSpec};
use crate::params::{raw_distance, weighted_average_refs, ParamVector, WEIGHT_SUM_TOLERANCE};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[default]
    Lss,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::Lss => "lss",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub strategy: Strategy,
    /// Explicit `p_i`; data-proportional when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub client_weights: Option<Vec<f64>>,
    pub master_seed: u64,
    pub warmup_steps: usize,
    pub warmup_eta: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 5,
            rounds: 1,
            strategy: Strategy::Lss,
            client_weights: None,
            master_seed: 0,
            warmup_steps: 200,
            warmup_eta: 0.1,
        }
    }
}

impl FederationConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.num_clients == 0 {
            return Err(("num_clients", "must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(("rounds", "must be at least 1".into()));
        }
        if !(self.warmup_eta > 0.0 && self.warmup_eta.is_finite()) {
            return Err(("warmup_eta", format!("must be positive, got {}", self.warmup_eta)));
        }
        if let Some(w) = &self.client_weights {
            check_client_weights(w, self.num_clients).map_err(|e| ("client_weights", e.to_string()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| Error::InvalidArgument(format!("federation.{field}: {msg}")))
    }
}

fn check_client_weights(w: &[f64], num_clients: usize) -> Result<()> {
    if w.len() != num_clients {
        return Err(Error::InvalidWeights(format!("{} weights for {num_clients} clients", w.len())));
    }
    if w.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidWeights("weights must be non-negative".into()));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::InvalidWeights(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// One participant: its id, local data and aggregation weight `p_i`.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    pub data: Dataset,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub global_test_accuracy: f64,
    pub global_test_loss: f64,
    /// Accuracy of each client's model on the global test split, before aggregation.
    pub client_accuracies: Vec<f64>,
    /// `|f_i - global|` for each client.
    pub update_norms: Vec<f64>,
    pub wall_time_seconds: f64,
}

/// Shared inputs of every round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub spec: &'a MlpSpec,
    pub strategy: Strategy,
    pub local: &'a LocalConfig,
    pub test: &'a Dataset,
    /// Train clients on the current rayon pool instead of sequentially.
    pub parallel: bool,
}

/// Runs one client's local update from `anchor`.
pub fn local_update(
    strategy: Strategy,
    anchor: &ParamVector,
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &LocalConfig,
    seed: u64,
) -> Result<ParamVector> {
    match strategy {
        Strategy::FedAvg => sgd_local_train(anchor, spec, data, cfg, seed),
        Strategy::FedProx => fedprox_local_train(anchor, spec, data, cfg, seed),
        Strategy::Lss => lss_local_train(anchor, spec, data, cfg, seed).map(|o| o.model),
    }
}

/// Weighted average of client models, accumulated in ascending client id.
pub fn aggregate(updates: &[(usize, ParamVector, f64)]) -> Result<ParamVector> {
    let mut order: Vec<&(usize, ParamVector, f64)> = updates.iter().collect();
    order.sort_by_key(|u| u.0);
    let models: Vec<&ParamVector> = order.iter().map(|u| &u.1).collect();
    let weights: Vec<f64> = order.iter().map(|u| u.2).collect();
    weighted_average_refs(&models, &weights)
}

/// Output of [`run_round`].
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub global: ParamVector,
    pub record: RoundRecord,
    /// Client models in ascending id order.
    pub client_models: Vec<(usize, ParamVector)>,
}

/// Broadcast, local training with per-client seeds derived from
/// `round_seed` and the client id, then aggregation.
pub fn run_round(
    global: &ParamVector,
    clients: &[Client],
    ctx: &RoundContext<'_>,
    round: usize,
    round_seed: u64,
) -> Result<RoundOutput> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    let start = Instant::now();
    let train = |c: &Client| -> Result<(usize, ParamVector, f64)> {
        let seed = seed::client_seed(round_seed, c.id);
        local_update(ctx.strategy, global, ctx.spec, &c.data, ctx.local, seed)
            .map(|m| (c.id, m, c.weight))
            .map_err(|e| e.for_client(c.id))
    };
    let mut updates: Vec<(usize, ParamVector, f64)> = if ctx.parallel {
        clients.par_iter().map(train).collect::<Result<_>>()?
    } else {
        clients.iter().map(train).collect::<Result<_>>()?
    };
    updates.sort_by_key(|u| u.0);
    let new_global = aggregate(&updates)?;

    let (global_test_loss, global_test_accuracy) = evaluate(&new_global, ctx.spec, &ctx.test.batch())?;
    let mut client_accuracies = Vec::with_capacity(updates.len());
    let mut update_norms = Vec::with_capacity(updates.len());
    for (_, m, _) in &updates {
        client_accuracies.push(evaluate(m, ctx.spec, &ctx.test.batch())?.1);
        update_norms.push(raw_distance(m.as_slice(), global.as_slice()));
    }
    let record = RoundRecord {
        round,
        global_test_accuracy,
        global_test_loss,
        client_accuracies,
        update_norms,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RoundOutput {
        global: new_global,
        record,
        client_models: updates.into_iter().map(|(id, m, _)| (id, m)).collect(),
    })
}

/// `steps` minibatch SGD steps on proxy data from a fresh initialization.
/// With `steps == 0` this is exactly `init_params(spec, seed)`.
pub fn warmup_pretrain(
    spec: &MlpSpec,
    proxy: &Dataset,
    steps: usize,
    eta: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ParamVector> {
    spec.validate()?;
    let mut f = init_params(spec, seed);
    let mut batcher = MiniBatcher::new(proxy, batch_size, seed::derive(seed, &[seed::STREAM_WARMUP]));
    for _ in 0..steps {
        let batch = batcher.next_batch();
        let (_, g) = loss_and_grad(&f, spec, &batch)?;
        f.add_scaled(-eta, g.as_slice());
    }
    f.ensure_finite("warm-up")?;
    Ok(f)
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        num_classes: usize,
        per_class: usize,
        input_dim: usize,
        spread: f64,
        /// Rows per class of the warm-up proxy set, drawn with a disjoint seed.
        proxy_per_class: usize,
    },
    /// IDX files; the validation split doubles as the warm-up proxy set.
    Idx { images: PathBuf, labels: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Blobs {
            num_classes: 10,
            per_class: 300,
            input_dim: 16,
            spread: 1.0,
            proxy_per_class: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionMode {
    Dirichlet { alpha: f64 },
    Iid,
    FeatureShift,
}

impl Default for PartitionMode {
    fn default() -> Self {
        PartitionMode::Dirichlet { alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSetup {
    pub source: DataSource,
    pub partition: PartitionMode,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for DataSetup {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            partition: PartitionMode::default(),
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSetup {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Experiment {
    pub federation: FederationConfig,
    pub local: LocalConfig,
    pub data: DataSetup,
    pub model: ModelSetup,
}

/// Materialized data for a run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub spec: MlpSpec,
    pub clients: Vec<Dataset>,
    pub test: Dataset,
    pub proxy: Dataset,
    pub plan: PartitionPlan,
    pub transforms: Option<Vec<AffineTransform>>,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.local.validate()?;
        match &self.data.source {
            DataSource::Blobs {
                num_classes,
                per_class,
                input_dim,
                spread,
                proxy_per_class,
            } => {
                let bad = |k: &str, m: &str| Error::InvalidArgument(format!("data.source.{k}: {m}"));
                if *num_classes < 2 {
                    return Err(bad("num_classes", "must be at least 2"));
                }
                if *per_class == 0 || *proxy_per_class == 0 {
                    return Err(bad("per_class", "must be positive"));
                }
                if *input_dim == 0 {
                    return Err(bad("input_dim", "must be positive"));
                }
                if !(*spread > 0.0) {
                    return Err(bad("spread", "must be positive"));
                }
            }
            DataSource::Idx { .. } => {}
        }
        if let PartitionMode::Dirichlet { alpha } = self.data.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "partition.alpha: must be positive, got {alpha}"
                )));
            }
        }
        Ok(())
    }

    pub fn prepare_data(&self) -> Result<PreparedData> {
        let master = self.federation.master_seed;
        let m = self.federation.num_clients;
        let (full, proxy_source) = match &self.data.source {
            DataSource::Blobs {
                num_classes,
                per_class,
                input_dim,
                spread,
                proxy_per_class,
            } => {
                let full = gen_blobs(
                    *num_classes,
                    *per_class,
                    *input_dim,
                    *spread,
                    seed::derive(master, &[seed::STREAM_DATA]),
                )?;
                let proxy = gen_blobs(
                    *num_classes,
                    *proxy_per_class,
                    *input_dim,
                    *spread,
                    seed::derive(master, &[seed::STREAM_PROXY]),
                )?;
                (full, Some(proxy))
            }
            DataSource::Idx { images, labels } => (load_idx(images, labels)?, None),
        };
        let splits = train_val_test_split(&full, self.data.val_frac, self.data.test_frac, master)?;
        let proxy = proxy_source.unwrap_or_else(|| splits.val.clone());
        let spec = MlpSpec {
            input_dim: full.input_dim(),
            hidden_dims: self.model.hidden_dims.clone(),
            num_classes: full.num_classes(),
            activation: self.model.activation,
        };
        spec.validate()?;

        let part_seed = seed::derive(master, &[seed::STREAM_PARTITION]);
        let (plan, clients, test, transforms) = match self.data.partition {
            PartitionMode::Dirichlet { alpha } => {
                let plan = dirichlet_partition(&splits.train, m, alpha, part_seed)?;
                let clients = plan.client_datasets(&splits.train)?;
                (plan, clients, splits.test, None)
            }
            PartitionMode::Iid => {
                let plan = iid_partition(&splits.train, m, part_seed)?;
                let clients = plan.client_datasets(&splits.train)?;
                (plan, clients, splits.test, None)
            }
            PartitionMode::FeatureShift => {
                let policy = ShiftPolicy::default();
                let (plan, transforms) = feature_shift_partition(&splits.train, m, part_seed, &policy)?;
                let clients = plan
                    .client_datasets(&splits.train)?
                    .iter()
                    .zip(&transforms)
                    .map(|(d, t)| t.apply_to(d))
                    .collect::<Result<Vec<_>>>()?;
                // the global test set mixes every client's domain
                let test_plan = iid_partition(&splits.test, m, seed::derive(part_seed, &[1]))?;
                let shards = test_plan
                    .client_datasets(&splits.test)?
                    .iter()
                    .zip(&transforms)
                    .map(|(d, t)| t.apply_to(d))
                    .collect::<Result<Vec<_>>>()?;
                (plan, clients, Dataset::concat(&shards)?, Some(transforms))
            }
        };
        Ok(PreparedData {
            spec,
            clients,
            test,
            proxy,
            plan,
            transforms,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    pub final_model: ParamVector,
    /// Warm-up output, the round-0 anchor.
    pub initial_model: ParamVector,
    pub data: PreparedData,
    /// Client models from the last round, ascending id.
    pub last_client_models: Vec<ParamVector>,
    pub client_weights: Vec<f64>,
}

/// Warm-up, partition, `rounds` rounds with evaluation after each.
/// `threads == 1` trains clients sequentially; larger values use a dedicated
/// pool of that many workers. Results do not depend on `threads`.
pub fn run_experiment(exp: &Experiment, threads: usize) -> Result<ExperimentOutcome> {
    exp.validate()?;
    let data = exp.prepare_data()?;
    let fed = &exp.federation;
    let weights = match &fed.client_weights {
        Some(w) => w.clone(),
        None => data.plan.data_weights(),
    };
    check_client_weights(&weights, data.clients.len())?;

    let initial = warmup_pretrain(
        &data.spec,
        &data.proxy,
        fed.warmup_steps,
        fed.warmup_eta,
        exp.local.batch_size,
        seed::derive(fed.master_seed, &[seed::STREAM_INIT]),
    )?;
    let clients: Vec<Client> = data
        .clients
        .iter()
        .zip(&weights)
        .enumerate()
        .map(|(id, (d, &w))| Client {
            id,
            data: d.clone(),
            weight: w,
        })
        .collect();

    let ctx = RoundContext {
        spec: &data.spec,
        strategy: fed.strategy,
        local: &exp.local,
        test: &data.test,
        parallel: threads > 1,
    };
    let body = || -> Result<(Vec<RoundRecord>, ParamVector, Vec<ParamVector>)> {
        let mut global = initial.clone();
        let mut records = Vec::with_capacity(fed.rounds);
        let mut last = Vec::new();
        for r in 0..fed.rounds {
            let out = run_round(&global, &clients, &ctx, r, seed::round_seed(fed.master_seed, r))?;
            global = out.global;
            records.push(out.record);
            last = out.client_models.into_iter().map(|(_, m)| m).collect();
        }
        Ok((records, global, last))
    };
    let (records, final_model, last_client_models) = if threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(body)?
    } else {
        body()?
    };
    Ok(ExperimentOutcome {
        records,
        final_model,
        initial_model: initial,
        data,
        last_client_models,
        client_weights: weights,
    })
}

pub const ROUNDS_CSV_HEADER: &str = "round,global_acc,global_loss,client_accs,update_norms,wall_time_s";

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

/// Writes records as CSV under [`ROUNDS_CSV_HEADER`]. Floats use Rust's
/// shortest round-trip formatting. When `with_wall_time` is false the
/// timing column is written as `0` so identical runs give identical files.
pub fn write_rounds_csv<W: Write>(mut w: W, records: &[RoundRecord], with_wall_time: bool) -> Result<()> {
    writeln!(w, "{ROUNDS_CSV_HEADER}")?;
    for r in records {
        let wall = if with_wall_time {
            format!("{:.6}", r.wall_time_seconds)
        } else {
            "0".to_string()
        };
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.round,
            r.global_test_accuracy,
            r.global_test_loss,
            join(&r.client_accuracies),
            join(&r.update_norms),
            wall
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn rounds_csv_string(records: &[RoundRecord], with_wall_time: bool) -> String {
    let mut buf = Vec::new();
    write_rounds_csv(&mut buf, records, with_wall_time).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("csv is ascii")
}
