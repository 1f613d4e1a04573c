//! End-to-end training and evaluation.
//!
//! For every mini-batch: forward, per-sample BCE and one-class contrastive
//! terms, combined loss averaged over the batch, backward, Adam step, then the
//! bonafide-center update from the embeddings of that forward pass. After
//! each epoch the combined loss on the dev fold decides model selection. The
//! frozen network then embeds the train-fold bonafide samples for the
//! one-class GMM, whose log-likelihood is the detection score.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{adam_step, init_network, AdamState, ForwardResult, Network, NetworkConfig, NetworkParams, Upstream};
use crate::error::{config, input, Error, Result};
use crate::losses::{bce_loss, combined_loss, distance_to_center, occl_loss, update_center, BonafideCenter, LossConfig};
use crate::metrics::{self, det_points, eer, select_threshold, MetricsReport, ScoredSet};
use crate::ocgmm::{fit_em, EmConfig, GmmParams};
use crate::protocol::{generate_synthetic, mad_normalize, save_dataset, split_protocol, Dataset, GeneratorConfig, Label, Protocol, ProtocolSplit, Sample};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OCCL";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const GMM_MAGIC: &[u8; 4] = b"OCGM";
pub const GMM_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `(1 − λ)·BCE + λ·OCCL`
    #[default]
    Combined,
    /// BCE alone; the bonafide center is still tracked for diagnostics.
    BceOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    #[default]
    MinDevLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    /// Shape of the network. Empty `channels` means every dataset channel and
    /// a zero `input_dim_per_channel` is taken from the dataset. The init seed
    /// is always the run seed.
    pub network: NetworkConfig,
    pub seed: u64,
    /// Restrict training and inference to these channels.
    pub channel_subset: Option<Vec<String>>,
    pub model_selection: ModelSelection,
    pub objective: Objective,
    /// Apply MAD normalization with this factor to every channel vector, then
    /// scale to `[0, 1]`.
    pub mad_k: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-5,
            loss: LossConfig::default(),
            network: NetworkConfig::default(),
            seed: 0,
            channel_subset: None,
            model_selection: ModelSelection::MinDevLoss,
            objective: Objective::Combined,
            mad_k: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config("epochs and batch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if let Some(k) = self.mad_k {
            if !(k.is_finite() && k > 0.0) {
                return Err(config(format!("mad_k must be > 0, got {k}")));
            }
        }
        self.loss.validate()
    }

    /// Network configuration for `data`, honoring `channel_subset`.
    pub fn resolve_network(&self, data: &Dataset) -> Result<NetworkConfig> {
        let mut net = self.network.clone();
        if let Some(subset) = &self.channel_subset {
            if subset.is_empty() {
                return Err(config("channel subset is empty"));
            }
            net.channels = subset.clone();
        } else if net.channels.is_empty() {
            net.channels = data.channel_names();
        }
        let mut dim = None;
        for name in &net.channels {
            let d = data
                .channel_dim(name)
                .ok_or_else(|| config(format!("channel `{name}` is not in the dataset")))?;
            match dim {
                None => dim = Some(d),
                Some(prev) if prev != d => {
                    return Err(config(format!(
                        "selected channels have different dimensions ({prev} vs {d} for `{name}`)"
                    )))
                }
                _ => {}
            }
        }
        let dim = dim.ok_or_else(|| config("no channels selected"))?;
        if net.input_dim_per_channel != 0 && net.input_dim_per_channel != dim {
            return Err(config(format!(
                "network expects {} values per channel, dataset has {dim}",
                net.input_dim_per_channel
            )));
        }
        net.input_dim_per_channel = dim;
        net.seed = self.seed;
        net.validate()?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Zero-based; epoch 0 is the first pass over the train fold.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Mean distance of train bonafide embeddings to the bonafide center.
    pub bonafide_spread: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Bonafide spread of the untrained network, measured around the mean
    /// train bonafide embedding.
    pub initial_bonafide_spread: f64,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub network: Network,
    pub center: BonafideCenter,
    pub train_config: TrainConfig,
    pub history: History,
    pub selected_epoch: usize,
}

impl Checkpoint {
    pub fn selected(&self) -> Option<&EpochRecord> {
        self.history.epochs.iter().find(|e| e.epoch == self.selected_epoch)
    }
}

/// Flat network input for `sample`, reading only the configured channels.
pub fn sample_input(net: &NetworkConfig, sample: &Sample, mad_k: Option<f64>) -> Result<Vec<f64>> {
    let mut x = Vec::with_capacity(net.input_len());
    for name in &net.channels {
        let v = sample
            .channels
            .get(name)
            .ok_or_else(|| input(format!("sample {} lacks channel `{name}`", sample.id)))?;
        if v.len() != net.input_dim_per_channel {
            return Err(input(format!(
                "sample {}: channel `{name}` has {} values, expected {}",
                sample.id,
                v.len(),
                net.input_dim_per_channel
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(input(format!("sample {}: channel `{name}` has non-finite values", sample.id)));
        }
        match mad_k {
            Some(k) => x.extend(mad_normalize(v, k)?.into_iter().map(|u| u / 255.0)),
            None => x.extend_from_slice(v),
        }
    }
    Ok(x)
}

struct Prepared {
    inputs: Vec<Vec<f64>>,
    labels: Vec<Label>,
}

fn prepare(net: &NetworkConfig, samples: &[&Sample], mad_k: Option<f64>) -> Result<Prepared> {
    Ok(Prepared {
        inputs: samples
            .iter()
            .map(|s| sample_input(net, s, mad_k))
            .collect::<Result<_>>()?,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}

/// Combined loss of one sample plus the upstream derivatives (unscaled).
fn sample_loss(
    p: f64,
    emb: &[f64],
    y: Label,
    center: &BonafideCenter,
    cfg: &TrainConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let (bce, dbce) = bce_loss(p, y)?;
    match cfg.objective {
        Objective::BceOnly => Ok((bce, dbce, vec![0.0; emb.len()])),
        Objective::Combined => {
            let lambda = cfg.loss.lambda;
            let (occl, docc) = if center.initialized {
                occl_loss(emb, center, y, cfg.loss.margin)?
            } else {
                (0.0, vec![0.0; emb.len()])
            };
            let d_emb = docc.into_iter().map(|g| lambda * g).collect();
            Ok((combined_loss(bce, occl, lambda), (1.0 - lambda) * dbce, d_emb))
        }
    }
}

fn mean_loss(net: &Network, data: &Prepared, center: &BonafideCenter, cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let fr = net.forward(x)?;
        if !fr.probability.is_finite() || fr.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training("non-finite network output on the dev fold".into()));
        }
        total += sample_loss(fr.probability, &fr.embedding, y, center, cfg)?.0;
    }
    Ok(total / data.inputs.len() as f64)
}

fn bonafide_embeddings(net: &Network, data: &Prepared) -> Result<Vec<Vec<f64>>> {
    data.inputs
        .iter()
        .zip(&data.labels)
        .filter(|(_, &y)| y == Label::Bonafide)
        .map(|(x, _)| Ok(net.forward(x)?.embedding))
        .collect()
}

fn mean_spread(embeddings: &[Vec<f64>], center: &BonafideCenter) -> Result<f64> {
    let mut total = 0.0;
    for e in embeddings {
        total += distance_to_center(e, center)?;
    }
    Ok(total / embeddings.len() as f64)
}

fn mean_vector(vs: &[Vec<f64>]) -> Vec<f64> {
    let d = vs[0].len();
    (0..d)
        .map(|j| vs.iter().map(|v| v[j]).sum::<f64>() / vs.len() as f64)
        .collect()
}

/// Mean batch loss and its parameter gradients for already computed forward
/// passes.
fn loss_and_grads(
    net: &Network,
    batch: &[ForwardResult],
    labels: &[Label],
    center: &BonafideCenter,
    cfg: &TrainConfig,
) -> Result<(f64, NetworkParams)> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut upstream = Vec::with_capacity(batch.len());
    for (fr, &y) in batch.iter().zip(labels) {
        let (l, dp, demb) = sample_loss(fr.probability, &fr.embedding, y, center, cfg)?;
        total += l;
        upstream.push(Upstream {
            d_probability: dp * scale,
            d_embedding: demb.into_iter().map(|g| g * scale).collect(),
        });
    }
    Ok((total * scale, net.backward(batch, &upstream)?))
}

/// Training objective of one batch against a fixed center, as minimized by
/// [`train`], with its gradient.
pub fn batch_objective(
    net: &Network,
    inputs: &[Vec<f64>],
    labels: &[Label],
    center: &BonafideCenter,
    cfg: &TrainConfig,
) -> Result<(f64, NetworkParams)> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(input(format!("{} inputs, {} labels", inputs.len(), labels.len())));
    }
    let batch = inputs.iter().map(|x| net.forward(x)).collect::<Result<Vec<_>>>()?;
    loss_and_grads(net, &batch, labels, center, cfg)
}

/// Trains the embedding network on the train fold and keeps the epoch with
/// the lowest dev loss.
pub fn train(split: &ProtocolSplit, data: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, History)> {
    cfg.validate()?;
    let net_cfg = cfg.resolve_network(data)?;
    let train_samples = data.select(&split.train)?;
    let dev_samples = data.select(&split.dev)?;
    for label in [Label::Bonafide, Label::Attack] {
        if !train_samples.iter().any(|s| s.label == label) {
            return Err(Error::Training(format!("train fold has no {label} samples")));
        }
    }
    if dev_samples.is_empty() {
        return Err(Error::Training("dev fold is empty".into()));
    }
    let train_set = prepare(&net_cfg, &train_samples, cfg.mad_k)?;
    let dev_set = prepare(&net_cfg, &dev_samples, cfg.mad_k)?;

    let mut net = init_network(&net_cfg)?;
    let mut adam = AdamState::new(&net.params);
    let mut center = BonafideCenter::new(net_cfg.embedding_dim, cfg.loss.alpha);

    let initial = bonafide_embeddings(&net, &train_set)?;
    let mut history = History {
        initial_bonafide_spread: mean_spread(&initial, &BonafideCenter::at(mean_vector(&initial), cfg.loss.alpha))?,
        epochs: Vec::with_capacity(cfg.epochs),
    };

    let mut best: Option<(f64, usize, NetworkParams, BonafideCenter)> = None;
    let mut order: Vec<usize> = (0..train_set.inputs.len()).collect();
    let mut batch_index = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut epoch_total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| net.forward(&train_set.inputs[i]))
                .collect::<Result<_>>()?;
            let labels: Vec<Label> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            if batch
                .iter()
                .any(|fr| !fr.probability.is_finite() || fr.embedding.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Training(format!(
                    "non-finite network output in batch {batch_index} (epoch {epoch})"
                )));
            }
            let bona: Vec<&[f64]> = batch
                .iter()
                .zip(&labels)
                .filter(|(_, &y)| y == Label::Bonafide)
                .map(|(fr, _)| fr.embedding.as_slice())
                .collect();
            if !center.initialized && !bona.is_empty() {
                center = update_center(&center, &bona, cfg.loss.alpha)?;
            }

            let (batch_loss, grads) = loss_and_grads(&net, &batch, &labels, &center, cfg)?;
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss in batch {batch_index} (epoch {epoch})"
                )));
            }
            epoch_total += batch_loss * chunk.len() as f64;

            adam_step(&mut net.params, &grads, &mut adam, cfg.lr, cfg.weight_decay)?;
            center = update_center(&center, &bona, cfg.loss.alpha)?;
            batch_index += 1;
        }

        let dev_loss = mean_loss(&net, &dev_set, &center, cfg)?;
        if !dev_loss.is_finite() {
            return Err(Error::Training(format!("non-finite dev loss after epoch {epoch}")));
        }
        let spread = mean_spread(&bonafide_embeddings(&net, &train_set)?, &center)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_total / train_set.inputs.len() as f64,
            dev_loss,
            bonafide_spread: spread,
        });
        if best.as_ref().is_none_or(|(l, ..)| dev_loss < *l) {
            best = Some((dev_loss, epoch, net.params.clone(), center.clone()));
        }
    }

    let (_, selected_epoch, params, center) = best.expect("at least one epoch");
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        network: Network {
            config: net_cfg,
            params,
        },
        center,
        train_config: cfg.clone(),
        history: history.clone(),
        selected_epoch,
    };
    Ok((ckpt, history))
}

/// `(sample id, embedding)` in input order.
pub fn extract_embeddings(ckpt: &Checkpoint, samples: &[&Sample]) -> Result<Vec<(u64, Vec<f64>)>> {
    let mad_k = ckpt.train_config.mad_k;
    samples
        .iter()
        .map(|s| {
            let x = sample_input(&ckpt.network.config, s, mad_k)?;
            Ok((s.id, ckpt.network.forward(&x)?.embedding))
        })
        .collect()
}

/// Fits the one-class GMM on train-fold bonafide embeddings.
pub fn fit_one_class(
    ckpt: &Checkpoint,
    split: &ProtocolSplit,
    data: &Dataset,
    em: &EmConfig,
) -> Result<(GmmParams, Vec<f64>)> {
    let bona: Vec<&Sample> = data
        .select(&split.train)?
        .into_iter()
        .filter(|s| s.label == Label::Bonafide)
        .collect();
    let embeddings: Vec<Vec<f64>> = extract_embeddings(ckpt, &bona)?
        .into_iter()
        .map(|(_, e)| e)
        .collect();
    fit_em(&embeddings, em)
}

/// How samples are turned into detection scores.
#[derive(Clone, Copy, Debug)]
pub enum Scoring<'a> {
    /// GMM log-likelihood of the embedding.
    Gmm(&'a GmmParams),
    /// Network output probability (binary classifier baseline).
    Probability,
}

pub fn score_samples(ckpt: &Checkpoint, scoring: Scoring<'_>, samples: &[&Sample]) -> Result<ScoredSet> {
    let mad_k = ckpt.train_config.mad_k;
    let scorer = match scoring {
        Scoring::Gmm(g) => Some(g.scorer()?),
        Scoring::Probability => None,
    };
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let fr = ckpt.network.forward(&sample_input(&ckpt.network.config, s, mad_k)?)?;
        scores.push(match &scorer {
            Some(g) => g.log_likelihood(&fr.embedding)?,
            None => fr.probability,
        });
    }
    ScoredSet::new(scores, samples.iter().map(|s| s.label).collect())
}

/// Dev-anchored threshold at `target_bpcer`, dev/eval rates, eval EER and DET.
pub fn evaluate_with(
    ckpt: &Checkpoint,
    scoring: Scoring<'_>,
    split: &ProtocolSplit,
    data: &Dataset,
    target_bpcer: f64,
) -> Result<MetricsReport> {
    let dev = score_samples(ckpt, scoring, &data.select(&split.dev)?)?;
    let eval = score_samples(ckpt, scoring, &data.select(&split.eval)?)?;
    let tau = select_threshold(&dev, target_bpcer)?;
    let d = metrics::compute_rates(&dev, tau)?;
    let e = metrics::compute_rates(&eval, tau)?;
    let (eer_value, eer_tau) = eer(&eval)?;
    Ok(MetricsReport {
        threshold: tau,
        dev_apcer: d.apcer,
        dev_bpcer: d.bpcer,
        dev_acer: d.acer,
        eval_apcer: e.apcer,
        eval_bpcer: e.bpcer,
        eval_acer: e.acer,
        eer: eer_value,
        eer_threshold: eer_tau,
        det_points: det_points(&eval)?,
    })
}

pub fn evaluate(
    ckpt: &Checkpoint,
    gmm: &GmmParams,
    split: &ProtocolSplit,
    data: &Dataset,
    target_bpcer: f64,
) -> Result<MetricsReport> {
    evaluate_with(ckpt, Scoring::Gmm(gmm), split, data, target_bpcer)
}

// ---------------------------------------------------------------------------
// Embeddings CSV

pub fn embeddings_csv(rows: &[(u64, Vec<f64>)]) -> String {
    let dim = rows.first().map_or(0, |(_, e)| e.len());
    let mut out = String::from("id");
    for j in 1..=dim {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for (id, e) in rows {
        out.push_str(&id.to_string());
        for v in e {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings_csv(text: &str) -> Result<Vec<(u64, Vec<f64>)>> {
    let mut lines = text.lines().enumerate();
    let dim = match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, header)) => header.split(',').count().saturating_sub(1),
    };
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let err = |m: String| Error::Parse { line: i + 1, message: m };
            let mut fields = line.split(',');
            let id = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| err("bad id".into()))?;
            let e: Vec<f64> = fields
                .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad value `{f}`"))))
                .collect::<Result<_>>()?;
            if e.len() != dim {
                return Err(err(format!("{} values, header declares {dim}", e.len())));
            }
            Ok((id, e))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Binary artifacts

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    network: NetworkConfig,
    train: TrainConfig,
    history: History,
    selected_epoch: usize,
    center_alpha: f64,
    center_initialized: bool,
}

#[derive(Serialize, Deserialize)]
struct GmmHeader {
    dim: usize,
    k: usize,
}

fn write_container(magic: &[u8; 4], version: u32, header: &[u8], tensors: &[&[f64]]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in *t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Load(format!("{} is truncated at byte {}", self.what, self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n > remaining {
            return Err(Error::Load(format!(
                "{}: length field {n} exceeds the {remaining} remaining bytes",
                self.what
            )));
        }
        Ok(n as usize)
    }

    fn tensor(&mut self, expected: usize, name: &str) -> Result<Vec<f64>> {
        let n = self.len()?;
        if n != expected {
            return Err(Error::Load(format!(
                "{}: tensor {name} has length {n}, expected {expected}",
                self.what
            )));
        }
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Load(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn open_container<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32, what: &'static str) -> Result<(Reader<'a>, &'a [u8])> {
    let mut r = Reader { bytes, pos: 0, what };
    if r.take(4)? != magic {
        return Err(Error::Load(format!("{what}: bad magic, not a {what} file")));
    }
    let found = r.u32()?;
    if found != version {
        return Err(Error::Load(format!(
            "{what}: unsupported format version {found} (this build reads version {version})"
        )));
    }
    let hlen = r.len()?;
    let header = r.take(hlen)?;
    Ok((r, header))
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        network: ckpt.network.config.clone(),
        train: ckpt.train_config.clone(),
        history: ckpt.history.clone(),
        selected_epoch: ckpt.selected_epoch,
        center_alpha: ckpt.center.alpha,
        center_initialized: ckpt.center.initialized,
    })?;
    let mut tensors: Vec<&[f64]> = ckpt.network.params.tensors().into_iter().map(|(_, t)| t).collect();
    tensors.push(&ckpt.center.center);
    Ok(write_container(CHECKPOINT_MAGIC, ckpt.format_version, &header, &tensors))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (mut r, header) = open_container(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let h: CheckpointHeader =
        serde_json::from_slice(header).map_err(|e| Error::Load(format!("checkpoint header: {e}")))?;
    h.network
        .validate()
        .map_err(|e| Error::Load(format!("checkpoint network config: {e}")))?;
    let mut params = NetworkParams::zeros(&h.network);
    let count = r.u64()? as usize;
    let expected = params.tensors().len() + 1;
    if count != expected {
        return Err(Error::Load(format!(
            "checkpoint: {count} tensors, expected {expected}"
        )));
    }
    for (name, t) in params.tensors_mut() {
        let v = r.tensor(t.len(), &name)?;
        *t = v;
    }
    let center = r.tensor(h.network.embedding_dim, "center")?;
    r.finish()?;
    Ok(Checkpoint {
        format_version: CHECKPOINT_VERSION,
        network: Network::from_parts(h.network, params)?,
        center: BonafideCenter {
            center,
            alpha: h.center_alpha,
            initialized: h.center_initialized,
        },
        train_config: h.train,
        history: h.history,
        selected_epoch: h.selected_epoch,
    })
}

pub fn gmm_to_bytes(gmm: &GmmParams) -> Result<Vec<u8>> {
    gmm.validate()?;
    let header = serde_json::to_vec(&GmmHeader {
        dim: gmm.dim,
        k: gmm.k(),
    })?;
    let mut tensors: Vec<&[f64]> = vec![&gmm.weights];
    tensors.extend(gmm.means.iter().map(|m| m.as_slice()));
    tensors.extend(gmm.covariances.iter().map(|c| c.as_slice()));
    Ok(write_container(GMM_MAGIC, GMM_VERSION, &header, &tensors))
}

pub fn gmm_from_bytes(bytes: &[u8]) -> Result<GmmParams> {
    let (mut r, header) = open_container(bytes, GMM_MAGIC, GMM_VERSION, "gmm")?;
    let h: GmmHeader = serde_json::from_slice(header).map_err(|e| Error::Load(format!("gmm header: {e}")))?;
    if h.k == 0 || h.dim == 0 {
        return Err(Error::Load("gmm: empty mixture".into()));
    }
    let count = r.u64()? as usize;
    if count != 1 + 2 * h.k {
        return Err(Error::Load(format!("gmm: {count} tensors, expected {}", 1 + 2 * h.k)));
    }
    let weights = r.tensor(h.k, "weights")?;
    let means = (0..h.k)
        .map(|k| r.tensor(h.dim, &format!("mean {k}")))
        .collect::<Result<Vec<_>>>()?;
    let covariances = (0..h.k)
        .map(|k| r.tensor(h.dim * h.dim, &format!("covariance {k}")))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(GmmParams {
        dim: h.dim,
        weights,
        means,
        covariances,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &checkpoint_to_bytes(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

pub fn save_gmm(gmm: &GmmParams, path: &Path) -> Result<()> {
    write_file(path, &gmm_to_bytes(gmm)?)
}

pub fn load_gmm(path: &Path) -> Result<GmmParams> {
    gmm_from_bytes(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Whole-protocol runs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Synthetic data description; `None` uses [`GeneratorConfig::standard`]
    /// with the run seed.
    pub generator: Option<GeneratorConfig>,
    pub train: TrainConfig,
    pub em: EmConfig,
    pub target_bpcer: f64,
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generator: None,
            train: TrainConfig::default(),
            em: EmConfig::default(),
            target_bpcer: 0.01,
            split_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn generator_config(&self) -> GeneratorConfig {
        self.generator
            .clone()
            .unwrap_or_else(|| GeneratorConfig::standard(self.train.seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub protocol: Protocol,
    pub channels: Vec<String>,
    pub selected_epoch: usize,
    pub metrics: MetricsReport,
}

/// Outcome of training and evaluating one channel subset.
pub struct SubsetRun {
    pub checkpoint: Checkpoint,
    pub gmm: GmmParams,
    pub report: RunReport,
}

/// Splits, trains, fits the GMM and evaluates on an in-memory dataset.
pub fn run_on_dataset(data: &Dataset, protocol: &Protocol, cfg: &RunConfig) -> Result<SubsetRun> {
    let split = split_protocol(data, protocol, cfg.split_seed)?;
    let (checkpoint, _) = train(&split, data, &cfg.train)?;
    let (gmm, _) = fit_one_class(&checkpoint, &split, data, &cfg.em)?;
    let metrics = evaluate(&checkpoint, &gmm, &split, data, cfg.target_bpcer)?;
    let report = RunReport {
        protocol: protocol.clone(),
        channels: checkpoint.network.config.channels.clone(),
        selected_epoch: checkpoint.selected_epoch,
        metrics,
    };
    Ok(SubsetRun {
        checkpoint,
        gmm,
        report,
    })
}

/// Writes every artifact of one run into `dir` and returns their paths.
pub fn write_run(run: &SubsetRun, data: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write_file(&p, &bytes)?;
        paths.push(p);
        Ok(())
    };
    emit("model.ocnn", checkpoint_to_bytes(&run.checkpoint)?)?;
    emit("gmm.ocgm", gmm_to_bytes(&run.gmm)?)?;
    let all: Vec<&Sample> = data.samples.iter().collect();
    emit(
        "embeddings.csv",
        embeddings_csv(&extract_embeddings(&run.checkpoint, &all)?).into_bytes(),
    )?;
    emit("det.csv", metrics::det_csv(&run.report.metrics.det_points).into_bytes())?;
    let mut json = serde_json::to_vec_pretty(&run.report)?;
    json.push(b'\n');
    emit("report.json", json)?;
    let title = format!(
        "{} [{}]",
        run.report.protocol,
        run.report.channels.join(",")
    );
    emit("report.txt", run.report.metrics.to_table(&title).into_bytes())?;
    Ok(paths)
}

/// Generates the data, then runs the protocol once per channel subset
/// (`None` = all channels). Subset runs go to `out/<ch1+ch2...>/`; a single
/// full run writes straight into `out`.
pub fn run_protocol(
    cfg: &RunConfig,
    protocol: &Protocol,
    subsets: &[Option<Vec<String>>],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let data = generate_synthetic(&cfg.generator_config())?;
    fs::create_dir_all(out)?;
    let data_path = out.join("data.ocds");
    save_dataset(&data, &data_path)?;
    let mut paths = vec![data_path];
    let single = subsets.len() <= 1;
    let subsets: Vec<Option<Vec<String>>> = if subsets.is_empty() { vec![None] } else { subsets.to_vec() };
    for subset in subsets {
        let mut run_cfg = cfg.clone();
        if subset.is_some() {
            run_cfg.train.channel_subset = subset.clone();
        }
        let run = run_on_dataset(&data, protocol, &run_cfg)?;
        let dir = match (&subset, single) {
            (Some(s), false) => out.join(s.join("+")),
            _ => out.to_path_buf(),
        };
        paths.extend(write_run(&run, &data, &dir)?);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::GeneratorConfig;

    fn small_data(seed: u64) -> Dataset {
        let mut g = GeneratorConfig::standard(seed);
        g.bonafide.count = 90;
        for a in &mut g.attacks {
            a.count = 36;
        }
        generate_synthetic(&g).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 1e-3,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn resolve_network_uses_dataset_layout() {
        let d = small_data(1);
        let net = quick_cfg().resolve_network(&d).unwrap();
        assert_eq!(net.channels, d.channel_names());
        assert_eq!(net.input_dim_per_channel, 4);
        let mut cfg = quick_cfg();
        cfg.channel_subset = Some(vec!["depth".into(), "sonar".into()]);
        assert!(matches!(cfg.resolve_network(&d), Err(Error::Config(_))));
    }

    #[test]
    fn model_selection_picks_min_dev_loss() {
        let d = small_data(2);
        let split = split_protocol(&d, &Protocol::Grandtest, 0).unwrap();
        let (ckpt, hist) = train(&split, &d, &quick_cfg()).unwrap();
        assert_eq!(hist.epochs.len(), 3);
        assert_eq!(hist.epochs[0].epoch, 0);
        let sel = ckpt.selected().unwrap().dev_loss;
        assert!(hist.epochs.iter().all(|e| sel <= e.dev_loss));
        assert!(ckpt.center.initialized);
    }

    #[test]
    fn single_class_train_fold_is_rejected() {
        let d = small_data(3);
        let mut split = split_protocol(&d, &Protocol::Grandtest, 0).unwrap();
        let sel = d.select(&split.train).unwrap();
        split.train = sel.iter().filter(|s| s.label == Label::Bonafide).map(|s| s.id).collect();
        assert!(matches!(train(&split, &d, &quick_cfg()), Err(Error::Training(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let d = small_data(4);
        let split = split_protocol(&d, &Protocol::Grandtest, 0).unwrap();
        let (ckpt, _) = train(&split, &d, &quick_cfg()).unwrap();
        let bytes = checkpoint_to_bytes(&ckpt).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        let s = &d.samples[0];
        let x = sample_input(&ckpt.network.config, s, None).unwrap();
        let a = ckpt.network.forward(&x).unwrap();
        let b = back.network.forward(&x).unwrap();
        assert_eq!(a.probability.to_bits(), b.probability.to_bits());

        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Load(_))));
        assert!(matches!(checkpoint_from_bytes(&bytes[..10]), Err(Error::Load(_))));
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        match checkpoint_from_bytes(&bumped) {
            Err(Error::Load(m)) => assert!(m.contains('2') && m.contains('1'), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
        let mut huge = bytes.clone();
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(checkpoint_from_bytes(&huge), Err(Error::Load(_))));
    }

    #[test]
    fn gmm_round_trip() {
        let g = GmmParams {
            dim: 2,
            weights: vec![0.25, 0.75],
            means: vec![vec![0.1, -0.2], vec![3.0, 1.0 / 3.0]],
            covariances: vec![vec![1.0, 0.1, 0.1, 2.0], vec![0.5, 0.0, 0.0, 0.5]],
        };
        let bytes = gmm_to_bytes(&g).unwrap();
        assert_eq!(gmm_from_bytes(&bytes).unwrap(), g);
        assert!(matches!(gmm_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Load(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(gmm_from_bytes(&bad), Err(Error::Load(_))));
    }

    #[test]
    fn embeddings_csv_round_trip_is_lossless() {
        let rows = vec![
            (3, vec![0.1, -1.0 / 3.0, 1e-300, 12345.678901234567]),
            (7, vec![f64::MIN_POSITIVE, -0.0, 2.0f64.sqrt(), std::f64::consts::PI]),
        ];
        let text = embeddings_csv(&rows);
        assert!(text.starts_with("id,e1,e2,e3,e4\n"));
        let back = parse_embeddings_csv(&text).unwrap();
        for ((i, a), (j, b)) in rows.iter().zip(&back) {
            assert_eq!(i, j);
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn zero_weight_checkpoint_embeds_to_zero() {
        let d = small_data(5);
        let net_cfg = quick_cfg().resolve_network(&d).unwrap();
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            network: Network {
                params: NetworkParams::zeros(&net_cfg),
                config: net_cfg,
            },
            center: BonafideCenter::new(10, 0.5),
            train_config: quick_cfg(),
            history: History::default(),
            selected_epoch: 0,
        };
        let all: Vec<&Sample> = d.samples.iter().collect();
        let e = extract_embeddings(&ckpt, &all).unwrap();
        assert!(e.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0)));
        assert_eq!(e, extract_embeddings(&ckpt, &all).unwrap());
    }

    #[test]
    fn mad_preprocessing_maps_into_unit_interval() {
        let d = small_data(6);
        let net = quick_cfg().resolve_network(&d).unwrap();
        let x = sample_input(&net, &d.samples[0], Some(4.0)).unwrap();
        assert_eq!(x.len(), 16);
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
