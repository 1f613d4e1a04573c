//! Samples, synthetic data generation, the `.ocds` dataset format, MAD
//! normalization and identity-disjoint protocol splits.
//!
//! A protocol divides identities into train/dev/eval folds. Every attack type
//! and the bonafide class are split separately so each fold sees every type;
//! the unseen-attack protocols then drop the held-out family from train and
//! dev and keep only bonafide plus that family in eval.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Error, Result};

pub const FAMILY_2D: &str = "2D";
pub const FAMILY_3D: &str = "3D";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Attack,
}

impl Label {
    /// `1.0` for bonafide, `0.0` for attack.
    pub fn target(self) -> f64 {
        match self {
            Label::Bonafide => 1.0,
            Label::Attack => 0.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Bonafide => "bonafide",
            Label::Attack => "attack",
        })
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "attack" => Ok(Label::Attack),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Train,
    Dev,
    Eval,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Train => "train",
            Group::Dev => "dev",
            Group::Eval => "eval",
        })
    }
}

impl FromStr for Group {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Group::Train),
            "dev" => Ok(Group::Dev),
            "eval" => Ok(Group::Eval),
            other => Err(format!("unknown group `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub identity: u64,
    pub channels: BTreeMap<String, Vec<f64>>,
    pub label: Label,
    pub attack_type: Option<String>,
    pub group: Group,
}

/// Samples plus the channel layout and the attack-type → family table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    /// Channel names and per-channel dimensions in file order.
    pub channels: Vec<(String, usize)>,
    pub families: BTreeMap<String, String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn channel_dim(&self, name: &str) -> Option<usize> {
        self.channels.iter().find(|(n, _)| n == name).map(|(_, d)| *d)
    }

    pub fn family_of(&self, sample: &Sample) -> Option<&str> {
        sample
            .attack_type
            .as_ref()
            .and_then(|t| self.families.get(t))
            .map(String::as_str)
    }

    /// Samples with the given ids, in the order of `ids`.
    pub fn select(&self, ids: &[u64]) -> Result<Vec<&Sample>> {
        let index: HashMap<u64, &Sample> = self.samples.iter().map(|s| (s.id, s)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| input(format!("sample id {id} not in dataset")))
            })
            .collect()
    }

    /// Checks label/attack-type consistency and channel dimensions.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id) {
                return Err(input(format!("duplicate sample id {}", s.id)));
            }
            if (s.label == Label::Attack) != s.attack_type.is_some() {
                return Err(input(format!(
                    "sample {}: attack_type must be present exactly for attacks",
                    s.id
                )));
            }
            if s.channels.len() != self.channels.len() {
                return Err(input(format!("sample {}: channel set differs from header", s.id)));
            }
            for (name, dim) in &self.channels {
                match s.channels.get(name) {
                    Some(v) if v.len() == *dim => {}
                    Some(v) => {
                        return Err(input(format!(
                            "sample {}: channel `{name}` has {} values, expected {dim}",
                            s.id,
                            v.len()
                        )))
                    }
                    None => return Err(input(format!("sample {}: missing channel `{name}`", s.id))),
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub dim: usize,
}

/// Per-channel mean and per-coordinate standard deviation of one cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub mean: BTreeMap<String, Vec<f64>>,
    pub scale: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub name: String,
    /// Family tag, e.g. `2D` or `3D`.
    pub family: String,
    pub count: usize,
    pub identities: usize,
    pub cluster: ClusterSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonafideSpec {
    pub count: usize,
    pub identities: usize,
    pub cluster: ClusterSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: Vec<ChannelSpec>,
    pub bonafide: BonafideSpec,
    pub attacks: Vec<AttackSpec>,
    /// Std-dev of a per-identity offset shared by all samples of an identity.
    #[serde(default)]
    pub identity_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn uniform_cluster(channels: &[ChannelSpec], mean: &[(&str, &[f64])], scale: &[(&str, &[f64])], base_scale: f64) -> ClusterSpec {
    let lookup = |table: &[(&str, &[f64])], name: &str, dim: usize, fill: f64| {
        table
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v.to_vec())
            .unwrap_or_else(|| vec![fill; dim])
    };
    ClusterSpec {
        mean: channels
            .iter()
            .map(|c| (c.name.clone(), lookup(mean, &c.name, c.dim, 0.0)))
            .collect(),
        scale: channels
            .iter()
            .map(|c| (c.name.clone(), lookup(scale, &c.name, c.dim, base_scale)))
            .collect(),
    }
}

impl GeneratorConfig {
    /// Four channels (color, depth, infrared, thermal) of four values each.
    ///
    /// Bonafide varies strongly in the first two coordinates of every channel
    /// and weakly in the last two. The 2D attacks sit far away along the
    /// high-variance coordinates of depth and infrared; the 3D attacks sit
    /// much closer, offset along low-variance coordinates of thermal and
    /// infrared.
    pub fn standard(seed: u64) -> Self {
        let channels: Vec<ChannelSpec> = ["color", "depth", "infrared", "thermal"]
            .iter()
            .map(|n| ChannelSpec {
                name: n.to_string(),
                dim: 4,
            })
            .collect();
        let bona_scale = [0.5, 0.5, 0.25, 0.25];
        let all_bona: Vec<(&str, &[f64])> = channels
            .iter()
            .map(|c| (c.name.as_str(), bona_scale.as_slice()))
            .collect();
        let bonafide = BonafideSpec {
            count: 1200,
            identities: 24,
            cluster: uniform_cluster(&channels, &[], &all_bona, 1.0),
        };
        let attack = |name: &str, family: &str, mean: &[(&str, &[f64])]| AttackSpec {
            name: name.to_string(),
            family: family.to_string(),
            count: 300,
            identities: 9,
            cluster: uniform_cluster(&channels, mean, &all_bona, 1.0),
        };
        let attacks = vec![
            attack("print", FAMILY_2D, &[("depth", &[-4.0, -4.0, 0.0, 0.0])]),
            attack(
                "replay",
                FAMILY_2D,
                &[("depth", &[-3.0, -3.0, 0.0, 0.0]), ("infrared", &[3.0, 3.0, 0.0, 0.0])],
            ),
            attack("rigid_mask", FAMILY_3D, &[("thermal", &[0.0, 0.0, 2.0, 2.0])]),
            attack("flexible_mask", FAMILY_3D, &[("infrared", &[0.0, 0.0, -2.0, -2.0])]),
        ];
        Self {
            channels,
            bonafide,
            attacks,
            identity_scale: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(config("generator needs at least one channel"));
        }
        if let Some(c) = self.channels.iter().find(|c| c.dim == 0) {
            return Err(config(format!("channel `{}` has zero dimension", c.name)));
        }
        let check_cluster = |what: &str, cl: &ClusterSpec| -> Result<()> {
            for ch in &self.channels {
                for (table, kind) in [(&cl.mean, "mean"), (&cl.scale, "scale")] {
                    let v = table
                        .get(&ch.name)
                        .ok_or_else(|| config(format!("{what}: no {kind} for channel `{}`", ch.name)))?;
                    if v.len() != ch.dim {
                        return Err(config(format!(
                            "{what}: {kind} for `{}` has {} values, expected {}",
                            ch.name,
                            v.len(),
                            ch.dim
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(config(format!("{what}: non-finite {kind} for `{}`", ch.name)));
                    }
                }
                if cl.scale[&ch.name].iter().any(|&s| s < 0.0) {
                    return Err(config(format!("{what}: negative scale for `{}`", ch.name)));
                }
            }
            Ok(())
        };
        if self.bonafide.count == 0 || self.bonafide.identities == 0 {
            return Err(config("bonafide count and identities must be positive"));
        }
        check_cluster("bonafide", &self.bonafide.cluster)?;
        let mut names = BTreeSet::new();
        for a in &self.attacks {
            if a.count == 0 || a.identities == 0 {
                return Err(config(format!("attack `{}`: count and identities must be positive", a.name)));
            }
            if !names.insert(a.name.as_str()) {
                return Err(config(format!("attack `{}` listed twice", a.name)));
            }
            if a.name.is_empty() || a.name == "-" || a.name.contains([',', ':', ';', '|', ' ']) {
                return Err(config(format!("attack name `{}` is not allowed", a.name)));
            }
            check_cluster(&a.name, &a.cluster)?;
        }
        if !(self.identity_scale.is_finite() && self.identity_scale >= 0.0) {
            return Err(config("identity_scale must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Draws every cluster with a seeded RNG. Ids run from 0 in generation order
/// (bonafide first, then attacks in config order); identities are assigned
/// round-robin within each class and the group column holds the grandtest
/// fold for `cfg.seed`.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::new();
    let mut next_identity = 0u64;

    let mut draw = |cluster: &ClusterSpec,
                    count: usize,
                    identities: usize,
                    label: Label,
                    attack_type: Option<&str>,
                    samples: &mut Vec<Sample>| {
        let base = next_identity;
        next_identity += identities as u64;
        let offsets: Vec<BTreeMap<String, Vec<f64>>> = (0..identities)
            .map(|_| {
                cfg.channels
                    .iter()
                    .map(|ch| {
                        let v = (0..ch.dim)
                            .map(|_| cfg.identity_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                            .collect();
                        (ch.name.clone(), v)
                    })
                    .collect()
            })
            .collect();
        for j in 0..count {
            let ident = j % identities;
            let channels = cfg
                .channels
                .iter()
                .map(|ch| {
                    let mean = &cluster.mean[&ch.name];
                    let scale = &cluster.scale[&ch.name];
                    let off = &offsets[ident][&ch.name];
                    let v = (0..ch.dim)
                        .map(|k| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            mean[k] + off[k] + scale[k] * z
                        })
                        .collect();
                    (ch.name.clone(), v)
                })
                .collect();
            samples.push(Sample {
                id: samples.len() as u64,
                identity: base + ident as u64,
                channels,
                label,
                attack_type: attack_type.map(str::to_string),
                group: Group::Train,
            });
        }
    };

    draw(
        &cfg.bonafide.cluster,
        cfg.bonafide.count,
        cfg.bonafide.identities,
        Label::Bonafide,
        None,
        &mut samples,
    );
    for a in &cfg.attacks {
        draw(&a.cluster, a.count, a.identities, Label::Attack, Some(&a.name), &mut samples);
    }

    let folds = assign_folds(&samples, cfg.seed);
    for s in &mut samples {
        s.group = folds[&s.identity];
    }
    Ok(Dataset {
        channels: cfg.channels.iter().map(|c| (c.name.clone(), c.dim)).collect(),
        families: cfg
            .attacks
            .iter()
            .map(|a| (a.name.clone(), a.family.clone()))
            .collect(),
        samples,
    })
}

// ---------------------------------------------------------------------------
// MAD normalization

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Maps raw values to `[0, 255]`:
/// `clamp(128 + 128·(v − median) / (k·MAD), 0, 255)`, with every output at 128
/// when the MAD is zero.
pub fn mad_normalize(values: &[f64], k: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(input("cannot normalize an empty vector"));
    }
    if !(k.is_finite() && k > 0.0) {
        return Err(config(format!("MAD factor k must be > 0, got {k}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(input("cannot normalize non-finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let mut dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let mad = median(&dev);
    if mad == 0.0 {
        return Ok(vec![128.0; values.len()]);
    }
    Ok(values
        .iter()
        .map(|v| (128.0 + 128.0 * (v - med) / (k * mad)).clamp(0.0, 255.0))
        .collect())
}

// ---------------------------------------------------------------------------
// Protocols

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Protocol {
    /// All attack types in every fold.
    Grandtest,
    /// 2D family held out of train and dev.
    UnseenFamilyA,
    /// 3D family held out of train and dev.
    UnseenFamilyB,
    /// A single attack type held out.
    LeaveOneOut(String),
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Grandtest => f.write_str("grandtest"),
            Protocol::UnseenFamilyA => f.write_str("unseen_family_A"),
            Protocol::UnseenFamilyB => f.write_str("unseen_family_B"),
            Protocol::LeaveOneOut(t) => write!(f, "leave_one_out:{t}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "grandtest" => Ok(Protocol::Grandtest),
            "unseen_family_A" => Ok(Protocol::UnseenFamilyA),
            "unseen_family_B" => Ok(Protocol::UnseenFamilyB),
            other => match other.strip_prefix("leave_one_out:") {
                Some(t) if !t.is_empty() => Ok(Protocol::LeaveOneOut(t.to_string())),
                _ => Err(format!(
                    "unknown protocol `{other}` (expected grandtest, unseen_family_A, unseen_family_B or leave_one_out:<type>)"
                )),
            },
        }
    }
}

impl TryFrom<String> for Protocol {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<Protocol> for String {
    fn from(p: Protocol) -> String {
        p.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub name: Protocol,
    pub train: Vec<u64>,
    pub dev: Vec<u64>,
    pub eval: Vec<u64>,
}

/// Identity → fold. Identities are grouped by the (label, attack type) of
/// their first sample, shuffled with `seed` and cut into thirds.
pub fn assign_folds(samples: &[Sample], seed: u64) -> BTreeMap<u64, Group> {
    let mut strata: BTreeMap<(Label, Option<&str>), BTreeSet<u64>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut ordered: Vec<&Sample> = samples.iter().collect();
    ordered.sort_by_key(|s| s.id);
    for s in ordered {
        if seen.insert(s.identity) {
            strata
                .entry((s.label, s.attack_type.as_deref()))
                .or_default()
                .insert(s.identity);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = BTreeMap::new();
    for ids in strata.values() {
        let mut ids: Vec<u64> = ids.iter().copied().collect();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let dev = n / 3;
        let eval = n / 3;
        let train = n - dev - eval;
        for (i, id) in ids.into_iter().enumerate() {
            let g = if i < train {
                Group::Train
            } else if i < train + dev {
                Group::Dev
            } else {
                Group::Eval
            };
            folds.insert(id, g);
        }
    }
    folds
}

/// Builds the train/dev/eval id lists of `protocol` (ids in dataset order).
pub fn split_protocol(data: &Dataset, protocol: &Protocol, seed: u64) -> Result<ProtocolSplit> {
    let held_out = |s: &Sample| -> bool {
        match protocol {
            Protocol::Grandtest => false,
            Protocol::UnseenFamilyA => data.family_of(s) == Some(FAMILY_2D),
            Protocol::UnseenFamilyB => data.family_of(s) == Some(FAMILY_3D),
            Protocol::LeaveOneOut(t) => s.attack_type.as_deref() == Some(t.as_str()),
        }
    };
    if *protocol != Protocol::Grandtest && !data.samples.iter().any(held_out) {
        let what = match protocol {
            Protocol::UnseenFamilyA => format!("attack family {FAMILY_2D}"),
            Protocol::UnseenFamilyB => format!("attack family {FAMILY_3D}"),
            Protocol::LeaveOneOut(t) => format!("attack type `{t}`"),
            Protocol::Grandtest => unreachable!(),
        };
        return Err(Error::Split(format!("protocol {protocol} needs {what}, which is absent from the data")));
    }

    let folds = assign_folds(&data.samples, seed);
    let mut split = ProtocolSplit {
        name: protocol.clone(),
        train: Vec::new(),
        dev: Vec::new(),
        eval: Vec::new(),
    };
    for s in &data.samples {
        let out = held_out(s);
        match folds[&s.identity] {
            Group::Train if !out => split.train.push(s.id),
            Group::Dev if !out => split.dev.push(s.id),
            Group::Eval if *protocol == Protocol::Grandtest || s.label == Label::Bonafide || out => {
                split.eval.push(s.id)
            }
            _ => {}
        }
    }
    Ok(split)
}

// ---------------------------------------------------------------------------
// .ocds text format

const HEADER_TAG: &str = "#ocds";

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

type Header = (Vec<(String, usize)>, BTreeMap<String, String>);

fn parse_header(line: &str, lineno: usize) -> Result<Header> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(HEADER_TAG) {
        return Err(parse_err(lineno, format!("expected `{HEADER_TAG}` header")));
    }
    let mut channels = Vec::new();
    let mut families = BTreeMap::new();
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| parse_err(lineno, format!("malformed header field `{part}`")))?;
        let pairs = value.split(',').filter(|p| !p.is_empty());
        match key {
            "channels" => {
                for p in pairs {
                    let (name, dim) = p
                        .split_once(':')
                        .ok_or_else(|| parse_err(lineno, format!("malformed channel `{p}`")))?;
                    let dim: usize = dim
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad dimension in `{p}`")))?;
                    if dim == 0 {
                        return Err(parse_err(lineno, format!("channel `{name}` has zero dimension")));
                    }
                    channels.push((name.to_string(), dim));
                }
            }
            "families" => {
                for p in pairs {
                    let (t, fam) = p
                        .split_once(':')
                        .ok_or_else(|| parse_err(lineno, format!("malformed family `{p}`")))?;
                    families.insert(t.to_string(), fam.to_string());
                }
            }
            other => return Err(parse_err(lineno, format!("unknown header field `{other}`"))),
        }
    }
    Ok((channels, families))
}

fn parse_sample(line: &str, lineno: usize, channels: &[(String, usize)]) -> Result<Sample> {
    let fields: Vec<&str> = line.splitn(6, ',').collect();
    if fields.len() != 6 {
        return Err(parse_err(lineno, format!("expected 6 comma-separated fields, got {}", fields.len())));
    }
    let id = fields[0]
        .parse()
        .map_err(|_| parse_err(lineno, format!("bad id `{}`", fields[0])))?;
    let identity = fields[1]
        .parse()
        .map_err(|_| parse_err(lineno, format!("bad identity `{}`", fields[1])))?;
    let group: Group = fields[2].parse().map_err(|e: String| parse_err(lineno, e))?;
    let label: Label = fields[3].parse().map_err(|e: String| parse_err(lineno, e))?;
    let attack_type = match fields[4] {
        "-" => None,
        t => Some(t.to_string()),
    };
    if (label == Label::Attack) != attack_type.is_some() {
        return Err(parse_err(lineno, "attack_type must be given for attacks and `-` for bonafide"));
    }
    let mut parsed = BTreeMap::new();
    for chunk in fields[5].split(';') {
        let (name, values) = chunk
            .split_once(':')
            .ok_or_else(|| parse_err(lineno, format!("malformed channel block `{chunk}`")))?;
        let expected = channels
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| *d)
            .ok_or_else(|| parse_err(lineno, format!("channel `{name}` not declared in header")))?;
        let v = values
            .split('|')
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| parse_err(lineno, format!("bad number in channel `{name}`")))?;
        if v.len() != expected {
            return Err(parse_err(
                lineno,
                format!("channel `{name}` has {} values, expected {expected}", v.len()),
            ));
        }
        if parsed.insert(name.to_string(), v).is_some() {
            return Err(parse_err(lineno, format!("channel `{name}` given twice")));
        }
    }
    if parsed.len() != channels.len() {
        return Err(parse_err(lineno, "sample does not carry every declared channel"));
    }
    Ok(Sample {
        id,
        identity,
        channels: parsed,
        label,
        attack_type,
        group,
    })
}

/// Parses `.ocds` text. An empty document is an empty dataset.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut data = Dataset::default();
    let mut header_seen = false;
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            let (channels, families) = parse_header(line, lineno)?;
            data.channels = channels;
            data.families = families;
            header_seen = true;
            continue;
        }
        let s = parse_sample(line, lineno, &data.channels)?;
        if !ids.insert(s.id) {
            return Err(parse_err(lineno, format!("duplicate sample id {}", s.id)));
        }
        data.samples.push(s);
    }
    Ok(data)
}

pub fn format_dataset(data: &Dataset) -> String {
    let join = |pairs: Vec<String>| pairs.join(",");
    let mut out = format!(
        "{HEADER_TAG} channels={} families={}\n",
        join(data.channels.iter().map(|(n, d)| format!("{n}:{d}")).collect()),
        join(data.families.iter().map(|(t, f)| format!("{t}:{f}")).collect()),
    );
    for s in &data.samples {
        let blocks: Vec<String> = data
            .channels
            .iter()
            .map(|(name, _)| {
                let vals: Vec<String> = s.channels[name].iter().map(|v| v.to_string()).collect();
                format!("{name}:{}", vals.join("|"))
            })
            .collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.id,
            s.identity,
            s.group,
            s.label,
            s.attack_type.as_deref().unwrap_or("-"),
            blocks.join(";")
        ));
    }
    out
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&fs::read_to_string(path)?)
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    data.validate()?;
    fs::write(path, format_dataset(data))?;
    Ok(())
}
