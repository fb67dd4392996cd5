//! Market data model and the two data producers feeding the billing
//! protocol: the trading platform (committed volumes and price) and the
//! smart meters (metered volumes).
//!
//! Energy is integer Wh, prices integer micro-units per Wh, money integer
//! micro-units. Volumes are non-negative per-role magnitudes (consumer
//! import, prosumer export); deviations carry the sign.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::he::{self, Ciphertext, HeError, PublicKey, SignedFixed};
use crate::ledger::{Ledger, LedgerError, Tag};
use crate::matching::MatchMap;
use crate::rng;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("profile line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("cycle {cycle}: consumers committed {consumers} Wh but prosumers committed {prosumers} Wh")]
    Imbalance {
        cycle: u64,
        consumers: i128,
        prosumers: i128,
    },
    #[error("invalid profile data: {0}")]
    Validation(String),
    #[error("invalid prices: need feed_in < p2p < retail, got {feed_in} / {p2p} / {retail}")]
    PriceOrder { feed_in: i64, p2p: i64, retail: i64 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Crypto(#[from] HeError),
    #[error("ledger rejected commitment: {0}")]
    Ledger(#[from] LedgerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Consumer,
    Prosumer,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Consumer => "consumer",
            Role::Prosumer => "prosumer",
        }
    }

    pub fn opposite(self) -> Role {
        match self {
            Role::Consumer => Role::Prosumer,
            Role::Prosumer => Role::Consumer,
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "consumer" => Ok(Role::Consumer),
            "prosumer" => Ok(Role::Prosumer),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// A household, addressed as `C<i>` or `P<j>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId {
    pub role: Role,
    pub ordinal: u32,
}

impl UserId {
    pub fn consumer(ordinal: u32) -> Self {
        Self {
            role: Role::Consumer,
            ordinal,
        }
    }

    pub fn prosumer(ordinal: u32) -> Self {
        Self {
            role: Role::Prosumer,
            ordinal,
        }
    }

    pub fn is_consumer(&self) -> bool {
        self.role == Role::Consumer
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.role {
            Role::Consumer => 'C',
            Role::Prosumer => 'P',
        };
        write!(f, "{prefix}{}", self.ordinal)
    }
}

impl FromStr for UserId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let role = match s.chars().next() {
            Some('C') => Role::Consumer,
            Some('P') => Role::Prosumer,
            _ => return Err(format!("invalid user id {s:?}")),
        };
        let ordinal = s[1..]
            .parse()
            .map_err(|_| format!("invalid user id {s:?}"))?;
        Ok(Self { role, ordinal })
    }
}

/// Consumer and prosumer ids `C0..C(n_c-1)` and `P0..P(n_p-1)`.
pub fn population(n_c: u32, n_p: u32) -> (Vec<UserId>, Vec<UserId>) {
    (
        (0..n_c).map(UserId::consumer).collect(),
        (0..n_p).map(UserId::prosumer).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceSchedule {
    pub p2p: i64,
    pub retail: i64,
    pub feed_in: i64,
}

impl PriceSchedule {
    pub fn new(p2p: i64, retail: i64, feed_in: i64) -> Result<Self, MarketError> {
        let prices = Self {
            p2p,
            retail,
            feed_in,
        };
        prices.validate()?;
        Ok(prices)
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        if self.feed_in < self.p2p && self.p2p < self.retail {
            Ok(())
        } else {
            Err(MarketError::PriceOrder {
                feed_in: self.feed_in,
                p2p: self.p2p,
                retail: self.retail,
            })
        }
    }
}

/// Prices for a run: fixed retail and feed-in prices, and a P2P price that
/// is either fixed or follows `p2p_schedule` (repeating by cycle).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricePlan {
    pub p2p: i64,
    pub retail: i64,
    pub feed_in: i64,
    #[serde(default)]
    pub p2p_schedule: Vec<i64>,
}

impl PricePlan {
    pub fn fixed(prices: PriceSchedule) -> Self {
        Self {
            p2p: prices.p2p,
            retail: prices.retail,
            feed_in: prices.feed_in,
            p2p_schedule: Vec::new(),
        }
    }

    pub fn for_cycle(&self, cycle: u64) -> PriceSchedule {
        let p2p = if self.p2p_schedule.is_empty() {
            self.p2p
        } else {
            self.p2p_schedule[(cycle % self.p2p_schedule.len() as u64) as usize]
        };
        PriceSchedule {
            p2p,
            retail: self.retail,
            feed_in: self.feed_in,
        }
    }

    /// Every price the plan can produce keeps the strict ordering.
    pub fn validate(&self) -> Result<(), MarketError> {
        let n = self.p2p_schedule.len().max(1) as u64;
        (0..n).try_for_each(|c| self.for_cycle(c).validate())
    }
}

/// Plaintext ground truth for one settlement cycle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleInput {
    pub cycle: u64,
    pub committed: BTreeMap<UserId, i64>,
    pub real: BTreeMap<UserId, i64>,
}

impl CycleInput {
    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.committed.keys().copied()
    }

    pub fn committed_total(&self, role: Role) -> i128 {
        self.committed
            .iter()
            .filter(|(u, _)| u.role == role)
            .map(|(_, &v)| v as i128)
            .sum()
    }

    /// Market balance: consumers committed exactly what prosumers committed.
    pub fn check_balance(&self) -> Result<(), MarketError> {
        let consumers = self.committed_total(Role::Consumer);
        let prosumers = self.committed_total(Role::Prosumer);
        if consumers != prosumers {
            return Err(MarketError::Imbalance {
                cycle: self.cycle,
                consumers,
                prosumers,
            });
        }
        Ok(())
    }
}

/// Encrypted volumes of one user for one cycle.
#[derive(Clone, Debug)]
pub struct VolumeRecord {
    pub user: UserId,
    pub cycle: u64,
    pub v_p2p_ct: Ciphertext,
    pub v_real_ct: Ciphertext,
}

#[derive(Debug, Deserialize)]
struct ProfileRow {
    cycle: u64,
    user_role: String,
    user_ordinal: u32,
    committed_wh: i64,
    real_wh: i64,
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<CycleInput>, MarketError> {
    let file = std::fs::File::open(path)?;
    parse_profiles(file)
}

/// Parses `cycle,user_role,user_ordinal,committed_wh,real_wh` records
/// (`#` starts a comment line) and validates the result.
pub fn parse_profiles(reader: impl io::Read) -> Result<Vec<CycleInput>, MarketError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut cycles: BTreeMap<u64, CycleInput> = BTreeMap::new();
    for record in csv.records() {
        let format_err = |e: csv::Error| MarketError::Format {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        };
        let record = record.map_err(format_err)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: ProfileRow = record
            .deserialize(None)
            .map_err(|e| MarketError::Format { line, message: e.to_string() })?;
        let role: Role = row
            .user_role
            .parse()
            .map_err(|message| MarketError::Format { line, message })?;
        if row.committed_wh < 0 || row.real_wh < 0 {
            return Err(MarketError::Format {
                line,
                message: "volumes must be non-negative".into(),
            });
        }
        let user = UserId {
            role,
            ordinal: row.user_ordinal,
        };
        let entry = cycles.entry(row.cycle).or_insert_with(|| CycleInput {
            cycle: row.cycle,
            committed: BTreeMap::new(),
            real: BTreeMap::new(),
        });
        if entry.committed.insert(user, row.committed_wh).is_some() {
            return Err(MarketError::Format {
                line,
                message: format!("duplicate record for {user} in cycle {}", row.cycle),
            });
        }
        entry.real.insert(user, row.real_wh);
    }
    let inputs: Vec<CycleInput> = cycles.into_values().collect();
    validate_profiles(&inputs)?;
    Ok(inputs)
}

/// Checks cycle numbering, a stable user population with contiguous
/// ordinals and both roles present, and per-cycle market balance.
pub fn validate_profiles(inputs: &[CycleInput]) -> Result<(), MarketError> {
    let Some(first) = inputs.first() else {
        return Err(MarketError::Validation("no cycles".into()));
    };
    let users: BTreeSet<UserId> = first.users().collect();
    for role in [Role::Consumer, Role::Prosumer] {
        let ordinals: Vec<u32> = users.iter().filter(|u| u.role == role).map(|u| u.ordinal).collect();
        if ordinals.is_empty() {
            return Err(MarketError::Validation(format!("no {} in profile", role.as_str())));
        }
        if ordinals.iter().enumerate().any(|(i, &o)| o != i as u32) {
            return Err(MarketError::Validation(format!(
                "{} ordinals must be 0..{}",
                role.as_str(),
                ordinals.len()
            )));
        }
    }
    for (i, input) in inputs.iter().enumerate() {
        if input.cycle != i as u64 {
            return Err(MarketError::Validation(format!(
                "cycles must be numbered 0..{}, found {}",
                inputs.len(),
                input.cycle
            )));
        }
        if !input.users().eq(users.iter().copied()) || !input.real.keys().eq(users.iter()) {
            return Err(MarketError::Validation(format!(
                "cycle {} does not cover the same users as cycle 0",
                input.cycle
            )));
        }
        input.check_balance()?;
    }
    Ok(())
}

pub fn write_profiles(inputs: &[CycleInput], mut out: impl io::Write) -> io::Result<()> {
    writeln!(out, "# cycle,user_role,user_ordinal,committed_wh,real_wh")?;
    for input in inputs {
        for (user, committed) in &input.committed {
            writeln!(
                out,
                "{},{},{},{},{}",
                input.cycle,
                user.role.as_str(),
                user.ordinal,
                committed,
                input.real[user]
            )?;
        }
    }
    Ok(())
}

/// Parameters of the synthetic profile generator.
#[derive(Clone, Copy, Debug)]
pub struct SynthParams {
    pub consumers: u32,
    pub prosumers: u32,
    pub cycles: u64,
    pub seed: u64,
    /// Metered volume is drawn from `committed * (1 +- deviation_ratio)`.
    pub deviation_ratio: f64,
}

const MAX_CONSUMER_COMMIT_WH: i64 = 5_000;

/// Generates balanced committed volumes and perturbed metered volumes,
/// deterministically in `seed`.
pub fn synthesize_profiles(params: SynthParams) -> Result<Vec<CycleInput>, MarketError> {
    if params.consumers == 0 || params.prosumers == 0 {
        return Err(MarketError::Validation("need at least one consumer and one prosumer".into()));
    }
    if params.cycles == 0 {
        return Err(MarketError::Validation("need at least one cycle".into()));
    }
    if !(0.0..=1.0).contains(&params.deviation_ratio) {
        return Err(MarketError::Validation("deviation_ratio must be within [0, 1]".into()));
    }
    let (consumers, prosumers) = population(params.consumers, params.prosumers);
    let mut rng = rng::stream(params.seed, "profiles", &[]);
    let mut out = Vec::with_capacity(params.cycles as usize);
    for cycle in 0..params.cycles {
        let mut committed = BTreeMap::new();
        for &c in &consumers {
            committed.insert(c, rng.random_range(0..=MAX_CONSUMER_COMMIT_WH));
        }
        let total: i64 = committed.values().sum();
        let weights: Vec<i64> = prosumers.iter().map(|_| rng.random_range(1..=1000)).collect();
        let weight_sum: i64 = weights.iter().sum();
        let mut shares: Vec<i64> = weights
            .iter()
            .map(|w| (total as i128 * *w as i128 / weight_sum as i128) as i64)
            .collect();
        let remainder = total - shares.iter().sum::<i64>();
        for share in shares.iter_mut().take(remainder as usize) {
            *share += 1;
        }
        for (&p, share) in prosumers.iter().zip(shares) {
            committed.insert(p, share);
        }
        let real = committed
            .iter()
            .map(|(&u, &v)| {
                let jitter: f64 = rng.random_range(-1.0..=1.0);
                let delta = (v as f64 * params.deviation_ratio * jitter).round() as i64;
                (u, (v + delta).max(0))
            })
            .collect();
        out.push(CycleInput {
            cycle,
            committed,
            real,
        });
    }
    Ok(out)
}

/// One encrypted value handed to one recipient.
#[derive(Clone, Debug)]
pub struct Delivery {
    pub recipient: UserId,
    pub subject: UserId,
    pub ct: Ciphertext,
}

/// Output of a producer for one cycle: the canonical ciphertext per user,
/// its ledger index, and the copies sent to `u` and `M(u)`.
#[derive(Clone, Debug)]
pub struct Broadcast {
    pub tag: Tag,
    pub cycle: u64,
    pub records: BTreeMap<UserId, (Ciphertext, u64)>,
    pub deliveries: Vec<Delivery>,
}

/// Trading platform stub: publishes the P2P price in the clear and the
/// encrypted committed volume of every user, committing its hash.
pub fn tp_publish(
    input: &CycleInput,
    p2p_price: i64,
    pk: &PublicKey,
    ledger: &mut Ledger,
    matches: &MatchMap,
    seed: u64,
) -> Result<Broadcast, MarketError> {
    ledger.publish_plaintext(Tag::P2pPrice, input.cycle, p2p_price as i128)?;
    broadcast(Tag::P2pVolume, input.cycle, &input.committed, pk, ledger, matches, seed)
}

/// Smart-meter emulation: encrypts each user's metered volume, commits its
/// hash, keeps it for the user and sends it to the matched users.
pub fn meter_read(
    input: &CycleInput,
    pk: &PublicKey,
    ledger: &mut Ledger,
    matches: &MatchMap,
    seed: u64,
) -> Result<Broadcast, MarketError> {
    broadcast(Tag::RealVolume, input.cycle, &input.real, pk, ledger, matches, seed)
}

fn broadcast(
    tag: Tag,
    cycle: u64,
    volumes: &BTreeMap<UserId, i64>,
    pk: &PublicKey,
    ledger: &mut Ledger,
    matches: &MatchMap,
    seed: u64,
) -> Result<Broadcast, MarketError> {
    let mut records = BTreeMap::new();
    let mut deliveries = Vec::new();
    for (&user, &volume) in volumes {
        let mut stream = rng::stream(seed, tag.as_str(), &[cycle, user_key(user)]);
        let ct = he::encrypt(pk, &SignedFixed::from(volume), &mut stream)?;
        for recipient in matches.recipients(user) {
            deliveries.push(Delivery {
                recipient,
                subject: user,
                ct: ct.clone(),
            });
        }
        let index = ledger.append(user, cycle, tag, &ct.to_bytes())?;
        records.insert(user, (ct, index));
    }
    Ok(Broadcast {
        tag,
        cycle,
        records,
        deliveries,
    })
}

/// Stable integer label for per-user random streams.
pub(crate) fn user_key(user: UserId) -> u64 {
    ((user.role as u64) << 32) | user.ordinal as u64
}
