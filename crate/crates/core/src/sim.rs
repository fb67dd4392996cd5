//! Single-process orchestration of one billing period.
//!
//! Households, trading platform, meters, referee and supplier are logical
//! actors exchanging ciphertexts in memory. Each cycle runs the protocol
//! phases in order with a barrier between them: publication, individual
//! deviations, total deviations, bills. Everything except the phase
//! timings is a deterministic function of the configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};
use std::{fmt, fs, io};

use serde::Deserialize;
use thiserror::Error;

use crate::accountability::{
    AccountabilityError, Accepted, Custody, DisputeVerdict, PairReport, Referee, ReportBook,
    ReportKind,
};
use crate::billing::{self, BillingError, BillingMode, CycleTerms, StatementLedger, Totals};
use crate::he::{self, Ciphertext, HeError, MIN_KEY_BITS};
use crate::ledger::{Ledger, LedgerError, Tag};
use crate::market::{
    self, Broadcast, CycleInput, MarketError, PricePlan, Role, SynthParams, UserId,
};
use crate::matching::{self, AggregatorSet, MatchMap, MatchingError};
use crate::settlement::{self, Finalization, PenaltySink, PeriodState, SettlementError};

pub const DEFAULT_CYCLES: u64 = 720;
pub const DEFAULT_FAULT_DELTA: i64 = 100;
pub const DEFAULT_PENALTY: i64 = 1_000;
const PERIOD_ID: u64 = 0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("profile: {0}")]
    Profile(#[from] MarketError),
    #[error("protocol failure in cycle {cycle}: {source}")]
    Protocol {
        cycle: u64,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SimError {
    /// Configuration and input problems, as opposed to run failures.
    pub fn is_config(&self) -> bool {
        matches!(self, SimError::Config(_) | SimError::Profile(_))
    }
}

macro_rules! protocol_from {
    ($($t:ty),*) => {$(
        impl From<(u64, $t)> for SimError {
            fn from((cycle, e): (u64, $t)) -> Self {
                SimError::Protocol { cycle, source: Box::new(e) }
            }
        }
    )*};
}
protocol_from!(HeError, LedgerError, BillingError, AccountabilityError, SettlementError, MatchingError, MarketError);

trait AtCycle<T> {
    fn at(self, cycle: u64) -> Result<T, SimError>;
}

impl<T, E> AtCycle<T> for Result<T, E>
where
    SimError: From<(u64, E)>,
{
    fn at(self, cycle: u64) -> Result<T, SimError> {
        self.map_err(|e| SimError::from((cycle, e)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    /// Adds `delta` to every individual-deviation report the user sends.
    CorruptIndev,
    /// Adds `delta` to every statement report the user sends.
    CorruptStatement,
    /// Replaces the user's own metered-volume ciphertext with one that
    /// encrypts `delta` Wh less, and computes from it consistently.
    SubstituteData,
    /// Adds `delta` to the user's total when it is selected as aggregator.
    CorruptTotal,
}

impl FaultKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultKind::CorruptIndev => "CORRUPT_INDEV",
            FaultKind::CorruptStatement => "CORRUPT_STATEMENT",
            FaultKind::SubstituteData => "SUBSTITUTE_DATA",
            FaultKind::CorruptTotal => "CORRUPT_TOTAL",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub cycle: u64,
    pub user: String,
    pub kind: FaultKind,
    #[serde(default = "default_delta")]
    pub delta: i64,
}

fn default_delta() -> i64 {
    DEFAULT_FAULT_DELTA
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub consumers: Option<u32>,
    pub prosumers: Option<u32>,
    pub cycles: Option<u64>,
    #[serde(default = "default_key_bits")]
    pub key_bits: u32,
    pub prices: PricePlan,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ratio")]
    pub deviation_ratio: f64,
    #[serde(default = "default_penalty")]
    pub penalty: i64,
    #[serde(default)]
    pub penalty_sink: PenaltySink,
    /// Relative paths are resolved against the config file's directory.
    pub profile_path: Option<PathBuf>,
    /// Saturating plan: every matched pair and one aggregator per role
    /// misbehave in every cycle.
    #[serde(default)]
    pub worst_case: bool,
    #[serde(default, rename = "fault")]
    pub faults: Vec<FaultSpec>,
}

fn default_key_bits() -> u32 {
    he::DEFAULT_KEY_BITS
}

fn default_ratio() -> f64 {
    0.1
}

fn default_penalty() -> i64 {
    DEFAULT_PENALTY
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(profile) = &config.profile_path {
            if profile.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.profile_path = Some(base.join(profile));
            }
        }
        Ok(config)
    }
}

/// A validated configuration with its cycle inputs and fault plan.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: SimConfig,
    pub consumers: Vec<UserId>,
    pub prosumers: Vec<UserId>,
    pub inputs: Vec<CycleInput>,
    pub faults: BTreeMap<u64, Vec<Fault>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fault {
    pub user: UserId,
    pub kind: FaultKind,
    pub delta: i64,
}

fn config_err(msg: impl Into<String>) -> SimError {
    SimError::Config(msg.into())
}

/// Validates `config` and loads or synthesizes the profile. Nothing
/// cryptographic happens here, so failures are cheap.
pub fn prepare(config: SimConfig) -> Result<Scenario, SimError> {
    if config.key_bits < MIN_KEY_BITS {
        return Err(config_err(format!("key_bits must be at least {MIN_KEY_BITS}")));
    }
    config
        .prices
        .validate()
        .map_err(|e| config_err(e.to_string()))?;
    if config.penalty < 0 {
        return Err(config_err("penalty must be non-negative"));
    }
    if !(0.0..=1.0).contains(&config.deviation_ratio) {
        return Err(config_err("deviation_ratio must be within [0, 1]"));
    }
    for (name, v) in [("consumers", config.consumers), ("prosumers", config.prosumers)] {
        if v == Some(0) {
            return Err(config_err(format!("{name} must be at least 1")));
        }
    }
    if config.cycles == Some(0) {
        return Err(config_err("cycles must be at least 1"));
    }

    let inputs = match &config.profile_path {
        Some(path) => {
            let inputs = market::load_profiles(path).map_err(|e| match e {
                MarketError::Io(io) => config_err(format!("{}: {io}", path.display())),
                other => SimError::Profile(other),
            })?;
            let n_c = inputs[0].users().filter(UserId::is_consumer).count() as u32;
            let n_p = inputs[0].committed.len() as u32 - n_c;
            let n = inputs.len() as u64;
            for (name, want, got) in [
                ("consumers", config.consumers.map(u64::from), n_c as u64),
                ("prosumers", config.prosumers.map(u64::from), n_p as u64),
                ("cycles", config.cycles, n),
            ] {
                if want.is_some_and(|w| w != got) {
                    return Err(config_err(format!("{name} = {} but the profile has {got}", want.unwrap())));
                }
            }
            inputs
        }
        None => {
            let (Some(consumers), Some(prosumers)) = (config.consumers, config.prosumers) else {
                return Err(config_err("consumers and prosumers are required without a profile"));
            };
            market::synthesize_profiles(SynthParams {
                consumers,
                prosumers,
                cycles: config.cycles.unwrap_or(DEFAULT_CYCLES),
                seed: config.seed,
                deviation_ratio: config.deviation_ratio,
            })?
        }
    };
    let n_c = inputs[0].users().filter(UserId::is_consumer).count() as u32;
    let n_p = inputs[0].committed.len() as u32 - n_c;
    let (consumers, prosumers) = market::population(n_c, n_p);
    let cycles = inputs.len() as u64;

    let mut faults: BTreeMap<u64, Vec<Fault>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for spec in &config.faults {
        let user = UserId::from_str(&spec.user).map_err(config_err)?;
        let known = match user.role {
            Role::Consumer => user.ordinal < n_c,
            Role::Prosumer => user.ordinal < n_p,
        };
        if !known {
            return Err(config_err(format!("fault names unknown user {user}")));
        }
        if spec.cycle >= cycles {
            return Err(config_err(format!("fault cycle {} outside 0..{cycles}", spec.cycle)));
        }
        if spec.delta == 0 {
            return Err(config_err("fault delta must be non-zero"));
        }
        if !seen.insert((spec.cycle, user, spec.kind)) {
            return Err(config_err(format!("duplicate {} fault for {user} in cycle {}", spec.kind, spec.cycle)));
        }
        faults.entry(spec.cycle).or_default().push(Fault {
            user,
            kind: spec.kind,
            delta: spec.delta,
        });
    }
    if config.worst_case {
        for cycle in 0..cycles {
            let planned = faults.entry(cycle).or_default();
            planned.extend(worst_case_faults(&consumers, &prosumers, cycle, config.seed)?);
        }
    }
    for planned in faults.values_mut() {
        planned.sort();
    }
    Ok(Scenario {
        config,
        consumers,
        prosumers,
        inputs,
        faults,
    })
}

/// One role misbehaves in every pair (alternating by cycle) on both
/// deviations and statements, and the first aggregator of each role
/// corrupts its total.
pub fn worst_case_faults(
    consumers: &[UserId],
    prosumers: &[UserId],
    cycle: u64,
    seed: u64,
) -> Result<Vec<Fault>, SimError> {
    let delta = DEFAULT_FAULT_DELTA;
    let faulty = if cycle % 2 == 0 { consumers } else { prosumers };
    let mut out = Vec::new();
    for &user in faulty {
        for kind in [FaultKind::CorruptIndev, FaultKind::CorruptStatement] {
            out.push(Fault { user, kind, delta });
        }
    }
    let aggregators = matching::select_aggregators(consumers, prosumers, cycle, seed)
        .map_err(|e| config_err(e.to_string()))?;
    for role in [Role::Consumer, Role::Prosumer] {
        out.push(Fault {
            user: aggregators.for_role(role)[0],
            kind: FaultKind::CorruptTotal,
            delta,
        });
    }
    Ok(out)
}

/// Every ciphertext copy each household holds, plus the producers' archive.
#[derive(Default)]
struct Holdings {
    copies: BTreeMap<(UserId, UserId, Tag), Ciphertext>,
    archive: BTreeMap<(UserId, Tag), Ciphertext>,
}

impl Holdings {
    fn receive(&mut self, broadcast: &Broadcast) {
        for d in &broadcast.deliveries {
            self.copies.insert((d.recipient, d.subject, broadcast.tag), d.ct.clone());
        }
        for (user, (ct, _)) in &broadcast.records {
            self.archive.insert((*user, broadcast.tag), ct.clone());
        }
    }

    fn copy(&self, holder: UserId, subject: UserId, tag: Tag) -> &Ciphertext {
        &self.copies[&(holder, subject, tag)]
    }
}

impl Custody for Holdings {
    fn submit_volume(&self, holder: UserId, subject: UserId, tag: Tag) -> Option<Ciphertext> {
        self.copies.get(&(holder, subject, tag)).cloned()
    }

    fn archive(&self, subject: UserId, tag: Tag) -> Option<Ciphertext> {
        self.archive.get(&(subject, tag)).cloned()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhaseTimes {
    pub publish: Duration,
    pub individual_deviations: Duration,
    pub total_deviations: Duration,
    pub bills: Duration,
}

impl PhaseTimes {
    pub const NAMES: [&'static str; 4] = ["publish", "individual_deviations", "total_deviations", "bills"];

    pub fn as_array(&self) -> [Duration; 4] {
        [self.publish, self.individual_deviations, self.total_deviations, self.bills]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleSummary {
    pub cycle: u64,
    pub mode: BillingMode,
    pub p2p_price: i64,
    pub dev_c: i128,
    pub dev_p: i128,
    pub supplier_balance: i128,
    pub rounding_drift: i128,
    pub degenerate: bool,
    /// Surplus while consumers in total under-consumed.
    pub negative_consumer_surplus: bool,
    pub disputes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaultRecord {
    pub cycle: u64,
    pub fault: Fault,
    /// False for a CORRUPT_TOTAL whose user was not an aggregator.
    pub effective: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Record each cycle's accepted statements in plaintext (decrypted
    /// outside the protocol) for per-cycle checks.
    pub audit: bool,
}

pub struct RunReport {
    pub scenario: String,
    pub consumers: u32,
    pub prosumers: u32,
    pub key_bits: u32,
    pub seed: u64,
    pub matching: MatchMap,
    pub cycles: Vec<CycleSummary>,
    pub verdicts: Vec<DisputeVerdict>,
    pub faults: Vec<FaultRecord>,
    pub finalization: Finalization,
    pub drift_total: i128,
    /// Half the sum of prosumer `|inDev|` over non-degenerate surplus
    /// cycles, rounded up: the bound on the conservation residual.
    pub rounding_bound: i128,
    pub ledger: Ledger,
    pub decryptions: (u64, u64, u64),
    pub timings: Vec<PhaseTimes>,
    pub audit: Option<Vec<BTreeMap<UserId, i128>>>,
}

struct World<'a> {
    scenario: &'a Scenario,
    options: RunOptions,
    period: PeriodState,
    matches: MatchMap,
    ledger: Ledger,
    statements: StatementLedger,
    penalties: BTreeMap<UserId, i128>,
    verdicts: Vec<DisputeVerdict>,
    fault_log: Vec<FaultRecord>,
    audit: Vec<BTreeMap<UserId, i128>>,
}

fn shift(pk: &he::PublicKey, ct: Ciphertext, delta: i64) -> Result<Ciphertext, HeError> {
    he::add_plain(pk, &ct, delta as i128)
}

impl World<'_> {
    fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.scenario.consumers.iter().chain(&self.scenario.prosumers).copied()
    }

    fn record(&mut self, verdict: DisputeVerdict) {
        for user in &verdict.responsible {
            *self.penalties.entry(*user).or_default() += verdict.penalty;
        }
        self.verdicts.push(verdict);
    }

    fn run_cycle(&mut self, input: &CycleInput) -> Result<(CycleSummary, PhaseTimes), SimError> {
        let cycle = input.cycle;
        let seed = self.scenario.config.seed;
        let pk = self.period.public_key().clone();
        let faults: Vec<Fault> = self.scenario.faults.get(&cycle).cloned().unwrap_or_default();
        let fault_delta = |user: UserId, kind: FaultKind| -> Option<i64> {
            faults.iter().find(|f| f.user == user && f.kind == kind).map(|f| f.delta)
        };
        let verdicts_before = self.verdicts.len();
        let mut times = PhaseTimes::default();
        self.period.ensure_open().at(cycle)?;

        // trading platform and meters
        let t = Instant::now();
        let prices = self.scenario.config.prices.for_cycle(cycle);
        let committed = market::tp_publish(input, prices.p2p, &pk, &mut self.ledger, &self.matches, seed).at(cycle)?;
        let metered = market::meter_read(input, &pk, &mut self.ledger, &self.matches, seed).at(cycle)?;
        let mut holdings = Holdings::default();
        holdings.receive(&committed);
        holdings.receive(&metered);
        for f in faults.iter().filter(|f| f.kind == FaultKind::SubstituteData) {
            let key = (f.user, f.user, Tag::RealVolume);
            let forged = shift(&pk, holdings.copies[&key].clone(), -f.delta).at(cycle)?;
            holdings.copies.insert(key, forged);
        }
        times.publish = t.elapsed();

        // individual deviations, cross-checked per pair
        let t = Instant::now();
        let mut reports = ReportBook::new(ReportKind::InDev, cycle);
        for holder in self.users().collect::<Vec<_>>() {
            for subject in self.matches.recipients(holder).collect::<Vec<_>>() {
                let mut ct = billing::individual_deviation(
                    &pk,
                    holdings.copy(holder, subject, Tag::RealVolume),
                    holdings.copy(holder, subject, Tag::P2pVolume),
                )
                .at(cycle)?;
                if let Some(delta) = fault_delta(holder, FaultKind::CorruptIndev) {
                    ct = shift(&pk, ct, delta).at(cycle)?;
                }
                reports.insert(PairReport {
                    subject,
                    reporter: holder,
                    value_ct: ct,
                    kind: ReportKind::InDev,
                    cycle,
                });
            }
        }
        let pairs = self.matches.pairs();
        let mut accepted_indev: BTreeMap<UserId, Accepted> = BTreeMap::new();
        let mut new_verdicts = Vec::new();
        {
            let referee = Referee {
                cycle,
                supplier: &self.period.supplier,
                custody: &holdings,
                penalty: self.scenario.config.penalty as i128,
            };
            for &pair in &pairs {
                let outcome = referee
                    .verify_pair_indev(pair, &reports, &mut self.ledger, &mut accepted_indev)
                    .at(cycle)?;
                new_verdicts.extend(outcome.verdict().cloned());
            }
        }
        times.individual_deviations = t.elapsed();

        // total deviations by the selected aggregators
        let t = Instant::now();
        let aggregators: AggregatorSet = matching::select_aggregators(
            &self.scenario.consumers,
            &self.scenario.prosumers,
            cycle,
            seed,
        )
        .at(cycle)?;
        let mut totals_out = BTreeMap::new();
        {
            let referee = Referee {
                cycle,
                supplier: &self.period.supplier,
                custody: &holdings,
                penalty: self.scenario.config.penalty as i128,
            };
            for role in [Role::Consumer, Role::Prosumer] {
                let devs: Vec<Ciphertext> = accepted_indev
                    .iter()
                    .filter(|(u, _)| u.role == role)
                    .map(|(_, a)| a.ct.clone())
                    .collect();
                let mut candidates = Vec::new();
                for &aggregator in aggregators.for_role(role) {
                    let mut sum = billing::total_deviation(&pk, &devs).at(cycle)?;
                    if let Some(delta) = fault_delta(aggregator, FaultKind::CorruptTotal) {
                        sum = shift(&pk, sum, delta).at(cycle)?;
                    }
                    candidates.push((aggregator, Some(sum)));
                }
                let outcome = referee
                    .verify_totals(role, &candidates, &accepted_indev, &mut self.ledger)
                    .at(cycle)?;
                new_verdicts.extend(outcome.verdict.clone());
                totals_out.insert(role, outcome.total);
            }
        }
        times.total_deviations = t.elapsed();

        // statements from the published totals and price
        let t = Instant::now();
        let published = |tag| {
            self.ledger.plaintext(tag, cycle).ok_or(SimError::Protocol {
                cycle,
                source: format!("{tag} not published").into(),
            })
        };
        let totals = Totals {
            dev_c: published(Tag::TotalDevC)?,
            dev_p: published(Tag::TotalDevP)?,
        };
        let mut prices = prices;
        prices.p2p = published(Tag::P2pPrice)? as i64;
        let terms = CycleTerms::new(totals, prices);
        let mut reports = ReportBook::new(ReportKind::Statement, cycle);
        for holder in self.users().collect::<Vec<_>>() {
            for subject in self.matches.recipients(holder).collect::<Vec<_>>() {
                let mut ct = terms
                    .statement(
                        &pk,
                        subject.role,
                        holdings.copy(holder, subject, Tag::P2pVolume),
                        &accepted_indev[&subject].ct,
                    )
                    .at(cycle)?;
                if let Some(delta) = fault_delta(holder, FaultKind::CorruptStatement) {
                    ct = shift(&pk, ct, delta).at(cycle)?;
                }
                reports.insert(PairReport {
                    subject,
                    reporter: holder,
                    value_ct: ct,
                    kind: ReportKind::Statement,
                    cycle,
                });
            }
        }
        let mut accepted_statements = BTreeMap::new();
        {
            let referee = Referee {
                cycle,
                supplier: &self.period.supplier,
                custody: &holdings,
                penalty: self.scenario.config.penalty as i128,
            };
            for &pair in &pairs {
                let outcome = referee
                    .verify_pair_statements(pair, &reports, &terms, &accepted_indev, &self.ledger, &mut accepted_statements)
                    .at(cycle)?;
                new_verdicts.extend(outcome.verdict().cloned());
            }
        }
        for (user, ct) in &accepted_statements {
            self.statements.accumulate(*user, ct).at(cycle)?;
        }
        self.period.accumulate_supplier_balance(terms.supplier_balance).at(cycle)?;
        times.bills = t.elapsed();

        if self.options.audit {
            let mut plain = BTreeMap::new();
            for (user, ct) in &accepted_statements {
                plain.insert(*user, self.period.supplier.audit_decrypt(ct).at(cycle)?);
            }
            self.audit.push(plain);
        }
        for verdict in new_verdicts {
            self.record(verdict);
        }
        for fault in faults {
            let effective = fault.kind != FaultKind::CorruptTotal
                || aggregators.for_role(fault.user.role).contains(&fault.user);
            self.fault_log.push(FaultRecord {
                cycle,
                fault,
                effective,
            });
        }
        Ok((
            CycleSummary {
                cycle,
                mode: terms.mode,
                p2p_price: prices.p2p,
                dev_c: totals.dev_c,
                dev_p: totals.dev_p,
                supplier_balance: terms.supplier_balance,
                rounding_drift: terms.rounding_drift,
                degenerate: terms.degenerate,
                negative_consumer_surplus: terms.mode == BillingMode::Surplus && totals.dev_c < 0,
                disputes: self.verdicts.len() - verdicts_before,
            },
            times,
        ))
    }
}

/// Validates `config`, then runs key generation, matching, every cycle and
/// finalization.
pub fn run_period(config: SimConfig) -> Result<RunReport, SimError> {
    let scenario = prepare(config)?;
    run_scenario(&scenario, RunOptions::default())
}

pub fn run_scenario(scenario: &Scenario, options: RunOptions) -> Result<RunReport, SimError> {
    let config = &scenario.config;
    let period = settlement::rotate_keys(None, PERIOD_ID, config.key_bits, config.seed).at(0)?;
    let matches = matching::match_users(&scenario.consumers, &scenario.prosumers, PERIOD_ID, config.seed).at(0)?;
    let users: Vec<UserId> = scenario.consumers.iter().chain(&scenario.prosumers).copied().collect();
    let statements = StatementLedger::new(period.public_key(), users, config.seed, PERIOD_ID).at(0)?;
    let mut world = World {
        scenario,
        options,
        period,
        matches,
        ledger: Ledger::new(),
        statements,
        penalties: BTreeMap::new(),
        verdicts: Vec::new(),
        fault_log: Vec::new(),
        audit: Vec::new(),
    };
    let mut cycles = Vec::with_capacity(scenario.inputs.len());
    let mut timings = Vec::with_capacity(scenario.inputs.len());
    for input in &scenario.inputs {
        let (summary, times) = world.run_cycle(input)?;
        cycles.push(summary);
        timings.push(times);
    }
    let last_cycle = scenario.inputs.last().map(|i| i.cycle).unwrap_or(0);
    let finalization = settlement::finalize_period(
        &mut world.period,
        &world.statements,
        &mut world.ledger,
        &world.penalties,
        config.penalty_sink,
        0,
        last_cycle,
    )
    .at(last_cycle)?;

    let mut twice_bound = 0i128;
    for (input, summary) in scenario.inputs.iter().zip(&cycles) {
        if summary.mode == BillingMode::Surplus && !summary.degenerate {
            twice_bound += input
                .committed
                .iter()
                .filter(|(u, _)| u.role == Role::Prosumer)
                .map(|(u, v)| (input.real[u] as i128 - *v as i128).abs())
                .sum::<i128>();
        }
    }
    let scenario_name = if scenario.faults.values().all(Vec::is_empty) { "honest" } else { "faulted" };
    Ok(RunReport {
        scenario: scenario_name.to_string(),
        consumers: scenario.consumers.len() as u32,
        prosumers: scenario.prosumers.len() as u32,
        key_bits: config.key_bits,
        seed: config.seed,
        drift_total: cycles.iter().map(|c| c.rounding_drift).sum(),
        rounding_bound: (twice_bound + 1) / 2,
        cycles,
        verdicts: world.verdicts,
        faults: world.fault_log,
        finalization,
        decryptions: world.period.supplier.request_counts(),
        matching: world.matches,
        ledger: world.ledger,
        timings,
        audit: options.audit.then_some(world.audit),
    })
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl RunReport {
    pub fn residual(&self) -> i128 {
        self.finalization.conservation_residual()
    }

    /// Mean per-cycle duration of each phase.
    pub fn mean_times(&self) -> [Duration; 4] {
        let mut sums = [Duration::ZERO; 4];
        for t in &self.timings {
            for (s, d) in sums.iter_mut().zip(t.as_array()) {
                *s += d;
            }
        }
        let n = self.timings.len().max(1) as u32;
        sums.map(|s| s / n)
    }

    /// Users named responsible, per cycle.
    pub fn named_by_cycle(&self) -> BTreeMap<u64, BTreeSet<UserId>> {
        let mut out: BTreeMap<u64, BTreeSet<UserId>> = BTreeMap::new();
        for v in &self.verdicts {
            out.entry(v.cycle).or_default().extend(v.responsible.iter().copied());
        }
        out
    }

    /// Users with an effective fault, per cycle.
    pub fn faulted_by_cycle(&self) -> BTreeMap<u64, BTreeSet<UserId>> {
        let mut out: BTreeMap<u64, BTreeSet<UserId>> = BTreeMap::new();
        for f in self.faults.iter().filter(|f| f.effective) {
            out.entry(f.cycle).or_default().insert(f.fault.user);
        }
        out
    }

    /// Deterministic text report.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "# run");
        let _ = writeln!(w, "scenario = {}", self.scenario);
        let _ = writeln!(w, "consumers = {}", self.consumers);
        let _ = writeln!(w, "prosumers = {}", self.prosumers);
        let _ = writeln!(w, "cycles = {}", self.cycles.len());
        let _ = writeln!(w, "key_bits = {}", self.key_bits);
        let _ = writeln!(w, "seed = {}", self.seed);

        let _ = writeln!(w, "\n# matching");
        w.push_str(&self.matching.render());

        let _ = writeln!(w, "\n# cycles: cycle|mode|p2p_price|dev_c|dev_p|supplier_balance|rounding_drift|disputes");
        for c in &self.cycles {
            let _ = writeln!(
                w,
                "{}|{}|{}|{}|{}|{}|{}|{}",
                c.cycle, c.mode, c.p2p_price, c.dev_c, c.dev_p, c.supplier_balance, c.rounding_drift, c.disputes
            );
        }
        let mut modes: BTreeMap<BillingMode, usize> = BTreeMap::new();
        for c in &self.cycles {
            *modes.entry(c.mode).or_default() += 1;
        }
        let _ = writeln!(w, "\n# modes");
        for mode in [BillingMode::Balanced, BillingMode::Deficit, BillingMode::Surplus] {
            let _ = writeln!(w, "{} = {}", mode, modes.get(&mode).copied().unwrap_or(0));
        }

        let _ = writeln!(w, "\n# flags");
        for c in &self.cycles {
            if c.degenerate {
                let _ = writeln!(w, "{}|DEGENERATE_SURPLUS|revenue pool booked to supplier", c.cycle);
            }
            if c.negative_consumer_surplus {
                let _ = writeln!(w, "{}|SURPLUS_WITH_NEGATIVE_DEV_C|dev_c = {}", c.cycle, c.dev_c);
            }
        }

        let _ = writeln!(w, "\n# faults: cycle|user|kind|delta|effective");
        for f in &self.faults {
            let _ = writeln!(w, "{}|{}|{}|{}|{}", f.cycle, f.fault.user, f.fault.kind, f.fault.delta, f.effective);
        }
        let _ = writeln!(w, "\n# verdicts: cycle|kind|pair|responsible|penalty|evidence");
        let _ = writeln!(w, "disputes = {}", self.verdicts.len());
        for v in &self.verdicts {
            let _ = writeln!(w, "{}", v.render());
        }

        let fin = &self.finalization;
        let _ = writeln!(w, "\n# finals: role,ordinal,statement,penalty,amount");
        for f in &fin.finals {
            let _ = writeln!(w, "{},{},{},{},{}", f.user.role.as_str(), f.user.ordinal, f.statement, f.penalty, f.amount);
        }
        let _ = writeln!(w, "\n# settlement");
        let _ = writeln!(w, "supplier_balance = {}", fin.supplier_balance);
        let _ = writeln!(w, "penalties_total = {}", fin.penalties_total);
        let sink = match fin.penalty_sink {
            PenaltySink::Burn => "burn",
            PenaltySink::Supplier => "supplier",
        };
        let _ = writeln!(w, "penalty_sink = {sink}");
        let _ = writeln!(w, "conservation_residual = {}", self.residual());
        let _ = writeln!(w, "rounding_drift_total = {}", self.drift_total);
        let _ = writeln!(w, "rounding_bound = {}", self.rounding_bound);
        let (d, t, f) = self.decryptions;
        let _ = writeln!(w, "decryptions = differences:{d} totals:{t} finals:{f}");
        let _ = writeln!(w, "ledger = ledger.txt");
        let _ = writeln!(w, "ledger_entries = {}", self.ledger.len());
        let _ = writeln!(w, "ledger_chain = {}", hex::encode(self.ledger.chain_digest()));
        out
    }

    /// Wall-clock phase timings; not deterministic.
    pub fn render_timings(&self) -> String {
        let mut out = format!("scenario = {}\nunit = ms per cycle\n", self.scenario);
        let means = self.mean_times();
        for (name, d) in PhaseTimes::NAMES.iter().zip(means) {
            let _ = writeln!(out, "mean_{name} = {:.3}", ms(d));
        }
        let _ = writeln!(out, "\n# cycle|publish|individual_deviations|total_deviations|bills");
        for (c, t) in self.cycles.iter().zip(&self.timings) {
            let [a, b, d, e] = t.as_array().map(ms);
            let _ = writeln!(out, "{}|{a:.3}|{b:.3}|{d:.3}|{e:.3}", c.cycle);
        }
        out
    }

    /// Writes `report.txt`, `timings.txt`, `ledger.txt` and `finals.txt`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), self.render())?;
        fs::write(dir.join("timings.txt"), self.render_timings())?;
        fs::write(dir.join("ledger.txt"), self.ledger.to_text())?;
        fs::write(dir.join("finals.txt"), self.finalization.render())?;
        Ok(())
    }
}
