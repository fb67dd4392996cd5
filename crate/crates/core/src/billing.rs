//! Encrypted billing arithmetic: individual and total deviations, the
//! market-wide billing mode, per-cycle statements and the supplier balance.
//!
//! Statements are signed μ¤: the amount a consumer pays, or the amount a
//! prosumer receives.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::he::{self, Ciphertext, HeError, PublicKey, SignedFixed};
use crate::market::{PriceSchedule, Role, UserId};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BillingError {
    #[error(transparent)]
    Crypto(#[from] HeError),
    #[error("total deviation over an empty set of users")]
    EmptyTotal,
    #[error("surplus with zero prosumer deviation has no proportional share")]
    DegenerateSurplus,
    #[error("no statement account for {0}")]
    UnknownUser(UserId),
}

/// `V^Real - V^P2P`.
pub fn individual_deviation(
    pk: &PublicKey,
    v_real: &Ciphertext,
    v_p2p: &Ciphertext,
) -> Result<Ciphertext, BillingError> {
    Ok(he::sub(pk, v_real, v_p2p)?)
}

pub fn total_deviation(pk: &PublicKey, devs: &[Ciphertext]) -> Result<Ciphertext, BillingError> {
    let (first, rest) = devs.split_first().ok_or(BillingError::EmptyTotal)?;
    let mut acc = first.clone();
    for ct in rest {
        acc = he::add(pk, &acc, ct)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BillingMode {
    Balanced,
    Deficit,
    Surplus,
}

impl BillingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BillingMode::Balanced => "BALANCED",
            BillingMode::Deficit => "DEFICIT",
            BillingMode::Surplus => "SURPLUS",
        }
    }
}

impl fmt::Display for BillingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn determine_mode(dev_c_tot: i128, dev_p_tot: i128) -> BillingMode {
    use std::cmp::Ordering::*;
    match dev_p_tot.cmp(&dev_c_tot) {
        Equal => BillingMode::Balanced,
        Less => BillingMode::Deficit,
        Greater => BillingMode::Surplus,
    }
}

/// Published total deviations of one cycle, in Wh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Totals {
    pub dev_c: i128,
    pub dev_p: i128,
}

impl Totals {
    pub fn mode(&self) -> BillingMode {
        determine_mode(self.dev_c, self.dev_p)
    }

    /// Revenue pool of the prosumers in surplus mode.
    pub fn total_prosumer_revenue(&self, prices: &PriceSchedule) -> i128 {
        self.dev_c * prices.p2p as i128 + (self.dev_p - self.dev_c) * prices.feed_in as i128
    }
}

/// `n / d` rounded to nearest, ties away from zero. `d != 0`.
pub fn div_round(n: i128, d: i128) -> i128 {
    let (q, r) = (n / d, n % d);
    if 2 * r.unsigned_abs() >= d.unsigned_abs() {
        q + n.signum() * d.signum()
    } else {
        q
    }
}

pub fn supplier_balance(dev_c_tot: i128, dev_p_tot: i128, prices: &PriceSchedule) -> i128 {
    match determine_mode(dev_c_tot, dev_p_tot) {
        BillingMode::Balanced => 0,
        BillingMode::Surplus => -(dev_p_tot - dev_c_tot) * prices.feed_in as i128,
        BillingMode::Deficit => (dev_c_tot - dev_p_tot) * prices.retail as i128,
    }
}

/// Everything a cycle's statements depend on, derived once from the
/// published totals and prices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CycleTerms {
    pub totals: Totals,
    pub prices: PriceSchedule,
    pub mode: BillingMode,
    /// Rounded per-Wh price applied to prosumer deviations in surplus
    /// mode. `None` when the surplus is degenerate (`dev_p = 0`).
    pub surplus_share: Option<i128>,
    /// Supplier balance including any revenue pool booked to it.
    pub supplier_balance: i128,
    /// `surplus_share * dev_p - TotRev_P`: how much more the prosumers
    /// receive in total than the exact proportional split.
    pub rounding_drift: i128,
    pub degenerate: bool,
}

impl CycleTerms {
    pub fn new(totals: Totals, prices: PriceSchedule) -> Self {
        let mode = totals.mode();
        let mut balance = supplier_balance(totals.dev_c, totals.dev_p, &prices);
        let mut surplus_share = None;
        let mut rounding_drift = 0;
        let mut degenerate = false;
        if mode == BillingMode::Surplus {
            let pool = totals.total_prosumer_revenue(&prices);
            if totals.dev_p == 0 {
                // nobody to share with: the pool stays with the supplier
                degenerate = true;
                balance += pool;
            } else {
                let share = div_round(pool, totals.dev_p);
                rounding_drift = share * totals.dev_p - pool;
                surplus_share = Some(share);
            }
        }
        Self {
            totals,
            prices,
            mode,
            surplus_share,
            supplier_balance: balance,
            rounding_drift,
            degenerate,
        }
    }

    /// Price per Wh of deviation for a user of `role`; `None` means the
    /// deviation term is skipped.
    pub fn deviation_price(&self, role: Role) -> Option<i128> {
        match (self.mode, role) {
            (BillingMode::Balanced, _) | (BillingMode::Surplus, Role::Consumer) => {
                Some(self.prices.p2p as i128)
            }
            (BillingMode::Deficit, _) => Some(self.prices.retail as i128),
            (BillingMode::Surplus, Role::Prosumer) => self.surplus_share,
        }
    }

    /// The cycle statement, skipping the proportional term when degenerate.
    pub fn statement(
        &self,
        pk: &PublicKey,
        role: Role,
        v_p2p: &Ciphertext,
        in_dev: &Ciphertext,
    ) -> Result<Ciphertext, BillingError> {
        let traded = he::scalar_mul(pk, v_p2p, self.prices.p2p as i128)?;
        match self.deviation_price(role) {
            Some(price) => Ok(he::add(pk, &traded, &he::scalar_mul(pk, in_dev, price)?)?),
            None => Ok(traded),
        }
    }
}

/// Statement of one user for one cycle. Fails on a degenerate surplus for
/// a prosumer; callers that want the fallback use [`CycleTerms::statement`].
pub fn compute_statement(
    pk: &PublicKey,
    role: Role,
    v_p2p: &Ciphertext,
    in_dev: &Ciphertext,
    totals: Totals,
    prices: &PriceSchedule,
) -> Result<Ciphertext, BillingError> {
    let terms = CycleTerms::new(totals, *prices);
    if terms.degenerate && role == Role::Prosumer {
        return Err(BillingError::DegenerateSurplus);
    }
    terms.statement(pk, role, v_p2p, in_dev)
}

pub fn accumulate_statement(
    pk: &PublicKey,
    total: &Ciphertext,
    statement: &Ciphertext,
) -> Result<Ciphertext, BillingError> {
    Ok(he::add(pk, total, statement)?)
}

/// Encrypted running statement per user for one billing period.
#[derive(Clone, Debug)]
pub struct StatementLedger {
    pk: PublicKey,
    totals: BTreeMap<UserId, Ciphertext>,
}

impl StatementLedger {
    /// Opens every account at an encryption of zero.
    pub fn new(
        pk: &PublicKey,
        users: impl IntoIterator<Item = UserId>,
        seed: u64,
        period_id: u64,
    ) -> Result<Self, BillingError> {
        let mut totals = BTreeMap::new();
        for user in users {
            let mut stream = rng::stream(
                seed,
                "statement-init",
                &[period_id, crate::market::user_key(user)],
            );
            totals.insert(user, he::encrypt(pk, &SignedFixed::zero(), &mut stream)?);
        }
        Ok(Self {
            pk: pk.clone(),
            totals,
        })
    }

    pub fn accumulate(&mut self, user: UserId, statement: &Ciphertext) -> Result<(), BillingError> {
        let slot = self.totals.get_mut(&user).ok_or(BillingError::UnknownUser(user))?;
        *slot = accumulate_statement(&self.pk, slot, statement)?;
        Ok(())
    }

    pub fn get(&self, user: UserId) -> Option<&Ciphertext> {
        self.totals.get(&user)
    }

    pub fn iter(&self) -> impl Iterator<Item = (UserId, &Ciphertext)> {
        self.totals.iter().map(|(&u, c)| (u, c))
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }
}
