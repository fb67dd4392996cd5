//! Plaintext reference billing in exact rational arithmetic.
//!
//! Deliberately shares no code with the encrypted pipeline so the two can
//! be compared. Surplus shares are kept exact here; the encrypted pipeline
//! rounds them to whole μ¤/Wh.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rug::{Integer, Rational};

use crate::market::{CycleInput, PricePlan, Role, UserId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleMode {
    Balanced,
    Deficit,
    Surplus,
}

#[derive(Clone, Debug)]
pub struct OracleCycle {
    pub cycle: u64,
    pub dev_c: i128,
    pub dev_p: i128,
    pub mode: OracleMode,
    /// Surplus with zero prosumer deviation: no proportional split, the
    /// revenue pool is booked to the supplier.
    pub degenerate: bool,
    pub statements: BTreeMap<UserId, Rational>,
    pub supplier_balance: Rational,
}

impl OracleCycle {
    /// `sum(consumer) - sum(prosumer) - supplier balance`.
    pub fn residual(&self) -> Rational {
        let mut r = -self.supplier_balance.clone();
        for (u, s) in &self.statements {
            match u.role {
                Role::Consumer => r += s,
                Role::Prosumer => r -= s,
            }
        }
        r
    }
}

#[derive(Clone, Debug)]
pub struct OracleRun {
    pub cycles: Vec<OracleCycle>,
    pub finals: BTreeMap<UserId, Rational>,
    pub supplier_balance: Rational,
    /// Per prosumer, half the sum of `|inDev|` over surplus cycles: the
    /// most the rounded share may move its final statement.
    pub rounding_allowance: BTreeMap<UserId, Rational>,
}

fn q(v: i128) -> Rational {
    Rational::from(Integer::from(v))
}

pub fn bill_cycle(input: &CycleInput, plan: &PricePlan) -> OracleCycle {
    let prices = plan.for_cycle(input.cycle);
    let (p2p, rt, fit) = (q(prices.p2p as i128), q(prices.retail as i128), q(prices.feed_in as i128));
    let in_dev: BTreeMap<UserId, i128> = input
        .committed
        .iter()
        .map(|(u, &v)| (*u, input.real[u] as i128 - v as i128))
        .collect();
    let dev_of = |role: Role| -> i128 { in_dev.iter().filter(|(u, _)| u.role == role).map(|(_, d)| d).sum() };
    let (dev_c, dev_p) = (dev_of(Role::Consumer), dev_of(Role::Prosumer));
    let mode = if dev_p == dev_c {
        OracleMode::Balanced
    } else if dev_p < dev_c {
        OracleMode::Deficit
    } else {
        OracleMode::Surplus
    };
    let pool = q(dev_c) * &p2p + q(dev_p - dev_c) * &fit;
    let degenerate = mode == OracleMode::Surplus && dev_p == 0;

    let mut statements = BTreeMap::new();
    for (&user, &committed) in &input.committed {
        let d = q(in_dev[&user]);
        let traded = q(committed as i128) * &p2p;
        let deviation = match (mode, user.role) {
            (OracleMode::Balanced, _) => d * &p2p,
            (OracleMode::Deficit, _) => d * &rt,
            (OracleMode::Surplus, Role::Consumer) => d * &p2p,
            (OracleMode::Surplus, Role::Prosumer) if degenerate => q(0),
            (OracleMode::Surplus, Role::Prosumer) => d * &pool / q(dev_p),
        };
        statements.insert(user, traded + deviation);
    }
    let supplier_balance = match mode {
        OracleMode::Balanced => q(0),
        OracleMode::Deficit => q(dev_c - dev_p) * &rt,
        OracleMode::Surplus if degenerate => -(q(dev_p - dev_c) * &fit) + &pool,
        OracleMode::Surplus => -(q(dev_p - dev_c) * &fit),
    };
    OracleCycle {
        cycle: input.cycle,
        dev_c,
        dev_p,
        mode,
        degenerate,
        statements,
        supplier_balance,
    }
}

pub fn bill(inputs: &[CycleInput], plan: &PricePlan) -> OracleRun {
    let mut finals: BTreeMap<UserId, Rational> = BTreeMap::new();
    let mut allowance: BTreeMap<UserId, Rational> = BTreeMap::new();
    let mut supplier_balance = q(0);
    let mut cycles = Vec::with_capacity(inputs.len());
    for input in inputs {
        let c = bill_cycle(input, plan);
        for (u, s) in &c.statements {
            *finals.entry(*u).or_default() += s;
            if u.role == Role::Prosumer {
                let slot = allowance.entry(*u).or_default();
                if c.mode == OracleMode::Surplus && !c.degenerate {
                    let d = input.real[u] as i128 - input.committed[u] as i128;
                    *slot += q(d.abs()) / 2u32;
                }
            }
        }
        supplier_balance += &c.supplier_balance;
        cycles.push(c);
    }
    OracleRun {
        cycles,
        finals,
        supplier_balance,
        rounding_allowance: allowance,
    }
}

/// Nearest integer, ties away from zero.
pub fn round(v: &Rational) -> Integer {
    Integer::from(v.round_ref())
}

impl OracleRun {
    /// Same layout as the simulator's finals file. Values are rounded to
    /// whole μ¤; they are exact unless a surplus share was fractional.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (u, v) in &self.finals {
            let _ = writeln!(out, "{},{},{}", u.role.as_str(), u.ordinal, round(v));
        }
        let _ = writeln!(out, "supplier,0,{}", round(&self.supplier_balance));
        out
    }

    pub fn is_exact(&self) -> bool {
        self.finals.values().chain([&self.supplier_balance]).all(|v| *v.denom() == 1)
    }
}
