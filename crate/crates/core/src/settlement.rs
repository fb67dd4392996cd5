//! Supplier-side services and the billing-period lifecycle: key rotation,
//! the decryption oracle, supplier balance accumulation and finalization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Deserialize;
use thiserror::Error;

use crate::accountability::DecryptionService;
use crate::billing::StatementLedger;
use crate::he::{self, Ciphertext, HeError, KeyFingerprint, KeyPair, PublicKey};
use crate::ledger::{Ledger, LedgerError, Party, Tag};
use crate::market::{Role, UserId};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SettlementError {
    #[error("period {0} is already finalized")]
    Finalized(u64),
    #[error("period {0} must be finalized before keys rotate")]
    PreviousOpen(u64),
    #[error("period {period} has {pending} unresolved disputes")]
    PendingDisputes { period: u64, pending: usize },
    #[error("period {0} has no processed cycles")]
    Empty(u64),
    #[error(transparent)]
    Crypto(#[from] HeError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Holder of the period's secret key. Every decryption goes through one of
/// its counted entry points.
#[derive(Debug)]
pub struct Supplier {
    keys: KeyPair,
    differences: AtomicU64,
    totals: AtomicU64,
    finals: AtomicU64,
}

impl Supplier {
    pub fn new(keys: KeyPair) -> Self {
        Self {
            keys,
            differences: AtomicU64::new(0),
            totals: AtomicU64::new(0),
            finals: AtomicU64::new(0),
        }
    }

    pub fn period_id(&self) -> u64 {
        self.keys.period_id
    }

    pub fn fingerprint(&self) -> KeyFingerprint {
        self.keys.public.fingerprint()
    }

    /// End-of-period decryption of an accumulated statement.
    pub fn decrypt_final(&self, ct: &Ciphertext) -> Result<i128, HeError> {
        self.finals.fetch_add(1, Ordering::Relaxed);
        decode(he::decrypt(&self.keys.secret, ct)?)
    }

    /// Decryption outside the protocol, for the simulator's audit mode.
    /// Not counted.
    pub fn audit_decrypt(&self, ct: &Ciphertext) -> Result<i128, HeError> {
        decode(he::decrypt(&self.keys.secret, ct)?)
    }

    /// `(difference, total, final)` decryption counts so far.
    pub fn request_counts(&self) -> (u64, u64, u64) {
        (
            self.differences.load(Ordering::Relaxed),
            self.totals.load(Ordering::Relaxed),
            self.finals.load(Ordering::Relaxed),
        )
    }
}

fn decode(v: he::SignedFixed) -> Result<i128, HeError> {
    v.to_i128().ok_or(HeError::Range)
}

impl DecryptionService for Supplier {
    fn public_key(&self) -> &PublicKey {
        &self.keys.public
    }

    fn decrypt_difference(&self, ct: &Ciphertext) -> Result<i128, HeError> {
        self.differences.fetch_add(1, Ordering::Relaxed);
        decode(he::decrypt_bounded(&self.keys.secret, ct)?)
    }

    fn decrypt_total(&self, ct: &Ciphertext) -> Result<i128, HeError> {
        self.totals.fetch_add(1, Ordering::Relaxed);
        decode(he::decrypt(&self.keys.secret, ct)?)
    }
}

#[derive(Debug)]
pub struct PeriodState {
    pub period_id: u64,
    pub supplier: Supplier,
    pub cycle_count: u64,
    pub bal_sup_tot: i128,
    pub finalized: bool,
}

/// Generates the keys of `period_id`. The previous period, if any, must be
/// finalized first.
pub fn rotate_keys(
    previous: Option<&PeriodState>,
    period_id: u64,
    bits: u32,
    seed: u64,
) -> Result<PeriodState, SettlementError> {
    if let Some(prev) = previous.filter(|p| !p.finalized) {
        return Err(SettlementError::PreviousOpen(prev.period_id));
    }
    let mut stream = rng::stream(seed, "keygen", &[period_id]);
    let keys = he::keygen(bits, period_id, &mut stream)?;
    Ok(PeriodState {
        period_id,
        supplier: Supplier::new(keys),
        cycle_count: 0,
        bal_sup_tot: 0,
        finalized: false,
    })
}

impl PeriodState {
    pub fn public_key(&self) -> &PublicKey {
        self.supplier.public_key()
    }

    pub fn ensure_open(&self) -> Result<(), SettlementError> {
        if self.finalized {
            Err(SettlementError::Finalized(self.period_id))
        } else {
            Ok(())
        }
    }

    /// Adds one cycle's balance; the first cycle starts the sum.
    pub fn accumulate_supplier_balance(&mut self, cycle_balance: i128) -> Result<(), SettlementError> {
        self.ensure_open()?;
        self.bal_sup_tot = if self.cycle_count == 0 {
            cycle_balance
        } else {
            self.bal_sup_tot + cycle_balance
        };
        self.cycle_count += 1;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltySink {
    /// Penalties leave the system.
    #[default]
    Burn,
    /// Penalties are credited to the supplier balance.
    Supplier,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FinalStatement {
    pub user: UserId,
    /// Decrypted accumulated statement before penalties.
    pub statement: i128,
    pub penalty: i128,
    /// Amount after penalties: a consumer pays more, a prosumer receives less.
    pub amount: i128,
    pub ledger_index: u64,
}

impl FinalStatement {
    /// `role,ordinal,amount`: the committed bytes.
    pub fn line(&self) -> String {
        format!("{},{},{}", self.user.role.as_str(), self.user.ordinal, self.amount)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Finalization {
    pub period_id: u64,
    pub finals: Vec<FinalStatement>,
    pub supplier_balance: i128,
    pub supplier_index: u64,
    pub penalties_total: i128,
    pub penalty_sink: PenaltySink,
}

impl Finalization {
    /// `sum(consumer finals) - sum(prosumer finals) - supplier balance`,
    /// minus burned penalties.
    pub fn conservation_residual(&self) -> i128 {
        let mut residual = -self.supplier_balance;
        for f in &self.finals {
            match f.user.role {
                Role::Consumer => residual += f.amount,
                Role::Prosumer => residual -= f.amount,
            }
        }
        if self.penalty_sink == PenaltySink::Burn {
            residual -= self.penalties_total;
        }
        residual
    }

    /// Final report: one `role,ordinal,amount` line per user, then the
    /// supplier balance.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for f in &self.finals {
            out.push_str(&f.line());
            out.push('\n');
        }
        let _ = writeln!(out, "supplier,0,{}", self.supplier_balance);
        out
    }
}

/// Decrypts every accumulated statement, applies penalties, commits the
/// final lines and publishes the supplier balance at `last_cycle`.
pub fn finalize_period(
    state: &mut PeriodState,
    statements: &StatementLedger,
    ledger: &mut Ledger,
    penalties: &BTreeMap<UserId, i128>,
    penalty_sink: PenaltySink,
    pending_disputes: usize,
    last_cycle: u64,
) -> Result<Finalization, SettlementError> {
    state.ensure_open()?;
    if pending_disputes > 0 {
        return Err(SettlementError::PendingDisputes {
            period: state.period_id,
            pending: pending_disputes,
        });
    }
    if state.cycle_count == 0 {
        return Err(SettlementError::Empty(state.period_id));
    }
    let mut finals = Vec::new();
    let mut penalties_total = 0;
    for (user, ct) in statements.iter() {
        let statement = state.supplier.decrypt_final(ct)?;
        let penalty = penalties.get(&user).copied().unwrap_or(0);
        penalties_total += penalty;
        let amount = match user.role {
            Role::Consumer => statement + penalty,
            Role::Prosumer => statement - penalty,
        };
        let mut f = FinalStatement {
            user,
            statement,
            penalty,
            amount,
            ledger_index: 0,
        };
        f.ledger_index = ledger.append(user, last_cycle, Tag::FinalStatement, f.line().as_bytes())?;
        finals.push(f);
    }
    let supplier_balance = match penalty_sink {
        PenaltySink::Burn => state.bal_sup_tot,
        PenaltySink::Supplier => state.bal_sup_tot + penalties_total,
    };
    let supplier_index = ledger.publish_plaintext(Tag::SupplierBalance, last_cycle, supplier_balance)?;
    state.finalized = true;
    Ok(Finalization {
        period_id: state.period_id,
        finals,
        supplier_balance,
        supplier_index,
        penalties_total,
        penalty_sink,
    })
}

/// Checks a final report against the ledger: every user line must match
/// its FINAL_STATEMENT commitment and the supplier line the published
/// balance. Returns the first offending line.
pub fn verify_finals(ledger: &Ledger, text: &str) -> Result<usize, String> {
    let mut committed: BTreeMap<Party, u64> = BTreeMap::new();
    let mut balances = Vec::new();
    for e in ledger.entries() {
        match e.tag {
            Tag::FinalStatement => {
                committed.insert(e.party, e.cycle);
            }
            Tag::SupplierBalance => balances.push(e.clone()),
            _ => {}
        }
    }
    let mut checked = 0;
    for (n, line) in text.lines().enumerate() {
        let bad = |why: &str| format!("line {}: {why}: {line:?}", n + 1);
        let mut fields = line.splitn(3, ',');
        let (Some(role), Some(ordinal), Some(amount)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(bad("malformed"));
        };
        if role == "supplier" {
            let ok = ordinal == "0"
                && balances
                    .iter()
                    .any(|e| e.plaintext().map(|v| v.to_string()).as_deref() == Some(amount));
            if !ok {
                return Err(bad("supplier balance not on ledger"));
            }
        } else {
            let role: Role = role.parse().map_err(|_| bad("unknown role"))?;
            let ordinal: u32 = ordinal.parse().map_err(|_| bad("bad ordinal"))?;
            let user = UserId { role, ordinal };
            let cycle = committed
                .get(&Party::User(user))
                .ok_or_else(|| bad("no commitment"))?;
            if !ledger.verify(user, *cycle, Tag::FinalStatement, line.as_bytes()).unwrap_or(false) {
                return Err(bad("does not match commitment"));
            }
        }
        checked += 1;
    }
    Ok(checked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::he::SignedFixed;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const C: UserId = UserId { role: Role::Consumer, ordinal: 0 };
    const P: UserId = UserId { role: Role::Prosumer, ordinal: 0 };

    fn open(period: u64) -> PeriodState {
        rotate_keys(None, period, 1024, 77).unwrap()
    }

    fn enc(pk: &PublicKey, v: i64, seed: u64) -> Ciphertext {
        he::encrypt(pk, &SignedFixed::from(v), &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn rotation_requires_finalization_and_changes_keys() {
        let mut p0 = open(0);
        assert_eq!(rotate_keys(Some(&p0), 1, 1024, 77).unwrap_err(), SettlementError::PreviousOpen(0));
        p0.finalized = true;
        let p1 = rotate_keys(Some(&p0), 1, 1024, 77).unwrap();
        assert_ne!(p0.supplier.fingerprint(), p1.supplier.fingerprint());
        let a = enc(p0.public_key(), 1, 1);
        let b = enc(p1.public_key(), 1, 2);
        assert!(matches!(he::add(p1.public_key(), &a, &b), Err(HeError::KeyMismatch { .. })));
        assert!(matches!(p1.supplier.decrypt_total(&a), Err(HeError::KeyMismatch { .. })));
        assert!(matches!(rotate_keys(None, 0, 512, 1), Err(SettlementError::Crypto(HeError::KeySize(512)))));
    }

    #[test]
    fn supplier_balance_is_a_running_sum() {
        let mut state = open(0);
        state.accumulate_supplier_balance(-1500).unwrap();
        assert_eq!(state.bal_sup_tot, -1500);
        state.accumulate_supplier_balance(4500).unwrap();
        assert_eq!(state.bal_sup_tot, 3000);
        state.accumulate_supplier_balance(0).unwrap();
        assert_eq!((state.bal_sup_tot, state.cycle_count), (3000, 3));
        state.finalized = true;
        assert_eq!(state.accumulate_supplier_balance(1), Err(SettlementError::Finalized(0)));
    }

    fn hand_period() -> (PeriodState, StatementLedger) {
        let mut state = open(0);
        let pk = state.public_key().clone();
        let mut statements = StatementLedger::new(&pk, [C, P], 1, 0).unwrap();
        statements.accumulate(C, &enc(&pk, 12000, 3)).unwrap();
        statements.accumulate(P, &enc(&pk, 13500, 4)).unwrap();
        state.accumulate_supplier_balance(-1500).unwrap();
        (state, statements)
    }

    #[test]
    fn hand_instance_finalizes_and_verifies() {
        let (mut state, statements) = hand_period();
        let mut ledger = Ledger::new();
        let fin = finalize_period(&mut state, &statements, &mut ledger, &BTreeMap::new(), PenaltySink::Burn, 0, 0).unwrap();
        let amounts: Vec<i128> = fin.finals.iter().map(|f| f.amount).collect();
        assert_eq!(amounts, vec![12000, 13500]);
        assert_eq!(fin.supplier_balance, -1500);
        assert_eq!(fin.conservation_residual(), 0);
        let text = fin.render();
        assert_eq!(text, "consumer,0,12000\nprosumer,0,13500\nsupplier,0,-1500\n");
        assert_eq!(verify_finals(&ledger, &text), Ok(3));
        assert!(verify_finals(&ledger, &text.replace("13500", "13501")).is_err());
        assert!(verify_finals(&ledger, &text.replace("-1500", "-1501")).is_err());
        assert_eq!(ledger.plaintext(Tag::SupplierBalance, 0), Some(-1500));

        let again = finalize_period(&mut state, &statements, &mut ledger, &BTreeMap::new(), PenaltySink::Burn, 0, 0);
        assert_eq!(again.unwrap_err(), SettlementError::Finalized(0));
    }

    #[test]
    fn penalties_adjust_finals_and_keep_conservation() {
        let penalties = BTreeMap::from([(C, 500), (P, 200)]);
        for sink in [PenaltySink::Burn, PenaltySink::Supplier] {
            let (mut state, statements) = hand_period();
            let mut ledger = Ledger::new();
            let fin = finalize_period(&mut state, &statements, &mut ledger, &penalties, sink, 0, 0).unwrap();
            assert_eq!(fin.finals[0].amount, 12500);
            assert_eq!(fin.finals[1].amount, 13300);
            assert_eq!(fin.penalties_total, 700);
            assert_eq!(fin.conservation_residual(), 0);
            let expected_balance = if sink == PenaltySink::Burn { -1500 } else { -800 };
            assert_eq!(fin.supplier_balance, expected_balance);
        }
    }

    #[test]
    fn pending_disputes_block_finalization() {
        let (mut state, statements) = hand_period();
        let err = finalize_period(&mut state, &statements, &mut Ledger::new(), &BTreeMap::new(), PenaltySink::Burn, 2, 0);
        assert_eq!(err.unwrap_err(), SettlementError::PendingDisputes { period: 0, pending: 2 });
        assert!(!state.finalized);
    }

    #[test]
    fn supplier_counts_requests() {
        let state = open(0);
        let ct = enc(state.public_key(), 9, 1);
        assert_eq!(state.supplier.decrypt_difference(&ct), Ok(9));
        assert_eq!(state.supplier.decrypt_total(&ct), Ok(9));
        assert_eq!(state.supplier.decrypt_final(&ct), Ok(9));
        assert_eq!(state.supplier.request_counts(), (1, 1, 1));
    }
}
