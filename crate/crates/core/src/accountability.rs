//! Referee-side verification: pairwise cross-checks through the
//! encrypted-difference zero-check, aggregator result checks, and dispute
//! resolution backed by ledger commitments.
//!
//! A dispute recomputes the contested quantity from ledger-verified
//! inputs and compares every report against it. A party is responsible
//! when its report differs from the recomputation, when it withholds a
//! report or its data, or when the data it hands over does not match the
//! ledger. An empty responsible list means the dispute was a false alarm.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::billing::{self, BillingError, CycleTerms};
use crate::he::{self, Ciphertext, HeError, PublicKey};
use crate::ledger::{Ledger, LedgerError, Party, Tag};
use crate::market::{Role, UserId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AccountabilityError {
    #[error(transparent)]
    Crypto(#[from] HeError),
    #[error(transparent)]
    Billing(#[from] BillingError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("no verifiable {tag} for {subject} in cycle {cycle}")]
    Unrecoverable { subject: UserId, cycle: u64, tag: Tag },
    #[error("no accepted deviation for {0}")]
    MissingDeviation(UserId),
}

/// The supplier's two decryption entry points.
pub trait DecryptionService {
    fn public_key(&self) -> &PublicKey;
    /// Plaintext of a homomorphic difference, used only for zero-checks.
    fn decrypt_difference(&self, ct: &Ciphertext) -> Result<i128, HeError>;
    /// Plaintext of a value that is about to become public.
    fn decrypt_total(&self, ct: &Ciphertext) -> Result<i128, HeError>;
}

/// True iff `a` and `b` encrypt the same value.
pub fn zero_check(
    a: &Ciphertext,
    b: &Ciphertext,
    supplier: &dyn DecryptionService,
) -> Result<bool, HeError> {
    let diff = he::sub(supplier.public_key(), a, b)?;
    Ok(supplier.decrypt_difference(&diff)? == 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReportKind {
    InDev,
    Statement,
}

/// What a dispute was about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DisputeKind {
    InDev,
    Statement,
    Total(Role),
}

impl DisputeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DisputeKind::InDev => "IN_DEV",
            DisputeKind::Statement => "STATEMENT",
            DisputeKind::Total(Role::Consumer) => "TOTAL_DEV_C",
            DisputeKind::Total(Role::Prosumer) => "TOTAL_DEV_P",
        }
    }
}

impl From<ReportKind> for DisputeKind {
    fn from(kind: ReportKind) -> Self {
        match kind {
            ReportKind::InDev => DisputeKind::InDev,
            ReportKind::Statement => DisputeKind::Statement,
        }
    }
}

impl fmt::Display for DisputeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `reporter`'s computation of `subject`'s value.
#[derive(Clone, Debug)]
pub struct PairReport {
    pub subject: UserId,
    pub reporter: UserId,
    pub value_ct: Ciphertext,
    pub kind: ReportKind,
    pub cycle: u64,
}

/// Reports of one kind for one cycle, keyed by `(subject, reporter)`.
#[derive(Clone, Debug)]
pub struct ReportBook {
    pub kind: ReportKind,
    pub cycle: u64,
    entries: BTreeMap<(UserId, UserId), Ciphertext>,
}

impl ReportBook {
    pub fn new(kind: ReportKind, cycle: u64) -> Self {
        Self {
            kind,
            cycle,
            entries: BTreeMap::new(),
        }
    }

    /// Files a report; reports of another kind or cycle are ignored.
    pub fn insert(&mut self, report: PairReport) {
        if report.kind == self.kind && report.cycle == self.cycle {
            self.entries.insert((report.subject, report.reporter), report.value_ct);
        }
    }

    pub fn get(&self, subject: UserId, reporter: UserId) -> Option<&Ciphertext> {
        self.entries.get(&(subject, reporter))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Where the referee obtains volume ciphertexts during a dispute.
pub trait Custody {
    /// `holder`'s copy of `subject`'s `P2P_VOLUME` or `REAL_VOLUME`, as
    /// `holder` chooses to submit it.
    fn submit_volume(&self, holder: UserId, subject: UserId, tag: Tag) -> Option<Ciphertext>;
    /// The producer's archived copy (trading platform or sealed meter).
    fn archive(&self, subject: UserId, tag: Tag) -> Option<Ciphertext>;
}

/// A value the referee has accepted for a subject, with its ledger entry.
#[derive(Clone, Debug)]
pub struct Accepted {
    pub ct: Ciphertext,
    pub ledger_index: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Subject {
    User(UserId),
    Total(Role),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::User(u) => u.fmt(f),
            Subject::Total(Role::Consumer) => f.write_str("TOTAL_C"),
            Subject::Total(Role::Prosumer) => f.write_str("TOTAL_P"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DisputeVerdict {
    pub cycle: u64,
    pub kind: DisputeKind,
    /// The disputed pair, or the aggregators for a total.
    pub parties: Vec<UserId>,
    /// Recomputed values that replace the reports downstream.
    pub corrected: Vec<(Subject, Ciphertext)>,
    /// Empty when nobody misbehaved.
    pub responsible: Vec<UserId>,
    /// Charged to each responsible party.
    pub penalty: i128,
    pub evidence: Vec<u64>,
}

impl DisputeVerdict {
    pub fn is_false_alarm(&self) -> bool {
        self.responsible.is_empty()
    }

    /// `cycle|kind|pair|responsible|penalty|evidence`.
    pub fn render(&self) -> String {
        let join = |ids: &[UserId]| ids.iter().map(UserId::to_string).collect::<Vec<_>>().join(",");
        let responsible = if self.responsible.is_empty() {
            "SYSTEM".to_string()
        } else {
            join(&self.responsible)
        };
        let penalty = if self.responsible.is_empty() { 0 } else { self.penalty };
        let evidence: Vec<String> = self.evidence.iter().map(u64::to_string).collect();
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.cycle,
            self.kind,
            join(&self.parties),
            responsible,
            penalty,
            evidence.join(",")
        )
    }
}

#[derive(Clone, Debug)]
pub enum PairOutcome {
    Ok,
    Dispute(DisputeVerdict),
}

impl PairOutcome {
    pub fn verdict(&self) -> Option<&DisputeVerdict> {
        match self {
            PairOutcome::Ok => None,
            PairOutcome::Dispute(v) => Some(v),
        }
    }
}

/// Per-cycle inputs shared by every referee check.
pub struct Referee<'a> {
    pub cycle: u64,
    pub supplier: &'a dyn DecryptionService,
    pub custody: &'a dyn Custody,
    pub penalty: i128,
}

#[derive(Default)]
struct Findings {
    responsible: Vec<UserId>,
    evidence: Vec<u64>,
}

impl Findings {
    fn blame(&mut self, user: UserId) {
        if !self.responsible.contains(&user) {
            self.responsible.push(user);
        }
    }

    fn cite(&mut self, index: u64) {
        if !self.evidence.contains(&index) {
            self.evidence.push(index);
        }
    }
}

impl Referee<'_> {
    fn pk(&self) -> &PublicKey {
        self.supplier.public_key()
    }

    /// Collects `subject`'s volume from both parties and keeps a copy that
    /// matches the ledger. Parties whose copy is missing or fails
    /// verification are blamed; if none verifies the producer archive is used.
    fn verified_volume(
        &self,
        pair: (UserId, UserId),
        subject: UserId,
        tag: Tag,
        ledger: &Ledger,
        findings: &mut Findings,
    ) -> Result<Ciphertext, AccountabilityError> {
        let cycle = self.cycle;
        let entry = ledger
            .find(Party::User(subject), cycle, tag)
            .ok_or(LedgerError::NotFound {
                party: Party::User(subject),
                cycle,
                tag,
            })?;
        findings.cite(entry.index);
        let mut good = None;
        for holder in [pair.0, pair.1] {
            match self.custody.submit_volume(holder, subject, tag) {
                Some(ct) if ledger.verify(subject, cycle, tag, &ct.to_bytes())? => {
                    good.get_or_insert(ct);
                }
                _ => findings.blame(holder),
            }
        }
        if let Some(ct) = good {
            return Ok(ct);
        }
        match self.custody.archive(subject, tag) {
            Some(ct) if ledger.verify(subject, cycle, tag, &ct.to_bytes())? => Ok(ct),
            _ => Err(AccountabilityError::Unrecoverable {
                subject,
                cycle,
                tag,
            }),
        }
    }

    fn accepted_indev<'b>(
        &self,
        subject: UserId,
        accepted: &'b BTreeMap<UserId, Accepted>,
        ledger: &Ledger,
        findings: &mut Findings,
    ) -> Result<&'b Ciphertext, AccountabilityError> {
        let acc = accepted
            .get(&subject)
            .ok_or(AccountabilityError::MissingDeviation(subject))?;
        if !ledger.verify(subject, self.cycle, Tag::InDev, &acc.ct.to_bytes())? {
            return Err(AccountabilityError::MissingDeviation(subject));
        }
        findings.cite(acc.ledger_index);
        Ok(&acc.ct)
    }

    /// Self-report against the partner's cross-report, per subject.
    fn cross_checks(&self, pair: (UserId, UserId), reports: &ReportBook) -> Result<bool, HeError> {
        for (subject, other) in [pair, (pair.1, pair.0)] {
            let (Some(own), Some(cross)) = (reports.get(subject, subject), reports.get(subject, other))
            else {
                return Ok(false);
            };
            if !zero_check(own, cross, self.supplier)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Compares every report about both subjects with the recomputed truth.
    fn judge(
        &self,
        pair: (UserId, UserId),
        reports: &ReportBook,
        truth: &[(UserId, Ciphertext)],
        findings: &mut Findings,
    ) -> Result<(), HeError> {
        for (subject, value) in truth {
            for reporter in [pair.0, pair.1] {
                match reports.get(*subject, reporter) {
                    Some(ct) if zero_check(ct, value, self.supplier)? => {}
                    _ => findings.blame(reporter),
                }
            }
        }
        Ok(())
    }

    fn verdict(
        &self,
        kind: DisputeKind,
        parties: Vec<UserId>,
        corrected: Vec<(Subject, Ciphertext)>,
        mut findings: Findings,
    ) -> DisputeVerdict {
        findings.responsible.sort();
        findings.evidence.sort();
        DisputeVerdict {
            cycle: self.cycle,
            kind,
            parties,
            corrected,
            responsible: findings.responsible,
            penalty: self.penalty,
            evidence: findings.evidence,
        }
    }

    /// Recomputes both subjects' individual deviations from ledger-verified
    /// volumes and names every party whose data or reports disagree.
    pub fn resolve_indev_dispute(
        &self,
        pair: (UserId, UserId),
        reports: &ReportBook,
        ledger: &Ledger,
    ) -> Result<DisputeVerdict, AccountabilityError> {
        let mut findings = Findings::default();
        let mut truth = Vec::with_capacity(2);
        for subject in [pair.0, pair.1] {
            let real = self.verified_volume(pair, subject, Tag::RealVolume, ledger, &mut findings)?;
            let p2p = self.verified_volume(pair, subject, Tag::P2pVolume, ledger, &mut findings)?;
            truth.push((subject, billing::individual_deviation(self.pk(), &real, &p2p)?));
        }
        self.judge(pair, reports, &truth, &mut findings)?;
        let corrected = truth.into_iter().map(|(u, ct)| (Subject::User(u), ct)).collect();
        Ok(self.verdict(DisputeKind::InDev, vec![pair.0, pair.1], corrected, findings))
    }

    /// Recomputes both subjects' statements from ledger-verified committed
    /// volumes, the committed deviations and the published cycle terms.
    pub fn resolve_statement_dispute(
        &self,
        pair: (UserId, UserId),
        reports: &ReportBook,
        terms: &CycleTerms,
        accepted_indev: &BTreeMap<UserId, Accepted>,
        ledger: &Ledger,
    ) -> Result<DisputeVerdict, AccountabilityError> {
        let mut findings = Findings::default();
        for tag in [Tag::P2pPrice, Tag::TotalDevC, Tag::TotalDevP] {
            if let Some(entry) = ledger.find(tag.publisher(), self.cycle, tag) {
                findings.cite(entry.index);
            }
        }
        let mut truth = Vec::with_capacity(2);
        for subject in [pair.0, pair.1] {
            let p2p = self.verified_volume(pair, subject, Tag::P2pVolume, ledger, &mut findings)?;
            let in_dev = self.accepted_indev(subject, accepted_indev, ledger, &mut findings)?;
            truth.push((subject, terms.statement(self.pk(), subject.role, &p2p, in_dev)?));
        }
        self.judge(pair, reports, &truth, &mut findings)?;
        let corrected = truth.into_iter().map(|(u, ct)| (Subject::User(u), ct)).collect();
        Ok(self.verdict(DisputeKind::Statement, vec![pair.0, pair.1], corrected, findings))
    }

    /// Cross-checks a matched pair's individual deviations. Each subject's
    /// verified (or corrected) deviation is committed to the ledger the
    /// first time any of its pairs is settled.
    pub fn verify_pair_indev(
        &self,
        pair: (UserId, UserId),
        reports: &ReportBook,
        ledger: &mut Ledger,
        accepted: &mut BTreeMap<UserId, Accepted>,
    ) -> Result<PairOutcome, AccountabilityError> {
        if self.cross_checks(pair, reports)? {
            for subject in [pair.0, pair.1] {
                if !accepted.contains_key(&subject) {
                    let ct = reports.get(subject, subject).expect("checked").clone();
                    let ledger_index = ledger.append(subject, self.cycle, Tag::InDev, &ct.to_bytes())?;
                    accepted.insert(subject, Accepted { ct, ledger_index });
                }
            }
            return Ok(PairOutcome::Ok);
        }
        let mut verdict = self.resolve_indev_dispute(pair, reports, ledger)?;
        for (subject, ct) in &verdict.corrected {
            let Subject::User(subject) = *subject else { continue };
            let ledger_index = match accepted.get(&subject) {
                Some(acc) => acc.ledger_index,
                None => {
                    let index = ledger.append(subject, self.cycle, Tag::InDev, &ct.to_bytes())?;
                    accepted.insert(subject, Accepted { ct: ct.clone(), ledger_index: index });
                    index
                }
            };
            if !verdict.evidence.contains(&ledger_index) {
                verdict.evidence.push(ledger_index);
            }
        }
        verdict.evidence.sort();
        Ok(PairOutcome::Dispute(verdict))
    }

    /// Cross-checks a matched pair's statements; the first verified or
    /// corrected statement per subject is recorded in `accepted`.
    pub fn verify_pair_statements(
        &self,
        pair: (UserId, UserId),
        reports: &ReportBook,
        terms: &CycleTerms,
        accepted_indev: &BTreeMap<UserId, Accepted>,
        ledger: &Ledger,
        accepted: &mut BTreeMap<UserId, Ciphertext>,
    ) -> Result<PairOutcome, AccountabilityError> {
        if self.cross_checks(pair, reports)? {
            for subject in [pair.0, pair.1] {
                accepted
                    .entry(subject)
                    .or_insert_with(|| reports.get(subject, subject).expect("checked").clone());
            }
            return Ok(PairOutcome::Ok);
        }
        let verdict = self.resolve_statement_dispute(pair, reports, terms, accepted_indev, ledger)?;
        for (subject, ct) in &verdict.corrected {
            if let Subject::User(subject) = *subject {
                accepted.entry(subject).or_insert_with(|| ct.clone());
            }
        }
        Ok(PairOutcome::Dispute(verdict))
    }

    /// Checks the aggregators' sums for `role`, publishes the verified
    /// total and returns it with any verdict.
    ///
    /// Unanimous agreement among two or more candidates is accepted as is.
    /// Otherwise, and always for a lone aggregator, the referee recomputes
    /// the sum from the committed deviations and blames every aggregator
    /// whose candidate differs from it.
    pub fn verify_totals(
        &self,
        role: Role,
        candidates: &[(UserId, Option<Ciphertext>)],
        accepted_indev: &BTreeMap<UserId, Accepted>,
        ledger: &mut Ledger,
    ) -> Result<TotalOutcome, AccountabilityError> {
        let tag = match role {
            Role::Consumer => Tag::TotalDevC,
            Role::Prosumer => Tag::TotalDevP,
        };
        let present: Vec<&Ciphertext> = candidates.iter().filter_map(|(_, c)| c.as_ref()).collect();
        if present.len() >= 2 && present.len() == candidates.len() {
            let mut unanimous = true;
            for other in &present[1..] {
                if !zero_check(present[0], other, self.supplier)? {
                    unanimous = false;
                    break;
                }
            }
            if unanimous {
                let total = self.supplier.decrypt_total(present[0])?;
                let ledger_index = ledger.publish_plaintext(tag, self.cycle, total)?;
                return Ok(TotalOutcome {
                    total,
                    ledger_index,
                    verdict: None,
                });
            }
        }

        let mut findings = Findings::default();
        let mut members: Vec<&Ciphertext> = Vec::new();
        for user in accepted_indev.keys().filter(|u| u.role == role) {
            members.push(self.accepted_indev(*user, accepted_indev, ledger, &mut findings)?);
        }
        let owned: Vec<Ciphertext> = members.into_iter().cloned().collect();
        let recomputed = billing::total_deviation(self.pk(), &owned)?;
        for (aggregator, candidate) in candidates {
            match candidate {
                Some(ct) if zero_check(ct, &recomputed, self.supplier)? => {}
                _ => findings.blame(*aggregator),
            }
        }
        let total = self.supplier.decrypt_total(&recomputed)?;
        let ledger_index = ledger.publish_plaintext(tag, self.cycle, total)?;
        findings.cite(ledger_index);
        let lone_and_correct = candidates.len() < 2 && findings.responsible.is_empty();
        let verdict = (!lone_and_correct).then(|| {
            self.verdict(
                DisputeKind::Total(role),
                candidates.iter().map(|(u, _)| *u).collect(),
                vec![(Subject::Total(role), recomputed)],
                findings,
            )
        });
        Ok(TotalOutcome {
            total,
            ledger_index,
            verdict,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TotalOutcome {
    pub total: i128,
    pub ledger_index: u64,
    pub verdict: Option<DisputeVerdict>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::billing::Totals;
    use crate::he::{KeyPair, SignedFixed, keygen};
    use crate::market::PriceSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::cell::RefCell;
    use std::sync::OnceLock;

    fn keys() -> &'static KeyPair {
        static KEYS: OnceLock<KeyPair> = OnceLock::new();
        KEYS.get_or_init(|| keygen(1024, 0, &mut ChaCha20Rng::seed_from_u64(31)).unwrap())
    }

    struct TestSupplier;

    impl DecryptionService for TestSupplier {
        fn public_key(&self) -> &PublicKey {
            &keys().public
        }
        fn decrypt_difference(&self, ct: &Ciphertext) -> Result<i128, HeError> {
            Ok(he::decrypt_bounded(&keys().secret, ct)?.to_i128().unwrap())
        }
        fn decrypt_total(&self, ct: &Ciphertext) -> Result<i128, HeError> {
            Ok(he::decrypt(&keys().secret, ct)?.to_i128().unwrap())
        }
    }

    thread_local! {
        static RNG: RefCell<ChaCha20Rng> = RefCell::new(ChaCha20Rng::seed_from_u64(8));
    }

    fn enc(v: i64) -> Ciphertext {
        RNG.with(|r| he::encrypt(&keys().public, &SignedFixed::from(v), &mut *r.borrow_mut()).unwrap())
    }

    fn dec(ct: &Ciphertext) -> i128 {
        TestSupplier.decrypt_total(ct).unwrap()
    }

    fn shift(ct: &Ciphertext, k: i128) -> Ciphertext {
        he::add_plain(&keys().public, ct, k).unwrap()
    }

    /// One consumer and one prosumer whose volumes are on the ledger.
    struct World {
        ledger: Ledger,
        genuine: BTreeMap<(UserId, Tag), Ciphertext>,
        submitted: BTreeMap<(UserId, UserId, Tag), Ciphertext>,
    }

    const C: UserId = UserId { role: Role::Consumer, ordinal: 0 };
    const P: UserId = UserId { role: Role::Prosumer, ordinal: 0 };
    const PAIR: (UserId, UserId) = (C, P);

    impl World {
        fn new(volumes: [(UserId, i64, i64); 2]) -> Self {
            let mut ledger = Ledger::new();
            let mut genuine = BTreeMap::new();
            let mut submitted = BTreeMap::new();
            for (user, p2p, real) in volumes {
                for (tag, v) in [(Tag::P2pVolume, p2p), (Tag::RealVolume, real)] {
                    let ct = enc(v);
                    ledger.append(user, 0, tag, &ct.to_bytes()).unwrap();
                    for holder in [C, P] {
                        submitted.insert((holder, user, tag), ct.clone());
                    }
                    genuine.insert((user, tag), ct);
                }
            }
            Self { ledger, genuine, submitted }
        }

        fn indev(&self, holder: UserId, subject: UserId) -> Ciphertext {
            let get = |tag| &self.submitted[&(holder, subject, tag)];
            billing::individual_deviation(&keys().public, get(Tag::RealVolume), get(Tag::P2pVolume)).unwrap()
        }

        fn indev_reports(&self) -> ReportBook {
            let mut book = ReportBook::new(ReportKind::InDev, 0);
            for reporter in [C, P] {
                for subject in [C, P] {
                    book.insert(PairReport {
                        subject,
                        reporter,
                        value_ct: self.indev(reporter, subject),
                        kind: ReportKind::InDev,
                        cycle: 0,
                    });
                }
            }
            book
        }
    }

    impl Custody for World {
        fn submit_volume(&self, holder: UserId, subject: UserId, tag: Tag) -> Option<Ciphertext> {
            self.submitted.get(&(holder, subject, tag)).cloned()
        }
        fn archive(&self, subject: UserId, tag: Tag) -> Option<Ciphertext> {
            self.genuine.get(&(subject, tag)).cloned()
        }
    }

    fn referee(world: &World) -> Referee<'_> {
        Referee {
            cycle: 0,
            supplier: &TestSupplier,
            custody: world,
            penalty: 500,
        }
    }

    fn hand_world() -> World {
        World::new([(C, 1000, 1200), (P, 1000, 1500)])
    }

    #[test]
    fn zero_check_examples() {
        let (a, b) = (enc(200), enc(200));
        assert_ne!(a, b);
        assert!(zero_check(&a, &b, &TestSupplier).unwrap());
        assert!(!zero_check(&enc(5), &enc(7), &TestSupplier).unwrap());
        assert!(zero_check(&enc(0), &enc(0), &TestSupplier).unwrap());
    }

    #[test]
    fn honest_pair_commits_one_deviation_per_subject() {
        let mut world = hand_world();
        let reports = world.indev_reports();
        let mut accepted = BTreeMap::new();
        let mut ledger = std::mem::take(&mut world.ledger);
        let outcome = referee(&world).verify_pair_indev(PAIR, &reports, &mut ledger, &mut accepted).unwrap();
        assert!(matches!(outcome, PairOutcome::Ok));
        assert_eq!(ledger.len(), 6);
        assert_eq!(dec(&accepted[&C].ct), 200);
        assert_eq!(dec(&accepted[&P].ct), 500);
        assert!(ledger.verify(C, 0, Tag::InDev, &accepted[&C].ct.to_bytes()).unwrap());
        // a second pair for the same subjects adds nothing
        referee(&world).verify_pair_indev(PAIR, &reports, &mut ledger, &mut accepted).unwrap();
        assert_eq!(ledger.len(), 6);
    }

    #[test]
    fn corrupted_cross_report_blames_the_reporter() {
        let mut world = hand_world();
        let mut reports = world.indev_reports();
        let bad = shift(reports.get(P, C).unwrap(), 1);
        reports.insert(PairReport { subject: P, reporter: C, value_ct: bad, kind: ReportKind::InDev, cycle: 0 });
        let mut accepted = BTreeMap::new();
        let mut ledger = std::mem::take(&mut world.ledger);
        let outcome = referee(&world).verify_pair_indev(PAIR, &reports, &mut ledger, &mut accepted).unwrap();
        let verdict = outcome.verdict().unwrap();
        assert_eq!(verdict.responsible, vec![C]);
        assert_eq!(dec(&accepted[&P].ct), 500);
        for entry in &verdict.evidence {
            assert!(ledger.get(*entry).is_some());
        }
        assert!(verdict.render().starts_with("0|IN_DEV|C0,P0|C0|500|"));
    }

    #[test]
    fn corrupted_self_report_is_corrected() {
        let world = hand_world();
        let mut reports = world.indev_reports();
        let bad = shift(reports.get(P, P).unwrap(), -100);
        reports.insert(PairReport { subject: P, reporter: P, value_ct: bad, kind: ReportKind::InDev, cycle: 0 });
        let verdict = referee(&world).resolve_indev_dispute(PAIR, &reports, &world.ledger).unwrap();
        assert_eq!(verdict.responsible, vec![P]);
        let corrected: BTreeMap<_, _> = verdict.corrected.iter().cloned().collect();
        assert_eq!(dec(&corrected[&Subject::User(P)]), 500);
        assert_eq!(dec(&corrected[&Subject::User(C)]), 200);
    }

    #[test]
    fn substituted_volume_fails_ledger_verification() {
        let mut world = hand_world();
        // the consumer swaps its own meter reading for a lower one and
        // reports consistently with it
        let fake = shift(&world.genuine[&(C, Tag::RealVolume)], -150);
        world.submitted.insert((C, C, Tag::RealVolume), fake);
        let reports = world.indev_reports();
        let verdict = referee(&world).resolve_indev_dispute(PAIR, &reports, &world.ledger).unwrap();
        assert_eq!(verdict.responsible, vec![C]);
        let corrected: BTreeMap<_, _> = verdict.corrected.iter().cloned().collect();
        assert_eq!(dec(&corrected[&Subject::User(C)]), 200);
    }

    #[test]
    fn both_parties_substituting_falls_back_to_the_archive() {
        let mut world = hand_world();
        for holder in [C, P] {
            let fake = shift(&world.genuine[&(P, Tag::P2pVolume)], 1);
            world.submitted.insert((holder, P, Tag::P2pVolume), fake);
        }
        let reports = world.indev_reports();
        let verdict = referee(&world).resolve_indev_dispute(PAIR, &reports, &world.ledger).unwrap();
        assert_eq!(verdict.responsible, vec![C, P]);
        let corrected: BTreeMap<_, _> = verdict.corrected.iter().cloned().collect();
        assert_eq!(dec(&corrected[&Subject::User(P)]), 500);
    }

    #[test]
    fn spurious_dispute_blames_nobody() {
        let world = hand_world();
        let verdict = referee(&world).resolve_indev_dispute(PAIR, &world.indev_reports(), &world.ledger).unwrap();
        assert!(verdict.is_false_alarm());
        assert!(verdict.render().contains("|SYSTEM|0|"));
    }

    #[test]
    fn silent_party_is_responsible() {
        let mut world = hand_world();
        let full = world.indev_reports();
        let mut reports = ReportBook::new(ReportKind::InDev, 0);
        for (s, r) in [(C, C), (P, P), (C, P)] {
            reports.insert(PairReport { subject: s, reporter: r, value_ct: full.get(s, r).unwrap().clone(), kind: ReportKind::InDev, cycle: 0 });
        }
        let mut ledger = std::mem::take(&mut world.ledger);
        let outcome = referee(&world).verify_pair_indev(PAIR, &reports, &mut ledger, &mut BTreeMap::new()).unwrap();
        assert_eq!(outcome.verdict().unwrap().responsible, vec![C]);
    }

    fn settled_indev(world: &mut World) -> BTreeMap<UserId, Accepted> {
        let reports = world.indev_reports();
        let mut accepted = BTreeMap::new();
        let mut ledger = std::mem::take(&mut world.ledger);
        referee(world).verify_pair_indev(PAIR, &reports, &mut ledger, &mut accepted).unwrap();
        world.ledger = ledger;
        accepted
    }

    fn statement_reports(world: &World, terms_of: impl Fn(UserId) -> CycleTerms) -> ReportBook {
        let mut book = ReportBook::new(ReportKind::Statement, 0);
        for reporter in [C, P] {
            for subject in [C, P] {
                let v = &world.submitted[&(reporter, subject, Tag::P2pVolume)];
                let d = world.indev(reporter, subject);
                let value_ct = terms_of(reporter).statement(&keys().public, subject.role, v, &d).unwrap();
                book.insert(PairReport { subject, reporter, value_ct, kind: ReportKind::Statement, cycle: 0 });
            }
        }
        book
    }

    fn hand_terms() -> CycleTerms {
        CycleTerms::new(Totals { dev_c: 200, dev_p: 500 }, PriceSchedule::new(10, 15, 5).unwrap())
    }

    fn publish_totals(ledger: &mut Ledger, terms: &CycleTerms) {
        ledger.publish_plaintext(Tag::P2pPrice, 0, terms.prices.p2p as i128).unwrap();
        ledger.publish_plaintext(Tag::TotalDevC, 0, terms.totals.dev_c).unwrap();
        ledger.publish_plaintext(Tag::TotalDevP, 0, terms.totals.dev_p).unwrap();
    }

    #[test]
    fn honest_statements_pass_and_are_accepted() {
        let mut world = hand_world();
        let indev = settled_indev(&mut world);
        let terms = hand_terms();
        publish_totals(&mut world.ledger, &terms);
        let reports = statement_reports(&world, |_| terms);
        let mut accepted = BTreeMap::new();
        let outcome = referee(&world)
            .verify_pair_statements(PAIR, &reports, &terms, &indev, &world.ledger, &mut accepted)
            .unwrap();
        assert!(matches!(outcome, PairOutcome::Ok));
        assert_eq!((dec(&accepted[&C]), dec(&accepted[&P])), (12000, 13500));
    }

    #[test]
    fn inflated_statement_blames_the_prosumer() {
        let mut world = hand_world();
        let indev = settled_indev(&mut world);
        let terms = hand_terms();
        publish_totals(&mut world.ledger, &terms);
        let mut reports = statement_reports(&world, |_| terms);
        let inflated = shift(reports.get(P, P).unwrap(), 900);
        reports.insert(PairReport { subject: P, reporter: P, value_ct: inflated, kind: ReportKind::Statement, cycle: 0 });
        let mut accepted = BTreeMap::new();
        let outcome = referee(&world)
            .verify_pair_statements(PAIR, &reports, &terms, &indev, &world.ledger, &mut accepted)
            .unwrap();
        assert_eq!(outcome.verdict().unwrap().responsible, vec![P]);
        assert_eq!(dec(&accepted[&P]), 13500);
        assert!(outcome.verdict().unwrap().evidence.len() >= 5);
    }

    #[test]
    fn stale_totals_blame_the_stale_party() {
        let mut world = hand_world();
        let indev = settled_indev(&mut world);
        let terms = hand_terms();
        publish_totals(&mut world.ledger, &terms);
        let stale = CycleTerms::new(Totals { dev_c: 200, dev_p: 200 }, terms.prices);
        let reports = statement_reports(&world, |r| if r == C { stale } else { terms });
        let verdict = referee(&world)
            .resolve_statement_dispute(PAIR, &reports, &terms, &indev, &world.ledger)
            .unwrap();
        assert_eq!(verdict.responsible, vec![C]);
    }

    fn role_indev(values: &[i64]) -> (Ledger, BTreeMap<UserId, Accepted>) {
        let mut ledger = Ledger::new();
        let mut accepted = BTreeMap::new();
        for (i, &v) in values.iter().enumerate() {
            let user = UserId::consumer(i as u32);
            let ct = enc(v);
            let ledger_index = ledger.append(user, 0, Tag::InDev, &ct.to_bytes()).unwrap();
            accepted.insert(user, Accepted { ct, ledger_index });
        }
        (ledger, accepted)
    }

    #[test]
    fn agreeing_aggregators_publish_the_total() {
        let world = hand_world();
        let (mut ledger, accepted) = role_indev(&[200, -50, 150]);
        let cts: Vec<Ciphertext> = accepted.values().map(|a| a.ct.clone()).collect();
        let sum = billing::total_deviation(&keys().public, &cts).unwrap();
        let candidates: Vec<_> = (0..3).map(|i| (UserId::consumer(i), Some(sum.clone()))).collect();
        let out = referee(&world).verify_totals(Role::Consumer, &candidates, &accepted, &mut ledger).unwrap();
        assert_eq!(out.total, 300);
        assert!(out.verdict.is_none());
        assert_eq!(ledger.plaintext(Tag::TotalDevC, 0), Some(300));
    }

    #[test]
    fn corrupt_aggregator_is_named_and_overruled() {
        let world = hand_world();
        let (mut ledger, accepted) = role_indev(&[200, -50, 150]);
        let cts: Vec<Ciphertext> = accepted.values().map(|a| a.ct.clone()).collect();
        let sum = billing::total_deviation(&keys().public, &cts).unwrap();
        let candidates = vec![
            (UserId::consumer(0), Some(sum.clone())),
            (UserId::consumer(1), Some(shift(&sum, 100))),
            (UserId::consumer(2), Some(sum)),
        ];
        let out = referee(&world).verify_totals(Role::Consumer, &candidates, &accepted, &mut ledger).unwrap();
        assert_eq!(out.total, 300);
        let verdict = out.verdict.unwrap();
        assert_eq!(verdict.responsible, vec![UserId::consumer(1)]);
        assert_eq!(verdict.kind, DisputeKind::Total(Role::Consumer));
    }

    #[test]
    fn lone_aggregator_is_checked_against_the_referee() {
        let world = hand_world();
        let (mut ledger, accepted) = role_indev(&[42]);
        let honest = accepted[&UserId::consumer(0)].ct.clone();
        let out = referee(&world)
            .verify_totals(Role::Consumer, &[(UserId::consumer(0), Some(honest.clone()))], &accepted, &mut ledger)
            .unwrap();
        assert_eq!((out.total, out.verdict.is_none()), (42, true));

        let (mut ledger, accepted) = role_indev(&[42]);
        let out = referee(&world)
            .verify_totals(Role::Consumer, &[(UserId::consumer(0), Some(shift(&honest, 1)))], &accepted, &mut ledger)
            .unwrap();
        assert_eq!(out.total, 42);
        assert_eq!(out.verdict.unwrap().responsible, vec![UserId::consumer(0)]);
    }
}
