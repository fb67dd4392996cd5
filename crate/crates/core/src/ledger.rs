//! Append-only hash ledger.
//!
//! Confidential data is committed as `SHA3-256(prefix | party | cycle | tag | payload)`;
//! public protocol values (P2P price, published totals, supplier balance) are
//! stored in the clear. Every entry extends a running chain digest, so any
//! change to a stored line is detectable by replaying the chain.
//!
//! File format, one entry per line:
//!
//! ```text
//! index|party|cycle|tag|hex(digest or decimal plaintext)|timestamp|hex(chain)
//! ```

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use sha3::{Digest, Sha3_256};
use thiserror::Error;

use crate::market::UserId;

const DOMAIN: &[u8] = b"pabill-ledger/v1";
const GENESIS: [u8; 32] = [0u8; 32];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("duplicate entry for ({party}, cycle {cycle}, {tag})")]
    Duplicate { party: Party, cycle: u64, tag: Tag },
    #[error("no entry for ({party}, cycle {cycle}, {tag})")]
    NotFound { party: Party, cycle: u64, tag: Tag },
    #[error("tag {0} is confidential and cannot be published in plaintext")]
    NotPublic(Tag),
    #[error("tag {0} holds a public value and is published, not committed")]
    PublicTag(Tag),
}

/// A ledger file that failed verification, naming the first bad entry.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("ledger corrupted at index {index}: {reason}")]
pub struct LedgerFileError {
    pub index: u64,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    P2pVolume,
    RealVolume,
    InDev,
    TotalDevC,
    TotalDevP,
    FinalStatement,
    SupplierBalance,
    P2pPrice,
}

impl Tag {
    pub const ALL: [Tag; 8] = [
        Tag::P2pVolume,
        Tag::RealVolume,
        Tag::InDev,
        Tag::TotalDevC,
        Tag::TotalDevP,
        Tag::FinalStatement,
        Tag::SupplierBalance,
        Tag::P2pPrice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::P2pVolume => "P2P_VOLUME",
            Tag::RealVolume => "REAL_VOLUME",
            Tag::InDev => "IN_DEV",
            Tag::TotalDevC => "TOTAL_DEV_C",
            Tag::TotalDevP => "TOTAL_DEV_P",
            Tag::FinalStatement => "FINAL_STATEMENT",
            Tag::SupplierBalance => "SUPPLIER_BALANCE",
            Tag::P2pPrice => "P2P_PRICE",
        }
    }

    /// Values that every entity may read in the clear.
    pub fn is_public(self) -> bool {
        matches!(
            self,
            Tag::P2pPrice | Tag::TotalDevC | Tag::TotalDevP | Tag::SupplierBalance
        )
    }

    /// Protocol step in which entries with this tag are written.
    fn step(self) -> u64 {
        match self {
            Tag::P2pPrice | Tag::P2pVolume => 3,
            Tag::RealVolume => 4,
            Tag::InDev => 5,
            Tag::TotalDevC | Tag::TotalDevP => 6,
            Tag::FinalStatement | Tag::SupplierBalance => 8,
        }
    }

    /// Entity that owns plaintext publications of this tag.
    pub fn publisher(self) -> Party {
        match self {
            Tag::P2pPrice => Party::TradingPlatform,
            _ => Party::Supplier,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown tag {s:?}"))
    }
}

/// Identity recorded with a ledger entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Party {
    User(UserId),
    TradingPlatform,
    Supplier,
    Referee,
}

impl From<UserId> for Party {
    fn from(u: UserId) -> Self {
        Party::User(u)
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::User(u) => u.fmt(f),
            Party::TradingPlatform => f.write_str("TP"),
            Party::Supplier => f.write_str("SUPPLIER"),
            Party::Referee => f.write_str("REFEREE"),
        }
    }
}

impl FromStr for Party {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "TP" => Ok(Party::TradingPlatform),
            "SUPPLIER" => Ok(Party::Supplier),
            "REFEREE" => Ok(Party::Referee),
            other => other.parse::<UserId>().map(Party::User),
        }
    }
}

/// Stored content of an entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Record {
    Digest([u8; 32]),
    Plain(i128),
}

impl Record {
    fn to_hex(self) -> String {
        match self {
            Record::Digest(d) => hex::encode(d),
            Record::Plain(v) => hex::encode(v.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerEntry {
    pub index: u64,
    pub party: Party,
    pub cycle: u64,
    pub tag: Tag,
    pub record: Record,
    pub timestamp: u64,
    pub chain: [u8; 32],
}

impl LedgerEntry {
    fn body(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.index,
            self.party,
            self.cycle,
            self.tag,
            self.record.to_hex(),
            self.timestamp
        )
    }

    /// Canonical file line, without the trailing newline.
    pub fn to_line(&self) -> String {
        format!("{}|{}", self.body(), hex::encode(self.chain))
    }

    pub fn plaintext(&self) -> Option<i128> {
        match self.record {
            Record::Plain(v) => Some(v),
            Record::Digest(_) => None,
        }
    }
}

/// Hash commitment of `payload` in the context `(party, cycle, tag)`.
pub fn commitment(party: Party, cycle: u64, tag: Tag, payload: &[u8]) -> [u8; 32] {
    let mut h = Sha3_256::new();
    h.update(DOMAIN);
    let party = party.to_string();
    h.update((party.len() as u32).to_be_bytes());
    h.update(party.as_bytes());
    h.update(cycle.to_be_bytes());
    h.update((tag.as_str().len() as u32).to_be_bytes());
    h.update(tag.as_str().as_bytes());
    h.update(payload);
    h.finalize().into()
}

fn extend_chain(previous: &[u8; 32], body: &str) -> [u8; 32] {
    let mut h = Sha3_256::new();
    h.update(previous);
    h.update(body.as_bytes());
    h.finalize().into()
}

/// Frozen copy of the ledger at some point in time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerSnapshot {
    pub entries: Vec<LedgerEntry>,
    pub chain_digest: [u8; 32],
}

impl LedgerSnapshot {
    /// Recomputes the chain from the entries and compares it with the stored digests.
    pub fn verify_chain(&self) -> bool {
        let mut head = GENESIS;
        for (i, e) in self.entries.iter().enumerate() {
            if e.index != i as u64 {
                return false;
            }
            head = extend_chain(&head, &e.body());
            if head != e.chain {
                return false;
            }
        }
        head == self.chain_digest
    }

    pub fn is_prefix_of(&self, later: &LedgerSnapshot) -> bool {
        later.entries.len() >= self.entries.len()
            && later.entries[..self.entries.len()] == self.entries[..]
    }
}

/// In-process append-only ledger. A single owner appends; readers take
/// snapshots.
#[derive(Clone, Debug, Default)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    keys: HashMap<(Party, u64, Tag), usize>,
    head: Option<[u8; 32]>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn chain_digest(&self) -> [u8; 32] {
        self.head.unwrap_or(GENESIS)
    }

    pub fn get(&self, index: u64) -> Option<&LedgerEntry> {
        self.entries.get(index as usize)
    }

    pub fn find(&self, party: Party, cycle: u64, tag: Tag) -> Option<&LedgerEntry> {
        self.keys.get(&(party, cycle, tag)).map(|&i| &self.entries[i])
    }

    /// Commits the hash of `payload` under `(party, cycle, tag)`.
    pub fn append(
        &mut self,
        party: impl Into<Party>,
        cycle: u64,
        tag: Tag,
        payload: &[u8],
    ) -> Result<u64, LedgerError> {
        let party = party.into();
        if tag.is_public() {
            return Err(LedgerError::PublicTag(tag));
        }
        let digest = commitment(party, cycle, tag, payload);
        self.push(party, cycle, tag, Record::Digest(digest))
    }

    /// Stores a public protocol value in the clear.
    pub fn publish_plaintext(&mut self, tag: Tag, cycle: u64, value: i128) -> Result<u64, LedgerError> {
        if !tag.is_public() {
            return Err(LedgerError::NotPublic(tag));
        }
        self.push(tag.publisher(), cycle, tag, Record::Plain(value))
    }

    /// Reads a public value published for `cycle`.
    pub fn plaintext(&self, tag: Tag, cycle: u64) -> Option<i128> {
        self.find(tag.publisher(), cycle, tag).and_then(LedgerEntry::plaintext)
    }

    /// Checks `payload` against the stored commitment (or plaintext).
    pub fn verify(
        &self,
        party: impl Into<Party>,
        cycle: u64,
        tag: Tag,
        payload: &[u8],
    ) -> Result<bool, LedgerError> {
        let party = party.into();
        let entry = self
            .find(party, cycle, tag)
            .ok_or(LedgerError::NotFound { party, cycle, tag })?;
        Ok(match entry.record {
            Record::Digest(d) => d == commitment(party, cycle, tag, payload),
            Record::Plain(v) => v.to_string().as_bytes() == payload,
        })
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            entries: self.entries.clone(),
            chain_digest: self.chain_digest(),
        }
    }

    /// Renders the canonical file contents.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.entries.len() * 160);
        for e in &self.entries {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }

    /// Parses and fully re-verifies a ledger file: canonical encoding of
    /// every line, index sequence, key uniqueness and the chain digest.
    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self, LedgerFileError> {
        let mut ledger = Ledger::new();
        let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
        match lines.pop() {
            Some([]) => {}
            Some(_) => {
                return Err(LedgerFileError {
                    index: lines.len() as u64,
                    reason: "missing final newline".into(),
                })
            }
            None => unreachable!("split yields at least one item"),
        }
        for (i, raw) in lines.into_iter().enumerate() {
            let index = i as u64;
            let fail = |reason: String| LedgerFileError { index, reason };
            let line = std::str::from_utf8(raw).map_err(|_| fail("not valid UTF-8".into()))?;
            let entry = parse_line(line).map_err(fail)?;
            if entry.to_line() != line {
                return Err(fail("line is not in canonical form".into()));
            }
            if entry.index != index {
                return Err(fail(format!("index field reads {}", entry.index)));
            }
            let expected = extend_chain(&ledger.chain_digest(), &entry.body());
            if expected != entry.chain {
                return Err(fail("chain digest mismatch".into()));
            }
            let key = (entry.party, entry.cycle, entry.tag);
            if ledger.keys.contains_key(&key) {
                return Err(fail("duplicate (party, cycle, tag)".into()));
            }
            ledger.keys.insert(key, ledger.entries.len());
            ledger.head = Some(entry.chain);
            ledger.entries.push(entry);
        }
        Ok(ledger)
    }

    fn push(&mut self, party: Party, cycle: u64, tag: Tag, record: Record) -> Result<u64, LedgerError> {
        let key = (party, cycle, tag);
        if self.keys.contains_key(&key) {
            return Err(LedgerError::Duplicate { party, cycle, tag });
        }
        let index = self.entries.len() as u64;
        let mut entry = LedgerEntry {
            index,
            party,
            cycle,
            tag,
            record,
            timestamp: cycle * 8 + tag.step(),
            chain: GENESIS,
        };
        entry.chain = extend_chain(&self.chain_digest(), &entry.body());
        self.head = Some(entry.chain);
        self.keys.insert(key, self.entries.len());
        self.entries.push(entry);
        Ok(index)
    }
}

fn parse_line(line: &str) -> Result<LedgerEntry, String> {
    let fields: Vec<&str> = line.split('|').collect();
    let [index, party, cycle, tag, record, timestamp, chain] = fields[..] else {
        return Err(format!("expected 7 fields, found {}", fields.len()));
    };
    let tag: Tag = tag.parse()?;
    let raw = hex::decode(record).map_err(|e| format!("record: {e}"))?;
    let record = if tag.is_public() {
        let text = String::from_utf8(raw).map_err(|_| "plaintext is not UTF-8".to_string())?;
        Record::Plain(text.parse().map_err(|e| format!("plaintext: {e}"))?)
    } else {
        Record::Digest(raw.try_into().map_err(|_| "digest is not 32 bytes".to_string())?)
    };
    let chain: [u8; 32] = hex::decode(chain)
        .map_err(|e| format!("chain: {e}"))?
        .try_into()
        .map_err(|_| "chain digest is not 32 bytes".to_string())?;
    Ok(LedgerEntry {
        index: index.parse().map_err(|e| format!("index: {e}"))?,
        party: party.parse()?,
        cycle: cycle.parse().map_err(|e| format!("cycle: {e}"))?,
        tag,
        record,
        timestamp: timestamp.parse().map_err(|e| format!("timestamp: {e}"))?,
        chain,
    })
}
