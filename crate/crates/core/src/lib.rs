pub mod he;
pub mod ledger;
pub mod market;
pub mod matching;
pub mod rng;
pub mod billing;
pub mod accountability;
pub mod settlement;
pub mod oracle;
pub mod sim;
