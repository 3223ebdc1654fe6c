//! Vote tallies: a CSV with a `choice` column becomes a per-choice percentage.

use std::collections::BTreeMap;
use std::io::Read;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoteShare {
    pub choice: String,
    pub votes: usize,
    pub percent: f64,
}

/// Reads votes (one per record, header must contain `choice`) and returns
/// the share of each choice in ascending choice order. Other columns are ignored.
pub fn vote_shares(input: impl Read) -> Result<Vec<VoteShare>> {
    let mut reader = csv::Reader::from_reader(input);
    let column = reader
        .headers()?
        .iter()
        .position(|h| h.trim() == "choice")
        .ok_or_else(|| Error::config("choice", "votes file has no `choice` column"))?;
    let mut counts = BTreeMap::<String, usize>::new();
    let mut total = 0usize;
    for record in reader.records() {
        let record = record?;
        let choice = record.get(column).unwrap_or("").trim();
        if choice.is_empty() {
            continue;
        }
        *counts.entry(choice.to_string()).or_default() += 1;
        total += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(choice, votes)| VoteShare {
            choice,
            votes,
            percent: 100.0 * votes as f64 / total as f64,
        })
        .collect())
}
