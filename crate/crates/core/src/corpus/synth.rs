use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use regex::Regex;

use super::{CorpusError, LabeledDataset, Sample};
use crate::util::rng;

/// Number of exemplars shown to the generator in each prompt.
pub const SYNTHESIS_EXAMPLES: usize = 5;

/// Builds the data-generation prompt from five exemplars.
pub fn render_synthesis_prompt(examples: &[Sample], count: usize) -> Result<String, CorpusError> {
    if examples.len() != SYNTHESIS_EXAMPLES {
        return Err(CorpusError::Arity { expected: SYNTHESIS_EXAMPLES, got: examples.len() });
    }
    if count == 0 {
        return Err(CorpusError::ZeroCount);
    }
    let mut p = String::from(
        "I am creating a dataset and need to generate data that is similar but not identical to the following examples. \
         Here are 5 examples from my dataset:\n",
    );
    for (i, s) in examples.iter().enumerate() {
        p.push_str(&format!("{}. {}\n", i + 1, s.text));
    }
    p.push('\n');
    p.push_str(&format!(
        "Please generate {count} new data points that are similar in style and structure to these examples but are \
         unique in content. Format the responses as a numbered list, starting from 6 onwards. Each data point should \
         start on a new line and be prefixed with its corresponding number followed by a period and a space.\n"
    ));
    p.push_str("For example:\n6. [New Data Point 1]\n7. [New Data Point 2]\n...");
    Ok(p)
}

/// Draws five distinct exemplars from `dataset` for one synthesis round.
pub fn sample_exemplars(dataset: &LabeledDataset, seed: u64) -> Result<Vec<Sample>, CorpusError> {
    if dataset.len() < SYNTHESIS_EXAMPLES {
        return Err(CorpusError::Arity { expected: SYNTHESIS_EXAMPLES, got: dataset.len() });
    }
    Ok(dataset.samples().choose_multiple(&mut rng(seed), SYNTHESIS_EXAMPLES).cloned().collect())
}

/// Result of parsing a generator response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSynthesis {
    pub samples: Vec<Sample>,
    /// Non-blank lines that did not match `<number>. <text>`.
    pub skipped_lines: usize,
}

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d+)\. (.*\S.*)$").unwrap())
}

/// Extracts `<number>. <text>` lines as unlabeled samples in numeric order.
pub fn parse_synthesis_response(response: &str) -> ParsedSynthesis {
    let mut numbered: Vec<(u64, String)> = Vec::new();
    let mut skipped_lines = 0;
    for line in response.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match numbered_line().captures(line) {
            Some(c) => match c[1].parse::<u64>() {
                Ok(n) => numbered.push((n, c[2].trim().to_string())),
                Err(_) => skipped_lines += 1,
            },
            None => skipped_lines += 1,
        }
    }
    numbered.sort_by_key(|(n, _)| *n);
    let samples = numbered
        .into_iter()
        .filter_map(|(_, text)| Sample::from_text(text, None).ok())
        .collect();
    ParsedSynthesis { samples, skipped_lines }
}
