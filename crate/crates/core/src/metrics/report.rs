use serde::{Deserialize, Serialize};

use super::bleu::{bleu_aggregate, bleu_smoothed};
use super::diversity::{asl, inter_distinct, intra_distinct, ttr};
use super::lm::{perplexity, LanguageModel};
use crate::error::{Error, Result};

/// One query's reference and sampled hypotheses, as whitespace tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryResponses {
    pub reference: Vec<String>,
    pub hypotheses: Vec<Vec<String>>,
}

/// Corpus-level metric values.
///
/// BLEU values and inter-distinct are means over queries; intra-distinct and
/// ASL are means over every hypothesis; TTR and perplexity pool all
/// hypotheses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_avg: f64,
    pub bleu_max: f64,
    pub bleu_hm: f64,
    pub intra1: f64,
    pub intra2: f64,
    pub inter1: f64,
    pub inter2: f64,
    pub asl: f64,
    pub ttr: f64,
    pub ppl: f64,
    pub queries: usize,
    pub hypotheses: usize,
}

impl MetricReport {
    /// `key = value`, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let rows: [(&str, String); 12] = [
            ("bleu_avg", format!("{:.6}", self.bleu_avg)),
            ("bleu_max", format!("{:.6}", self.bleu_max)),
            ("bleu_hm", format!("{:.6}", self.bleu_hm)),
            ("intra1", format!("{:.6}", self.intra1)),
            ("intra2", format!("{:.6}", self.intra2)),
            ("inter1", format!("{:.6}", self.inter1)),
            ("inter2", format!("{:.6}", self.inter2)),
            ("asl", format!("{:.6}", self.asl)),
            ("ttr", format!("{:.6}", self.ttr)),
            ("ppl", format!("{:.6}", self.ppl)),
            ("queries", self.queries.to_string()),
            ("hypotheses", self.hypotheses.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn evaluate_responses<L: LanguageModel>(
    queries: &[QueryResponses],
    lm: &L,
) -> Result<MetricReport> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("no queries to evaluate".into()));
    }
    if let Some(i) = queries.iter().position(|q| q.hypotheses.is_empty()) {
        return Err(Error::InvalidInput(format!("query {i} has no hypotheses")));
    }
    let nq = queries.len() as f64;
    let (mut b_avg, mut b_max, mut b_hm) = (0.0, 0.0, 0.0);
    let (mut inter1, mut inter2) = (0.0, 0.0);
    for q in queries {
        let scores: Vec<f64> = q
            .hypotheses
            .iter()
            .map(|h| bleu_smoothed(h, &q.reference))
            .collect();
        let (a, m, h) = bleu_aggregate(&scores);
        b_avg += a;
        b_max += m;
        b_hm += h;
        inter1 += inter_distinct(&q.hypotheses, 1);
        inter2 += inter_distinct(&q.hypotheses, 2);
    }
    let all: Vec<&Vec<String>> = queries.iter().flat_map(|q| &q.hypotheses).collect();
    let nh = all.len() as f64;
    let intra1 = all.iter().map(|h| intra_distinct(h, 1)).sum::<f64>() / nh;
    let intra2 = all.iter().map(|h| intra_distinct(h, 2)).sum::<f64>() / nh;
    let ttr = ttr(&all).ok_or_else(|| Error::InvalidInput("every hypothesis is empty".into()))?;
    Ok(MetricReport {
        bleu_avg: b_avg / nq,
        bleu_max: b_max / nq,
        bleu_hm: b_hm / nq,
        intra1,
        intra2,
        inter1: inter1 / nq,
        inter2: inter2 / nq,
        asl: asl(&all),
        ttr,
        ppl: perplexity(lm, &all)?,
        queries: queries.len(),
        hypotheses: all.len(),
    })
}
