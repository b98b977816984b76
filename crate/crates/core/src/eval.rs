//! Metrics over sets of samples.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::constraint::contains_phrase;
use crate::error::{Error, Result};
use crate::model::{CausalLM, Lexicon};
use crate::sampler::{SampleRecord, Termination};

/// Distinct n-grams over total n-grams for one set of samples.
///
/// Returns `None` when no sample has at least `n` tokens.
pub fn distinct_ratio(samples: &[&[usize]], n: usize) -> Option<f64> {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for s in samples.iter().filter(|s| s.len() >= n) {
        for w in s.windows(n) {
            seen.insert(w);
            total += 1;
        }
    }
    (total > 0).then(|| seen.len() as f64 / total as f64)
}

/// dist-n: the ratio of each group (one group per prompt) averaged over groups.
/// Samples shorter than `n` are skipped with a warning.
pub fn dist_n(groups: &[Vec<Vec<usize>>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("dist-n needs n >= 1"));
    }
    let short: usize = groups.iter().flatten().filter(|s| s.len() < n).count();
    if short > 0 {
        log::warn!("dist-{n}: {short} sample(s) shorter than {n} tokens excluded");
    }
    let ratios: Vec<f64> = groups
        .iter()
        .filter_map(|g| distinct_ratio(&g.iter().map(Vec::as_slice).collect::<Vec<_>>(), n))
        .collect();
    if ratios.is_empty() {
        return Err(Error::invalid(format!("no sample has {n} or more tokens")));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Keyword coverage of a sample set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Mean number of keywords present per sample.
    pub count: f64,
    /// Fraction of samples containing every keyword, in `[0, 1]`.
    pub fraction: f64,
}

impl Coverage {
    pub fn percent(&self) -> f64 {
        100.0 * self.fraction
    }
}

/// Tokenizes each keyword (a word or space-separated phrase).
pub fn tokenize_keywords(lexicon: &Lexicon, keywords: &[String]) -> Result<Vec<Vec<usize>>> {
    keywords
        .iter()
        .map(|k| {
            let ids = lexicon.encode(k)?;
            if ids.is_empty() {
                return Err(Error::invalid(format!("keyword {k:?} is empty")));
            }
            Ok(ids)
        })
        .collect()
}

/// Presence is a contiguous token-id match.
pub fn coverage(samples: &[&[usize]], keywords: &[Vec<usize>]) -> Result<Coverage> {
    if samples.is_empty() {
        return Err(Error::invalid("coverage of an empty sample set"));
    }
    let (mut count, mut all) = (0usize, 0usize);
    for s in samples {
        let present = keywords.iter().filter(|k| contains_phrase(s, k)).count();
        count += present;
        all += usize::from(present == keywords.len());
    }
    let n = samples.len() as f64;
    Ok(Coverage {
        count: count as f64 / n,
        fraction: all as f64 / n,
    })
}

/// Corpus mean per-token NLL of `(prompt, output)` pairs under teacher forcing.
pub fn mean_token_nll(lm: &CausalLM, pairs: &[(&[usize], &[usize])]) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for (prompt, output) in pairs {
        if output.is_empty() {
            continue;
        }
        total += lm.discrete_nll(prompt, output)?;
        tokens += output.len();
    }
    if tokens == 0 {
        return Err(Error::invalid("perplexity of an empty sample set"));
    }
    Ok(total / tokens as f64)
}

/// `exp` of [`mean_token_nll`].
pub fn perplexity(lm: &CausalLM, pairs: &[(&[usize], &[usize])]) -> Result<f64> {
    mean_token_nll(lm, pairs).map(f64::exp)
}

/// One row of the embeddings-vs-simplex state comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMemoryRow {
    pub len: usize,
    /// Optimized parameters: `L·d`.
    pub embeds_params: usize,
    /// Optimized parameters: `L·V`.
    pub simplex_params: usize,
    pub ratio: f64,
    /// Measured peak optimizer-state bytes; `None` when not run or refused.
    pub embeds_peak_bytes: Option<usize>,
    pub simplex_peak_bytes: Option<usize>,
    /// Whether each sampler ran within the memory cap.
    pub embeds_ok: Option<bool>,
    pub simplex_ok: Option<bool>,
}

impl StateMemoryRow {
    pub fn measured_ratio(&self) -> Option<f64> {
        Some(self.simplex_peak_bytes? as f64 / self.embeds_peak_bytes? as f64)
    }
}

/// Analytic state sizes for each length; measurements are filled in by the caller.
pub fn state_memory_report(lens: &[usize], vocab: usize, dim: usize) -> Vec<StateMemoryRow> {
    lens.iter()
        .map(|&len| StateMemoryRow {
            len,
            embeds_params: len * dim,
            simplex_params: len * vocab,
            ratio: vocab as f64 / dim as f64,
            embeds_peak_bytes: None,
            simplex_peak_bytes: None,
            embeds_ok: None,
            simplex_ok: None,
        })
        .collect()
}

pub fn write_memory_csv<W: Write>(w: W, rows: &[StateMemoryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub dist_1: Option<f64>,
    pub dist_2: Option<f64>,
    pub dist_3: Option<f64>,
    /// Per constraint name, the fraction of samples satisfying it.
    pub satisfaction: BTreeMap<String, f64>,
    pub all_satisfied: f64,
    pub fallback_rate: f64,
    /// Mean per-token NLL and its exponent under the judging LM.
    pub mean_nll: f64,
    pub perplexity: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coverage: Option<Coverage>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub state_memory: Vec<StateMemoryRow>,
}

impl MetricReport {
    /// Scores records with `lm` (normally the base LM), grouping by prompt
    /// for dist-n.
    pub fn from_records(records: &[SampleRecord], lm: &CausalLM, keywords: Option<&[Vec<usize>]>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("no records to evaluate"));
        }
        let lex = lm.table().lexicon();
        let mut groups: BTreeMap<&str, Vec<Vec<usize>>> = BTreeMap::new();
        let mut prompts = Vec::with_capacity(records.len());
        for r in records {
            groups.entry(r.prompt.as_str()).or_default().push(r.output_ids.clone());
            prompts.push(lex.encode(&r.prompt)?);
        }
        let groups: Vec<Vec<Vec<usize>>> = groups.into_values().collect();
        let dist = |n| dist_n(&groups, n).ok();

        let n = records.len() as f64;
        let mut satisfaction: BTreeMap<String, f64> = BTreeMap::new();
        for r in records {
            for c in &r.constraints {
                *satisfaction.entry(c.name.clone()).or_default() += f64::from(u8::from(c.satisfied)) / n;
            }
        }
        let all_satisfied = records.iter().filter(|r| r.all_satisfied()).count() as f64 / n;
        let fallback_rate = records
            .iter()
            .filter(|r| r.termination == Termination::FallbackAutoregressive)
            .count() as f64
            / n;
        let pairs: Vec<(&[usize], &[usize])> = prompts
            .iter()
            .zip(records)
            .map(|(p, r)| (p.as_slice(), r.output_ids.as_slice()))
            .collect();
        let mean_nll = mean_token_nll(lm, &pairs)?;
        let coverage = match keywords {
            Some(k) => Some(coverage(&records.iter().map(|r| r.output_ids.as_slice()).collect::<Vec<_>>(), k)?),
            None => None,
        };
        Ok(Self {
            samples: records.len(),
            dist_1: dist(1),
            dist_2: dist(2),
            dist_3: dist(3),
            satisfaction,
            all_satisfied,
            fallback_rate,
            mean_nll,
            perplexity: mean_nll.exp(),
            coverage,
            state_memory: Vec::new(),
        })
    }

    /// Flat `metric,value` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut row = |k: &str, v: Option<f64>| {
            let v = v.map(|v| v.to_string()).unwrap_or_default();
            out.write_record([k, v.as_str()]).map_err(csv_err)
        };
        row("samples", Some(self.samples as f64))?;
        row("dist_1", self.dist_1)?;
        row("dist_2", self.dist_2)?;
        row("dist_3", self.dist_3)?;
        for (name, rate) in &self.satisfaction {
            row(&format!("satisfaction:{name}"), Some(*rate))?;
        }
        row("all_satisfied", Some(self.all_satisfied))?;
        row("fallback_rate", Some(self.fallback_rate))?;
        row("mean_nll", Some(self.mean_nll))?;
        row("perplexity", Some(self.perplexity))?;
        if let Some(c) = self.coverage {
            row("coverage_count", Some(c.count))?;
            row("coverage_percent", Some(c.percent()))?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dist_examples() {
        assert_eq!(dist_n(&[vec![vec![0, 0, 0, 0]]], 1).unwrap(), 0.25);
        assert_eq!(dist_n(&[vec![vec![0, 1, 2, 3]]], 1).unwrap(), 1.0);
        // Each prompt's ratio counts equally.
        let groups = vec![vec![vec![5, 5]], vec![vec![1, 2, 3, 4, 5, 6]]];
        assert_eq!(dist_n(&groups, 1).unwrap(), 0.75);
        assert!(dist_n(&groups, 0).is_err());
        assert!(dist_n(&[vec![vec![1]]], 2).is_err());
        // Short samples drop out of the ratio.
        assert_eq!(dist_n(&[vec![vec![1], vec![2, 2]]], 2).unwrap(), 1.0);
    }

    #[test]
    fn coverage_examples() {
        let kws = vec![vec![1], vec![2], vec![3, 4], vec![9]];
        let full: &[usize] = &[9, 1, 3, 4, 2];
        let c = coverage(&[full], &kws).unwrap();
        assert_eq!((c.count, c.fraction), (4.0, 1.0));
        let split: &[usize] = &[3, 1, 4];
        let c = coverage(&[full, split], &kws).unwrap();
        assert_eq!((c.count, c.fraction), (2.5, 0.5));
        assert!(coverage(&[], &kws).is_err());
    }

    #[test]
    fn unknown_keyword_is_an_error() {
        let lex = Lexicon::build(["a b"], &[]);
        assert!(tokenize_keywords(&lex, &["a b".into()]).is_ok());
        assert!(tokenize_keywords(&lex, &["zebra".into()]).is_err());
    }

    #[test]
    fn memory_rows() {
        let rows = state_memory_report(&[200], 256, 32);
        assert_eq!(rows[0].ratio, 8.0);
        assert_eq!(rows[0].embeds_params, 6400);
        assert_eq!(rows[0].simplex_params, 51200);
        let mut buf = Vec::new();
        write_memory_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("len,embeds_params"));
    }

    fn brute(samples: &[Vec<usize>], n: usize) -> f64 {
        let mut all = Vec::new();
        for s in samples {
            for i in 0..=s.len().saturating_sub(n) {
                if i + n <= s.len() {
                    all.push(s[i..i + n].to_vec());
                }
            }
        }
        let total = all.len();
        all.sort();
        all.dedup();
        all.len() as f64 / total as f64
    }

    proptest! {
        #[test]
        fn matches_recount_and_ignores_order(
            mut samples in prop::collection::vec(prop::collection::vec(0usize..6, 3..10), 1..12),
            n in 1usize..4,
        ) {
            let d = dist_n(&[samples.clone()], n).unwrap();
            prop_assert_eq!(d, brute(&samples, n));
            prop_assert!((0.0..=1.0).contains(&d));
            samples.reverse();
            prop_assert_eq!(dist_n(&[samples], n).unwrap(), d);
        }

        #[test]
        fn coverage_shrinks_as_keywords_are_added(
            samples in prop::collection::vec(prop::collection::vec(0usize..5, 1..8), 1..10),
            kws in prop::collection::vec(prop::collection::vec(0usize..5, 1..3), 1..5),
        ) {
            let refs: Vec<&[usize]> = samples.iter().map(Vec::as_slice).collect();
            let mut prev = 1.0;
            for k in 1..=kws.len() {
                let c = coverage(&refs, &kws[..k]).unwrap();
                prop_assert!(c.fraction <= prev && c.fraction <= 1.0);
                prev = c.fraction;
            }
        }
    }
}
