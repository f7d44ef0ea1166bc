//! Word error rate with substitution, insertion and deletion attribution.

use std::collections::BTreeMap;
use std::fmt::{self, Display, Write};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("WER is undefined for an empty reference")]
    EmptyReference,
    #[error("corpus has no sentence pairs")]
    EmptyCorpus,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EditOp<T> {
    Match(T),
    Sub { reference: T, hypothesis: T },
    Del(T),
    Ins(T),
}

impl<T> EditOp<T> {
    pub fn is_error(&self) -> bool {
        !matches!(self, EditOp::Match(_))
    }
}

impl<T: Display> Display for EditOp<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EditOp::Match(t) => write!(f, "={t}"),
            EditOp::Sub { reference, hypothesis } => write!(f, "~{reference}>{hypothesis}"),
            EditOp::Del(t) => write!(f, "-{t}"),
            EditOp::Ins(t) => write!(f, "+{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditSummary<T> {
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub ref_len: usize,
    pub alignment: Vec<EditOp<T>>,
}

impl<T> EditSummary<T> {
    pub fn errors(&self) -> usize {
        self.sub + self.ins + self.del
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_len as f64
    }

    /// Number of non-match operations in the alignment.
    pub fn flagged(&self) -> usize {
        self.alignment.iter().filter(|op| op.is_error()).count()
    }
}

/// Unit-cost Levenshtein alignment. The backtrace prefers match, then
/// substitution, then deletion, then insertion.
pub fn edit_alignment<T: PartialEq + Clone>(reference: &[T], hypothesis: &[T]) -> Result<EditSummary<T>> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut sub, mut ins, mut del) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && here == d[(i - 1) * w + j - 1] {
            ops.push(EditOp::Match(reference[i - 1].clone()));
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && here == d[(i - 1) * w + j - 1] + 1 {
            ops.push(EditOp::Sub { reference: reference[i - 1].clone(), hypothesis: hypothesis[j - 1].clone() });
            sub += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && here == d[(i - 1) * w + j] + 1 {
            ops.push(EditOp::Del(reference[i - 1].clone()));
            del += 1;
            i -= 1;
        } else {
            ops.push(EditOp::Ins(hypothesis[j - 1].clone()));
            ins += 1;
            j -= 1;
        }
    }
    ops.reverse();
    Ok(EditSummary { sub, ins, del, ref_len: n, alignment: ops })
}

pub fn wer<T: PartialEq + Clone>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    Ok(edit_alignment(reference, hypothesis)?.wer())
}

/// Total errors over total reference length.
pub fn corpus_wer<T: PartialEq + Clone>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let (mut errors, mut total) = (0usize, 0usize);
    for (r, h) in pairs {
        let s = edit_alignment(r, h)?;
        errors += s.errors();
        total += s.ref_len;
    }
    Ok(errors as f64 / total as f64)
}

/// Mean of per-sentence WERs.
pub fn sentence_averaged_wer<T: PartialEq + Clone>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut sum = 0.0;
    for (r, h) in pairs {
        sum += wer(r, h)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// A decoded sample with whitespace-split tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedPair {
    pub sample_id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
}

impl DecodedPair {
    pub fn new(sample_id: impl Into<String>, reference: &str, hypothesis: &str) -> Self {
        DecodedPair {
            sample_id: sample_id.into(),
            reference: reference.split_whitespace().map(str::to_owned).collect(),
            hypothesis: hypothesis.split_whitespace().map(str::to_owned).collect(),
        }
    }
}

fn as_pairs(samples: &[DecodedPair]) -> Vec<(Vec<String>, Vec<String>)> {
    samples.iter().map(|s| (s.reference.clone(), s.hypothesis.clone())).collect()
}

/// Corpus-level pooled and sentence-averaged WER of decoded samples.
pub fn score(samples: &[DecodedPair]) -> Result<(f64, f64)> {
    let pairs = as_pairs(samples);
    Ok((corpus_wer(&pairs)?, sentence_averaged_wer(&pairs)?))
}

/// Aligned per-sample listing, corpus counts and the most frequent
/// substitution pairs.
pub fn error_report(samples: &[DecodedPair]) -> Result<String> {
    let (pooled, averaged) = score(samples)?;
    let mut out = String::new();
    let (mut sub, mut ins, mut del, mut total, mut flagged) = (0, 0, 0, 0, 0);
    let mut confusions: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut body = String::new();
    for s in samples {
        let a = edit_alignment(&s.reference, &s.hypothesis)?;
        sub += a.sub;
        ins += a.ins;
        del += a.del;
        total += a.ref_len;
        flagged += a.flagged();
        for op in &a.alignment {
            if let EditOp::Sub { reference, hypothesis } = op {
                *confusions.entry((reference.clone(), hypothesis.clone())).or_default() += 1;
            }
        }
        let ops: Vec<String> = a.alignment.iter().map(ToString::to_string).collect();
        writeln!(body, "{}\tsub={} ins={} del={}", s.sample_id, a.sub, a.ins, a.del).unwrap();
        writeln!(body, "  ref: {}", s.reference.join(" ")).unwrap();
        writeln!(body, "  hyp: {}", s.hypothesis.join(" ")).unwrap();
        writeln!(body, "  ops: {}", ops.join(" ")).unwrap();
    }
    writeln!(out, "samples\t{}", samples.len()).unwrap();
    writeln!(out, "reference_tokens\t{total}").unwrap();
    writeln!(out, "substitutions\t{sub}").unwrap();
    writeln!(out, "insertions\t{ins}").unwrap();
    writeln!(out, "deletions\t{del}").unwrap();
    writeln!(out, "flagged_tokens\t{flagged}").unwrap();
    writeln!(out, "wer\t{pooled}").unwrap();
    writeln!(out, "sentence_wer\t{averaged}").unwrap();
    out.push('\n');
    out.push_str(&body);
    let mut conf: Vec<_> = confusions.into_iter().collect();
    conf.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out.push_str("\nconfusions\n");
    for ((r, h), n) in conf.into_iter().take(10) {
        writeln!(out, "{r}\t{h}\t{n}").unwrap();
    }
    Ok(out)
}

/// Machine-readable companion: `sample_id\tref\thyp\tsub\tins\tdel`.
pub fn report_tsv(samples: &[DecodedPair]) -> Result<String> {
    let mut out = String::from("sample_id\tref\thyp\tsub\tins\tdel\n");
    for s in samples {
        let a = edit_alignment(&s.reference, &s.hypothesis)?;
        writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", s.sample_id, s.reference.join(" "), s.hypothesis.join(" "), a.sub, a.ins, a.del).unwrap();
    }
    Ok(out)
}

/// Two-split WER table, one row per system.
pub fn comparison_table(rows: &[(&str, f64, f64)]) -> String {
    let mut out = String::from("method\tdev_wer\ttest_wer\n");
    for (name, dev, test) in rows {
        writeln!(out, "{name}\t{dev}\t{test}").unwrap();
    }
    out
}
