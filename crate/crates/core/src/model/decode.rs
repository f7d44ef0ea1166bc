//! Search over next-token distributions.
//!
//! Both searches take a closure mapping a token prefix (starting with BOS) to
//! next-token log-probabilities, so they can be driven by the model or by
//! hand-built distributions in tests. PAD and BOS are never generated. Ties
//! go to the lowest token id.

use crate::pose::{BOS, EOS, PAD};

use super::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated glosses, without BOS or EOS.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Number of scored decisions, counting EOS when it was emitted.
    pub n_scored: usize,
    pub ended: bool,
}

impl Hypothesis {
    /// Length-normalized log-probability.
    pub fn score(&self) -> f64 {
        if self.n_scored == 0 {
            0.0
        } else {
            self.log_prob / self.n_scored as f64
        }
    }
}

fn generable(tok: usize) -> bool {
    tok != PAD && tok != BOS
}

/// Appends the arg-max token until EOS or `max_len` scored steps.
pub fn greedy_search<F>(max_len: usize, mut next: F) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut toks = vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = next(&toks)?;
        let mut best: Option<usize> = None;
        for (tok, &v) in lp.iter().enumerate() {
            if generable(tok) && best.map_or(true, |b| v > lp[b]) {
                best = Some(tok);
            }
        }
        let Some(best) = best else { break };
        log_prob += lp[best];
        if best == EOS {
            let n_scored = toks.len();
            return Ok(Hypothesis { tokens: toks.split_off(1), log_prob, n_scored, ended: true });
        }
        toks.push(best);
    }
    let n_scored = toks.len() - 1;
    Ok(Hypothesis { tokens: toks.split_off(1), log_prob, n_scored, ended: false })
}

/// Length-normalized beam search.
///
/// The greedy hypothesis is always scored as a candidate, so the result never
/// has a lower normalized log-probability than [`greedy_search`].
pub fn beam_search<F>(beam: usize, max_len: usize, mut next: F) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let beam = beam.max(1);
    let greedy = greedy_search(max_len, &mut next)?;
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        // (score, parent, token, log_prob)
        let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (pi, (toks, lp)) in alive.iter().enumerate() {
            let dist = next(toks)?;
            for (tok, &v) in dist.iter().enumerate() {
                let total = lp + v;
                if generable(tok) && total > f64::NEG_INFINITY {
                    cands.push((total / (step + 1) as f64, pi, tok, total));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(beam);
        let mut next_alive = Vec::with_capacity(cands.len());
        for (_, pi, tok, total) in cands {
            let toks = &alive[pi].0;
            if tok == EOS {
                finished.push(Hypothesis { tokens: toks[1..].to_vec(), log_prob: total, n_scored: step + 1, ended: true });
            } else {
                let mut t = toks.clone();
                t.push(tok);
                next_alive.push((t, total));
            }
        }
        alive = next_alive;
        if alive.is_empty() {
            break;
        }
    }
    for (toks, lp) in alive {
        let n = toks.len() - 1;
        finished.push(Hypothesis { tokens: toks[1..].to_vec(), log_prob: lp, n_scored: n, ended: false });
    }
    let mut best = greedy;
    for h in finished {
        if h.score() > best.score() {
            best = h;
        }
    }
    Ok(best)
}

/// Log-probability of generating exactly `tokens` (followed by EOS when
/// `ended`) under `next`.
pub fn sequence_log_prob<F>(tokens: &[usize], ended: bool, mut next: F) -> Result<f64>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut prefix = vec![BOS];
    let mut total = 0.0;
    for &t in tokens {
        total += next(&prefix)?[t];
        prefix.push(t);
    }
    if ended {
        total += next(&prefix)?[EOS];
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_softmax(x: &[f64]) -> Vec<f64> {
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        x.iter().map(|v| v - z).collect()
    }

    #[test]
    fn immediate_eos_gives_empty_output() {
        let h = greedy_search(5, |_| Ok(vec![0.0, 0.0, 0.0, f64::NEG_INFINITY])).unwrap();
        // PAD and BOS are masked, EOS is the first generable maximum
        assert!(h.tokens.is_empty() && h.ended);
        let one_hot = |_: &[usize]| Ok(vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        let h = greedy_search(5, one_hot).unwrap();
        assert_eq!(h.tokens, Vec::<usize>::new());
        assert_eq!(h.log_prob, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let mut calls = 0;
        let h = greedy_search(2, |p| {
            calls += 1;
            Ok(if p.len() == 1 { log_softmax(&[9.0, 9.0, -1.0, 0.5, 2.0, 2.0]) } else { log_softmax(&[0.0, 0.0, 5.0, 0.0, 0.0, 0.0]) })
        })
        .unwrap();
        assert_eq!(h.tokens, vec![4]);
        assert!(h.ended);
        assert_eq!(calls, 2);
    }

    #[test]
    fn output_respects_max_len() {
        for max_len in 1..6 {
            let h = greedy_search(max_len, |_| Ok(log_softmax(&[0.0, 0.0, -3.0, 0.0, 1.0]))).unwrap();
            assert_eq!(h.tokens.len(), max_len);
            assert!(!h.ended);
            let b = beam_search(3, max_len, |_| Ok(log_softmax(&[0.0, 0.0, -3.0, 0.0, 1.0]))).unwrap();
            assert!(b.tokens.len() <= max_len);
        }
    }

    #[test]
    fn beam_finds_better_sequence_than_greedy() {
        // greedy takes token 3 (p=0.5) then faces a flat tail; token 4 (p=0.4)
        // leads to a confident EOS
        let next = |p: &[usize]| -> Result<Vec<f64>> {
            Ok(match p {
                [_] => vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.1f64.ln(), 0.5f64.ln(), 0.4f64.ln()],
                [_, 3] => vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.34f64.ln(), 0.33f64.ln(), 0.33f64.ln()],
                _ => vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.98f64.ln(), 0.01f64.ln(), 0.01f64.ln()],
            })
        };
        let g = greedy_search(4, next).unwrap();
        assert_eq!(g.tokens, vec![3]);
        let b = beam_search(2, 4, next).unwrap();
        assert_eq!(b.tokens, vec![4]);
        assert!(b.score() > g.score());
        let lp = sequence_log_prob(&b.tokens, b.ended, next).unwrap();
        assert!((lp - b.log_prob).abs() < 1e-12);
    }
}
