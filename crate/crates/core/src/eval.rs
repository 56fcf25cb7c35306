//! Scoring and reporting: word error rates and the spread between
//! cohorts, greedy CTC decoding, a linear demographic probe over pooled
//! embeddings, and a principal-component projection for 2-D export.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::data::{self, Utterance};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, Params};
use crate::scalar::Scalar;
use crate::seeds::{self, derive_seed};

// ---- edit distance and word error rate -----------------------------------------

/// Substitution, deletion, and insertion counts of a minimal-cost
/// alignment under unit costs. When several alignments tie, the
/// backtrace prefers substitution over insertion over deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (usize, usize, usize) {
    let (r, h) = (reference.len(), hypothesis.len());
    let mut dp = vec![vec![0usize; h + 1]; r + 1];
    for i in 0..=r {
        dp[i][0] = i;
    }
    for j in 0..=h {
        dp[0][j] = j;
    }
    for i in 1..=r {
        for j in 1..=h {
            let diag = dp[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[i][j] = diag.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
        }
    }
    let (mut s, mut d, mut ins) = (0, 0, 0);
    let (mut i, mut j) = (r, h);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && dp[i][j] == dp[i - 1][j - 1] {
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && dp[i][j] == dp[i - 1][j - 1] + 1 {
            s += 1;
            i -= 1;
            j -= 1;
        } else if j > 0 && dp[i][j] == dp[i][j - 1] + 1 {
            ins += 1;
            j -= 1;
        } else {
            d += 1;
            i -= 1;
        }
    }
    (s, d, ins)
}

/// Corpus-level WER: all error counts summed over all pairs, divided by
/// the total reference word count. The micro average, not the mean of
/// per-utterance rates.
pub fn wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    let n_total: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    if n_total == 0 {
        return Err(Error::Eval(
            "word error rate is undefined: zero reference words".to_string(),
        ));
    }
    let errors: usize = pairs
        .iter()
        .map(|(r, h)| {
            let (s, d, i) = edit_distance(r, h);
            s + d + i
        })
        .sum();
    Ok(errors as f64 / n_total as f64)
}

/// Relative spread between the worst and best cohort:
/// 100 * (max - min) / max. All cohorts perfect counts as no gap.
pub fn wer_gap(cohort_wers: &BTreeMap<String, f64>) -> Result<f64> {
    if cohort_wers.len() < 2 {
        return Err(Error::Eval(format!(
            "a WER gap needs at least 2 cohorts, got {}",
            cohort_wers.len()
        )));
    }
    let max = cohort_wers.values().cloned().fold(f64::MIN, f64::max);
    let min = cohort_wers.values().cloned().fold(f64::MAX, f64::min);
    if max == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (max - min) / max)
}

/// Best-path decoding: per-frame argmax (first index on ties), collapse
/// consecutive duplicates, then drop blanks (index 0).
pub fn greedy_ctc_decode<S: Scalar>(log_probs: &Tensor<S>) -> Vec<usize> {
    assert_eq!(log_probs.rank(), 2, "decode expects a frames x vocab matrix");
    let [frames, vocab] = [log_probs.shape()[0], log_probs.shape()[1]];
    let values = log_probs.values();
    let mut out = Vec::new();
    let mut previous = usize::MAX;
    for t in 0..frames {
        let row = &values[t * vocab..(t + 1) * vocab];
        let mut best = 0;
        for (v, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = v;
            }
        }
        if best != previous && best != 0 {
            out.push(best);
        }
        previous = best;
    }
    out
}

// ---- demographic probe -----------------------------------------------------------

/// Accuracy of a linear read-out of one demographic attribute from
/// fixed embeddings, against the count-weighted chance level.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub attribute: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Match rate of guessing labels from their empirical frequencies:
    /// the sum of squared cohort proportions. Equals 1/C for balanced
    /// cohorts.
    pub chance: f64,
}

const PROBE_STEPS: usize = 500;
const PROBE_LR: f64 = 0.1;
const PROBE_TEST_FRACTION: f64 = 0.2;

/// Multinomial softmax regression, trained from zero weights by
/// full-batch gradient descent on a seeded 80/20 split. Fixed
/// hyperparameters keep the accuracy a comparable statistic across
/// runs; the only randomness is the split.
pub fn demographic_probe(
    embeddings: &[Vec<f64>],
    labels: &[String],
    attribute: &str,
    seed: u64,
) -> Result<ProbeResult> {
    assert_eq!(
        embeddings.len(),
        labels.len(),
        "probe: {} embeddings vs {} labels",
        embeddings.len(),
        labels.len()
    );
    let n = embeddings.len();
    let mut cohorts: BTreeMap<&str, usize> = BTreeMap::new();
    for label in labels {
        *cohorts.entry(label.as_str()).or_insert(0) += 1;
    }
    if cohorts.len() < 2 || cohorts.values().any(|&c| c < 2) {
        let counts: Vec<String> =
            cohorts.iter().map(|(label, c)| format!("{label}: {c}")).collect();
        return Err(Error::Eval(format!(
            "degenerate cohorts for attribute `{attribute}` (need >= 2 cohorts with >= 2 \
             samples each, got {})",
            counts.join(", ")
        )));
    }
    let dim = embeddings[0].len();
    assert!(
        embeddings.iter().all(|e| e.len() == dim),
        "probe: embeddings must share one dimension"
    );
    let class_of: BTreeMap<&str, usize> =
        cohorts.keys().enumerate().map(|(i, &label)| (label, i)).collect();
    let n_classes = class_of.len();
    let targets: Vec<usize> = labels.iter().map(|l| class_of[l.as_str()]).collect();
    let chance = cohorts
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            p * p
        })
        .sum();

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, seeds::salt::PROBE_SPLIT));
    data::shuffle(&mut order, &mut rng);
    let n_test = ((PROBE_TEST_FRACTION * n as f64).round() as usize).clamp(1, n - 1);
    let (test_idx, train_idx) = order.split_at(n_test);

    let mut weights = vec![vec![0.0f64; dim]; n_classes];
    let mut biases = vec![0.0f64; n_classes];
    let mut probs = vec![0.0f64; n_classes];
    for _ in 0..PROBE_STEPS {
        let mut grad_w = vec![vec![0.0f64; dim]; n_classes];
        let mut grad_b = vec![0.0f64; n_classes];
        for &i in train_idx {
            softmax_into(&weights, &biases, &embeddings[i], &mut probs);
            for c in 0..n_classes {
                let delta = probs[c] - f64::from(u8::from(c == targets[i]));
                grad_b[c] += delta;
                for (g, x) in grad_w[c].iter_mut().zip(&embeddings[i]) {
                    *g += delta * x;
                }
            }
        }
        let scale = PROBE_LR / train_idx.len() as f64;
        for c in 0..n_classes {
            biases[c] -= scale * grad_b[c];
            for (w, g) in weights[c].iter_mut().zip(&grad_w[c]) {
                *w -= scale * g;
            }
        }
    }

    let accuracy = |indices: &[usize]| -> f64 {
        let mut probs = vec![0.0f64; n_classes];
        let hits = indices
            .iter()
            .filter(|&&i| {
                softmax_into(&weights, &biases, &embeddings[i], &mut probs);
                argmax(&probs) == targets[i]
            })
            .count();
        hits as f64 / indices.len() as f64
    };
    Ok(ProbeResult {
        attribute: attribute.to_string(),
        train_accuracy: accuracy(train_idx),
        test_accuracy: accuracy(test_idx),
        chance,
    })
}

fn softmax_into(weights: &[Vec<f64>], biases: &[f64], x: &[f64], out: &mut [f64]) {
    for (c, row) in weights.iter().enumerate() {
        out[c] = biases[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
    let max = out.iter().cloned().fold(f64::MIN, f64::max);
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---- principal-component projection ----------------------------------------------

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITERS: usize = 100_000;

/// Leading eigenvalue/eigenvector pairs of a symmetric matrix by power
/// iteration with deflation. The start vector is the normalized ones
/// vector; each vector is oriented so its largest-magnitude component
/// is positive. A vanishing eigenvalue ends the list early.
pub fn top_eigenpairs(matrix: &[Vec<f64>], k: usize) -> Vec<(f64, Vec<f64>)> {
    let d = matrix.len();
    assert!(matrix.iter().all(|row| row.len() == d), "matrix must be square");
    let trace: f64 = (0..d).map(|a| matrix[a][a]).sum();
    let negligible = 1e-12 * trace.abs().max(1e-300);
    let mut deflated: Vec<Vec<f64>> = matrix.to_vec();
    let mut pairs = Vec::new();
    for _ in 0..k.min(d) {
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        let mut converged = false;
        for _ in 0..POWER_MAX_ITERS {
            let mut next = vec![0.0; d];
            for (a, row) in deflated.iter().enumerate() {
                next[a] = row.iter().zip(&v).map(|(m, x)| m * x).sum();
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                converged = true;
                v = vec![0.0; d];
                break;
            }
            for x in next.iter_mut() {
                *x /= norm;
            }
            // The matrix is positive semidefinite after deflation, so
            // the iterates cannot flip sign between rounds.
            let delta = next
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            v = next;
            if delta < POWER_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("power iteration did not reach tolerance; using the last iterate");
        }
        let mut image = vec![0.0; d];
        for (a, row) in deflated.iter().enumerate() {
            image[a] = row.iter().zip(&v).map(|(m, x)| m * x).sum();
        }
        let eigenvalue: f64 = image.iter().zip(&v).map(|(a, b)| a * b).sum();
        if eigenvalue.abs() <= negligible {
            break;
        }
        let lead = argmax(&v.iter().map(|x| x.abs()).collect::<Vec<_>>());
        if v[lead] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        for a in 0..d {
            for b in 0..d {
                deflated[a][b] -= eigenvalue * v[a] * v[b];
            }
        }
        pairs.push((eigenvalue, v));
    }
    pairs
}

/// Mean-centered projection of each embedding onto the top two
/// principal directions. Rank-deficient inputs keep their first
/// coordinate and zero the second.
pub fn project_2d(embeddings: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let n = embeddings.len();
    if n < 3 {
        return Err(Error::Eval(format!(
            "2-D projection needs at least 3 samples, got {n}"
        )));
    }
    let dim = embeddings[0].len();
    assert!(
        embeddings.iter().all(|e| e.len() == dim),
        "projection: embeddings must share one dimension"
    );
    let mut mean = vec![0.0; dim];
    for e in embeddings {
        for (m, x) in mean.iter_mut().zip(e) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; dim]; dim];
    for row in &centered {
        for a in 0..dim {
            for b in a..dim {
                cov[a][b] += row[a] * row[b];
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            cov[a][b] /= (n - 1) as f64;
            cov[b][a] = cov[a][b];
        }
    }
    let pairs = top_eigenpairs(&cov, 2);
    if pairs.len() < 2 {
        log::warn!(
            "embedding covariance has rank {} < 2; zeroing the second coordinate",
            pairs.len()
        );
    }
    let project = |row: &[f64], axis: usize| -> f64 {
        match pairs.get(axis) {
            Some((_, v)) => row.iter().zip(v).map(|(x, e)| x * e).sum(),
            None => 0.0,
        }
    };
    Ok(centered.iter().map(|row| (project(row, 0), project(row, 1))).collect())
}

// ---- cohort report -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CohortReport {
    pub label: String,
    pub count: usize,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeReport {
    pub attribute: String,
    pub cohorts: Vec<CohortReport>,
    /// Absent when fewer than two cohorts had scoreable utterances.
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub attributes: Vec<AttributeReport>,
    pub total_utterances: usize,
    pub total_wer: f64,
}

/// Score reference/hypothesis pairs against the corpus demographics:
/// per-cohort micro WER and gap for each attribute, and the pooled
/// total. Pure bookkeeping; decoding happens in `evaluate`.
pub fn assemble_report(
    corpus: &[Utterance],
    hypotheses: &[Vec<usize>],
    attributes: &[String],
) -> Result<EvalReport> {
    assert_eq!(
        corpus.len(),
        hypotheses.len(),
        "report: {} utterances vs {} hypotheses",
        corpus.len(),
        hypotheses.len()
    );
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = corpus
        .iter()
        .zip(hypotheses)
        .map(|(utt, hyp)| (utt.transcript.clone(), hyp.clone()))
        .collect();
    let total_wer = wer(&pairs)?;

    let mut reports = Vec::new();
    for attribute in attributes {
        let mut by_cohort: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, utt) in corpus.iter().enumerate() {
            let label = utt.demographics.get(attribute).ok_or_else(|| {
                Error::data(format!("unknown demographic attribute `{attribute}`"))
            })?;
            by_cohort.entry(label.to_string()).or_default().push(i);
        }
        let mut cohorts = Vec::new();
        let mut cohort_wers = BTreeMap::new();
        for (label, members) in by_cohort {
            let subset: Vec<(Vec<usize>, Vec<usize>)> =
                members.iter().map(|&i| pairs[i].clone()).collect();
            match wer(&subset) {
                Ok(value) => {
                    cohort_wers.insert(label.clone(), value);
                    cohorts.push(CohortReport {
                        label,
                        count: members.len(),
                        wer: value,
                    });
                }
                Err(_) => {
                    log::warn!(
                        "cohort `{label}` of attribute `{attribute}` has no reference words; \
                         leaving it out of the report"
                    );
                }
            }
        }
        let gap = match wer_gap(&cohort_wers) {
            Ok(value) => Some(value),
            Err(_) => {
                log::warn!(
                    "attribute `{attribute}` has {} scoreable cohort(s); omitting its gap",
                    cohort_wers.len()
                );
                None
            }
        };
        reports.push(AttributeReport {
            attribute: attribute.clone(),
            cohorts,
            gap,
        });
    }
    Ok(EvalReport {
        attributes: reports,
        total_utterances: corpus.len(),
        total_wer,
    })
}

/// Decode every utterance greedily with the given model and score the
/// result per cohort.
pub fn evaluate(
    corpus: &[Utterance],
    params: &Params<f64>,
    cfg: &ModelConfig,
    attributes: &[String],
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::data("evaluation corpus is empty"));
    }
    for utt in corpus {
        if let Some(&t) = utt.transcript.iter().find(|&&t| t == 0 || t >= cfg.vocab_size) {
            return Err(Error::config(format!(
                "utterance `{}` uses token id {t} outside the decoder vocabulary [1, {})",
                utt.id, cfg.vocab_size
            )));
        }
    }
    let hypotheses: Vec<Vec<usize>> = corpus
        .iter()
        .map(|utt| {
            let h = model::encode_one(&utt.spec, params, cfg);
            greedy_ctc_decode(&model::decode_logits(&h, params))
        })
        .collect();
    assemble_report(corpus, &hypotheses, attributes)
}

// ---- rendering --------------------------------------------------------------------

fn format_wer(wer: f64) -> String {
    format!("{:.2}", 100.0 * wer)
}

fn format_gap(gap: Option<f64>) -> String {
    match gap {
        Some(g) => format!("{g:.1}"),
        None => String::new(),
    }
}

/// Aligned text table, one row per cohort with the attribute's gap on
/// its first row, and a pooled total at the bottom. WER columns are
/// percentages.
pub fn render_text(report: &EvalReport) -> String {
    let mut rows = vec![[
        "attribute".to_string(),
        "cohort".to_string(),
        "count".to_string(),
        "wer%".to_string(),
        "gap%".to_string(),
    ]];
    for attr in &report.attributes {
        for (i, cohort) in attr.cohorts.iter().enumerate() {
            rows.push([
                attr.attribute.clone(),
                cohort.label.clone(),
                cohort.count.to_string(),
                format_wer(cohort.wer),
                if i == 0 { format_gap(attr.gap) } else { String::new() },
            ]);
        }
    }
    rows.push([
        "total".to_string(),
        String::new(),
        report.total_utterances.to_string(),
        format_wer(report.total_wer),
        String::new(),
    ]);

    let mut widths = [0usize; 5];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (col, (cell, width)) in row.iter().zip(widths).enumerate() {
            if col > 0 {
                line.push_str("  ");
            }
            if col < 2 {
                line.push_str(&format!("{cell:<width$}"));
            } else {
                line.push_str(&format!("{cell:>width$}"));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

/// Machine-readable twin of the text table. The gap repeats on every
/// row of its attribute so each line stands alone.
pub fn render_csv(report: &EvalReport) -> String {
    let mut out = String::from("attribute,cohort,count,wer_pct,gap_pct\n");
    for attr in &report.attributes {
        for cohort in &attr.cohorts {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&attr.attribute),
                csv_field(&cohort.label),
                cohort.count,
                100.0 * cohort.wer,
                attr.gap.map(|g| g.to_string()).unwrap_or_default(),
            ));
        }
    }
    out.push_str(&format!(
        "total,,{},{},\n",
        report.total_utterances,
        100.0 * report.total_wer
    ));
    out
}

/// Embedding export: one row per utterance with its id, the requested
/// demographic labels, and the vector entries.
pub fn render_embeddings(
    corpus: &[Utterance],
    attributes: &[String],
    rows: &[Vec<f64>],
) -> Result<String> {
    assert_eq!(
        corpus.len(),
        rows.len(),
        "export: {} utterances vs {} rows",
        corpus.len(),
        rows.len()
    );
    let width = rows.first().map_or(0, Vec::len);
    let mut out = String::from("id");
    for attribute in attributes {
        out.push(',');
        out.push_str(&csv_field(attribute));
    }
    for v in 0..width {
        out.push_str(&format!(",v{v}"));
    }
    out.push('\n');
    for (utt, row) in corpus.iter().zip(rows) {
        out.push_str(&csv_field(&utt.id));
        for attribute in attributes {
            let label = utt.demographics.get(attribute).ok_or_else(|| {
                Error::data(format!("unknown demographic attribute `{attribute}`"))
            })?;
            out.push(',');
            out.push_str(&csv_field(label));
        }
        for value in row {
            out.push_str(&format!(",{value}"));
        }
        out.push('\n');
    }
    Ok(out)
}
