//! Accuracy, pass@k and balanced accuracy, plus the per-subset table layout.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{VqaRecord, VQA_SUBSETS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("prediction for unknown record {0:?}")]
    UnknownRecordId(String),
    #[error("record {record_id:?} attempt {attempt} predicted more than once")]
    DuplicatePrediction { record_id: String, attempt: usize },
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error("record {record_id:?} has {got} attempts, expected {expected}")]
    RaggedAttempts {
        record_id: String,
        expected: usize,
        got: usize,
    },
    #[error("declared label {0:?} has no gold samples")]
    EmptyClass(String),
    #[error("line {line}: {reason}")]
    BadPrediction { line: usize, reason: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaPrediction {
    pub record_id: String,
    #[serde(rename = "attempt")]
    pub attempt_index: usize,
    pub answer_index: Option<usize>,
    pub error: Option<String>,
}

impl VqaPrediction {
    pub fn answered(record_id: impl Into<String>, attempt: usize, answer: usize) -> Self {
        Self {
            record_id: record_id.into(),
            attempt_index: attempt,
            answer_index: Some(answer),
            error: None,
        }
    }

    pub fn failed(record_id: impl Into<String>, attempt: usize, error: impl Into<String>) -> Self {
        Self {
            record_id: record_id.into(),
            attempt_index: attempt,
            answer_index: None,
            error: Some(error.into()),
        }
    }

    fn is_correct(&self, gold: &VqaRecord) -> bool {
        self.error.is_none() && self.answer_index == Some(gold.answer_index)
    }
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<VqaPrediction>, EvalError> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| EvalError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: VqaPrediction = serde_json::from_str(&line).map_err(|e| EvalError::BadPrediction {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if p.answer_index.is_some() == p.error.is_some() {
            return Err(EvalError::BadPrediction {
                line: i + 1,
                reason: "exactly one of answer_index and error must be set".into(),
            });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_predictions<'a>(
    preds: impl IntoIterator<Item = &'a VqaPrediction>,
    mut out: impl Write,
) -> std::io::Result<()> {
    for p in preds {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl SubsetScore {
    fn new(n: usize, correct: usize) -> Self {
        Self {
            n,
            correct,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        }
    }
}

/// Rows are gold labels, columns predicted labels, with one extra column for
/// predictions outside the label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_subset: BTreeMap<String, SubsetScore>,
    pub overall: SubsetScore,
    pub pass_at_k: BTreeMap<usize, f64>,
    pub confusion: Option<ConfusionMatrix>,
}

/// Scores one attempt per record. Errored predictions and gold records with
/// no prediction count as wrong, so every denominator is the gold count.
pub fn score_vqa(preds: &[VqaPrediction], gold: &[VqaRecord]) -> Result<EvalReport, EvalError> {
    let by_id: HashMap<&str, &VqaRecord> = gold.iter().map(|g| (g.record_id.as_str(), g)).collect();
    let mut seen: HashMap<&str, &VqaPrediction> = HashMap::new();
    for p in preds {
        if p.attempt_index != 0 {
            return Err(EvalError::InvalidArgs(format!(
                "score_vqa takes attempt 0 only; got attempt {} for {:?}",
                p.attempt_index, p.record_id
            )));
        }
        if !by_id.contains_key(p.record_id.as_str()) {
            return Err(EvalError::UnknownRecordId(p.record_id.clone()));
        }
        if seen.insert(p.record_id.as_str(), p).is_some() {
            return Err(EvalError::DuplicatePrediction {
                record_id: p.record_id.clone(),
                attempt: 0,
            });
        }
    }
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for g in gold {
        let c = counts.entry(g.subset.clone()).or_default();
        c.0 += 1;
        if seen.get(g.record_id.as_str()).is_some_and(|p| p.is_correct(g)) {
            c.1 += 1;
        }
    }
    let n: usize = counts.values().map(|c| c.0).sum();
    let correct: usize = counts.values().map(|c| c.1).sum();
    Ok(EvalReport {
        per_subset: counts
            .into_iter()
            .map(|(s, (n, c))| (s, SubsetScore::new(n, c)))
            .collect(),
        overall: SubsetScore::new(n, correct),
        pass_at_k: BTreeMap::new(),
        confusion: None,
    })
}

fn check_pass_args(n: u64, c: u64, k: u64) -> Result<(), EvalError> {
    if c > n || k < 1 || k > n {
        return Err(EvalError::InvalidArgs(format!(
            "pass@k needs 0 <= c <= n and 1 <= k <= n (n={n}, c={c}, k={k})"
        )));
    }
    Ok(())
}

/// `1 - C(n-c, k) / C(n, k)` as an exact fraction, via
/// `1 - Π_{i=n-c+1..=n} (1 - k/i)`.
pub fn pass_at_k_exact(n: u64, c: u64, k: u64) -> Result<BigRational, EvalError> {
    check_pass_args(n, c, k)?;
    if n - c < k {
        return Ok(BigRational::one());
    }
    let mut miss = BigRational::one();
    for i in (n - c + 1)..=n {
        miss *= BigRational::new(BigInt::from(i - k), BigInt::from(i));
    }
    Ok(BigRational::one() - miss)
}

/// Unbiased pass@k estimate from `c` successes among `n` attempts.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, EvalError> {
    check_pass_args(n, c, k)?;
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

/// Mean pass@k over records, each with the same number of attempts.
pub fn aggregate_pass_at_k(
    attempts: &[VqaPrediction],
    gold: &[VqaRecord],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>, EvalError> {
    let by_id: HashMap<&str, &VqaRecord> = gold.iter().map(|g| (g.record_id.as_str(), g)).collect();
    let mut per_record: BTreeMap<&str, BTreeMap<usize, bool>> =
        gold.iter().map(|g| (g.record_id.as_str(), BTreeMap::new())).collect();
    for p in attempts {
        let g = by_id
            .get(p.record_id.as_str())
            .ok_or_else(|| EvalError::UnknownRecordId(p.record_id.clone()))?;
        let slot = per_record.get_mut(p.record_id.as_str()).expect("keys mirror gold");
        if slot.insert(p.attempt_index, p.is_correct(g)).is_some() {
            return Err(EvalError::DuplicatePrediction {
                record_id: p.record_id.clone(),
                attempt: p.attempt_index,
            });
        }
    }
    if per_record.is_empty() {
        return Err(EvalError::InvalidArgs("no records".into()));
    }
    let n = per_record.values().map(BTreeMap::len).max().unwrap_or(0);
    if let Some((id, a)) = per_record.iter().find(|(_, a)| a.len() != n) {
        return Err(EvalError::RaggedAttempts {
            record_id: id.to_string(),
            expected: n,
            got: a.len(),
        });
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(EvalError::InvalidArgs(format!("k={k} outside 1..={n}")));
    }
    let records = per_record.len();
    let mut out = BTreeMap::new();
    for &k in ks {
        let mut sum = BigRational::zero();
        for a in per_record.values() {
            let c = a.values().filter(|&&ok| ok).count() as u64;
            sum += pass_at_k_exact(n as u64, c, k as u64)?;
        }
        let mean = sum / BigRational::from_integer(BigInt::from(records));
        out.insert(k, mean.to_f64().unwrap_or(f64::NAN));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub value: f64,
    /// Recall per scored class, in label order.
    pub recalls: Vec<(String, f64)>,
    /// Declared labels with no gold samples; left out of the mean.
    pub excluded: Vec<String>,
    pub confusion: ConfusionMatrix,
}

/// Mean per-class recall over the declared labels present in `gold`.
/// Predictions outside `labels` count as wrong. Declared labels absent from
/// `gold` are excluded with a warning.
pub fn balanced_accuracy<S: AsRef<str>>(preds: &[S], gold: &[S], labels: &[S]) -> Result<BalancedAccuracy, EvalError> {
    if preds.len() != gold.len() {
        return Err(EvalError::InvalidArgs(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            gold.len()
        )));
    }
    let labels: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    if index.len() != labels.len() {
        return Err(EvalError::InvalidArgs("labels repeat".into()));
    }
    let other = labels.len();
    let mut counts = vec![vec![0u64; labels.len() + 1]; labels.len()];
    for (p, g) in preds.iter().zip(gold) {
        let gi = *index
            .get(g.as_ref())
            .ok_or_else(|| EvalError::InvalidArgs(format!("gold label {:?} not declared", g.as_ref())))?;
        let pi = index.get(p.as_ref()).copied().unwrap_or(other);
        counts[gi][pi] += 1;
    }
    let mut recalls = Vec::new();
    let mut excluded = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let total: u64 = counts[i].iter().sum();
        if total == 0 {
            log::warn!("{}", EvalError::EmptyClass(l.clone()));
            excluded.push(l.clone());
        } else {
            recalls.push((l.clone(), counts[i][i] as f64 / total as f64));
        }
    }
    if recalls.is_empty() {
        return Err(EvalError::InvalidArgs("no gold samples".into()));
    }
    let value = recalls.iter().map(|(_, r)| r).sum::<f64>() / recalls.len() as f64;
    Ok(BalancedAccuracy {
        value,
        recalls,
        excluded,
        confusion: ConfusionMatrix { labels, counts },
    })
}

/// Subsets in report order: the benchmark's cancer types first, then any
/// others alphabetically.
fn subset_order(report: &EvalReport) -> Vec<&str> {
    let mut order: Vec<&str> = VQA_SUBSETS
        .iter()
        .copied()
        .filter(|s| report.per_subset.contains_key(*s))
        .collect();
    let known: BTreeSet<&str> = VQA_SUBSETS.iter().copied().collect();
    order.extend(
        report
            .per_subset
            .keys()
            .map(String::as_str)
            .filter(|s| !known.contains(s)),
    );
    order
}

/// Plain-text table: one column per subset headed `NAME (n)`, then Overall,
/// with accuracies in percent.
pub fn render_vqa_table(report: &EvalReport, model: &str) -> String {
    let mut headers = vec!["Model".to_string()];
    let mut cells = vec![model.to_string()];
    for s in subset_order(report) {
        let sc = report.per_subset[s];
        headers.push(format!("{s} ({})", sc.n));
        cells.push(format!("{:.1}", sc.accuracy * 100.0));
    }
    headers.push(format!("Overall ({})", report.overall.n));
    cells.push(format!("{:.1}", report.overall.accuracy * 100.0));
    let widths: Vec<usize> = headers
        .iter()
        .zip(&cells)
        .map(|(h, c)| h.chars().count().max(c.chars().count()))
        .collect();
    let row = |items: &[String]| {
        items
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (t, w))| if i == 0 { format!("{t:<w$}") } else { format!("{t:>w$}") })
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = String::new();
    let header = row(&headers);
    let _ = writeln!(out, "{header}");
    let _ = writeln!(
        out,
        "{}",
        widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")
    );
    let _ = writeln!(out, "{}", row(&cells));
    if !report.pass_at_k.is_empty() {
        out.push('\n');
        for (k, v) in &report.pass_at_k {
            let _ = writeln!(out, "pass@{k}: {:.1}", v * 100.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::RegionRef;

    fn rec(id: &str, subset: &str, answer: usize) -> VqaRecord {
        VqaRecord {
            record_id: id.into(),
            region_ref: RegionRef::Path(format!("{id}.png").into()),
            question: "q".into(),
            options: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            answer_index: answer,
            subset: subset.into(),
        }
    }

    #[test]
    fn all_correct() {
        let gold = vec![rec("a", "BRCA", 0), rec("b", "LUAD", 2)];
        let preds = vec![VqaPrediction::answered("a", 0, 0), VqaPrediction::answered("b", 0, 2)];
        let r = score_vqa(&preds, &gold).unwrap();
        assert!(r.per_subset.values().all(|s| s.accuracy == 1.0));
        assert_eq!(r.overall.accuracy, 1.0);
    }

    #[test]
    fn subset_arithmetic() {
        let gold = vec![rec("a", "X", 0), rec("b", "X", 1), rec("c", "Y", 2), rec("d", "Y", 3)];
        let preds = vec![
            VqaPrediction::answered("a", 0, 0),
            VqaPrediction::answered("b", 0, 1),
            VqaPrediction::answered("c", 0, 2),
            VqaPrediction::failed("d", 0, "timeout"),
        ];
        let r = score_vqa(&preds, &gold).unwrap();
        assert_eq!(r.per_subset["X"].accuracy, 1.0);
        assert_eq!(r.per_subset["Y"].accuracy, 0.5);
        assert_eq!(r.overall.accuracy, 0.75);
        assert_eq!(r.overall.correct, 3);
    }

    #[test]
    fn score_errors() {
        let gold = vec![rec("a", "X", 0)];
        assert_eq!(
            score_vqa(&[VqaPrediction::answered("z", 0, 0)], &gold),
            Err(EvalError::UnknownRecordId("z".into()))
        );
        let dup = [VqaPrediction::answered("a", 0, 0), VqaPrediction::answered("a", 0, 1)];
        assert!(matches!(
            score_vqa(&dup, &gold),
            Err(EvalError::DuplicatePrediction { .. })
        ));
        // missing prediction counts as wrong
        assert_eq!(score_vqa(&[], &gold).unwrap().overall.correct, 0);
    }

    #[test]
    fn pass_at_k_spot_values() {
        assert_eq!(pass_at_k(8, 0, 3).unwrap(), 0.0);
        assert_eq!(pass_at_k(8, 8, 1).unwrap(), 1.0);
        assert_eq!(
            pass_at_k_exact(8, 4, 2).unwrap(),
            BigRational::new(BigInt::from(11), BigInt::from(14))
        );
        assert!((pass_at_k(8, 4, 2).unwrap() - 11.0 / 14.0).abs() < 1e-15);
        assert!(pass_at_k(8, 9, 1).is_err());
        assert!(pass_at_k(8, 1, 0).is_err());
        assert!(pass_at_k(8, 1, 9).is_err());
    }

    #[test]
    fn aggregate() {
        let gold = vec![rec("a", "X", 0), rec("b", "X", 0)];
        let mut preds = Vec::new();
        for i in 0..8 {
            preds.push(VqaPrediction::answered("a", i, 0));
            preds.push(VqaPrediction::answered("b", i, 1));
        }
        let r = aggregate_pass_at_k(&preds, &gold, &[1, 8]).unwrap();
        assert_eq!(r[&1], 0.5);
        assert_eq!(r[&8], 0.5);
        assert!(matches!(
            aggregate_pass_at_k(&preds, &gold, &[9]),
            Err(EvalError::InvalidArgs(_))
        ));
        preds.pop();
        assert!(matches!(
            aggregate_pass_at_k(&preds, &gold, &[1]),
            Err(EvalError::RaggedAttempts { .. })
        ));
    }

    #[test]
    fn balanced_accuracy_examples() {
        let gold = ["A", "A", "A", "A", "B"];
        let pred = ["A", "A", "A", "B", "B"];
        let labels = ["A", "B"];
        assert_eq!(balanced_accuracy(&pred, &gold, &labels).unwrap().value, 0.875);
        let majority = ["A"; 5];
        assert_eq!(balanced_accuracy(&majority, &gold, &labels).unwrap().value, 0.5);
        let three = ["x", "y", "z"];
        assert_eq!(balanced_accuracy(&three, &three, &three).unwrap().value, 1.0);
    }

    #[test]
    fn empty_class_excluded() {
        let r = balanced_accuracy(&["A", "Q"], &["A", "B"], &["A", "B", "C"]).unwrap();
        assert_eq!(r.excluded, vec!["C"]);
        assert_eq!(r.value, 0.5);
        assert_eq!(r.confusion.counts[1][3], 1);
        assert!(balanced_accuracy(&["A"], &["Z"], &["A"]).is_err());
    }

    #[test]
    fn table_layout() {
        let gold = vec![rec("a", "LUAD", 0), rec("b", "BRCA", 0), rec("c", "BRCA", 1)];
        let preds = vec![VqaPrediction::answered("a", 0, 0), VqaPrediction::answered("b", 0, 0)];
        let t = render_vqa_table(&score_vqa(&preds, &gold).unwrap(), "agent");
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Model"));
        let brca = lines[0].find("BRCA (2)").unwrap();
        assert!(brca < lines[0].find("LUAD (1)").unwrap());
        assert!(lines[0].ends_with("Overall (3)"));
        assert!(lines[2].ends_with("66.7"));
    }

    #[test]
    fn prediction_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        let preds = vec![
            VqaPrediction::answered("a", 0, 1),
            VqaPrediction::failed("b", 0, "timeout"),
        ];
        write_predictions(&preds, std::fs::File::create(&p).unwrap()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(r#"{"record_id":"a","attempt":0,"answer_index":1,"error":null}"#));
        assert_eq!(load_predictions(&p).unwrap(), preds);
        std::fs::write(&p, r#"{"record_id":"a","attempt":0,"answer_index":null,"error":null}"#).unwrap();
        assert!(matches!(
            load_predictions(&p),
            Err(EvalError::BadPrediction { line: 1, .. })
        ));
    }
}
