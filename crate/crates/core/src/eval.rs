//! Scoring: label alphabets and mappings, path collapsing, frame accuracy, and
//! edit-distance phoneme accuracy.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered class labels; the position of a label is its class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAlphabet {
    labels: Vec<String>,
    garbage: Option<usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LabelAlphabet {
    pub fn new(labels: Vec<String>, garbage: Option<&str>) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("label `{l}` is empty or has whitespace")));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate label `{l}`")));
            }
        }
        let garbage = match garbage {
            Some(g) => Some(
                *index
                    .get(g)
                    .ok_or_else(|| Error::invalid(format!("garbage label `{g}` not in alphabet")))?,
            ),
            None => None,
        };
        Ok(LabelAlphabet {
            labels,
            garbage,
            index,
        })
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(mut self) -> Result<Self> {
        let garbage = self.garbage.map(|g| self.labels[g].clone());
        if self.garbage.is_some_and(|g| g >= self.labels.len()) {
            return Err(Error::invalid("garbage index outside alphabet"));
        }
        self = LabelAlphabet::new(std::mem::take(&mut self.labels), garbage.as_deref())?;
        Ok(self)
    }

    /// Reads one label per line.
    pub fn read(path: &Path, garbage: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let labels = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(labels, garbage)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.labels.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn garbage(&self) -> Option<usize> {
        self.garbage
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.index
            .get(label)
            .copied()
            .ok_or_else(|| Error::data(format!("label `{label}` is not in the alphabet")))
    }
}

/// Many-to-one relabeling table, e.g. a fine phone set onto a coarse one.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMapping {
    table: BTreeMap<String, String>,
}

impl LabelMapping {
    pub fn new(table: BTreeMap<String, String>) -> Self {
        LabelMapping { table }
    }

    /// Parses `source target` lines.
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[..] {
                [] => continue,
                [src, dst] => {
                    table.insert(src.to_string(), dst.to_string());
                }
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: "expected `source target`".into(),
                    })
                }
            }
        }
        Ok(LabelMapping { table })
    }

    /// Checks that every target is a label of `alphabet`.
    pub fn check_targets(&self, alphabet: &LabelAlphabet) -> Result<()> {
        for target in self.table.values() {
            alphabet.index_of(target)?;
        }
        Ok(())
    }

    pub fn map<'a>(&'a self, label: &str) -> Result<&'a str> {
        self.table
            .get(label)
            .map(String::as_str)
            .ok_or_else(|| Error::data(format!("label `{label}` has no mapping")))
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.table.values().map(String::as_str)
    }
}

/// Applies `mapping` to every label of `seq`.
pub fn map_labels<S: AsRef<str>>(seq: &[S], mapping: &LabelMapping) -> Result<Vec<String>> {
    seq.iter()
        .map(|s| mapping.map(s.as_ref()).map(String::from))
        .collect()
}

/// Merges runs of identical labels. When `strip` names a garbage label, its
/// occurrences are removed before merging.
pub fn collapse_path<T: PartialEq + Clone>(labels: &[T], strip: Option<&T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for l in labels {
        if strip == Some(l) {
            continue;
        }
        if out.last() != Some(l) {
            out.push(l.clone());
        }
    }
    out
}

/// Counts of one minimal alignment between a reference and a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Alignment {
    pub reference_len: usize,
    pub distance: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl Alignment {
    pub fn accuracy(&self) -> f64 {
        100.0 * (self.reference_len as f64 - self.distance as f64) / self.reference_len as f64
    }
}

/// Unit-cost Levenshtein alignment. The breakdown comes from a backtrace that
/// prefers match, then substitution, then deletion, then insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut a = Alignment {
        reference_len: n,
        distance: d[n * w + m],
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diag = d[(i - 1) * w + j - 1];
            if reference[i - 1] == hypothesis[j - 1] && here == diag {
                i -= 1;
                j -= 1;
                continue;
            }
            if here == diag + 1 {
                a.substitutions += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            a.deletions += 1;
            i -= 1;
        } else {
            a.insertions += 1;
            j -= 1;
        }
    }
    a
}

pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    align(reference, hypothesis).distance
}

/// `100 * (N - E) / N` for reference length `N` and edit distance `E`.
/// Negative under heavy insertion.
pub fn phoneme_accuracy<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("phoneme accuracy needs a non-empty reference"));
    }
    Ok(align(reference, hypothesis).accuracy())
}

/// Percentage of positions where the two label sequences agree.
pub fn frame_accuracy<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.len() != hypothesis.len() {
        return Err(Error::invalid(format!(
            "frame sequences differ in length: {} vs {}",
            reference.len(),
            hypothesis.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::invalid("frame accuracy of empty sequences"));
    }
    let hits = reference.iter().zip(hypothesis).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / reference.len() as f64)
}

/// Corpus-pooled accuracy: `100 * (sum N - sum E) / sum N`.
pub fn pooled_accuracy(alignments: &[Alignment]) -> Option<f64> {
    let n: usize = alignments.iter().map(|a| a.reference_len).sum();
    let e: usize = alignments.iter().map(|a| a.distance).sum();
    (n > 0).then(|| 100.0 * (n as f64 - e as f64) / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(labels: &str) -> Vec<char> {
        labels.chars().collect()
    }

    #[test]
    fn mapping_examples() {
        let identity = LabelMapping::new(
            [("a", "a"), ("b", "b")]
                .into_iter()
                .map(|(x, y)| (x.to_string(), y.to_string()))
                .collect(),
        );
        assert_eq!(map_labels(&["a", "b"], &identity).unwrap(), vec!["a", "b"]);

        let fold = LabelMapping::new(
            [("x", "a"), ("y", "a")]
                .into_iter()
                .map(|(x, y)| (x.to_string(), y.to_string()))
                .collect(),
        );
        assert_eq!(map_labels(&["x", "y", "x"], &fold).unwrap(), vec!["a"; 3]);
        let err = map_labels(&["z"], &fold).unwrap_err();
        assert!(err.to_string().contains('z'));
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse_path(&s("aabbba"), None), s("aba"));
        assert_eq!(collapse_path(&s("a"), None), s("a"));
        assert_eq!(collapse_path(&s("aggb"), Some(&'g')), s("ab"));
        assert_eq!(collapse_path(&s("aggb"), None), s("agb"));
    }

    #[test]
    fn accuracy_examples() {
        let acc = phoneme_accuracy(&s("abc"), &s("ac")).unwrap();
        assert!((acc - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(phoneme_accuracy(&s("ab"), &s("abb")).unwrap(), 50.0);
        assert_eq!(phoneme_accuracy(&s("abc"), &s("abc")).unwrap(), 100.0);
        assert_eq!(phoneme_accuracy(&s("ab"), &s("")).unwrap(), 0.0);
        assert_eq!(phoneme_accuracy(&s("a"), &s("xyz")).unwrap(), -200.0);
        assert!(phoneme_accuracy(&s(""), &s("a")).is_err());
    }

    #[test]
    fn alignment_breakdown_prefers_substitution() {
        let a = align(&s("abc"), &s("axc"));
        assert_eq!((a.distance, a.substitutions, a.deletions, a.insertions), (1, 1, 0, 0));
        let a = align(&s("abc"), &s("ac"));
        assert_eq!((a.substitutions, a.deletions, a.insertions), (0, 1, 0));
        let a = align(&s("ab"), &s("xaby"));
        assert_eq!((a.distance, a.insertions), (2, 2));
    }

    #[test]
    fn frame_accuracy_examples() {
        assert_eq!(frame_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(frame_accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(frame_accuracy(&[1, 2, 3, 4], &[1, 0, 3, 0]).unwrap(), 50.0);
        assert!(frame_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn pooled_accuracy_weights_by_reference_length() {
        let a = align(&s("abcd"), &s("abcd"));
        let b = align(&s("ab"), &s(""));
        assert_eq!(pooled_accuracy(&[a, b]).unwrap(), 100.0 * 4.0 / 6.0);
    }

    #[test]
    fn alphabet_rejects_duplicates_and_unknown_garbage() {
        assert!(LabelAlphabet::new(vec!["a".into(), "a".into()], None).is_err());
        assert!(LabelAlphabet::new(vec!["a".into()], Some("g")).is_err());
        let abc = LabelAlphabet::new(vec!["a".into(), "b".into(), "g".into()], Some("g")).unwrap();
        assert_eq!(abc.garbage(), Some(2));
        assert_eq!(abc.index_of("b").unwrap(), 1);
        assert!(abc.index_of("q").is_err());
        let json = serde_json::to_string(&abc).unwrap();
        let back: LabelAlphabet = serde_json::from_str(&json).unwrap();
        assert_eq!(back.reindex().unwrap(), abc);
    }

    fn memo_distance(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&d) = memo.get(&(a.len(), b.len())) {
            return d;
        }
        let sub = memo_distance(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
        let del = memo_distance(&a[1..], b, memo) + 1;
        let ins = memo_distance(a, &b[1..], memo) + 1;
        let d = sub.min(del).min(ins);
        memo.insert((a.len(), b.len()), d);
        d
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn distance_matches_recursive_oracle(
            a in prop::collection::vec(0u8..4, 0..=12),
            b in prop::collection::vec(0u8..4, 0..=12),
        ) {
            let alignment = align(&a, &b);
            prop_assert_eq!(alignment.distance, memo_distance(&a, &b, &mut HashMap::new()));
            prop_assert_eq!(
                alignment.distance,
                alignment.substitutions + alignment.deletions + alignment.insertions
            );
            prop_assert_eq!(alignment.deletions + b.len(), alignment.insertions + a.len());
        }

        #[test]
        fn accuracy_survives_relabeling(
            a in prop::collection::vec(0u8..4, 1..=12),
            b in prop::collection::vec(0u8..4, 0..=12),
        ) {
            let rename = |v: &[u8]| v.iter().map(|x| (x + 1) % 4 + 10).collect::<Vec<_>>();
            prop_assert_eq!(phoneme_accuracy(&a, &a).unwrap(), 100.0);
            prop_assert_eq!(
                phoneme_accuracy(&a, &b).unwrap(),
                phoneme_accuracy(&rename(&a), &rename(&b)).unwrap()
            );
        }

        #[test]
        fn collapse_is_idempotent(a in prop::collection::vec(0u8..3, 1..30), strip in prop::option::of(0u8..3)) {
            let once = collapse_path(&a, strip.as_ref());
            prop_assert_eq!(collapse_path(&once, strip.as_ref()), once);
        }
    }
}
