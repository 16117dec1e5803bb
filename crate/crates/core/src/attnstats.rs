//! Key statistics over attention maps: the mean attention each key receives
//! across queries, the top-k keys of every map, and how often each token
//! label shows up among them.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use crate::seqmodel::Token;
use crate::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;

/// A `rows x keys` attention map with one label per key.
///
/// Queries are aligned with the last `rows` keys: row `i` sees keys
/// `0..=keys - rows + i` and is zero beyond. A full causal map has
/// `rows == keys`; a single decoding step has one row over every key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl AttentionRecord {
    pub fn visible(&self, row: usize) -> usize {
        self.labels.len() - self.rows.len() + row + 1
    }

    pub fn validate(&self) -> Result<()> {
        let keys = self.labels.len();
        if keys == 0 || self.rows.is_empty() {
            return Err(Error::Contract("empty attention record".into()));
        }
        if self.rows.len() > keys {
            return Err(Error::Validation(format!(
                "{} rows but only {keys} keys",
                self.rows.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != keys {
                return Err(Error::Validation(format!(
                    "row {i} has {} entries, expected {keys}",
                    row.len()
                )));
            }
            let vis = self.visible(i);
            if row.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::Validation(format!("row {i} has a negative or non-finite weight")));
            }
            if row[vis..].iter().any(|&x| x != 0.0) {
                return Err(Error::Validation(format!("row {i} attends past its query")));
            }
            let sum: f64 = row[..vis].iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Validation(format!("row {i} sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Mean over all query rows of each key column (masked entries count as 0).
pub fn key_mean_attention(record: &AttentionRecord) -> Result<Vec<f64>> {
    record.validate()?;
    let n = record.rows.len() as f64;
    let mut means = vec![0.0; record.labels.len()];
    for row in &record.rows {
        for (m, x) in means.iter_mut().zip(row) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    Ok(means)
}

/// Indices of the `k` largest means, descending, ties to the lower index.
pub fn top_k_keys(means: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..means.len()).collect();
    idx.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccurrenceTable {
    /// Number of maps in which the label was among the top-k keys.
    pub counts: BTreeMap<String, usize>,
    pub maps: usize,
}

impl OccurrenceTable {
    /// `(label, count)` by count descending, then label.
    pub fn sorted(&self) -> Vec<(String, usize)> {
        let mut v: Vec<_> = self.counts.iter().map(|(l, &c)| (l.clone(), c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }

    pub fn merge(&mut self, other: &OccurrenceTable) {
        self.maps += other.maps;
        for (l, c) in &other.counts {
            *self.counts.entry(l.clone()).or_default() += c;
        }
    }
}

/// Counts, for each label, the maps whose top-k keys include it. A label is
/// counted at most once per map.
pub fn aggregate_occurrence(records: &[AttentionRecord], k: usize) -> Result<OccurrenceTable> {
    if records.is_empty() {
        return Err(Error::Contract("no attention records".into()));
    }
    let mut table = OccurrenceTable::default();
    for rec in records {
        let means = key_mean_attention(rec)?;
        let mut labels: Vec<&str> = top_k_keys(&means, k)
            .into_iter()
            .map(|i| rec.labels[i].as_str())
            .collect();
        labels.sort_unstable();
        labels.dedup();
        for l in labels {
            *table.counts.entry(l.to_owned()).or_default() += 1;
        }
        table.maps += 1;
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Starting,
    Punctuation,
    NearBoi,
    NearEoi,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Starting,
        Category::Punctuation,
        Category::NearBoi,
        Category::NearEoi,
        Category::Other,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Starting => "starting",
            Category::Punctuation => "punctuation",
            Category::NearBoi => "near_boi",
            Category::NearEoi => "near_eoi",
            Category::Other => "other",
        }
    }
}

/// BOS is starting; BOI and the first `k_head` slots are near BoI; the last
/// `k_tail` slots and EOI are near EoI; anything unrecognised is other.
pub fn classify_token(label: &str, block_len: usize, k_head: usize, k_tail: usize) -> Category {
    match Token::from_label(label) {
        Some(Token::Bos) => Category::Starting,
        Some(Token::Punct(_)) => Category::Punctuation,
        Some(Token::Boi) => Category::NearBoi,
        Some(Token::Eoi) => Category::NearEoi,
        Some(Token::Img(s)) if (s as usize) < k_head => Category::NearBoi,
        Some(Token::Img(s)) if (s as usize) < block_len && s as usize >= block_len.saturating_sub(k_tail) => {
            Category::NearEoi
        }
        _ => Category::Other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub category: Category,
    /// Occurrences among top-k labels.
    pub topk_count: usize,
    pub topk_share: f64,
    /// Occurrences among all keys of all maps.
    pub base_count: usize,
    pub base_share: f64,
}

/// Category shares among top-k occurrences against their base rate among all
/// keys.
pub fn category_shares(
    table: &OccurrenceTable,
    records: &[AttentionRecord],
    block_len: usize,
    k_head: usize,
    k_tail: usize,
) -> Vec<CategoryShare> {
    let classify = |l: &str| classify_token(l, block_len, k_head, k_tail);
    let mut top = BTreeMap::<Category, usize>::new();
    for (l, c) in &table.counts {
        *top.entry(classify(l)).or_default() += c;
    }
    let mut base = BTreeMap::<Category, usize>::new();
    for r in records {
        for l in &r.labels {
            *base.entry(classify(l)).or_default() += 1;
        }
    }
    let top_total: usize = top.values().sum();
    let base_total: usize = base.values().sum();
    let share = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Category::ALL
        .iter()
        .map(|&category| {
            let (tc, bc) = (
                top.get(&category).copied().unwrap_or(0),
                base.get(&category).copied().unwrap_or(0),
            );
            CategoryShare {
                category,
                topk_count: tc,
                topk_share: share(tc, top_total),
                base_count: bc,
                base_share: share(bc, base_total),
            }
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DumpLine {
    Step {
        #[allow(dead_code)]
        t: usize,
        #[allow(dead_code)]
        layer: usize,
        #[allow(dead_code)]
        head: usize,
        labels: Vec<String>,
        row: Vec<f64>,
    },
    Map {
        labels: Vec<String>,
        rows: Vec<Vec<f64>>,
    },
}

fn read_dump_file(path: &Path, out: &mut Vec<AttentionRecord>) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg,
        };
        let rec = match serde_json::from_str::<DumpLine>(&line).map_err(|e| parse_err(e.to_string()))? {
            DumpLine::Step { labels, row, .. } => AttentionRecord {
                labels,
                rows: vec![row],
            },
            DumpLine::Map { labels, rows } => AttentionRecord { labels, rows },
        };
        rec.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(())
}

/// Reads step dumps (`{"t","layer","head","labels","row"}`, one single-row
/// map each) or full maps (`{"labels","rows"}`) from a JSON-lines file or
/// from every `*.jsonl` file of a directory, in file-name order.
pub fn read_attention_records(path: impl AsRef<Path>) -> Result<Vec<AttentionRecord>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        for f in files {
            read_dump_file(&f, &mut out)?;
        }
    } else {
        read_dump_file(path, &mut out)?;
    }
    Ok(out)
}

/// Writes `label,count`, most frequent first.
pub fn write_occurrence_csv(table: &OccurrenceTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["label", "count"]).map_err(|e| csv_err(path, e))?;
    for (label, count) in table.sorted() {
        w.write_record([label, count.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `category,topk_count,topk_share,base_count,base_share`.
pub fn write_category_csv(shares: &[CategoryShare], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["category", "topk_count", "topk_share", "base_count", "base_share"])
        .map_err(|e| csv_err(path, e))?;
    for s in shares {
        w.write_record([
            s.category.name().to_string(),
            s.topk_count.to_string(),
            s.topk_share.to_string(),
            s.base_count.to_string(),
            s.base_share.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(labels: &[&str], rows: Vec<Vec<f64>>) -> AttentionRecord {
        AttentionRecord {
            labels: labels.iter().map(|s| s.to_string()).collect(),
            rows,
        }
    }

    #[test]
    fn two_by_two_means() {
        let r = rec(&["BOS", "a"], vec![vec![1.0, 0.0], vec![0.5, 0.5]]);
        assert_eq!(key_mean_attention(&r).unwrap(), vec![0.75, 0.25]);
    }

    #[test]
    fn uniform_causal_three() {
        let third = 1.0 / 3.0;
        let r = rec(
            &["BOS", "a", "b"],
            vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0], vec![third, third, third]],
        );
        let m = key_mean_attention(&r).unwrap();
        for (got, want) in m.iter().zip([0.6111, 0.2778, 0.1111]) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_records() {
        assert!(key_mean_attention(&rec(&[], vec![])).is_err());
        assert!(rec(&["a", "b"], vec![vec![0.5, 0.5], vec![0.5, 0.5]]).validate().is_err());
        assert!(rec(&["a", "b"], vec![vec![0.7, 0.2]]).validate().is_err());
        assert!(rec(&["a", "b"], vec![vec![0.5, 0.5]]).validate().is_ok());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_keys(&[0.1, 0.3, 0.05, 0.5, 0.05], 10), vec![3, 1, 0, 2, 4]);
        assert_eq!(top_k_keys(&[0.2, 0.5, 0.3], 2), vec![1, 2]);
        assert_eq!(top_k_keys(&[0.4, 0.4, 0.2], 1), vec![0]);
    }

    #[test]
    fn identical_records_double_counts() {
        let r = rec(&["BOS", "IMG57", "EOI"], vec![vec![0.5, 0.3, 0.2]]);
        let t = aggregate_occurrence(&[r.clone(), r], 2).unwrap();
        assert_eq!(t.maps, 2);
        assert_eq!(t.sorted(), vec![("BOS".into(), 2), ("IMG57".into(), 2)]);
    }

    #[test]
    fn repeated_label_counts_once_per_map() {
        let r = rec(&["the", "the", "BOS"], vec![vec![0.4, 0.4, 0.2]]);
        let t = aggregate_occurrence(&[r], 3).unwrap();
        assert_eq!(t.counts["the"], 1);
    }

    #[test]
    fn classification() {
        assert_eq!(classify_token("BOS", 64, 5, 8), Category::Starting);
        assert_eq!(classify_token(",", 64, 5, 8), Category::Punctuation);
        assert_eq!(classify_token("IMG57", 64, 5, 8), Category::NearEoi);
        assert_eq!(classify_token("IMG56", 64, 5, 8), Category::NearEoi);
        assert_eq!(classify_token("IMG55", 64, 5, 8), Category::Other);
        assert_eq!(classify_token("IMG04", 64, 5, 8), Category::NearBoi);
        assert_eq!(classify_token("BOI", 64, 5, 8), Category::NearBoi);
        assert_eq!(classify_token("EOI", 64, 5, 8), Category::NearEoi);
        assert_eq!(classify_token("IMG30", 64, 5, 8), Category::Other);
        assert_eq!(classify_token("the", 64, 5, 8), Category::Other);
        assert_eq!(classify_token("", 64, 5, 8), Category::Other);
    }

    #[test]
    fn shares_sum_to_one() {
        let r = rec(&["BOS", ",", "IMG00", "w3"], vec![vec![0.4, 0.3, 0.2, 0.1]]);
        let t = aggregate_occurrence(std::slice::from_ref(&r), 2).unwrap();
        let s = category_shares(&t, &[r], 8, 1, 2);
        assert!((s.iter().map(|c| c.topk_share).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(s[0].topk_count, 1);
        assert_eq!(s[1].topk_count, 1);
        assert!((s[4].base_share - 0.25).abs() < 1e-12);
    }

    #[test]
    fn reads_both_dump_shapes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("a.jsonl"),
            "{\"t\":1,\"layer\":0,\"head\":1,\"labels\":[\"BOS\",\",\"],\"row\":[0.25,0.75]}\n",
        )
        .unwrap();
        fs::write(
            dir.path().join("b.jsonl"),
            "{\"labels\":[\"BOS\",\"x\"],\"rows\":[[1.0,0.0],[0.5,0.5]]}\n",
        )
        .unwrap();
        fs::write(dir.path().join("ignored.txt"), "junk").unwrap();
        let recs = read_attention_records(dir.path()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].rows.len(), 1);
        assert_eq!(recs[1].rows.len(), 2);
    }

    #[test]
    fn occurrence_csv_quotes_punctuation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.csv");
        let mut t = OccurrenceTable::default();
        t.counts.insert(",".into(), 3);
        t.counts.insert("BOS".into(), 5);
        t.maps = 5;
        write_occurrence_csv(&t, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "label,count\nBOS,5\n\",\",3\n");
    }
}
