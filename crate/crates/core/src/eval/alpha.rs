//! Inter-annotator agreement: Krippendorff's alpha with the interval metric.

use std::path::Path;

use super::EvalError;

/// Items × annotators; `None` marks a missing score.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTable {
    pub annotators: Vec<String>,
    pub item_ids: Vec<String>,
    pub scores: Vec<Vec<Option<f64>>>,
}

impl AnnotationTable {
    pub fn new(scores: Vec<Vec<Option<f64>>>) -> Result<Self, EvalError> {
        let width = scores.first().map_or(0, Vec::len);
        let table = Self {
            annotators: (1..=width).map(|i| format!("a{i}")).collect(),
            item_ids: (1..=scores.len()).map(|i| i.to_string()).collect(),
            scores,
        };
        table.check()?;
        Ok(table)
    }

    fn check(&self) -> Result<(), EvalError> {
        let invalid = |m: String| Err(EvalError::InvalidTable(m));
        if self.annotators.len() < 2 {
            return invalid("need at least two annotators".into());
        }
        if self.scores.is_empty() {
            return invalid("need at least one item".into());
        }
        for (i, row) in self.scores.iter().enumerate() {
            if row.len() != self.annotators.len() {
                return invalid(format!(
                    "item {} has {} scores for {} annotators",
                    i + 1,
                    row.len(),
                    self.annotators.len()
                ));
            }
            if row.iter().flatten().any(|v| !v.is_finite()) {
                return invalid(format!("item {} has a non-finite score", i + 1));
            }
        }
        Ok(())
    }

    /// CSV with a header of annotator names, one row per item, empty cells
    /// for missing scores. A first column headed `item` or `id` holds item
    /// labels.
    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| EvalError::InvalidTable(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let labelled = header
            .first()
            .is_some_and(|h| h.eq_ignore_ascii_case("item") || h.eq_ignore_ascii_case("id"));
        let skip = usize::from(labelled);
        let mut item_ids = Vec::new();
        let mut scores = Vec::new();
        for (n, record) in reader.records().enumerate() {
            let record = record.map_err(|e| EvalError::InvalidTable(e.to_string()))?;
            let row = record
                .iter()
                .skip(skip)
                .enumerate()
                .map(|(col, cell)| {
                    if cell.is_empty() {
                        return Ok(None);
                    }
                    cell.parse::<f64>().map(Some).map_err(|_| {
                        EvalError::InvalidTable(format!(
                            "row {}, column {}: `{cell}` is not a number",
                            n + 2,
                            col + 1 + skip
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            item_ids.push(if labelled {
                record[0].to_string()
            } else {
                (n + 1).to_string()
            });
            scores.push(row);
        }
        let table = Self {
            annotators: header[skip..].to_vec(),
            item_ids,
            scores,
        };
        table.check()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::from_csv(&text)
    }

    /// Values of items scored by at least two annotators.
    fn pairable(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        self.scores
            .iter()
            .map(|row| row.iter().flatten().copied().collect::<Vec<f64>>())
            .filter(|v| v.len() >= 2)
    }
}

/// Interval-metric alpha computed through the coincidence matrix.
pub fn krippendorff_alpha(table: &AnnotationTable) -> Result<f64, EvalError> {
    table.check()?;
    let units: Vec<Vec<f64>> = table.pairable().collect();
    let mut values: Vec<f64> = units.iter().flatten().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let index = |v: f64| values.binary_search_by(|x| x.total_cmp(&v)).expect("value present");

    let k = values.len();
    let mut coincidence = vec![vec![0.0; k]; k];
    for unit in &units {
        let weight = 1.0 / (unit.len() - 1) as f64;
        for (i, &a) in unit.iter().enumerate() {
            for (j, &b) in unit.iter().enumerate() {
                if i != j {
                    coincidence[index(a)][index(b)] += weight;
                }
            }
        }
    }
    let marginals: Vec<f64> = coincidence.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = marginals.iter().sum();
    if n < 2.0 {
        return Err(EvalError::DegenerateTable);
    }
    let (mut d_o, mut d_e) = (0.0, 0.0);
    for c in 0..k {
        for j in 0..k {
            let delta = (values[c] - values[j]).powi(2);
            d_o += coincidence[c][j] * delta;
            d_e += marginals[c] * marginals[j] * delta;
        }
    }
    d_o /= n;
    d_e /= n * (n - 1.0);
    if d_e == 0.0 {
        return Err(EvalError::DegenerateTable);
    }
    Ok(1.0 - d_o / d_e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[&[Option<f64>]]) -> AnnotationTable {
        AnnotationTable::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn perfect_agreement_is_one() {
        let t = table(&[&[Some(3.0), Some(3.0)], &[Some(7.0), Some(7.0)], &[Some(5.0), None]]);
        assert_eq!(krippendorff_alpha(&t).unwrap(), 1.0);
    }

    #[test]
    fn no_variance_is_degenerate() {
        let t = table(&[&[Some(4.0), Some(4.0)], &[Some(4.0), Some(4.0)]]);
        assert!(matches!(krippendorff_alpha(&t), Err(EvalError::DegenerateTable)));
    }

    #[test]
    fn hand_computed_two_by_two() {
        // units {1,2} and {3,3}: n = 4, D_o = (2*1 + 0) / 4 = 0.5,
        // pairwise sum over values 1,2,3,3 = 2*(1+4+4+1+1+0) = 22, D_e = 22/12
        let t = table(&[&[Some(1.0), Some(2.0)], &[Some(3.0), Some(3.0)]]);
        let want = 1.0 - 0.5 / (22.0 / 12.0);
        assert!((krippendorff_alpha(&t).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn csv_loading() {
        let t = AnnotationTable::from_csv("item,ann1,ann2,ann3\ns1,8,7.5,\ns2,6,,6.5\n").unwrap();
        assert_eq!(t.annotators, vec!["ann1", "ann2", "ann3"]);
        assert_eq!(t.item_ids, vec!["s1", "s2"]);
        assert_eq!(t.scores[1], vec![Some(6.0), None, Some(6.5)]);
        let plain = AnnotationTable::from_csv("a,b\n1,2\n").unwrap();
        assert_eq!(plain.item_ids, vec!["1"]);
        assert!(AnnotationTable::from_csv("a\n1\n").is_err());
        assert!(AnnotationTable::from_csv("a,b\n1,x\n").is_err());
    }

    #[test]
    fn reordering_invariance() {
        let rows = vec![
            vec![Some(1.0), Some(2.0), None],
            vec![Some(4.0), Some(4.0), Some(5.0)],
            vec![None, Some(7.0), Some(6.0)],
            vec![Some(2.0), Some(3.0), Some(2.0)],
        ];
        let a = krippendorff_alpha(&AnnotationTable::new(rows.clone()).unwrap()).unwrap();
        let mut items = rows.clone();
        items.reverse();
        let b = krippendorff_alpha(&AnnotationTable::new(items).unwrap()).unwrap();
        let cols: Vec<Vec<Option<f64>>> = rows.iter().map(|r| vec![r[2], r[0], r[1]]).collect();
        let c = krippendorff_alpha(&AnnotationTable::new(cols).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
    }
}
