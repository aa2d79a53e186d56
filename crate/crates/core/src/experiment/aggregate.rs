use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::finetune::RunRecord;

/// Which number of a record is aggregated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueField {
    #[default]
    TestMetric,
    BestMetric,
    ConvergenceEpoch,
    TrainableParams,
}

impl FromStr for ValueField {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test_metric" => Ok(ValueField::TestMetric),
            "best_metric" => Ok(ValueField::BestMetric),
            "convergence_epoch" => Ok(ValueField::ConvergenceEpoch),
            "trainable_params" | "trainable_param_count" => Ok(ValueField::TrainableParams),
            other => Err(config_err!("unknown value field `{other}`")),
        }
    }
}

impl ValueField {
    fn get(self, r: &RunRecord) -> Result<f64> {
        Ok(match self {
            ValueField::TestMetric => r
                .test_metric
                .ok_or_else(|| input_err!("record {} has no test metric", r.fingerprint))?,
            ValueField::BestMetric => r.best_metric,
            ValueField::ConvergenceEpoch => r.convergence_epoch as f64,
            ValueField::TrainableParams => r.trainable_param_count as f64,
        })
    }
}

/// Mean and sample standard deviation of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// `(field, value)` in `group_by` order.
    pub key: Vec<(String, String)>,
    pub n: usize,
    pub mean: f64,
    /// `n - 1` denominator; 0 for a single record.
    pub std: f64,
}

impl AggregateRow {
    pub fn get(&self, field: &str) -> Option<&str> {
        self.key.iter().find(|(k, _)| k == field).map(|(_, v)| v.as_str())
    }
}

fn field(r: &RunRecord, name: &str) -> Result<String> {
    match name {
        "seed" => Ok(r.seed.to_string()),
        "metric" => Ok(r.metric.clone()),
        _ => r
            .tags
            .get(name)
            .cloned()
            .ok_or_else(|| config_err!("record {} has no field `{name}`", r.fingerprint)),
    }
}

/// Numbers compare numerically, everything else lexically.
pub(crate) fn cmp_values(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    }
}

/// Groups records by the named fields and reports mean ± sample std of `value`.
pub fn aggregate(records: &[RunRecord], group_by: &[String], value: ValueField) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(input_err!("no records to aggregate"));
    }
    let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for r in records {
        let key = group_by.iter().map(|f| field(r, f)).collect::<Result<Vec<_>>>()?;
        groups.entry(key).or_default().push(value.get(r)?);
    }
    let mut rows: Vec<AggregateRow> = groups
        .into_iter()
        .map(|(key, vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = if n < 2 {
                log::warn!("group {key:?} has a single record; reporting std 0");
                0.0
            } else {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            AggregateRow { key: group_by.iter().cloned().zip(key).collect(), n, mean, std }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.key
            .iter()
            .zip(&b.key)
            .map(|((_, x), (_, y))| cmp_values(x, y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    });
    Ok(rows)
}

/// Tab-separated table: group fields, then `mean`, `std`, `n`.
pub fn render_table(rows: &[AggregateRow]) -> String {
    let mut out = String::new();
    if let Some(first) = rows.first() {
        for (k, _) in &first.key {
            out.push_str(k);
            out.push('\t');
        }
    }
    out.push_str("mean\tstd\tn\n");
    for r in rows {
        for (_, v) in &r.key {
            out.push_str(v);
            out.push('\t');
        }
        out.push_str(&format!("{}\t{}\t{}\n", r.mean, r.std, r.n));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(policy: &str, seed: u64, v: f64) -> RunRecord {
        let mut tags = BTreeMap::new();
        tags.insert("policy".to_string(), policy.to_string());
        RunRecord {
            fingerprint: format!("{policy}/{seed}/{v}"),
            seed,
            tags,
            metric: "mean_auc".into(),
            epochs: vec![],
            best_epoch: 1,
            best_metric: v,
            test_metric: Some(v),
            convergence_epoch: 1,
            trainable_param_count: 1,
            total_param_count: 1,
            deterministic: false,
        }
    }

    #[test]
    fn sample_std_example() {
        let r = vec![rec("e2e", 0, 64.22), rec("e2e", 1, 65.19), rec("e2e", 2, 66.16)];
        let a = aggregate(&r, &["policy".into()], ValueField::TestMetric).unwrap();
        assert_eq!(a.len(), 1);
        assert!((a[0].mean - 65.19).abs() < 1e-9);
        assert!((a[0].std - 0.97).abs() < 1e-9);
        assert_eq!(format!("{:.2}±{:.2}", a[0].mean, a[0].std), "65.19±0.97");
    }

    #[test]
    fn single_and_duplicated_records() {
        let a = aggregate(&[rec("x", 0, 0.7)], &["policy".into()], ValueField::TestMetric).unwrap();
        assert_eq!((a[0].mean, a[0].std, a[0].n), (0.7, 0.0, 1));
        let dup = vec![rec("x", 0, 0.7); 4];
        let a = aggregate(&dup, &["policy".into()], ValueField::TestMetric).unwrap();
        assert_eq!((a[0].mean, a[0].std), (0.7, 0.0));
    }

    #[test]
    fn errors_name_the_problem() {
        assert_eq!(aggregate(&[], &[], ValueField::TestMetric).unwrap_err().kind(), "input");
        let e = aggregate(&[rec("x", 0, 0.1)], &["size".into()], ValueField::TestMetric).unwrap_err();
        assert!(e.to_string().contains("`size`"));
    }

    #[test]
    fn rows_sort_numerically() {
        let mut r = vec![rec("a", 0, 0.1), rec("a", 1, 0.1)];
        r[0].tags.insert("size".into(), "1000".into());
        r[1].tags.insert("size".into(), "100".into());
        let a = aggregate(&r, &["size".into()], ValueField::TestMetric).unwrap();
        assert_eq!(a[0].get("size"), Some("100"));
        assert!(render_table(&a).starts_with("size\tmean\tstd\tn\n100\t"));
    }
}
