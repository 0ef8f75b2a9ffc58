use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auc, logloss, rela_impr};
use crate::data::{ColdnessConfig, Stage, UserLog};
use crate::episodes::MetaTestSuite;
use crate::error::{Error, Result};
use crate::meta::ColdStartModel;

/// Metrics of one method at one support size, pooled over all test users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub support_size: usize,
    pub n_users: usize,
    pub n_queries: usize,
    pub logloss: f64,
    /// `None` when the pooled queries hold a single class.
    pub auc: Option<f64>,
    /// Across-seed standard deviations; zero for a single seed.
    pub logloss_std: f64,
    pub auc_std: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: Stage,
    pub label: String,
    pub sizes: Vec<usize>,
    pub logloss: f64,
    pub auc: Option<f64>,
    /// Sizes left out of the AUC mean because their AUC was undefined.
    pub undefined_auc_sizes: Vec<usize>,
    pub rela_impr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub method: String,
    pub base_method: Option<String>,
    pub stages: Vec<StageRow>,
    pub rows: Vec<MetricRow>,
}

/// Per-size pooled Logloss and AUC of `model` on every task of `suite`.
pub fn evaluate_suite(model: &ColdStartModel<'_>, logs: &[UserLog], suite: &MetaTestSuite) -> Result<Vec<MetricRow>> {
    let method = model.method_name();
    let mut rows = Vec::with_capacity(suite.tasks.len());
    for (&size, tasks) in &suite.tasks {
        let per_user: Vec<(Vec<u8>, Vec<f64>)> = tasks
            .par_iter()
            .map(|t| {
                let log = logs
                    .get(t.log)
                    .ok_or_else(|| Error::InvalidData(format!("task refers to missing log {}", t.log)))?;
                let support = t.task.support_instances(log);
                let query = t.task.query_instances(log);
                let probs = model.predict(&support, &query, true)?;
                Ok((query.iter().map(|x| x.label).collect(), probs))
            })
            .collect::<Result<_>>()?;
        let mut labels = Vec::new();
        let mut scores = Vec::new();
        for (l, s) in per_user {
            labels.extend(l);
            scores.extend(s);
        }
        if labels.is_empty() {
            continue;
        }
        let auc = match auc(&labels, &scores) {
            Ok(a) => Some(a),
            Err(Error::Undefined(msg)) => {
                log::warn!("{method} size {size}: {msg}");
                None
            }
            Err(e) => return Err(e),
        };
        rows.push(MetricRow {
            method: method.clone(),
            support_size: size,
            n_users: tasks.len(),
            n_queries: labels.len(),
            logloss: logloss(&labels, &scores),
            auc,
            logloss_std: 0.0,
            auc_std: 0.0,
            seeds: 1,
        });
    }
    Ok(rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Averages per-size rows across seeds; every run must cover the same sizes.
pub fn combine_seeds(runs: &[Vec<MetricRow>]) -> Result<Vec<MetricRow>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidData("no runs to combine".into()))?;
    let mut out = Vec::with_capacity(first.len());
    for (i, row) in first.iter().enumerate() {
        let same: Vec<&MetricRow> = runs
            .iter()
            .map(|r| {
                r.get(i)
                    .filter(|x| x.support_size == row.support_size)
                    .ok_or_else(|| Error::InvalidData("runs cover different support sizes".into()))
            })
            .collect::<Result<_>>()?;
        let (ll, ll_std) = mean_std(&same.iter().map(|r| r.logloss).collect::<Vec<_>>());
        let aucs: Vec<f64> = same.iter().filter_map(|r| r.auc).collect();
        let (auc, auc_std) = if aucs.is_empty() {
            (None, 0.0)
        } else {
            let (m, s) = mean_std(&aucs);
            (Some(m), s)
        };
        out.push(MetricRow {
            method: row.method.clone(),
            support_size: row.support_size,
            n_users: row.n_users,
            n_queries: row.n_queries,
            logloss: ll,
            auc,
            logloss_std: ll_std,
            auc_std,
            seeds: runs.len(),
        });
    }
    Ok(out)
}

impl StageReport {
    /// Stage means over per-size rows; RelaImpr is taken against the
    /// matching stage of `base` when given.
    pub fn from_rows(
        rows: Vec<MetricRow>,
        coldness: &ColdnessConfig,
        base: Option<&StageReport>,
    ) -> Result<Self> {
        let method = rows.first().map(|r| r.method.clone()).unwrap_or_default();
        let mut grouped: BTreeMap<Stage, Vec<&MetricRow>> = BTreeMap::new();
        for r in &rows {
            if let Some(stage) = coldness.stage_of(r.support_size) {
                grouped.entry(stage).or_default().push(r);
            }
        }
        let mut stages = Vec::new();
        for (stage, members) in grouped {
            let logloss = members.iter().map(|r| r.logloss).sum::<f64>() / members.len() as f64;
            let defined: Vec<f64> = members.iter().filter_map(|r| r.auc).collect();
            let auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            let rela_impr = match (auc, base.and_then(|b| b.stage(stage)).and_then(|s| s.auc)) {
                (Some(t), Some(b)) => rela_impr(t, b).ok(),
                _ => None,
            };
            stages.push(StageRow {
                stage,
                label: stage.label().to_string(),
                sizes: members.iter().map(|r| r.support_size).collect(),
                logloss,
                auc,
                undefined_auc_sizes: members.iter().filter(|r| r.auc.is_none()).map(|r| r.support_size).collect(),
                rela_impr,
            });
        }
        Ok(Self {
            method,
            base_method: base.map(|b| b.method.clone()),
            stages,
            rows,
        })
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRow> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// JSON report with an arbitrary config echo attached.
    pub fn write_json(&self, path: &Path, config_echo: &serde_json::Value) -> Result<()> {
        let doc = serde_json::json!({ "config": config_echo, "report": self });
        let bytes = serde_json::to_vec_pretty(&doc).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut doc: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::Format(e.to_string()))?;
        serde_json::from_value(doc["report"].take()).map_err(|e| Error::Format(e.to_string()))
    }

    /// One line per support size followed by one per stage.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut s = String::from("kind,method,key,n_users,n_queries,logloss,logloss_std,auc,auc_std,rela_impr\n");
        for r in &self.rows {
            s.push_str(&format!(
                "size,{},{},{},{},{},{},{},{},\n",
                r.method,
                r.support_size,
                r.n_users,
                r.n_queries,
                r.logloss,
                r.logloss_std,
                opt(r.auc),
                r.auc_std
            ));
        }
        for st in &self.stages {
            s.push_str(&format!(
                "stage,{},{},,,{},,{},,{}\n",
                self.method,
                st.label,
                st.logloss,
                opt(st.auc),
                opt(st.rela_impr)
            ));
        }
        s
    }
}
