//! Synthetic benchmark, evaluation, ablation grid and command-line front end.

pub mod ablation;
pub mod cli;
pub mod data;
pub mod pipeline;

pub use ablation::{run_ablation, AblationReport, SweepRow, Variant};
pub use data::{
    gen_benchmark, read_examples, write_examples, BenchExample, BenchSplits, DataConfig, Task, HIGHER, LOWER,
};
pub use pipeline::{prepare, run, train_and_evaluate, BenchConfig, Prepared, RunOutput};

use serde::{Deserialize, Serialize};

use crate::encoder::{evaluate_model, Example, IthModel};
use crate::error::{Error, Result};
use crate::imagination::SpanStatus;

/// Anything that labels examples.
pub trait Predictor {
    fn predict(&self, examples: &[Example]) -> Result<Vec<usize>>;
}

impl Predictor for IthModel {
    fn predict(&self, examples: &[Example]) -> Result<Vec<usize>> {
        Ok(evaluate_model(self, examples)?.predictions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub prediction: usize,
    pub label: usize,
    pub span_statuses: Vec<SpanStatus>,
    pub trial_scores: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub records: Vec<ExampleRecord>,
}

/// Accuracy of `predictor` on `examples` with one record per example.
pub fn evaluate(predictor: &dyn Predictor, examples: &[Example]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let preds = predictor.predict(examples)?;
    if preds.len() != examples.len() {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: vec![preds.len()],
            rhs: vec![examples.len()],
        });
    }
    let records: Vec<ExampleRecord> = examples
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(index, (e, prediction))| ExampleRecord {
            index,
            prediction,
            label: e.label,
            span_statuses: e.imagination.spans.iter().map(|s| s.status).collect(),
            trial_scores: e.imagination.spans.iter().map(|s| s.trial_scores.clone()).collect(),
        })
        .collect();
    let correct = records.iter().filter(|r| r.prediction == r.label).count();
    Ok(EvalReport {
        accuracy: correct as f64 / records.len() as f64,
        records,
    })
}
