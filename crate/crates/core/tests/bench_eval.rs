mod common;

use ith::bench::pipeline::imagine_split;
use ith::bench::{evaluate, prepare, BenchConfig, Predictor, HIGHER};
use ith::encoder::Example;
use ith::Result;
use rand::seq::SliceRandom;

struct Oracle;

impl Predictor for Oracle {
    fn predict(&self, examples: &[Example]) -> Result<Vec<usize>> {
        Ok(examples.iter().map(|e| e.label).collect())
    }
}

struct Constant(usize);

impl Predictor for Constant {
    fn predict(&self, examples: &[Example]) -> Result<Vec<usize>> {
        Ok(vec![self.0; examples.len()])
    }
}

/// Predicts from the token ids alone, so it is independent of example order.
struct Parity;

impl Predictor for Parity {
    fn predict(&self, examples: &[Example]) -> Result<Vec<usize>> {
        Ok(examples
            .iter()
            .map(|e| e.tokens.ids().iter().sum::<usize>() % 2)
            .collect())
    }
}

fn test_split() -> Vec<Example> {
    let cfg = BenchConfig {
        seed: 4,
        n_train: 200,
        n_test: 600,
        ..BenchConfig::default()
    };
    let prep = prepare(&cfg).unwrap();
    imagine_split(&cfg, &prep.vocab, None, &prep.splits.test, "test").unwrap()
}

#[test]
fn perfect_and_constant_predictors() {
    let test = test_split();
    let r = evaluate(&Oracle, &test).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.records.len(), test.len());
    for c in 0..2 {
        let acc = evaluate(&Constant(c), &test).unwrap().accuracy;
        assert!((acc - 0.5).abs() <= 0.02, "constant {c}: {acc}");
    }
    let want = test.iter().filter(|e| e.label == HIGHER).count() as f64 / test.len() as f64;
    assert_eq!(evaluate(&Constant(HIGHER), &test).unwrap().accuracy, want);
}

#[test]
fn accuracy_ignores_example_order() {
    let mut test = test_split();
    let acc = evaluate(&Parity, &test).unwrap().accuracy;
    let mut r = common::rng(7);
    for _ in 0..5 {
        test.shuffle(&mut r);
        assert_eq!(evaluate(&Parity, &test).unwrap().accuracy, acc);
    }
}

#[test]
fn empty_split_and_short_predictions_are_errors() {
    assert!(evaluate(&Oracle, &[]).is_err());
    struct Short;
    impl Predictor for Short {
        fn predict(&self, _: &[Example]) -> Result<Vec<usize>> {
            Ok(vec![0])
        }
    }
    assert!(evaluate(&Short, &test_split()).is_err());
}
