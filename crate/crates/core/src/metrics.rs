//! Agreement and error metrics: quadratic weighted kappa over rating
//! categories, RMSE over point scores, and a per-competency report.

use std::fmt::Write as _;

use crate::corpus::{Corpus, ScoreVector, COMPETENCIES, MAX_SCORE, SCORE_GRID, SCORE_STEP};
use crate::error::{AesError, Result};
use crate::model::{forward, ModelConfig, Mode};
use crate::tensor::{ParamStore, Scalar};
use crate::tokenizer::{encode_pair, Vocab};
use crate::training::denormalize;

/// Rating categories of a summed five-competency score: 0, 40, ..., 1000.
pub fn total_grid() -> Vec<u32> {
    (0..=COMPETENCIES as u32 * MAX_SCORE)
        .step_by(SCORE_STEP as usize)
        .collect()
}

/// Clamps to [0, 200] and rounds to the nearest multiple of 40, ties up.
pub fn bin_score(raw: f64) -> Result<u32> {
    if !raw.is_finite() {
        return Err(AesError::NonFiniteInput(raw));
    }
    let clamped = raw.clamp(0.0, MAX_SCORE as f64);
    let step = SCORE_STEP as f64;
    Ok(((clamped / step + 0.5).floor() * step) as u32)
}

/// Observed, expected and weight matrices of a two-rater agreement table.
#[derive(Debug, Clone, PartialEq)]
pub struct QwkTable {
    pub categories: Vec<u32>,
    pub observed: Vec<Vec<f64>>,
    pub expected: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl QwkTable {
    pub fn build(a: &[u32], b: &[u32], categories: &[u32]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(AesError::LengthMismatch {
                left: a.len(),
                right: b.len(),
            });
        }
        if a.is_empty() {
            return Err(AesError::EmptyInput);
        }
        let k = categories.len();
        let index = |v: u32| {
            categories
                .iter()
                .position(|&c| c == v)
                .ok_or(AesError::ValueOffGrid { value: v as i64 })
        };
        let mut observed = vec![vec![0.0; k]; k];
        for (&x, &y) in a.iter().zip(b) {
            observed[index(x)?][index(y)?] += 1.0;
        }
        let n = a.len() as f64;
        let rows: Vec<f64> = observed.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..k).map(|j| observed.iter().map(|r| r[j]).sum()).collect();
        let expected = rows
            .iter()
            .map(|&r| cols.iter().map(|&c| r * c / n).collect())
            .collect();
        let denom = ((k.max(2) - 1) * (k.max(2) - 1)) as f64;
        let weights = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let d = i as f64 - j as f64;
                        d * d / denom
                    })
                    .collect()
            })
            .collect();
        Ok(QwkTable {
            categories: categories.to_vec(),
            observed,
            expected,
            weights,
        })
    }

    /// `1 − Σw·o / Σw·e`; when `Σw·e = 0` the result is 1 for zero observed
    /// disagreement and 0 otherwise.
    pub fn kappa(&self) -> f64 {
        let weighted = |m: &Vec<Vec<f64>>| -> f64 {
            m.iter()
                .zip(&self.weights)
                .flat_map(|(mr, wr)| mr.iter().zip(wr).map(|(x, w)| x * w))
                .sum()
        };
        let num = weighted(&self.observed);
        let den = weighted(&self.expected);
        if den == 0.0 {
            return if num == 0.0 { 1.0 } else { 0.0 };
        }
        1.0 - num / den
    }
}

pub fn qwk(a: &[u32], b: &[u32], categories: &[u32]) -> Result<f64> {
    Ok(QwkTable::build(a, b, categories)?.kappa())
}

pub fn rmse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(AesError::LengthMismatch {
            left: actual.len(),
            right: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(AesError::EmptyInput);
    }
    let sse: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    Ok((sse / actual.len() as f64).sqrt())
}

/// QWK and RMSE for each competency and for the total score.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub qwk: [f64; COMPETENCIES],
    pub qwk_total: f64,
    pub rmse: [f64; COMPETENCIES],
    pub rmse_total: f64,
    pub n: usize,
}

impl MetricsReport {
    /// `predicted` holds raw point-scale predictions, one row per essay.
    ///
    /// RMSE uses the raw predictions; QWK uses grid-binned predictions. The
    /// total QWK compares summed binned predictions with human totals on the
    /// 26-value total grid, and the total RMSE compares summed raw
    /// predictions with human totals.
    pub fn from_predictions(human: &[ScoreVector], predicted: &[[f64; COMPETENCIES]]) -> Result<Self> {
        if human.len() != predicted.len() {
            return Err(AesError::LengthMismatch {
                left: human.len(),
                right: predicted.len(),
            });
        }
        if human.is_empty() {
            return Err(AesError::EmptyInput);
        }
        let binned: Vec<[u32; COMPETENCIES]> = predicted
            .iter()
            .map(|row| {
                let mut out = [0; COMPETENCIES];
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = bin_score(x)?;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;

        let mut qwk_c = [0.0; COMPETENCIES];
        let mut rmse_c = [0.0; COMPETENCIES];
        for k in 0..COMPETENCIES {
            let truth: Vec<u32> = human.iter().map(|s| s.get(k)).collect();
            let pred_bin: Vec<u32> = binned.iter().map(|r| r[k]).collect();
            qwk_c[k] = qwk(&truth, &pred_bin, &SCORE_GRID)?;
            let truth_f: Vec<f64> = truth.iter().map(|&x| x as f64).collect();
            let pred_raw: Vec<f64> = predicted.iter().map(|r| r[k]).collect();
            rmse_c[k] = rmse(&truth_f, &pred_raw)?;
        }
        let truth_total: Vec<u32> = human.iter().map(ScoreVector::total).collect();
        let binned_total: Vec<u32> = binned.iter().map(|r| r.iter().sum()).collect();
        let raw_total: Vec<f64> = predicted.iter().map(|r| r.iter().sum()).collect();
        let truth_total_f: Vec<f64> = truth_total.iter().map(|&x| x as f64).collect();
        Ok(MetricsReport {
            qwk: qwk_c,
            qwk_total: qwk(&truth_total, &binned_total, &total_grid())?,
            rmse: rmse_c,
            rmse_total: rmse(&truth_total_f, &raw_total)?,
            n: human.len(),
        })
    }

    /// `metric,c1,c2,c3,c4,c5,total` with one row for QWK and one for RMSE.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,c1,c2,c3,c4,c5,total\n");
        for (name, per, total) in [
            ("qwk", &self.qwk, self.qwk_total),
            ("rmse", &self.rmse, self.rmse_total),
        ] {
            out.push_str(name);
            for v in per.iter().chain(std::iter::once(&total)) {
                write!(out, ",{v:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width table with C1..C5 and Total columns.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "n = {}", self.n).unwrap();
        writeln!(
            out,
            "{:<8}{:>9}{:>9}{:>9}{:>9}{:>9}{:>10}",
            "Metric", "C1", "C2", "C3", "C4", "C5", "Total"
        )
        .unwrap();
        for (name, per, total) in [
            ("QWK", &self.qwk, self.qwk_total),
            ("RMSE", &self.rmse, self.rmse_total),
        ] {
            write!(out, "{name:<8}").unwrap();
            for v in per {
                write!(out, "{v:>9.2}").unwrap();
            }
            writeln!(out, "{total:>10.2}").unwrap();
        }
        out
    }
}

/// Eval-mode predictions in points, one row per record.
pub fn predict_points<T: Scalar>(
    params: &ParamStore<T>,
    vocab: &Vocab,
    cfg: &ModelConfig,
    data: &Corpus,
    max_len: usize,
) -> Result<Vec<[f64; COMPETENCIES]>> {
    let inputs = data
        .records()
        .iter()
        .map(|r| {
            let (a, b) = r.compose_pair();
            encode_pair(a, b, vocab, max_len)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = inputs.iter().collect();
    let out = forward(params, cfg, &refs, Mode::Eval, 0)?;
    Ok(out
        .predictions
        .iter()
        .map(|row| denormalize(&row.map(T::as_f64)))
        .collect())
}

pub fn evaluate<T: Scalar>(
    params: &ParamStore<T>,
    vocab: &Vocab,
    cfg: &ModelConfig,
    data: &Corpus,
    max_len: usize,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(AesError::EmptyCorpus);
    }
    let predicted = predict_points(params, vocab, cfg, data, max_len)?;
    let human: Vec<ScoreVector> = data.records().iter().map(|r| r.scores).collect();
    MetricsReport::from_predictions(&human, &predicted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_score_examples() {
        assert_eq!(bin_score(119.0).unwrap(), 120);
        assert_eq!(bin_score(100.0).unwrap(), 120);
        assert_eq!(bin_score(99.999).unwrap(), 80);
        assert_eq!(bin_score(-5.0).unwrap(), 0);
        assert_eq!(bin_score(250.0).unwrap(), 200);
        assert!(matches!(bin_score(f64::NAN), Err(AesError::NonFiniteInput(_))));
        assert!(bin_score(f64::INFINITY).is_err());
    }

    #[test]
    fn qwk_examples() {
        let g = SCORE_GRID;
        assert_eq!(qwk(&[0, 40, 80], &[0, 40, 80], &g).unwrap(), 1.0);
        assert_eq!(qwk(&[0, 200], &[200, 0], &g).unwrap(), -1.0);
        assert_eq!(qwk(&[120, 120], &[120, 120], &g).unwrap(), 1.0);
        // constant disagreeing raters: zero expected disagreement
        assert_eq!(qwk(&[120, 120], &[80, 80], &g).unwrap(), 0.0);
    }

    #[test]
    fn qwk_table_bookkeeping() {
        let t = QwkTable::build(&[0, 40, 40, 200], &[0, 80, 40, 160], &SCORE_GRID).unwrap();
        let so: f64 = t.observed.iter().flatten().sum();
        let se: f64 = t.expected.iter().flatten().sum();
        assert_eq!(so, 4.0);
        assert!((se - so).abs() < 1e-9);
        for i in 0..6 {
            assert_eq!(t.weights[i][i], 0.0);
            for j in 0..6 {
                assert_eq!(t.weights[i][j], t.weights[j][i]);
            }
        }
        assert_eq!(t.weights[0][5], 1.0);
    }

    #[test]
    fn qwk_errors() {
        assert!(matches!(
            qwk(&[0], &[0, 40], &SCORE_GRID),
            Err(AesError::LengthMismatch { left: 1, right: 2 })
        ));
        assert!(matches!(
            qwk(&[0, 50], &[0, 40], &SCORE_GRID),
            Err(AesError::ValueOffGrid { value: 50 })
        ));
        assert!(matches!(qwk(&[], &[], &SCORE_GRID), Err(AesError::EmptyInput)));
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 40.0], &[40.0, 0.0]).unwrap(), 40.0);
        let a = [3.0, 7.0, 1.0];
        let b = [2.0, 9.0, 1.5];
        let r = rmse(&a, &b).unwrap();
        let a3: Vec<f64> = a.iter().map(|x| x * 3.0).collect();
        let b3: Vec<f64> = b.iter().map(|x| x * 3.0).collect();
        assert!((rmse(&a3, &b3).unwrap() - 3.0 * r).abs() < 1e-12);
        assert!(matches!(rmse(&[], &[]), Err(AesError::EmptyInput)));
        assert!(rmse(&[1.0], &[]).is_err());
    }

    #[test]
    fn total_grid_has_26_values() {
        let g = total_grid();
        assert_eq!(g.len(), 26);
        assert_eq!((g[0], g[25]), (0, 1000));
    }

    #[test]
    fn report_for_exact_predictions() {
        let human: Vec<ScoreVector> = [[0, 40, 80, 120, 160], [200, 160, 120, 80, 40], [120; 5]]
            .iter()
            .map(|s| ScoreVector::new(*s).unwrap())
            .collect();
        let pred: Vec<[f64; 5]> = human.iter().map(|s| s.as_array().map(|x| x as f64)).collect();
        let r = MetricsReport::from_predictions(&human, &pred).unwrap();
        assert_eq!(r.qwk, [1.0; 5]);
        assert_eq!(r.qwk_total, 1.0);
        assert_eq!(r.rmse, [0.0; 5]);
        assert_eq!(r.rmse_total, 0.0);
        assert_eq!(r.n, 3);
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,c1,c2,c3,c4,c5,total\nqwk,1.000000"));
        assert!(r.to_table().contains("C1"));
        assert!(r.to_table().contains("Total"));
    }
}
