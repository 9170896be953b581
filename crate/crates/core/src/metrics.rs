//! Regression metrics, EF-bin confusion and report export.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper edges of the clinical EF bins; each bin is closed above.
pub const BIN_EDGES: [f64; 4] = [30.0, 40.0, 55.0, 100.0];

pub fn bin_ef(ef: f64) -> Result<usize> {
    bin_with(ef, &BIN_EDGES)
}

/// Bins `ef` into `(0, e0], (e0, e1], ...` with the last bin open at 100.
pub fn bin_with(ef: f64, edges: &[f64]) -> Result<usize> {
    if !(ef > 0.0 && ef < 100.0) {
        return Err(Error::LabelError(format!("EF {ef} outside (0, 100)")));
    }
    edges
        .iter()
        .position(|&e| ef <= e)
        .ok_or_else(|| Error::LabelError(format!("EF {ef} above the last bin edge")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the targets have zero variance.
    pub r2: Option<f64>,
    pub bin_edges: Vec<f64>,
    /// Rows are ground-truth bins, columns predicted bins.
    pub confusion: Vec<Vec<usize>>,
    pub pairs: Vec<(f64, f64)>,
}

fn errors(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::ShapeMismatch("no samples".into()));
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(g, p)| (g - p).abs()).sum::<f64>() / n;
    let mse = pairs.iter().map(|(g, p)| (g - p) * (g - p)).sum::<f64>() / n;
    Ok((mae, mse.sqrt()))
}

/// Coefficient of determination about the mean of the given targets.
pub fn r_squared(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::DegenerateTargets);
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|(g, _)| g).sum::<f64>() / n;
    let sst: f64 = pairs.iter().map(|(g, _)| (g - mean) * (g - mean)).sum();
    if sst == 0.0 {
        return Err(Error::DegenerateTargets);
    }
    let sse: f64 = pairs.iter().map(|(g, p)| (g - p) * (g - p)).sum();
    Ok(1.0 - sse / sst)
}

/// Computes every metric; fails with `DegenerateTargets` when R² is
/// undefined. Use [`summarize`] to get MAE and RMSE regardless.
pub fn compute_metrics(pairs: &[(f64, f64)]) -> Result<EvalSummary> {
    let s = summarize(pairs)?;
    if s.r2.is_none() {
        return Err(Error::DegenerateTargets);
    }
    Ok(s)
}

pub fn summarize(pairs: &[(f64, f64)]) -> Result<EvalSummary> {
    let (mae, rmse) = errors(pairs)?;
    let r2 = match r_squared(pairs) {
        Ok(r) => Some(r),
        Err(Error::DegenerateTargets) => None,
        Err(e) => return Err(e),
    };
    let k = BIN_EDGES.len();
    let mut confusion = vec![vec![0; k]; k];
    for &(g, p) in pairs {
        // Predictions are clamped into the open EF range before binning.
        let pb = bin_ef(p.clamp(1e-9, 100.0 - 1e-9))?;
        confusion[bin_ef(g)?][pb] += 1;
    }
    Ok(EvalSummary {
        n: pairs.len(),
        mae,
        rmse,
        r2,
        bin_edges: BIN_EDGES.to_vec(),
        confusion,
        pairs: pairs.to_vec(),
    })
}

fn bin_label(edges: &[f64], i: usize) -> String {
    let lo = if i == 0 { 0.0 } else { edges[i - 1] };
    format!("({lo},{}]", edges[i])
}

impl EvalSummary {
    pub fn report(&self) -> String {
        let mut s = String::new();
        writeln!(s, "n     {}", self.n).unwrap();
        writeln!(s, "MAE   {:.4}", self.mae).unwrap();
        writeln!(s, "RMSE  {:.4}", self.rmse).unwrap();
        match self.r2 {
            Some(r) => writeln!(s, "R2    {r:.4}").unwrap(),
            None => writeln!(s, "R2    undefined (zero target variance)").unwrap(),
        }
        writeln!(s, "confusion (rows: reference bin, columns: predicted bin)").unwrap();
        let labels: Vec<String> = (0..self.bin_edges.len())
            .map(|i| bin_label(&self.bin_edges, i))
            .collect();
        write!(s, "{:>12}", "").unwrap();
        for l in &labels {
            write!(s, "{l:>12}").unwrap();
        }
        writeln!(s).unwrap();
        for (l, row) in labels.iter().zip(&self.confusion) {
            write!(s, "{l:>12}").unwrap();
            for c in row {
                write!(s, "{c:>12}").unwrap();
            }
            writeln!(s).unwrap();
        }
        s
    }

    pub fn write_pairs(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "gt,pred")?;
        for (g, p) in &self.pairs {
            writeln!(w, "{g},{p}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let s = compute_metrics(&[(40.0, 50.0), (60.0, 50.0)]).unwrap();
        assert_eq!((s.mae, s.rmse, s.r2), (10.0, 10.0, Some(0.0)));
    }

    #[test]
    fn perfect_fit() {
        let s = compute_metrics(&[(20.0, 20.0), (70.0, 70.0), (45.0, 45.0)]).unwrap();
        assert_eq!((s.mae, s.rmse, s.r2), (0.0, 0.0, Some(1.0)));
        assert_eq!(s.confusion[0][0] + s.confusion[2][2] + s.confusion[3][3], 3);
    }

    #[test]
    fn zero_variance() {
        assert_eq!(
            compute_metrics(&[(50.0, 10.0), (50.0, 60.0)]),
            Err(Error::DegenerateTargets)
        );
        let s = summarize(&[(50.0, 10.0), (50.0, 60.0)]).unwrap();
        assert_eq!(s.r2, None);
        assert_eq!(s.mae, 25.0);
    }

    #[test]
    fn bins() {
        assert_eq!(bin_ef(30.0), Ok(0));
        assert_eq!(bin_ef(40.0), Ok(1));
        assert_eq!(bin_ef(54.9), Ok(2));
        assert_eq!(bin_ef(55.1), Ok(3));
        assert!(bin_ef(0.0).is_err());
        assert!(bin_ef(100.0).is_err());
    }

    #[test]
    fn report_mentions_metrics() {
        let s = summarize(&[(20.0, 25.0), (60.0, 50.0)]).unwrap();
        let r = s.report();
        assert!(r.contains("MAE") && r.contains("(55,100]"));
        let mut buf = Vec::new();
        s.write_pairs(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "gt,pred\n20,25\n60,50\n");
    }
}
