//! Reliable data sampling: confidence ranking, time-reversal agreement and
//! their intersection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliabilitySets {
    pub s_ppi: Vec<usize>,
    pub s_trci: Vec<usize>,
    pub s_rds: Vec<usize>,
    pub k: usize,
    pub batch_size: usize,
}

impl ReliabilitySets {
    /// Runs both selectors; a disabled selector keeps the whole batch.
    pub fn compute(
        max_probs: &[f64],
        preds: &[usize],
        reversed_preds: Option<&[usize]>,
        k: Option<usize>,
    ) -> Result<Self> {
        let b = max_probs.len();
        if preds.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions for a batch of {b}",
                preds.len()
            )));
        }
        let all: Vec<usize> = (0..b).collect();
        let (s_ppi, k) = match k {
            Some(k) => (ppi_select(max_probs, k)?, k),
            None => (all.clone(), b),
        };
        let s_trci = match reversed_preds {
            Some(r) => trci_select(preds, r)?,
            None => all,
        };
        let s_rds = rds_intersect(&s_ppi, &s_trci);
        Ok(Self {
            s_ppi,
            s_trci,
            s_rds,
            k,
            batch_size: b,
        })
    }
}

/// Indices of the `k` most confident samples in ascending order. Ties go to
/// the lower index.
pub fn ppi_select(max_probs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    if let Some(p) = max_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Validation(format!("probability {p} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..max_probs.len()).collect();
    order.sort_by(|&a, &b| max_probs[b].total_cmp(&max_probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

pub fn trci_select(preds: &[usize], reversed_preds: &[usize]) -> Result<Vec<usize>> {
    if preds.len() != reversed_preds.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} reversed predictions",
            preds.len(),
            reversed_preds.len()
        )));
    }
    Ok(preds
        .iter()
        .zip(reversed_preds)
        .enumerate()
        .filter(|(_, (a, b))| a == b)
        .map(|(i, _)| i)
        .collect())
}

pub fn rds_intersect(s_ppi: &[usize], s_trci: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = s_ppi
        .iter()
        .copied()
        .filter(|i| s_trci.contains(i))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppi_examples() {
        assert_eq!(ppi_select(&[0.9, 0.1, 0.5, 0.7], 2).unwrap(), [0, 3]);
        assert_eq!(ppi_select(&[0.9, 0.1, 0.5, 0.7], 4).unwrap(), [0, 1, 2, 3]);
        assert_eq!(ppi_select(&[0.9, 0.1], 5).unwrap(), [0, 1]);
        assert_eq!(ppi_select(&[0.5, 0.5, 0.5], 1).unwrap(), [0]);
        assert!(ppi_select(&[0.5], 0).is_err());
        assert!(ppi_select(&[1.5], 1).is_err());
    }

    #[test]
    fn trci_examples() {
        assert_eq!(trci_select(&[0, 1, 2], &[0, 2, 2]).unwrap(), [0, 2]);
        assert_eq!(trci_select(&[4, 5], &[4, 5]).unwrap(), [0, 1]);
        assert!(trci_select(&[0, 1], &[1, 0]).unwrap().is_empty());
        assert!(trci_select(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn rds_examples() {
        assert_eq!(rds_intersect(&[0, 3], &[0, 2]), [0]);
        assert_eq!(rds_intersect(&[1, 4], &[1, 4]), [1, 4]);
        assert!(rds_intersect(&[1, 4], &[]).is_empty());
    }

    #[test]
    fn disabled_selectors_keep_everything() {
        let s = ReliabilitySets::compute(&[0.3, 0.9], &[0, 1], None, None).unwrap();
        assert_eq!(s.s_rds, [0, 1]);
        let s = ReliabilitySets::compute(&[0.3, 0.9], &[0, 1], Some(&[1, 1]), Some(2)).unwrap();
        assert_eq!((s.s_ppi, s.s_trci, s.s_rds), (vec![0, 1], vec![1], vec![1]));
    }
}
