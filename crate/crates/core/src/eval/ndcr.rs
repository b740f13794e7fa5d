//! Distance to closest record. A synthetic row counts toward the training
//! side when its L1-nearest real row is a training row; equal distances
//! count as training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NdcrScore {
    pub dcr: f64,
    pub ndcr: f64,
}

fn min_l1(row: &[f64], table: &Tensor) -> f64 {
    (0..table.rows())
        .map(|i| row.iter().zip(table.row(i)).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

pub fn ndcr(synthetic: &Tensor, train: &Tensor, test: &Tensor) -> Result<NdcrScore> {
    let (ns, d) = synthetic.dims2("ndcr")?;
    if ns == 0 || train.rows() == 0 || test.rows() == 0 {
        return Err(Error::Eval("ndcr needs nonempty synthetic, train and test tables".into()));
    }
    if train.cols() != d || test.cols() != d {
        return Err(Error::shape("ndcr", train.shape(), test.shape()));
    }
    let near_train = par::map_indexed(ns, |i| {
        let row = synthetic.row(i);
        min_l1(row, train) <= min_l1(row, test)
    });
    let dcr = near_train.iter().filter(|&&b| b).count() as f64 / ns as f64;
    Ok(NdcrScore {
        dcr,
        ndcr: (dcr - 0.5).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copies_of_train() {
        let train = Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let test = Tensor::new(&[1, 2], vec![50.0, 50.0]).unwrap();
        let s = ndcr(&train, &train, &test).unwrap();
        assert_eq!((s.dcr, s.ndcr), (1.0, 0.5));
    }

    #[test]
    fn symmetric_population() {
        let train = Tensor::new(&[1, 1], vec![-1.0]).unwrap();
        let test = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let syn = Tensor::new(&[4, 1], vec![-2.0, -0.5, 0.5, 2.0]).unwrap();
        assert_eq!(ndcr(&syn, &train, &test).unwrap().ndcr, 0.0);
    }

    #[test]
    fn empty_rejected() {
        let t = Tensor::zeros(&[1, 2]);
        assert!(ndcr(&Tensor::zeros(&[0, 2]), &t, &t).is_err());
    }
}
