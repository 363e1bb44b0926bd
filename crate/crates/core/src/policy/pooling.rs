//! Single-query attention pooling over a feature field.

use crate::error::{Error, Result};
use crate::field::FeatureField;
use crate::mat::{dot, softmax_in_place};

/// `softmax(field · query / (√n · temperature))` over the rows.
pub fn attention_weights(field: &FeatureField, part_query: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if field.is_empty() {
        return Err(Error::invalid("cannot pool an empty field"));
    }
    if part_query.len() != field.dim() {
        return Err(Error::invalid(format!(
            "query has dim {}, field has dim {}",
            part_query.len(),
            field.dim()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("pooling temperature must be positive, got {temperature}")));
    }
    let scale = 1.0 / ((field.dim() as f64).sqrt() * temperature);
    let mut w: Vec<f64> = field.values.iter_rows().map(|r| dot(r, part_query) * scale).collect();
    softmax_in_place(&mut w);
    Ok(w)
}

/// Attention-weighted sum of the field rows.
pub fn pool_with_part_query(field: &FeatureField, part_query: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let w = attention_weights(field, part_query, temperature)?;
    Ok(weighted_rows(field.values.iter_rows(), &w, field.dim()))
}

/// Same weights applied to the point positions.
pub fn pool_positions(points: &[[f64; 3]], weights: &[f64]) -> Result<[f64; 3]> {
    if points.len() != weights.len() {
        return Err(Error::invalid(format!("{} points but {} weights", points.len(), weights.len())));
    }
    let v = weighted_rows(points.iter().map(|p| p.as_slice()), weights, 3);
    Ok([v[0], v[1], v[2]])
}

fn weighted_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, w: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (row, &wi) in rows.zip(w) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += wi * v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;

    fn field(rows: &[[f64; 2]]) -> FeatureField {
        FeatureField::from_unit_rows(Mat::from_rows(rows)).unwrap()
    }

    #[test]
    fn identical_rows_pool_to_that_row() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let f = field(&[[s, s]; 5]);
        let out = pool_with_part_query(&f, &[1.0, 0.0], 0.7).unwrap();
        assert!((out[0] - s).abs() < 1e-15 && (out[1] - s).abs() < 1e-15);
    }

    #[test]
    fn low_temperature_selects_best_row() {
        let f = field(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let out = pool_with_part_query(&f, &[0.0, 1.0], 1e-3).unwrap();
        assert!((out[0] - 0.0).abs() < 1e-3 && (out[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn permutation_invariant() {
        let f = field(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let g = field(&[[0.6, 0.8], [1.0, 0.0], [0.0, 1.0]]);
        let a = pool_with_part_query(&f, &[0.3, 0.7], 0.5).unwrap();
        let b = pool_with_part_query(&g, &[0.3, 0.7], 0.5).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = field(&[[1.0, 0.0]]);
        assert!(pool_with_part_query(&f, &[1.0], 1.0).is_err());
        assert!(pool_with_part_query(&f, &[1.0, 0.0], 0.0).is_err());
        let empty = FeatureField::from_unit_rows(Mat::zeros(0, 2)).unwrap();
        assert!(pool_with_part_query(&empty, &[1.0, 0.0], 1.0).is_err());
        assert!(pool_positions(&[[0.0; 3]], &[0.5, 0.5]).is_err());
    }
}
