use crate::error::{Error, Result};

use super::PartLabeledCloud;

/// Greedy max-min farthest-point sampling.
///
/// The first pick is `start`; each later pick maximizes the squared distance
/// to the selected set. Ties go to the lowest index.
pub fn farthest_point_sample(cloud: &PartLabeledCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    farthest_point_sample_points(&cloud.points, m, start)
}

fn farthest_point_sample_points(
    points: &[[f64; 3]],
    m: usize,
    start: usize,
) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("cannot select {m} of {n} points")));
    }
    if start >= n {
        return Err(Error::invalid(format!("start index {start} out of range for {n} points")));
    }

    let mut selected = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..m {
        selected.push(current);
        min_d2[current] = f64::NEG_INFINITY;
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = &mut min_d2[i];
            if *d == f64::NEG_INFINITY {
                continue;
            }
            let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            if d2 < *d {
                *d = d2;
            }
            if *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f64; 3]>) -> PartLabeledCloud {
        let n = points.len();
        PartLabeledCloud::new("test", 0, points, vec![0; n], vec!["p".into()]).unwrap()
    }

    #[test]
    fn square_diagonal() {
        let c = cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        let s = farthest_point_sample(&c, 2, 0).unwrap();
        assert_eq!(s, vec![0, 3]);
    }

    #[test]
    fn exhaustion_returns_permutation() {
        let c = cloud((0..10).map(|i| [i as f64, 0.0, 0.0]).collect());
        let mut s = farthest_point_sample(&c, 10, 4).unwrap();
        assert_eq!(s[0], 4);
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn duplicates_never_reselected() {
        let c = cloud(vec![[0.0; 3]; 5]);
        let s = farthest_point_sample(&c, 5, 2).unwrap();
        assert_eq!(s, vec![2, 0, 1, 3, 4]);
    }

    #[test]
    fn rejects_bad_counts() {
        let c = cloud(vec![[0.0; 3]; 3]);
        assert!(farthest_point_sample(&c, 4, 0).is_err());
        assert!(farthest_point_sample(&c, 0, 0).is_err());
        assert!(farthest_point_sample(&c, 2, 3).is_err());
    }
}
