//! Model parameter blocks.

use nalgebra::{DVector, Matrix2, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All parameters of the cure-rate change-point joint model.
///
/// Random-effect ordering for the change-point group is `(ω, b0, b1, b2)`:
/// change point, intercept, pre-slope, post-slope. The stable group has
/// `(b0, b1)`: intercept and slope.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub stable_rate: f64,
    pub tte_coef: DVector<f64>,
    pub tte_sd: f64,
    pub re_mean: Vector4<f64>,
    pub re_cov: Matrix4<f64>,
    pub long_coef: DVector<f64>,
    pub long_sd: f64,
    pub stable_re_mean: Vector2<f64>,
    pub stable_re_cov: Matrix2<f64>,
    pub stable_long_coef: DVector<f64>,
    pub stable_long_sd: f64,
}

impl ModelParameters {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Domain(m));
        if !(0.0..=1.0).contains(&self.stable_rate) {
            return fail(format!("stable rate {} outside [0, 1]", self.stable_rate));
        }
        for (name, sd) in [
            ("tte_sd", self.tte_sd),
            ("long_sd", self.long_sd),
            ("stable_long_sd", self.stable_long_sd),
        ] {
            if !(sd > 0.0 && sd.is_finite()) {
                return fail(format!("{name} must be positive, got {sd}"));
            }
        }
        if (self.re_cov - self.re_cov.transpose()).abs().max() > 1e-12 * self.re_cov.abs().max().max(1.0) {
            return fail("re_cov is not symmetric".into());
        }
        if self.re_cov.cholesky().is_none() {
            return Err(Error::Factorization("re_cov".into()));
        }
        if (self.stable_re_cov - self.stable_re_cov.transpose()).abs().max() > 1e-12 * self.stable_re_cov.abs().max().max(1.0) {
            return fail("stable_re_cov is not symmetric".into());
        }
        if self.stable_re_cov.cholesky().is_none() {
            return Err(Error::Factorization("stable_re_cov".into()));
        }
        Ok(())
    }

    /// Flattened parameter names, covariances as their lower triangles.
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["stable_rate".to_string()];
        out.extend((0..self.tte_coef.len()).map(|j| format!("tte_coef[{j}]")));
        out.push("tte_sd".into());
        for label in RE_LABELS {
            out.push(format!("re_mean[{label}]"));
        }
        for i in 0..4 {
            for j in 0..=i {
                out.push(format!("re_cov[{},{}]", RE_LABELS[i], RE_LABELS[j]));
            }
        }
        out.extend((0..self.long_coef.len()).map(|j| format!("long_coef[{j}]")));
        out.push("long_sd".into());
        for label in STABLE_LABELS {
            out.push(format!("stable_re_mean[{label}]"));
        }
        for i in 0..2 {
            for j in 0..=i {
                out.push(format!(
                    "stable_re_cov[{},{}]",
                    STABLE_LABELS[i], STABLE_LABELS[j]
                ));
            }
        }
        out.extend((0..self.stable_long_coef.len()).map(|j| format!("stable_long_coef[{j}]")));
        out.push("stable_long_sd".into());
        out
    }

    /// Values in the order of [`ModelParameters::names`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = vec![self.stable_rate];
        out.extend(self.tte_coef.iter());
        out.push(self.tte_sd);
        out.extend(self.re_mean.iter());
        for i in 0..4 {
            for j in 0..=i {
                out.push(self.re_cov[(i, j)]);
            }
        }
        out.extend(self.long_coef.iter());
        out.push(self.long_sd);
        out.extend(self.stable_re_mean.iter());
        for i in 0..2 {
            for j in 0..=i {
                out.push(self.stable_re_cov[(i, j)]);
            }
        }
        out.extend(self.stable_long_coef.iter());
        out.push(self.stable_long_sd);
        out
    }

    /// Inverse of [`ModelParameters::to_vec`] for the given covariate dimensions.
    pub fn from_vec(v: &[f64], p_tte: usize, p_long: usize, p_stable: usize) -> Result<Self> {
        let expected = 1 + p_tte + 1 + 4 + 10 + p_long + 1 + 2 + 3 + p_stable + 1;
        if v.len() != expected {
            return Err(Error::Domain(format!(
                "parameter vector has length {}, expected {expected}",
                v.len()
            )));
        }
        let mut it = v.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
        let stable_rate = take(1)[0];
        let tte_coef = DVector::from_vec(take(p_tte));
        let tte_sd = take(1)[0];
        let re_mean = Vector4::from_iterator(take(4));
        let tri = take(10);
        let mut re_cov = Matrix4::zeros();
        let mut k = 0;
        for i in 0..4 {
            for j in 0..=i {
                re_cov[(i, j)] = tri[k];
                re_cov[(j, i)] = tri[k];
                k += 1;
            }
        }
        let long_coef = DVector::from_vec(take(p_long));
        let long_sd = take(1)[0];
        let stable_re_mean = Vector2::from_iterator(take(2));
        let tri = take(3);
        let stable_re_cov = Matrix2::new(tri[0], tri[1], tri[1], tri[2]);
        let stable_long_coef = DVector::from_vec(take(p_stable));
        let stable_long_sd = take(1)[0];
        Ok(Self {
            stable_rate,
            tte_coef,
            tte_sd,
            re_mean,
            re_cov,
            long_coef,
            long_sd,
            stable_re_mean,
            stable_re_cov,
            stable_long_coef,
            stable_long_sd,
        })
    }

    /// Indices (into [`ModelParameters::to_vec`]) of the change-point group
    /// parameters: AFT, random effects, and longitudinal blocks.
    pub fn change_point_indices(&self) -> std::ops::Range<usize> {
        let start = 1;
        let end = start + self.tte_coef.len() + 1 + 4 + 10 + self.long_coef.len() + 1;
        start..end
    }

    /// Index of `re_mean[label]` in [`ModelParameters::to_vec`].
    pub fn re_mean_index(&self, coord: usize) -> usize {
        1 + self.tte_coef.len() + 1 + coord
    }
}

pub const RE_LABELS: [&str; 4] = ["omega", "b0", "b1", "b2"];
pub const STABLE_LABELS: [&str; 2] = ["b0", "b1"];

#[derive(Serialize, Deserialize)]
struct ParamsJson {
    stable_rate: f64,
    tte_coef: Vec<f64>,
    tte_sd: f64,
    re_mean: Vec<f64>,
    re_cov: Vec<Vec<f64>>,
    long_coef: Vec<f64>,
    long_sd: f64,
    stable_re_mean: Vec<f64>,
    stable_re_cov: Vec<Vec<f64>>,
    stable_long_coef: Vec<f64>,
    stable_long_sd: f64,
}

fn rows<const D: usize>(m: &nalgebra::SMatrix<f64, D, D>) -> Vec<Vec<f64>> {
    (0..D).map(|i| (0..D).map(|j| m[(i, j)]).collect()).collect()
}

fn from_rows<const D: usize>(r: &[Vec<f64>], name: &str) -> std::result::Result<nalgebra::SMatrix<f64, D, D>, String> {
    if r.len() != D || r.iter().any(|row| row.len() != D) {
        return Err(format!("{name} must be {D}x{D}"));
    }
    Ok(nalgebra::SMatrix::<f64, D, D>::from_fn(|i, j| r[i][j]))
}

impl Serialize for ModelParameters {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsJson {
            stable_rate: self.stable_rate,
            tte_coef: self.tte_coef.iter().copied().collect(),
            tte_sd: self.tte_sd,
            re_mean: self.re_mean.iter().copied().collect(),
            re_cov: rows(&self.re_cov),
            long_coef: self.long_coef.iter().copied().collect(),
            long_sd: self.long_sd,
            stable_re_mean: self.stable_re_mean.iter().copied().collect(),
            stable_re_cov: rows(&self.stable_re_cov),
            stable_long_coef: self.stable_long_coef.iter().copied().collect(),
            stable_long_sd: self.stable_long_sd,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModelParameters {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let j = ParamsJson::deserialize(d)?;
        if j.re_mean.len() != 4 || j.stable_re_mean.len() != 2 {
            return Err(D::Error::custom("re_mean must have 4 entries and stable_re_mean 2"));
        }
        Ok(Self {
            stable_rate: j.stable_rate,
            tte_coef: DVector::from_vec(j.tte_coef),
            tte_sd: j.tte_sd,
            re_mean: Vector4::from_column_slice(&j.re_mean),
            re_cov: from_rows::<4>(&j.re_cov, "re_cov").map_err(D::Error::custom)?,
            long_coef: DVector::from_vec(j.long_coef),
            long_sd: j.long_sd,
            stable_re_mean: Vector2::from_column_slice(&j.stable_re_mean),
            stable_re_cov: from_rows::<2>(&j.stable_re_cov, "stable_re_cov").map_err(D::Error::custom)?,
            stable_long_coef: DVector::from_vec(j.stable_long_coef),
            stable_long_sd: j.stable_long_sd,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn example() -> ModelParameters {
        ModelParameters {
            stable_rate: 0.2,
            tte_coef: DVector::from_vec(vec![0.3]),
            tte_sd: 0.5,
            re_mean: Vector4::new(0.5, 0.0, -0.5, 0.5),
            re_cov: Matrix4::new(
                0.0225, 0.0, 0.0045, 0.0, //
                0.0, 0.01, 0.0, 0.0, //
                0.0045, 0.0, 0.0225, -0.00675, //
                0.0, 0.0, -0.00675, 0.0225,
            ),
            long_coef: DVector::from_vec(vec![0.1]),
            long_sd: 0.05,
            stable_re_mean: Vector2::new(0.0, -0.3),
            stable_re_cov: Matrix2::new(0.01, 0.0, 0.0, 0.0225),
            stable_long_coef: DVector::from_vec(vec![0.1]),
            stable_long_sd: 0.05,
        }
    }

    #[test]
    fn flatten_round_trip() {
        let p = example();
        let v = p.to_vec();
        assert_eq!(v.len(), p.names().len());
        let back = ModelParameters::from_vec(&v, 1, 1, 1).unwrap();
        assert_eq!(back, p);
        assert_eq!(p.names()[p.re_mean_index(3)], "re_mean[b2]");
    }

    #[test]
    fn json_round_trip() {
        let p = example();
        let s = serde_json::to_string(&p).unwrap();
        let back: ModelParameters = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn validation_rejects_bad_blocks() {
        let mut p = example();
        assert!(p.validate().is_ok());
        p.stable_rate = 1.5;
        assert!(p.validate().is_err());
        let mut p = example();
        p.re_cov[(0, 0)] = -1.0;
        assert!(p.validate().is_err());
        let mut p = example();
        p.long_sd = 0.0;
        assert!(p.validate().is_err());
    }
}
