use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// One named parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            name: name.into(),
            shape,
            data: vec![F::zero(); len],
        }
    }
}

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams<F> {
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn zeros_like(other: &ModelParams<F>) -> Self {
        ModelParams {
            tensors: other
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn values(&self) -> impl Iterator<Item = &F> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut F> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Same names and shapes, in the same order.
    pub fn ensure_compatible(&self, other: &ModelParams<F>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Shape(format!(
                "{} vs {} parameter arrays",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "{}{:?} vs {}{:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        for v in self.values_mut() {
            *v = F::zero();
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &ModelParams<F>) -> Result<f64> {
        self.ensure_compatible(other)?;
        Ok(self
            .values()
            .zip(other.values())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| G::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Deep copy; used to initialize the teacher from the student.
pub fn clone_params<F: Scalar>(params: &ModelParams<F>) -> ModelParams<F> {
    params.clone()
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update<F: Scalar>(
    teacher: &mut ModelParams<F>,
    student: &ModelParams<F>,
    alpha: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA coefficient {alpha} outside [0, 1]")));
    }
    teacher.ensure_compatible(student)?;
    if alpha == 1.0 {
        return Ok(());
    }
    let a = F::of(alpha);
    let b = F::of(1.0 - alpha);
    for (t, s) in teacher.values_mut().zip(student.values()) {
        *t = a * *t + b * *s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(v: f64) -> ModelParams<f64> {
        ModelParams {
            tensors: vec![
                Tensor {
                    name: "w".into(),
                    shape: vec![2, 2],
                    data: vec![v; 4],
                },
                Tensor {
                    name: "b".into(),
                    shape: vec![2],
                    data: vec![v; 2],
                },
            ],
        }
    }

    #[test]
    fn ema_single_step() {
        let mut t = params(1.0);
        ema_update(&mut t, &params(0.0), 0.994).unwrap();
        assert!(t.values().all(|&v| (v - 0.994).abs() < 1e-15));
    }

    #[test]
    fn ema_fixed_point_and_copy() {
        let mut t = params(0.3);
        ema_update(&mut t, &params(0.9), 1.0).unwrap();
        assert_eq!(t, params(0.3));
        ema_update(&mut t, &params(0.9), 0.0).unwrap();
        assert_eq!(t, params(0.9));
    }

    #[test]
    fn ema_rejects_mismatch() {
        let mut t = params(0.0);
        let mut s = params(0.0);
        s.tensors[0].shape = vec![4];
        assert!(matches!(ema_update(&mut t, &s, 0.5), Err(Error::Shape(_))));
        assert!(matches!(ema_update(&mut t, &params(0.0), 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn ema_contracts_geometrically() {
        let student = params(2.0);
        let mut teacher = params(-3.0);
        let alpha = 0.9;
        let mut gap = teacher.max_abs_diff(&student).unwrap();
        for _ in 0..100 {
            ema_update(&mut teacher, &student, alpha).unwrap();
            let next = teacher.max_abs_diff(&student).unwrap();
            assert!((next - alpha * gap).abs() <= 1e-12 * gap.max(1e-300) + 1e-15);
            gap = next;
        }
        assert!(gap < 5.0 * 0.9f64.powi(100) + 1e-12);
    }

    #[test]
    fn clone_is_deep() {
        let original = params(1.0);
        let mut copy = clone_params(&original);
        copy.tensors[0].data[0] = 5.0;
        assert_eq!(original, params(1.0));
        let again = clone_params(&clone_params(&original));
        assert_eq!(again, original);
        for (a, b) in copy.tensors.iter().zip(&original.tensors) {
            assert_eq!((&a.name, &a.shape), (&b.name, &b.shape));
        }
    }
}
