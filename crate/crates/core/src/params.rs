//! Named, ordered parameter registries and their binding onto a tape.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Ordered collection of named tensors. Iteration order is insertion order,
/// which fixes the layout of checkpoints and of gradient accumulation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Panics on a duplicate name; registries are built by this crate only.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<T>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn extend(&mut self, other: ParamSet<T>) {
        for (n, v) in other.names.into_iter().zip(other.values) {
            self.insert(n, v);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Number of scalars in tensors whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.shape() == b.shape())
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>, trainable: bool) -> Bound<'a, T> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { set: self, vars }
    }

    /// Fails with `ShapeError` unless `other` has exactly this layout.
    pub fn check_layout(&self, other: &Self) -> Result<()> {
        for (name, v) in self.iter() {
            match other.get(name) {
                None => {
                    return Err(Error::ShapeError {
                        tensor: name.to_string(),
                        detail: "missing".into(),
                    })
                }
                Some(o) if o.shape() != v.shape() => {
                    return Err(Error::ShapeError {
                        tensor: name.to_string(),
                        detail: format!("expected {:?}, found {:?}", v.shape(), o.shape()),
                    })
                }
                _ => {}
            }
        }
        if other.len() != self.len() {
            let extra = other.names.iter().find(|n| !self.contains(n)).cloned().unwrap_or_default();
            return Err(Error::ShapeError {
                tensor: extra,
                detail: "unexpected tensor".into(),
            });
        }
        Ok(())
    }
}

/// A [`ParamSet`] placed on one tape.
pub struct Bound<'a, T> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    /// Panics if `name` is not registered; names are produced by this crate.
    pub fn var(&self, name: &str) -> Var {
        match self.set.position(name) {
            Some(i) => self.vars[i],
            None => panic!("parameter `{name}` is not registered"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.set.position(name).map(|i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn set(&self) -> &'a ParamSet<T> {
        self.set
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_counts() {
        let mut p = ParamSet::<f64>::new();
        p.insert("b", Matrix::zeros(2, 3));
        p.insert("a", Matrix::zeros(1, 4));
        assert_eq!(p.names(), &["b".to_string(), "a".to_string()]);
        assert_eq!(p.count(), 10);
        assert_eq!(p.count_prefix("a"), 4);
    }

    #[test]
    fn layout_check_names_the_tensor() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Matrix::zeros(2, 2));
        let mut q = ParamSet::<f64>::new();
        q.insert("w", Matrix::zeros(2, 3));
        match p.check_layout(&q) {
            Err(Error::ShapeError { tensor, .. }) => assert_eq!(tensor, "w"),
            other => panic!("{other:?}"),
        }
        assert!(p.check_layout(&p.clone()).is_ok());
    }

    #[test]
    #[should_panic]
    fn duplicate_names_panic() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Matrix::zeros(1, 1));
        p.insert("w", Matrix::zeros(1, 1));
    }
}
