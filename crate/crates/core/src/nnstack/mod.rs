//! Minimal differentiation stack: tape, layers, gradient checker, named parameters.

mod gradcheck;
mod graph;
mod layers;

pub use gradcheck::{check_graph, check_graph_report, finite_diff_check, finite_diff_report, graph_gradients, FdReport};
pub use graph::{Graph, Var};
pub(crate) use graph::Op;
pub use layers::{
    gru_cell, gru_cell_forward, init_uniform, tconv_forward, DepthwiseTConvParams, GruCellParams, SeqMask,
};

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Appends a tensor and returns its index. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Matrix) -> Result<usize> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Input(alloc::format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn get(&self, index: usize) -> &Matrix {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.tensors[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Replace values from another set with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Input("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("ParamSet::copy_from", alloc::format!("{:?} vs {:?}", dst.shape(), src.shape())));
            }
            dst.clone_from(src);
        }
        Ok(())
    }
}
