//! Two-layer projection head into the contrastive space.

use super::{Bound, Linear};
use crate::diffcore::{Real, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct Head<'g, T: Real> {
    pub fc1: Linear<'g, T>,
    pub fc2: Linear<'g, T>,
}

impl<'g, T: Real> Head<'g, T> {
    pub fn bind(bound: &Bound<'g, T>) -> Result<Self> {
        Ok(Head {
            fc1: bound.linear("head.fc1")?,
            fc2: bound.linear("head.fc2")?,
        })
    }
}

/// `Linear → ReLU → Linear` over rows.
pub fn project_head<'g, T: Real>(x: &Var<'g, T>, head: &Head<'g, T>) -> Result<Var<'g, T>> {
    head.fc2.apply(&head.fc1.apply(x)?.relu())
}
