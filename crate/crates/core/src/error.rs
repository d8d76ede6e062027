//! Error type shared by all core modules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Everything that can go wrong inside the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensor shapes that were required to agree did not.
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A tensor had the wrong overall shape for an operation.
    BadShape { op: &'static str, what: String },
    /// A class label fell outside `[0, classes)`.
    BadLabel { label: usize, classes: usize },
    /// A composite-rotation class index fell outside the family's range.
    BadClass { family: &'static str, index: usize, cardinality: usize },
    /// A scalar argument violated a documented precondition.
    BadArg { what: String },
    /// A training batch referenced an image outside the base split.
    SplitViolation { image: usize, split: &'static str },
    /// An episode request exceeded what the split can provide.
    SamplingDeficit { what: &'static str, need: usize, have: usize },
    /// A loss or gradient stopped being finite; training was aborted.
    NonFinite { what: &'static str, epoch: usize, step: usize },
    /// Dataset generation produced a template that violates its own contract.
    DegenerateTemplate { class: usize, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimMismatch { op, lhs, rhs } => {
                write!(f, "{op}: dimension mismatch between {lhs:?} and {rhs:?}")
            }
            Error::BadShape { op, what } => write!(f, "{op}: {what}"),
            Error::BadLabel { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::BadClass { family, index, cardinality } => {
                write!(f, "class index {index} out of range for {family} ({cardinality} classes)")
            }
            Error::BadArg { what } => write!(f, "invalid argument: {what}"),
            Error::SplitViolation { image, split } => {
                write!(f, "image {image} belongs to the {split} split and may not enter a training batch")
            }
            Error::SamplingDeficit { what, need, have } => {
                write!(f, "episode sampling needs {need} {what} but the split has only {have}")
            }
            Error::NonFinite { what, epoch, step } => {
                write!(f, "non-finite {what} at epoch {epoch} step {step}; training aborted")
            }
            Error::DegenerateTemplate { class, detail } => {
                write!(f, "glyph template for class {class} is degenerate: {detail}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
