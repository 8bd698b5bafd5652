//! Reductions from last-layer hidden states to a single vector.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2};

use crate::encoder::HiddenStates;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PoolingKind {
    /// Row 0.
    Cls,
    /// Mean over real tokens.
    Avg,
    /// Sum over real tokens.
    Sum,
    /// Mean over special-token rows.
    AvgSpecial,
    /// Sum over special-token rows.
    SumSpecial,
    /// Special-token rows concatenated in sequence order, zero-padded to a
    /// shared slot count.
    ConcSpecial,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 6] = [
        PoolingKind::Cls,
        PoolingKind::Avg,
        PoolingKind::Sum,
        PoolingKind::AvgSpecial,
        PoolingKind::SumSpecial,
        PoolingKind::ConcSpecial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolingKind::Cls => "cls",
            PoolingKind::Avg => "avg",
            PoolingKind::Sum => "sum",
            PoolingKind::AvgSpecial => "avg_special",
            PoolingKind::SumSpecial => "sum_special",
            PoolingKind::ConcSpecial => "conc_special",
        }
    }

    pub fn uses_specials(self) -> bool {
        matches!(
            self,
            PoolingKind::AvgSpecial | PoolingKind::SumSpecial | PoolingKind::ConcSpecial
        )
    }

    /// Width of the pooled vector for hidden size `dim`.
    pub fn output_dim(self, dim: usize, slot_count: usize) -> usize {
        match self {
            PoolingKind::ConcSpecial => dim * slot_count,
            _ => dim,
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolingKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling kind {s:?}")))
    }
}

/// Compatibility switches for the literal reading of the pooling formulas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PoolingOptions {
    /// AVG and SUM run over all `n` rows and AVG divides by `n`, padding
    /// included.
    pub literal_length: bool,
    /// AVG_SPECIAL and SUM_SPECIAL run over every token row, not only the
    /// special ones.
    pub special_over_all_rows: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledVector {
    pub values: Array1<f64>,
    pub kind: PoolingKind,
}

impl PooledVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Rows the reduction reads, with the weight each row receives. CONC_SPECIAL
/// is handled separately.
fn row_weights(
    h: &HiddenStates,
    specials: &[usize],
    kind: PoolingKind,
    opts: PoolingOptions,
) -> Result<Vec<(usize, f64)>> {
    let span = if opts.literal_length { h.rows() } else { h.len };
    let all_rows = |mean: bool| {
        let w = if mean { 1.0 / span as f64 } else { 1.0 };
        (0..span).map(|i| (i, w)).collect::<Vec<_>>()
    };
    Ok(match kind {
        PoolingKind::Cls => vec![(0, 1.0)],
        PoolingKind::Avg => all_rows(true),
        PoolingKind::Sum => all_rows(false),
        PoolingKind::AvgSpecial | PoolingKind::SumSpecial if opts.special_over_all_rows => {
            all_rows(kind == PoolingKind::AvgSpecial)
        }
        PoolingKind::AvgSpecial => {
            let w = 1.0 / specials.len() as f64;
            specials.iter().map(|&i| (i, w)).collect()
        }
        PoolingKind::SumSpecial => specials.iter().map(|&i| (i, 1.0)).collect(),
        PoolingKind::ConcSpecial => unreachable!("concatenation has no row weights"),
    })
}

fn check_specials(h: &HiddenStates, specials: &[usize], kind: PoolingKind, slot_count: usize) -> Result<()> {
    if !kind.uses_specials() {
        return Ok(());
    }
    if specials.is_empty() {
        return Err(Error::Shape(format!("{kind} pooling needs special positions")));
    }
    if let Some(&bad) = specials.iter().find(|&&i| i >= h.len) {
        return Err(Error::Shape(format!(
            "special position {bad} beyond attention length {}",
            h.len
        )));
    }
    if kind == PoolingKind::ConcSpecial && specials.len() > slot_count {
        return Err(Error::Shape(format!(
            "{} special tokens exceed {slot_count} concatenation slots",
            specials.len()
        )));
    }
    Ok(())
}

pub fn reduce(
    h: &HiddenStates,
    specials: &[usize],
    kind: PoolingKind,
    slot_count: usize,
) -> Result<PooledVector> {
    reduce_with(h, specials, kind, slot_count, PoolingOptions::default())
}

pub fn reduce_with(
    h: &HiddenStates,
    specials: &[usize],
    kind: PoolingKind,
    slot_count: usize,
    opts: PoolingOptions,
) -> Result<PooledVector> {
    check_specials(h, specials, kind, slot_count)?;
    let d = h.dim();
    let values = if kind == PoolingKind::ConcSpecial {
        let mut v = Array1::zeros(d * slot_count);
        for (slot, &row) in specials.iter().enumerate() {
            v.slice_mut(s![slot * d..(slot + 1) * d])
                .assign(&h.states.row(row));
        }
        v
    } else {
        let mut v = Array1::zeros(d);
        for (row, w) in row_weights(h, specials, kind, opts)? {
            v.scaled_add(w, &h.states.row(row));
        }
        v
    };
    Ok(PooledVector { values, kind })
}

/// Adjoint of [`reduce`]: maps a gradient on the pooled vector back to the
/// hidden-state rows it was read from.
pub fn backward_reduce(
    h: &HiddenStates,
    specials: &[usize],
    kind: PoolingKind,
    slot_count: usize,
    upstream: &Array1<f64>,
) -> Result<Array2<f64>> {
    backward_reduce_with(h, specials, kind, slot_count, PoolingOptions::default(), upstream)
}

pub fn backward_reduce_with(
    h: &HiddenStates,
    specials: &[usize],
    kind: PoolingKind,
    slot_count: usize,
    opts: PoolingOptions,
    upstream: &Array1<f64>,
) -> Result<Array2<f64>> {
    check_specials(h, specials, kind, slot_count)?;
    let d = h.dim();
    let expected = kind.output_dim(d, slot_count);
    if upstream.len() != expected {
        return Err(Error::Shape(format!(
            "pooled gradient of width {}, expected {expected}",
            upstream.len()
        )));
    }
    let mut grad = Array2::zeros(h.states.dim());
    if kind == PoolingKind::ConcSpecial {
        for (slot, &row) in specials.iter().enumerate() {
            let mut r = grad.row_mut(row);
            r += &upstream.slice(s![slot * d..(slot + 1) * d]);
        }
    } else {
        for (row, w) in row_weights(h, specials, kind, opts)? {
            grad.row_mut(row).scaled_add(w, upstream);
        }
    }
    Ok(grad)
}
