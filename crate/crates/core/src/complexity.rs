//! Multiply-accumulate accounting.
//!
//! Counts are analytic: a convolution producing `H_out × W_out × C_out`
//! values from `C_in` channels with a `K × K` kernel costs
//! `H_out·W_out·C_out·C_in·K²` MACs whether or not taps are masked.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::structure::{EdgeId, StructureSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub h_out: usize,
    pub w_out: usize,
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
}

pub fn conv_macs(h_out: usize, w_out: usize, c_out: usize, c_in: usize, kernel: usize) -> u64 {
    (h_out * w_out * c_out * c_in * kernel * kernel) as u64
}

/// `(C − C_min) / (C_max − C_min)`.
pub fn complexity_ratio(c: f64, c_min: f64, c_max: f64) -> Result<f64> {
    if c_max == c_min {
        return Err(Error::DegenerateRange(c_min));
    }
    if c_max < c_min {
        return Err(Error::InvalidArgument(format!("C_max {c_max} below C_min {c_min}")));
    }
    Ok((c - c_min) / (c_max - c_min))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub per_edge: BTreeMap<EdgeId, u64>,
    /// Masked context convolution, identical for every topology.
    pub context: u64,
    pub total: u64,
    pub pixels: u64,
    pub c_min: u64,
    pub c_max: u64,
    pub ratio: f64,
}

impl ComplexityReport {
    pub fn kmacs_per_pixel(&self) -> f64 {
        self.total as f64 / self.pixels as f64 / 1000.0
    }

    pub fn macs_per_pixel(&self) -> f64 {
        self.total as f64 / self.pixels as f64
    }
}

/// MACs of each edge for the given variant indices on an `h × w` image.
pub fn edge_macs(model: &Model, inter: &BTreeMap<EdgeId, usize>, h: usize, w: usize) -> Result<BTreeMap<EdgeId, u64>> {
    let get = |e: EdgeId| inter.get(&e).copied().unwrap_or(0);
    let mut out = BTreeMap::new();
    for edge in EdgeId::ALL {
        out.insert(edge, model.edge_macs(edge, get(edge), h, w)?);
    }
    Ok(out)
}

pub fn pipeline_report(model: &Model, structure: &StructureSample, h: usize, w: usize) -> Result<ComplexityReport> {
    let per_edge = edge_macs(model, &structure.inter, h, w)?;
    let context = model.context_macs(h, w);
    let total = per_edge.values().sum::<u64>() + context;
    let extreme = |i: usize| -> Result<u64> {
        let all: BTreeMap<EdgeId, usize> = EdgeId::ALL.into_iter().map(|e| (e, i)).collect();
        Ok(edge_macs(model, &all, h, w)?.values().sum::<u64>() + context)
    };
    let c_min = extreme(0)?;
    let c_max = extreme(model.num_variants() - 1)?;
    let ratio = complexity_ratio(total as f64, c_min as f64, c_max as f64)?;
    Ok(ComplexityReport { per_edge, context, total, pixels: (h * w) as u64, c_min, c_max, ratio })
}
