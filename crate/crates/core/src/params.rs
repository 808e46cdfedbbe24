//! Named-tensor view shared by model parameters, adapters, gradients and
//! optimizer state.

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, m) in out.tensors_mut() {
            m.fill(0.0);
        }
        out
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, m) in self.tensors() {
            out.extend_from_slice(m.data());
        }
        out
    }

    fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        let total = self.num_params();
        if values.len() != total {
            return Err(Error::Dimension {
                op: "assign_flat",
                left: format!("{total} params"),
                right: format!("{} values", values.len()),
            });
        }
        let mut off = 0;
        for (_, m) in self.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += scale · other`, tensor by tensor.
    fn axpy(&mut self, scale: f64, other: &Self) -> Result<()> {
        let src = other.tensors();
        for ((_, dst), (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.axpy(scale, s)?;
        }
        Ok(())
    }

    fn scale_all(&mut self, s: f64) {
        for (_, m) in self.tensors_mut() {
            m.scale_in_place(s);
        }
    }

    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, m)| m.frobenius_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// CRC-32 over every name and the little-endian bytes of every value.
    fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, m) in self.tensors() {
            h.update(name.as_bytes());
            for v in m.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Vector-like tensors (a single row) are exempt from weight decay.
pub fn decays(m: &Matrix) -> bool {
    m.rows() > 1
}

/// Copies every tensor from `(name, matrix)` pairs into `dst`, requiring an
/// exact name and shape match.
pub fn load_named<P: ParamSet>(dst: &mut P, src: &[(String, Matrix)]) -> Result<()> {
    let mut slots = dst.tensors_mut();
    if slots.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            slots.len(),
            src.len()
        )));
    }
    for ((name, m), (src_name, src_m)) in slots.iter_mut().zip(src) {
        if name != src_name || m.shape() != src_m.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {} does not match stored {src_name} {}",
                m.shape_str(),
                src_m.shape_str()
            )));
        }
        **m = src_m.clone();
    }
    Ok(())
}

pub fn named_clone<P: ParamSet>(p: &P) -> Vec<(String, Matrix)> {
    p.tensors()
        .into_iter()
        .map(|(n, m)| (n, m.clone()))
        .collect()
}
