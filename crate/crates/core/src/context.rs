//! Bidirectional recurrent encoder over the latent codes of preceding
//! utterances, producing one fixed-width context vector per sample.

use rand::Rng;

use crate::autodiff::layers::{CellKind, RecurrentCell};
use crate::autodiff::params::{Bindings, ParamStore};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::vae::LatentCode;

/// Default hidden size per direction; the context vector is twice this.
pub const CONTEXT_HIDDEN: usize = 512;

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    fwd: RecurrentCell,
    bwd: RecurrentCell,
    latent: usize,
    hidden: usize,
}

impl ContextEncoder {
    pub fn declare(prefix: &str, cell: CellKind, latent: usize, hidden: usize) -> Self {
        ContextEncoder {
            fwd: RecurrentCell::declare(cell, format!("{prefix}.fwd"), latent, hidden),
            bwd: RecurrentCell::declare(cell, format!("{prefix}.bwd"), latent, hidden),
            latent,
            hidden,
        }
    }

    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cell: CellKind,
        latent: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        RecurrentCell::new(store, cell, format!("{prefix}.fwd"), latent, hidden, rng);
        RecurrentCell::new(store, cell, format!("{prefix}.bwd"), latent, hidden, rng);
        Self::declare(prefix, cell, latent, hidden)
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Context vectors `[contexts.len(), 2 * hidden]`, the concatenated final
    /// states of both directions. An empty context leaves both directions at
    /// their zero initial state, so its vector is exactly zero.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        contexts: &[&[LatentCode]],
    ) -> Result<NodeId> {
        let rows = contexts.len();
        if rows == 0 {
            return Err(Error::InvalidInput("no contexts to encode".into()));
        }
        if let Some(z) = contexts
            .iter()
            .flat_map(|c| c.iter())
            .find(|z| z.dim() != self.latent)
        {
            return Err(Error::Incompatible {
                what: "context latent dimension",
                expected: self.latent.to_string(),
                found: z.dim().to_string(),
            });
        }
        let width = contexts.iter().map(|c| c.len()).max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(width);
        let mut keep = Vec::with_capacity(width);
        for t in 0..width {
            let mut data = vec![0.0; rows * self.latent];
            for (r, c) in contexts.iter().enumerate() {
                if let Some(z) = c.get(t) {
                    data[r * self.latent..(r + 1) * self.latent].copy_from_slice(z.as_slice());
                }
            }
            inputs.push(tape.constant(Tensor::new(vec![rows, self.latent], data)?)?);
            keep.push(contexts.iter().map(|c| t < c.len()).collect());
        }
        let init = self.fwd.zero_state(tape, rows)?;
        let f = self.fwd.run(tape, b, &inputs, &keep, false, init)?;
        let init = self.bwd.zero_state(tape, rows)?;
        let r = self.bwd.run(tape, b, &inputs, &keep, true, init)?;
        tape.concat_cols(&[f.h, r.h])
    }
}

/// `[z_q ; c]`, the conditioning input of the generator and discriminator.
pub fn condition(z_q: &LatentCode, context: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(z_q.dim() + context.len());
    v.extend_from_slice(z_q.as_slice());
    v.extend_from_slice(context);
    v
}
