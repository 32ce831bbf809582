//! The reconstruction vector `x = (rho, chat)`: the image replicated on
//! every device plus the weighted-domain coil representations distributed by
//! channel.

use std::sync::Arc;

use num_complex::{Complex32, Complex64};

use crate::error::Result;
use crate::numerics;
use crate::segvec::{SegVector, SplitPolicy};

use super::cg::CgVector;
use super::types::Counters;

/// Device-resident unknowns: `rho` is clone-replicated (all devices need the
/// image), `chat` holds one `ng x ng` matrix per channel, block-split so
/// channels stay whole on their device.
pub struct Unknowns {
    pub(crate) rho: SegVector<Complex32>,
    pub(crate) chat: SegVector<Complex32>,
    pub(crate) counters: Arc<Counters>,
}

impl Unknowns {
    pub(crate) fn alloc(
        env: &crate::runtime::Environment,
        ng_len: usize,
        channels: usize,
        counters: Arc<Counters>,
    ) -> Result<Unknowns> {
        Ok(Unknowns {
            rho: SegVector::new(env, ng_len, SplitPolicy::Clone)?,
            chat: SegVector::new(env, channels * ng_len, SplitPolicy::Blockwise { block_len: ng_len })?,
            counters,
        })
    }

    /// Image component on the doubled grid, clone-replicated.
    pub fn rho(&self) -> &SegVector<Complex32> {
        &self.rho
    }

    /// Weighted-domain coil representations, one matrix per channel.
    pub fn chat(&self) -> &SegVector<Complex32> {
        &self.chat
    }

    /// Deep copy sharing no storage.
    pub fn duplicate(&self) -> Result<Unknowns> {
        let mut out = self.alloc_like()?;
        out.copy_from(self)?;
        Ok(out)
    }

    /// Scale only the coil component, leaving the image untouched. The
    /// solver uses this to move between the exposed coil representation and
    /// its internally rescaled variables.
    pub(crate) fn scale_chat(&self, factor: f64) -> Result<()> {
        self.counters.add_elementwise();
        numerics::scale(Complex32::new(factor as f32, 0.0), &self.chat)?;
        Ok(())
    }
}

impl CgVector for Unknowns {
    fn alloc_like(&self) -> Result<Unknowns> {
        Ok(Unknowns {
            rho: SegVector::new(self.rho.env(), self.rho.logical_len(), self.rho.policy())?,
            chat: SegVector::new(self.chat.env(), self.chat.logical_len(), self.chat.policy())?,
            counters: Arc::clone(&self.counters),
        })
    }

    fn set_zero(&mut self) -> Result<()> {
        self.counters.add_elementwise();
        let zero = Complex32::new(0.0, 0.0);
        numerics::fill(zero, &self.rho)?;
        numerics::fill(zero, &self.chat)?;
        Ok(())
    }

    fn copy_from(&mut self, other: &Unknowns) -> Result<()> {
        self.counters.add_elementwise();
        numerics::copy_to(&other.rho, &self.rho)?;
        numerics::copy_to(&other.chat, &self.chat)?;
        Ok(())
    }

    fn axpy(&mut self, a: f64, x: &Unknowns) -> Result<()> {
        self.counters.add_elementwise();
        let a = Complex32::new(a as f32, 0.0);
        numerics::axpy(a, &x.rho, &self.rho)?;
        numerics::axpy(a, &x.chat, &self.chat)?;
        Ok(())
    }

    fn xpay(&mut self, a: f64, x: &Unknowns) -> Result<()> {
        self.counters.add_elementwise();
        let a = Complex32::new(a as f32, 0.0);
        numerics::scale(a, &self.rho)?;
        numerics::scale(a, &self.chat)?;
        numerics::axpy(Complex32::new(1.0, 0.0), &x.rho, &self.rho)?;
        numerics::axpy(Complex32::new(1.0, 0.0), &x.chat, &self.chat)?;
        Ok(())
    }

    fn dot(&self, other: &Unknowns) -> Result<Complex64> {
        self.counters.add_dot();
        // The cloned image counts once: dot reads the canonical replica.
        Ok(numerics::dot(&self.rho, &other.rho)? + numerics::dot(&self.chat, &other.chat)?)
    }
}
