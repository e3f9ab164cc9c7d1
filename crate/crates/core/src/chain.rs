//! End-to-end link: transmitter, fiber, receiver front end and symbol
//! sampling, producing an unnormalized labeled frame.

use crate::error::Result;
use crate::fiber::{propagate_link, LinkConfig};
use crate::frame::SymbolFrame;
use crate::rx::{channel_select, fde_compensate, sample_symbols, FrameContext};
use crate::signal::{streams, RngStream};
use crate::tx::{transmit, TxConfig};

/// Runs TX → link → channel select → FDE → sampling for one seed.
pub fn simulate_frame(tx: &TxConfig, link: &LinkConfig, seed: u64) -> Result<SymbolFrame> {
    tx.validate()?;
    link.validate()?;
    let t = transmit(tx, seed)?;
    let mut ase = RngStream::new(seed, streams::ASE);
    let rx = propagate_link(&t.waveform, link, &mut ase)?;
    let rx = channel_select(&rx, tx)?;
    let rx = fde_compensate(&rx, link.total_length(), link.beta2)?;
    let ctx = FrameContext {
        tx,
        link,
        truth: &t.truth,
        shaping: &t.shaping,
        seed,
    };
    sample_symbols(&rx, &ctx)
}
