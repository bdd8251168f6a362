//! Block segmentation of a feature stream for the streaming encoder,
//! plus the algorithmic-delay bookkeeping that goes with it.
//!
//! A stream of T frames is cut into overlapping windows: block b
//! (1-based) starts at (b-1)*hop and spans exactly `block` frames.
//! The final window is zero-padded on the right when the stream runs
//! out.  Look-ahead is not extra frames in the window; it is extra
//! attention visibility granted to the encoder (see the model module),
//! so it appears here only as a validated parameter.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Window geometry: size, hop, and look-ahead, all in frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub block: usize,
    pub hop: usize,
    pub look_ahead: usize,
    pub frame_period_ms: f64,
}

impl BlockSpec {
    pub fn new(block: usize, hop: usize, look_ahead: usize, frame_period_ms: f64) -> Result<Self> {
        let s = BlockSpec { block, hop, look_ahead, frame_period_ms };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop < 1 || self.hop > self.block {
            return Err(Error::Domain(format!(
                "hop {} must be in 1..=block {}",
                self.hop, self.block
            )));
        }
        if self.frame_period_ms <= 0.0 || !self.frame_period_ms.is_finite() {
            return Err(Error::Domain(format!(
                "frame period {} ms",
                self.frame_period_ms
            )));
        }
        Ok(())
    }
}

/// One window over the stream.  `start..end` are the real frames it
/// covers; `pad` zero frames follow so that end - start + pad == block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    /// 1-based index in stream order.
    pub index: usize,
    pub start: usize,
    /// Exclusive end, clamped to the stream length.
    pub end: usize,
    pub pad: usize,
}

/// Cut a stream of `frames` frames into blocks.
///
/// Every frame is covered by at least one block, block starts advance
/// by exactly `hop`, and only the final block may carry padding.
pub fn segment_blocks(frames: usize, spec: &BlockSpec) -> Result<Vec<Block>> {
    spec.validate()?;
    if frames == 0 {
        return Err(Error::Domain("cannot segment an empty stream".into()));
    }
    let count = if frames <= spec.block {
        1
    } else {
        (frames - spec.block).div_ceil(spec.hop) + 1
    };
    let mut blocks = Vec::with_capacity(count);
    for b in 0..count {
        let start = b * spec.hop;
        let end = (start + spec.block).min(frames);
        blocks.push(Block {
            index: b + 1,
            start,
            end,
            pad: spec.block - (end - start),
        });
    }
    Ok(blocks)
}

/// Index (1-based) of the earliest block containing frame `t`, i.e.
/// the block whose completion first makes an output for `t` available.
pub fn owning_block(t: usize, spec: &BlockSpec, n_blocks: usize) -> usize {
    let b = if t < spec.block {
        1
    } else {
        (t - spec.block) / spec.hop + 2
    };
    b.min(n_blocks)
}

/// Last input frame (exclusive) visible to outputs owned by block `b`:
/// everything up to the block's end plus the look-ahead allowance.
pub fn visibility_end(b: usize, spec: &BlockSpec, frames: usize) -> usize {
    ((b - 1) * spec.hop + spec.block + spec.look_ahead).min(frames)
}

/// Input-side algorithmic delay in milliseconds: a full block of
/// frames must arrive before its outputs can be emitted, and each
/// output frame stands for `subsample` input frames.
pub fn algorithmic_delay_ms(spec: &BlockSpec, subsample: usize) -> f64 {
    spec.block as f64 * spec.frame_period_ms * subsample as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(block: usize, hop: usize, la: usize) -> BlockSpec {
        BlockSpec::new(block, hop, la, 10.0).unwrap()
    }

    #[test]
    fn hundred_frames_with_overlap() {
        // T=100, block=40, hop=16: starts 0,16,32,48,64; the last
        // window covers 64..100 and pads 4 frames.
        let blocks = segment_blocks(100, &spec(40, 16, 16)).unwrap();
        assert_eq!(blocks.len(), 5);
        assert_eq!(
            blocks.iter().map(|b| b.start).collect::<Vec<_>>(),
            vec![0, 16, 32, 48, 64]
        );
        let last = blocks.last().unwrap();
        assert_eq!((last.end, last.pad), (100, 4));
        for b in &blocks[..4] {
            assert_eq!(b.pad, 0);
        }
    }

    #[test]
    fn short_stream_is_one_padded_block() {
        let blocks = segment_blocks(5, &spec(8, 4, 0)).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0], Block { index: 1, start: 0, end: 5, pad: 3 });
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(segment_blocks(0, &spec(8, 4, 0)).is_err());
    }

    #[test]
    fn bad_geometry_is_an_error() {
        assert!(BlockSpec::new(8, 0, 0, 10.0).is_err());
        assert!(BlockSpec::new(8, 9, 0, 10.0).is_err());
        assert!(BlockSpec::new(8, 4, 0, 0.0).is_err());
    }

    #[test]
    fn owning_block_is_the_earliest_container() {
        let s = spec(40, 16, 0);
        assert_eq!(owning_block(0, &s, 5), 1);
        assert_eq!(owning_block(39, &s, 5), 1);
        assert_eq!(owning_block(40, &s, 5), 2);
        assert_eq!(owning_block(55, &s, 5), 2);
        assert_eq!(owning_block(56, &s, 5), 3);
    }

    #[test]
    fn delay_scales_with_block_frame_period_and_subsample() {
        // 10 ms frames, 4x subsampling: 20 -> 800 ms, 40 -> 1600 ms,
        // 60 -> 2400 ms (the exact product; see cli latency note).
        assert_eq!(algorithmic_delay_ms(&spec(20, 20, 0), 4), 800.0);
        assert_eq!(algorithmic_delay_ms(&spec(40, 40, 0), 4), 1600.0);
        assert_eq!(algorithmic_delay_ms(&spec(60, 60, 0), 4), 2400.0);
    }

    proptest! {
        // Sweep stream lengths and geometries: full coverage, hop
        // spacing, padding only on the final block, and the invariant
        // end - start + pad == block for every block.
        #[test]
        fn segmentation_invariants(
            frames in 1usize..200,
            block in 1usize..50,
            hop_frac in 1usize..50,
        ) {
            let hop = 1 + hop_frac % block;
            let s = spec(block, hop, 0);
            let blocks = segment_blocks(frames, &s).unwrap();
            prop_assert!(!blocks.is_empty());
            prop_assert_eq!(blocks[0].start, 0);
            for (i, b) in blocks.iter().enumerate() {
                prop_assert_eq!(b.index, i + 1);
                prop_assert_eq!(b.start, i * hop);
                prop_assert!(b.end <= frames);
                prop_assert_eq!(b.end - b.start + b.pad, block);
                if i + 1 < blocks.len() {
                    prop_assert_eq!(b.pad, 0);
                }
            }
            // Coverage: the final block reaches the end of the stream,
            // and consecutive blocks overlap or touch.
            prop_assert_eq!(blocks.last().unwrap().end, frames);
            for w in blocks.windows(2) {
                prop_assert!(w[1].start <= w[0].end);
            }
            // Every frame has an owner that indeed contains it.
            for t in 0..frames {
                let b = owning_block(t, &s, blocks.len());
                let blk = &blocks[b - 1];
                prop_assert!(blk.start <= t && t < blk.start + block);
                // And no earlier block contains t.
                if b > 1 {
                    let prev = &blocks[b - 2];
                    prop_assert!(t >= prev.start + block);
                }
            }
        }
    }
}
