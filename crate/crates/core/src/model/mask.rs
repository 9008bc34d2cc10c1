use rand::Rng;

use crate::error::{Error, Result};

use super::params::DROPOUT_BLOCKS;

/// Channel dropout masks for one episode: one 0/1 vector per
/// dropout-enabled embedding block, shared by the support and query
/// batches of that episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDropoutMask {
    pub keep: f64,
    /// `masks[i]` belongs to embedding block `DROPOUT_BLOCKS[i]`.
    pub masks: Vec<Vec<f64>>,
}

impl TaskDropoutMask {
    /// Keep every channel; `keep = 1` makes this the identity.
    pub fn all_pass(channels: usize) -> Self {
        TaskDropoutMask {
            keep: 1.0,
            masks: vec![vec![1.0; channels]; DROPOUT_BLOCKS.len()],
        }
    }

    /// Each channel of each dropout block is kept independently with
    /// probability `keep`.
    pub fn sample(rng: &mut impl Rng, keep: f64, channels: usize) -> Result<Self> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Parameter(format!("keep probability {keep} not in (0, 1]")));
        }
        let masks = DROPOUT_BLOCKS
            .iter()
            .map(|_| {
                (0..channels)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Ok(TaskDropoutMask { keep, masks })
    }

    /// Mask for embedding block `block`, if that block takes dropout.
    pub fn for_block(&self, block: usize) -> Option<&[f64]> {
        DROPOUT_BLOCKS
            .iter()
            .position(|&b| b == block)
            .map(|i| self.masks[i].as_slice())
    }

    pub fn kept_fraction(&self) -> f64 {
        let total: usize = self.masks.iter().map(Vec::len).sum();
        let kept: f64 = self.masks.iter().flatten().sum();
        kept / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn keep_one_is_all_ones() {
        let mut rng = stream(3, Stream::DropoutMasks);
        let m = TaskDropoutMask::sample(&mut rng, 1.0, 64).unwrap();
        assert!(m.masks.iter().flatten().all(|&v| v == 1.0));
        assert_eq!(m.masks.len(), 2);
    }

    #[test]
    fn keep_half_is_near_half() {
        let mut rng = stream(4, Stream::DropoutMasks);
        let mut kept = 0.0;
        let mut total = 0.0;
        for _ in 0..10_000 {
            let m = TaskDropoutMask::sample(&mut rng, 0.5, 1).unwrap();
            kept += m.masks.iter().flatten().sum::<f64>();
            total += 2.0;
        }
        assert!((kept / total - 0.5).abs() < 0.02, "{}", kept / total);
    }

    #[test]
    fn replay_is_identical() {
        let a = TaskDropoutMask::sample(&mut stream(9, Stream::DropoutMasks), 0.5, 64).unwrap();
        let b = TaskDropoutMask::sample(&mut stream(9, Stream::DropoutMasks), 0.5, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_keep() {
        let mut rng = stream(0, Stream::DropoutMasks);
        assert!(TaskDropoutMask::sample(&mut rng, 0.0, 4).is_err());
        assert!(TaskDropoutMask::sample(&mut rng, 1.5, 4).is_err());
    }

    #[test]
    fn blocks_two_and_three_only() {
        let m = TaskDropoutMask::all_pass(4);
        assert!(m.for_block(0).is_none());
        assert!(m.for_block(1).is_some());
        assert!(m.for_block(2).is_some());
        assert!(m.for_block(3).is_none());
    }
}
