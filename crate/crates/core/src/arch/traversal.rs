//! Linearizations of a 3D token grid used by the directional scans.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis nesting of a linearization, outermost first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisOrder {
    /// depth, height, width (plain row-major)
    DepthMajor,
    /// height, width, depth
    HeightMajor,
    /// width, depth, height
    WidthMajor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Direction {
    pub axes: AxisOrder,
    pub reverse: bool,
}

impl Direction {
    /// Flat row-major grid offsets in the order this direction visits them.
    pub fn sequence(self, dims: [usize; 3]) -> Vec<usize> {
        let [d, h, w] = dims;
        let flat = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
        let mut seq = Vec::with_capacity(d * h * w);
        match self.axes {
            AxisOrder::DepthMajor => {
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            seq.push(flat(z, y, x));
                        }
                    }
                }
            }
            AxisOrder::HeightMajor => {
                for y in 0..h {
                    for x in 0..w {
                        for z in 0..d {
                            seq.push(flat(z, y, x));
                        }
                    }
                }
            }
            AxisOrder::WidthMajor => {
                for x in 0..w {
                    for z in 0..d {
                        for y in 0..h {
                            seq.push(flat(z, y, x));
                        }
                    }
                }
            }
        }
        if self.reverse {
            seq.reverse();
        }
        seq
    }
}

/// Direction set for `count` scans: 2 gives forward/reverse depth-major,
/// 6 adds the height- and width-major pairs.
pub fn directions(count: usize) -> Result<Vec<Direction>> {
    let axes: &[AxisOrder] = match count {
        2 => &[AxisOrder::DepthMajor],
        6 => &[
            AxisOrder::DepthMajor,
            AxisOrder::HeightMajor,
            AxisOrder::WidthMajor,
        ],
        n => {
            return Err(Error::invalid(format!(
                "scan direction count must be 2 or 6, got {n}"
            )))
        }
    };
    Ok(axes
        .iter()
        .flat_map(|&axes| {
            [false, true]
                .into_iter()
                .map(move |reverse| Direction { axes, reverse })
        })
        .collect())
}

/// Gather indices turning `[B, D, H, W, E]` into the `[B, L, E]` sequence of
/// `seq`, and the inverse indices mapping the sequence back onto the grid.
pub(crate) fn permutation_indices(
    seq: &[usize],
    batch: usize,
    channels: usize,
) -> (Vec<usize>, Vec<usize>) {
    let len = seq.len();
    let mut position_of = vec![0; len];
    for (t, &q) in seq.iter().enumerate() {
        position_of[q] = t;
    }
    let mut forward = Vec::with_capacity(batch * len * channels);
    let mut inverse = Vec::with_capacity(batch * len * channels);
    for b in 0..batch {
        let base = b * len * channels;
        for &q in seq {
            forward.extend((0..channels).map(|e| base + q * channels + e));
        }
        for &t in &position_of {
            inverse.extend((0..channels).map(|e| base + t * channels + e));
        }
    }
    (forward, inverse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_direction_is_a_permutation() {
        let dims = [2, 3, 4];
        for dir in directions(6).unwrap() {
            let mut seq = dir.sequence(dims);
            seq.sort_unstable();
            assert_eq!(seq, (0..24).collect::<Vec<_>>());
        }
    }

    #[test]
    fn height_major_walks_depth_fastest() {
        let dir = Direction {
            axes: AxisOrder::HeightMajor,
            reverse: false,
        };
        // dims d=2, h=1, w=2: (z,y,x) -> z*2 + x
        assert_eq!(dir.sequence([2, 1, 2]), vec![0, 2, 1, 3]);
    }

    #[test]
    fn bad_direction_count() {
        assert!(directions(4).is_err());
        assert_eq!(directions(2).unwrap().len(), 2);
    }

    #[test]
    fn inverse_undoes_forward() {
        let seq = Direction {
            axes: AxisOrder::WidthMajor,
            reverse: true,
        }
        .sequence([2, 2, 3]);
        let (fwd, inv) = permutation_indices(&seq, 2, 3);
        let composed: Vec<usize> = inv.iter().map(|&i| fwd[i]).collect();
        assert_eq!(composed, (0..72).collect::<Vec<_>>());
    }
}
