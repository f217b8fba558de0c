//! Tile formats, synthetic corpora and augmentation.

pub mod augment;
pub mod dataset;
pub mod synth;
pub mod tile;

pub use augment::{augment_pair, augment_view, AugmentConfig};
pub use dataset::{Dataset, IndexRecord, Sample};
pub use synth::{generate_sample, synth_dataset, SynthSpec, Task};
pub use tile::{read_mask, read_tile, write_mask, write_tile, ImageTile, MaskTile, IGNORE};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Stacks tiles into an `[N, C, H, W]` tensor.
pub fn tiles_to_tensor<'a>(tiles: impl IntoIterator<Item = &'a ImageTile>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut n = 0;
    for t in tiles {
        let d = (t.channels(), t.height(), t.width());
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::ShapeMismatch {
                    op: "tiles_to_tensor",
                    lhs: vec![prev.0, prev.1, prev.2],
                    rhs: vec![d.0, d.1, d.2],
                })
            }
            _ => {}
        }
        data.extend(t.data().iter().map(|v| *v as f64));
        n += 1;
    }
    let (c, h, w) = dims.ok_or_else(|| Error::InvalidArgument("empty tile batch".into()))?;
    Tensor::new([n, c, h, w], data)
}
