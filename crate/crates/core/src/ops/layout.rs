use serde::{Deserialize, Serialize};

use crate::context;
use crate::error::{Error, Result};
use crate::tensor::{as_2d, param_2d, Element, Region, Tensor};

fn check_region(spatial: &[usize], region: &Region, what: &str) -> Result<()> {
    if region.rank() != spatial.len() {
        return Err(Error::dim(format!(
            "{what}: region rank {} vs spatial rank {}",
            region.rank(),
            spatial.len()
        )));
    }
    if (0..spatial.len()).any(|d| region.end(d) > spatial[d]) {
        return Err(Error::dim(format!(
            "{what}: region {region:?} exceeds spatial extent {spatial:?}"
        )));
    }
    Ok(())
}

/// Copies a `(rows, cols)` window between two planes.
#[allow(clippy::too_many_arguments)]
fn copy_window<T: Copy>(
    src: &[T],
    src_w: usize,
    (sy, sx): (usize, usize),
    dst: &mut [T],
    dst_w: usize,
    (dy, dx): (usize, usize),
    (rows, cols): (usize, usize),
) {
    for r in 0..rows {
        let s = &src[(sy + r) * src_w + sx..][..cols];
        dst[(dy + r) * dst_w + dx..][..cols].copy_from_slice(s);
    }
}

/// Contiguous copy of `region` (over spatial dims, all batches and channels).
pub fn crop<T: Element>(t: &Tensor<T>, region: &Region) -> Result<Tensor<T>> {
    check_region(t.spatial(), region, "crop")?;
    if region.is_empty() {
        return Err(Error::dim("crop: empty region"));
    }
    let (h, w) = as_2d(t.spatial())?;
    let (oy, ox) = param_2d(&region.origin, 0);
    let (rh, rw) = param_2d(&region.extent, 1);
    let planes = t.batch() * t.channels();
    let mut out = vec![T::zero(); planes * rh * rw];
    if !context::is_shape_only() {
        for p in 0..planes {
            copy_window(
                &t.data()[p * h * w..][..h * w],
                w,
                (oy, ox),
                &mut out[p * rh * rw..][..rh * rw],
                rw,
                (0, 0),
                (rh, rw),
            );
        }
    }
    let mut shape = t.shape()[..2].to_vec();
    shape.extend_from_slice(&region.extent);
    Ok(Tensor::wrap(shape, out))
}

/// Where a tile's contribution lands: `src` is a region of the tile, copied
/// to the destination starting at `dst_origin`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub src: Region,
    pub dst_origin: Vec<usize>,
}

impl Placement {
    pub fn dst(&self) -> Region {
        Region::new(self.dst_origin.clone(), self.src.extent.clone())
    }
}

/// Incrementally assembles a tensor from tile pieces, refusing to write any
/// destination element twice.
pub struct SpatialAssembler<T: Element> {
    dest: Tensor<T>,
    written: Vec<bool>,
}

impl<T: Element> SpatialAssembler<T> {
    pub fn new(batch: usize, channels: usize, spatial: &[usize]) -> Self {
        let mut shape = vec![batch, channels];
        shape.extend_from_slice(spatial);
        Self {
            dest: Tensor::zeros(&shape),
            written: vec![false; spatial.iter().product()],
        }
    }

    pub fn place(&mut self, src: &Tensor<T>, placement: &Placement) -> Result<()> {
        if src.shape()[..2] != self.dest.shape()[..2] {
            return Err(Error::Placement(format!(
                "tile batch/channels {:?} do not match destination {:?}",
                &src.shape()[..2],
                &self.dest.shape()[..2]
            )));
        }
        check_region(src.spatial(), &placement.src, "placement source")?;
        let dst_region = placement.dst();
        check_region(self.dest.spatial(), &dst_region, "placement destination")
            .map_err(|e| Error::Placement(e.to_string()))?;
        let (_, dw) = as_2d(self.dest.spatial())?;
        let (dy, dx) = param_2d(&dst_region.origin, 0);
        let (rh, rw) = param_2d(&dst_region.extent, 1);
        for r in 0..rh {
            let row = &mut self.written[(dy + r) * dw + dx..][..rw];
            if let Some(c) = row.iter().position(|&w| w) {
                return Err(Error::Placement(format!(
                    "destination element ({}, {}) written twice",
                    dy + r,
                    dx + c
                )));
            }
            row.iter_mut().for_each(|w| *w = true);
        }
        if !context::is_shape_only() {
            let (sh, sw) = as_2d(src.spatial())?;
            let (sy, sx) = param_2d(&placement.src.origin, 0);
            let (h, _) = as_2d(self.dest.spatial())?;
            let planes = src.batch() * src.channels();
            let dest = self.dest.data_mut();
            for p in 0..planes {
                copy_window(
                    &src.data()[p * sh * sw..][..sh * sw],
                    sw,
                    (sy, sx),
                    &mut dest[p * h * dw..][..h * dw],
                    dw,
                    (dy, dx),
                    (rh, rw),
                );
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Tensor<T>> {
        if let Some(i) = self.written.iter().position(|&w| !w) {
            return Err(Error::Placement(format!(
                "destination element {i} (flat spatial index) never written"
            )));
        }
        Ok(self.dest)
    }
}

/// Writes each tile's designated sub-region into a fresh destination tensor.
/// Every destination element must be written exactly once.
pub fn concat_spatial<T: Element>(
    parts: &[(&Tensor<T>, Placement)],
    dest_spatial: &[usize],
) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Placement("no tiles to concatenate".into()))?;
    let mut asm = SpatialAssembler::new(first.0.batch(), first.0.channels(), dest_spatial);
    for (tile, placement) in parts {
        asm.place(tile, placement)?;
    }
    asm.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::{conv_forward, ConvParams};

    fn t1(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, data.len()], data.to_vec()).unwrap()
    }

    fn at(src: Region, dst: usize) -> Placement {
        Placement {
            src,
            dst_origin: vec![dst],
        }
    }

    #[test]
    fn concatenated_tiles_equal_unsplit_output() {
        // x = [1,2,3,4], w = [1,0,-1]; f = N - n = 1, f // 2 = 0
        let x = t1(&[1.0, 2.0, 3.0, 4.0]);
        let p = ConvParams::new(
            Tensor::from_vec(&[1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap(),
            None,
            vec![1],
        )
        .unwrap();
        let full = conv_forward(&x, &p).unwrap();
        let a = conv_forward(&crop(&x, &Region::new(vec![0], vec![3])).unwrap(), &p).unwrap();
        let b = conv_forward(&crop(&x, &Region::new(vec![1], vec![3])).unwrap(), &p).unwrap();
        assert_eq!(a.data(), &[-2.0]);
        assert_eq!(b.data(), &[-2.0]);
        let joined = concat_spatial(
            &[
                (&a, at(Region::new(vec![0], vec![1]), 0)),
                (&b, at(Region::new(vec![0], vec![1]), 1)),
            ],
            &[2],
        )
        .unwrap();
        assert!(joined.bit_eq(&full));
    }

    #[test]
    fn single_tile_is_identity() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| i as f64);
        let out = concat_spatial(
            &[(
                &t,
                Placement {
                    src: Region::whole(&[4, 5]),
                    dst_origin: vec![0, 0],
                },
            )],
            &[4, 5],
        )
        .unwrap();
        assert!(out.bit_eq(&t));
    }

    #[test]
    fn gap_and_overlap_are_placement_errors() {
        let a = t1(&[1.0, 2.0]);
        let gap = concat_spatial(&[(&a, at(Region::new(vec![0], vec![2]), 0))], &[3]);
        assert!(matches!(gap, Err(Error::Placement(_))));
        let twice = concat_spatial(
            &[
                (&a, at(Region::new(vec![0], vec![2]), 0)),
                (&a, at(Region::new(vec![0], vec![2]), 1)),
            ],
            &[3],
        );
        assert!(matches!(twice, Err(Error::Placement(_))));
    }

    #[test]
    fn crop_2d_copies_window() {
        let t = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let c = crop(&t, &Region::new(vec![1, 2], vec![2, 2])).unwrap();
        assert_eq!(c.shape(), &[1, 2, 2, 2]);
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0, 22.0, 23.0, 26.0, 27.0]);
        assert!(crop(&t, &Region::new(vec![3, 0], vec![2, 1])).is_err());
    }
}
