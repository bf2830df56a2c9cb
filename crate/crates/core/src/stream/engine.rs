use crate::context;
use crate::error::{Error, Result};
use crate::network::{ActivationStore, GradientSet, LayerParams, Network, ParamGrad};
use crate::ops::{conv_backward_kernel_wide, crop, ConvParams, Placement, SpatialAssembler, WideConvGrads};
use crate::parallel::par_map;
use crate::tensor::{Element, Region, Tensor};

use super::plan::{PlanMode, Tile, TilePlan};

/// Result of a streamed forward pass: the concatenated split-layer map and
/// the tail activations needed for the backward pass.
#[derive(Debug)]
pub struct StreamState<T: Element> {
    checkpoint: Tensor<T>,
    tail: ActivationStore<T>,
}

impl<T: Element> StreamState<T> {
    /// Network output; the checkpoint itself when the tail is empty.
    pub fn prediction(&self) -> &Tensor<T> {
        self.tail.outputs.last().unwrap_or(&self.checkpoint)
    }

    pub fn checkpoint(&self) -> &Tensor<T> {
        &self.checkpoint
    }

    pub fn into_prediction(mut self) -> Tensor<T> {
        self.tail.outputs.pop().unwrap_or(self.checkpoint)
    }
}

/// Marks which positions of a layer output have already been credited to
/// some tile.
#[derive(Debug, Clone, PartialEq)]
pub struct FilledMask {
    extent: Vec<usize>,
    marks: Vec<bool>,
    marked: usize,
}

impl FilledMask {
    pub fn new(extent: &[usize]) -> Self {
        Self {
            extent: extent.to_vec(),
            marks: vec![false; extent.iter().product()],
            marked: 0,
        }
    }

    pub fn extent(&self) -> &[usize] {
        &self.extent
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    pub fn marked(&self) -> usize {
        self.marked
    }

    pub fn is_complete(&self) -> bool {
        self.marked == self.marks.len()
    }

    fn flat(&self, pos: &[usize]) -> usize {
        pos.iter()
            .zip(&self.extent)
            .fold(0, |acc, (&p, &e)| acc * e + p)
    }

    pub fn is_marked(&self, pos: &[usize]) -> bool {
        self.marks[self.flat(pos)]
    }

    /// Flat index ranges, one per innermost-dim row of `region`.
    fn rows<'a>(&'a self, region: &'a Region) -> impl Iterator<Item = std::ops::Range<usize>> + 'a {
        let rank = region.rank();
        let inner = region.extent[rank - 1];
        let outer = Region::new(
            region.origin[..rank - 1].to_vec(),
            region.extent[..rank - 1].to_vec(),
        );
        let count = if region.is_empty() { 0 } else { outer.numel() };
        (0..count).map(move |mut i| {
            let mut pos = region.origin.clone();
            for d in (0..rank - 1).rev() {
                pos[d] += i % region.extent[d];
                i /= region.extent[d];
            }
            let start = self.flat(&pos);
            start..start + inner
        })
    }

    /// Marks every position of `region`. Marking a position twice is an error.
    pub fn claim(&mut self, region: &Region) -> Result<()> {
        if !Region::whole(&self.extent).contains_region(region) {
            return Err(Error::internal(format!(
                "claim {region:?} outside mask extent {:?}",
                self.extent
            )));
        }
        let rows: Vec<_> = self.rows(region).collect();
        for row in rows {
            let marks = &mut self.marks[row.clone()];
            if let Some(k) = marks.iter().position(|&m| m) {
                return Err(Error::internal(format!(
                    "flat position {} claimed twice",
                    row.start + k
                )));
            }
            marks.fill(true);
        }
        self.marked += region.numel();
        Ok(())
    }

    /// Bounding box of the unmarked positions inside `span`; errors when
    /// those positions do not fill the box. Empty when all are marked.
    fn unmarked_box(&self, span: &Region) -> Result<Region> {
        let rank = span.rank();
        let mut lo = vec![usize::MAX; rank];
        let mut hi = vec![0; rank];
        let mut count = 0;
        let outer_extent = &span.extent[..rank - 1];
        for (i, row) in self.rows(span).enumerate() {
            let marks = &self.marks[row];
            let Some(first) = marks.iter().position(|&m| !m) else { continue };
            let last = marks.iter().rposition(|&m| !m).unwrap();
            count += marks.iter().filter(|&&m| !m).count();
            let mut rest = i;
            for d in (0..rank - 1).rev() {
                let p = span.origin[d] + rest % outer_extent[d];
                rest /= outer_extent[d];
                lo[d] = lo[d].min(p);
                hi[d] = hi[d].max(p + 1);
            }
            lo[rank - 1] = lo[rank - 1].min(span.origin[rank - 1] + first);
            hi[rank - 1] = hi[rank - 1].max(span.origin[rank - 1] + last + 1);
        }
        if count == 0 {
            return Ok(Region::new(span.origin.clone(), vec![0; rank]));
        }
        let bbox = Region::new(lo.clone(), (0..rank).map(|d| hi[d] - lo[d]).collect());
        if bbox.numel() != count {
            return Err(Error::internal(format!(
                "unclaimed positions in {span:?} do not form a box"
            )));
        }
        Ok(bbox)
    }
}

/// Takes the not-yet-credited part of `span` from `filled`, marking it.
pub fn crop_unique(span: &Region, filled: &mut FilledMask) -> Result<Region> {
    let region = filled.unmarked_box(span)?;
    if !region.is_empty() {
        filled.claim(&region)?;
    }
    Ok(region)
}

/// The part of the split-layer gradient that lies over `tile`'s own output.
pub fn crop_relevant_gradient<T: Element>(
    grad: &Tensor<T>,
    plan: &TilePlan,
    tile: &Tile,
) -> Result<Tensor<T>> {
    crop(grad, &plan.footprint(tile))
}

/// Gradients and bookkeeping from a streamed backward pass.
#[derive(Debug)]
pub struct StreamGradients<T: Element> {
    pub grads: GradientSet<T>,
    /// One mask per prefix layer with parameters.
    pub filled: Vec<Option<FilledMask>>,
    pub input_filled: Option<FilledMask>,
}

fn check_input<T: Element>(net: &Network<T>, input: &Tensor<T>, plan: &TilePlan) -> Result<()> {
    crate::network::validate(net.spec(), input.shape())?;
    if input.spatial() != plan.input_size.as_slice() {
        return Err(Error::Usage(format!(
            "input spatial size {:?} does not match the plan's {:?}",
            input.spatial(),
            plan.input_size
        )));
    }
    if plan.depth() != net.split() {
        return Err(Error::Usage(format!(
            "plan covers {} layers, network splits after {}",
            plan.depth(),
            net.split()
        )));
    }
    Ok(())
}

/// Tiles processed per round: enough to keep every worker busy while
/// bounding how many tile activations exist at once.
pub(crate) fn round_len() -> usize {
    #[cfg(feature = "parallel")]
    if context::is_parallel() {
        return rayon::current_num_threads().max(1);
    }
    1
}

fn tile_forward<T: Element>(net: &Network<T>, input: &Tensor<T>, tile: &Tile) -> Result<Tensor<T>> {
    let x = crop(input, &tile.input)?;
    net.run_layers(0..net.split(), &x)
}

/// Runs the prefix tile by tile and the tail on the concatenated map.
pub fn stream_forward<T: Element>(
    net: &Network<T>,
    input: &Tensor<T>,
    plan: &TilePlan,
) -> Result<StreamState<T>> {
    check_input(net, input, plan)?;
    let trace = net.trace(input.batch())?;
    let split_shape = &trace.outputs[net.split() - 1];
    let mut assembler = SpatialAssembler::new(input.batch(), split_shape[1], &plan.output_size);
    context::phase("stream_forward", || -> Result<()> {
        for round in plan.tiles.chunks(round_len()) {
            let outputs = par_map(round, |tile| tile_forward(net, input, tile));
            for (tile, y) in round.iter().zip(outputs) {
                let y = y?;
                let origin = plan.footprint(tile).origin;
                assembler.place(
                    &y,
                    &Placement {
                        src: tile.output_region.relative_to(&origin),
                        dst_origin: tile.output_region.origin.clone(),
                    },
                )?;
            }
        }
        Ok(())
    })?;
    let checkpoint = assembler.finish()?;
    let tail = context::phase("tail_forward", || {
        net.record_layers(net.split()..net.layer_count(), &checkpoint)
    })?;
    Ok(StreamState { checkpoint, tail })
}

struct TileGrads<T: Element> {
    params: Vec<Option<WideConvGrads>>,
    input: Option<(Tensor<T>, Placement)>,
}

/// Kernel gradient restricted to the layer-output positions in `local`
/// (tile frame).
fn region_kernel_grad<T: Element>(
    p: &ConvParams<T>,
    input: &Tensor<T>,
    grad_output: &Tensor<T>,
    local: &Region,
) -> Result<Option<WideConvGrads>> {
    if local.is_empty() {
        return Ok(None);
    }
    let window = Region::new(
        local.origin.iter().zip(&p.stride).map(|(o, s)| o * s).collect(),
        local
            .extent
            .iter()
            .zip(&p.stride)
            .zip(p.kernel_extent())
            .map(|((e, s), k)| (e - 1) * s + k)
            .collect(),
    );
    conv_backward_kernel_wide(&crop(input, &window)?, &crop(grad_output, local)?, p).map(Some)
}

fn tile_backward<T: Element>(
    net: &Network<T>,
    input: &Tensor<T>,
    plan: &TilePlan,
    tile: &Tile,
    split_grad: &Tensor<T>,
    need_input: bool,
) -> Result<TileGrads<T>> {
    let split = net.split();
    let x = crop(input, &tile.input)?;
    let ActivationStore {
        mut outputs,
        argmax,
    } = net.record_layers(0..split, &x)?;
    let mut grad = crop_relevant_gradient(split_grad, plan, tile)?;
    let mut params = vec![None; split];
    for l in (0..split).rev() {
        // Layer l only needs its input; later activations are released.
        outputs.truncate(l);
        let lx = if l == 0 { &x } else { &outputs[l - 1] };
        if let (Some(claim), LayerParams::Conv(p)) = (plan.layer_claim(l, tile), &net.params()[l]) {
            let local = claim.relative_to(&plan.layer_offset(l, tile));
            params[l] = region_kernel_grad(p, lx, &grad, &local)?;
        }
        if l > 0 || need_input {
            grad = net.input_gradient(l, lx, argmax[l].as_ref(), &grad)?;
        }
    }
    let input_piece = if need_input {
        let (_, claim) = plan
            .input_claim(tile)
            .ok_or_else(|| Error::internal("plan has no input claims"))?;
        (!claim.is_empty()).then(|| {
            let placement = Placement {
                src: claim.relative_to(&tile.input.origin),
                dst_origin: claim.origin.clone(),
            };
            (grad, placement)
        })
    } else {
        None
    };
    Ok(TileGrads {
        params,
        input: input_piece,
    })
}

fn same_claim(a: &Region, b: &Region) -> bool {
    a == b || (a.is_empty() && b.is_empty())
}

/// Backward pass over a streamed forward. Consumes `state` so the tail
/// activations and the checkpoint are released before the tiles are
/// revisited. Tile contributions are summed in tile order, so the result
/// does not depend on the parallelism setting.
pub fn stream_backward<T: Element>(
    net: &Network<T>,
    input: &Tensor<T>,
    plan: &TilePlan,
    state: StreamState<T>,
    loss_grad: &Tensor<T>,
    need_input: bool,
) -> Result<StreamGradients<T>> {
    check_input(net, input, plan)?;
    match plan.mode {
        PlanMode::Forward => {
            return Err(Error::Usage("plan was built for a forward pass only".into()))
        }
        PlanMode::Backward if need_input => {
            return Err(Error::Usage(
                "input gradient requested from a plan without input claims".into(),
            ))
        }
        _ => {}
    }
    loss_grad.expect_shape(state.prediction().shape())?;
    let split = net.split();
    let mut grads = GradientSet::empty(net.layer_count());
    let split_grad = context::phase("tail_backward", || -> Result<Tensor<T>> {
        let StreamState { checkpoint, tail } = state;
        if split == net.layer_count() {
            return Ok(loss_grad.clone());
        }
        let g = net.backprop_layers(
            split..net.layer_count(),
            &checkpoint,
            &tail,
            loss_grad,
            true,
            &mut grads,
        )?;
        g.ok_or_else(|| Error::internal("tail produced no split gradient"))
    })?;

    let first = &plan.tiles[0];
    let mut filled: Vec<Option<FilledMask>> = (0..split)
        .map(|l| plan.valid_span(l, first).map(|_| FilledMask::new(plan.layer_size(l))))
        .collect();
    let mut input_filled = need_input.then(|| FilledMask::new(&plan.input_size));
    let mut input_grad = need_input
        .then(|| SpatialAssembler::new(input.batch(), input.channels(), &plan.input_size));
    // Tile contributions are added unrounded and rounded once at the end.
    let mut sums: Vec<Option<WideConvGrads>> = vec![None; split];

    context::phase("stream_backward", || -> Result<()> {
        for round in plan.tiles.chunks(round_len()) {
            let results = par_map(round, |tile| {
                tile_backward(net, input, plan, tile, &split_grad, need_input)
            });
            for (tile, result) in round.iter().zip(results) {
                let result = result?;
                for (l, mask) in filled.iter_mut().enumerate() {
                    let Some(mask) = mask else { continue };
                    let span = plan.valid_span(l, tile).expect("span exists with mask");
                    let region = crop_unique(&span, mask)?;
                    let claim = plan.layer_claim(l, tile).expect("claim exists with span");
                    if !same_claim(&region, &claim) {
                        return Err(Error::internal(format!(
                            "tile {} layer {l}: unclaimed share {region:?} differs from plan {claim:?}",
                            tile.index
                        )));
                    }
                }
                for (sum, part) in sums.iter_mut().zip(result.params) {
                    match (sum.as_mut(), part) {
                        (Some(acc), Some(part)) => acc.add_assign(&part),
                        (None, part) => *sum = part,
                        (_, None) => {}
                    }
                }
                if let (Some(mask), Some(asm)) = (input_filled.as_mut(), input_grad.as_mut()) {
                    let (span, claim) = plan.input_claim(tile).expect("input claims exist");
                    let region = crop_unique(&span, mask)?;
                    if !same_claim(&region, &claim) {
                        return Err(Error::internal(format!(
                            "tile {}: unclaimed input share {region:?} differs from plan {claim:?}",
                            tile.index
                        )));
                    }
                    if let Some((g, placement)) = result.input {
                        asm.place(&g, &placement)?;
                    }
                }
            }
        }
        Ok(())
    })?;

    for (l, mask) in filled.iter().enumerate() {
        if let Some(mask) = mask {
            if !mask.is_complete() {
                return Err(Error::internal(format!(
                    "layer {l}: {} of {} output positions never credited",
                    mask.len() - mask.marked(),
                    mask.len()
                )));
            }
        }
    }
    for (l, sum) in sums.into_iter().enumerate() {
        if let LayerParams::Conv(p) = &net.params()[l] {
            grads.layers[l] = Some(match sum {
                Some(sum) => {
                    let g = sum.round(p);
                    ParamGrad {
                        weight: g.kernel,
                        bias: g.bias,
                    }
                }
                None => ParamGrad {
                    weight: Tensor::zeros(p.kernel.shape()),
                    bias: p.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
                },
            });
        }
    }
    grads.input = input_grad.map(SpatialAssembler::finish).transpose()?;
    Ok(StreamGradients {
        grads,
        filled,
        input_filled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_double_claims() {
        let mut m = FilledMask::new(&[4, 4]);
        m.claim(&Region::new(vec![0, 0], vec![2, 4])).unwrap();
        assert_eq!(m.marked(), 8);
        assert!(m.claim(&Region::new(vec![1, 0], vec![1, 1])).is_err());
        assert!(m.claim(&Region::new(vec![3, 3], vec![2, 1])).is_err());
    }

    #[test]
    fn crop_unique_takes_the_unmarked_box() {
        let mut m = FilledMask::new(&[10]);
        let a = crop_unique(&Region::new(vec![0], vec![6]), &mut m).unwrap();
        assert_eq!(a, Region::new(vec![0], vec![6]));
        let b = crop_unique(&Region::new(vec![3], vec![7]), &mut m).unwrap();
        assert_eq!(b, Region::new(vec![6], vec![4]));
        assert!(m.is_complete());
        assert!(crop_unique(&Region::new(vec![2], vec![3]), &mut m).unwrap().is_empty());
    }

    #[test]
    fn crop_unique_rejects_holes() {
        let mut m = FilledMask::new(&[3, 3]);
        m.claim(&Region::new(vec![1, 1], vec![1, 1])).unwrap();
        assert!(crop_unique(&Region::whole(&[3, 3]), &mut m).is_err());
    }
}
