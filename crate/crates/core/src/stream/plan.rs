use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerSpec, NetworkSpec};
use crate::probe::{canonical_tile, cumulative_strides, prefix_windows, probe, ProbeReport};
use crate::tensor::Region;

/// Which passes a plan must support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Forward only: tiles need just enough overlap to meet at the split layer.
    Forward,
    /// Forward and parameter gradients.
    Backward,
    /// Forward, parameter gradients and the input gradient.
    BackwardWithInput,
}

impl PlanMode {
    pub fn has_backward(self) -> bool {
        self != PlanMode::Forward
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    /// Position in row-major processing order.
    pub index: usize,
    /// Position in the tile grid, one entry per spatial dim.
    pub grid_pos: Vec<usize>,
    /// Window of the input this tile reads.
    pub input: Region,
    /// Region of the concatenated split-layer map this tile writes.
    pub output_region: Region,
}

/// Half-open span `[start, end)` along one axis.
type Span = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Axis {
    starts: Vec<usize>,
    lengths: Vec<usize>,
    /// Split-layer output written by each tile.
    output_claims: Vec<Span>,
    /// Per prefix layer with parameters: positions of the layer output whose
    /// gradient each tile reproduces exactly, and the first-tile-wins share
    /// of them it accounts for. Empty for parameter-free layers.
    layer_spans: Vec<Vec<Span>>,
    layer_claims: Vec<Vec<Span>>,
    /// Same for the network input, when the plan includes input gradients.
    input_spans: Vec<Span>,
    input_claims: Vec<Span>,
}

/// Tile layout for one input geometry. Tiles are ordered row-major by their
/// grid position and every tile origin lies on the output-stride grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub input_size: Vec<usize>,
    pub tile_size: Vec<usize>,
    pub grid: Vec<usize>,
    pub tiles: Vec<Tile>,
    /// Input pixels shared by consecutive interior tiles, per dim.
    pub overlap: Vec<usize>,
    pub output_stride: Vec<usize>,
    pub mode: PlanMode,
    /// Split-layer extent of the whole input.
    pub output_size: Vec<usize>,
    /// `(window, stride)` of each prefix layer.
    layer_windows: Vec<(usize, usize)>,
    /// Cumulative stride at each prefix layer output.
    layer_strides: Vec<usize>,
    /// Whole-input extent of each prefix layer output, per dim.
    layer_sizes: Vec<Vec<usize>>,
    axes: Vec<Axis>,
}

fn out_len(n: usize, k: usize, s: usize) -> usize {
    if n < k {
        0
    } else {
        (n - k) / s + 1
    }
}

/// Extent of every prefix layer output for an input extent `n`.
fn layer_lengths(windows: &[(usize, usize)], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(windows.len());
    let mut cur = n;
    for &(k, s) in windows {
        cur = out_len(cur, k, s);
        out.push(cur);
    }
    out
}

/// First-tile-wins partition of per-tile spans; errors on a gap or if the
/// spans do not end at `total`.
fn first_wins(spans: &[Span], total: usize, what: &str) -> Result<Vec<Span>> {
    let mut covered = 0;
    let mut claims = Vec::with_capacity(spans.len());
    for &(a, b) in spans {
        if a > covered {
            return Err(Error::TileTooSmall(format!(
                "{what}: positions {covered}..{a} are not reproduced by any tile"
            )));
        }
        claims.push((covered, b.max(covered)));
        covered = covered.max(b);
    }
    if covered != total {
        return Err(Error::internal(format!(
            "{what}: tiles reach {covered} of {total} positions"
        )));
    }
    Ok(claims)
}

struct AxisInput<'a> {
    dim: usize,
    n: usize,
    tile: usize,
    windows: &'a [(usize, usize)],
    has_params: &'a [bool],
    report: &'a ProbeReport,
    mode: PlanMode,
}

fn tile_starts(n: usize, tile: usize, step: usize, s: usize) -> Vec<usize> {
    let last = (n - tile) / s * s;
    let mut starts = Vec::new();
    let mut a = 0;
    while a < last {
        starts.push(a);
        a += step;
    }
    starts.push(last);
    starts
}

/// Largest stride-aligned step for which consecutive tiles leave no gap in
/// any quantity the mode needs.
fn max_step(inp: &AxisInput, tile: usize) -> Result<usize> {
    let strides = cumulative_strides(inp.windows);
    let s = *strides.last().unwrap();
    let lens = layer_lengths(inp.windows, tile);
    let depth = inp.windows.len();
    if lens[depth - 1] == 0 {
        return Err(Error::TileTooSmall(format!(
            "a tile of {tile} produces no split-layer output"
        )));
    }
    let mut step = s * lens[depth - 1];
    let shrink = |n: usize, (lo, hi): (usize, usize), what: String| -> Result<usize> {
        n.checked_sub(lo + hi).filter(|&v| v > 0).ok_or_else(|| {
            Error::TileTooSmall(format!(
                "{what}: tile of {tile} leaves no exact gradient between borders {lo} and {hi}"
            ))
        })
    };
    if inp.mode.has_backward() {
        for l in (0..depth).filter(|&l| inp.has_params[l]) {
            let widths = if l + 1 == depth {
                (0, 0)
            } else {
                inp.report.layers[l + 1].invalid_backward[inp.dim]
            };
            step = step.min(strides[l + 1] * shrink(lens[l], widths, format!("layer {l}"))?);
        }
    }
    if inp.mode == PlanMode::BackwardWithInput {
        step = step.min(shrink(
            tile,
            inp.report.layers[0].invalid_backward[inp.dim],
            "input".into(),
        )?);
    }
    let step = step / s * s;
    if step == 0 {
        return Err(Error::TileTooSmall(format!(
            "tile of {tile} cannot advance by a whole output stride of {s}"
        )));
    }
    Ok(step)
}

fn plan_axis(inp: &AxisInput) -> Result<(Axis, usize, usize)> {
    let strides = cumulative_strides(inp.windows);
    let s = *strides.last().unwrap();
    let depth = inp.windows.len();
    let (tile, starts, step) = if inp.tile >= inp.n {
        (inp.n, vec![0], inp.n)
    } else {
        let tile = inp.tile / s * s;
        if tile == 0 {
            return Err(Error::TileTooSmall(format!(
                "tile of {} is smaller than the output stride {s}",
                inp.tile
            )));
        }
        let step = max_step(inp, tile)?;
        (tile, tile_starts(inp.n, tile, step, s), step)
    };
    let count = starts.len();
    let lengths: Vec<usize> = starts
        .iter()
        .enumerate()
        .map(|(j, &a)| if j + 1 == count { inp.n - a } else { tile })
        .collect();
    let full = layer_lengths(inp.windows, inp.n);
    let per_tile: Vec<Vec<usize>> = lengths.iter().map(|&t| layer_lengths(inp.windows, t)).collect();

    let out_spans: Vec<Span> = starts
        .iter()
        .zip(&per_tile)
        .map(|(&a, lens)| (a / s, a / s + lens[depth - 1]))
        .collect();
    let output_claims = first_wins(&out_spans, full[depth - 1], "split layer")?;

    let edge_aware = |j: usize, start: usize, len: usize, (lo, hi): (usize, usize)| -> Span {
        let lo = if j == 0 { 0 } else { lo };
        let hi = if j + 1 == count { 0 } else { hi };
        (start + lo, (start + len).saturating_sub(hi).max(start + lo))
    };
    let mut layer_spans = vec![Vec::new(); depth];
    let mut layer_claims = vec![Vec::new(); depth];
    if inp.mode.has_backward() {
        for l in (0..depth).filter(|&l| inp.has_params[l]) {
            let widths = if l + 1 == depth {
                (0, 0)
            } else {
                inp.report.layers[l + 1].invalid_backward[inp.dim]
            };
            let spans: Vec<Span> = (0..count)
                .map(|j| edge_aware(j, starts[j] / strides[l + 1], per_tile[j][l], widths))
                .collect();
            layer_claims[l] = first_wins(&spans, full[l], &format!("layer {l}"))?;
            layer_spans[l] = spans;
        }
    }
    let (mut input_spans, mut input_claims) = (Vec::new(), Vec::new());
    if inp.mode == PlanMode::BackwardWithInput {
        let widths = inp.report.layers[0].invalid_backward[inp.dim];
        input_spans = (0..count)
            .map(|j| edge_aware(j, starts[j], lengths[j], widths))
            .collect();
        input_claims = first_wins(&input_spans, inp.n, "input")?;
    }
    let overlap = if count > 1 { tile - step } else { 0 };
    Ok((
        Axis {
            starts,
            lengths,
            output_claims,
            layer_spans,
            layer_claims,
            input_spans,
            input_claims,
        },
        tile,
        overlap,
    ))
}

impl TilePlan {
    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    pub fn rank(&self) -> usize {
        self.input_size.len()
    }

    pub fn depth(&self) -> usize {
        self.layer_strides.len()
    }

    fn region(&self, tile: &Tile, pick: impl Fn(&Axis, usize) -> Span) -> Region {
        let (origin, extent) = self
            .axes
            .iter()
            .zip(&tile.grid_pos)
            .map(|(axis, &j)| {
                let (a, b) = pick(axis, j);
                (a, b - a)
            })
            .unzip();
        Region::new(origin, extent)
    }

    /// Where the tile's own layer-`l` output sits in the whole-input layer-`l` output.
    pub fn layer_offset(&self, l: usize, tile: &Tile) -> Vec<usize> {
        tile.input
            .origin
            .iter()
            .map(|a| a / self.layer_strides[l])
            .collect()
    }

    /// Whole-input extent of prefix layer `l`'s output.
    pub fn layer_size(&self, l: usize) -> &[usize] {
        &self.layer_sizes[l]
    }

    /// The tile's split-layer output window in the concatenated map,
    /// including positions another tile writes.
    pub fn footprint(&self, tile: &Tile) -> Region {
        let depth = self.depth();
        let extent = tile
            .input
            .extent
            .iter()
            .map(|&t| layer_lengths(&self.layer_windows, t)[depth - 1])
            .collect();
        Region::new(self.layer_offset(depth - 1, tile), extent)
    }

    /// Layer-`l` output positions (whole-input coordinates) whose gradient
    /// this tile reproduces exactly. `None` for parameter-free layers or
    /// forward-only plans.
    pub fn valid_span(&self, l: usize, tile: &Tile) -> Option<Region> {
        if self.axes[0].layer_spans[l].is_empty() {
            return None;
        }
        Some(self.region(tile, |a, j| a.layer_spans[l][j]))
    }

    /// The first-tile-wins share of [`TilePlan::valid_span`].
    pub fn layer_claim(&self, l: usize, tile: &Tile) -> Option<Region> {
        if self.axes[0].layer_claims[l].is_empty() {
            return None;
        }
        Some(self.region(tile, |a, j| a.layer_claims[l][j]))
    }

    /// Input positions whose gradient this tile reproduces, and its claimed share.
    pub fn input_claim(&self, tile: &Tile) -> Option<(Region, Region)> {
        if self.axes[0].input_claims.is_empty() {
            return None;
        }
        Some((
            self.region(tile, |a, j| a.input_spans[j]),
            self.region(tile, |a, j| a.input_claims[j]),
        ))
    }
}

/// Lays out tiles of (at most) `requested_tile` over `input_size` using the
/// border widths in `report`. Tile sizes are rounded down to the output
/// stride; a request at least as large as the input yields a single tile.
pub fn plan_tiles(
    spec: &NetworkSpec,
    input_size: &[usize],
    requested_tile: &[usize],
    report: &ProbeReport,
    mode: PlanMode,
) -> Result<TilePlan> {
    spec.check_structure()?;
    let rank = input_size.len();
    if !(1..=2).contains(&rank) || requested_tile.len() != rank || report.rank() != rank {
        return Err(Error::dim(format!(
            "input {input_size:?}, tile {requested_tile:?} and probe rank {} disagree",
            report.rank()
        )));
    }
    let windows = prefix_windows(spec);
    if report.layers.len() != windows.len() || report.output_stride[0] != spec.output_stride() {
        return Err(Error::Usage("probe report does not belong to this network".into()));
    }
    let has_params: Vec<bool> = spec
        .prefix()
        .iter()
        .map(|l| matches!(l, LayerSpec::Conv { .. }))
        .collect();
    let mut axes = Vec::with_capacity(rank);
    let mut tile_size = Vec::with_capacity(rank);
    let mut overlap = Vec::with_capacity(rank);
    for d in 0..rank {
        let n = input_size[d];
        let lens = layer_lengths(&windows, n);
        if lens.last() == Some(&0) {
            return Err(Error::ShapeUnderflow {
                index: lens.iter().position(|&v| v == 0).unwrap(),
                kind: "prefix".into(),
                detail: format!("input extent {n} is too small for the streamed prefix"),
            });
        }
        let (axis, t, o) = plan_axis(&AxisInput {
            dim: d,
            n,
            tile: requested_tile[d],
            windows: &windows,
            has_params: &has_params,
            report,
            mode,
        })?;
        axes.push(axis);
        tile_size.push(t);
        overlap.push(o);
    }
    let grid: Vec<usize> = axes.iter().map(|a| a.starts.len()).collect();
    let mut tiles = Vec::with_capacity(grid.iter().product());
    let positions: Vec<Vec<usize>> = if rank == 1 {
        (0..grid[0]).map(|j| vec![j]).collect()
    } else {
        (0..grid[0])
            .flat_map(|r| (0..grid[1]).map(move |c| vec![r, c]))
            .collect()
    };
    for (index, grid_pos) in positions.into_iter().enumerate() {
        let (origin, extent): (Vec<usize>, Vec<usize>) = axes
            .iter()
            .zip(&grid_pos)
            .map(|(a, &j)| (a.starts[j], a.lengths[j]))
            .unzip();
        let (out_origin, out_extent): (Vec<usize>, Vec<usize>) = axes
            .iter()
            .zip(&grid_pos)
            .map(|(a, &j)| (a.output_claims[j].0, a.output_claims[j].1 - a.output_claims[j].0))
            .unzip();
        tiles.push(Tile {
            index,
            grid_pos,
            input: Region::new(origin, extent),
            output_region: Region::new(out_origin, out_extent),
        });
    }
    let strides = cumulative_strides(&windows);
    let layer_sizes = (0..windows.len())
        .map(|l| {
            input_size
                .iter()
                .map(|&n| layer_lengths(&windows, n)[l])
                .collect()
        })
        .collect::<Vec<Vec<usize>>>();
    Ok(TilePlan {
        input_size: input_size.to_vec(),
        tile_size,
        grid,
        tiles,
        overlap,
        output_stride: vec![*strides.last().unwrap(); rank],
        mode,
        output_size: layer_sizes.last().unwrap().clone(),
        layer_windows: windows,
        layer_strides: strides[1..].to_vec(),
        layer_sizes,
        axes,
    })
}

/// Probes the prefix at its canonical tile size and plans with it. Border
/// widths do not depend on the tile size, so one probe serves every request.
pub fn plan_for(
    spec: &NetworkSpec,
    input_size: &[usize],
    requested_tile: &[usize],
    mode: PlanMode,
) -> Result<TilePlan> {
    spec.check_structure()?;
    let report = probe(spec, &canonical_tile(spec, input_size.len())?)?;
    plan_tiles(spec, input_size, requested_tile, &report, mode)
}

/// Chooses, per dim, the smallest stride-aligned tile that needs at most
/// `grid[d]` tiles, then plans with it.
pub fn plan_for_grid(
    spec: &NetworkSpec,
    input_size: &[usize],
    grid: &[usize],
    mode: PlanMode,
) -> Result<TilePlan> {
    spec.check_structure()?;
    if grid.len() != input_size.len() || grid.contains(&0) {
        return Err(Error::Usage(format!(
            "tile grid {grid:?} does not match input {input_size:?}"
        )));
    }
    let rank = input_size.len();
    let s = spec.output_stride();
    let reference = probe(spec, &canonical_tile(spec, rank)?)?;
    let mut chosen = Vec::with_capacity(rank);
    for d in 0..rank {
        let n = input_size[d];
        let mut pick = n;
        if grid[d] > 1 {
            let mut t = s;
            while t < n {
                let mut one_d = vec![n; rank];
                one_d[d] = t;
                if let Ok(p) = plan_tiles(spec, input_size, &one_d, &reference, mode) {
                    if p.grid[d] <= grid[d] {
                        pick = t;
                        break;
                    }
                }
                t += s;
            }
        }
        chosen.push(pick);
    }
    plan_tiles(spec, input_size, &chosen, &reference, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::parse_spec;

    fn spec(body: &str, split: usize) -> NetworkSpec {
        parse_spec(&format!("split={split} dtype=f64\n{body}")).unwrap()
    }

    #[test]
    fn one_dim_ten_wide_two_tiles() {
        let s = spec("conv out=1 k=3\n", 1);
        let plan = plan_for(&s, &[10], &[6], PlanMode::Backward).unwrap();
        let starts: Vec<usize> = plan.tiles.iter().map(|t| t.input.origin[0]).collect();
        assert_eq!(starts, vec![0, 4]);
        assert!(plan.tiles.iter().all(|t| t.input.extent == vec![6]));
        let regions: Vec<(usize, usize)> = plan
            .tiles
            .iter()
            .map(|t| (t.output_region.origin[0], t.output_region.end(0)))
            .collect();
        assert_eq!(regions, vec![(0, 4), (4, 8)]);
        assert_eq!(plan.overlap, vec![2]);
    }

    #[test]
    fn whole_input_tile_is_single() {
        let s = spec("conv out=1 k=3\n", 1);
        let plan = plan_for(&s, &[9, 9], &[9, 9], PlanMode::BackwardWithInput).unwrap();
        assert_eq!(plan.tile_count(), 1);
        assert_eq!(plan.overlap, vec![0, 0]);
        assert_eq!(plan.tiles[0].output_region, Region::whole(&[7, 7]));
        let t = &plan.tiles[0];
        assert_eq!(plan.layer_claim(0, t).unwrap(), Region::whole(&[7, 7]));
        assert_eq!(plan.input_claim(t).unwrap().1, Region::whole(&[9, 9]));
    }

    #[test]
    fn table1_geometry_uses_four_tiles() {
        let s = parse_spec(include_str!("../../../../nets/bench3.net")).unwrap();
        let plan = plan_for(&s, &[1024, 1024], &[527, 527], PlanMode::Backward).unwrap();
        assert_eq!(plan.tile_count(), 4);
        assert_eq!(plan.tile_size, vec![527, 527]);
    }

    #[test]
    fn grid_request_respects_count() {
        let s = spec("conv out=1 k=3\nmaxpool k=2\nconv out=1 k=3\n", 3);
        for g in 1..=4 {
            let plan = plan_for_grid(&s, &[64, 40], &[g, g], PlanMode::Backward).unwrap();
            assert!(plan.grid.iter().all(|&c| c <= g), "{:?}", plan.grid);
            assert!(plan.tiles.iter().all(|t| t.input.origin.iter().all(|o| o % 2 == 0)));
        }
    }

    #[test]
    fn tiny_tile_is_rejected() {
        let s = spec("conv out=1 k=3\nconv out=1 k=3\n", 2);
        assert!(matches!(
            plan_for(&s, &[40], &[5], PlanMode::Backward),
            Err(Error::TileTooSmall(_))
        ));
    }
}
