//! Voxel and image U-Nets with step-wise decoders.
//!
//! Both branches share one topology: an encoder of `S` levels (the first at
//! full resolution, each further one entered by a stride-2 convolution) and a
//! decoder that walks back up. Decoder *scale* `j` (0 = coarsest) exposes its
//! feature map before the next level consumes it, which is where the fusion
//! hooks plug in.

mod voxel;

pub use voxel::{grid_dims, level_dims, voxelize, VoxelGrid, VOXEL_CHANNELS};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{
    add_bias, concat, conv2d, conv3d, gather_rows, matmul, relu, reshape, scatter_mean_replace, softmax, upsample2d,
    upsample3d, ParamSet, Tensor,
};

const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchConfig {
    /// Encoder widths of the voxel branch, finest level first.
    pub widths_3d: Vec<usize>,
    /// Encoder widths of the image branch, finest level first.
    pub widths_2d: Vec<usize>,
    pub num_classes: usize,
    /// Voxel edge in meters.
    pub voxel_size: f64,
    /// Largest allowed grid extent along any axis.
    pub max_grid_extent: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        BranchConfig {
            widths_3d: vec![16, 32, 64],
            widths_2d: vec![16, 32, 64],
            num_classes: 6,
            voxel_size: 0.05,
            max_grid_extent: 32,
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths_3d.is_empty() || self.widths_3d.len() != self.widths_2d.len() {
            bail!(
                Config,
                "both branches need the same non-zero number of scales, got {} and {}",
                self.widths_3d.len(),
                self.widths_2d.len()
            );
        }
        if self.widths_3d.iter().chain(&self.widths_2d).any(|&w| w == 0) {
            bail!(Config, "channel widths must be positive");
        }
        if self.num_classes < 2 {
            bail!(Config, "need at least 2 classes, got {}", self.num_classes);
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            bail!(Config, "voxel_size must be positive, got {}", self.voxel_size);
        }
        if self.max_grid_extent == 0 {
            bail!(Config, "max_grid_extent must be positive");
        }
        Ok(())
    }

    pub fn scales(&self) -> usize {
        self.widths_3d.len()
    }

    /// Voxel feature width at each decoder scale, coarsest first.
    pub fn fused_widths_3d(&self) -> Vec<usize> {
        self.widths_3d.iter().rev().copied().collect()
    }

    /// Image feature width at each decoder scale, coarsest first.
    pub fn fused_widths_2d(&self) -> Vec<usize> {
        self.widths_2d.iter().rev().copied().collect()
    }

    pub fn unet_3d(&self) -> UNet {
        UNet::new("b3", 3, VOXEL_CHANNELS, self.widths_3d.clone(), self.num_classes)
    }

    pub fn unet_2d(&self) -> UNet {
        UNet::new("b2", 2, 3, self.widths_2d.clone(), self.num_classes)
    }

    /// Fresh parameters for both branches.
    pub fn init_params<R: Rng>(&self, rng: &mut R, params: &mut ParamSet) -> Result<()> {
        self.validate()?;
        self.unet_3d().init(rng, params)?;
        self.unet_2d().init(rng, params)
    }
}

/// Branch result. 3D features are per point (`N x d`), 2D features are maps
/// (`h_l x w_l x d`); logits and probabilities are `elements x C` with 2D
/// elements in row-major pixel order.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// Decoder features per scale, coarsest first, as seen by the hook.
    pub features: Vec<Tensor>,
    pub logits: Tensor,
    pub probs: Tensor,
}

/// A dense U-Net over a 2D or 3D channels-last grid.
#[derive(Clone, Debug)]
pub struct UNet {
    prefix: String,
    rank: usize,
    in_channels: usize,
    widths: Vec<usize>,
    classes: usize,
}

impl UNet {
    pub fn new(prefix: &str, rank: usize, in_channels: usize, widths: Vec<usize>, classes: usize) -> UNet {
        assert!(rank == 2 || rank == 3, "only 2D and 3D grids are supported");
        UNet { prefix: prefix.to_string(), rank, in_channels, widths, classes }
    }

    pub fn scales(&self) -> usize {
        self.widths.len()
    }

    /// Decoder width at `scale` (0 = coarsest).
    pub fn width_at_scale(&self, scale: usize) -> usize {
        self.widths[self.scales() - 1 - scale]
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn kernel_shape(&self, cin: usize, cout: usize) -> Vec<usize> {
        let mut s = vec![KERNEL; self.rank];
        s.extend([cin, cout]);
        s
    }

    /// Parameter names and shapes in creation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let w = &self.widths;
        let mut out = vec![(self.name("enc0"), self.kernel_shape(self.in_channels, w[0]))];
        for l in 1..w.len() {
            out.push((self.name(&format!("down{l}")), self.kernel_shape(w[l - 1], w[l])));
            out.push((self.name(&format!("enc{l}")), self.kernel_shape(w[l], w[l])));
        }
        for l in (0..w.len() - 1).rev() {
            out.push((self.name(&format!("dec{l}")), self.kernel_shape(w[l + 1] + w[l], w[l])));
        }
        out.push((self.name("head.w"), vec![w[0], self.classes]));
        out.push((self.name("head.b"), vec![self.classes]));
        out
    }

    /// He-normal convolutions, Glorot-scaled head, zero head bias.
    pub fn init<R: Rng>(&self, rng: &mut R, params: &mut ParamSet) -> Result<()> {
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("head.b") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let gain = if name.ends_with("head.w") { 1.0 } else { 2.0 };
                let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt())
                    .map_err(|e| crate::Error::Internal(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            };
            params.insert(name, &shape, data)?;
        }
        Ok(())
    }

    fn conv(&self, x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
        if self.rank == 3 {
            conv3d(x, w, stride)
        } else {
            conv2d(x, w, stride)
        }
    }

    fn upsample(&self, x: &Tensor, target: &[usize]) -> Result<Tensor> {
        if self.rank == 3 {
            upsample3d(x, [target[0], target[1], target[2]])
        } else {
            upsample2d(x, [target[0], target[1]])
        }
    }

    /// Runs the encoder on a channels-last grid and returns a decoder poised
    /// before its coarsest scale.
    pub fn begin<'a>(&'a self, params: &'a ParamSet, x: &Tensor) -> Result<Decoder<'a>> {
        if x.rank() != self.rank + 1 || x.shape()[self.rank] != self.in_channels {
            bail!(
                Contract,
                "{} expects a rank-{} grid with {} channels, got {:?}",
                self.prefix,
                self.rank + 1,
                self.in_channels,
                x.shape()
            );
        }
        let mut skips = Vec::with_capacity(self.scales());
        let mut h = relu(&self.conv(x, params.get(&self.name("enc0"))?, 1)?);
        skips.push(h.clone());
        for l in 1..self.scales() {
            let down = relu(&self.conv(&h, params.get(&self.name(&format!("down{l}")))?, 2)?);
            h = relu(&self.conv(&down, params.get(&self.name(&format!("enc{l}")))?, 1)?);
            skips.push(h.clone());
        }
        Ok(Decoder { net: self, params, skips, current: None, next_scale: 0 })
    }
}

/// Step-wise decoder state.
pub struct Decoder<'a> {
    net: &'a UNet,
    params: &'a ParamSet,
    skips: Vec<Tensor>,
    current: Option<Tensor>,
    next_scale: usize,
}

impl Decoder<'_> {
    pub fn scale(&self) -> usize {
        self.next_scale
    }

    pub fn finished(&self) -> bool {
        self.next_scale == self.net.scales()
    }

    /// Encoder level (number of stride-2 reductions) of the current map.
    pub fn level(&self) -> usize {
        self.net.scales() - self.next_scale
    }

    /// Computes the decoder map of the next scale and returns it.
    pub fn step(&mut self) -> Result<Tensor> {
        let s = self.net.scales();
        if self.finished() {
            bail!(State, "decoder already produced all {s} scales");
        }
        let level = s - 1 - self.next_scale;
        let map = match &self.current {
            None => self.skips[level].clone(),
            Some(prev) => {
                let skip = &self.skips[level];
                let spatial = &skip.shape()[..self.net.rank];
                let up = self.net.upsample(prev, spatial)?;
                let cat = concat(&[up, skip.clone()], self.net.rank)?;
                let w = self.params.get(&self.net.name(&format!("dec{level}")))?;
                relu(&self.net.conv(&cat, w, 1)?)
            }
        };
        self.current = Some(map.clone());
        self.next_scale += 1;
        Ok(map)
    }

    /// The current map flattened to `cells x d`.
    pub fn rows(&self) -> Result<Tensor> {
        let Some(cur) = &self.current else { bail!(State, "decoder has not produced a scale yet") };
        let d = cur.shape()[self.net.rank];
        reshape(cur, &[cur.numel() / d, d])
    }

    /// Replaces the current map by `rows` (`cells x d`).
    pub fn replace_rows(&mut self, rows: Tensor) -> Result<()> {
        let Some(cur) = &self.current else { bail!(State, "decoder has not produced a scale yet") };
        let d = cur.shape()[self.net.rank];
        if rows.shape() != [cur.numel() / d, d] {
            bail!(Contract, "replacement rows {:?} do not match the {:?} map", rows.shape(), cur.shape());
        }
        let shape = cur.shape().to_vec();
        self.current = Some(reshape(&rows, &shape)?);
        Ok(())
    }

    /// Class logits for the selected rows of the finest map (all rows when `rows` is `None`).
    pub fn head(&self, rows: Option<&[usize]>) -> Result<Tensor> {
        if !self.finished() {
            bail!(State, "head needs the finest decoder scale, at scale {}", self.next_scale);
        }
        let mut x = self.rows()?;
        if let Some(idx) = rows {
            x = gather_rows(&x, idx)?;
        }
        let w = self.params.get(&self.net.name("head.w"))?;
        let b = self.params.get(&self.net.name("head.b"))?;
        add_bias(&matmul(&x, w)?, b)
    }
}

/// Per-scene voxel branch input: the grid plus point-to-cell maps per level.
#[derive(Clone, Debug)]
pub struct VoxelInput {
    pub grid: VoxelGrid,
    /// `level_cells[l][i]`: cell of point `i` after `l` reductions.
    pub level_cells: Vec<Vec<usize>>,
}

impl VoxelInput {
    pub fn new(grid: VoxelGrid, scales: usize) -> VoxelInput {
        let level_cells = (0..scales).map(|l| grid.point_cells_at_level(l)).collect();
        VoxelInput { grid, level_cells }
    }

    pub fn from_points(points: &[[f32; 3]], colors: &[[f32; 3]], room: [f64; 3], cfg: &BranchConfig) -> Result<VoxelInput> {
        let dims = grid_dims(room, cfg.voxel_size, cfg.scales(), cfg.max_grid_extent)?;
        Ok(VoxelInput::new(voxelize(points, colors, cfg.voxel_size, dims)?, cfg.scales()))
    }

    pub fn num_points(&self) -> usize {
        self.grid.point_coords.len()
    }

    pub fn tensor(&self) -> Result<Tensor> {
        let d = self.grid.dims;
        Tensor::new(&[d[0], d[1], d[2], VOXEL_CHANNELS], self.grid.features.clone())
    }
}

/// Maps flat full-resolution pixel indices to cell rows of a level map.
pub fn pixel_cells_at_level(pixels: &[usize], width: usize, hw_level: [usize; 2], level: usize) -> Vec<usize> {
    pixels.iter().map(|&p| ((p / width) >> level) * hw_level[1] + ((p % width) >> level)).collect()
}

/// Voxel branch walking its decoder one scale at a time in point space.
pub struct VoxelStream<'a> {
    pub decoder: Decoder<'a>,
    input: &'a VoxelInput,
    gathered: Option<Tensor>,
}

impl<'a> VoxelStream<'a> {
    pub fn begin(net: &'a UNet, params: &'a ParamSet, input: &'a VoxelInput) -> Result<VoxelStream<'a>> {
        Ok(VoxelStream { decoder: net.begin(params, &input.tensor()?)?, input, gathered: None })
    }

    /// Next decoder scale, gathered to points (`N x d`).
    pub fn step(&mut self) -> Result<Tensor> {
        self.decoder.step()?;
        let level = self.decoder.level();
        let g = gather_rows(&self.decoder.rows()?, &self.input.level_cells[level])?;
        self.gathered = Some(g.clone());
        Ok(g)
    }

    /// Writes per-point features back to their cells (mean over co-located
    /// points). Handing back the tensor returned by `step` is a no-op.
    pub fn scatter(&mut self, points: &Tensor) -> Result<()> {
        let Some(g) = &self.gathered else { bail!(State, "scatter before step") };
        if points.ptr_eq(g) {
            return Ok(());
        }
        if points.shape() != g.shape() {
            bail!(Contract, "fused point features {:?}, expected {:?}", points.shape(), g.shape());
        }
        let level = self.decoder.level();
        let rows = scatter_mean_replace(&self.decoder.rows()?, &self.input.level_cells[level], points)?;
        self.decoder.replace_rows(rows)
    }

    /// Per-point logits after the last scale.
    pub fn head(&self) -> Result<Tensor> {
        self.decoder.head(Some(&self.input.level_cells[0]))
    }
}

/// Image branch walking its decoder one scale at a time.
pub struct ImageStream<'a> {
    pub decoder: Decoder<'a>,
    height: usize,
    width: usize,
    gathered: Option<(Vec<usize>, Tensor)>,
}

impl<'a> ImageStream<'a> {
    /// `image` is `h x w x 3` row-major.
    pub fn begin(net: &'a UNet, params: &'a ParamSet, image: &[f64], height: usize, width: usize) -> Result<ImageStream<'a>> {
        let x = Tensor::new(&[height, width, 3], image.to_vec())?;
        Ok(ImageStream { decoder: net.begin(params, &x)?, height, width, gathered: None })
    }

    /// Next decoder map (`h_l x w_l x d`).
    pub fn step(&mut self) -> Result<Tensor> {
        self.gathered = None;
        self.decoder.step()
    }

    /// Features of the current map at the given full-resolution pixels.
    pub fn gather(&mut self, pixels: &[usize]) -> Result<Tensor> {
        let level = self.decoder.level();
        let hw = level_dims([self.height, self.width], level);
        let cells = pixel_cells_at_level(pixels, self.width, hw, level);
        let g = gather_rows(&self.decoder.rows()?, &cells)?;
        self.gathered = Some((cells, g.clone()));
        Ok(g)
    }

    /// Writes fused features for the last gathered pixels back into the map.
    pub fn scatter(&mut self, values: &Tensor) -> Result<()> {
        let Some((cells, g)) = &self.gathered else { bail!(State, "scatter before gather") };
        if values.ptr_eq(g) {
            return Ok(());
        }
        if values.shape() != g.shape() {
            bail!(Contract, "fused pixel features {:?}, expected {:?}", values.shape(), g.shape());
        }
        let rows = scatter_mean_replace(&self.decoder.rows()?, cells, values)?;
        self.decoder.replace_rows(rows)
    }

    pub fn head(&self) -> Result<Tensor> {
        self.decoder.head(None)
    }
}

/// Full voxel-branch pass. `hook(scale, point_features)` sees each decoder
/// scale gathered to points and returns the features to scatter back.
pub fn forward_3d(
    input: &VoxelInput,
    net: &UNet,
    params: &ParamSet,
    hook: &mut dyn FnMut(usize, &Tensor) -> Result<Tensor>,
) -> Result<BranchOutput> {
    let mut stream = VoxelStream::begin(net, params, input)?;
    let mut features = Vec::with_capacity(net.scales());
    for scale in 0..net.scales() {
        let g = stream.step()?;
        let fused = hook(scale, &g)?;
        stream.scatter(&fused)?;
        features.push(g);
    }
    let logits = stream.head()?;
    let probs = softmax(&logits, 1)?;
    Ok(BranchOutput { features, logits, probs })
}

/// Full image-branch pass. `hook(scale, pair_features)` sees the features of
/// the paired `pixels` at each scale.
pub fn forward_2d(
    image: &[f64],
    height: usize,
    width: usize,
    pixels: &[usize],
    net: &UNet,
    params: &ParamSet,
    hook: &mut dyn FnMut(usize, &Tensor) -> Result<Tensor>,
) -> Result<BranchOutput> {
    if let Some(&p) = pixels.iter().find(|&&p| p >= height * width) {
        bail!(Argument, "pixel {p} outside a {height}x{width} image");
    }
    let mut stream = ImageStream::begin(net, params, image, height, width)?;
    let mut features = Vec::with_capacity(net.scales());
    for scale in 0..net.scales() {
        let map = stream.step()?;
        if !pixels.is_empty() {
            let g = stream.gather(pixels)?;
            let fused = hook(scale, &g)?;
            stream.scatter(&fused)?;
        }
        features.push(map);
    }
    let logits = stream.head()?;
    let probs = softmax(&logits, 1)?;
    Ok(BranchOutput { features, logits, probs })
}

/// Hook that hands features back untouched.
pub fn identity_hook(_scale: usize, x: &Tensor) -> Result<Tensor> {
    Ok(x.clone())
}

#[cfg(test)]
mod tests;
