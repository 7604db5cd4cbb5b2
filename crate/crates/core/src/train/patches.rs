use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Placement of cubic patches over a `[C, D, H, W]` volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    /// Patch corners, lexicographically sorted.
    pub origins: Vec<[usize; 3]>,
    pub patch_size: usize,
    pub stride: usize,
    pub channels: usize,
    pub dims: [usize; 3],
}

impl PatchGrid {
    /// Voxels shared by neighbouring patches along an axis.
    pub fn overlap(&self) -> usize {
        self.patch_size - self.stride
    }
}

/// Origins along one axis: multiples of `stride`, plus a final origin
/// clamped to `n - p` so the axis is covered.
fn axis_origins(n: usize, p: usize, stride: usize) -> Vec<usize> {
    let mut o: Vec<usize> = (0..).map(|k| k * stride).take_while(|&x| x + p <= n).collect();
    if *o.last().expect("p <= n") + p < n {
        o.push(n - p);
    }
    o
}

fn volume_dims(v: &Tensor) -> Result<(usize, [usize; 3])> {
    match v.shape() {
        [c, d, h, w] => Ok((*c, [*d, *h, *w])),
        s => dim_err(format!("expected a [C, D, H, W] volume, got {s:?}")),
    }
}

pub fn patch_grid(v: &Tensor, patch_size: usize, stride: usize) -> Result<PatchGrid> {
    let (channels, dims) = volume_dims(v)?;
    if patch_size == 0 || dims.iter().any(|&n| patch_size > n) {
        return dim_err(format!(
            "patch size {patch_size} does not fit volume {dims:?}"
        ));
    }
    if stride == 0 || stride > patch_size {
        return Err(Error::Usage(format!(
            "stride must be in 1..={patch_size}, got {stride}"
        )));
    }
    let [oz, oy, ox] = dims.map(|n| axis_origins(n, patch_size, stride));
    let mut origins = Vec::with_capacity(oz.len() * oy.len() * ox.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(PatchGrid {
        origins,
        patch_size,
        stride,
        channels,
        dims,
    })
}

/// Copies the cube of side `p` at `origin` out of a `[C, D, H, W]` volume.
pub fn extract_patch(v: &Tensor, origin: [usize; 3], p: usize) -> Result<Tensor> {
    let (c, [d, h, w]) = volume_dims(v)?;
    if origin[0] + p > d || origin[1] + p > h || origin[2] + p > w {
        return dim_err(format!("patch at {origin:?} of size {p} leaves {:?}", [d, h, w]));
    }
    let src = v.data();
    let mut out = Vec::with_capacity(c * p * p * p);
    for ch in 0..c {
        for z in origin[0]..origin[0] + p {
            for y in origin[1]..origin[1] + p {
                let row = ((ch * d + z) * h + y) * w + origin[2];
                out.extend_from_slice(&src[row..row + p]);
            }
        }
    }
    Tensor::new(&[c, p, p, p], out)
}

/// Splits a volume into overlapping cubic patches that cover it.
pub fn unfold(v: &Tensor, patch_size: usize, stride: usize) -> Result<(Vec<Tensor>, PatchGrid)> {
    let grid = patch_grid(v, patch_size, stride)?;
    let patches = grid
        .origins
        .iter()
        .map(|&o| extract_patch(v, o, patch_size))
        .collect::<Result<_>>()?;
    Ok((patches, grid))
}

/// Reassembles patches; voxels covered more than once get the mean.
pub fn merge(patches: &[Tensor], grid: &PatchGrid) -> Result<Tensor> {
    if patches.len() != grid.origins.len() {
        return Err(Error::Usage(format!(
            "{} patches for a grid of {}",
            patches.len(),
            grid.origins.len()
        )));
    }
    let p = grid.patch_size;
    let (c, [d, h, w]) = (grid.channels, grid.dims);
    let mut sum = vec![0f64; c * d * h * w];
    let mut count = vec![0u32; d * h * w];
    for (patch, &o) in patches.iter().zip(&grid.origins) {
        if patch.shape() != [c, p, p, p] {
            return Err(Error::Usage(format!(
                "patch of shape {:?} in a grid of [{c}, {p}, {p}, {p}] patches",
                patch.shape()
            )));
        }
        let src = patch.data();
        for ch in 0..c {
            for z in 0..p {
                for y in 0..p {
                    let dst = ((ch * d + o[0] + z) * h + o[1] + y) * w + o[2];
                    let s = ((ch * p + z) * p + y) * p;
                    for x in 0..p {
                        sum[dst + x] += src[s + x] as f64;
                    }
                    if ch == 0 {
                        let cdst = ((o[0] + z) * h + o[1] + y) * w + o[2];
                        count[cdst..cdst + p].iter_mut().for_each(|n| *n += 1);
                    }
                }
            }
        }
    }
    let vol = d * h * w;
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, &s)| (s / count[i % vol] as f64) as f32)
        .collect();
    Tensor::new(&[c, d, h, w], data)
}
