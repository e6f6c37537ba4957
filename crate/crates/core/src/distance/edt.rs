//! Exact Euclidean distance transform by separable lower envelopes of
//! parabolas, one pass per axis, with spacing-scaled coordinates.

use rayon::prelude::*;

use crate::volume::{LabelVolume, Volume};
use crate::{Error, Result};

/// Squared distance along one line of samples spaced `h` apart.
///
/// `f` holds squared distances from the previous passes (`INFINITY` where no
/// site has been seen); it is overwritten with the 1D transform. `v` and `z`
/// are scratch buffers of length at least `f.len()` and `f.len() + 1`.
fn transform_line(f: &mut [f64], h: f64, v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut have_site = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !have_site {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            have_site = true;
            continue;
        }
        let fq = f[q] + (q as f64 * h).powi(2);
        loop {
            let p = v[k];
            let fp = f[p] + (p as f64 * h).powi(2);
            let s = (fq - fp) / (2.0 * h * (q - p) as f64);
            if s <= z[k] {
                // k > 0 here since z[0] is -inf.
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !have_site {
        return;
    }
    let sites: Vec<f64> = v[..=k].iter().map(|&p| f[p]).collect();
    let mut j = 0usize;
    for (q, out) in f.iter_mut().enumerate() {
        let x = q as f64 * h;
        while z[j + 1] < x {
            j += 1;
        }
        let d = x - v[j] as f64 * h;
        *out = d * d + sites[j];
    }
}

/// Squared distance (mm²) from every voxel centre to the nearest voxel
/// centre where `site` is true. All-`INFINITY` when there is no site.
pub(crate) fn squared_edt(site: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut buf: Vec<f64> = site.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let longest = nx.max(ny).max(nz);

    // x then y: each z-slice is independent.
    buf.par_chunks_mut(nx * ny).for_each(|slice| {
        let mut v = vec![0usize; longest];
        let mut z = vec![0f64; longest + 1];
        let mut line = vec![0f64; longest];
        for row in slice.chunks_mut(nx) {
            transform_line(row, spacing[0], &mut v, &mut z);
        }
        for x in 0..nx {
            for y in 0..ny {
                line[y] = slice[x + nx * y];
            }
            transform_line(&mut line[..ny], spacing[1], &mut v, &mut z);
            for y in 0..ny {
                slice[x + nx * y] = line[y];
            }
        }
    });

    let mut v = vec![0usize; longest];
    let mut z = vec![0f64; longest + 1];
    let mut line = vec![0f64; nz];
    let plane = nx * ny;
    for xy in 0..plane {
        for k in 0..nz {
            line[k] = buf[xy + plane * k];
        }
        transform_line(&mut line, spacing[2], &mut v, &mut z);
        for k in 0..nz {
            buf[xy + plane * k] = line[k];
        }
    }
    buf
}

/// Signed distance in millimetres from each voxel centre to the boundary of
/// the `target_label` structure: outside voxels get the distance to the
/// nearest target voxel centre, inside voxels minus the distance to the
/// nearest non-target voxel centre.
pub fn signed_distance_transform(mask: &LabelVolume, target_label: u8) -> Result<Volume> {
    let g = *mask.geometry();
    let inside: Vec<bool> = mask.labels().iter().map(|&l| l == target_label).collect();
    let n_inside = inside.iter().filter(|&&b| b).count();
    if n_inside == 0 || n_inside == inside.len() {
        return Err(Error::DegenerateMask(target_label));
    }
    let outside: Vec<bool> = inside.iter().map(|&b| !b).collect();
    let to_target = squared_edt(&inside, g.dims, g.spacing);
    let to_rest = squared_edt(&outside, g.dims, g.spacing);
    let data = inside
        .iter()
        .enumerate()
        .map(|(i, &is_in)| {
            if is_in {
                -(to_rest[i].sqrt() as f32)
            } else {
                to_target[i].sqrt() as f32
            }
        })
        .collect();
    Volume::new(g, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Palette;
    use crate::volume::Geometry;

    #[test]
    fn single_voxel_structure() {
        let g = Geometry::unit([3, 1, 1]).unwrap();
        let m = LabelVolume::new(g, vec![0, 1, 0], Palette::bones()).unwrap();
        let d = signed_distance_transform(&m, 1).unwrap();
        assert_eq!(d.data(), &[1.0, -1.0, 1.0]);
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        let g = Geometry::unit([2, 2, 2]).unwrap();
        let all = LabelVolume::filled(g, 1, Palette::bones()).unwrap();
        assert!(matches!(
            signed_distance_transform(&all, 1),
            Err(Error::DegenerateMask(1))
        ));
        assert!(matches!(
            signed_distance_transform(&all, 2),
            Err(Error::DegenerateMask(2))
        ));
    }

    #[test]
    fn line_transform_handles_sparse_sites() {
        let mut f = vec![f64::INFINITY, f64::INFINITY, 0.0, f64::INFINITY, f64::INFINITY, 0.0];
        let mut v = vec![0; 6];
        let mut z = vec![0.0; 7];
        transform_line(&mut f, 0.5, &mut v, &mut z);
        assert_eq!(f, vec![1.0, 0.25, 0.0, 0.25, 0.25, 0.0]);
    }
}
