//! Small binary-grid morphology helpers: connected components (6-neighbor),
//! Chebyshev dilation, centroid, and tight bounding box.

/// Number of 6-connected components among nonzero voxels.
pub fn connected_components(mask: &[f64], dims: (usize, usize, usize)) -> usize {
    let (d, h, w) = dims;
    assert_eq!(mask.len(), d * h * w);
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut visited = vec![false; mask.len()];
    let mut components = 0;
    let mut queue = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx(z, y, x);
                if mask[i] == 0.0 || visited[i] {
                    continue;
                }
                components += 1;
                visited[i] = true;
                queue.push((z, y, x));
                while let Some((cz, cy, cx)) = queue.pop() {
                    let mut visit = |nz: usize, ny: usize, nx: usize| {
                        let ni = idx(nz, ny, nx);
                        if mask[ni] != 0.0 && !visited[ni] {
                            visited[ni] = true;
                            queue.push((nz, ny, nx));
                        }
                    };
                    if cz > 0 {
                        visit(cz - 1, cy, cx);
                    }
                    if cz + 1 < d {
                        visit(cz + 1, cy, cx);
                    }
                    if cy > 0 {
                        visit(cz, cy - 1, cx);
                    }
                    if cy + 1 < h {
                        visit(cz, cy + 1, cx);
                    }
                    if cx > 0 {
                        visit(cz, cy, cx - 1);
                    }
                    if cx + 1 < w {
                        visit(cz, cy, cx + 1);
                    }
                }
            }
        }
    }
    components
}

/// Chebyshev (box) dilation by `radius` voxels.
pub fn dilate(mask: &[f64], dims: (usize, usize, usize), radius: usize) -> Vec<f64> {
    let (d, h, w) = dims;
    if radius == 0 {
        return mask.to_vec();
    }
    let r = radius as i64;
    let mut out = vec![0.0; mask.len()];
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask[idx(z, y, x)] == 0.0 {
                    continue;
                }
                for dz in -r..=r {
                    let nz = z as i64 + dz;
                    if nz < 0 || nz >= d as i64 {
                        continue;
                    }
                    for dy in -r..=r {
                        let ny = y as i64 + dy;
                        if ny < 0 || ny >= h as i64 {
                            continue;
                        }
                        for dx in -r..=r {
                            let nx = x as i64 + dx;
                            if nx < 0 || nx >= w as i64 {
                                continue;
                            }
                            out[idx(nz as usize, ny as usize, nx as usize)] = 1.0;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Centroid of nonzero voxels as fractional (z, y, x). `None` when empty.
pub fn mask_centroid(mask: &[f64], dims: (usize, usize, usize)) -> Option<(f64, f64, f64)> {
    let (d, h, w) = dims;
    let (mut sz, mut sy, mut sx, mut n) = (0.0, 0.0, 0.0, 0.0);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask[(z * h + y) * w + x] != 0.0 {
                    sz += z as f64;
                    sy += y as f64;
                    sx += x as f64;
                    n += 1.0;
                }
            }
        }
    }
    if n == 0.0 {
        None
    } else {
        Some((sz / n, sy / n, sx / n))
    }
}

/// Tight inclusive bounding box (z0, z1, y0, y1, x0, x1) of nonzero voxels.
pub fn bounding_box(
    mask: &[f64],
    dims: (usize, usize, usize),
) -> Option<(usize, usize, usize, usize, usize, usize)> {
    let (d, h, w) = dims;
    let mut bb: Option<(usize, usize, usize, usize, usize, usize)> = None;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask[(z * h + y) * w + x] == 0.0 {
                    continue;
                }
                bb = Some(match bb {
                    None => (z, z, y, y, x, x),
                    Some((z0, z1, y0, y1, x0, x1)) => (
                        z0.min(z),
                        z1.max(z),
                        y0.min(y),
                        y1.max(y),
                        x0.min(x),
                        x1.max(x),
                    ),
                });
            }
        }
    }
    bb
}
