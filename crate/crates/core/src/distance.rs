//! Exact Euclidean distance transforms on anisotropic voxel grids.

/// Voxels of `mask` that touch the background through a face. Foreground
/// voxels on the volume border count as boundary.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    assert_eq!(mask.len(), nx * ny * nz);
    let mut out = vec![false; mask.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                if !mask[idx] {
                    continue;
                }
                out[idx] = i == 0
                    || i + 1 == nx
                    || j == 0
                    || j + 1 == ny
                    || k == 0
                    || k + 1 == nz
                    || !mask[idx - 1]
                    || !mask[idx + 1]
                    || !mask[idx - nx]
                    || !mask[idx + nx]
                    || !mask[idx - nx * ny]
                    || !mask[idx + nx * ny];
            }
        }
    }
    out
}

/// Squared distance (mm²) from every voxel center to the nearest voxel of
/// `set`; `f64::INFINITY` everywhere when `set` is empty.
///
/// Separable lower-envelope transform, one pass per axis. Every returned
/// value is a sum `Σ (Δᵢ·sᵢ)²` over the axes taken in x, y, z order, so it
/// matches a brute-force search term for term.
pub fn squared_edt(set: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    assert_eq!(set.len(), nx * ny * nz);
    let mut f: Vec<f64> = set.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, nx, nx * ny];
    let max_n = nx.max(ny).max(nz);
    let mut line = vec![0.0; max_n];
    let mut out = vec![0.0; max_n];
    let mut scratch = Envelope::with_capacity(max_n);
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for u in 0..dims[a] {
            for v in 0..dims[b] {
                let base = u * strides[a] + v * strides[b];
                for q in 0..n {
                    line[q] = f[base + q * stride];
                }
                scratch.transform(&line[..n], spacing[axis], &mut out[..n]);
                for q in 0..n {
                    f[base + q * stride] = out[q];
                }
            }
        }
    }
    f
}

/// Euclidean distance (mm) to the nearest voxel of `set`.
pub fn edt(set: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut d = squared_edt(set, dims, spacing);
    for v in &mut d {
        *v = v.sqrt();
    }
    d
}

struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            sites: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    /// `out[q] = min_p (s·(q − p))² + f[p]` over finite `f[p]`.
    fn transform(&mut self, f: &[f64], s: f64, out: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        // Intersection abscissa (in index units) of the parabolas rooted at
        // p and q, p < q.
        let meet = |p: usize, q: usize| {
            let (pf, qf) = (p as f64, q as f64);
            ((f[q] / (s * s) + qf * qf) - (f[p] / (s * s) + pf * pf)) / (2.0 * (qf - pf))
        };
        for (q, fq) in f.iter().enumerate() {
            if !fq.is_finite() {
                continue;
            }
            loop {
                match self.sites.last() {
                    None => {
                        self.sites.push(q);
                        self.bounds.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let x = meet(p, q);
                        if x <= *self.bounds.last().expect("one bound per site") {
                            self.sites.pop();
                            self.bounds.pop();
                        } else {
                            self.sites.push(q);
                            self.bounds.push(x);
                            break;
                        }
                    }
                }
            }
        }
        if self.sites.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while k + 1 < self.sites.len() && self.bounds[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.sites[k];
            let d = (q as f64 - p as f64) * s;
            *o = d * d + f[p];
        }
    }
}
