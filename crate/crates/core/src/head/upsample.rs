/// Bilinear resampling from a coarse grid to the label grid (half-pixel
/// centers, edge clamping). Stored as four taps per output pixel so the
/// adjoint is a scatter.
#[derive(Debug, Clone)]
pub struct Upsampler {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    taps: Vec<[(u32, f64); 4]>,
}

fn axis(src: usize, dst: usize, i: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src - 1);
    let i1 = (i0 + 1).min(src - 1);
    let w = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
    (i0, i1, w)
}

impl Upsampler {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        let mut taps = Vec::with_capacity(dst.0 * dst.1);
        for y in 0..dst.0 {
            let (y0, y1, wy) = axis(src.0, dst.0, y);
            for x in 0..dst.1 {
                let (x0, x1, wx) = axis(src.1, dst.1, x);
                let idx = |yy: usize, xx: usize| (yy * src.1 + xx) as u32;
                taps.push([
                    (idx(y0, x0), (1.0 - wy) * (1.0 - wx)),
                    (idx(y0, x1), (1.0 - wy) * wx),
                    (idx(y1, x0), wy * (1.0 - wx)),
                    (idx(y1, x1), wy * wx),
                ]);
            }
        }
        Upsampler { src, dst, taps }
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    /// Resamples one row of `src.0·src.1` values.
    pub fn forward_row(&self, row: &[f64], out: &mut [f64]) {
        if self.is_identity() {
            out.copy_from_slice(row);
            return;
        }
        for (o, taps) in out.iter_mut().zip(&self.taps) {
            *o = taps.iter().map(|&(i, w)| w * row[i as usize]).sum();
        }
    }

    /// Adjoint of [`forward_row`](Self::forward_row), accumulated into `out`.
    pub fn backward_row(&self, grad: &[f64], out: &mut [f64]) {
        if self.is_identity() {
            for (o, g) in out.iter_mut().zip(grad) {
                *o += g;
            }
            return;
        }
        for (g, taps) in grad.iter().zip(&self.taps) {
            for &(i, w) in taps {
                out[i as usize] += w * g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_preserved() {
        let up = Upsampler::new((8, 8), (32, 32));
        let mut out = vec![0.0; 1024];
        up.forward_row(&[2.5; 64], &mut out);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-14));
    }

    #[test]
    fn adjoint_identity() {
        let up = Upsampler::new((3, 4), (7, 9));
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..63).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut ua = vec![0.0; 63];
        up.forward_row(&a, &mut ua);
        let mut utb = vec![0.0; 12];
        up.backward_row(&b, &mut utb);
        let lhs: f64 = ua.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&utb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn same_size_is_identity() {
        let up = Upsampler::new((4, 4), (4, 4));
        let a: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut out = vec![0.0; 16];
        up.forward_row(&a, &mut out);
        assert_eq!(out, a);
    }
}
