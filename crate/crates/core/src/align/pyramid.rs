//! Grayscale intensity/gradient pyramid for the photometric steps.

use crate::raster::Image;

/// Level `l` pixel `i` sits at level-0 coordinate `s·i + (s−1)/2` with `s = 2^l`.
#[derive(Debug, Clone)]
pub struct Level {
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    /// `[I, ∂I/∂x, ∂I/∂y]` per pixel; gradients in level-0 units.
    pub data: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl Level {
    fn from_intensity(width: usize, height: usize, scale: f64, v: &[f64], valid: &[bool]) -> Self {
        let mut data = vec![[0.0; 3]; width * height];
        let mut gvalid = valid.to_vec();
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                data[i][0] = v[i];
                let (xa, xb) = (x.saturating_sub(1), (x + 1).min(width - 1));
                let (ya, yb) = (y.saturating_sub(1), (y + 1).min(height - 1));
                let taps = [y * width + xa, y * width + xb, ya * width + x, yb * width + x];
                if taps.iter().any(|t| !valid[*t]) {
                    gvalid[i] = false;
                    continue;
                }
                let dx = (xb - xa).max(1) as f64;
                let dy = (yb - ya).max(1) as f64;
                data[i][1] = (v[taps[1]] - v[taps[0]]) / dx / scale;
                data[i][2] = (v[taps[3]] - v[taps[2]]) / dy / scale;
            }
        }
        Self { width, height, scale, data, valid: gvalid }
    }

    #[inline]
    pub fn to_level(&self, p0: [f64; 2]) -> [f64; 2] {
        let o = 0.5 * (self.scale - 1.0);
        [(p0[0] - o) / self.scale, (p0[1] - o) / self.scale]
    }

    #[inline]
    pub fn to_base(&self, x: usize, y: usize) -> [f64; 2] {
        let o = 0.5 * (self.scale - 1.0);
        [self.scale * x as f64 + o, self.scale * y as f64 + o]
    }

    /// Bilinear `[I, Ix, Iy]` at level-0 coordinate `p0`; `None` outside the level or
    /// when a contributing tap is invalid.
    #[inline]
    pub fn sample(&self, p0: [f64; 2]) -> Option<[f64; 3]> {
        let [x, y] = self.to_level(p0);
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let (xf, yf) = (x.floor(), y.floor());
        let (fx, fy) = (x - xf, y - yf);
        let xi = xf as usize;
        let yi = yf as usize;
        let xj = (xi + 1).min(self.width - 1);
        let yj = (yi + 1).min(self.height - 1);
        let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
        let idx = [yi * self.width + xi, yi * self.width + xj, yj * self.width + xi, yj * self.width + xj];
        let mut out = [0.0; 3];
        for (wk, ik) in w.iter().zip(idx) {
            if *wk == 0.0 {
                continue;
            }
            if !self.valid[ik] {
                return None;
            }
            let d = &self.data[ik];
            out[0] += wk * d[0];
            out[1] += wk * d[1];
            out[2] += wk * d[2];
        }
        Some(out)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.data[i][0])
    }
}

#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<Level>,
}

fn blur121(w: usize, h: usize, v: &[f64], valid: &[bool]) -> (Vec<f64>, Vec<bool>) {
    let mut tmp = vec![0.0; w * h];
    let mut tv = valid.to_vec();
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (y * w + x.saturating_sub(1), y * w + (x + 1).min(w - 1));
            let c = y * w + x;
            tv[c] = valid[a] && valid[b] && valid[c];
            tmp[c] = 0.25 * v[a] + 0.5 * v[c] + 0.25 * v[b];
        }
    }
    let mut out = vec![0.0; w * h];
    let mut ov = tv.clone();
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (y.saturating_sub(1) * w + x, (y + 1).min(h - 1) * w + x);
            let c = y * w + x;
            ov[c] = tv[a] && tv[b] && tv[c];
            out[c] = 0.25 * tmp[a] + 0.5 * tmp[c] + 0.25 * tmp[b];
        }
    }
    (out, ov)
}

impl Pyramid {
    /// `levels` levels of a single-channel image; level 0 is unblurred.
    pub fn new(gray: &Image<f64>, levels: usize) -> Self {
        let (mut w, mut h) = gray.size();
        let mut v = gray.data().to_vec();
        let mut valid = gray.valid().to_vec();
        let mut out = vec![Level::from_intensity(w, h, 1.0, &v, &valid)];
        let mut scale = 1.0;
        for _ in 1..levels {
            if w < 8 || h < 8 {
                break;
            }
            let (bv, bvalid) = blur121(w, h, &v, &valid);
            let (nw, nh) = (w / 2, h / 2);
            let mut nv = vec![0.0; nw * nh];
            let mut nvalid = vec![true; nw * nh];
            for y in 0..nh {
                for x in 0..nw {
                    let taps = [(2 * y) * w + 2 * x, (2 * y) * w + 2 * x + 1, (2 * y + 1) * w + 2 * x, (2 * y + 1) * w + 2 * x + 1];
                    nvalid[y * nw + x] = taps.iter().all(|t| bvalid[*t]);
                    nv[y * nw + x] = 0.25 * taps.iter().map(|t| bv[*t]).sum::<f64>();
                }
            }
            scale *= 2.0;
            (w, h, v, valid) = (nw, nh, nv, nvalid);
            out.push(Level::from_intensity(w, h, scale, &v, &valid));
        }
        Self { levels: out }
    }

    pub fn base(&self) -> &Level {
        &self.levels[0]
    }
}
