//! Plane filters on row-major `f64` buffers: Gaussian smoothing, Sobel
//! gradients and median. Borders use half-sample symmetric extension
//! (`c b a | a b c | c b a`), which is invariant under flips and keeps DC.

/// Maps any integer index into `0..n` by half-sample symmetric reflection.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized 1-D Gaussian taps, radius `ceil(3 sigma)` (at least 1).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    gaussian_kernel_with_radius(sigma, radius)
}

pub fn gaussian_kernel_with_radius(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Convolves rows then columns with a symmetric odd-length kernel.
pub fn separable(plane: &[f64], height: usize, width: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * row[reflect(x as isize + k as isize - r, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * tmp[reflect(y as isize + k as isize - r, height) * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

pub fn gaussian_blur(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    separable(plane, height, width, &gaussian_kernel(sigma))
}

/// Horizontal and vertical 3x3 Sobel responses (unnormalized, so a unit
/// step yields a peak response of 4).
pub fn sobel(plane: &[f64], height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| plane[reflect(y, height) * width + reflect(x, width)];
    let mut gx = vec![0.0; plane.len()];
    let mut gy = vec![0.0; plane.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let i = y as usize * width + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// Square-window median of radius `radius`.
pub fn median_filter(plane: &[f64], height: usize, width: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
    let mut out = vec![0.0; plane.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    window.push(plane[reflect(y + dy, height) * width + reflect(x + dx, width)]);
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
            out[y as usize * width + x as usize] = *m;
        }
    }
    out
}
