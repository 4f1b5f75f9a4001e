//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

use bethe_cs::{PriorParams, VarParams};

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Globally adaptive Gauss-Kronrod (7/15) quadrature over `[a, b]` split at
/// the given interior breakpoints. Refines the worst interval until the
/// summed error estimate is below `rel_tol · |integral|`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64], rel_tol: f64) -> f64 {
    let mut pts = vec![a];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|x| *x > a && *x < b).collect();
    inner.sort_by(f64::total_cmp);
    pts.extend(inner);
    pts.push(b);
    let mut segs: Vec<(f64, f64, f64, f64)> = pts
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let (v, e) = gk15(f, w[0], w[1]);
            (w[0], w[1], v, e)
        })
        .collect();
    for _ in 0..20_000 {
        let total: f64 = segs.iter().map(|s| s.2).sum();
        let err: f64 = segs.iter().map(|s| s.3).sum();
        if err <= rel_tol * total.abs() || err < 1e-300 {
            break;
        }
        let (idx, _) = segs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .unwrap();
        let (lo, hi, _, _) = segs.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(f, lo, mid);
        let (v2, e2) = gk15(f, mid, hi);
        segs.push((lo, mid, v1, e1));
        segs.push((mid, hi, v2, e2));
    }
    // Sum small to large for a reproducible, accurate total.
    let mut vals: Vec<f64> = segs.iter().map(|s| s.2).collect();
    vals.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    vals.iter().sum()
}

/// `(log Z, f_a, f_c)` of the tilted Gauss-Bernoulli posterior by direct
/// numerical integration. The spike contributes its mass in closed form;
/// the slab is integrated on a window that covers both `[−12, 12]` and 40
/// standard deviations around the integrand's peak.
pub fn denoiser_by_quadrature(rho: f64, r: f64, s2: f64) -> (f64, f64, f64) {
    let g = 1.0;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * g).sqrt();
    let slab = move |x: f64| rho * norm * (-x * x / (2.0 * g)).exp() * (-(x - r) * (x - r) / (2.0 * s2)).exp();
    let peak = r * g / (g + s2);
    let width = (s2 * g / (g + s2)).sqrt();
    let lo = (-12.0f64).min(peak - 40.0 * width);
    let hi = 12.0f64.max(peak + 40.0 * width);
    let breaks: Vec<f64> = [-8.0, -3.0, -1.0, 0.0, 1.0, 3.0, 8.0]
        .iter()
        .map(|k| peak + k * width)
        .collect();
    let tol = 1e-14;
    let z_spike = (1.0 - rho) * (-r * r / (2.0 * s2)).exp();
    let z_slab = integrate(&slab, lo, hi, &breaks, tol);
    let z = z_spike + z_slab;
    let first = integrate(&|x| x * slab(x), lo, hi, &breaks, tol);
    let mean = first / z;
    let central = integrate(&|x| (x - mean) * (x - mean) * slab(x), lo, hi, &breaks, tol);
    let var = (central + z_spike * mean * mean) / z;
    (z.ln(), mean, var)
}

/// Central difference of `f` at `x` with step `h`.
pub fn central_diff(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Finite-difference gradient of an energy in `(R, log Σ²)` coordinates.
pub fn fd_gradient(energy: &dyn Fn(&VarParams) -> f64, params: &VarParams, h: f64) -> (Vec<f64>, Vec<f64>) {
    let n = params.r.len();
    let mut g_r = vec![0.0; n];
    let mut g_s = vec![0.0; n];
    for i in 0..n {
        let mut p = params.clone();
        p.r[i] = params.r[i] + h;
        let fp = energy(&p);
        p.r[i] = params.r[i] - h;
        let fm = energy(&p);
        g_r[i] = (fp - fm) / (2.0 * h);

        let mut p = params.clone();
        let s = params.sigma2[i].ln();
        p.sigma2[i] = (s + h).exp();
        let fp = energy(&p);
        p.sigma2[i] = (s - h).exp();
        let fm = energy(&p);
        g_s[i] = (fp - fm) / (2.0 * h);
    }
    (g_r, g_s)
}

/// Normwise relative error `‖a − b‖_∞ / max(‖b‖_∞, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(floor);
    num / den
}

pub fn prior(rho: f64) -> PriorParams {
    PriorParams::new(rho).unwrap()
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

pub fn logspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    linspace(a, b, n).into_iter().map(|e| 10f64.powf(e)).collect()
}
