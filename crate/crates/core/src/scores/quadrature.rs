//! Adaptive Gauss-Kronrod (7/15) quadrature on intervals and boxes.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_DEPTH: u32 = 40;

fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, err: f64, tol: f64, depth: u32) -> f64 {
    if err <= tol || depth >= MAX_DEPTH {
        return whole;
    }
    let m = 0.5 * (a + b);
    let (l, el) = kronrod(f, a, m);
    let (r, er) = kronrod(f, m, b);
    adapt(f, a, m, l, el, 0.5 * tol, depth + 1) + adapt(f, m, b, r, er, 0.5 * tol, depth + 1)
}

/// Integral of `f` over `[a, b]` to roughly `tol` absolute error.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let (whole, err) = kronrod(&f, a, b);
    adapt(&f, a, b, whole, err, tol, 0)
}

/// Integral over an axis-aligned box of dimension 1 or 2 by nested
/// adaptive quadrature.
pub fn integrate_box<F: Fn(&[f64]) -> f64>(f: F, bounds: &[[f64; 2]], tol: f64) -> Option<f64> {
    match bounds {
        [[a, b]] => Some(integrate(|x| f(&[x]), *a, *b, tol)),
        [[a0, b0], [a1, b1]] => {
            let inner_tol = tol / (b0 - a0).max(1.0);
            Some(integrate(
                |x0| integrate(|x1| f(&[x0, x1]), *a1, *b1, inner_tol),
                *a0,
                *b0,
                tol,
            ))
        }
        _ => None,
    }
}
