//! Matrix exponential by scaling and squaring with Padé approximants.
//!
//! Follows Higham, "The Scaling and Squaring Method for the Matrix Exponential
//! Revisited" (2005): the lowest Padé degree in {3, 5, 7, 9} whose backward
//! error bound holds for the 1-norm of the input is used directly; otherwise
//! the input is scaled by 2^-s into the degree-13 region and squared back.

use nalgebra::DMatrix;

const THETA_3: f64 = 1.495_585_217_958_292e-2;
const THETA_5: f64 = 2.539_398_330_063_23e-1;
const THETA_7: f64 = 9.504_178_996_162_932e-1;
const THETA_9: f64 = 2.097_847_961_257_068;
const THETA_13: f64 = 5.371_920_351_148_152;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [17_297_280.0, 8_648_640.0, 1_995_840.0, 277_200.0, 25_200.0, 1_512.0, 56.0, 1.0];
const B9: [f64; 10] = [
    17_643_225_600.0,
    8_821_612_800.0,
    2_075_673_600.0,
    302_702_400.0,
    30_270_240.0,
    2_162_160.0,
    110_880.0,
    3_960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

/// Maximum absolute column sum.
pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Computes `exp(a)` for a square matrix.
///
/// Panics if `a` is not square or the Padé denominator is singular, which
/// cannot happen for finite input inside the degree-13 region.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm requires a square matrix");
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let norm = one_norm(a);
    if norm == 0.0 {
        return DMatrix::identity(n, n);
    }

    let (u, v, squarings) = if norm <= THETA_3 {
        let (u, v) = pade_low(a, &B3);
        (u, v, 0)
    } else if norm <= THETA_5 {
        let (u, v) = pade_low(a, &B5);
        (u, v, 0)
    } else if norm <= THETA_7 {
        let (u, v) = pade_low(a, &B7);
        (u, v, 0)
    } else if norm <= THETA_9 {
        let (u, v) = pade_low(a, &B9);
        (u, v, 0)
    } else {
        let s = (norm / THETA_13).log2().ceil().max(0.0) as i32;
        let scaled = a * 2f64.powi(-s);
        let (u, v) = pade13(&scaled);
        (u, v, s)
    };

    // r = (v - u)^-1 (v + u)
    let numer = &v + &u;
    let denom = v - u;
    let mut result = denom.lu().solve(&numer).expect("Padé denominator is singular");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Padé approximants of degree 3 through 9 share one shape: odd powers go
/// into `u`, even powers into `v`.
fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let mut power = ident.clone();
    let mut u_inner = &ident * b[1];
    let mut v = &ident * b[0];
    let degree = b.len() - 1;
    for k in 1..=degree / 2 {
        power = &power * &a2;
        u_inner += &power * b[2 * k + 1];
        v += &power * b[2 * k];
    }
    (a * u_inner, v)
}

fn pade13(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let inner_u = &a6 * B13[13] + &a4 * B13[11] + &a2 * B13[9];
    let u_poly = &a6 * inner_u + &a6 * B13[7] + &a4 * B13[5] + &a2 * B13[3] + &ident * B13[1];
    let u = a * u_poly;

    let inner_v = &a6 * B13[12] + &a4 * B13[10] + &a2 * B13[8];
    let v = &a6 * inner_v + &a6 * B13[6] + &a4 * B13[4] + &a2 * B13[2] + &ident * B13[0];
    (u, v)
}
