use nalgebra::DMatrix;
use ndarray::Array2;
use num_bigint::BigInt;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stageprune::calibration::{build_calibration, capture_hessians, Sublayer};
use stageprune::pruner::HessianAccumulator;
use stageprune::schedule::{NoiseSchedule, ScheduleFamily};
use stageprune::toydiffusion::{Denoiser, ModelConfig, ToyDataset};

/// Exact `XᵀX` with every f32 split into integer mantissa and exponent, summed
/// as big integers and rounded once at the end.
fn exact_gram(x: &Array2<f32>) -> DMatrix<f64> {
    let parts: Vec<Vec<(BigInt, i32)>> = x
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .map(|&v| {
                    let bits = v.to_bits();
                    let sign = if bits >> 31 == 1 { -1 } else { 1 };
                    let exp = ((bits >> 23) & 0xff) as i32;
                    let frac = (bits & 0x7f_ffff) as i64;
                    let (mant, e) = if exp == 0 { (frac, -149) } else { (frac | 0x80_0000, exp - 150) };
                    (BigInt::from(sign * mant), e)
                })
                .collect()
        })
        .collect();
    let base = parts.iter().flatten().map(|p| p.1).min().unwrap();
    let n = x.ncols();
    DMatrix::from_fn(n, n, |i, j| {
        let mut sum = BigInt::from(0);
        for row in &parts {
            let (a, ea) = &row[i];
            let (b, eb) = &row[j];
            sum += (a * b) << ((ea + eb - 2 * base) as usize);
        }
        sum.to_f64().unwrap() * 2f64.powi(2 * base)
    })
}

fn assert_close(got: &DMatrix<f64>, want: &DMatrix<f64>, tol: f64) {
    for i in 0..want.nrows() {
        for j in 0..want.ncols() {
            let scale = (want[(i, i)] * want[(j, j)]).sqrt().max(f64::MIN_POSITIVE);
            let err = (got[(i, j)] - want[(i, j)]).abs() / scale;
            assert!(err <= tol, "({i},{j}): {} vs {} (rel {err:e})", got[(i, j)], want[(i, j)]);
        }
    }
}

#[test]
fn accumulation_matches_exact_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Array2::from_shape_fn((300, 12), |(_, j)| {
        let v: f32 = rng.sample(StandardNormal);
        v * 10f32.powi(j as i32 % 4 - 2)
    });
    let want = exact_gram(&x);
    let mut whole = HessianAccumulator::new(12);
    whole.accumulate(x.view()).unwrap();
    assert_close(whole.hessian(), &want, 1e-12);

    // Uneven chunks merged across two accumulators give the same sum.
    let mut a = HessianAccumulator::new(12);
    let mut b = HessianAccumulator::new(12);
    a.accumulate(x.slice(ndarray::s![..17, ..])).unwrap();
    a.accumulate(x.slice(ndarray::s![17..150, ..])).unwrap();
    b.accumulate(x.slice(ndarray::s![150.., ..])).unwrap();
    a.merge(&b).unwrap();
    assert_eq!(a.samples(), 300);
    assert_close(a.hessian(), &want, 1e-12);
}

#[test]
fn subnormal_and_signed_values_decode_exactly() {
    let x = Array2::from_shape_vec((3, 2), vec![1e-40f32, -2.5, 3.0, f32::MIN_POSITIVE, -0.0, 7.25]).unwrap();
    let want = exact_gram(&x);
    assert_eq!(want[(1, 1)], 2.5f64 * 2.5 + f64::from(f32::MIN_POSITIVE).powi(2) + 7.25 * 7.25);
    let mut acc = HessianAccumulator::new(2);
    acc.accumulate(x.view()).unwrap();
    assert_close(acc.hessian(), &want, 1e-15);
}

/// Hessians from capture equal `XᵀX` of the activations dumped from a
/// forward pass over the same batch.
#[test]
fn capture_matches_activation_dump() {
    let config = ModelConfig { d_model: 32, heads: 2, blocks: 2, mlp_ratio: 2, ..ModelConfig::default() };
    let model = Denoiser::init(config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let data = ToyDataset::generate(64, config.image_size, 3, None).unwrap();
    let schedule = NoiseSchedule::with_defaults(ScheduleFamily::Linear);
    let calib = build_calibration(&data, (200, 700), &schedule, 60, true, config.null_class(), 4).unwrap();
    let hessians = capture_hessians(&model, &calib, 0.0).unwrap();

    let (x, t, c) = calib.batch(&calib.items);
    let (_, cache) = model.forward_cached(x.view(), &t, &c).unwrap();
    for b in 0..config.blocks {
        for (sub, dump) in [(Sublayer::AttnOutProj, cache.attn_out_input(b)), (Sublayer::MlpDownProj, cache.mlp_down_input(b))] {
            assert_eq!(dump.nrows(), 120 * config.tokens());
            let n = dump.ncols();
            let want = DMatrix::from_fn(n, n, |i, j| {
                dump.column(i).iter().zip(dump.column(j)).map(|(&p, &q)| f64::from(p) * f64::from(q)).sum::<f64>()
            });
            let acc = hessians.get(b, sub).unwrap();
            assert_eq!(acc.samples(), dump.nrows());
            assert_close(acc.hessian(), &want, 1e-10);
        }
    }
}
