use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dwisim::denoiser::{denoise, Architecture, SrcnnModel};
use dwisim::epi::{forward_epi, reconstruct_epi, EpiModel, GhostSpec, GradientWaveform};
use dwisim::par::{set_exec_mode, ExecMode};
use dwisim::{Complex64, ComplexSlice, Mask, RealSlice};

fn test_image(w: usize, h: usize) -> ComplexSlice {
    ComplexSlice::from_fn(w, h, |x, y| {
        let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
        let r = (u * u * 4.0 + v * v).sqrt();
        Complex64::from_polar(if r < 0.4 { 1.0 + 0.3 * (9.0 * u).sin() } else { 0.0 }, 2.0 * u * v)
    })
}

fn modes() -> [(ExecMode, &'static str); 2] {
    [(ExecMode::Sequential, "sequential"), (ExecMode::Parallel, "parallel")]
}

fn epi_round_trip(c: &mut Criterion) {
    let (w, h) = (320, 160);
    let image = test_image(w, h);
    let tissue = Mask::from_fn(w, h, |x, y| image.get(x, y).norm() > 0.0);
    let epi = EpiModel::new(GradientWaveform::default()).unwrap();
    let ghost = GhostSpec { amplitude: 0.5, tissue };
    let correction = ghost.matched_correction();
    let mut g = c.benchmark_group("epi_round_trip");
    g.sample_size(10);
    for (mode, name) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            set_exec_mode(mode);
            b.iter(|| {
                let k = forward_epi(black_box(&image), &epi.kernel, &ghost, None).unwrap();
                reconstruct_epi(&k, &epi.kernel, &correction).unwrap()
            })
        });
    }
    g.finish();
}

fn srcnn_forward(c: &mut Criterion) {
    let model = SrcnnModel::init(Architecture::default(), 7, 0.02).unwrap();
    let input = RealSlice::from_fn(160, 80, |x, y| ((x * 31 + y * 17) % 13) as f64 / 13.0);
    let mut g = c.benchmark_group("srcnn_denoise");
    g.sample_size(10);
    for (mode, name) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            set_exec_mode(mode);
            b.iter(|| denoise(&model, black_box(&input)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, epi_round_trip, srcnn_forward);
criterion_main!(benches);
