use ndarray::Array2;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = Array2::<f32>::from_elem((m, k), 1.0003f32);
    let b = Array2::<f32>::from_elem((k, n), 0.9997f32);
    let t = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..reps {
        let c = a.dot(&b);
        acc += c[[0, 0]];
    }
    let dt = t.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * reps) as f64;
    println!("({m},{k},{n}) x{reps}: {:.3}s -> {:.2} GFLOP/s (acc {acc})", dt, flops / dt / 1e9);
}

fn main() {
    bench(1024, 1024, 1024, 4);
    bench(640, 8, 640, 60);
    bench(640, 640, 8, 60);
    bench(2560, 704, 64, 8);
    bench(81920, 32, 32, 8);
    let t = Instant::now();
    let mut s = 0.0f64;
    for i in 0..200_000_000u64 { s += (i as f64) * 1e-9; }
    println!("scalar f64 loop: {:.3}s (s={s})", t.elapsed().as_secs_f64());
}
