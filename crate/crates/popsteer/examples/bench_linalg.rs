use popsteer::linalg::{add_matmul_tn, matmul_nn, matmul_nt, Matrix};
use std::time::Instant;

fn main() {
    let p = 8192;
    let d = 64;
    let m = 3417;
    let a = Matrix::from_fn(p, d, |i, j| ((i * 31 + j * 17) % 97) as f64 * 0.01 - 0.5);
    let e = Matrix::from_fn(m, d, |i, j| ((i * 13 + j * 7) % 89) as f64 * 0.01 - 0.4);

    let t0 = Instant::now();
    let c = matmul_nt(&a, &e);
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (p * m * d) as f64;
    println!("matmul_nt  {:>8.3} s  {:>6.2} GFLOPS  (checksum {:.3})", dt, flops / dt / 1e9, c.get(5, 5));

    let t0 = Instant::now();
    let h = matmul_nn(&c, &e);
    let dt = t0.elapsed().as_secs_f64();
    println!("matmul_nn  {:>8.3} s  {:>6.2} GFLOPS  (checksum {:.3})", dt, flops / dt / 1e9, h.get(5, 5));

    let mut g = Matrix::zeros(m, d);
    let t0 = Instant::now();
    add_matmul_tn(&c, &a, &mut g);
    let dt = t0.elapsed().as_secs_f64();
    println!("add_tn     {:>8.3} s  {:>6.2} GFLOPS  (checksum {:.3})", dt, flops / dt / 1e9, g.get(5, 5));
}
