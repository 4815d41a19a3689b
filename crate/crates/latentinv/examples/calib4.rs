use latentinv::tensor::Tensor;
use std::time::Instant;
fn main() {
    let b = Tensor::full(&[512, 786], 0.25);
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..100 { sink += b.transposed().data()[0]; }
    let s = t0.elapsed().as_secs_f64();
    println!("transpose 512x786: {:.3} ms each (sink {sink}), {:.0} M elem/s", s*10.0, 100.0*512.0*786.0/s/1e6);
}
