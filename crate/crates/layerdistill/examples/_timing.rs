use std::time::Instant;
fn main() {
    let t0 = Instant::now();
    let r1 = layerdistill::gradcheck::primitive_suite(100, 1e-5, 1e-4).unwrap();
    println!("primitives 100 seeds: {:.1}s pass={} max={:.2e}", t0.elapsed().as_secs_f64(), r1.pass(), r1.max_rel_error());
    let t1 = Instant::now();
    let r2 = layerdistill::gradcheck::composed_loss_suite(100, 1e-4, 1e-4).unwrap();
    println!("composed 100 seeds: {:.1}s pass={} max={:.2e}", t1.elapsed().as_secs_f64(), r2.pass(), r2.max_rel_error());
}
