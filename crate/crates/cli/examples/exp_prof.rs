use annulus_core::init_sfm::{eight_point, epipolar_angular_error, Correspondence};
use nalgebra::{UnitVector3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let corrs: Vec<Correspondence> = (0..200)
        .map(|_| Correspondence {
            bearing_a: UnitVector3::new_normalize(Vector3::new(
                rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0f64..1.0))),
            bearing_b: UnitVector3::new_normalize(Vector3::new(
                rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0f64..1.0))),
        })
        .collect();
    let sample: Vec<Correspondence> = corrs[..8].to_vec();

    let t = Instant::now();
    let mut sink = 0.0;
    for _ in 0..7030 {
        let e = eight_point(&sample).unwrap();
        sink += e[(0, 0)];
    }
    println!("eight_point x7030: {:.3}s (sink {sink:.1})", t.elapsed().as_secs_f64());

    let e = eight_point(&sample).unwrap();
    let t = Instant::now();
    let mut count = 0usize;
    for _ in 0..7030 {
        for c in &corrs {
            if let Ok(err) = epipolar_angular_error(&e, c) {
                if err < 1e-3 { count += 1; }
            }
        }
    }
    println!("score 200 x7030: {:.3}s (count {count})", t.elapsed().as_secs_f64());
}
