//! The attention-fusion block that merges the visible and infrared text
//! feature banks into integrated semantics.
//!
//! One bank is Query (and the residual base), the other Key/Value; the
//! combine map starts at zero so fusion begins as the identity on the
//! query bank and learns to mix in the other modality.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vireid::autodiff::Tape;
use vireid::fusion::{attention_fuse_eval, attention_fuse_with_weights, FusionDirection, FusionParams};

fn main() -> vireid::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 8;
    let identities = 5;
    let f_tv = Array2::from_shape_fn((identities, dim), |_| rng.random_range(-1.0..1.0));
    let f_tr = Array2::from_shape_fn((identities, dim), |_| rng.random_range(-1.0..1.0));

    // fresh parameters: w_combine is zero, so fusion starts as the identity
    let fresh = FusionParams::init(&mut rng, dim);
    let fused = attention_fuse_eval(&fresh, &f_tv, &f_tr, FusionDirection::VisibleQuery)?;
    assert_eq!(fused, f_tv);
    println!("zero-initialized combine map: fused bank == visible bank (residual start)");

    // after the combine map is non-zero, attention mixes the other modality in
    let mut params = fresh.clone();
    params.w_combine = Array2::from_shape_fn((dim, dim), |_| rng.random_range(-0.5..0.5)).into_dyn();
    let tape = Tape::new();
    let vars = params.mount(&tape, false);
    let (fused, attention) = attention_fuse_with_weights(
        &vars,
        tape.constant(f_tv.clone().into_dyn()),
        tape.constant(f_tr.clone().into_dyn()),
    )?;
    let a = attention.value();
    let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    println!("attention matrix ({identities}x{identities}), rows sum to 1:");
    for row in a2.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("  [{}]  sum = {:.6}", cells.join(" "), row.sum());
    }
    let drift = (&fused.value() - &f_tv.into_dyn()).mapv(f64::abs).sum();
    println!("fused bank now differs from the query bank (L1 drift {drift:.4})");

    // the mirrored direction swaps roles: infrared is Query and residual
    let mirrored = attention_fuse_eval(&fresh, &f_tr, &f_tr, FusionDirection::InfraredQuery)?;
    assert_eq!(mirrored, f_tr);
    println!("direction = infrared query: residual base is the infrared bank");
    Ok(())
}
