//! The two learning-rate schedules: cosine decay (stages 1–2) and linear
//! warmup + step decay (stage 3).

use vireid::trainer::{lr_at, ScheduleSpec};

fn main() -> vireid::Result<()> {
    // stage 3 at full scale: 3e-6 -> 3e-4 over 10 epochs, x0.1 at 40 and 70
    let stage3 = ScheduleSpec::warmup_step(3e-4, 10, vec![40, 70], 0.1, 120);
    println!("warmup_step (stage 3, 120 epochs):");
    for epoch in [0, 5, 10, 25, 40, 55, 70, 100] {
        println!("  lr({epoch:>3}) = {:.2e}", lr_at(&stage3, epoch)?);
    }

    let cosine = ScheduleSpec::cosine(3e-4, 60);
    println!("cosine (stages 1-2, 60 epochs):");
    for epoch in [0, 15, 30, 45, 59, 60] {
        println!("  lr({epoch:>3}) = {:.2e}", lr_at(&cosine, epoch)?);
    }

    // out-of-range epochs are rejected
    assert!(lr_at(&cosine, 61).is_err());
    println!("epoch past the horizon is an input error");
    Ok(())
}
