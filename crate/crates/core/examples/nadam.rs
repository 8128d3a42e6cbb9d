//! Minimises a poorly scaled quadratic with Nadam and feeds a plateau
//! scheduler with the loss.

use rafcn::optim::{NadamConfig, NadamState, PlateauConfig, PlateauScheduler};
use rafcn::{Result, Tensor};

fn main() -> Result<()> {
    let scales = [1.0, 10.0, 100.0];
    let mut theta = Tensor::new(&[3], vec![1.0, 1.0, 1.0])?;
    let mut opt = NadamState::new(NadamConfig { lr: 0.05, ..NadamConfig::default() }, [&theta]);
    let mut sched = PlateauScheduler::new(PlateauConfig { patience: 3, ..PlateauConfig::default() })?;

    for step in 0..=400 {
        let loss: f64 = theta.data().iter().zip(scales).map(|(t, s)| 0.5 * s * t * t).sum();
        let grad: Vec<f64> = theta.data().iter().zip(scales).map(|(t, s)| s * t).collect();
        if step % 50 == 0 {
            opt.lr = sched.observe(loss, opt.lr);
            println!("step {step:3}  loss {loss:.3e}  lr {:.0e}", opt.lr);
        }
        opt.step(&mut [&mut theta], &[grad])?;
    }
    println!("θ = {:?}", theta.data());
    Ok(())
}
