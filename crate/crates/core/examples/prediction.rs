//! Open-loop state prediction from one encoding: NRMSE against horizon.

use split_koopman::harness::{dataset_for, state_nrmse, train_sensing, ExperimentConfig};

fn main() -> split_koopman::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.sensing.max_epochs = 30;
    let data = dataset_for(&cfg, None, 2)?;
    let (model, _) = train_sensing(&cfg, 4, Some(20.0), &data, 2)?;
    let start = cfg.eval.predict_start;
    println!("horizon  state NRMSE %");
    for h in [1, 10, 50, 100, 200] {
        println!("{h:7}  {:8.3}", state_nrmse(&model, &data.test, start, h)?);
    }
    Ok(())
}
