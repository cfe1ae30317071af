//! Knowledge recovery for rewired students: a reverse-mode tape over the
//! SwiftKV-mode forward, temperature-scaled distillation, AdamW, and a
//! finite-difference gradient check.

mod data;
mod forward;
mod gradcheck;
mod loss;
mod optim;
pub mod tape;
mod train;

pub use data::{synth_dataset, MarkovChain};
pub use forward::{student_loss, untaped_loss, StudentTape};
pub use gradcheck::{gradcheck, GradCheckReport, GradCheckSample};
pub use loss::{distill_loss_grad, distill_loss_value as distill_loss};
pub use optim::{learning_rate, optimizer_step, ParamSet, TrainState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{Gradients, Tape, Var};
pub use train::{
    ablation, batch_gradients, evaluate, render_ablation_csv, render_history_csv, train, AblationRun, LossRecord,
    TrainConfig,
};
