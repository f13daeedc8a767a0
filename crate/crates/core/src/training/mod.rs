//! Losses, optimizer, the training loop, gradient verification and
//! checkpoint persistence.

mod adam;
mod checkpoint;
mod gradcheck;
mod loss;
mod train;

pub use self::adam::{adam_step, AdamConfig, AdamState};
pub use self::checkpoint::{is_valid_tensor_name, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use self::gradcheck::{grad_check, grad_check_with, GradCheckReport, TensorError};
pub use self::loss::{bce_grad, bce_loss, sigmoid, total_loss, LossValues};
pub use self::train::{sample_gradients, train, write_log_csv, LogRecord, TrainConfig, TrainOutcome};
