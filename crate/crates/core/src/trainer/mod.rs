//! Toy language model, optimizer and tasks used to train and evaluate
//! SparseK attention end to end.

pub mod model;
pub mod optim;
pub mod tasks;

pub use model::{
    argmax, backward, cross_entropy, forward, log_softmax, loss_and_grads, sequence_nll, AttnKind, Decoder, Forward,
    LayerParams, ModelParams, ModelTape, ParamView, ToyModelConfig,
};
pub use optim::{batch_grads, grad_norms, train_step, StepStats, TrainHyper, TrainState};
pub use tasks::{
    eval_ppl, make_passkey_at, make_passkey_task, passkey_accuracy, Corpus, PasskeyInstance, RecallTask, Sample,
};
