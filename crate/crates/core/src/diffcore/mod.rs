//! Differentiable substrate: parameters, the reverse-mode tape, losses,
//! the LAMB optimizer and finite-difference gradient verification.

mod gradcheck;
mod graph;
mod loss;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use graph::{huber_deriv, huber_elem, Grads, Graph, Padding, SeqLayout, Var};
pub use loss::{cross_entropy, cross_entropy_logits, huber_loss, softmax};
pub use optim::{clip_grad_norm, cosine_lr, lamb_step, optimizer_step, OptimState, TrainHyper};
pub use params::{Init, ParamId, ParamStore, ParamTensor};
pub use tensor::{matmul, Tensor};
