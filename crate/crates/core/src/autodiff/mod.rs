//! Small reverse-mode automatic differentiation engine.
//!
//! A [`Tape`] records one forward pass over values that are either copies
//! of [`Tensor`]s or parameters borrowed from a [`ParamSet`]. Calling
//! [`Tape::backward`] returns [`Gradients`], which are folded back into the
//! parameter set before an Adam step:
//!
//! ```
//! use sessml::autodiff::{Adam, ParamSet, Tape, Tensor};
//!
//! let mut params = ParamSet::<f32>::new();
//! let w = params.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
//! let grads = {
//!     let mut tape = Tape::new(&params);
//!     let x = tape.param(w);
//!     let loss = tape.sum(x).unwrap();
//!     tape.backward(loss).unwrap()
//! };
//! params.accumulate(&grads);
//! assert_eq!(params.get(w).grad().unwrap(), &[1.0, 1.0]);
//! params.adam_step(&Adam::default());
//! ```

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with_step, GRAD_CHECK_STEP};
pub use tape::{Activation, Gradients, GruVars, PoolMode, Tape, Var, NORM_EPS};
pub use tensor::{Adam, ParamId, ParamSet, Scalar, Tensor};
