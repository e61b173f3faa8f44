//! Preference-alignment distillation on exact finite token MDPs.
//!
//! Policies are tabular softmax tables keyed by `(prompt, generated)` states.
//! Every objective returns its exact logit gradient, and the KL-regularized
//! optimum is available by backward induction, so the identities that link
//! DPO teachers to advantage functions can be checked to machine precision.
//!
//! ```
//! use alignlab::task::{synth_task, TaskConfig};
//! use alignlab::policy::{PolicyRole, TabularPolicy};
//! use alignlab::oracle::backward_induction;
//!
//! let task = synth_task(7, &TaskConfig::new(3, 2)).unwrap();
//! let reference = TabularPolicy::uniform(3, PolicyRole::ReferenceTeacher);
//! let sol = backward_induction(&task.mdp, &task.reward, &reference, 0.5).unwrap();
//! let s0 = task.mdp.initial_state(&task.mdp.prompts[0]);
//! let total: f64 = sol.pi_star.action_distribution(&s0).iter().sum();
//! assert!((total - 1.0).abs() < 1e-12);
//! ```

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod math;
pub mod mdp;
pub mod objectives;
pub mod oracle;
pub mod pipeline;
pub mod policy;
pub mod rl;
pub mod seed;
pub mod task;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/token-mdp.md")]
    mod token_mdp {}
    #[doc = include_str!("../../../book/src/optimum.md")]
    mod optimum {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/advantage-cache.md")]
    mod advantage_cache {}
    #[doc = include_str!("../../../book/src/granularity.md")]
    mod granularity {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
