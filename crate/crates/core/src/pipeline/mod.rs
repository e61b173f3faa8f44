//! Data manufacture, the teacher/student pipelines, baselines, the top-k
//! advantage cache, checkpoint selection and evaluation.

pub mod cache;
pub mod config;
pub mod data;
pub mod eval;
pub mod metrics;
mod run;
pub mod sweep;
mod train;

pub use cache::{build_advantage_cache, Substitution, TopKAdvantageCache, CACHE_MAGIC};
pub use config::{
    Ablation, CacheConfig, DataConfig, InitConfig, Method, Optimizers, Schedule, StateSource,
    TeacherMode, TrainConfig, CONFIG_FORMAT,
};
pub use data::{
    bt_label, instruction_data, synth_preference_data, InstructionPair, OnPolicyItem,
    PreferenceDataset, PreferenceTriple,
};
pub use eval::{
    evaluate, expected_reward_and_kl, expected_true_reward, reward_accuracy, Evaluation,
};
pub use metrics::{read_csv, write_csv, MetricsRecord, SummaryRow};
pub use run::{
    generate_items, heldout_pairs, item_states, phase_plan, prepare, run_adpa, run_adpa_plus,
    run_method, run_prepared, Prepared, RunOutput,
};
pub use sweep::{
    run_sweep, sweep_means, sweep_shape, GridSpec, SweepCell, SweepParam, SweepRow, SweepShape,
};
pub use train::{
    batch_loss, run_dpo_phase, run_sft_phase, select_checkpoint, train_phase, EvalContext,
    PhaseOutcome, PhaseSpec,
};
