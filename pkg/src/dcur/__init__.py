"""Teacher-student offline RL with data curricula, at desk scale.

A TD3 teacher is trained online and its full interaction log becomes a fixed
dataset. Students learn from that log offline (optionally with a small online
fraction) while a curriculum decides which prefix or sliding window of the log
is eligible at each gradient step.
"""

from .analysis import (MetricReport, OverlapConfig, OverlapReport, TimePredictor,
                       TimePredictorConfig, aggregate_over_seeds, bold_set, f_olap_from_accuracy,
                       metric_m1, metric_m2, q_diagnostic_table, shape_rewards_time,
                       student_overlap, train_overlap_classifier, train_time_predictor)
from .data import (Additive, Batch, DatasetFormatError, EmptyUnionError, OnlineBuffer, Provenance,
                   Scale, TeacherDataset, Transition, eligible_window, load_dataset,
                   parse_curriculum, reorder_by_reward, sample_minibatch, save_dataset)
from .envs import ConfigError, EnvSpec, EnvState, EnvUsageError, env_reset, env_step, make_env
from .nn import (AdamState, CheckpointFormatError, MlpParams, NonFiniteError, ShapeError,
                 adam_step, init_mlp, load_params, mlp_backward, mlp_forward, polyak_update,
                 save_params)
from .pipelines import (EvalLog, RunConfig, generate_rollout_gaussian, generate_rollout_uniform,
                        online_cadence, random_policy_returns, read_eval_log, train_student,
                        train_teacher, write_eval_log)
from .td3 import Td3Agent, Td3Config, load_agent, save_agent

__version__ = "0.1.0"
