from .losses import (FisherState, ReplayClassifier, distill_loss, distill_loss_and_grad,
                     estimate_fisher, ewc_penalty, ewc_penalty_and_grad, forgetting,
                     predictive_uncertainty, replay_loss, replay_loss_and_grad,
                     running_difficulty)
from .tasks import TaskSpec, generate_task_stream, sample_task_batch
from .training import (ExperimentConfig, Report, TrainingError, TrainingState, evaluate,
                       init_state, run_experiment, train_task)
