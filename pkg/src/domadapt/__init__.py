"""Domain-adversarial training with confidence-weighted pseudo labeling.

A feature extractor is trained against a binary domain discriminator while a
task classifier learns from labeled source data; a separate target classifier
learns from pseudo-labeled target data, weighted either by the task softmax
confidence or by how source-like the discriminator finds each sample. The
harness runs the method variants over dataset pairs and seeds and reports
holdout-selected target accuracies.
"""

from .tensor import (
    GradTape, Gradients, NonFiniteError, ShapeError, Tensor, add_rowvec,
    grad_check, log_softmax, matmul, relu, sigmoid,
)
from .models import (
    MLPParams, NetworkBundle, forward_domain, forward_features, forward_target,
    forward_task, init_bundle, load_bundle, save_bundle,
)
from .losses import (
    ConfidenceSource, confidence_domain, confidence_task, disc_loss,
    feat_adv_loss, instance_weight, pseudo_labels, task_loss,
    weighted_pseudo_loss,
)
from .training import (
    Adam, StepMetrics, TrainConfig, TrainingAborted, dann_step,
    instance_update_step, pseudo_label_step, schedule, target_update_step,
    train,
)
from .data import (
    BatchIterator, Dataset, DomainPair, LabelGate, UnlabeledDataset,
    gen_gauss_shift, gen_two_moons, load_idx, preprocess_pair,
)
from .harness import (
    ALL_METHOD_IDS, GridSpec, ReportTable, RunResult, emit_report, evaluate,
    make_pair, model_select, ordering_verdicts, run_cell, run_grid,
)

__version__ = "0.1.0"
