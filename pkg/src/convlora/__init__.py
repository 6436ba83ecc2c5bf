"""Low-rank adapter fine-tuning for a ConvNeXtV2-style backbone, with a
self-contained CPU training and evaluation pipeline."""

from .backbone import (Model, ModelConfig, base_config, build_model, forward,
                       param_shapes, saliency, tiny_test_config)
from .data import (AugmentConfig, DatasetManifest, load_batch, scan_dataset,
                   split, synth_domain, write_manifest_tsv)
from .errors import CompatibilityError, ConfigError, TrainingDiverged
from .lora import (LoraAdapter, PeftModel, adapted_linear, adapter_param_count,
                   count_params, head_only, init_adapter, inject, merge,
                   merged_model, model_forward, peft_forward)
from .metrics import (MetricsReport, accuracy, confusion, mcc_binary,
                      mcc_multiclass, per_class_prf1, prf1)
from .persist import AdapterCheckpoint, CheckpointError, load, save
from .tensor import (NumericsError, ShapeError, Tensor, grad_check, no_grad,
                     softmax)
from .training import (TrainConfig, TrainHistory, adamw_step, cross_eval,
                       evaluate, predict, train, write_prediction_dump)

__version__ = "0.1.0"
