"""Visual prompt tuning on a numpy ViT with Taylor-score prompt condensation."""

from .condense import (CondensationPlan, ScoreTable, apply_plan, condense_pipeline, leave_one_out_oracle,
                       score_cls_sim, score_taylor, select_global, select_local)
from .costmodel import condensed_flops, overhead_percent, pc_advisor, vit_flops
from .data import Dataset, SyntheticSpec, gen_synthetic, load_dataset
from .prompts import PromptSet, forward_deep, forward_shallow, init_prompts
from .spectral import cumulative_normalized, effective_rank, rank_growth_experiment, singular_spectrum
from .training import MetricsLog, TrainConfig, train
from .vit import ViTConfig, ViTParams, forward, init_params

__version__ = "0.1.0"
