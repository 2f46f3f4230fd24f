"""Python access to the latentsub C++ core.

Images are float32 numpy arrays shaped B x C x H x W with values in [0, 1].
Configs, reports and plans are plain dicts with the same layout as the JSON
files the command-line tool writes.
"""

# The extension links against libtorch; importing torch first puts its shared
# libraries in the process so that an installed wheel resolves them.
import torch  # noqa: F401

from ._core import (
    BudgetExhausted,
    LatentsubError,
    Oracle,
    attack,
    default_config,
    derive_seed,
    filter_members,
    identity_equivariance,
    load_config,
    render_report,
    run_pipeline,
    run_preset,
    sample_plans,
    seed_torch,
    substitute_loss,
    toy_class_names,
    toy_dataset,
    train_target,
    validate_config,
    write_image_grid,
)

__all__ = [
    "BudgetExhausted",
    "LatentsubError",
    "Oracle",
    "attack",
    "default_config",
    "derive_seed",
    "filter_members",
    "identity_equivariance",
    "load_config",
    "render_report",
    "run_pipeline",
    "run_preset",
    "sample_plans",
    "seed_torch",
    "substitute_loss",
    "toy_class_names",
    "toy_dataset",
    "train_target",
    "validate_config",
    "write_image_grid",
]
