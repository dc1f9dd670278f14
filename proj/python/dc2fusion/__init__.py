"""3D multimodal image fusion with deformable window cross-attention."""

from dc2fusion._core import (  # noqa: F401
    DataFormatError,
    NumericFailure,
    ShapeMismatchError,
    default_config,
    evaluate,
    fmi,
    fuse,
    gen_dataset,
    generate_phantom_pair,
    init_checkpoint,
    load_volume,
    loss_breakdown,
    nmi,
    overfit_pair,
    parameter_count,
    psnr,
    save_volume,
    selfcheck,
    ssim,
    toy_config,
    train,
)

__all__ = [
    "DataFormatError",
    "NumericFailure",
    "ShapeMismatchError",
    "default_config",
    "evaluate",
    "fmi",
    "fuse",
    "gen_dataset",
    "generate_phantom_pair",
    "init_checkpoint",
    "load_volume",
    "loss_breakdown",
    "nmi",
    "overfit_pair",
    "parameter_count",
    "psnr",
    "save_volume",
    "selfcheck",
    "ssim",
    "toy_config",
    "train",
]
