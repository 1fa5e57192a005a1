"""Two-stage diffusion enhancement of low-light RAW images.

Images are packed RGBG planes: float32 arrays of shape (4, h, w) in [0, 1].
"""

from ._core import (
    Checkpoint,
    DataError,
    ModeError,
    NoiseParams,
    NoiseSpace,
    NumericError,
    RawMeta,
    RunConfig,
    Schedule,
    ShapeError,
    amplify,
    build_condition,
    color_error,
    generate_scene,
    psnr,
    read_r4,
    ssim,
    synthesize,
    write_r4,
)

__all__ = [
    "Checkpoint",
    "DataError",
    "ModeError",
    "NoiseParams",
    "NoiseSpace",
    "NumericError",
    "RawMeta",
    "RunConfig",
    "Schedule",
    "ShapeError",
    "amplify",
    "build_condition",
    "color_error",
    "generate_scene",
    "psnr",
    "read_r4",
    "ssim",
    "synthesize",
    "write_r4",
]
