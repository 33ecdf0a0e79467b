"""Canonical orientation of point clouds with a rotation-equivariant predictor.

Point clouds are ``(N, 3)`` float arrays of row vectors; rotations act on the
right, so ``points @ R`` rotates a cloud by ``R``.
"""

from ._choir import (
    DataError,
    NumericalError,
    Predictor,
    __version__,
    angle_between,
    chordal_mean,
    evaluate,
    generate_corpus,
    load_cloud,
    project_to_so3,
    sample_rotation,
    save_cloud,
    selfcheck,
    train,
)

__all__ = [
    "DataError",
    "NumericalError",
    "Predictor",
    "angle_between",
    "chordal_mean",
    "evaluate",
    "generate_corpus",
    "load_cloud",
    "project_to_so3",
    "sample_rotation",
    "save_cloud",
    "selfcheck",
    "train",
]
