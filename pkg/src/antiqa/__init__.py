"""Toolkit for no-reference quality assessment of rendered text in images.

Submodules:
    tensor     - dense tensors with reverse-mode autodiff
    preproc    - crop filtering, rectification, 2-channel model input
    model      - the quality network (strip-conv CNN with SE and grid pooling)
    train      - losses, AdamW, LR schedule, two-stage training loop
    checkpoint - binary checkpoint serialization
    calibrate  - confidence-to-MOS mapping via a five-parameter logistic
    metrics    - PLCC, SROCC, normalized edit similarity, trimmed MOS
    aggregate  - crop-to-image score pooling strategies
    harness    - group-level evaluation, best-of-K selection, FPS protocol
    synth      - procedural synthetic text-crop generator
    manifest   - dataset manifests and run configuration
    cli        - command-line entry points
"""

__version__ = "0.1.0"

from .tensor import GraphTape, Tensor  # noqa: F401
