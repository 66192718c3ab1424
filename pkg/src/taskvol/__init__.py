"""taskvol: task-conditioned vision-language training for volumetric CT.

Subsystems:

- ``taskbank``   task templates, manifest decomposition, training mixtures
- ``volprep``    NIfTI ingestion and the geometric preprocessing chain
- ``maskpatch``  patch-wise segmentation targets and their inverse
- ``neuralcore`` the encoder/transformer model with hand-verified gradients
- ``losses``     BCE, scaled focal loss, mixed-batch routing
- ``trainer``    AdamW, warmup/decay schedule, training loop, selection
- ``metrics``    AUROC/AUPR and rank-statistic confidence intervals
- ``cli``        prepare / train / eval / export-seg commands
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
