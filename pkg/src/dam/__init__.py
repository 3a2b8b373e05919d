"""Dense affinity matching for few-shot segmentation, on a small numpy autodiff engine."""

import os

if os.environ.get("DAM_DETERMINISTIC") == "1":
    # only effective when numpy has not been imported yet
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

from .config import RunConfig, load  # noqa: E402
from .decoder import DAM, dam_forward, predict_mask  # noqa: E402
from .tensor import Tensor, no_grad  # noqa: E402

__all__ = ["DAM", "RunConfig", "Tensor", "dam_forward", "load", "no_grad", "predict_mask"]
__version__ = "0.1.0"
