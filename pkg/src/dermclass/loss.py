"""Class-weighted categorical cross-entropy on probability outputs."""
from __future__ import annotations

import numpy as np
import torch

from .errors import ShapeMismatch

LOG_EPS = 1e-12


def weighted_cce(probs, targets, class_weights=None) -> torch.Tensor:
    """``-(1/B) * sum_i w[y_i] * log(max(p[i, y_i], 1e-12))``.

    Accepts torch tensors or array-likes; the result is a 0-d tensor in the
    dtype of ``probs`` so it can be differentiated.
    """
    probs = probs if isinstance(probs, torch.Tensor) else torch.as_tensor(np.asarray(probs, dtype=np.float64))
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long) if not isinstance(targets, torch.Tensor) else targets.long()
    if probs.ndim != 2 or targets.ndim != 1 or targets.shape[0] != probs.shape[0]:
        raise ShapeMismatch("probs/targets", (len(targets), "K"), tuple(probs.shape))
    k = probs.shape[1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= k):
        raise ShapeMismatch("targets", (k,), (int(targets.max()) + 1,))
    picked = probs.gather(1, targets[:, None]).squeeze(1)
    nll = -torch.log(torch.clamp(picked, min=LOG_EPS))
    if class_weights is not None:
        w = torch.as_tensor(np.asarray(class_weights, dtype=np.float64)).to(probs.dtype)
        if w.shape != (k,):
            raise ShapeMismatch("class_weights", (k,), tuple(w.shape))
        nll = w[targets] * nll
    return nll.sum() / probs.shape[0]
