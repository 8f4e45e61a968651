"""Parameter transforms for optimization in unconstrained coordinates.

Positive parameters are optimized in log-space, (0,1) parameters in
logit-space; 'none' passes through.  Back-transformed values are always
inside the original support by construction.
"""

import numpy as np

_LOGIT_CLIP = 1e-12


def to_unconstrained(values, transforms):
    values = np.asarray(values, dtype=float)
    out = np.empty_like(values)
    for k, tr in enumerate(transforms):
        v = values[k]
        if tr == "log":
            out[k] = np.log(v)
        elif tr == "logit":
            v = min(max(v, _LOGIT_CLIP), 1.0 - _LOGIT_CLIP)
            out[k] = np.log(v / (1.0 - v))
        else:
            out[k] = v
    return out


def from_unconstrained(u, transforms):
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    for k, tr in enumerate(transforms):
        if tr == "log":
            out[k] = np.exp(u[k])
        elif tr == "logit":
            out[k] = 1.0 / (1.0 + np.exp(-u[k]))
        else:
            out[k] = u[k]
    return out


def transform_one(x, tr):
    return to_unconstrained(np.array([x]), (tr,))[0]


def untransform_one(u, tr):
    return from_unconstrained(np.array([u]), (tr,))[0]
