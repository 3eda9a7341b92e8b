import numpy as np

from .. import ndgrid as nd
from ..errors import ConfigError, DataError, ShapeError

LOSSES = ("l1", "l2", "huber", "disparity")
HUBER_DELTA = 1.0
DISPARITY_FLOOR = 1e-3


def loss_eval(pred, target, kind="l1", delta=HUBER_DELTA, mask=None):
    """Mean penalty between a prediction grid and a target array.

    ``disparity`` maps both sides to ``M / depth`` with M the target maximum
    and then applies l1. Predictions are floored at DISPARITY_FLOOR first so
    the reciprocal stays finite.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError("loss operands differ in shape", expected=target.shape, got=pred.shape)
    if kind == "disparity":
        if (target <= 0).any():
            raise DataError("disparity loss needs strictly positive target depth")
        m = float(target.max())
        pred = nd.reciprocal(nd.clamp_min(pred, DISPARITY_FLOOR), m)
        target = (m / target).astype(pred.dtype)
        kind = "l1"
    err = nd.sub(pred, target)
    if mask is not None:
        err = nd.mul(err, np.asarray(mask, dtype=pred.dtype))
    if kind == "l1":
        per_px = nd.absolute(err)
    elif kind == "l2":
        per_px = nd.square(err)
    elif kind == "huber":
        per_px = nd.huber(err, delta)
    else:
        raise ConfigError(f"unknown loss {kind!r}", choices=list(LOSSES))
    return nd.mean_all(per_px)
