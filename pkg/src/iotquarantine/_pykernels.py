"""Pure numpy versions of the hot loops.  Same signatures as ``_ckernels``."""

from __future__ import annotations

import numpy as np


def tally_rounds(classes, unit_phase, whole, frac, frame_bits, expected_bits, nclasses):
    """Per-round measured bits, expected bits and device counts per class.

    ``classes`` and ``unit_phase`` are (rounds, n) arrays.
    """
    classes = np.ascontiguousarray(classes, dtype=np.int64)
    rounds = classes.shape[0]
    frames = whole[classes] + (unit_phase < frac[classes])
    measured = (frames * frame_bits[classes]).sum(axis=1)
    expected = expected_bits[classes].sum(axis=1)
    offsets = classes + nclasses * np.arange(rounds, dtype=np.int64)[:, None]
    counts = np.bincount(offsets.ravel(), minlength=rounds * nclasses).reshape(rounds, nclasses)
    return measured, expected, counts


def shift_convolve(mass, offsets, weights, stay_weight):
    """One step of ``X + Y`` where Y is ``offsets[j]`` w.p. ``weights[j]`` or 0 w.p. ``stay_weight``."""
    mass = np.asarray(mass, dtype=np.float64)
    size = mass.shape[0]
    out = np.zeros(size + int(max(offsets, default=0)), dtype=np.float64)
    if stay_weight:
        out[:size] += stay_weight * mass
    for offset, weight in zip(offsets, weights):
        if weight:
            out[offset : offset + size] += weight * mass
    return out
