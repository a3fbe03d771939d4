"""Counter-based random streams keyed by purpose.

Every draw in an experiment comes from a Philox generator whose key is
derived from ``(seed, replicate, label, step, member)``.  Streams never
depend on how many draws other streams made, so member forecasts and
replicates can run in any order.
"""

import zlib

import numpy as np

__all__ = ["stream", "label_code", "normal_rows", "PerturbationSource"]


def label_code(label):
    return zlib.crc32(label.encode("utf-8"))


def stream(seed, replicate, label, step=0, member=0):
    """Independent generator for one (replicate, purpose, step, member) cell."""
    ss = np.random.SeedSequence([int(seed), int(replicate), label_code(label), int(step), int(member)])
    return np.random.Generator(np.random.Philox(ss))


def normal_rows(seed, replicate, label, step, n_members, size):
    """Stack of standard normal rows, row ``m`` drawn from member stream ``m``."""
    out = np.empty((n_members, size))
    for m in range(n_members):
        out[m] = stream(seed, replicate, label, step, m).standard_normal(size)
    return out


class PerturbationSource:
    """Perturbed-data draws for one replicate, keyed by label and step."""

    def __init__(self, seed, replicate=0):
        self.seed = int(seed)
        self.replicate = int(replicate)

    def draws(self, label, step, n_members, size):
        return normal_rows(self.seed, self.replicate, label, step, n_members, size)

    def __repr__(self):
        return f"PerturbationSource(seed={self.seed}, replicate={self.replicate})"
