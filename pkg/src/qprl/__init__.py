"""Reinforcement learning on a differentiable parametric QP.

One parameter set models the value function, the Q-function and the policy;
training algorithms, benchmark environments, an MPC baseline and a seeded
experiment harness sit on top.
"""

import os

# The dense problems here are tiny; threaded BLAS only adds sync stalls.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .errors import (ConfigError, CorruptFileError, EnvMismatchError,  # noqa: E402,F401
                     InfeasibleError, MaxIterationsError, QprlError,
                     RankDeficientError, SingularKktError,
                     VersionMismatchError)

__version__ = "0.1.0"
