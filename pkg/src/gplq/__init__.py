"""GPLQ: two-stage low-bit quantization for small vision transformers.

Stage 1 trains activation quantizers (learned step sizes, straight-through
gradients) for a single epoch while weights stay at full precision, guided
by a feature-mimicking loss in a PCA subspace of the teacher's features.
Stage 2 quantizes the weights post-training and attaches closed-form linear
compensation layers.
"""

import os


def _cap_threads():
    # GPLQ_THREADS caps BLAS parallelism; must be applied before numpy loads.
    cap = os.environ.get("GPLQ_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
            os.environ.setdefault(var, cap)


_cap_threads()

__version__ = "0.1.0"
