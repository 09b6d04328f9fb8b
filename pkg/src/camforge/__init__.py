"""Attention-refined class activation maps with training-time attention noise."""
import os

if "CAMFORGE_THREADS" in os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["CAMFORGE_THREADS"])

__version__ = "0.1.0"
