"""asfseg: 2.5D adjacent-slice-fusion segmentation at desk scale."""

import os

# The engine issues many small GEMMs; threaded BLAS loses to its own
# dispatch overhead at these sizes. Respect explicit user settings.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
