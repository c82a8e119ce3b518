import os
import sys

# Cap BLAS threads before numpy initializes: the suite's GP matrices are
# small and thread handoff dominates on the low-core CI hosts.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.dirname(__file__))
