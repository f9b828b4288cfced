import os
import sys

# keep tiny-matrix BLAS calls single-threaded; oversubscription only slows
# these workloads down
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

sys.path.insert(0, os.path.dirname(__file__))
