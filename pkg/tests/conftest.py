import os

# single-threaded BLAS: faster on the tiny matrices used here and keeps
# reductions bit-reproducible; must be set before numpy loads
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
