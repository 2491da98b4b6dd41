import os

# Pin BLAS to one thread before numpy loads anywhere: keeps small-matrix
# results bit-reproducible across runs, which the determinism tests assert.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
