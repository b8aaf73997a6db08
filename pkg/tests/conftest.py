import os

# Pin BLAS to one thread before numpy loads: timings in this suite assume a
# single core, and OpenBLAS threading is slower at these matrix sizes anyway.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
