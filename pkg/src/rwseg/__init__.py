"""Volumetric multi-label random-walks segmentation toolkit.

Submodules
----------
volume      volumes, seed maps, soft segmentations, file formats
lattice     6-neighborhood graphs, edge weights, sparse Laplacians
rw_solver   prior-augmented random-walks energy minimization (PCG)
simplex_qp  simplex projection and the small projected-gradient QP solver
aci         dual-decomposition solver for simplex-constrained inference
learning    max-margin weight learning (latent-SVM upper bound)
cli         the ``seg`` command line tool
service     HTTP service backing the scribble front end
"""

__version__ = "0.1.0"
