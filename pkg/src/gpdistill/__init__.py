"""gpdistill: distill a trained feed-forward predictor into per-head
inducing-point Gaussian processes with a learned dot-product kernel, then
explain the predictor's decisions through kernel-space nearest neighbors and
per-location similarity-contribution maps.

Layout:

* :mod:`gpdistill.numkit` — strict-shape linear algebra + Jacobi eigensolver
* :mod:`gpdistill.autodiff` — reverse-mode tape over numpy arrays
* :mod:`gpdistill.nets` — layers, predictor, kernel mapper, Adam
* :mod:`gpdistill.lowrank` — O(MD + D³) solves against (AAᵀ + σ²I), Gram cache
* :mod:`gpdistill.gpcore` — inducing store and GP posterior per head
* :mod:`gpdistill.distill` — losses and the kernel-mapper training loop
* :mod:`gpdistill.explain` — neighbors, contribution maps, faithfulness, debug
* :mod:`gpdistill.datasets` / :mod:`config` / :mod:`checkpoint` /
  :mod:`reports` — data loading, config, serialization, report files
* :mod:`gpdistill.pipelines` / :mod:`gpdistill.cli` — end-to-end stages and
  their command-line entry points
"""

__version__ = "0.1.0"
