"""Tree-cover segmentation from incomplete point labels.

Modules: ``ingest`` (rasters, vectors, tiling), ``labelgen`` (tri-state
labels), ``objectness`` (watershed prior), ``maskgen`` (scenario masks),
``losses``, ``model``, ``trainer``, ``evaluation``, ``synthcity``
(synthetic scenes), ``pipeline``/``cli`` (orchestration) and ``report``.
"""

__version__ = "0.1.0"
