"""Object pose from reference views via box-corner heatmaps.

Modules: ``geom3d`` (poses, projection, boxes), ``heatmap`` (corner codec),
``pnp`` (DLT + Levenberg-Marquardt), ``nn`` (the transformer), ``train``,
``eval`` (metrics and reference selection), ``scene`` (synthetic data),
``io`` (file formats) and ``cli``.
"""

__version__ = "0.1.0"
