"""Fine-grained pillar feature encoding for LiDAR point clouds.

Points are binned into a bird's-eye-view pillar grid, re-partitioned along
vertical, temporal, and half-cell-shifted horizontal virtual grids, encoded
per partition, and fused into one feature vector per pillar.  Everything runs
on a small float64 tape-autodiff kernel (``fgpfe.nd``) so gradients can be
verified against finite differences.

Submodules are imported explicitly (``fgpfe.pcio``, ``fgpfe.gridding``, ...);
this package root stays import-light so the CLI can pin BLAS thread counts
before numpy loads.
"""

__version__ = "0.1.0"
