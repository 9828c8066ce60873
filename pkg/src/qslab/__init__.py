"""Numerical laboratory for multiscale affine structure of embeddings.

The package measures how far a map f: R^d -> R^D deviates from affine
behaviour across a dyadic hierarchy of cubes, decomposes the hierarchy
into regions where one affine model persists, rebuilds the map from the
per-region models via Whitney partitions, and extracts large subsets on
which the map is bi-Lipschitz with an audited constant.

Layout:

- ``cubes``:      dyadic grids, shifted grids, cube sets, region distances
- ``maps``:       test map families (analytic, singular, sampled) and
                  metric diagnostics (distortion envelopes, Holder fits)
- ``affine``:     affine fitting and the scale-invariant deviation numbers
- ``carleson``:   deviation fields, multiscale square-sum accounting,
                  dyadic maximal functions and weight diagnostics
- ``corona``:     stopping-time decomposition of a deviation field
- ``extension``:  Whitney covers, partitions of unity, the glued affine
                  extension of a region, and complement geometry sums
- ``extract``:    generation counting and bi-Lipschitz subset extraction
- ``cli``:        reproducible experiment driver (CSV/JSON/SVG reports)
"""

__version__ = "0.1.0"
