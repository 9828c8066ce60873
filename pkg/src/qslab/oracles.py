"""Frozen empirical constants, regenerated by
tools/record_oracles.py. Hand edits will be overwritten.
"""

from __future__ import annotations

# singular self-similar CDF: deviation floor and per-level minima
KAHANE_RHO = 0.1
KAHANE_J = 8
KAHANE_C0 = 0.048888132661290766
KAHANE_LEVEL_MIN_OMEGA = [
    0.051461192275042915,
    0.11134274937252325,
    0.08589688515213732,
    0.10092839355981181,
    0.07628592904103462,
    0.103236152990164,
    0.08309818104104574,
    0.07030364279901462,
    0.09874677440643863,
]

# deviation-sum / gradient-energy ratios of the windowed fields,
# keyed (field, dim, depth); brackets span the recorded depths
DORRONSORO_RATIOS = {
    ('bump', 1, 5): 0.020795817851290917,
    ('bump', 1, 6): 0.02084297923616641,
    ('bump', 1, 7): 0.020855423041220993,
    ('bump', 2, 5): 0.015204372560907193,
    ('bump', 2, 6): 0.015247593321093211,
    ('bump', 2, 7): 0.015258739033248477,
    ('ripple', 1, 5): 0.03395820539537097,
    ('ripple', 1, 6): 0.03429067201039025,
    ('ripple', 1, 7): 0.034374370323690166,
    ('ripple', 2, 5): 0.0227535437353172,
    ('ripple', 2, 6): 0.022937069297783275,
    ('ripple', 2, 7): 0.022983291092691174,
    ('well', 1, 5): 0.027774639601022864,
    ('well', 1, 6): 0.027866702814185587,
    ('well', 1, 7): 0.027891370065529886,
    ('well', 2, 5): 0.020196317008403762,
    ('well', 2, 6): 0.02028568443595826,
    ('well', 2, 7): 0.020308862367745192,
}

DORRONSORO_BRACKETS = {
    ('bump', 1): (0.020795817851290917, 0.020855423041220993),
    ('bump', 2): (0.015204372560907193, 0.015258739033248477),
    ('ripple', 1): (0.03395820539537097, 0.034374370323690166),
    ('ripple', 2): (0.0227535437353172, 0.022983291092691174),
    ('well', 1): (0.027774639601022864, 0.027891370065529886),
    ('well', 2): (0.020196317008403762, 0.020308862367745192),
}
