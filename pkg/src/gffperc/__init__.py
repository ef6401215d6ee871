"""Level-set percolation toolkit for the lattice Gaussian free field.

Zero-boundary field simulation on boxes of Z^d (d = 3, 4), discrete
potential theory (Green functions, equilibrium measures, capacities),
multi-scale coarse-grainings of crossing paths, mean-shift importance
sampling for rare connection events, and a reproducible experiment
runner behind the ``gffperc`` command-line tool.
"""

from . import (
    capfast,
    cli,
    coarse,
    events,
    field,
    greens,
    lattice,
    potential,
    rng,
    runner,
    stats,
    tilt,
)
from .capfast import *  # noqa: F401,F403
from .coarse import *  # noqa: F401,F403
from .events import *  # noqa: F401,F403
from .field import *  # noqa: F401,F403
from .greens import *  # noqa: F401,F403
from .lattice import *  # noqa: F401,F403
from .potential import *  # noqa: F401,F403
from .rng import *  # noqa: F401,F403
from .runner import *  # noqa: F401,F403
from .stats import *  # noqa: F401,F403
from .tilt import *  # noqa: F401,F403

try:
    from importlib.metadata import version as _pkg_version

    __version__ = _pkg_version("gffperc")
except Exception:  # pragma: no cover - not installed
    __version__ = "0+unknown"

__all__ = ["__version__", "capfast", "cli", "coarse", "events", "field",
           "greens", "lattice", "potential", "rng", "runner", "stats",
           "tilt"]
for _m in (lattice, greens, potential, capfast, field, events, stats, rng,
           tilt, coarse, runner):
    __all__ += list(_m.__all__)
del _m
