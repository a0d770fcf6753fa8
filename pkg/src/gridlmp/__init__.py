"""Locational marginal prices from convex relaxations of AC and hybrid AC/DC OPF."""

__version__ = "0.1.0"

from .casefile import emit_json, load_grid, parse_json, parse_matpower, to_grid  # noqa: E402
from .grid import Grid, upgrade_to_hybrid  # noqa: E402
from .pricing import PricingReport, certify, price  # noqa: E402
from .socr import solve_socr  # noqa: E402

__all__ = ["Grid", "PricingReport", "certify", "emit_json", "load_grid", "parse_json",
           "parse_matpower", "price", "solve_socr", "to_grid", "upgrade_to_hybrid", "__version__"]
