"""Low-rank augmented Lagrangian solver for doubly nonnegative relaxations
of mixed-binary quadratic programs."""

__version__ = "0.1.0"
