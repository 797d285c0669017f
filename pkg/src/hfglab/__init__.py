"""High-frequency spacetime laboratory.

A numerics workbench for oscillatory metric ansatz stacks: Lorentzian tensor
calculus with verified finite differencing, eikonal phase families and null
frames, polarization algebra, the explicit profile hierarchy with its
transport equations, oscillatory initial data via the conformal method, and
lambda-scan experiments measuring curvature/constraint cancellation orders.
"""

__version__ = "0.1.0"
