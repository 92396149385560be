"""Desk-scale diffusion editing engine.

Exact-replay inversion under a second-order multistep SDE solver, masked
multi-concept guidance, and config-driven experiment commands, all sized
to run on a laptop against analytic or tiny trained denoisers.
"""

__version__ = "0.1.0"
