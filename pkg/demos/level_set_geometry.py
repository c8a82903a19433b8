"""
Level-set geometry of a reaction coordinate
===========================================

The matrix ``Phi = grad xi a grad xi^T``, its square root ``A`` and the skew
projector ``Pi`` onto the level sets, evaluated on a few built-in systems.
The last part checks whether a two-dimensional coordinate admits a
complementary set of coordinates.
"""

import numpy as np

from effdyn.geometry import frobenius_obstruction, level_set_frame
from effdyn.systems import make_system

rng = np.random.default_rng(0)

###############################################################################
# Radius in the plane with anisotropic mobility ``diag(1, 2)``.  ``Phi`` is
# the mobility seen along the radial direction, so it ranges over [1, 2].
system = make_system("radial2d-aniso")
x = system.sample_equilibrium(rng, 5)
frame = level_set_frame(system.spec, x)
for p, phi in zip(x, frame.phi_mat[:, 0, 0]):
    angle = np.degrees(np.arctan2(p[1], p[0]))
    print(f"angle {angle:7.1f} deg   Phi = {phi:.4f}")

###############################################################################
# ``Pi`` is idempotent, kills the normal directions and is self-adjoint in the
# metric given by the mobility.
Pi, J, a = frame.Pi, frame.grad_xi, system.spec.a(x)
print("max |Pi Pi - Pi|      ", np.abs(Pi @ Pi - Pi).max())
print("max |Pi grad xi^T|     ", np.abs(Pi @ np.swapaxes(J, -1, -2)).max())
print("max |Pi^T a - a Pi|    ", np.abs(np.swapaxes(Pi, -1, -2) @ a - a @ Pi).max())

###############################################################################
# Integrability.  ``xi = (x1, x2 + x1 x3)`` in three dimensions has normal
# fields whose bracket leaves their span, so the residual stays well away
# from zero.  Scalar coordinates always pass.
twisted = make_system("twisted3d")
pts = rng.uniform(-2, 2, (500, 3))
res = frobenius_obstruction(twisted.spec, pts).residual
print(f"twisted3d residual: min {res.min():.3f}, max {res.max():.3f}")
res1 = frobenius_obstruction(system.spec, x).residual
print(f"radial2d-aniso residual: max {res1.max():.1e}")
