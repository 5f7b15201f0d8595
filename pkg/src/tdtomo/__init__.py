"""Time-resolved angularly averaged boundary transport on the unit disc/ball.

Forward synthesis of pulsed boundary measurements of linear transport
(ballistic, single-, and double-scatter terms, plus Monte Carlo), and
recovery of the absorption and the spatial scattering factor from the
singular-in-time structure of those measurements.
"""

__version__ = "0.1.0"

from . import geometry, kernels, optics, recon, transport, verify, xray  # noqa: F401
