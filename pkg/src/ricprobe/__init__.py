"""Monte Carlo probes of Ricci curvature and the second fundamental form.

The toolkit simulates reflecting diffusions with horizontal frames and uses
them to estimate curvature from short-time asymptotics, to check the
path-space gradient, log-Sobolev and Poincare inequalities, and to
study conformal changes of metric.
"""

from .bounds import Bounds, true_bounds
from .diffusion import PathEnsemble, PathSample, SimConfig, simulate, simulate_ensemble, step
from .errors import *  # noqa: F401,F403
from .geometry import ConformalDisk, HalfSpace, RadialDrift, Sphere, SphericalCap

__version__ = "0.1.0"
