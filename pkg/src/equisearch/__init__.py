"""Group-equivariant networks with searchable equivariance constraints.

The package is organized around a small chain of ideas: discrete point
groups acting on kernels and channels (`groups`), a reverse-mode autodiff
engine on numpy arrays (`autodiff`), group convolutions plus the exact
relaxation morphism between them (`gconv`), a configurable backbone
(`model`), and two search drivers over per-layer equivariance
constraints (`nas_evo`, `nas_diff`).
"""

from . import groups
from . import autodiff

__version__ = "0.1.0"

__all__ = ["groups", "autodiff"]
from . import gconv
from . import model
from . import data
from . import train
from . import nas_evo
from . import nas_diff
from . import checkpoint
from . import reports
from . import verify
from . import cli
