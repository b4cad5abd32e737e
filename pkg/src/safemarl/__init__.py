"""Safe multi-agent policy optimisation.

Exact tabular safe policy iteration with checkable guarantees, plus the
MACPO and MAPPO-Lagrangian trainers on small vectorised environments.
"""

__version__ = "0.1.0"

from .cmg import TabularCMG, TabularPolicy  # noqa: E402
from .config import TrainingConfig  # noqa: E402

__all__ = ["TabularCMG", "TabularPolicy", "TrainingConfig", "__version__"]
