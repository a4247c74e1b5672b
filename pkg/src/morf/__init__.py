"""Self-hostable experiment orchestration for privacy-restricted learner data.

The platform accepts containerized experiments plus a small controller
script, runs them against registered course data inside network-restricted
sandboxes, evaluates predictions platform-side, and archives every artifact
under a persistent identifier. Only summary results ever leave the platform.
"""

__version__ = "0.1.0"

from morf.errors import MorfError

__all__ = ["MorfError", "__version__"]
