"""Internal-model MPC: output regulation under unknown disturbances.

Subpackages are imported lazily by the CLI; library users import the modules
they need (``immpc.model``, ``immpc.mpc``, ...).
"""

__version__ = "0.1.0"
