"""Safe cooperative merging at an unsignalized junction.

Modules: ``traffic`` (IDM merge simulator), ``qp`` (dense QP solver),
``planner`` (worst-case jerk MPC), ``nn`` and ``dqn`` (Deep-Sets double DQN),
``policies``, ``bench`` (episodes, metrics, sweeps), ``training`` and ``cli``.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # source checkout without install
    __version__ = "0.1.0"
