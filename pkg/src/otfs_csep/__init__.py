"""Multi-user MIMO-OTFS link simulator and delay-Doppler channel estimator.

The package is organized around the delay-Doppler-space (DDS) signal model of
a cyclic-prefix OTFS uplink with a uniform linear array at the base station:

- :mod:`otfs_csep.core` -- frame geometry, Zadoff-Chu sequences, periodic
  Dirichlet kernels, array steering vectors.
- :mod:`otfs_csep.channel` -- sparse delay-Doppler path model, sampling,
  DDS channel matrices and serialization.
- :mod:`otfs_csep.modem` -- ISFFT/SFFT, time-frequency propagation and the
  received-cube fixture format.
- :mod:`otfs_csep.pilots` -- conventional (per-user segment) and
  superimposed shared-region pilot layouts, measurement matrices, overhead.
- :mod:`otfs_csep.estimator` -- ESPRIT angle estimation, spatial projection,
  simultaneous OMP, fractional refinement and the two estimation pipelines.
- :mod:`otfs_csep.analysis` -- pilot coherence analysis, NMSE/BER/SE metrics.
- :mod:`otfs_csep.cli` -- batch Monte-Carlo experiment runner.
"""

from otfs_csep.core import OtfsParams, dirichlet_xi, steering_vector, zc_sequence
from otfs_csep.channel import PathParams, UserChannel, max_doppler_taps, sample_channels

__all__ = [
    "OtfsParams",
    "PathParams",
    "UserChannel",
    "dirichlet_xi",
    "max_doppler_taps",
    "sample_channels",
    "steering_vector",
    "zc_sequence",
]

__version__ = "0.1.0"
