"""Wormhole Hamiltonian Monte Carlo for multimodal targets."""

from .geometry import Mode, ModeLibrary, WormholeNetwork
from .samplers import Sampler, SamplerConfig, Trace, run_chain

__all__ = ["Mode", "ModeLibrary", "WormholeNetwork", "Sampler", "SamplerConfig", "Trace", "run_chain"]
__version__ = "0.1.0"
