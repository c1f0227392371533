"""Multidomain speech training data pathway.

Pooled-domain manifests, randomized acoustic perturbation (simulated rooms
and noise, 8 kHz round trips, codec round trips), a logmel frontend with
frame stacking, a bounded asynchronous feature queue, and cluster-validity
metrics for comparing domains.
"""

from mdpipe.audio import AudioBuffer, read_wav, write_wav

__version__ = "0.1.0"

__all__ = ["AudioBuffer", "read_wav", "write_wav", "__version__"]
