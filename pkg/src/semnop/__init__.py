"""semnop: functionality-preserving adversarial binaries against
gray-scale-image malware detectors, via semantic NOP insertion and a
masked Carlini-Wagner attack."""

__version__ = "0.1.0"

from . import attack, corpus, detector, emu, errors, images, isa, maskgen  # noqa: F401
