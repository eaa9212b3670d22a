"""gratingscope: a simulated grating-interferometry X-ray imaging platform.

Virtual beamline (tube, piezo, flat-panel detector, phantoms), a
motion-controller protocol emulator, phase-stepping acquisition, Fourier
signal retrieval, and a control service with an operator console API.
"""

from ._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
