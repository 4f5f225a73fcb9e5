"""Learned ESPIRiT map estimation from uniformly undersampled multi-coil MR data.

Submodules: ``kspace`` (FFT and sampling helpers), ``simulate`` (phantoms and
coil arrays), ``calibrate`` (ESPIRiT), ``geometry`` (rigid resampling),
``estimator`` (network, loss and training), ``recon`` (SENSE and
L1-ESPIRiT), ``metrics``, ``pipeline`` and ``io``/``cli``.
"""
__version__ = "0.1.0"
