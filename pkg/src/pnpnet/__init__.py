"""Pull-push boundary refinement for volumetric segmentation.

Submodules are imported explicitly (for example `from pnpnet import model`);
this file stays import-free so the command-line entry point can configure
threading before any numeric library loads.
"""

__version__ = "1.0.0"
