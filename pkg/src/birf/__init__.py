"""Binary radiance fields: sign-binarized hybrid hash grids for compact novel-view synthesis."""

__version__ = "0.1.0"
