"""plseg: training strategies for lesion segmentation from partially labelled 3D volumes."""

__version__ = "0.1.0"
