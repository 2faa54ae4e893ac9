"""Semi-supervised land-use/land-cover segmentation for sparsely labelled
geospatial imagery: rasterization, chipping, dual-model consistency training,
and mosaic-level recall evaluation."""

__version__ = "0.1.0"
