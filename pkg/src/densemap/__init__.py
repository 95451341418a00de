"""Volumetric reconstruction: hashed TSDF fusion, observation-masked TV
regularization, variational stereo and mesh evaluation."""

__version__ = "0.1.0"
