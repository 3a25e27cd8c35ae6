"""Dense tactile sensing on a hemispherical fisheye sensor: simulation, calibration,
depth reconstruction and point-cloud evaluation."""

__version__ = "0.1.0"
