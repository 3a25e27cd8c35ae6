"""Exception types raised across the package."""


class DenseTactError(Exception):
    """Base class; ``module``/``operation`` feed the CLI's structured messages."""

    module = "densetact"
    operation = ""


class DepthRangeError(DenseTactError, ValueError):
    module, operation = "sensor_geometry", "encode_depth"


class GeometryMismatchError(DenseTactError, ValueError):
    pass


class CalibrationError(DenseTactError):
    module, operation = "sensor_geometry", "detect_sawtooth_edges"


class AlignmentError(CalibrationError):
    pass


class GpInconsistencyError(DenseTactError, ValueError):
    module, operation = "sensor_geometry", "fit_gp"


class GpHyperparameterError(DenseTactError, ValueError):
    module, operation = "sensor_geometry", "fit_gp"


class OverPressError(DenseTactError):
    module, operation = "sim_pipeline", "ground_truth_depth"

    def __init__(self, message: str, max_violation_mm: float):
        super().__init__(message)
        self.max_violation_mm = max_violation_mm


class ShapeError(DenseTactError, ValueError):
    module = "recon_net"


class NonFiniteLossError(DenseTactError, FloatingPointError):
    module, operation = "recon_net", "backward_and_step"


class DatasetError(DenseTactError):
    module = "recon_net"
    operation = "train"


class DegenerateRegistrationError(DenseTactError):
    module, operation = "pointcloud_eval", "icp_point_to_point"

    def __init__(self, message: str, last_pose):
        super().__init__(message)
        self.last_pose = last_pose


class FormatError(DenseTactError, ValueError):
    pass
