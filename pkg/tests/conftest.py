import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from densetact.calibration import (calibrate, calibration_samples, detect_sawtooth_edges, equidistant_edge_radii,
                                   render_sawtooth_image)
from densetact.dataset import DatasetSpec, generate_dataset, load_dataset
from densetact.sensor import SensorModel

settings.register_profile("ci", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("ci")


@pytest.fixture(scope="session")
def model():
    return SensorModel()


@pytest.fixture(scope="session")
def cal(model):
    """Desk calibration from the rendered equidistant saw-tooth fixture (10 deg teeth)."""
    radii = equidistant_edge_radii(model, 10.0, 8)
    edges = detect_sawtooth_edges(render_sawtooth_image(model, radii), model, 10.0)
    return calibrate(model, calibration_samples(edges, model), tooth_interval_deg=10.0)


@pytest.fixture(scope="session")
def small_dataset(cal, tmp_path_factory):
    out = tmp_path_factory.mktemp("ds_small")
    generate_dataset(cal, DatasetSpec(n=12, n_test=2, seed=5), out)
    return out


@pytest.fixture(scope="session")
def desk_dataset_path(cal, tmp_path_factory):
    out = tmp_path_factory.mktemp("ds_desk")
    generate_dataset(cal, DatasetSpec(n=200, n_test=20, seed=3), out)
    return out


@pytest.fixture(scope="session")
def desk_dataset(desk_dataset_path):
    return load_dataset(desk_dataset_path)


def rng_for(seed):
    return np.random.default_rng(seed)


DESK_TRAIN = dict(epochs=60, lr=3e-3, batch_size=4, seed=3, schedule="cosine", warmup_steps=100)


@pytest.fixture(scope="session")
def desk_training(desk_dataset):
    """The desk-scale acceptance run, trained once and shared."""
    from densetact.recon import ReconNet, TrainConfig, train
    import time
    t0 = time.perf_counter()
    res = train(ReconNet(seed=3), desk_dataset, TrainConfig(**DESK_TRAIN))
    return res, time.perf_counter() - t0


def bumpy_patch(n=2000, seed=0, amp=2.0):
    """Full-hemisphere patch of radius 25 with three Gaussian bumps (no rotational symmetry)."""
    rng = np.random.default_rng(seed)
    theta = np.arccos(rng.uniform(0.0, 1.0, n))
    psi = rng.uniform(0.0, 2 * np.pi, n)

    def bump(t0, p0, w):
        return np.exp(-((theta - t0) ** 2 + (psi - p0) ** 2) / w)

    r = 25.0 + amp * (2.5 * bump(0.5, 1.0, 0.05) + 2.0 * bump(0.9, 4.0, 0.08) - 2.0 * bump(1.2, 2.5, 0.1))
    st = np.sin(theta)
    return np.stack([r * st * np.cos(psi), r * st * np.sin(psi), r * np.cos(theta)], axis=1)


def random_perturbation(seed, max_deg=20.0, max_shift=2.5):
    from densetact.geometry import RigidPose, axis_angle
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(0.0, max_deg))
    shift = rng.normal(size=3)
    shift *= rng.uniform(0.0, max_shift) / np.linalg.norm(shift)
    return RigidPose(axis_angle(axis, angle), shift)
