"""Shared fixtures; the heavyweight pixel-surface maps build once per session."""

import pytest

from rolltact.config import Config
from rolltact.geometry import geometry_from_config, hand_from_config
from rolltact.optics import camera_from_config, surface_map_from_config
from rolltact.percept import PerceptParams, PerceptPipeline, build_reference_table
from rolltact.synth import render_reference_spin, rig_from_config


@pytest.fixture(scope="session")
def cfg():
    return Config.default()


@pytest.fixture(scope="session")
def geom(cfg):
    return geometry_from_config(cfg)


@pytest.fixture(scope="session")
def hand(cfg):
    return hand_from_config(cfg)


@pytest.fixture(scope="session")
def cam_direct(cfg):
    return camera_from_config(cfg, with_mirror=False)


@pytest.fixture(scope="session")
def cam_mirror(cfg):
    return camera_from_config(cfg, with_mirror=True)


@pytest.fixture(scope="session")
def pmap_direct(cfg, cam_direct):
    return surface_map_from_config(cfg, cam=cam_direct)


@pytest.fixture(scope="session")
def pmap_mirror(cfg, cam_mirror):
    return surface_map_from_config(cfg, cam=cam_mirror)


@pytest.fixture(scope="session")
def rig(cfg, cam_mirror, pmap_mirror):
    return rig_from_config(cfg, cam=cam_mirror, pmap=pmap_mirror)


@pytest.fixture(scope="session")
def spin360(rig):
    return render_reference_spin(rig, 360)


@pytest.fixture(scope="session")
def table(cfg, rig, spin360):
    return build_reference_table(spin360, rig.pmap, rig.cam,
                                 band_px=rig.encoder_band_px,
                                 bit_px=rig.encoder_bit_px)


@pytest.fixture(scope="session")
def percept_params(cfg):
    return PerceptParams.from_config(cfg)


@pytest.fixture(scope="session")
def pipe(table, rig, percept_params):
    return PerceptPipeline(table, rig, percept_params, seed=0)
