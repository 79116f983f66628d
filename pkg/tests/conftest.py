import json

import pytest

from tinydet_kit.archspec import builtin_arch


@pytest.fixture(scope="session")
def tinydet_m():
    return builtin_arch("tinydet-m")


@pytest.fixture(scope="session")
def tinydet_s():
    return builtin_arch("tinydet-s")


@pytest.fixture(scope="session")
def tinydet_l():
    return builtin_arch("tinydet-l")


TOY_ARCH = {
    "name": "toy",
    "input_size": 16,
    "backbone": [
        {"kind": "conv2d", "kernel": 3, "stride": 2, "in_channels": 3,
         "out_channels": 4, "nonlinearity": "relu", "feeds_fpn": False},
        {"kind": "bneck", "kernel": 3, "stride": 2, "in_channels": 4,
         "out_channels": 6, "expansion_size": 8, "use_se": True,
         "nonlinearity": "hswish", "feeds_fpn": False},
        {"kind": "bneck", "kernel": 3, "stride": 1, "in_channels": 6,
         "out_channels": 6, "expansion_size": 6, "use_se": False,
         "nonlinearity": "relu", "feeds_fpn": False},
    ],
    "fpn_levels": [],
    "rpn": {"anchor_sizes": [], "aspect_ratios": [0.5, 1.0, 2.0]},
    "rcnn": {},
}

# Single stride-16 pyramid level carrying one 12.8 px square anchor per cell.
GRID16_ARCH = {
    "name": "grid16",
    "input_size": 320,
    "backbone": [
        {"kind": "conv2d", "kernel": 3, "stride": 2, "in_channels": 3,
         "out_channels": 8, "nonlinearity": "relu", "feeds_fpn": False},
        {"kind": "conv2d", "kernel": 3, "stride": 2, "in_channels": 8,
         "out_channels": 8, "nonlinearity": "relu", "feeds_fpn": False},
        {"kind": "conv2d", "kernel": 3, "stride": 2, "in_channels": 8,
         "out_channels": 8, "nonlinearity": "relu", "feeds_fpn": False},
        {"kind": "conv2d", "kernel": 3, "stride": 2, "in_channels": 8,
         "out_channels": 8, "nonlinearity": "relu", "feeds_fpn": True},
    ],
    "fpn_levels": [
        {"stride": 16, "lateral_in_channels": 8, "channels": 245,
         "scconv_groups": 1},
    ],
    "rpn": {"anchor_sizes": [12.8], "aspect_ratios": [1.0]},
    "rcnn": {},
}


@pytest.fixture
def toy_arch_path(tmp_path):
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(TOY_ARCH), encoding="utf-8")
    return path


@pytest.fixture
def grid16_arch_path(tmp_path):
    path = tmp_path / "grid16.json"
    path.write_text(json.dumps(GRID16_ARCH), encoding="utf-8")
    return path


COCO_DOC = {
    "images": [
        {"id": 1, "width": 320, "height": 320},
        {"id": 2, "width": 640, "height": 480},
    ],
    "annotations": [
        {"id": 10, "image_id": 1, "bbox": [10, 20, 30, 40], "iscrowd": 0},
        {"id": 11, "image_id": 1, "bbox": [100, 100, 24, 24], "iscrowd": 0},
        {"id": 12, "image_id": 1, "bbox": [40, 40, 8, 8], "iscrowd": 1},
        {"id": 13, "image_id": 2, "bbox": [300, 200, 120, 150], "iscrowd": 0},
        {"id": 14, "image_id": 2, "bbox": [50, 50, 0, 10], "iscrowd": 0},
    ],
    "categories": [{"id": 1, "name": "thing"}],
}


@pytest.fixture
def coco_path(tmp_path):
    path = tmp_path / "instances.json"
    path.write_text(json.dumps(COCO_DOC), encoding="utf-8")
    return path
