"""Python bindings of the TOAN few-shot fine-grained classifier."""

import json as _json

from ._toan import (
    Model,
    ToanError,
    build_id,
    generate_synthetic as _generate_synthetic,
    load_image_folder,
    run_cli,
    verify,
)


def create_model(seed=1, **config):
    """New model; keyword arguments override ModelConfig fields by JSON name."""
    return Model.create(_json.dumps(config), seed)


def generate_synthetic(**spec):
    """(images [n, 3, s, s] float32, labels [n] int32, class names).

    Keyword arguments override SyntheticSpec fields by JSON name.
    """
    return _generate_synthetic(_json.dumps(spec))


def load_model(path):
    return Model.load(str(path))


__all__ = [
    "Model",
    "ToanError",
    "build_id",
    "create_model",
    "generate_synthetic",
    "load_image_folder",
    "load_model",
    "run_cli",
    "verify",
]
