import numpy as np
import pytest

from ct_triage.models import ActivationMap, CaseBundle, LabelMap, Volume
from ct_triage.phantom import default_spec, generate_case


def build_bundle(
    lungs,
    abnormality=None,
    texture=None,
    hu=None,
    activation=None,
    lobes=None,
    spacing=(1.0, 1.0, 1.0),
    case_id="case",
    label=None,
    bronchial=None,
):
    """CaseBundle from plain arrays; omitted maps default to empty / -850 HU."""
    lungs = np.asarray(lungs, dtype=np.uint8)
    shape = lungs.shape
    zeros = np.zeros(shape, dtype=np.uint8)
    if hu is None:
        hu = np.where(lungs > 0, -850, 40)
    if lobes is None:
        lobes = np.where(lungs > 0, 1, 0)
    return CaseBundle(
        case_id=case_id,
        volume=Volume.from_array(np.asarray(hu, dtype=np.int16), spacing),
        lungs=LabelMap.from_array(lungs, spacing, "lungs"),
        lobes=LabelMap.from_array(np.asarray(lobes, dtype=np.uint8), spacing, "lobes"),
        abnormality=LabelMap.from_array(zeros if abnormality is None else np.asarray(abnormality, np.uint8), spacing, "abnormality"),
        texture=LabelMap.from_array(zeros if texture is None else np.asarray(texture, np.uint8), spacing, "texture"),
        activation=ActivationMap.from_array(
            np.zeros(shape, np.float32) if activation is None else np.asarray(activation, np.float32), spacing
        ),
        bronchial=None if bronchial is None else LabelMap.from_array(np.asarray(bronchial, np.uint8), spacing, "bronchial"),
        label=label,
    )


def sphere(shape, center, radius, spacing=(1.0, 1.0, 1.0)):
    axes = [np.arange(n) * s for n, s in zip(shape, spacing)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    c = [ci * s for ci, s in zip(center, spacing)]
    return (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2 <= radius**2


@pytest.fixture
def bundle_factory():
    return build_bundle


@pytest.fixture(scope="session")
def covid_case():
    return generate_case(default_spec("covid_like", seed=11))


@pytest.fixture(scope="session")
def other_case():
    return generate_case(default_spec("other_like", seed=12))
